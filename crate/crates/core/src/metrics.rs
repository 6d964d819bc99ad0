//! Alignment-quality metrics and variant comparison.
//!
//! A metrics sample summarizes one keyframe: how many observed planes were
//! associated with model walls and, averaged over those pairs, how far the
//! corrected planes still are from their walls in angle and in distance.
//! Angular values are kept in radians throughout the API; the CSV export
//! writes degrees for readability.

use crate::bim::BimModel;
use crate::geometry::{angular_deviation, distance_error, RigidTransform};
use crate::matching::MatchSet;
use crate::session::{KeyframeObservation, Session, SessionConfig, SessionError, Variant};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("variant comparison needs at least two variants including initial_manual")]
    InvalidVariants,
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("metrics csv line {line}: {message}")]
    ParseCsv { line: usize, message: String },
}

/// Per-keyframe evaluation result for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub keyframe_id: u64,
    pub variant: Variant,
    pub matched_count: usize,
    /// Mean angular deviation over matched pairs, radians. `None` when the
    /// keyframe had no associations.
    pub mean_angular_deviation: Option<f64>,
    /// Mean plane-to-wall distance over matched pairs, meters.
    pub mean_distance_error: Option<f64>,
}

/// Measures how well `transform` maps the matched mapping-frame planes onto
/// their walls. The match set must carry mapping-frame planes.
pub fn evaluate_keyframe(
    matches: &MatchSet,
    transform: &RigidTransform,
    variant: Variant,
) -> MetricsSample {
    let mut angular_sum = 0.0;
    let mut distance_sum = 0.0;
    for pair in &matches.pairs {
        let corrected = pair.plane.transformed(transform);
        angular_sum += angular_deviation(&corrected, &pair.wall.plane);
        distance_sum += distance_error(&corrected, &pair.wall.plane);
    }
    let n = matches.pairs.len();
    MetricsSample {
        keyframe_id: matches.keyframe_id,
        variant,
        matched_count: n,
        mean_angular_deviation: (n > 0).then(|| angular_sum / n as f64),
        mean_distance_error: (n > 0).then(|| distance_sum / n as f64),
    }
}

/// Unweighted means over the keyframes that produced a value.
pub fn pooled_means(samples: &[MetricsSample]) -> (Option<f64>, Option<f64>) {
    let mean = |values: Vec<f64>| {
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    };
    (
        mean(samples.iter().filter_map(|s| s.mean_angular_deviation).collect()),
        mean(samples.iter().filter_map(|s| s.mean_distance_error).collect()),
    )
}

/// Percentage improvement of `variant` over `baseline`; positive is better.
/// A zero baseline yields zero (there is nothing left to reduce).
pub fn reduction_percent(baseline: Option<f64>, variant: Option<f64>) -> f64 {
    let base = baseline.unwrap_or(0.0);
    let var = variant.unwrap_or(0.0);
    if base == 0.0 {
        0.0
    } else {
        100.0 * (base - var) / base
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSeries {
    pub variant: Variant,
    pub samples: Vec<MetricsSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantReduction {
    pub variant: Variant,
    pub angular_reduction_percent: f64,
    pub distance_reduction_percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub series: Vec<VariantSeries>,
    /// Pooled reductions versus the manual baseline, one per non-baseline
    /// variant, in input order.
    pub reductions: Vec<VariantReduction>,
}

/// Replays the same observation log through one session per variant and
/// reports per-keyframe series plus pooled reductions against the
/// `initial_manual` baseline, which must be among the variants.
pub fn compare_variants(
    model: &BimModel,
    keyframes: &[KeyframeObservation],
    config: &SessionConfig,
    variants: &[Variant],
) -> Result<ComparisonReport, MetricsError> {
    if variants.len() < 2 || !variants.contains(&Variant::InitialManual) {
        return Err(MetricsError::InvalidVariants);
    }
    let mut series = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut session = Session::new(model.clone(), variant, config.clone());
        let mut samples = Vec::with_capacity(keyframes.len());
        for kf in keyframes {
            samples.push(session.process_keyframe(kf)?);
        }
        series.push(VariantSeries { variant, samples });
    }
    let baseline = series
        .iter()
        .find(|s| s.variant == Variant::InitialManual)
        .expect("baseline presence checked above");
    let (base_ang, base_dist) = pooled_means(&baseline.samples);
    let reductions = series
        .iter()
        .filter(|s| s.variant != Variant::InitialManual)
        .map(|s| {
            let (ang, dist) = pooled_means(&s.samples);
            VariantReduction {
                variant: s.variant,
                angular_reduction_percent: reduction_percent(base_ang, ang),
                distance_reduction_percent: reduction_percent(base_dist, dist),
            }
        })
        .collect();
    Ok(ComparisonReport { series, reductions })
}

pub fn report_to_json(report: &ComparisonReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialization cannot fail")
}

// ====== CSV export / import ======

pub const CSV_HEADER: &str = "keyframe_id,variant,matched_count,mean_angular_deg,mean_distance_m";

/// Renders samples as CSV. Floats use the shortest representation that
/// parses back to the identical value; absent means become empty fields.
pub fn metrics_to_csv(samples: &[MetricsSample]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in samples {
        let angular = s
            .mean_angular_deviation
            .map(|a| a.to_degrees().to_string())
            .unwrap_or_default();
        let distance = s
            .mean_distance_error
            .map(|d| d.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.keyframe_id, s.variant, s.matched_count, angular, distance
        ));
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsSample>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == CSV_HEADER => {}
        _ => {
            return Err(MetricsError::ParseCsv {
                line: 1,
                message: format!("expected header `{CSV_HEADER}`"),
            })
        }
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(MetricsError::ParseCsv {
                line: i + 1,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_err = |message: String| MetricsError::ParseCsv { line: i + 1, message };
        let keyframe_id = fields[0]
            .parse::<u64>()
            .map_err(|e| parse_err(format!("keyframe_id: {e}")))?;
        let variant = fields[1]
            .parse::<Variant>()
            .map_err(|e| parse_err(e))?;
        let matched_count = fields[2]
            .parse::<usize>()
            .map_err(|e| parse_err(format!("matched_count: {e}")))?;
        let opt_float = |field: &str, name: &str| -> Result<Option<f64>, MetricsError> {
            if field.is_empty() {
                Ok(None)
            } else {
                field
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| parse_err(format!("{name}: {e}")))
            }
        };
        samples.push(MetricsSample {
            keyframe_id,
            variant,
            matched_count,
            mean_angular_deviation: opt_float(fields[3], "mean_angular_deg")?
                .map(f64::to_radians),
            mean_distance_error: opt_float(fields[4], "mean_distance_m")?,
        });
    }
    Ok(samples)
}
