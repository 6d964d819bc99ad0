//! Acceptance gate for the toolkit: one test per shipping criterion, each
//! printing a single PASS/FAIL line (visible with `--nocapture` and on
//! failure) with its tolerances pinned in the assertions. The drift fixture
//! used by the end-to-end criteria is frozen here on purpose; its numbers
//! are deterministic, so any change in them is a behavior change.

use std::time::Instant;

use bimdrift_core::bim::{split_walls, BimModel, WallSegment};
use bimdrift_core::estimation::{estimate_transform, linearize, EstimationConfig};
use bimdrift_core::geometry::{Plane, RigidTransform, Vec3};
use bimdrift_core::matching::{match_planes, MatchCandidate, MatchConfig, MatchPair, MatchSet};
use bimdrift_core::metrics::{compare_variants, pooled_means};
use bimdrift_core::session::{KeyframeObservation, Session, SessionConfig, Variant};
use bimdrift_core::simulator::{
    generate_scene, simulate, survey_waypoints, DriftModel, NoiseModel, SceneSpec,
};
use nalgebra::{Matrix4, UnitQuaternion, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Records a failed expectation instead of panicking immediately, so each
/// criterion reports everything that went wrong at once.
macro_rules! expect {
    ($failures:expr, $cond:expr, $($arg:tt)+) => {
        if !$cond {
            $failures.push(format!($($arg)+));
        }
    };
}

fn conclude(name: &str, failures: Vec<String>) {
    let ok = failures.is_empty();
    println!("{name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}:\n  {}", failures.join("\n  "));
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(gauss(rng), gauss(rng), gauss(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Random rigid transform with rotation angle ≤ `max_angle` and translation
/// norm ≤ `max_translation`.
fn random_transform(rng: &mut ChaCha8Rng, max_angle: f64, max_translation: f64) -> RigidTransform {
    let angle = rng.gen::<f64>() * max_angle;
    let axis = unit_vector(rng);
    let t = unit_vector(rng) * (rng.gen::<f64>() * max_translation);
    RigidTransform::from_rotation_vector(axis * angle, t)
}

fn wall(id: &str, corners: &[[f64; 3]]) -> WallSegment {
    let pts: Vec<Vec3> = corners.iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    WallSegment {
        id: id.to_string(),
        plane: Plane::from_corners(&pts).expect("test wall polygon"),
        parent_id: None,
        room_ids: Vec::new(),
    }
}

/// Pairs each wall with its own plane as seen from the mapping frame under
/// the true model-from-mapping transform, bypassing the matcher.
fn exact_pairs(walls: &[WallSegment], true_transform: &RigidTransform) -> MatchSet {
    let inverse = true_transform.inverse();
    let pairs = walls
        .iter()
        .map(|w| MatchPair {
            plane: w.plane.transformed(&inverse),
            wall: w.clone(),
            candidate: MatchCandidate {
                observed_plane_id: format!("obs_{}", w.id),
                wall_id: w.id.clone(),
                mahalanobis: 0.0,
                center_gap: 0.0,
                corner_gap: 0.0,
                area_ratio: 1.0,
            },
        })
        .collect();
    MatchSet { keyframe_id: 0, pairs }
}

/// The frozen end-to-end fixture: a 2x2 grid of 4 m rooms surveyed with a
/// serpentine pass plus two boundary laps, 150 keyframes at 0.25 m spacing,
/// random-walk drift with a small deterministic rightward/clockwise bias,
/// and 0.02-sigma detection noise. Seeds are fixed, so the stream is
/// byte-stable across runs.
fn drift_fixture(rot_rate: f64, trans_rate: f64) -> (BimModel, Vec<KeyframeObservation>) {
    let spec = SceneSpec { rooms_x: 2, rooms_y: 2, room_size: 4.0, seed: 7 };
    let model = split_walls(&generate_scene(&spec).expect("scene generation"));
    let route = survey_waypoints(&spec, 0.4);
    let drift = DriftModel {
        rot_rate,
        trans_rate,
        bias_rot: -0.0014,
        bias_trans: Vec3::new(0.004, 0.0, 0.0),
        seed: 7,
    };
    let noise = NoiseModel {
        sigma_normal: 0.02,
        sigma_offset: 0.02,
        sigma_centroid: 0.02,
        detection_prob: 1.0,
        seed: 7,
    };
    let (mut keyframes, _truth) =
        simulate(&model, &route, &drift, &noise, 0.25).expect("simulation");
    assert!(keyframes.len() >= 150, "route too short for the fixture");
    keyframes.truncate(150);
    (model, keyframes)
}

fn local_reduction(model: &BimModel, keyframes: &[KeyframeObservation]) -> (f64, f64) {
    let report = compare_variants(
        model,
        keyframes,
        &SessionConfig::default(),
        &[Variant::InitialManual, Variant::Global, Variant::Local],
    )
    .expect("comparison");
    let local = report
        .reductions
        .iter()
        .find(|r| r.variant == Variant::Local)
        .expect("local reduction present");
    (local.angular_reduction_percent, local.distance_reduction_percent)
}

// A transform with rotation within 15 degrees and translation within 1 m is
// recovered to 1e-6 from an identity start whenever the paired planes span
// three independent normal directions; here the four room walls plus the
// floor. Exercised over 20 seeded draws plus the boundary case.
#[test]
fn criterion_01_recovers_injected_transform_on_clean_scene() {
    let mut failures = Vec::new();
    let spec = SceneSpec { rooms_x: 1, rooms_y: 1, room_size: 4.0, seed: 0 };
    let scene = generate_scene(&spec).expect("scene generation");
    let mut walls = scene.walls.clone();
    walls.push(wall(
        "floor",
        &[[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [4.0, 4.0, 0.0], [0.0, 4.0, 0.0]],
    ));

    let max_angle = 15.0_f64.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cases: Vec<RigidTransform> = (0..20)
        .map(|_| random_transform(&mut rng, max_angle, 1.0))
        .collect();
    // The advertised envelope itself.
    cases.push(RigidTransform::from_rotation_vector(
        Vec3::new(0.0, 0.0, max_angle),
        Vec3::new(1.0, 0.0, 0.0),
    ));

    let mut slowest = 0.0_f64;
    for (i, truth) in cases.iter().enumerate() {
        let set = exact_pairs(&walls, truth);
        let started = Instant::now();
        let result = estimate_transform(&set, &RigidTransform::identity(), &EstimationConfig::default())
            .expect("estimation");
        slowest = slowest.max(started.elapsed().as_secs_f64());
        let rot_err = result.transform.rotation_angle_to(truth);
        let trans_err = result.transform.translation_distance_to(truth);
        expect!(failures, rot_err <= 1e-6, "case {i}: rotation error {rot_err:.3e} > 1e-6 rad");
        expect!(failures, trans_err <= 1e-6, "case {i}: translation error {trans_err:.3e} > 1e-6 m");
    }
    expect!(failures, slowest < 1.0, "slowest solve took {slowest:.3} s (limit 1 s)");
    conclude("criterion 01 exact recovery on a clean scene", failures);
}

// Two parallel walls constrain translation along their shared normal only.
// The solver must recover that component, leave the other two bit-identical
// to the initialization, and report translation rank 1 with the two
// untouched directions listed.
#[test]
fn criterion_02_parallel_walls_update_only_constrained_directions() {
    let mut failures = Vec::new();
    let walls = vec![
        wall("a", &[[0.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 4.0, 2.5], [0.0, 0.0, 2.5]]),
        wall("b", &[[4.0, 0.0, 0.0], [4.0, 4.0, 0.0], [4.0, 4.0, 2.5], [4.0, 0.0, 2.5]]),
    ];
    let truth = RigidTransform::from_rotation_vector(Vec3::zeros(), Vec3::new(0.3, 0.0, 0.0));
    let set = exact_pairs(&walls, &truth);

    let starts = [
        RigidTransform::identity(),
        RigidTransform::from_rotation_vector(Vec3::zeros(), Vec3::new(0.0, 0.123, -0.456)),
    ];
    for (i, start) in starts.iter().enumerate() {
        let result = estimate_transform(&set, start, &EstimationConfig::default()).expect("estimation");
        let t = result.transform.translation();
        let t0 = start.translation();
        expect!(failures, (t.x - 0.3).abs() <= 1e-6, "start {i}: t_x {:.9} not within 1e-6 of 0.3", t.x);
        expect!(failures, t.y == t0.y, "start {i}: unconstrained t_y moved from {} to {}", t0.y, t.y);
        expect!(failures, t.z == t0.z, "start {i}: unconstrained t_z moved from {} to {}", t0.z, t.z);
        let rot_err = result.transform.rotation_angle_to(&RigidTransform::identity());
        expect!(failures, rot_err <= 1e-6, "start {i}: rotation drifted {rot_err:.3e} rad");
        expect!(failures, result.rank == 1, "start {i}: reported rank {} (analytic rank 1)", result.rank);
        let expected = [Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)];
        expect!(
            failures,
            result.degenerate_directions == expected,
            "start {i}: degenerate directions {:?}",
            result.degenerate_directions
        );
    }
    conclude("criterion 02 parallel walls update only the constrained direction", failures);
}

/// Cost of a planar (yaw, t_x, t_y) state, recomputed from the residual
/// definition with no code shared with the estimator: squared
/// centroid-to-wall distance plus `lambda` times the squared chord between
/// the rotated observed normal (sign-matched to the wall) and the wall
/// normal.
fn planar_cost(
    pairs: &[(Vec3, f64, Vec3, Vec3)],
    yaw: f64,
    tx: f64,
    ty: f64,
    lambda: f64,
) -> f64 {
    let (c, s) = (yaw.cos(), yaw.sin());
    let rot = |v: &Vec3| Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
    let mut cost = 0.0;
    for (n_b, d_b, centroid, n_s) in pairs {
        let rs = rot(centroid);
        let mut rn = rot(n_s);
        if rn.dot(n_b) < 0.0 {
            rn = -rn;
        }
        let r0 = n_b.x * (rs.x + tx) + n_b.y * (rs.y + ty) + n_b.z * rs.z - d_b;
        cost += r0 * r0 + lambda * (rn - n_b).norm_squared();
    }
    cost
}

// On planar problems the Gauss-Newton minimum must be at least as good as an
// exhaustive grid search over (yaw, t_x, t_y) at 0.001 resolution around the
// injected truth. Ten seeded fixtures, under 30 seconds total.
#[test]
fn criterion_03_gauss_newton_cost_beats_planar_grid_search() {
    let mut failures = Vec::new();
    let spec = SceneSpec { rooms_x: 2, rooms_y: 1, room_size: 4.0, seed: 0 };
    let scene = generate_scene(&spec).expect("scene generation");
    let cfg = EstimationConfig::default();
    assert!(cfg.normal_weight == 1.0, "oracle below assumes the default unit normal weight");

    let started = Instant::now();
    for fixture in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + fixture);
        let yaw = (rng.gen::<f64>() * 2.0 - 1.0) * 0.015;
        let tx = (rng.gen::<f64>() * 2.0 - 1.0) * 0.02;
        let ty = (rng.gen::<f64>() * 2.0 - 1.0) * 0.02;
        let truth = RigidTransform::from_rotation_vector(Vec3::new(0.0, 0.0, yaw), Vec3::new(tx, ty, 0.0));

        let mut set = exact_pairs(&scene.walls, &truth);
        for pair in &mut set.pairs {
            // Slide each patch a little along its wall normal and along the
            // wall, keeping the problem exactly planar.
            let n = pair.plane.normal;
            let along = Vec3::new(-n.y, n.x, 0.0);
            pair.plane.centroid += n * (gauss(&mut rng) * 0.005) + along * (gauss(&mut rng) * 0.005);
        }

        let gn = estimate_transform(&set, &RigidTransform::identity(), &cfg).expect("estimation");

        let oracle_pairs: Vec<(Vec3, f64, Vec3, Vec3)> = set
            .pairs
            .iter()
            .map(|p| (p.wall.plane.normal, p.wall.plane.offset, p.plane.centroid, p.plane.normal))
            .collect();
        let mut grid_min = f64::INFINITY;
        for i in -20i64..=20 {
            let psi = yaw + i as f64 * 0.001;
            let (c, s) = (psi.cos(), psi.sin());
            let rot = |v: &Vec3| Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
            // Translation enters the cost linearly inside r0 only, so
            // everything else can be evaluated once per yaw sample.
            let per_wall: Vec<(f64, f64, f64, f64)> = oracle_pairs
                .iter()
                .map(|(n_b, d_b, centroid, n_s)| {
                    let rs = rot(centroid);
                    let mut rn = rot(n_s);
                    if rn.dot(n_b) < 0.0 {
                        rn = -rn;
                    }
                    (n_b.x, n_b.y, n_b.dot(&rs) - d_b, (rn - n_b).norm_squared())
                })
                .collect();
            for j in -30i64..=30 {
                let gx = tx + j as f64 * 0.001;
                for k in -30i64..=30 {
                    let gy = ty + k as f64 * 0.001;
                    let mut cost = 0.0;
                    for &(nx, ny, base, chord) in &per_wall {
                        let r0 = base + nx * gx + ny * gy;
                        cost += r0 * r0 + chord;
                    }
                    if cost < grid_min {
                        grid_min = cost;
                    }
                }
            }
        }
        // Consistency guard: the independent cost formula must agree with
        // the estimator's own accounting at the returned state.
        let (rot_axis, t) = (gn.transform.rotation().scaled_axis(), gn.transform.translation());
        let recomputed = planar_cost(&oracle_pairs, rot_axis.z, t.x, t.y, cfg.normal_weight);
        let agreement = (recomputed - gn.final_cost).abs();
        expect!(
            failures,
            agreement <= 1e-9 + 1e-6 * gn.final_cost,
            "fixture {fixture}: oracle cost {recomputed:.12e} disagrees with solver cost {:.12e}",
            gn.final_cost
        );
        expect!(
            failures,
            gn.final_cost <= grid_min,
            "fixture {fixture}: GN cost {:.12e} above grid minimum {grid_min:.12e}",
            gn.final_cost
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    expect!(failures, elapsed < 30.0, "grid comparison took {elapsed:.1} s (limit 30 s)");
    conclude("criterion 03 solver cost at or below planar grid search", failures);
}

// Feature-space gating at the module default threshold keeps at least 95% of
// noisy observations correctly assigned in a four-wall room over 100 seeded
// trials, with no cross-assignments.
#[test]
fn criterion_04_noisy_four_wall_room_assignment_rate() {
    let mut failures = Vec::new();
    // Room centered on the origin so every wall sits at offset 2 m: the
    // gate statistics are then purely about noise, not about which side of
    // the canonical-orientation boundary an observation lands on.
    let walls = vec![
        wall("west", &[[-2.0, -2.0, 0.0], [-2.0, 2.0, 0.0], [-2.0, 2.0, 2.5], [-2.0, -2.0, 2.5]]),
        wall("east", &[[2.0, -2.0, 0.0], [2.0, 2.0, 0.0], [2.0, 2.0, 2.5], [2.0, -2.0, 2.5]]),
        wall("south", &[[-2.0, -2.0, 0.0], [2.0, -2.0, 0.0], [2.0, -2.0, 2.5], [-2.0, -2.0, 2.5]]),
        wall("north", &[[-2.0, 2.0, 0.0], [2.0, 2.0, 0.0], [2.0, 2.0, 2.5], [-2.0, 2.0, 2.5]]),
    ];
    let model = BimModel { walls };
    let cfg = MatchConfig::default();
    assert!(cfg.tau == 9.488, "test pins the module default gate");

    let sigma = 0.02;
    let covariance = Matrix4::from_diagonal(&Vector4::new(
        sigma * sigma,
        sigma * sigma,
        sigma * sigma,
        sigma * sigma,
    ));
    let mut correct = 0usize;
    let mut wrong = 0usize;
    let mut unmatched = 0usize;
    let mut total = 0usize;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + trial);
        let observed: Vec<(String, Plane)> = model
            .walls
            .iter()
            .map(|w| {
                let mut normal = w.plane.normal
                    + Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)) * sigma;
                normal.normalize_mut();
                let offset = w.plane.offset + gauss(&mut rng) * sigma;
                let project = |p: &Vec3| p - normal * (normal.dot(p) - offset);
                let mut plane = Plane {
                    normal,
                    offset,
                    centroid: project(&w.plane.centroid),
                    corners: w.plane.corners.iter().map(project).collect(),
                    area: w.plane.area,
                    covariance,
                };
                plane.canonicalize();
                (format!("obs_{}", w.id), plane)
            })
            .collect();
        let set = match_planes(&observed, &model, &cfg, trial);
        for w in &model.walls {
            total += 1;
            let id = format!("obs_{}", w.id);
            match set.pairs.iter().find(|p| p.candidate.observed_plane_id == id) {
                Some(p) if p.candidate.wall_id == w.id => correct += 1,
                Some(_) => wrong += 1,
                None => unmatched += 1,
            }
        }
    }
    let rate = 100.0 * correct as f64 / total as f64;
    expect!(
        failures,
        rate >= 95.0,
        "correct-assignment rate {rate:.1}% < 95% ({correct}/{total}, {wrong} wrong, {unmatched} unmatched)"
    );
    expect!(failures, wrong == 0, "{wrong} observations matched a different wall");
    conclude("criterion 04 noisy four-wall room assignment rate", failures);
}

// On the frozen drift fixture the locally re-estimated transform removes at
// least 40% of the pooled angular error and 50% of the pooled distance
// error left by the initial manual alignment, within a minute.
#[test]
fn criterion_05_local_variant_reduction_on_drift_fixture() {
    let mut failures = Vec::new();
    let (model, keyframes) = drift_fixture(0.002, 0.005);
    let started = Instant::now();
    let (angular, distance) = local_reduction(&model, &keyframes);
    let elapsed = started.elapsed().as_secs_f64();
    expect!(failures, angular >= 40.0, "angular reduction {angular:.2}% < 40%");
    expect!(failures, distance >= 50.0, "distance reduction {distance:.2}% < 50%");
    expect!(failures, elapsed < 60.0, "comparison took {elapsed:.1} s (limit 60 s)");
    conclude("criterion 05 local reduction on the drift fixture", failures);
}

// Pooled error ordering on the drift fixture: local ≤ global ≤ uncorrected,
// for both the angular and the distance metric.
#[test]
fn criterion_06_variant_error_ordering_on_drift_fixture() {
    let mut failures = Vec::new();
    let (model, keyframes) = drift_fixture(0.002, 0.005);
    let report = compare_variants(
        &model,
        &keyframes,
        &SessionConfig::default(),
        &[Variant::InitialManual, Variant::Global, Variant::Local],
    )
    .expect("comparison");
    let pooled = |variant: Variant| -> (f64, f64) {
        let series = report
            .series
            .iter()
            .find(|s| s.variant == variant)
            .expect("variant series present");
        let (ang, dist) = pooled_means(&series.samples);
        (ang.expect("angular samples"), dist.expect("distance samples"))
    };
    let (base_ang, base_dist) = pooled(Variant::InitialManual);
    let (glob_ang, glob_dist) = pooled(Variant::Global);
    let (loc_ang, loc_dist) = pooled(Variant::Local);
    expect!(
        failures,
        loc_ang <= glob_ang && glob_ang <= base_ang,
        "angular ordering violated: local {loc_ang:.4} / global {glob_ang:.4} / baseline {base_ang:.4} rad"
    );
    expect!(
        failures,
        loc_dist <= glob_dist && glob_dist <= base_dist,
        "distance ordering violated: local {loc_dist:.4} / global {glob_dist:.4} / baseline {base_dist:.4} m"
    );
    conclude("criterion 06 variant error ordering on the drift fixture", failures);
}

// Doubling both drift rates must not shrink the local variant's distance
// reduction: the correction matters more, not less, as drift grows.
#[test]
fn criterion_07_reduction_holds_as_drift_rates_double() {
    let mut failures = Vec::new();
    let (model, keyframes) = drift_fixture(0.002, 0.005);
    let (_, baseline_distance) = local_reduction(&model, &keyframes);
    let (model2, keyframes2) = drift_fixture(0.004, 0.010);
    let (_, doubled_distance) = local_reduction(&model2, &keyframes2);
    expect!(
        failures,
        doubled_distance >= baseline_distance,
        "distance reduction fell from {baseline_distance:.2}% to {doubled_distance:.2}% when drift doubled"
    );
    conclude("criterion 07 reduction holds as drift rates double", failures);
}

/// How far outside the building envelope a point sits, in meters; 0 inside.
/// The envelope is the bounding box of the model's wall corners, which for
/// the grid scenes coincides with the boundary walls. Interior walls are
/// excluded deliberately: the survey route crosses room boundaries (no
/// doorways are modeled), so even the true track passes through them.
fn envelope_penetration(model: &BimModel, p: &Vec3) -> f64 {
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for w in &model.walls {
        for c in &w.plane.corners {
            min = min.inf(c);
            max = max.sup(c);
        }
    }
    [min.x - p.x, p.x - max.x, min.y - p.y, p.y - max.y]
        .into_iter()
        .fold(0.0, f64::max)
}

// The locally corrected camera track never leaves the building by more than
// 0.1 m, while the uncorrected track ends up more than 0.3 m outside.
#[test]
fn criterion_08_corrected_track_stays_inside_building() {
    let mut failures = Vec::new();
    let (model, keyframes) = drift_fixture(0.002, 0.005);
    let max_penetration = |variant: Variant| -> f64 {
        let mut session = Session::new(model.clone(), variant, SessionConfig::default());
        let mut worst = 0.0_f64;
        for kf in &keyframes {
            session.process_keyframe(kf).expect("keyframe processing");
            let corrected = session
                .current_transform()
                .compose(&kf.camera_pose)
                .translation();
            worst = worst.max(envelope_penetration(&model, &corrected));
        }
        worst
    };
    let local = max_penetration(Variant::Local);
    let baseline = max_penetration(Variant::InitialManual);
    expect!(failures, local <= 0.1, "local track leaves the building by {local:.3} m (limit 0.1 m)");
    expect!(
        failures,
        baseline > 0.3,
        "uncorrected track only reaches {baseline:.3} m outside; fixture should drift past 0.3 m"
    );
    conclude("criterion 08 corrected track stays inside the building", failures);
}

/// Applies the solver's local step convention: right-multiplied rotation,
/// additive translation.
fn nudge(state: &RigidTransform, dof: usize, h: f64) -> RigidTransform {
    let mut delta = [0.0; 6];
    delta[dof] = h;
    let dq = UnitQuaternion::from_scaled_axis(Vec3::new(delta[0], delta[1], delta[2]));
    RigidTransform::new(
        state.rotation() * dq,
        state.translation() + Vec3::new(delta[3], delta[4], delta[5]),
    )
}

// The analytic Jacobian matches central finite differences to 1e-5 relative
// at 20 random states, and every accepted Gauss-Newton step lowers the cost.
#[test]
fn criterion_09_jacobian_matches_finite_differences_and_cost_descends() {
    let mut failures = Vec::new();
    let spec = SceneSpec { rooms_x: 2, rooms_y: 2, room_size: 4.0, seed: 0 };
    let scene = generate_scene(&spec).expect("scene generation");
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let h = 1e-6;

    for state_index in 0..20 {
        // A noisy observation set around one random transform, linearized at
        // a different random state so the residuals are generic (nonzero).
        let nominal = random_transform(&mut rng, 0.3, 0.5);
        let wall_count = scene.walls.len();
        let mut set = exact_pairs(&scene.walls, &nominal);
        set.pairs.retain(|_| rng.gen::<f64>() < 0.7);
        if set.pairs.len() < 3 {
            set = exact_pairs(&scene.walls[..3.min(wall_count)], &nominal);
        }
        for pair in &mut set.pairs {
            let mut n = pair.plane.normal
                + Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)) * 0.02;
            n.normalize_mut();
            pair.plane.normal = n;
            pair.plane.centroid += unit_vector(&mut rng) * (gauss(&mut rng) * 0.02);
        }
        let state = random_transform(&mut rng, 0.3, 0.5);
        let cfg = EstimationConfig {
            normal_weight: if state_index % 2 == 0 { 1.0 } else { 25.0 },
            ..EstimationConfig::default()
        };

        let (_, jac) = linearize(&set, &state, &cfg);
        let mut fd = jac.clone();
        for dof in 0..6 {
            let plus = linearize(&set, &nudge(&state, dof, h), &cfg).0;
            let minus = linearize(&set, &nudge(&state, dof, -h), &cfg).0;
            fd.set_column(dof, &((plus - minus) / (2.0 * h)));
        }
        let rel = (&fd - &jac).norm() / jac.norm();
        expect!(
            failures,
            rel <= 1e-5,
            "state {state_index}: Jacobian differs from finite differences by {rel:.3e} relative"
        );

        let result = estimate_transform(&set, &state, &cfg).expect("estimation");
        let monotone = result.cost_trace.windows(2).all(|w| w[1] <= w[0]);
        expect!(
            failures,
            monotone,
            "state {state_index}: cost trace not non-increasing: {:?}",
            result.cost_trace
        );
    }
    conclude("criterion 09 Jacobian check and cost descent", failures);
}
