mod common;

use common::{boxed, room};
use nalgebra::Vector3;
use proptest::prelude::*;
use pushnav::geometry::{ground_truth_affine, ObjectPose};
use pushnav::worldsim::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn move_ahead_into_wall_is_blocked() {
    let s = room(8, 8, [1, 1], 180);
    let (next, ev) = step(&s, Action::MoveAhead).unwrap();
    assert!(ev.collision);
    assert_eq!(next.agent, s.agent);
    assert_eq!(next.steps, 1);
}

#[test]
fn move_ahead_advances_one_cell() {
    let s = room(8, 8, [3, 3], 90);
    let (next, ev) = step(&s, Action::MoveAhead).unwrap();
    assert!(!ev.collision);
    assert_eq!(next.agent.cell, [4, 3]);
}

#[test]
fn rotations_and_looks() {
    let s = room(8, 8, [3, 3], 0);
    let (s1, _) = step(&s, Action::RotateRight).unwrap();
    assert_eq!(s1.agent.azimuth, 90);
    let (s2, _) = step(&s, Action::RotateLeft).unwrap();
    assert_eq!(s2.agent.azimuth, 270);
    let (s3, _) = step(&s, Action::LookUp).unwrap();
    let (s4, _) = step(&s3, Action::LookUp).unwrap();
    assert_eq!((s3.agent.elevation, s4.agent.elevation), (30, 30));
    let (s5, _) = step(&s, Action::LookDown).unwrap();
    let (s6, _) = step(&s5, Action::LookDown).unwrap();
    assert_eq!(s6.agent.elevation, -30);
}

#[test]
fn end_terminates_and_further_steps_fail() {
    let s = room(8, 8, [3, 3], 0);
    let (next, ev) = step(&s, Action::End).unwrap();
    assert!(ev.terminal && next.terminal);
    assert_eq!(step(&next, Action::MoveAhead), Err(SimError::Terminal));
    assert_eq!(step_index(&s, 10), Err(SimError::UnknownAction(10)));
}

fn push_scene(object_z: f64, mass: f64) -> WorldState {
    // Interior spans x, z in [0.25, 4.75].
    let mut s = room(20, 20, [4, 2], 0);
    let mut o = boxed(0, 1, [0.5, 0.5, 0.5], 1.125, object_z);
    o.mass = mass;
    s.objects.push(o);
    s.validate().unwrap();
    s
}

#[test]
fn push_with_clearance_moves_base_displacement() {
    let s = push_scene(1.5, 1.0);
    let (next, ev) = step(&s, Action::Push).unwrap();
    assert_eq!(ev.pushed, Some(0));
    assert_eq!(ev.displacement, 0.5);
    assert_eq!(next.objects[0].pose.position, [1.125, 0.0, 2.0]);
    assert_eq!(next.agent, s.agent);
}

#[test]
fn heavy_object_moves_less() {
    let s = push_scene(1.5, 2.0);
    let (next, _) = step(&s, Action::Push).unwrap();
    assert_eq!(next.objects[0].pose.position[2], 1.75);
}

#[test]
fn push_flush_against_wall_does_not_move() {
    let s = push_scene(4.5, 1.0);
    let (next, ev) = step(&s, Action::Push).unwrap();
    assert_eq!(ev.pushed, Some(0));
    assert_eq!(ev.displacement, 0.0);
    assert_eq!(next.objects, s.objects);
}

#[test]
fn push_is_clamped_by_free_distance() {
    let s = push_scene(4.2, 1.0);
    let (next, ev) = step(&s, Action::Push).unwrap();
    assert!((ev.displacement - 0.3).abs() < 1e-12);
    assert!((next.objects[0].pose.position[2] - 4.5).abs() < 1e-12);
    next.validate().unwrap();
}

#[test]
fn pull_stops_at_the_agent() {
    // Agent box front face is at z = 0.725; object back face starts at 1.0.
    let s = push_scene(1.25, 1.0);
    let (next, ev) = step(&s, Action::Pull).unwrap();
    assert!((ev.displacement - 0.275).abs() < 1e-12);
    next.validate().unwrap();
}

#[test]
fn side_pushes_move_along_agent_x() {
    let s = push_scene(1.5, 1.0);
    let (r, _) = step(&s, Action::RightPush).unwrap();
    assert_eq!(r.objects[0].pose.position, [1.625, 0.0, 1.5]);
    let (l, ev) = step(&s, Action::LeftPush).unwrap();
    // Left wall face at x = 0.25 leaves 0.625 m of travel.
    assert_eq!(ev.displacement, 0.5);
    assert_eq!(l.objects[0].pose.position, [0.625, 0.0, 1.5]);
}

#[test]
fn push_without_visible_object_is_a_no_op() {
    let mut s = push_scene(1.5, 1.0);
    s.agent.azimuth = 180;
    let (next, ev) = step(&s, Action::Push).unwrap();
    assert!(ev.no_target);
    assert_eq!(ev.pushed, None);
    assert_eq!(next.objects, s.objects);
}

#[test]
fn push_picks_closest_visible_object() {
    let mut s = push_scene(1.5, 1.0);
    s.objects.push(boxed(1, 2, [0.5, 0.5, 0.5], 1.125, 3.0));
    assert_eq!(push_target(&s), Some(0));
    s.objects[0].id = 5;
    assert_eq!(push_target(&s), Some(5));
}

fn corridor() -> WorldState {
    let mut s = room(14, 3, [1, 1], 90);
    s.target = [11.5 * 0.25, 1.5 * 0.25];
    s
}

#[test]
fn geodesic_straight_corridor() {
    let s = corridor();
    let d = geodesic_distance(&s, [0.375, 0.375], [11.5 * 0.25, 0.375], Mover::Agent);
    assert_eq!(d, Some(2.5));
}

#[test]
fn geodesic_enclosed_target_is_unreachable() {
    let mut s = room(10, 10, [1, 1], 0);
    for (i, j) in [(5, 4), (5, 6), (4, 5), (6, 5)] {
        s.grid.set_wall(i, j, true);
    }
    assert_eq!(
        geodesic_distance(&s, s.agent.position(), [1.375, 1.375], Mover::Agent),
        None
    );
    s.target = [1.375, 1.375];
    assert!(!path_exists(&s));
}

/// Relaxation to a fixed point: an oracle independent of queue order.
fn relaxation_oracle(mask: &[bool], w: usize, d: usize, src: [usize; 2], dst: [usize; 2]) -> Option<f64> {
    let mut dist = vec![u32::MAX; w * d];
    dist[src[1] * w + src[0]] = 0;
    loop {
        let mut changed = false;
        for j in 0..d {
            for i in 0..w {
                let k = j * w + i;
                if !mask[k] && [i, j] != src {
                    continue;
                }
                let mut best = dist[k];
                let mut nb = vec![];
                if i > 0 { nb.push(k - 1); }
                if i + 1 < w { nb.push(k + 1); }
                if j > 0 { nb.push(k - w); }
                if j + 1 < d { nb.push(k + w); }
                for n in nb {
                    if dist[n] != u32::MAX && (mask[n] || n == src[1] * w + src[0]) {
                        best = best.min(dist[n] + 1);
                    }
                }
                if best < dist[k] {
                    dist[k] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let v = dist[dst[1] * w + dst[0]];
    (v != u32::MAX).then_some(v as f64 * 0.25)
}

#[test]
fn geodesic_l_shape_matches_oracle() {
    let mut s = room(8, 8, [1, 1], 0);
    // Wall line with a gap forces an L-shaped route.
    for i in 1..6 {
        s.grid.set_wall(i, 3, true);
    }
    let from = s.agent.position();
    let to = [0.375, 1.625];
    let d = geodesic_distance(&s, from, to, Mover::Agent).unwrap();
    let mask = traversable(&s, Mover::Agent);
    assert_eq!(Some(d), relaxation_oracle(&mask, 8, 8, [1, 1], [1, 6]));
    assert_eq!(d, (5.0 + 5.0 + 5.0) * 0.25);
}

#[test]
fn geodesic_matches_oracle_on_random_mazes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (w, d) = (rng.gen_range(4..14), rng.gen_range(4..14));
        let mut s = room(w, d, [1, 1], 0);
        for j in 1..d - 1 {
            for i in 1..w - 1 {
                if [i, j] != [1, 1] && rng.gen_bool(0.3) {
                    s.grid.set_wall(i, j, true);
                }
            }
        }
        let dst = [rng.gen_range(1..w - 1), rng.gen_range(1..d - 1)];
        let to = [(dst[0] as f64 + 0.5) * 0.25, (dst[1] as f64 + 0.5) * 0.25];
        let got = geodesic_distance(&s, s.agent.position(), to, Mover::Agent);
        let mask = traversable(&s, Mover::Agent);
        assert_eq!(got, relaxation_oracle(&mask, w, d, [1, 1], dst));
    }
}

#[test]
fn object_mover_respects_footprint() {
    let mut s = room(12, 12, [1, 1], 0);
    // A 1-cell gap in a wall line passes a small box but not a wide one.
    for i in 1..11 {
        if i != 6 {
            s.grid.set_wall(i, 6, true);
        }
    }
    s.objects.push(boxed(0, 0, [0.2, 0.2, 0.3], 1.5, 0.75));
    s.objects.push(boxed(1, 0, [0.4, 0.2, 0.3], 2.25, 0.75));
    let to = [1.5, 2.5];
    assert!(geodesic_distance(&s, s.objects[0].center(), to, Mover::Object(0)).is_some());
    assert!(geodesic_distance(&s, s.objects[1].center(), to, Mover::Object(1)).is_none());
    assert!(geodesic_distance(&s, s.objects[1].center(), to, Mover::WallsOnly).is_some());
}

fn blocked_corridor_with_alcove() -> WorldState {
    // Corridor along row 2; the agent stands in a side pocket at (6, 1),
    // the alcove (6, 3) lies opposite.
    let mut s = room(12, 5, [6, 1], 0);
    for i in 1..11 {
        if i != 6 {
            s.grid.set_wall(i, 1, true);
            s.grid.set_wall(i, 3, true);
        }
    }
    s.objects.push(boxed(0, 0, [0.2, 0.2, 1.0], 1.625, 0.625));
    s.target = [10.5 * 0.25, 2.5 * 0.25];
    s.validate().unwrap();
    s
}

#[test]
fn path_exists_examples() {
    let empty = room(10, 10, [2, 2], 0);
    assert!(path_exists(&empty));

    let s = blocked_corridor_with_alcove();
    assert!(!path_exists(&s));
    let (next, ev) = step(&s, Action::Push).unwrap();
    assert_eq!(ev.pushed, Some(0));
    assert!(ev.displacement > 0.0);
    assert!(path_exists(&next));
    assert!(ev.path_opened && !ev.path_blocked);

    // Pulling it back closes the corridor again.
    let (closed, ev) = step(&next, Action::Pull).unwrap();
    assert!(!path_exists(&closed));
    assert!(ev.path_blocked && !ev.path_opened);
}

#[test]
fn center_pixel_reports_perpendicular_wall_distance() {
    // Agent center at z = 0.375; the wall cell row 6 starts at z = 1.5.
    let mut s = room(12, 7, [6, 1], 0);
    s.agent.elevation = 0;
    let obs = render(&s);
    let d = 1.5 - 0.375;
    let c = obs.pixel(32, 32);
    assert_eq!(obs.instance[c], WALL_ID);
    assert!((obs.depth[c] - d).abs() < 1e-12);

    // Off-center pixels on the same row hit the wall plane at an angle.
    for u in [0usize, 10, 50, 63] {
        let k = obs.pixel(u, 32);
        let lateral = (u as f64 - 32.0) / 32.0;
        let theta = lateral.atan();
        assert!((obs.depth[k] - d).abs() < 1e-12);
        let range = obs.depth[k] * (1.0 + lateral * lateral).sqrt();
        assert!((range - d / theta.cos()).abs() < 1e-12);
    }
    s.validate().unwrap();
}

#[test]
fn occluded_object_has_no_pixels() {
    let mut s = room(20, 20, [4, 2], 0);
    s.objects.push(boxed(0, 1, [1.0, 0.25, 1.5], 1.125, 1.5));
    s.objects.push(boxed(1, 2, [0.25, 0.25, 0.25], 1.125, 2.5));
    s.validate().unwrap();
    let obs = render(&s);
    assert!(obs.instance_pixels(OBJECT_ID_BASE) > 0);
    assert_eq!(obs.instance_pixels(OBJECT_ID_BASE + 1), 0);
    assert_eq!(visible_object_ids(&s), vec![0]);
}

#[test]
fn segmentation_and_color_agree() {
    let s = push_scene(1.5, 1.0);
    let obs = render(&s);
    for k in 0..obs.instance.len() {
        match obs.instance[k] {
            FLOOR_ID => assert_eq!(obs.category[k], FLOOR_ID),
            WALL_ID => assert_eq!(obs.category[k], WALL_ID),
            BACKGROUND_ID => assert_eq!(obs.depth[k], s.params.max_depth),
            id => {
                assert_eq!(id, OBJECT_ID_BASE);
                assert_eq!(obs.category[k], OBJECT_ID_BASE + 1);
                assert_eq!(obs.color[k], category_color(1));
            }
        }
    }
}

/// Analytic nearest intersection with the floor, the wall plane z = zw
/// and one axis-aligned box.
fn analytic_depth(o: Vector3<f64>, d: Vector3<f64>, zw: f64, bmin: [f64; 3], bmax: [f64; 3]) -> (f64, u32) {
    let mut best = (f64::INFINITY, BACKGROUND_ID);
    if d.y < 0.0 {
        best = (-o.y / d.y, FLOOR_ID);
    }
    if d.z > 0.0 {
        let t = (zw - o.z) / d.z;
        let y = o.y + t * d.y;
        if (0.0..=2.5).contains(&y) && t < best.0 {
            best = (t, WALL_ID);
        }
    }
    for axis in 0..3 {
        for plane in [bmin[axis], bmax[axis]] {
            if d[axis] == 0.0 {
                continue;
            }
            let t = (plane - o[axis]) / d[axis];
            if t <= 0.0 {
                continue;
            }
            let p = o + d * t;
            let inside = (0..3)
                .filter(|&k| k != axis)
                .all(|k| p[k] >= bmin[k] - 1e-12 && p[k] <= bmax[k] + 1e-12);
            if inside && t < best.0 {
                best = (t, OBJECT_ID_BASE);
            }
        }
    }
    best
}

#[test]
fn rendered_depth_matches_analytic_oracle() {
    // Wide room so only the far wall plane is in view.
    for elevation in [-30, 0] {
        let mut s = room(40, 12, [20, 6], 0);
        s.agent.elevation = elevation;
        s.objects.push(boxed(0, 1, [0.5, 0.5, 0.75], 5.5, 2.25));
        s.validate().unwrap();
        let obs = render(&s);
        let cam = obs.camera;
        let o = Vector3::from(cam.position);
        let r = cam.rotation();
        let mut worst: f64 = 0.0;
        for v in 0..64 {
            for u in 0..64 {
                let d = r * cam.ray(u as f64, v as f64);
                let (t, id) = analytic_depth(o, d, 11.0 * 0.25, [5.25, 0.0, 2.0], [5.75, 0.75, 2.5]);
                let k = obs.pixel(u, v);
                assert_eq!(obs.instance[k], id, "pixel ({u}, {v})");
                worst = worst.max((obs.depth[k] - t).abs());
            }
        }
        assert!(worst <= 1e-6, "{worst:e}");
    }
}

#[test]
fn scene_json_round_trip() {
    let s = blocked_corridor_with_alcove();
    let text = s.to_json();
    assert!(text.contains("\"format_version\":1"));
    let back = WorldState::from_json(&text).unwrap();
    assert_eq!(back, s);
    let bad = text.replace("\"format_version\":1", "\"format_version\":9");
    assert!(matches!(WorldState::from_json(&bad), Err(SimError::Format(_))));
}

#[test]
fn validate_rejects_overlaps() {
    let mut s = push_scene(1.5, 1.0);
    s.objects.push(boxed(1, 0, [0.5, 0.5, 0.5], 1.3, 1.6));
    assert!(s.validate().is_err());
    let mut s = push_scene(1.5, 1.0);
    s.objects[0].pose.position[0] = 0.3;
    assert!(s.validate().is_err());
    let mut s = push_scene(1.5, 1.0);
    s.objects[0].pose.position = [1.125, 0.0, 0.625];
    assert!(s.validate().is_err());
}

/// Random room with a few non-overlapping boxes.
fn random_scene(rng: &mut ChaCha8Rng, slip: f64) -> WorldState {
    let (w, d) = (rng.gen_range(10..20), rng.gen_range(10..20));
    let cell = [rng.gen_range(1..w - 1), rng.gen_range(1..d - 1)];
    let mut s = room(w, d, cell, [0, 90, 180, 270][rng.gen_range(0..4)]);
    s.params.slip = slip;
    let mut id = 0;
    for _ in 0..40 {
        if s.objects.len() >= 5 {
            break;
        }
        let size = [
            rng.gen_range(1..5) as f64 * 0.125,
            rng.gen_range(1..5) as f64 * 0.125,
            rng.gen_range(1..8) as f64 * 0.125,
        ];
        let x = rng.gen_range(0.25..w as f64 * 0.25 - 0.25);
        let z = rng.gen_range(0.25..d as f64 * 0.25 - 0.25);
        let mut o = boxed(id, rng.gen_range(0..8), size, x, z);
        o.pose = ObjectPose::new(o.pose.position, [0.0, 90.0, 180.0, 270.0][rng.gen_range(0..4)]);
        o.mass = [1.0, 2.0][rng.gen_range(0..2)];
        s.objects.push(o);
        if s.validate().is_err() {
            s.objects.pop();
        } else {
            id += 1;
        }
    }
    s
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    // Favor interactions so objects actually move.
    let weights = [3, 1, 1, 1, 1, 3, 3, 3, 3];
    let total: u32 = weights.iter().sum();
    let mut pick = rng.gen_range(0..total);
    for (k, w) in weights.iter().enumerate() {
        if pick < *w {
            return Action::ALL[k];
        }
        pick -= w;
    }
    unreachable!()
}

#[test]
fn step_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s = random_scene(&mut rng, 15.0);
        let mut a = s.clone();
        let mut b = s.clone();
        for _ in 0..30 {
            let act = random_action(&mut rng);
            let (na, ea) = step(&a, act).unwrap();
            let (nb, eb) = step(&b, act).unwrap();
            assert_eq!(na, nb);
            assert_eq!(ea, eb);
            assert_eq!(na.to_json(), nb.to_json());
            a = na;
            b = nb;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn invariants_hold_along_random_rollouts(seed in any::<u64>(), slip in prop::sample::select(vec![0.0, 20.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = random_scene(&mut rng, slip);
        for _ in 0..40 {
            let act = random_action(&mut rng);
            let (next, ev) = step(&s, act).unwrap();
            prop_assert!(next.validate().is_ok(), "{:?}", next.validate());
            prop_assert!(!(ev.path_opened && ev.path_blocked));
            if act.is_interaction() {
                prop_assert_eq!(next.agent, s.agent);
            } else {
                prop_assert_eq!(&next.objects, &s.objects);
            }
            s = next;
        }
    }

    #[test]
    fn ground_truth_affine_tracks_simulated_corners(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = random_scene(&mut rng, 20.0);
        for _ in 0..10 {
            let act = random_action(&mut rng);
            let (next, _) = step(&s, act).unwrap();
            let (c0, c1) = (s.camera().unwrap(), next.camera().unwrap());
            for (o0, o1) in s.objects.iter().zip(&next.objects) {
                let m = ground_truth_affine(&o0.pose, &o1.pose, &c0, &c1);
                for (p0, p1) in o0.corners().iter().zip(o1.corners().iter()) {
                    let predicted = m.transform(&c0.world_to_camera(p0));
                    let actual = c1.world_to_camera(p1);
                    prop_assert!((predicted - actual).amax() <= 1e-6);
                }
            }
            s = next;
        }
    }
}
