use gcpc::data::{
    build_mask, return_to_go, sample_goal, sample_window, DatasetMeta, Goal, GoalMode, Objective, Trajectory,
    MASK_RATIOS,
};
use gcpc::RngStream;

fn meta(mode: GoalMode, h_max: usize) -> DatasetMeta {
    DatasetMeta {
        env_id: "test".into(),
        layout: None,
        state_dim: 3,
        action_dim: 1,
        max_episode_steps: h_max,
        goal_mode: mode,
        goal_subspace: vec![0, 2],
        reference_scores: None,
        split_seed: 0,
    }
}

fn random_traj(rng: &mut RngStream, h: usize) -> Trajectory {
    Trajectory {
        states: (0..h).map(|_| (0..3).map(|_| rng.normal()).collect()).collect(),
        actions: (0..h).map(|_| vec![rng.uniform_range(-1.0, 1.0)]).collect(),
        rewards: Some((0..h).map(|_| rng.uniform_range(-2.0, 5.0)).collect()),
    }
}

/// Expected (masked history count, masked future count, future in input,
/// future targeted) for an objective, written from the objective table.
fn table_row(o: Objective, k: usize, p: usize, r: f64) -> (usize, usize, bool, bool) {
    let rc = |n: usize| (r * n as f64).round() as usize;
    match o {
        Objective::AeH => (0, 0, false, false),
        Objective::MaeH => (rc(k), 0, false, false),
        Objective::MaeF => (0, p, true, true),
        Objective::MaeRc => (rc(k), p, true, true),
        Objective::MaeAll => (rc(k), rc(p), true, true),
    }
}

#[test]
fn masks_match_objective_table() {
    let mut rng = RngStream::new(11);
    for o in Objective::ALL {
        for trial in 0..1000 {
            let k = 1 + trial % 12;
            let p = 1 + (trial * 7) % 15;
            let m = build_mask(o, k, p, &mut rng).unwrap();
            let (hist, fut, fut_in, fut_tgt) = table_row(o, k, p, m.ratio);
            let h_masked = m.input_mask[..k].iter().filter(|&&b| b).count();
            let f_masked = m.input_mask[k..].iter().filter(|&&b| b).count();
            assert_eq!(h_masked, hist, "{o} k={k} r={}", m.ratio);
            assert_eq!(f_masked, fut, "{o} p={p} r={}", m.ratio);
            assert_eq!(m.input_layout().len(), if fut_in { k + p } else { k });
            assert!(m.target[..k].iter().all(|&b| b));
            assert!(m.target[k..].iter().all(|&b| b == fut_tgt));
            assert!(MASK_RATIOS.contains(&m.ratio));
        }
    }
}

#[test]
fn rc_ratio_point_four_masks_four_of_ten() {
    let mut seen = 0;
    let mut rng = RngStream::new(5);
    for _ in 0..200 {
        let m = build_mask(Objective::MaeRc, 10, 6, &mut rng).unwrap();
        if m.ratio == 0.4 {
            seen += 1;
            assert_eq!(m.input_mask[..10].iter().filter(|&&b| b).count(), 4);
            assert!(m.input_mask[10..].iter().all(|&b| b));
        }
    }
    assert!(seen > 0);
}

#[test]
fn ratio_draws_are_uniform() {
    let mut rng = RngStream::new(99);
    let mut counts = [0usize; 5];
    let n = 100_000;
    for _ in 0..n {
        let m = build_mask(Objective::MaeRc, 10, 5, &mut rng).unwrap();
        counts[MASK_RATIOS.iter().position(|&r| r == m.ratio).unwrap()] += 1;
    }
    for c in counts {
        let frac = c as f64 / n as f64;
        assert!((frac - 0.2).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn rtg_matches_direct_sum() {
    let mut rng = RngStream::new(3);
    for _ in 0..10_000 {
        let h = 1 + rng.index(60);
        let h_max = h + rng.index(20);
        let tr = random_traj(&mut rng, h);
        let t = rng.index(h);
        let g = sample_goal(&tr, t, &meta(GoalMode::ReturnToGo, h_max), &mut rng).unwrap();
        let rewards = tr.rewards.as_ref().unwrap();
        let mut total = 0.0;
        for r in &rewards[t..] {
            total += r;
        }
        let expected = total / (h_max - t) as f64;
        let Goal::ReturnToGo(v) = g else { panic!("wrong goal kind") };
        assert!((v - expected).abs() <= 1e-12, "{v} vs {expected}");
        assert_eq!(v, return_to_go(rewards, t, h_max));
    }
}

#[test]
fn target_goal_is_a_future_state_slice() {
    let mut rng = RngStream::new(4);
    for _ in 0..10_000 {
        let h = 2 + rng.index(40);
        let tr = random_traj(&mut rng, h);
        let t = rng.index(h - 1);
        let Goal::Target(g) = sample_goal(&tr, t, &meta(GoalMode::TargetState, h), &mut rng).unwrap() else {
            panic!("wrong goal kind")
        };
        assert!(tr.states[t + 1..].iter().any(|s| s[0] == g[0] && s[2] == g[1]));
    }
}

#[test]
fn window_positions_copy_or_pad() {
    let mut rng = RngStream::new(8);
    for _ in 0..500 {
        let h = 1 + rng.index(30);
        let tr = random_traj(&mut rng, h);
        let (k, p) = (1 + rng.index(8), rng.index(8));
        let t = rng.index(h);
        let w = sample_window(&tr, t, k, p).unwrap();
        for (i, s) in w.states().enumerate() {
            let step = t as isize + 1 + i as isize - k as isize;
            let clamped = step.clamp(0, h as isize - 1) as usize;
            assert_eq!(s, &tr.states[clamped]);
            assert_eq!(w.padded[i], step != clamped as isize);
        }
    }
}
