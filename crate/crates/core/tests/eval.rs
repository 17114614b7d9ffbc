use gcpc::data::{Goal, ReferenceScores};
use gcpc::envs::maze::cell_center;
use gcpc::envs::{EnvSpec, Environment, MazeEnv, MazeSpec};
use gcpc::eval::{
    aggregate_seeds, best_of_last_k, rollout_episodes, rollout_with, score_episodes, Controller, EpisodeResult,
    GoalSchedule,
};
use gcpc::policy::Observation;
use gcpc::{Result, RngStream};

struct Constant(Vec<f64>, usize);

impl Controller for Constant {
    fn history_len(&self) -> usize {
        self.1
    }

    fn act(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        Ok(obs.iter().map(|_| self.0.clone()).collect())
    }
}

fn no_goal(_: &Goal) -> Result<Vec<f64>> {
    Ok(vec![0.0, 0.0])
}

fn episode(ret: f64, success: bool) -> EpisodeResult {
    EpisodeResult { total_return: ret, success, length: 1, trace: Vec::new(), failure: None }
}

#[test]
fn goal_at_start_succeeds_in_one_step() {
    let spec = MazeSpec::builtin("corridor-S").unwrap();
    let start = cell_center(spec.start_cells()[0]);
    let make = || Ok(Box::new(MazeEnv::new(spec.clone(), start)) as Box<dyn Environment>);
    let goals = GoalSchedule::Fixed(Goal::Target(start.to_vec()));
    let eps = rollout_with(&make, &Constant(vec![0.0, 0.0], 3), &goals, &no_goal, 4, 300, &RngStream::new(0)).unwrap();
    for e in &eps {
        assert!(e.success);
        assert_eq!(e.total_return, 1.0);
        assert_eq!(e.length, 1);
    }
}

#[test]
fn zero_policy_fails_at_cap() {
    let env = EnvSpec::minimaze("corridor-S").unwrap();
    let goals = GoalSchedule::Fixed(env.initial_eval_goal(None).unwrap());
    let zero = Constant(vec![0.0, 0.0], 10);
    let eps = rollout_episodes(&env, &zero, &goals, &no_goal, 3, None, &RngStream::new(1)).unwrap();
    for e in &eps {
        assert!(!e.success);
        assert_eq!(e.total_return, 0.0);
        assert_eq!(e.length, 300);
        assert_eq!(e.trace.len(), e.length + 1);
        assert!(e.trace.windows(2).all(|w| w[0] == w[1]));
    }
    let short = rollout_episodes(&env, &zero, &goals, &no_goal, 2, Some(17), &RngStream::new(1)).unwrap();
    assert!(short.iter().all(|e| e.length == 17));
}

#[test]
fn non_finite_action_ends_episode() {
    let env = EnvSpec::minimaze("junction-T").unwrap();
    let goals = GoalSchedule::Fixed(env.initial_eval_goal(None).unwrap());
    let eps = rollout_episodes(&env, &Constant(vec![f64::NAN, 0.0], 1), &goals, &no_goal, 2, None, &RngStream::new(2))
        .unwrap();
    for e in &eps {
        assert!(!e.success);
        assert_eq!(e.length, 0);
        assert!(e.failure.as_deref().unwrap().contains("invalid action"));
    }
}

#[test]
fn episode_order_does_not_change_score() {
    let env = EnvSpec::minimaze("corridor-S").unwrap();
    let meta = env.dataset_meta(0).unwrap();
    let eps = vec![episode(1.0, true), episode(0.0, false), episode(1.0, true), episode(0.0, false)];
    let mut rev = eps.clone();
    rev.reverse();
    let a = score_episodes(&meta, &eps).unwrap();
    assert_eq!(a.score, 50.0);
    assert_eq!(a, score_episodes(&meta, &rev).unwrap());
    let all = vec![episode(1.0, true); 3];
    assert_eq!(score_episodes(&meta, &all).unwrap().score, 100.0);
}

#[test]
fn normalized_score_anchors() {
    let mut meta = EnvSpec::Linerun.dataset_meta(0).unwrap();
    meta.reference_scores = Some(ReferenceScores { random: 12.0, expert: 180.0 });
    assert_eq!(score_episodes(&meta, &[episode(12.0, false)]).unwrap().score, 0.0);
    assert_eq!(score_episodes(&meta, &[episode(180.0, false)]).unwrap().score, 100.0);
    meta.reference_scores = None;
    assert!(score_episodes(&meta, &[episode(1.0, false)]).is_err());
    assert!(GoalSchedule::for_env(&EnvSpec::Linerun, &meta, None).is_err());
}

#[test]
fn best_of_last_five_examples() {
    assert_eq!(best_of_last_k(&[10.0, 20.0, 30.0, 40.0, 50.0, 60.0], 5).unwrap(), 60.0);
    assert_eq!(best_of_last_k(&[5.0, 1.0, 2.0, 3.0, 4.0, 0.0], 5).unwrap(), 4.0);
    assert_eq!(best_of_last_k(&[7.0], 5).unwrap(), 7.0);
    assert!(best_of_last_k(&[], 5).is_err());
}

#[test]
fn chosen_score_never_below_final() {
    let mut rng = RngStream::new(4);
    for _ in 0..200 {
        let n = 1 + rng.index(9);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 100.0)).collect();
        assert!(best_of_last_k(&scores, 5).unwrap() >= *scores.last().unwrap());
    }
}

#[test]
fn aggregate_examples() {
    assert_eq!(aggregate_seeds(&[1.0, 2.0, 3.0, 4.0]).unwrap().iqm, 2.5);
    let c = aggregate_seeds(&[42.0; 5]).unwrap();
    assert_eq!((c.std, c.mean, c.median, c.iqm), (0.0, 42.0, 42.0, 42.0));
    let two = aggregate_seeds(&[0.0, 100.0]).unwrap();
    assert_eq!(two.mean, 50.0);
    assert!((two.std - 70.710678118654755).abs() < 1e-12);
    let one = aggregate_seeds(&[3.0]).unwrap();
    assert_eq!((one.n_seeds, one.std), (1, 0.0));
    assert!(aggregate_seeds(&[]).is_err());
    let shuffled = aggregate_seeds(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!(shuffled, aggregate_seeds(&[1.0, 2.0, 3.0, 4.0]).unwrap());
}
