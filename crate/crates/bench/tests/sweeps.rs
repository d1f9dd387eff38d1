use terranav::episode::{Environment, Termination};
use terranav::scene::{SceneDescriptor, SceneRegistry};
use terranav::terrain::SceneType;
use terranav::SimError;
use terranav_bench::{
    greedy_avoid_policy, greedy_policy, needs_frame, run_episode, run_sweep, run_sweep_outcomes, AgentKind,
    MetricsRow, SweepSpec,
};

/// Built-ins plus a flat, dry Meadow variant called "FlatMeadow".
fn registry() -> SceneRegistry {
    let mut registry = SceneRegistry::with_built_ins();
    let mut desc = SceneDescriptor::built_in(SceneType::Meadow).unwrap();
    desc.name = "FlatMeadow".into();
    desc.base_map.base_amplitude = 0.0;
    desc.base_map.water_fraction = 0.0;
    registry.insert(desc).unwrap();
    registry
}

fn spec(scenes: &[&str], difficulties: &[f64], distances: &[f64], episodes: u32, agent: AgentKind) -> SweepSpec {
    SweepSpec {
        scenes: scenes.iter().map(|s| s.to_string()).collect(),
        difficulties: difficulties.to_vec(),
        distances: distances.to_vec(),
        episodes_per_cell: episodes,
        agent,
        seed: 3,
        ..SweepSpec::default()
    }
}

#[test]
fn greedy_always_succeeds_on_empty_flat_ground() {
    let rows = run_sweep(&spec(&["FlatMeadow"], &[0.0], &[10.0, 20.0], 25, AgentKind::Greedy), &registry()).unwrap();
    for row in &rows {
        assert_eq!(row.success_rate, 1.0, "{row:?}");
    }
}

#[test]
fn avoiding_agent_drives_straight_on_empty_flat_ground() {
    let rows = run_sweep(&spec(&["FlatMeadow"], &[0.0], &[10.0], 10, AgentKind::GreedyAvoid), &registry()).unwrap();
    assert_eq!(rows[0].success_rate, 1.0);
    // 10 m at 0.2 m per step plus a few alignment turns.
    assert!(rows[0].avg_episode_length < 100.0, "{:?}", rows[0]);
}

#[test]
fn random_walks_rarely_cross_a_dense_forest() {
    let rows = run_sweep(&spec(&["Forest"], &[1.0], &[20.0], 200, AgentKind::Random), &registry()).unwrap();
    assert!(rows[0].success_rate < 0.05, "{:?}", rows[0]);
}

#[test]
fn sweeps_are_reproducible() {
    let s = spec(&["Forest", "VolcanicField"], &[0.1, 1.0], &[10.0], 4, AgentKind::GreedyAvoid);
    let reg = registry();
    assert_eq!(run_sweep(&s, &reg).unwrap(), run_sweep(&s, &reg).unwrap());
}

#[test]
fn rows_agree_with_episode_logs() {
    let s = spec(&["Forest"], &[0.5], &[10.0], 6, AgentKind::GreedyAvoid);
    let reg = registry();
    let outcomes = run_sweep_outcomes(&s, &reg).unwrap();
    let row = &run_sweep(&s, &reg).unwrap()[0];
    let mut logged = Vec::new();
    for (k, outcome) in outcomes[0].iter().enumerate() {
        let mut env = Environment::new(s.episode_config("Forest", 0.5, 10.0), &reg).unwrap();
        let replay = run_episode(&mut env, s.episode_seed(k as u32), s.agent, &s.camera).unwrap();
        assert_eq!(&replay, outcome);
        let log = env.trajectory().unwrap();
        assert_eq!(log.len() as u32, outcome.steps + 1);
        assert_eq!(log.last().unwrap().termination, outcome.termination);
        logged.push(log.iter().map(|r| r.reward).sum::<f64>());
    }
    let mean = logged.iter().sum::<f64>() / logged.len() as f64;
    assert!((mean - row.avg_total_reward).abs() < 1e-9);
    let successes = outcomes[0].iter().filter(|o| o.termination == Termination::TargetReached).count();
    assert_eq!(row.success_rate, successes as f64 / 6.0);
    assert!(row.avg_episode_length <= 500.0);
}

/// The plain loop: a full frame at every aligned step, no shortcuts.
fn reference_episode(env: &mut Environment, seed: u64, s: &SweepSpec) -> (f64, u32, Termination) {
    let mut obs = env.reset(Some(seed)).unwrap().observation.proprioception;
    loop {
        let action = if needs_frame(&obs) {
            greedy_avoid_policy(&obs, &env.capture_camera(&s.camera).unwrap())
        } else {
            greedy_policy(&obs)
        };
        let r = env.step(action.into()).unwrap();
        obs = r.observation.proprioception;
        if r.done {
            return (env.total_reward().unwrap(), r.step_index, r.termination);
        }
    }
}

#[test]
fn episode_shortcuts_do_not_change_decisions() {
    let s = spec(&["Forest"], &[1.0], &[10.0], 1, AgentKind::GreedyAvoid);
    let reg = registry();
    for k in 0..4 {
        let seed = s.episode_seed(k);
        let mut env = Environment::new(s.episode_config("Forest", 1.0, 10.0), &reg).unwrap();
        let fast = run_episode(&mut env, seed, s.agent, &s.camera).unwrap();
        let fast_log: Vec<_> = env.trajectory().unwrap().to_vec();
        assert_eq!(fast.seed, seed, "spawn retries would change the replay seed");
        let slow = reference_episode(&mut env, seed, &s);
        assert_eq!((fast.total_reward, fast.steps, fast.termination), slow);
        assert_eq!(fast_log, env.trajectory().unwrap());
    }
}

#[test]
fn unknown_scene_fails_before_any_episode() {
    let err = run_sweep(&spec(&["Forest", "Atlantis"], &[0.5], &[10.0], 1, AgentKind::Greedy), &registry()).unwrap_err();
    assert!(matches!(err, SimError::UnknownScene(_)), "{err}");
    let bad = SweepSpec { difficulties: vec![1.5], ..spec(&["Forest"], &[], &[10.0], 1, AgentKind::Greedy) };
    assert!(matches!(run_sweep(&bad, &registry()), Err(SimError::Config(_))));
    let none = spec(&["Forest"], &[0.5], &[10.0], 0, AgentKind::Greedy);
    assert!(matches!(run_sweep(&none, &registry()), Err(SimError::Config(_))));
}

#[test]
fn csv_has_one_line_per_cell() {
    let rows = run_sweep(&spec(&["FlatMeadow"], &[0.0, 0.5], &[10.0], 2, AgentKind::Greedy), &registry()).unwrap();
    let mut buf = Vec::new();
    terranav_bench::write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    let parsed: Vec<MetricsRow> = csv::Reader::from_reader(text.as_bytes()).deserialize().map(Result::unwrap).collect();
    assert_eq!(parsed, rows);
}
