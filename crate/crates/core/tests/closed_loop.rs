use driftnav_core::scenes;
use driftnav_core::sim::{metrics, run_episode, Controller, EpisodeConfig, PlannerConfig};

fn cem() -> Controller {
    Controller::CemMpc(PlannerConfig::default())
}

#[test]
fn successive_plans_agree_on_an_empty_road() {
    let scene = scenes::empty_road(60.0);
    let cfg = EpisodeConfig::default();
    let log = run_episode(&scene, &cem(), &cfg).unwrap();
    assert!(log.failure.is_none());
    assert!(log.plans.len() > 3);
    for pair in log.plans.windows(2) {
        let (a, b) = (&pair[0].samples, &pair[1].samples);
        let shift = cfg.replan_steps;
        for k in 0..a.x.len() - shift {
            let gap = (a.x[k + shift] - b.x[k]).hypot(a.y[k + shift] - b.y[k]);
            assert!(gap < 0.1, "plans {} and {} differ by {gap} at step {k}", pair[0].id, pair[1].id);
        }
    }
}

#[test]
fn one_plan_when_it_covers_the_run() {
    let scene = scenes::empty_road(50.0);
    let cfg = EpisodeConfig {
        replan_steps: 100,
        ..Default::default()
    };
    let log = run_episode(&scene, &cem(), &cfg).unwrap();
    assert_eq!(log.plans.len(), 1);
    assert!(log.rows.last().unwrap().state.x >= 50.0);
}

#[test]
fn baseline_drives_the_run_length() {
    for name in ["empty", "asym-curve"] {
        let scene = scenes::by_name(name).unwrap();
        let log = run_episode(&scene, &Controller::Baseline, &EpisodeConfig::default()).unwrap();
        let m = metrics(&log, &scene).unwrap();
        assert!((m.drl_ratio - 1.0).abs() < 0.01, "{name}: {}", m.drl_ratio);
        assert_eq!(m.collisions, 0);
    }
}

#[test]
fn baseline_hits_a_parked_car_and_stops() {
    let scene = scenes::by_name("parked").unwrap();
    let log = run_episode(&scene, &Controller::Baseline, &EpisodeConfig::default()).unwrap();
    assert_eq!(log.collisions.len(), 1);
    assert_eq!(log.rows.last().unwrap().step, log.collisions[0].step);
    let stop = log.rows.last().unwrap().state.x;
    assert!(stop < 30.0, "stopped at {stop}");
}

#[test]
fn episodes_are_reproducible() {
    let scene = scenes::by_name("blocked-lane").unwrap();
    let a = run_episode(&scene, &cem(), &EpisodeConfig::default()).unwrap();
    let b = run_episode(&scene, &cem(), &EpisodeConfig::default()).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.plans, b.plans);
    assert!(!a.collided());
}
