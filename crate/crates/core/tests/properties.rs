use parley_core::cbf::{self, BarrierId, BarrierSpec, ObstacleSelector, SlackKind};
use parley_core::decision::{handle_event, DecisionState, Event, ExecutionOutcome};
use parley_core::intent::{self, Intent, IntentKind, StationRef};
use parley_core::kinematics::{
    clamp_velocity, clamp_velocity_scaled, forward_kinematics, integrate_state, jacobian, JointVector, Position, RobotModel, RobotState,
};
use parley_core::predictor::{self, TaskRequest};
use parley_core::qp::{self, Bound, QpProblem, QpRow, QpStatus};
use parley_core::world::{self, load_config, JobScript, JobStep, Obstacle, Params, Scene, TaskAction, Waypoint};
use proptest::prelude::*;

fn arm(lengths: &[f64]) -> RobotModel {
    RobotModel::planar(lengths, 2.8, 1.5).unwrap()
}

fn lengths() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.2..1.2f64, 1..5)
}

fn model_and_q() -> impl Strategy<Value = (RobotModel, JointVector)> {
    lengths().prop_flat_map(|l| {
        let n = l.len();
        (Just(arm(&l)), prop::collection::vec(-2.7..2.7f64, n).prop_map(JointVector::from_vec))
    })
}

fn point() -> impl Strategy<Value = Position> {
    (-2.0..2.0f64, -2.0..2.0f64, -0.5..0.5f64).prop_map(|(x, y, z)| Position::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn jacobian_matches_finite_differences((model, q) in model_and_q()) {
        let j = jacobian(&model, &q).unwrap();
        let h = 1e-6;
        for c in 0..model.dof() {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[c] += h;
            qm[c] -= h;
            let fd = (forward_kinematics(&model, &qp).unwrap() - forward_kinematics(&model, &qm).unwrap()) / (2.0 * h);
            prop_assert!((j.matrix().column(c) - fd).amax() < 1e-7);
        }
    }

    #[test]
    fn reach_bounds_the_tip((model, q) in model_and_q()) {
        prop_assert!(forward_kinematics(&model, &q).unwrap().norm() <= model.reach() + 1e-12);
    }

    #[test]
    fn clamp_is_idempotent_and_bounded((model, q) in model_and_q(), scale in 0.1..1.0f64) {
        let u = q * 3.0;
        let c = clamp_velocity_scaled(&model, &u, scale);
        prop_assert_eq!(clamp_velocity_scaled(&model, &c, scale), c.clone());
        for (v, j) in c.iter().zip(model.joints()) {
            prop_assert!(v.abs() <= j.v_max_rad_s * scale);
        }
        // already admissible input passes through
        let small = clamp_velocity(&model, &(&c * 0.5));
        prop_assert_eq!(small, &c * 0.5);
    }

    #[test]
    fn euler_halving_agrees_for_constant_input((model, q) in model_and_q(), dt in 0.001..0.05f64) {
        let s0 = RobotState::new(&model, q.clone(), 0.0).unwrap();
        let u = q.map(|v| 0.3 * v.sin());
        let full = integrate_state(&model, &s0, &u, dt).unwrap();
        let half = integrate_state(&model, &s0, &u, dt / 2.0).unwrap();
        let half = integrate_state(&model, &half, &u, dt / 2.0).unwrap();
        prop_assert!((full.q() - half.q()).amax() < 1e-12);
        prop_assert!((full.x() - half.x()).norm() < 1e-12);
        prop_assert!((full.t() - half.t()).abs() < 1e-15);
    }

    #[test]
    fn barrier_signs_match_geometry((model, q) in model_and_q(), goal in point(), obstacle in point(), dmin in 0.1..0.8f64) {
        let scene = Scene::with_obstacles(vec![Obstacle::fixed("o", obstacle)]);
        let x = forward_kinematics(&model, &q).unwrap();

        let pos = BarrierSpec::position_task(BarrierId::new("g"), goal, 5.0).unwrap();
        let h = cbf::barrier_value(&pos, &model, &q, &scene, 0.0).unwrap().unwrap();
        prop_assert!(h <= 0.0);
        prop_assert!((h + 5.0 * (x - goal).norm_squared()).abs() < 1e-12);

        let safe = BarrierSpec::obstacle_safety(BarrierId::for_obstacle("o"), ObstacleSelector::Id("o".into()), dmin, 0.05, 10.0, true).unwrap();
        let h = cbf::barrier_value(&safe, &model, &q, &scene, 0.0).unwrap().unwrap();
        let d = (x - obstacle).norm();
        prop_assert_eq!(h >= 0.0, d >= dmin);

        for joint in 0..model.dof() {
            let lim = BarrierSpec::joint_limit(joint, 1.0).unwrap();
            let h = cbf::barrier_value(&lim, &model, &q, &scene, 0.0).unwrap().unwrap();
            prop_assert!(h > 0.0, "q inside the limits gives a positive joint barrier");
        }
    }

    #[test]
    fn nearest_obstacle_matches_brute_force(obstacles in prop::collection::vec(point(), 0..6), x in point(), t in 0.0..5.0f64) {
        let scene = Scene::with_obstacles(obstacles.iter().enumerate().map(|(i, p)| Obstacle::fixed(format!("o{i}"), *p)).collect());
        let found = world::nearest_obstacle(&scene, &x, t);
        let brute = obstacles.iter().map(|p| (x - p).norm()).fold(f64::INFINITY, f64::min);
        match found {
            None => prop_assert!(obstacles.is_empty()),
            Some(n) => prop_assert_eq!(n.distance, brute),
        }
    }

    #[test]
    fn snapshots_are_pure(a in point(), b in point(), t in 0.0..3.0f64) {
        let scripted = Obstacle {
            waypoints: vec![Waypoint { t: 0.0, position: a }, Waypoint { t: 2.0, position: b }],
            ..Obstacle::fixed("bot", a)
        };
        let scene = Scene::with_obstacles(vec![scripted]);
        let before = scene.clone();
        let frozen = world::snapshot(&scene, t);
        prop_assert_eq!(&scene, &before);
        prop_assert_eq!(frozen.obstacles[0].position, scene.obstacles[0].position_at(t));
        // a frozen scene no longer moves
        prop_assert_eq!(world::snapshot(&frozen, t + 1.0), frozen.clone());
        prop_assert_eq!(frozen.fingerprint(t), frozen.fingerprint(t + 1.0));
    }

    #[test]
    fn qp_solutions_satisfy_kkt_and_beat_feasible_points(
        n in 1usize..4,
        raw in prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 3), -1.0..1.0f64, 0u8..3), 0..5),
        probe in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        let mut p = QpProblem::new(n);
        for (a, b, kind) in raw {
            let a: Vec<f64> = a[..n].to_vec();
            let slack = match kind {
                0 => None,
                1 => Some(p.add_slack(SlackKind::Skill, Bound::FREE)),
                _ => Some(p.add_slack(SlackKind::Limit, Bound { lo: 0.0, hi: 2.0 })),
            };
            // hard rows are made to hold at the origin
            let b = if slack.is_none() { -b.abs() } else { b };
            p.rows.push(QpRow { a, b, slack });
        }
        let s = qp::solve(&p);
        prop_assert_eq!(s.status, QpStatus::Optimal);
        prop_assert!(qp::verify_kkt(&p, &s).max() < 1e-8);

        // any feasible probe costs at least as much
        let q: Vec<f64> = probe[..n].iter().map(|v| v * 0.5).collect();
        let mut slack = vec![0.0; p.slacks.len()];
        let mut feasible = true;
        for row in &p.rows {
            let need = row.b - row.a.iter().zip(&q).map(|(a, v)| a * v).sum::<f64>();
            match row.slack {
                None => feasible &= need <= 0.0,
                Some(k) => {
                    slack[k] = need.max(0.0);
                    feasible &= slack[k] <= p.slacks[k].bound.hi;
                }
            }
        }
        if feasible {
            prop_assert!(p.objective(&s.qdot, &s.slack) <= p.objective(&q, &slack) + 1e-12);
        }
    }

    #[test]
    fn parser_never_panics(text in "\\PC{0,80}") {
        let _ = intent::parse(&text);
    }

    #[test]
    fn canonical_phrases_round_trip(kind in intent_kind()) {
        let back = intent::parse(&kind.canonical_phrase()).unwrap();
        prop_assert_eq!(back.kind, kind);
    }

    #[test]
    fn parsing_ignores_ascii_case(kind in intent_kind(), mask in prop::collection::vec(any::<bool>(), 40)) {
        let phrase = kind.canonical_phrase();
        let mixed: String = phrase
            .chars()
            .zip(mask.iter().cycle())
            .map(|(c, up)| if *up { c.to_ascii_uppercase() } else { c })
            .collect();
        prop_assert_eq!(intent::parse(&mixed).map(|i| i.kind), intent::parse(&phrase).map(|i| i.kind));
    }

    #[test]
    fn decision_machine_stays_consistent(events in prop::collection::vec(event(), 0..80)) {
        let script = JobScript {
            home: "HOME".into(),
            steps: vec![JobStep { action: TaskAction::Move, station: "A".into(), speed_scale: None }],
        };
        let mut s = DecisionState::new(script, 1);
        for e in &events {
            let (next, again) = (handle_event(&s, e), handle_event(&s, e));
            prop_assert_eq!(&next, &again);
            prop_assert!(next.0.check().is_ok(), "{:?} after {:?}", next.0.check(), e);
            s = next.0;
        }
    }
}

fn station() -> impl Strategy<Value = StationRef> {
    prop::sample::select(vec!["A", "B", "HOME", "station C", "dock7"]).prop_map(StationRef::new)
}

fn intent_kind() -> impl Strategy<Value = IntentKind> {
    prop_oneof![
        Just(IntentKind::StartJob),
        Just(IntentKind::Stop),
        station().prop_map(IntentKind::MoveTo),
        station().prop_map(IntentKind::Pick),
        station().prop_map(IntentKind::Place),
        (1u32..=100).prop_map(|v| IntentKind::SetSpeed(f64::from(v) / 100.0)),
        Just(IntentKind::Accept),
        Just(IntentKind::Reject),
        Just(IntentKind::Status),
        (prop::sample::select(vec!["kappa", "epsilon", "dmin"]), 1u32..50)
            .prop_map(|(k, v)| IntentKind::SetParam { key: k.into(), value: f64::from(v) / 10.0 }),
    ]
}

fn event() -> impl Strategy<Value = Event> {
    prop_oneof![
        intent_kind().prop_map(|k| Event::Intent(Intent::direct(k))),
        Just(Event::Tick),
        (1u64..4).prop_map(|id| Event::Execution { task_id: id, outcome: ExecutionOutcome::Completed }),
        (1u64..4).prop_map(|id| Event::Execution { task_id: id, outcome: ExecutionOutcome::Failed { reason: "x".into() } }),
        (1u64..4).prop_map(|id| Event::RequestError { task_id: id, message: "x".into() }),
        (1u64..3).prop_map(|fp| Event::SceneChanged { fingerprint: fp }),
    ]
}

fn demo() -> String {
    std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../config/demo.toml")).unwrap()
}

#[test]
fn demo_config_loads() {
    let c = load_config(&demo()).unwrap();
    assert_eq!(c.robot.dof(), 6);
    assert_eq!(c.q_init.len(), 6);
    assert_eq!(c.job.steps.len(), 3);
    assert!(c.scene.station("station b").is_some());
    assert_eq!(c.params.kappa, 1.5);
}

#[test]
fn broken_configs_are_rejected() {
    let doc = demo();
    assert!(load_config(&doc.replace("q_init", "q_start")).is_err());
    assert!(load_config(&doc.replace("dmin = 0.5", "dmin = -0.5")).is_err());
    assert!(load_config("not toml [").is_err());
}

#[test]
fn assessment_is_deterministic() {
    let c = load_config(&demo()).unwrap();
    let s0 = RobotState::new(&c.robot, c.q_init.clone(), 0.0).unwrap();
    for station in ["A", "B", "HOME"] {
        let req = TaskRequest::new(TaskAction::Move, station);
        let a = predictor::assess(&req, &c.robot, &s0, &c.scene, &c.params).unwrap();
        let b = predictor::assess(&req, &c.robot, &s0, &c.scene, &c.params).unwrap();
        assert_eq!(a, b, "station {station}");
    }
}

#[test]
fn rollouts_do_not_depend_on_early_exit_prefix() {
    let model = arm(&[1.0, 0.8]);
    let p = Params::default();
    let goal = Position::new(0.9, 0.9, 0.0);
    let scene = Scene::default();
    let stack = predictor::build_stack(&model, &scene, &p, Some((goal, "g"))).unwrap();
    let s0 = RobotState::new(&model, JointVector::from_vec(vec![0.2, 0.4]), 0.0).unwrap();
    let short = predictor::rollout(&stack, &model, &s0, &scene, p.horizon_s, p.dt, true).unwrap();
    let long = predictor::rollout(&stack, &model, &s0, &scene, p.horizon_s, p.dt, false).unwrap();
    let k = short.satisfied_at.expect("reachable goal");
    assert_eq!(short.q[..], long.q[..short.q.len()]);
    assert_eq!(long.satisfied_at, Some(k));
}
