use super::*;
use crate::dynamics::{inverse_bicycle, step_bicycle};
use crate::metrics::trajectory_flags;

fn small_spec() -> GenSpec {
    GenSpec {
        n_scenarios: 4,
        n_val: 1,
        n_agents: 3,
        lanes: 2,
        horizon: 30,
        ..GenSpec::default()
    }
}

#[test]
fn json_round_trip_is_exact() {
    for (s, _) in generate(&small_spec()).unwrap() {
        let text = to_json(&s).unwrap();
        assert_eq!(from_json(&text).unwrap(), s);
    }
    let mut s = generate(&small_spec()).unwrap().remove(0).0;
    s.log.states[3].valid[1] = false;
    s.is_modeled[0] = false;
    s.dynamics = DynamicsModel::Delta;
    s.log.states[2].agents[0].x = 0.1 + 0.2;
    assert_eq!(from_json(&to_json(&s).unwrap()).unwrap(), s);
}

#[test]
fn load_errors_are_distinct() {
    let s = generate(&small_spec()).unwrap().remove(0).0;
    let text = to_json(&s).unwrap();
    assert!(matches!(from_json(&text[..text.len() / 2]), Err(Error::Parse(_))));
    assert!(matches!(from_json("{\"version\": 1, \"id\": 3}"), Err(Error::Schema(_))));
    assert!(matches!(from_json("{\"id\": \"x\"}"), Err(Error::Schema(_))));
    let v2 = text.replacen("\"version\":1", "\"version\":2", 1);
    assert!(matches!(from_json(&v2), Err(Error::Version { expected: 1, found: 2 })));

    // drop the last log row of agent 1
    let mut f = to_file(&s);
    f.agents[1].log.pop();
    let short = serde_json::to_string(&f).unwrap();
    match from_json(&short) {
        Err(Error::Invariant { field, .. }) => assert_eq!(field, "agents[1].log"),
        other => panic!("{other:?}"),
    }
    let mut f = to_file(&s);
    f.roadgraph[0].half_width = -1.0;
    match from_json(&serde_json::to_string(&f).unwrap()) {
        Err(Error::Invariant { field, .. }) => assert_eq!(field, "roadgraph[0].half_width"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&small_spec()).unwrap();
    let manifest = write_dataset(dir.path(), &data).unwrap();
    let m = load_manifest(&manifest).unwrap();
    assert_eq!(m.entries.len(), 4);
    assert_eq!(m.entries.iter().filter(|e| e.split == Split::Val).count(), 1);
    let train = load_dataset(&manifest, Some(Split::Train)).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(train[0], data[0].0);
    assert_eq!(load_dataset(&manifest, None).unwrap().len(), 4);
    let s = &data[0].0;
    let path = dir.path().join("one.json");
    save(s, &path).unwrap();
    assert_eq!(&load(&path).unwrap(), s);
    assert!(matches!(load(&dir.path().join("missing.json")), Err(Error::Io(_))));
}

#[test]
fn generation_is_deterministic_and_sound() {
    for road in [
        RoadShape::Straight,
        RoadShape::Arc { radius: 40.0 },
        RoadShape::SCurve {
            radius: 30.0,
            period: 80.0,
        },
    ] {
        let spec = GenSpec { road, ..small_spec() };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        for (s, _) in &a {
            let f = trajectory_flags(&s.log, s);
            assert!(!f.overlap && !f.offroad, "{road:?} {}", s.id);
            for w in s.log.states.windows(2) {
                for i in 0..s.num_agents() {
                    let act = inverse_bicycle(&w[0].agents[i], &w[1].agents[i], s.dt).unwrap();
                    let back = step_bicycle(&w[0].agents[i], &act, s.dt).unwrap();
                    for (x, y) in back.kinematics().iter().zip(w[1].agents[i].kinematics()) {
                        assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn straight_constant_speed_has_zero_actions() {
    let spec = GenSpec {
        n_scenarios: 1,
        n_agents: 1,
        lanes: 1,
        speed_min: 6.0,
        speed_max: 6.0,
        accel_amplitude: 0.0,
        ..GenSpec::default()
    };
    let s = generate(&spec).unwrap().remove(0).0;
    for w in s.log.states.windows(2) {
        let a = inverse_bicycle(&w[0].agents[0], &w[1].agents[0], s.dt).unwrap().to_vec();
        assert!(a[0].abs() < 1e-9 && a[1].abs() < 1e-9, "{a:?}");
        assert!((w[1].agents[0].y - w[0].agents[0].y).abs() < 1e-12);
    }
}

#[test]
fn arc_curvature_is_recovered() {
    let spec = GenSpec {
        n_scenarios: 1,
        n_agents: 1,
        lanes: 1,
        road: RoadShape::Arc { radius: 20.0 },
        speed_min: 5.0,
        speed_max: 5.0,
        accel_amplitude: 0.0,
        ..GenSpec::default()
    };
    let s = generate(&spec).unwrap().remove(0).0;
    let steer: Vec<f64> = s
        .log
        .states
        .windows(2)
        .map(|w| inverse_bicycle(&w[0].agents[0], &w[1].agents[0], s.dt).unwrap().to_vec()[1])
        .collect();
    let mean = steer.iter().sum::<f64>() / steer.len() as f64;
    assert!((mean - 1.0 / 20.0).abs() < 1e-3, "{mean}");
    for k in &steer[20..] {
        assert!((k - 1.0 / 20.0).abs() < 2e-3, "{k}");
    }
}

#[test]
fn infeasible_specs_are_rejected() {
    let tight = GenSpec {
        n_agents: 6,
        road_length: 50.0,
        ..small_spec()
    };
    assert!(matches!(generate(&tight), Err(Error::Infeasible(_))));
    let sharp = GenSpec {
        lanes: 4,
        road: RoadShape::Arc { radius: 8.0 },
        ..small_spec()
    };
    assert!(matches!(generate(&sharp), Err(Error::Infeasible(_))));
    assert!(matches!(
        generate(&GenSpec {
            n_agents: 0,
            ..small_spec()
        }),
        Err(Error::Config(_))
    ));
}

#[test]
fn exported_trajectories_reload() {
    let s = generate(&small_spec()).unwrap().remove(0).0;
    let mut traj = s.log.clone();
    traj.states[5].agents[0].x += 1.0;
    let e = with_trajectory(&s, &traj).unwrap();
    assert_eq!(from_json(&to_json(&e).unwrap()).unwrap().log, traj);
    traj.states.pop();
    assert!(with_trajectory(&s, &traj).is_err());
}
