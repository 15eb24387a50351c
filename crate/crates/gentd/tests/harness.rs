use std::fs;

use proptest::prelude::*;

use gentd::approx::FeatureKind;
use gentd::harness::config::{format_seeds, parse_seeds, EnvId, ExperimentConfig, Learner, Task};
use gentd::harness::envs::{build_baird, build_example1};
use gentd::harness::experiment::{
    build_task, experiment_name, load_checkpoint, load_environment, mean_records, read_records,
    run_experiment, write_records, Record, CSV_HEADER,
};
use gentd::harness::model_io::{parse_model, write_model};
use gentd::mdp::{state_action_kernel, stationary_distribution};

fn tiny(task: Task, learner: Learner) -> ExperimentConfig {
    ExperimentConfig {
        task,
        learner,
        iters: 10,
        seeds: vec![3, 4, 5],
        eval_every: 4,
        ..Default::default()
    }
}

#[test]
fn smoke_run_writes_the_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { out: Some(dir.path().to_path_buf()), ..tiny(Task::GradQ, Learner::GenTd) };
    let run = run_experiment(&cfg).unwrap();
    let per_seed = fs::read_to_string(dir.path().join("per_seed.csv")).unwrap();
    let mean = fs::read_to_string(dir.path().join("mean.csv")).unwrap();
    let header = CSV_HEADER.join(",");
    assert_eq!(header, "iteration,seed,estimation_error,mspgbe,ratio_error");
    assert_eq!(per_seed.lines().next().unwrap(), header);
    assert_eq!(mean.lines().next().unwrap(), header);
    // Iterations 0, 4, 8 and the final step 10, per seed.
    assert_eq!(per_seed.lines().count(), 1 + 3 * 4);
    let iters: Vec<u64> = run.mean.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, vec![0, 4, 8, 10]);
    assert!(mean.lines().skip(1).all(|l| l.split(',').nth(1) == Some("mean")));
    let back = read_records(fs::File::open(dir.path().join("mean.csv")).unwrap()).unwrap();
    assert_eq!(back, run.mean);
    let cfg_back = ExperimentConfig::from_text(&fs::read_to_string(dir.path().join("config.txt")).unwrap()).unwrap();
    assert_eq!(cfg_back.seeds, cfg.seeds);
    assert_eq!(cfg_back.iters, cfg.iters);
}

#[test]
fn gtd_runs_leave_the_ratio_column_empty() {
    let run = run_experiment(&tiny(Task::Canonical, Learner::Gtd)).unwrap();
    assert!(run.mean.iter().all(|r| r.ratio_error.is_none()));
    let mut buf = Vec::new();
    write_records(&mut buf, &run.mean).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(',')));
}

#[test]
fn runs_are_bitwise_deterministic() {
    let cfg = ExperimentConfig { iters: 2000, eval_every: 500, ..tiny(Task::Variance, Learner::GenTd) };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    for (x, y) in a.per_seed.iter().zip(&b.per_seed) {
        for (r, s) in x.records.iter().zip(&y.records) {
            assert_eq!(r.estimation_error.to_bits(), s.estimation_error.to_bits());
            assert_eq!(r.mspgbe.to_bits(), s.mspgbe.to_bits());
        }
    }
    // Different seeds see different samples.
    assert_ne!(a.per_seed[0].records.last(), a.per_seed[1].records.last());
}

#[test]
fn mean_curve_is_the_arithmetic_mean() {
    let cfg = ExperimentConfig { iters: 300, eval_every: 100, ..tiny(Task::GradQ, Learner::GenTd) };
    let run = run_experiment(&cfg).unwrap();
    assert_eq!(run.mean, mean_records(&run.per_seed));
    for (i, m) in run.mean.iter().enumerate() {
        let vals: Vec<f64> = run.per_seed.iter().map(|s| s.records[i].estimation_error).collect();
        let oracle = (vals[0] + vals[1] + vals[2]) / 3.0;
        assert!((m.estimation_error - oracle).abs() <= 1e-15 * oracle.abs().max(1.0));
        let r: Vec<f64> = run.per_seed.iter().map(|s| s.records[i].ratio_error.unwrap()).collect();
        assert!((m.ratio_error.unwrap() - (r[0] + r[1] + r[2]) / 3.0).abs() < 1e-14);
    }
}

#[test]
fn checkpoints_round_trip_through_params_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        checkpoint: true,
        out: Some(dir.path().to_path_buf()),
        ..tiny(Task::GradQ, Learner::GenTd)
    };
    let run = run_experiment(&cfg).unwrap();
    let path = dir.path().join("params.csv");
    let name = experiment_name(&cfg);
    assert_eq!(name, "baird-grad_q-cft-gentd");
    for s in &run.per_seed {
        let iters: Vec<u64> = s.checkpoints.iter().map(|c| c.iteration).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
        for c in &s.checkpoints {
            let loaded = load_checkpoint(&path, &name, s.seed, c.iteration).unwrap();
            assert_eq!(loaded.len(), c.params.len());
            for (k, v) in &c.params {
                assert_eq!(&loaded[k], v, "{k}");
            }
        }
    }
    assert!(load_checkpoint(&path, &name, 99, 0).is_err());
    assert!(load_checkpoint(&path, "other", 3, 0).is_err());
}

#[test]
fn every_task_builds_on_both_builtins() {
    for env in [EnvId::Baird, EnvId::Example1] {
        for task in [Task::Canonical, Task::Variance, Task::Anomaly, Task::BackwardValue] {
            for kind in [FeatureKind::Complete, FeatureKind::Incomplete] {
                let setup = build_task(load_environment(&env).unwrap(), task, kind).unwrap();
                assert_eq!(setup.features.num_pairs(), setup.env.mdp.num_pairs());
            }
        }
    }
    for task in [Task::GradQ, Task::GradLogMu] {
        assert!(build_task(load_environment(&EnvId::Baird).unwrap(), task, FeatureKind::Complete).is_ok());
        // Example 1's policy has no softmax weights.
        assert!(build_task(load_environment(&EnvId::Example1).unwrap(), task, FeatureKind::Complete).is_err());
    }
}

#[test]
fn builtin_models_survive_the_text_format() {
    for (mdp, pi, d) in [build_baird().unwrap(), build_example1().unwrap()] {
        let text = write_model(&mdp, &pi, &d);
        let (m2, p2, d2) = parse_model(&text).unwrap();
        assert_eq!(m2, mdp);
        assert_eq!(p2.probs(), pi.probs());
        assert_eq!(d2.probs(), d.probs());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        fs::write(&path, &text).unwrap();
        let env = load_environment(&EnvId::File(path)).unwrap();
        let mu = stationary_distribution(&state_action_kernel(&mdp, &pi).unwrap()).unwrap();
        assert!((env.mu.mu() - mu.mu()).amax() < 1e-14);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny(Task::GradQ, Learner::GenTd);
    cfg.iters = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(Task::GradQ, Learner::GenTd);
    cfg.seeds.clear();
    assert!(cfg.validate().is_err());
    assert!(ExperimentConfig::from_text("iters = 10\nbogus = 1\n").is_err());
    assert!(ExperimentConfig::from_text("env = mars\n").is_err());
}

#[test]
fn records_reject_malformed_rows() {
    let bad = "iteration,seed,estimation_error,mspgbe,ratio_error\n1,0,abc,0,\n";
    assert!(read_records(bad.as_bytes()).is_err());
    let good = "iteration,seed,estimation_error,mspgbe,ratio_error\n1,mean,0.5,0.25,\n";
    let r = read_records(good.as_bytes()).unwrap();
    assert_eq!(
        r,
        vec![Record { iteration: 1, seed: None, estimation_error: 0.5, mspgbe: 0.25, ratio_error: None }]
    );
}

proptest! {
    #[test]
    fn seed_lists_round_trip(mut seeds in proptest::collection::vec(0u64..1000, 1..30)) {
        seeds.sort_unstable();
        seeds.dedup();
        prop_assert_eq!(parse_seeds(&format_seeds(&seeds)).unwrap(), seeds);
    }

    #[test]
    fn config_text_round_trips(
        iters in 1u64..1_000_000,
        eval in 1u64..5000,
        lr in proptest::option::of(1e-6f64..1.0),
        off in proptest::option::of(1.0f64..1e6),
        gtd in any::<bool>(),
        incomplete in any::<bool>(),
    ) {
        let cfg = ExperimentConfig {
            iters,
            eval_every: eval,
            lr_theta: lr,
            ratio_offset: off,
            learner: if gtd { Learner::Gtd } else { Learner::GenTd },
            features: if incomplete { FeatureKind::Incomplete } else { FeatureKind::Complete },
            task: Task::GradLogMu,
            env: EnvId::Example1,
            ..Default::default()
        };
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
