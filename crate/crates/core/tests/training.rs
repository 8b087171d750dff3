use acpo_core::experiment::{compare_objectives, write_compare_csv};
use acpo_core::objectives::ObjectiveRegistry;
use acpo_core::policy::{MlpDims, PolicyKind, PolicyModel, Vocab};
use acpo_core::rewards::reference_log_probs;
use acpo_core::synthdata::{gen_dataset, Dataset, WorldSpec};
use acpo_core::trainer::{read_csv, train, write_csv, OptimizerKind, TrainConfig};
use acpo_core::Error;

fn small_world() -> Dataset {
    let world = WorldSpec {
        vocab: 12,
        resp_len: 6,
        overlap: 0.5,
        seed: 3,
        ..WorldSpec::default()
    };
    gen_dataset(&world, 64).unwrap()
}

fn small_model(seed: u64) -> PolicyModel {
    let dims = MlpDims {
        embed: 4,
        window: 4,
        hidden: 8,
    };
    PolicyModel::init(PolicyKind::Mlp(dims), Vocab::new(12).unwrap(), seed)
}

fn cfg(objective: &str, steps: usize) -> TrainConfig {
    TrainConfig {
        objective: objective.into(),
        steps,
        batch_size: 8,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_leave_the_model_alone() {
    let data = small_world();
    let init = small_model(1);
    let reference = init.clone_as_reference();
    let out = train(init.clone(), &reference, &data, &cfg("acpo", 0), &ObjectiveRegistry::default(), |_| Ok(())).unwrap();
    assert!(out.telemetry.is_empty());
    assert_eq!(out.model.params(), init.params());
}

#[test]
fn first_step_at_reference_is_ln2() {
    let data = small_world();
    for name in ["dpo", "acpo", "dpo-shift", "beta-dpo"] {
        let init = small_model(1);
        let reference = init.clone_as_reference();
        let out = train(init, &reference, &data, &cfg(name, 1), &ObjectiveRegistry::default(), |_| Ok(())).unwrap();
        let row = &out.telemetry[0];
        assert_eq!(row.loss, std::f64::consts::LN_2, "{name}");
        assert_eq!((row.mean_r_w, row.mean_r_l), (0.0, 0.0));
    }
}

#[test]
fn alpha_columns_only_for_acpo() {
    let data = small_world();
    for name in ObjectiveRegistry::default().names() {
        let init = small_model(2);
        let reference = init.clone_as_reference();
        let out = train(init, &reference, &data, &cfg(name, 3), &ObjectiveRegistry::default(), |_| Ok(())).unwrap();
        let row = &out.telemetry[2];
        assert_eq!(row.mean_alpha.is_some(), name == "acpo", "{name}");
        assert_eq!(row.frac_alpha_hi.is_some(), name == "acpo", "{name}");
        assert_eq!(row.effective_beta.is_some(), name == "beta-dpo", "{name}");
        for r in &out.telemetry {
            assert!((r.mean_margin - (r.mean_r_w - r.mean_r_l)).abs() < 1e-12);
            assert!(r.mean_margin.is_finite());
        }
    }
}

#[test]
fn training_is_reproducible() {
    let data = small_world();
    let run = || {
        let init = small_model(5);
        let reference = init.clone_as_reference();
        let out = train(init, &reference, &data, &cfg("acpo", 40), &ObjectiveRegistry::default(), |_| Ok(())).unwrap();
        let mut buf = Vec::new();
        write_csv(&out.telemetry, &mut buf).unwrap();
        (buf, out.model.params().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let rows = read_csv(a.as_slice()).unwrap();
    assert_eq!(rows.len(), 40);
}

#[test]
fn reference_is_untouched_by_training() {
    let data = small_world();
    let init = small_model(6);
    let reference = init.clone_as_reference();
    let before = reference_log_probs(&reference, &data.pairs).unwrap();
    let out = train(init, &reference, &data, &cfg("dpo", 100), &ObjectiveRegistry::default(), |_| Ok(())).unwrap();
    let after = reference_log_probs(&reference, &data.pairs).unwrap();
    assert_eq!(before, after);
    assert_ne!(out.model.params(), reference.params());
}

#[test]
fn unfrozen_reference_and_unknown_objective_are_rejected() {
    let data = small_world();
    let init = small_model(1);
    let not_frozen = init.clone();
    assert!(matches!(
        train(init.clone(), &not_frozen, &data, &cfg("dpo", 1), &ObjectiveRegistry::default(), |_| Ok(())),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train(init.clone(), &init.clone_as_reference(), &data, &cfg("orpo", 1), &ObjectiveRegistry::default(), |_| Ok(())),
        Err(Error::UnknownObjective { .. })
    ));
}

#[test]
fn divergence_reports_the_step() {
    let data = small_world();
    let init = small_model(1);
    let reference = init.clone_as_reference();
    let blowup = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 1e300,
        ..cfg("dpo", 10)
    };
    match train(init, &reference, &data, &blowup, &ObjectiveRegistry::default(), |_| Ok(())) {
        Err(Error::NonFiniteLoss { step, .. }) => assert!(step >= 1),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn compare_starts_every_curve_at_zero() {
    let data = small_world();
    let init = small_model(9);
    let reference = init.clone_as_reference();
    let names: Vec<String> = vec!["dpo".into(), "acpo".into(), "ipo".into()];
    let runs = compare_objectives(&init, &reference, &data, &cfg("dpo", 20), &names, &ObjectiveRegistry::default()).unwrap();
    assert_eq!(runs.len(), 3);
    for (run, name) in runs.iter().zip(&names) {
        assert_eq!(&run.objective, name);
        assert_eq!(run.delta_r_w()[0], 0.0);
    }
    let mut buf = Vec::new();
    write_compare_csv(&runs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("objective,step,delta_r_w,margin,mean_logp_w\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 20);
    assert!(text.contains("\nacpo,0,0,"));

    // each curve matches a standalone run of the same objective
    let solo = train(init.clone(), &reference, &data, &cfg("acpo", 20), &ObjectiveRegistry::default(), |_| Ok(())).unwrap();
    assert_eq!(solo.telemetry, runs[1].telemetry);
}
