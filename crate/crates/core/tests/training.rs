use ovdet::checkpoint::Checkpoint;
use ovdet::detector::ModelConfig;
use ovdet::evaluator::{evaluate, evaluate_zero_shot};
use ovdet::scenes::{render_dataset, Split, SplitSpec};
use ovdet::textspace::PromptSet;
use ovdet::trainer::{ablate, AblationPlan, AblationRow, TrainConfig, TrainState};
use ovdet::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 24,
        num_object_queries: 6,
        encoder_layers: 1,
        decoder_layers: 2,
        ..ModelConfig::default()
    }
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        lr: 1e-3,
        model: small_model(),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_iterations_leave_state_unchanged() {
    let split = SplitSpec::default();
    let scenes = render_dataset(&split, Split::Train, 4, 1).unwrap();
    let mut st = TrainState::new(small_config(0), split).unwrap();
    let before = st.clone();
    st.run(&scenes, |_, _, _| panic!("no step expected")).unwrap();
    assert_eq!(st, before);
}

#[test]
fn identical_config_and_seed_give_identical_parameters() {
    let split = SplitSpec::default();
    let scenes = render_dataset(&split, Split::Train, 16, 2).unwrap();
    let run = |seed: u64| {
        let mut c = small_config(3);
        c.seed = seed;
        c.model.seed = seed;
        let mut st = TrainState::new(c, split.clone()).unwrap();
        let mut losses = Vec::new();
        st.run(&scenes, |_, _, p| losses.push(p.csv())).unwrap();
        (Checkpoint::from_state(&st).hash_hex(), losses)
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert_ne!(a.0, run(8).0);
}

#[test]
fn single_scene_loss_falls_in_every_window() {
    let split = SplitSpec::default();
    let scenes = render_dataset(&split, Split::Train, 1, 11).unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        batch_size: 1,
        lr: 1e-3,
        lr_drop_fraction: 0.99,
        model: ModelConfig {
            hidden_dim: 32,
            ffn_dim: 64,
            num_object_queries: 10,
            ..small_model()
        },
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(cfg, split).unwrap();
    let mut totals = Vec::new();
    st.run(&scenes, |_, _, p| totals.push(p.total)).unwrap();
    let means: Vec<f64> = totals.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert_eq!(means.len(), 4);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "window means {means:?}");
    }
}

#[test]
fn stage_one_checkpoint_evaluates_and_stage_two_starts_from_it() {
    let split = SplitSpec::default();
    let train = render_dataset(&split, Split::Train, 16, 3).unwrap();
    let held = render_dataset(&split, Split::Heldout, 6, 4).unwrap();
    let mut s1 = TrainState::new(small_config(2), split.clone()).unwrap();
    s1.run(&train, |_, _, _| {}).unwrap();
    let ck = Checkpoint::from_state(&s1);
    let m1 = ck.model().unwrap();
    assert!(!m1.has_fusion());
    let r = evaluate_zero_shot(&m1, &ck.manifest.space, &split, &split.heldout_combos, &held).unwrap();
    assert_eq!(r.num_images, 6);
    assert!((0.0..=1.0).contains(&r.map_50_95));

    let cfg = TrainConfig {
        stage: 2,
        init_from: Some("s1.ovd".into()),
        ..small_config(2)
    };
    let s2 = TrainState::stage_two(cfg, &ck).unwrap();
    let prompts = PromptSet::fixed(&s1.space, &split.heldout_combos).unwrap();
    for s in &held {
        let p = s.image.patches(8).unwrap();
        assert_eq!(
            s2.model.infer(&p, &prompts.embeddings).unwrap(),
            m1.infer(&p, &prompts.embeddings).unwrap()
        );
    }
}

#[test]
fn contaminated_evaluation_is_refused() {
    let split = SplitSpec::default();
    let st = TrainState::new(small_config(0), split.clone()).unwrap();
    let scenes = render_dataset(&split, Split::Train, 2, 1).unwrap();
    let err = evaluate_zero_shot(&st.model, &st.space, &split, &split.train_combos[..2], &scenes).unwrap_err();
    assert!(matches!(err, Error::SplitContamination(ref v) if v.len() == 2));
    // The plain evaluator has no such guard.
    assert!(evaluate(&st.model, &st.space, &split.train_combos, &scenes).is_ok());
}

#[test]
fn ablation_grid_has_one_row_per_config_and_one_cell_per_seed() {
    let split = SplitSpec::default();
    let train = render_dataset(&split, Split::Train, 8, 1).unwrap();
    let held = render_dataset(&split, Split::Heldout, 3, 2).unwrap();
    let plan = AblationPlan {
        base: small_config(1),
        stage2_iterations: 1,
        seeds: vec![0, 1, 2],
        rows: AblationRow::ALL.to_vec(),
    };
    let mut lines = 0;
    let res = ablate(&plan, &split, &train, &held, |_| lines += 1);
    assert_eq!(lines, 12);
    assert_eq!(res.len(), 4);
    assert_eq!(res[0].row, AblationRow { o2m: false, dwcl: false, fusion: false });
    assert_eq!(res[0].row.name(), "baseline");
    for r in &res {
        assert_eq!(r.maps.len(), 3, "{}: {:?}", r.row.name(), r.failures);
    }
}

#[test]
fn failed_ablation_cell_does_not_stop_the_others() {
    let split = SplitSpec::default();
    let train = render_dataset(&split, Split::Train, 8, 1).unwrap();
    let held = render_dataset(&split, Split::Heldout, 3, 2).unwrap();
    // Huge noise with a single draw per sample cannot meet the IoU rule, so
    // every row that draws noisy positives fails.
    let mut base = small_config(1);
    base.noise.lambda = 50.0;
    base.noise.max_rejection_resamples = 1;
    let plan = AblationPlan {
        base,
        stage2_iterations: 1,
        seeds: vec![0],
        rows: AblationRow::ALL.to_vec(),
    };
    let res = ablate(&plan, &split, &train, &held, |_| {});
    assert_eq!(res[0].maps.len(), 1, "baseline draws no noisy positives");
    assert!(res[1..].iter().all(|r| r.failures.len() == 1 && r.maps.is_empty()));
}
