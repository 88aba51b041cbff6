use super::*;
use crate::data::SynthConfig;
use crate::model::{tests::tiny_config, AblationVariant, Task};

fn tiny(task: Task) -> ModelConfig {
    let mut cfg = tiny_config(task);
    cfg.text.vocab_size = 32;
    cfg.text.max_tokens = 8;
    cfg
}

fn small_data(task: Task) -> Dataset {
    Dataset::generate(task, &SynthConfig::default(), 20, 4).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 6,
        seed: 2,
        ..Default::default()
    }
}

#[test]
fn mse_hand_values_and_gradient() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::with_params(&store);
    let p = g.input(&Tensor::new(vec![1, 1], vec![1.0]).unwrap(), true);
    let l = g.input(&Tensor::new(vec![1, 1], vec![0.0]).unwrap(), false);
    let loss = mse_loss(&mut g, p, l).unwrap();
    assert_eq!(g.value(loss)[0], 1.0);
    let same = mse_loss(&mut g, p, p).unwrap();
    assert_eq!(g.value(same)[0], 0.0);

    let pred = [0.3, -1.2, 2.0];
    let label = [0.5, 0.1, 1.0];
    let eval = |x: &[f64]| -> Result<f64> {
        let mut g = Graph::with_params(&store);
        let p = g.input(&Tensor::new(vec![3, 1], x.to_vec())?, false);
        let l = g.input(&Tensor::new(vec![3, 1], label.to_vec())?, false);
        let v = mse_loss(&mut g, p, l)?;
        Ok(g.value(v)[0])
    };
    let numeric = crate::gradcheck::central_difference(eval, &pred, 1e-5).unwrap();
    let mut g = Graph::with_params(&store);
    let p = g.input(&Tensor::new(vec![3, 1], pred.to_vec()).unwrap(), true);
    let l = g.input(&Tensor::new(vec![3, 1], label.to_vec()).unwrap(), false);
    let v = mse_loss(&mut g, p, l).unwrap();
    let grads = g.backward(v).unwrap();
    for i in 0..3 {
        let closed = 2.0 * (pred[i] - label[i]) / 3.0;
        assert!((grads.wrt(p).unwrap()[i] - closed).abs() < 1e-15);
        assert!(crate::gradcheck::relative_error(closed, numeric[i]) < 1e-8);
    }
}

#[test]
fn mse_shape_mismatch() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::with_params(&store);
    let p = g.input(&Tensor::zeros(vec![2, 1]), false);
    let l = g.input(&Tensor::zeros(vec![3, 1]), false);
    assert!(matches!(mse_loss(&mut g, p, l), Err(Error::Dimension { .. })));
}

#[test]
fn oracle_predictors() {
    let labels = [0.1, 0.9, 0.4, 0.5, 0.2];
    let c = correlations(&labels, &labels).unwrap();
    assert!((c.srcc - 1.0).abs() < 1e-15 && (c.plcc - 1.0).abs() < 1e-15);
    let reversed: Vec<f64> = labels.iter().map(|v| -v).collect();
    assert!((correlations(&reversed, &labels).unwrap().srcc + 1.0).abs() < 1e-15);
    assert!(matches!(
        correlations(&[0.5; 5], &labels),
        Err(Error::UndefinedCorrelation(_))
    ));
}

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    for task in [Task::PerceptualQuality, Task::Correspondence] {
        let data = small_data(task);
        let a = fit(&tiny(task), &data, &quick(1), &mut |_| {}).unwrap();
        let b = fit(&tiny(task), &data, &quick(1), &mut |_| {}).unwrap();
        assert_eq!(a.outcome.last.to_bytes(), b.outcome.last.to_bytes());
        assert_eq!(a.outcome.history, b.outcome.history);
        let mut other = quick(1);
        other.seed = 3;
        let c = fit(&tiny(task), &data, &other, &mut |_| {}).unwrap();
        assert_ne!(a.outcome.last.to_bytes(), c.outcome.last.to_bytes());
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data(Task::PerceptualQuality);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        ..quick(3)
    };
    let model_cfg = tiny(Task::PerceptualQuality);
    let mut init = ParamStore::<f32>::new();
    Model::build(&model_cfg, &mut init, cfg.seed).unwrap();
    let fitted = fit(&model_cfg, &data, &cfg, &mut |_| {}).unwrap();
    for (a, b) in fitted.store.iter().zip(init.iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
    let losses: Vec<f64> = fitted.outcome.history.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-6 * w[0]), "{losses:?}");
    let test: Vec<&HistoryRecord> = fitted.outcome.history.iter().filter(|r| r.split == Split::Test).collect();
    assert!(test.windows(2).all(|w| w[0].loss == w[1].loss && w[0].srcc == w[1].srcc));
}

#[test]
fn checkpoint_restore_reproduces_predictions_bit_exactly() {
    let task = Task::Correspondence;
    let data = small_data(task);
    let model_cfg = tiny(task);
    let fitted = fit(&model_cfg, &data, &quick(2), &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    fitted.outcome.last.save(&path).unwrap();

    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&model_cfg, &mut store, 99).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    let opt = loaded.restore(&mut store).unwrap();
    assert_eq!(opt, fitted.outcome.last.optimizer);
    let probe: Vec<usize> = (0..data.len()).collect();
    let a = predict(&fitted.model, &fitted.store, &data, &probe, 7).unwrap();
    let b = predict(&model, &store, &data, &probe, 7).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn history_has_one_train_and_one_test_row_per_epoch() {
    let data = small_data(Task::PerceptualQuality);
    let mut seen = Vec::new();
    let fitted = fit(&tiny(Task::PerceptualQuality), &data, &quick(2), &mut |r| seen.push(r.clone())).unwrap();
    let h = &fitted.outcome.history;
    assert_eq!(h, &seen);
    let shape: Vec<(usize, Split)> = h.iter().map(|r| (r.epoch, r.split)).collect();
    assert_eq!(shape, vec![(1, Split::Train), (1, Split::Test), (2, Split::Train), (2, Split::Test)]);
    assert!((1..=2).contains(&fitted.outcome.best_epoch));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.jsonl");
    write_history(&path, h).unwrap();
    assert_eq!(&read_history(&path).unwrap(), h);
}

#[test]
fn divergence_names_the_first_bad_parameter() {
    let task = Task::PerceptualQuality;
    let data = small_data(task);
    let model_cfg = tiny(task);
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&model_cfg, &mut store, 0).unwrap();
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let victim = store.id_of(&names[5]).unwrap();
    store.get_mut(victim).tensor.data_mut()[0] = f32::NAN;
    match train(&model, &mut store, &data, &quick(1), &mut |_| {}) {
        Err(Error::Diverged { epoch, parameter }) => {
            assert_eq!(epoch, 1);
            assert_eq!(parameter, names[5]);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_train_config_rejected() {
    let data = small_data(Task::PerceptualQuality);
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    assert!(matches!(fit(&tiny(Task::PerceptualQuality), &data, &cfg, &mut |_| {}), Err(Error::Config(_))));
}

#[test]
fn ablation_row_sets() {
    let names = |t| ablation_rows(t).into_iter().map(|r| r.setting).collect::<Vec<_>>();
    assert_eq!(
        names(Task::PerceptualQuality),
        [
            "without_transformer_features",
            "without_cnn_features",
            "single_level_last",
            "full",
            "queries_4",
            "queries_8"
        ]
    );
    assert_eq!(
        names(Task::Correspondence),
        ["without_prompt_embedded", "single_level_last", "full", "queries_4", "queries_8"]
    );
}

#[test]
fn ablation_rejects_invalid_pairing() {
    let data = small_data(Task::PerceptualQuality);
    let bad = [AblationSetting {
        setting: "x".into(),
        variant: AblationVariant::WithoutPromptEmbedded,
        queries: 2,
    }];
    let r = ablate(&data, &tiny(Task::PerceptualQuality), &quick(1), &bad, &mut |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn ablation_report_round_trips() {
    let task = Task::Correspondence;
    let data = small_data(task);
    let mut settings = ablation_rows(task);
    for s in &mut settings {
        s.queries = s.queries.min(4);
    }
    let report = ablate(&data, &tiny(task), &quick(1), &settings, &mut |_| {}).unwrap();
    assert_eq!(report.rows.len(), 5);
    // full at its default and the matching query row are the same run.
    assert_eq!(report.row("full").unwrap().srcc, report.row("queries_4").unwrap().srcc);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.jsonl");
    report.save(&path).unwrap();
    assert_eq!(AblationReport::load(&path).unwrap(), report);
    let first = report.to_jsonl().lines().next().unwrap().to_owned();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    for key in ["task", "setting", "variant", "queries", "srcc", "plcc"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}
