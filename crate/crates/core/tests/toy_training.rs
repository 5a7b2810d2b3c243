use fem_core::tasks::ArgmaxTaskConfig;
use fem_core::trainer::{train_toy, ToyModelKind, TrainConfig};

fn small_task() -> ArgmaxTaskConfig {
    ArgmaxTaskConfig { t: 16, d: 32, n_val: 64, ..ArgmaxTaskConfig::default() }
}

#[test]
fn untrained_models_sit_at_or_below_chance() {
    let task = small_task();
    for model in [ToyModelKind::Fem, ToyModelKind::Softmax] {
        let cfg = TrainConfig { steps: 0, model, ..TrainConfig::default() };
        let out = train_toy(&task, &cfg, 0, |_| {}).unwrap();
        assert_eq!(out.rows.len(), 1);
        let acc = out.final_row().index_accuracy;
        assert!(acc <= 2.0 / task.t as f64, "{model:?} untrained accuracy {acc}");
    }
}

#[test]
fn fem_windowed_loss_decreases() {
    let task = small_task();
    let cfg = TrainConfig { steps: 400, model: ToyModelKind::Fem, ..TrainConfig::default() };
    let out = train_toy(&task, &cfg, 0, |_| {}).unwrap();
    // Each row after the first carries the mean training loss of its 50-step window.
    let windows: Vec<f64> = out.rows[1..].iter().map(|r| r.train_mse).collect();
    assert_eq!(windows.len(), 8);
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window loss rose: {windows:?}");
    }
    assert!(out.final_row().index_accuracy > out.rows[0].index_accuracy);
}

#[test]
fn metrics_rows_are_bit_reproducible() {
    let task = small_task();
    let cfg = TrainConfig { steps: 60, eval_every: 20, model: ToyModelKind::Fem, ..TrainConfig::default() };
    let a = train_toy(&task, &cfg, 5, |_| {}).unwrap();
    let b = train_toy(&task, &cfg, 5, |_| {}).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.model, b.model);
}
