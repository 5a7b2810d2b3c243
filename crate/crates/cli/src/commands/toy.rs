use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fem_core::checkpoint;
use fem_core::trainer::{train_toy, write_metrics_csv, MetricsRow, ToyModelKind};
use serde::Serialize;

use crate::config::ToyRunConfig;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct ToyResult {
    pub model: ToyModelKind,
    pub final_row: MetricsRow,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    /// Encoded checkpoint of the trained parameters.
    #[serde(skip)]
    pub checkpoint_bytes: Vec<u8>,
}

/// Trains every selected model, writing `metrics_<model>.csv` and
/// `model_<model>.ckpt` into `out_dir`. Progress rows go to `progress`.
pub fn run_train_toy(
    cfg: &ToyRunConfig,
    seed: u64,
    out_dir: &Path,
    progress: &mut dyn Write,
) -> Result<Vec<ToyResult>, CliError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let task = cfg.task(seed);
    let mut results = Vec::new();
    for kind in cfg.model.kinds() {
        let name = kind.name();
        let mut io_err = None;
        let outcome = train_toy(&task, &cfg.train(kind), seed, |r| {
            let line = format!(
                "{name} step {:>5}  train_mse {:.6}  val_mse {:.6}  index_accuracy {:.4}",
                r.step, r.train_mse, r.val_mse, r.index_accuracy
            );
            if let Err(e) = writeln!(progress, "{line}") {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        let metrics = out_dir.join(format!("metrics_{name}.csv"));
        write_metrics_csv(&metrics, &outcome.rows)?;
        let checkpoint_path = out_dir.join(format!("model_{name}.ckpt"));
        let tensors: Vec<(&str, &_)> = outcome.model.named().into_iter().filter(|(_, m)| !m.is_empty()).collect();
        let bytes = checkpoint::encode(&tensors)?;
        fs::write(&checkpoint_path, &bytes)?;
        results.push(ToyResult {
            model: kind,
            final_row: outcome.final_row(),
            metrics,
            checkpoint: checkpoint_path,
            checkpoint_bytes: bytes,
        });
    }
    Ok(results)
}

pub fn final_line(r: &ToyResult) -> String {
    format!(
        "final {} step {} index_accuracy {:.4} val_mse {:.6}",
        r.model.name(),
        r.final_row.step,
        r.final_row.index_accuracy,
        r.final_row.val_mse
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelChoice;

    fn tiny() -> ToyRunConfig {
        ToyRunConfig { model: ModelChoice::Both, t: 8, d: 16, heads: 2, steps: 4, batch: 4, eval_every: 2, n_val: 8, ..ToyRunConfig::default() }
    }

    #[test]
    fn writes_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = Vec::new();
        let results = run_train_toy(&tiny(), 1, dir.path(), &mut sink).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            let csv = fs::read_to_string(&r.metrics).unwrap();
            assert_eq!(csv.lines().next().unwrap(), "step,train_mse,val_mse,index_accuracy");
            assert_eq!(csv.lines().count(), 1 + 3);
            let back = checkpoint::load(&r.checkpoint).unwrap();
            assert!(back.iter().any(|(n, _)| n == "w_q"));
        }
        assert_eq!(String::from_utf8(sink).unwrap().lines().count(), 6);
    }

    #[test]
    fn reruns_are_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_train_toy(&tiny(), 3, a.path(), &mut std::io::sink()).unwrap();
        let rb = run_train_toy(&tiny(), 3, b.path(), &mut std::io::sink()).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.checkpoint_bytes, y.checkpoint_bytes);
            assert_eq!(fs::read(&x.metrics).unwrap(), fs::read(&y.metrics).unwrap());
        }
    }
}
