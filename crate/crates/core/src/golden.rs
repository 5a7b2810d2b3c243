//! Golden-vector CSV files for cross-implementation parity.
//!
//! One file per operation. Each row is one instance: flattened inputs, then
//! flattened outputs, every value written with 17 significant digits. Shapes
//! are fixed per operation so a row can be re-evaluated on import.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FemError, Result};
use crate::fem_read::{budget_dual_solve, free_energy, hidden_temperature, ltl_read, mean_read, two_gate_read, FemGates};
use crate::fem_read::kernel;
use crate::mat::Mat;
use crate::priors::{decay_prior, gla_prior, softmax_prior, GlaParams, Mask, PriorMatrix};

/// Positions per instance.
const T: usize = 4;
/// Channels per instance.
const C: usize = 2;
/// Feature width of GLA instances.
const M: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoldenOp {
    MeanRead,
    FreeEnergy,
    Posterior,
    LtlRead,
    TwoGateRead,
    HiddenTemperature,
    BudgetDual,
    SoftmaxPrior,
    DecayPrior,
    GlaPrior,
}

impl GoldenOp {
    pub const ALL: [GoldenOp; 10] = [
        GoldenOp::MeanRead,
        GoldenOp::FreeEnergy,
        GoldenOp::Posterior,
        GoldenOp::LtlRead,
        GoldenOp::TwoGateRead,
        GoldenOp::HiddenTemperature,
        GoldenOp::BudgetDual,
        GoldenOp::SoftmaxPrior,
        GoldenOp::DecayPrior,
        GoldenOp::GlaPrior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GoldenOp::MeanRead => "mean_read",
            GoldenOp::FreeEnergy => "free_energy",
            GoldenOp::Posterior => "posterior",
            GoldenOp::LtlRead => "ltl_read",
            GoldenOp::TwoGateRead => "two_gate_read",
            GoldenOp::HiddenTemperature => "hidden_temperature",
            GoldenOp::BudgetDual => "budget_dual_solve",
            GoldenOp::SoftmaxPrior => "softmax_prior",
            GoldenOp::DecayPrior => "decay_prior",
            GoldenOp::GlaPrior => "gla_prior",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }

    /// Named input blocks with their lengths.
    fn input_blocks(self) -> Vec<(&'static str, usize)> {
        match self {
            GoldenOp::MeanRead => vec![("p", T * T), ("v", T * C)],
            GoldenOp::FreeEnergy => vec![("p", T * T), ("v", T * C), ("beta", C)],
            GoldenOp::Posterior => vec![("p", T), ("v", T), ("beta", 1)],
            GoldenOp::LtlRead => vec![("p", T * T), ("v", T * C), ("beta_max", C), ("lambda", T * C)],
            GoldenOp::TwoGateRead => {
                vec![("p", T * T), ("v", T * C), ("lambda", T * C), ("g", T * C), ("beta_max", C)]
            }
            GoldenOp::HiddenTemperature => vec![("p", T), ("v", T), ("beta_max", 1), ("lambda", 1)],
            GoldenOp::BudgetDual => vec![("p", T), ("v", T), ("budget", 1)],
            GoldenOp::SoftmaxPrior => vec![("logits", T * T)],
            GoldenOp::DecayPrior => vec![("gates", T)],
            GoldenOp::GlaPrior => vec![("q_raw", T * M), ("k_raw", T * M), ("gates", T)],
        }
    }

    fn output_blocks(self) -> Vec<(&'static str, usize)> {
        match self {
            GoldenOp::MeanRead => vec![("mu", T * C)],
            GoldenOp::FreeEnergy => vec![("f", T * C)],
            GoldenOp::Posterior => vec![("q", T)],
            GoldenOp::LtlRead => vec![("f_tilde", T * C)],
            GoldenOp::TwoGateRead => vec![("o", T * C)],
            GoldenOp::HiddenTemperature => vec![("beta_star", 1)],
            GoldenOp::BudgetDual => vec![("beta_star", 1), ("kl", 1)],
            GoldenOp::SoftmaxPrior | GoldenOp::DecayPrior | GoldenOp::GlaPrior => vec![("p", T * T)],
        }
    }

    pub fn input_width(self) -> usize {
        self.input_blocks().iter().map(|b| b.1).sum()
    }

    pub fn columns(self) -> Vec<String> {
        let mut cols = Vec::new();
        for (name, n) in self.input_blocks().into_iter().chain(self.output_blocks()) {
            cols.extend((0..n).map(|k| format!("{name}_{k}")));
        }
        cols
    }

    /// Random valid inputs for one instance.
    pub fn sample_inputs(self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = Vec::new();
        let normal = |rng: &mut ChaCha8Rng, n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        for (name, n) in self.input_blocks() {
            let block = match name {
                "p" if n == T * T => random_prior(rng).weights().as_slice().to_vec(),
                "p" => random_simplex(rng, n),
                "beta" | "beta_max" => (0..n).map(|_| rng.gen_range(0.2..6.0)).collect(),
                "lambda" => (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                "g" => (0..n).map(|_| rng.gen_range(0.1..2.0)).collect(),
                "gates" => (0..n).map(|_| -rng.gen_range(0.0..1.0)).collect(),
                "budget" => vec![rng.gen_range(0.01..0.5)],
                _ => normal(rng, n, 1.0),
            };
            x.extend(block);
        }
        x
    }

    /// Evaluates the library on one flattened input row.
    pub fn eval(self, inputs: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() != self.input_width() {
            return Err(FemError::Format(format!("{}: expected {} inputs, got {}", self.name(), self.input_width(), inputs.len())));
        }
        let mut blocks = Vec::new();
        let mut at = 0;
        for (_, n) in self.input_blocks() {
            blocks.push(&inputs[at..at + n]);
            at += n;
        }
        let prior = |b: &[f64]| PriorMatrix::from_weights(Mat::from_vec(T, T, b.to_vec()));
        let values = |b: &[f64]| Mat::from_vec(T, C, b.to_vec());
        Ok(match self {
            GoldenOp::MeanRead => mean_read(&prior(blocks[0])?, &values(blocks[1]))?.into_vec(),
            GoldenOp::FreeEnergy => free_energy(&prior(blocks[0])?, &values(blocks[1]), blocks[2])?.into_vec(),
            GoldenOp::Posterior => kernel::posterior(blocks[0], blocks[1], blocks[2][0]),
            GoldenOp::LtlRead => {
                let lambda = values(blocks[3]);
                ltl_read(&prior(blocks[0])?, &values(blocks[1]), blocks[2], &lambda)?.0.into_vec()
            }
            GoldenOp::TwoGateRead => {
                let gates = FemGates::new(values(blocks[2]), values(blocks[3]), blocks[4].to_vec())?;
                two_gate_read(&prior(blocks[0])?, &values(blocks[1]), &gates)?.o.into_vec()
            }
            GoldenOp::HiddenTemperature => {
                let p = single_row_prior(blocks[0])?;
                let v = Mat::from_vec(T, 1, blocks[1].to_vec());
                vec![hidden_temperature(&p, &v, blocks[2][0], blocks[3][0], T - 1, 0)?]
            }
            GoldenOp::BudgetDual => {
                let sol = budget_dual_solve(blocks[0], blocks[1], blocks[2][0], 1e6)?;
                vec![sol.beta, sol.kl]
            }
            GoldenOp::SoftmaxPrior => {
                softmax_prior(&Mat::from_vec(T, T, blocks[0].to_vec()), &Mask::causal(T))?.weights().as_slice().to_vec()
            }
            GoldenOp::DecayPrior => decay_prior(blocks[0])?.weights().as_slice().to_vec(),
            GoldenOp::GlaPrior => {
                let q = Mat::from_vec(T, M, blocks[0].to_vec());
                let k = Mat::from_vec(T, M, blocks[1].to_vec());
                let params = GlaParams::from_raw(&q, &k, blocks[2].to_vec())?;
                gla_prior(&params)?.0.weights().as_slice().to_vec()
            }
        })
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn random_prior(rng: &mut ChaCha8Rng) -> PriorMatrix {
    let mut w = Mat::zeros(T, T);
    for t in 0..T {
        let row = random_simplex(rng, t + 1);
        w.row_mut(t)[..=t].copy_from_slice(&row);
    }
    PriorMatrix::from_weights(w).expect("random rows are normalized")
}

/// Prior whose last row is `p` (earlier rows uniform).
fn single_row_prior(p: &[f64]) -> Result<PriorMatrix> {
    let mut w = Mat::zeros(T, T);
    for t in 0..T - 1 {
        w.row_mut(t)[..=t].iter_mut().for_each(|x| *x = 1.0 / (t + 1) as f64);
    }
    w.row_mut(T - 1).copy_from_slice(p);
    PriorMatrix::from_weights(w)
}

/// 17 significant digits, round-trip exact.
pub fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenTable {
    pub op: GoldenOp,
    pub rows: Vec<Vec<f64>>,
}

impl GoldenTable {
    pub fn generate(op: GoldenOp, seed: u64, n: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (op as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = op.sample_inputs(&mut rng);
            row.extend(op.eval(&row)?);
            rows.push(row);
        }
        Ok(Self { op, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.op.columns().join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(|&x| format_value(x)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(op: GoldenOp, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| FemError::Format("empty golden file".into()))?;
        if header.split(',').map(str::trim).collect::<Vec<_>>() != op.columns() {
            return Err(FemError::Format(format!("{}: header does not match", op.name())));
        }
        let width = op.columns().len();
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| FemError::Format(format!("{} row {k}: {e}", op.name())))?;
            if row.len() != width {
                return Err(FemError::Format(format!("{} row {k}: {} fields, expected {width}", op.name(), row.len())));
            }
            rows.push(row);
        }
        Ok(Self { op, rows })
    }

    /// Largest absolute deviation between the stored outputs and a fresh evaluation.
    pub fn max_deviation(&self) -> Result<f64> {
        let split = self.op.input_width();
        let mut worst: f64 = 0.0;
        for row in &self.rows {
            let fresh = self.op.eval(&row[..split])?;
            for (a, b) in fresh.iter().zip(&row[split..]) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

/// Writes `<dir>/<op>.csv` for every operation and returns the paths.
pub fn export_golden(dir: &Path, seed: u64, n: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for op in GoldenOp::ALL {
        let path = dir.join(format!("{}.csv", op.name()));
        fs::write(&path, GoldenTable::generate(op, seed, n)?.to_csv())?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn import_golden(path: &Path) -> Result<GoldenTable> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let op = GoldenOp::from_name(stem).ok_or_else(|| FemError::Format(format!("unknown golden op '{stem}'")))?;
    GoldenTable::from_csv(op, &fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        for op in GoldenOp::ALL {
            let table = GoldenTable::generate(op, 3, 5).unwrap();
            let back = GoldenTable::from_csv(op, &table.to_csv()).unwrap();
            assert_eq!(back, table, "{}", op.name());
            assert_eq!(back.max_deviation().unwrap(), 0.0);
        }
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(format_value(0.1), "1.0000000000000001e-1");
        assert_eq!(format_value(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn header_mismatch_is_rejected() {
        assert!(GoldenTable::from_csv(GoldenOp::Posterior, "a,b\n1,2\n").is_err());
    }

    #[test]
    fn export_and_import_directory() {
        let dir = std::env::temp_dir().join(format!("fem-golden-{}", std::process::id()));
        let paths = export_golden(&dir, 1, 3).unwrap();
        assert_eq!(paths.len(), GoldenOp::ALL.len());
        for path in &paths {
            let table = import_golden(path).unwrap();
            assert_eq!(table.rows.len(), 3);
            assert!(table.max_deviation().unwrap() == 0.0);
        }
        fs::remove_dir_all(dir).unwrap();
    }
}
