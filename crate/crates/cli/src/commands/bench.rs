use std::hint::black_box;
use std::path::Path;
use std::time::{Duration, Instant};

use fem_core::fem_read::{ltl_read, mean_read};
use fem_core::mat::Mat;
use fem_core::priors::{
    aft_prior, decay_prior, gla_prior, softmax_prior, ssm_prior, stream_fem_read, AftScan, DecayScan, DiagonalSsm,
    GlaParams, GlaScan, Mask, PriorFamily, PriorMatrix, SsmScan,
};
use fem_core::Result as CoreResult;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Accepted per-doubling time ratio for O(T) paths.
pub const LINEAR_BAND: (f64, f64) = (1.6, 2.6);
/// Accepted per-doubling time ratio for O(T²) paths.
pub const QUADRATIC_BAND: (f64, f64) = (3.2, 5.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadPath {
    Dense,
    Streaming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub families: Vec<PriorFamily>,
    /// Doubling ladder of sequence lengths.
    pub ladder: Vec<usize>,
    pub channels: usize,
    /// LSE branch settings to time; each family is run once per entry.
    pub lse: Vec<bool>,
    /// Also time the dense O(T²) path of the streaming families.
    pub with_dense: bool,
    pub trials: usize,
    pub min_time: Duration,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            families: vec![PriorFamily::Decay, PriorFamily::Gla, PriorFamily::Aft, PriorFamily::Ssm, PriorFamily::Softmax],
            ladder: vec![1024, 2048, 4096],
            channels: 4,
            lse: vec![false, true],
            with_dense: false,
            trials: 7,
            min_time: Duration::from_millis(50),
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.ladder.len() < 3 {
            return Err(CliError::Usage("the T ladder needs at least 3 points".into()));
        }
        if self.ladder.windows(2).any(|w| w[1] != 2 * w[0]) || self.ladder[0] == 0 {
            return Err(CliError::Usage("the T ladder must double at every step".into()));
        }
        if self.families.is_empty() || self.lse.is_empty() || self.channels == 0 || self.trials == 0 {
            return Err(CliError::Usage("bench needs families, LSE settings, channels and trials".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub family: PriorFamily,
    pub path: ReadPath,
    pub lse: bool,
    pub t: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCheck {
    pub family: PriorFamily,
    pub path: ReadPath,
    pub lse: bool,
    pub ratios: Vec<f64>,
    pub band: (f64, f64),
    pub pass: bool,
}

impl BandCheck {
    pub fn line(&self) -> String {
        let ratios: Vec<String> = self.ratios.iter().map(|r| format!("{r:.2}")).collect();
        format!(
            "{:<8} {:<9} lse={:<5} ratios [{}] band [{}, {}] {}",
            self.family.name(),
            match self.path {
                ReadPath::Dense => "dense",
                ReadPath::Streaming => "streaming",
            },
            self.lse,
            ratios.join(", "),
            self.band.0,
            self.band.1,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Calls per timed batch so one batch lasts at least `min_time`.
fn batch_size(f: &mut dyn FnMut() -> CoreResult<()>, min_time: Duration) -> CoreResult<usize> {
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_secs_f64().max(1e-7);
    Ok(((min_time.as_secs_f64() / once).ceil() as usize).clamp(1, 1_000_000))
}

fn time_batch(f: &mut dyn FnMut() -> CoreResult<()>, reps: usize) -> CoreResult<f64> {
    let start = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

/// Per-call time at every ladder point: trials visit the ladder round-robin
/// and each point keeps its fastest batch, so a slow spell on the machine
/// hits all points alike instead of one ratio.
fn time_ladder(calls: &mut [Box<dyn FnMut() -> CoreResult<()> + '_>], trials: usize, min_time: Duration) -> CoreResult<Vec<f64>> {
    let reps = calls.iter_mut().map(|f| batch_size(f.as_mut(), min_time)).collect::<CoreResult<Vec<_>>>()?;
    let mut best = vec![f64::INFINITY; calls.len()];
    for _ in 0..trials {
        for (i, f) in calls.iter_mut().enumerate() {
            best[i] = best[i].min(time_batch(f.as_mut(), reps[i])?);
        }
    }
    Ok(best)
}

struct Inputs {
    values: Mat,
    beta: Vec<f64>,
    lambda: Mat,
    gates: Vec<f64>,
    aft_logits: Vec<f64>,
    gla: GlaParams,
    ssm: DiagonalSsm,
    /// Scaled softmax scores `q kᵀ/√m` and the causal mask; these are inputs
    /// to the dense softmax read, not part of it.
    logits: Mat,
    mask: Mask,
}

fn inputs(t: usize, d: usize, rng: &mut ChaCha8Rng) -> CoreResult<Inputs> {
    let gates: Vec<f64> = (0..t).map(|_| -rng.gen_range(0.0..0.5)).collect();
    let gla = GlaParams::from_raw(&Mat::randn(t, 4, 1.0, rng), &Mat::randn(t, 4, 1.0, rng), gates.clone())?;
    let q = Mat::randn(t, 8, 1.0 / 8f64.sqrt(), rng);
    let k = Mat::randn(t, 8, 1.0, rng);
    Ok(Inputs {
        values: Mat::randn(t, d, 1.0, rng),
        beta: (0..d).map(|_| rng.gen_range(0.5..4.0)).collect(),
        lambda: Mat::filled(t, d, 0.5),
        aft_logits: (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        gla,
        ssm: DiagonalSsm::new(vec![0.9, 0.5], vec![0.5, 1.0], vec![1.0, 0.3], 0.5)?,
        logits: q.matmul_nt(&k),
        mask: Mask::causal(t),
        gates,
    })
}

fn run_streaming(family: PriorFamily, x: &Inputs, lse: bool) -> CoreResult<()> {
    let t = x.values.rows();
    let beta = lse.then_some(x.beta.as_slice());
    let out = match family {
        PriorFamily::Decay => stream_fem_read(&mut DecayScan::new(&x.gates), &x.values, beta)?,
        PriorFamily::Gla => stream_fem_read(&mut GlaScan::new(&x.gla), &x.values, beta)?,
        PriorFamily::Aft => stream_fem_read(&mut AftScan::new(&x.aft_logits), &x.values, beta)?,
        PriorFamily::Ssm => stream_fem_read(&mut SsmScan::new(&x.ssm, t), &x.values, beta)?,
        PriorFamily::Softmax => unreachable!("softmax has no streaming path"),
    };
    black_box(out);
    Ok(())
}

fn dense_prior(family: PriorFamily, x: &Inputs) -> CoreResult<PriorMatrix> {
    let t = x.values.rows();
    match family {
        PriorFamily::Softmax => softmax_prior(&x.logits, &x.mask),
        PriorFamily::Gla => Ok(gla_prior(&x.gla)?.0),
        PriorFamily::Aft => aft_prior(&x.aft_logits),
        PriorFamily::Decay => decay_prior(&x.gates),
        PriorFamily::Ssm => ssm_prior(&x.ssm.impulse(t), t),
    }
}

fn run_dense(family: PriorFamily, x: &Inputs, lse: bool) -> CoreResult<()> {
    let p = dense_prior(family, x)?;
    if lse {
        black_box(ltl_read(&p, &x.values, &x.beta, &x.lambda)?);
    } else {
        black_box(mean_read(&p, &x.values)?);
    }
    Ok(())
}

/// Keeps large buffers on the heap. With glibc defaults, blocks above
/// 32 MiB are mmap'd and page-faulted on every call while smaller ones are
/// recycled, which adds a jump between T=1024 and T=2048 to any O(T²) path.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn uniform_allocator() {
    const M_TRIM_THRESHOLD: i32 = -1;
    const M_MMAP_THRESHOLD: i32 = -3;
    extern "C" {
        fn mallopt(param: i32, value: i32) -> i32;
    }
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        mallopt(M_MMAP_THRESHOLD, i32::MAX);
        mallopt(M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn uniform_allocator() {}

/// Times every (family, path, LSE) combination along the ladder and checks
/// successive ratios against the linear or quadratic band.
pub fn run_bench(opts: &BenchOptions, seed: u64) -> Result<(Vec<BenchRow>, Vec<BandCheck>), CliError> {
    opts.validate()?;
    uniform_allocator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ladder_inputs = opts
        .ladder
        .iter()
        .map(|&t| inputs(t, opts.channels, &mut rng))
        .collect::<CoreResult<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut bands = Vec::new();
    for &family in &opts.families {
        let mut paths = Vec::new();
        if family.is_streaming() {
            paths.push(ReadPath::Streaming);
        }
        if !family.is_streaming() || opts.with_dense {
            paths.push(ReadPath::Dense);
        }
        for path in paths {
            for &lse in &opts.lse {
                let mut calls: Vec<Box<dyn FnMut() -> CoreResult<()>>> = ladder_inputs
                    .iter()
                    .map(|x| -> Box<dyn FnMut() -> CoreResult<()>> {
                        match path {
                            ReadPath::Streaming => Box::new(move || run_streaming(family, x, lse)),
                            ReadPath::Dense => Box::new(move || run_dense(family, x, lse)),
                        }
                    })
                    .collect();
                let times = time_ladder(&mut calls, opts.trials, opts.min_time)?;
                for (x, &seconds) in ladder_inputs.iter().zip(&times) {
                    rows.push(BenchRow { family, path, lse, t: x.values.rows(), seconds });
                }
                let ratios: Vec<f64> = times.windows(2).map(|w| w[1] / w[0]).collect();
                let band = match path {
                    ReadPath::Streaming => LINEAR_BAND,
                    ReadPath::Dense => QUADRATIC_BAND,
                };
                let pass = ratios.iter().all(|r| (band.0..=band.1).contains(r));
                bands.push(BandCheck { family, path, lse, ratios, band, pass });
            }
        }
    }
    Ok((rows, bands))
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_must_double() {
        let bad = BenchOptions { ladder: vec![8, 16, 24], ..BenchOptions::default() };
        assert!(bad.validate().is_err());
        let short = BenchOptions { ladder: vec![8, 16], ..BenchOptions::default() };
        assert!(short.validate().is_err());
    }

    #[test]
    fn small_ladder_produces_rows_for_every_combination() {
        let opts = BenchOptions {
            ladder: vec![16, 32, 64],
            with_dense: true,
            trials: 1,
            min_time: Duration::from_micros(50),
            ..BenchOptions::default()
        };
        let (rows, bands) = run_bench(&opts, 0).unwrap();
        // 4 streaming families with two paths, softmax dense only; two LSE settings.
        assert_eq!(bands.len(), (4 * 2 + 1) * 2);
        assert_eq!(rows.len(), bands.len() * 3);
        assert!(rows.iter().all(|r| r.seconds > 0.0));
    }

    #[test]
    fn streaming_and_dense_reads_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = inputs(24, 3, &mut rng).unwrap();
        for family in [PriorFamily::Decay, PriorFamily::Gla, PriorFamily::Aft, PriorFamily::Ssm] {
            let p = dense_prior(family, &x).unwrap();
            let dense = ltl_read(&p, &x.values, &x.beta, &x.lambda).unwrap();
            let stream = match family {
                PriorFamily::Decay => stream_fem_read(&mut DecayScan::new(&x.gates), &x.values, Some(&x.beta)),
                PriorFamily::Gla => stream_fem_read(&mut GlaScan::new(&x.gla), &x.values, Some(&x.beta)),
                PriorFamily::Aft => stream_fem_read(&mut AftScan::new(&x.aft_logits), &x.values, Some(&x.beta)),
                _ => stream_fem_read(&mut SsmScan::new(&x.ssm, 24), &x.values, Some(&x.beta)),
            }
            .unwrap();
            assert!(stream.mu.max_abs_diff(&dense.1) < 1e-10, "{family:?}");
            assert!(stream.f_max.unwrap().max_abs_diff(&dense.2) < 1e-10, "{family:?}");
        }
    }
}
