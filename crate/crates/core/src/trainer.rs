//! Single-layer value mixers for the channel-wise argmax task and a
//! minimal AdamW loop.
//!
//! Both models read raw values `V` (no value or output projection) and
//! emit the mixed vector at the last position. Head `h` owns the value
//! channels `[h·D/H, (h+1)·D/H)` and a prior `p_h` over positions built from
//! `q = x_T W_Q` and `k_i = V_i W_K`.
//!
//! * `softmax`: `y_j = Σ_i p_{h(j)}(i) V_{ij}` with `W_Q, W_K ∈ ℝ^{D×D}` and
//!   query/key biases.
//! * `fem`: `y_j = (1 - λ_j) μ_j + λ_j F_j(β_j)` with `W_Q, W_K ∈ ℝ^{D×D/2}`,
//!   `λ = σ(x_T W_λ + b_λ)`, `β = softplus(raw + 1.8)`; outer gate and
//!   conditioner off.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{BETA_OFFSET, INIT_STD};
use crate::error::{FemError, Result};
use crate::fem_read::kernel;
use crate::mat::Mat;
use crate::tasks::{gen_argmax_batch, index_accuracy, ArgmaxSample, ArgmaxTaskConfig, Split};
use crate::tdc::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyModelKind {
    Fem,
    Softmax,
}

impl ToyModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyModelKind::Fem => "fem",
            ToyModelKind::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for ToyModelKind {
    type Err = FemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fem" => Ok(ToyModelKind::Fem),
            "softmax" | "softmax-baseline" => Ok(ToyModelKind::Softmax),
            other => Err(FemError::InvalidConfig(format!("unknown model '{other}' (fem | softmax)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub heads: usize,
    pub model: ToyModelKind,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            heads: 4,
            model: ToyModelKind::Fem,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch > 0 && self.heads > 0 && self.eval_every > 0;
        let rates = self.lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0;
        let betas = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(positive && rates && betas) {
            return Err(FemError::InvalidConfig("train config needs positive sizes and rates, betas in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub kind: ToyModelKind,
    pub heads: usize,
    pub w_q: Mat,
    pub w_k: Mat,
    /// Baseline only (empty for FEM).
    pub b_q: Mat,
    pub b_k: Mat,
    /// FEM only (empty for the baseline).
    pub w_lambda: Mat,
    pub b_lambda: Mat,
    pub beta_raw: Mat,
}

/// Per-sample forward values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ToyForward {
    pub y: Vec<f64>,
    x: Vec<f64>,
    q: Vec<f64>,
    /// H×T priors.
    p: Mat,
    mu: Vec<f64>,
    f: Vec<f64>,
    lambda: Vec<f64>,
    beta: Vec<f64>,
    /// D×T posteriors.
    post: Mat,
    /// D×T values.
    vt: Mat,
}

impl ToyModel {
    pub fn new(kind: ToyModelKind, d: usize, heads: usize, seed: u64) -> Result<Self> {
        let width = match kind {
            ToyModelKind::Fem => d / 2,
            ToyModelKind::Softmax => d,
        };
        if heads == 0 || d % heads != 0 || width == 0 || width % heads != 0 {
            return Err(FemError::InvalidConfig(format!("D={d} with H={heads} does not split into heads")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_q = Mat::randn(d, width, INIT_STD, &mut rng);
        let w_k = Mat::randn(d, width, INIT_STD, &mut rng);
        let empty = || Mat::zeros(0, 0);
        let (b_q, b_k, w_lambda, b_lambda, beta_raw) = match kind {
            ToyModelKind::Fem => {
                (empty(), empty(), Mat::randn(d, d, INIT_STD, &mut rng), Mat::zeros(1, d), Mat::zeros(1, d))
            }
            ToyModelKind::Softmax => (Mat::zeros(1, d), Mat::zeros(1, d), empty(), empty(), empty()),
        };
        Ok(Self { kind, heads, w_q, w_k, b_q, b_k, w_lambda, b_lambda, beta_raw })
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    /// Weight matrices (biases and temperatures excluded).
    pub fn linear_param_count(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_lambda.len()
    }

    pub fn total_param_count(&self) -> usize {
        self.linear_param_count() + self.b_q.len() + self.b_k.len() + self.b_lambda.len() + self.beta_raw.len()
    }

    pub fn named(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("b_q", &self.b_q),
            ("b_k", &self.b_k),
            ("w_lambda", &self.w_lambda),
            ("b_lambda", &self.b_lambda),
            ("beta_raw", &self.beta_raw),
        ]
    }

    fn named_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.b_q, &mut self.b_k, &mut self.w_lambda, &mut self.b_lambda, &mut self.beta_raw]
    }

    /// Weight decay applies to the projection matrices only.
    fn decays() -> [bool; 7] {
        [true, true, false, false, true, false, false]
    }

    fn head_key_width(&self) -> usize {
        self.w_q.cols() / self.heads
    }

    pub fn forward(&self, v: &Mat) -> ToyForward {
        let (t_len, d) = v.shape();
        let x = v.row(t_len - 1).to_vec();
        let width = self.w_q.cols();
        let dk = self.head_key_width();
        let cd = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut q = if self.b_q.is_empty() { vec![0.0; width] } else { self.b_q.row(0).to_vec() };
        for (r, &xr) in x.iter().enumerate() {
            for (qc, &w) in q.iter_mut().zip(self.w_q.row(r)) {
                *qc += xr * w;
            }
        }
        // u_h = W_K[:, head h] q_h, so that ⟨q_h, k_{h,i}⟩ = V_i · u_h + ⟨b_k, q⟩_h.
        let mut u = Mat::zeros(self.heads, d);
        for r in 0..d {
            let wk = self.w_k.row(r);
            for h in 0..self.heads {
                let dotp: f64 = (h * dk..(h + 1) * dk).map(|c| wk[c] * q[c]).sum();
                u.set(h, r, dotp);
            }
        }
        let key_bias: Vec<f64> = (0..self.heads)
            .map(|h| if self.b_k.is_empty() { 0.0 } else { (h * dk..(h + 1) * dk).map(|c| self.b_k.get(0, c) * q[c]).sum() })
            .collect();
        let mut p = Mat::zeros(self.heads, t_len);
        for i in 0..t_len {
            let vi = v.row(i);
            for h in 0..self.heads {
                let s: f64 = vi.iter().zip(u.row(h)).map(|(a, b)| a * b).sum();
                p.set(h, i, (s + key_bias[h]) * scale);
            }
        }
        for h in 0..self.heads {
            let row = p.row_mut(h);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }

        let mut mu = vec![0.0; d];
        let mut f = vec![0.0; d];
        let mut y = vec![0.0; d];
        let mut lambda = Vec::new();
        let mut beta = Vec::new();
        let mut post = Mat::zeros(0, 0);
        let vt = v.transpose();
        match self.kind {
            ToyModelKind::Softmax => {
                for j in 0..d {
                    mu[j] = kernel::mean(p.row(j / cd), vt.row(j));
                    y[j] = mu[j];
                }
            }
            ToyModelKind::Fem => {
                lambda = self.b_lambda.row(0).to_vec();
                for (r, &xr) in x.iter().enumerate() {
                    for (l, &w) in lambda.iter_mut().zip(self.w_lambda.row(r)) {
                        *l += xr * w;
                    }
                }
                lambda.iter_mut().for_each(|l| *l = sigmoid(*l));
                beta = self.beta_raw.row(0).iter().map(|&b| softplus(b + BETA_OFFSET)).collect();
                post = Mat::zeros(d, t_len);
                let mut qbuf = Vec::with_capacity(t_len);
                for j in 0..d {
                    let (m, fe) = kernel::tilt_stats(p.row(j / cd), vt.row(j), beta[j], &mut qbuf);
                    post.row_mut(j).copy_from_slice(&qbuf);
                    mu[j] = m;
                    f[j] = fe;
                    y[j] = (1.0 - lambda[j]) * m + lambda[j] * fe;
                }
            }
        }
        ToyForward { y, x, q, p, mu, f, lambda, beta, post, vt }
    }

    /// Accumulates parameter gradients for upstream `gy = ∂L/∂y` into `grads`
    /// (same order as [`ToyModel::named`]).
    pub fn backward(&self, v: &Mat, fw: &ToyForward, gy: &[f64], grads: &mut [Mat]) {
        let (t_len, d) = v.shape();
        let dk = self.head_key_width();
        let cd = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let mut gs = Mat::zeros(self.heads, t_len);
        for j in 0..d {
            if gy[j] == 0.0 {
                continue;
            }
            let h = j / cd;
            let p = fw.p.row(h);
            let lin = match self.kind {
                ToyModelKind::Softmax => gy[j],
                ToyModelKind::Fem => gy[j] * (1.0 - fw.lambda[j]),
            };
            let tilt = match self.kind {
                ToyModelKind::Softmax => 0.0,
                ToyModelKind::Fem => gy[j] * fw.lambda[j] / fw.beta[j],
            };
            let gsh = gs.row_mut(h);
            let vj = fw.vt.row(j);
            if tilt != 0.0 {
                for (i, ((o, &pi), &qi)) in gsh.iter_mut().zip(p).zip(fw.post.row(j)).enumerate() {
                    *o += lin * pi * (vj[i] - fw.mu[j]) + tilt * (qi - pi);
                }
            } else {
                for ((o, &pi), &x) in gsh.iter_mut().zip(p).zip(vj) {
                    *o += lin * pi * (x - fw.mu[j]);
                }
            }
        }

        if self.kind == ToyModelKind::Fem {
            let mut gz = vec![0.0; d];
            for j in 0..d {
                let (l, b) = (fw.lambda[j], fw.beta[j]);
                gz[j] = gy[j] * (fw.f[j] - fw.mu[j]) * l * (1.0 - l);
                let col_kl: f64 =
                    fw.post.row(j).iter().zip(fw.vt.row(j)).map(|(q, x)| q * (x - fw.f[j])).sum::<f64>() * b;
                let gbeta = gy[j] * l * col_kl.max(0.0) / (b * b);
                grads[6].add_at(0, j, gbeta * sigmoid(self.beta_raw.get(0, j) + BETA_OFFSET));
                grads[5].add_at(0, j, gz[j]);
            }
            for (r, &xr) in fw.x.iter().enumerate() {
                if xr == 0.0 {
                    continue;
                }
                for (g, &z) in grads[4].row_mut(r).iter_mut().zip(&gz) {
                    *g += xr * z;
                }
            }
        }

        // s_{h,i} = scale · V_i · u_h
        let mut gu = Mat::zeros(self.heads, d);
        for i in 0..t_len {
            let vi = v.row(i);
            for h in 0..self.heads {
                let g = gs.get(h, i) * scale;
                if g == 0.0 {
                    continue;
                }
                for (o, &x) in gu.row_mut(h).iter_mut().zip(vi) {
                    *o += g * x;
                }
            }
        }
        let mut gq = vec![0.0; self.w_q.cols()];
        for r in 0..d {
            let wk = self.w_k.row(r);
            for h in 0..self.heads {
                let g = gu.get(h, r);
                let cols = h * dk..(h + 1) * dk;
                let gk = &mut grads[1].row_mut(r)[cols.clone()];
                for (o, c) in gk.iter_mut().zip(cols.clone()) {
                    *o += g * fw.q[c];
                }
                for c in cols {
                    gq[c] += wk[c] * g;
                }
            }
        }
        if !self.b_k.is_empty() {
            for h in 0..self.heads {
                let total: f64 = gs.row(h).iter().sum::<f64>() * scale;
                for c in h * dk..(h + 1) * dk {
                    grads[3].add_at(0, c, total * fw.q[c]);
                    gq[c] += total * self.b_k.get(0, c);
                }
            }
            for (o, &g) in grads[2].row_mut(0).iter_mut().zip(&gq) {
                *o += g;
            }
        }
        for (r, &xr) in fw.x.iter().enumerate() {
            for (o, &g) in grads[0].row_mut(r).iter_mut().zip(&gq) {
                *o += xr * g;
            }
        }
    }

    /// Batch MSE `mean_{b,j} (y_bj - y*_bj)²` and its gradients.
    pub fn loss_and_grads(&self, samples: &[ArgmaxSample], y_star: &Mat) -> (f64, Vec<Mat>) {
        let mut grads: Vec<Mat> = self.named().iter().map(|(_, m)| Mat::zeros(m.rows(), m.cols())).collect();
        let n = (samples.len() * self.channels()) as f64;
        let mut loss = 0.0;
        for (b, s) in samples.iter().enumerate() {
            let fw = self.forward(&s.v);
            let gy: Vec<f64> = fw.y.iter().zip(y_star.row(b)).map(|(y, t)| 2.0 * (y - t) / n).collect();
            loss += fw.y.iter().zip(y_star.row(b)).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / n;
            self.backward(&s.v, &fw, &gy, &mut grads);
        }
        (loss, grads)
    }

    pub fn predict(&self, samples: &[ArgmaxSample]) -> Mat {
        let mut y = Mat::zeros(samples.len(), self.channels());
        for (b, s) in samples.iter().enumerate() {
            y.row_mut(b).copy_from_slice(&self.forward(&s.v).y);
        }
        y
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect::<Vec<_>>();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Mat], grads: &[Mat], decay: &[bool]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, param) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            let wd = if decay[k] { self.weight_decay } else { 0.0 };
            for (idx, (w, &g)) in param.as_mut_slice().iter_mut().zip(grads[k].as_slice()).enumerate() {
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * g;
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * g * g;
                let m_hat = m[idx] / c1;
                let v_hat = v[idx] / c2;
                *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * *w);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training-batch MSE since the previous row (step 0: first batch at init).
    pub train_mse: f64,
    pub val_mse: f64,
    pub index_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub model: ToyModel,
}

impl TrainOutcome {
    pub fn final_row(&self) -> MetricsRow {
        *self.rows.last().expect("at least the step-0 row")
    }
}

/// Validation MSE and index accuracy over the first `n_val` validation samples.
pub fn evaluate(model: &ToyModel, task: &ArgmaxTaskConfig, chunk: usize) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    let mut hits = 0.0;
    let mut seen = 0usize;
    let mut start = 0usize;
    while start < task.n_val {
        let size = chunk.min(task.n_val - start);
        let batch = gen_argmax_batch(task, Split::Val, start as u64, size);
        let y = model.predict(&batch.samples);
        sq += y.as_slice().iter().zip(batch.y_star.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        hits += index_accuracy(&y, &batch.samples)? * size as f64;
        seen += size;
        start += size;
    }
    if seen == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((sq / (seen * task.d) as f64, hits / seen as f64))
}

/// Trains one model; `on_row` sees each metrics row as it is produced.
pub fn train_toy(
    task: &ArgmaxTaskConfig,
    cfg: &TrainConfig,
    model_seed: u64,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    task.validate()?;
    cfg.validate()?;
    let mut model = ToyModel::new(cfg.model, task.d, cfg.heads, model_seed)?;
    let shapes: Vec<(usize, usize)> = model.named().iter().map(|(_, m)| m.shape()).collect();
    let mut opt = AdamW::new(cfg, &shapes);
    let mut rows = Vec::new();

    let first = gen_argmax_batch(task, Split::Train, 0, cfg.batch);
    let init_loss = {
        let y = model.predict(&first.samples);
        y.as_slice().iter().zip(first.y_star.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
    };
    let (val_mse, acc) = evaluate(&model, task, cfg.batch)?;
    let row = MetricsRow { step: 0, train_mse: init_loss, val_mse, index_accuracy: acc };
    on_row(&row);
    rows.push(row);

    let mut window = 0.0;
    let mut window_len = 0usize;
    for step in 1..=cfg.steps {
        let start = ((step - 1) * cfg.batch) as u64;
        let batch = gen_argmax_batch(task, Split::Train, start, cfg.batch);
        let (loss, grads) = model.loss_and_grads(&batch.samples, &batch.y_star);
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(FemError::NonFinite(format!("training diverged at step {step}")));
        }
        let mut params = model.named_mut();
        opt.update(&mut params, &grads, &ToyModel::decays());
        window += loss;
        window_len += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (val_mse, acc) = evaluate(&model, task, cfg.batch)?;
            let row = MetricsRow { step, train_mse: window / window_len as f64, val_mse, index_accuracy: acc };
            on_row(&row);
            rows.push(row);
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome { rows, model })
}

/// Writes `step,train_mse,val_mse,index_accuracy`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FemError::Io(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| FemError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Appends a line to a writer, mapping the error.
pub fn write_line(out: &mut impl Write, line: &str) -> Result<()> {
    writeln!(out, "{line}")?;
    Ok(())
}
