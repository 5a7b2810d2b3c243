//! Pre-norm residual FEM layer: projections, prior, TDC coupling, two-gate
//! read and output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Unary, Var};
use crate::error::{FemError, Result};
use crate::mat::Mat;
use crate::priors::{PriorFamily, GLA_FEATURE_EPS};
use crate::tdc::{default_hidden, CouplingHeads, TdcParams, ETA_G_BOUND};

pub const INIT_STD: f64 = 0.02;
/// `β_max = softplus(raw + BETA_OFFSET)`.
pub const BETA_OFFSET: f64 = 1.8;

/// Ablation switches; `true` keeps the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Low-rank convolution (TDC).
    pub conv: bool,
    /// LSE mixing; off means `F̃ = μ`.
    pub lse: bool,
    /// Learned temperature gate; off means `λ ≡ 1` on the LSE branch.
    pub temp: bool,
    /// Outer gate; off means `g ≡ 1`.
    pub gate: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles { conv: true, lse: true, temp: true, gate: true };
    pub const NONE: Toggles = Toggles { conv: false, lse: false, temp: false, gate: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d: usize,
    pub r: usize,
    pub heads: usize,
    pub family: PriorFamily,
    pub toggles: Toggles,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FemError::InvalidConfig(m));
        if self.d_model == 0 || self.d == 0 || self.r == 0 || self.heads == 0 {
            return bad("D, d, r and H must be positive".into());
        }
        if self.d % self.heads != 0 || (self.r * self.d) % self.heads != 0 {
            return bad(format!("d={} and r·d={} must be divisible by H={}", self.d, self.r * self.d, self.heads));
        }
        let width = self.prior_head_width();
        match self.family {
            PriorFamily::Softmax if width < 2 || width % 2 != 0 => {
                bad(format!("softmax prior needs an even per-head prior width, got {width}"))
            }
            PriorFamily::Gla if width < 3 => bad(format!("gla prior needs per-head prior width >= 3, got {width}")),
            PriorFamily::Softmax | PriorFamily::Gla => Ok(()),
            other => bad(format!("block supports softmax and gla priors, not {}", other.name())),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Columns of the prior block owned by one head.
    pub fn prior_head_width(&self) -> usize {
        self.r * self.d / self.heads
    }

    pub fn tdc_hidden(&self) -> usize {
        default_hidden(self.d)
    }

    /// Width of the conditioning output `c_t` (four equal slices).
    pub fn tdc_width(&self) -> usize {
        4 * self.tdc_hidden()
    }

    /// Per-head feature width `m` of `q̃`/`k̃`; GLA keeps the remaining
    /// columns of the head slice for the decay logit.
    pub fn feature_width(&self) -> usize {
        match self.family {
            PriorFamily::Gla => (self.prior_head_width() - 1) / 2,
            _ => self.prior_head_width() / 2,
        }
    }
}

/// `(4Dd + Ddr, 4Dd + Ddr == 4D²)`.
pub fn param_budget_check(d_model: usize, d: usize, r: usize) -> (usize, bool) {
    let count = 4 * d_model * d + d_model * d * r;
    (count, count == 4 * d_model * d_model)
}

/// Same identity for a fractional width `d = d_num / d_den`, in exact
/// integer arithmetic (scaled by `d_den`).
pub fn param_budget_check_ratio(d_model: usize, d_num: usize, d_den: usize, r: usize) -> bool {
    let (dm, num, den, r) = (d_model as u128, d_num as u128, d_den as u128, r as u128);
    den > 0 && 4 * dm * num + dm * num * r == 4 * dm * dm * den
}

#[derive(Debug, Clone, PartialEq)]
pub struct FemBlockParams {
    pub w_v: Mat,
    pub w_o: Mat,
    pub w_lambda: Mat,
    pub w_g: Mat,
    pub w_prior: Mat,
    pub b_lambda: Mat,
    pub b_g: Mat,
    pub beta_max_raw: Mat,
    pub tdc: TdcParams,
    pub coupling: CouplingHeads,
}

impl FemBlockParams {
    /// Linear projections under the budget (`W_V, W_O, W_λ, W_g`, prior block).
    pub fn linear_param_count(&self) -> usize {
        [&self.w_v, &self.w_o, &self.w_lambda, &self.w_g, &self.w_prior].iter().map(|m| m.len()).sum()
    }

    pub fn named(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_lambda", &self.w_lambda),
            ("w_g", &self.w_g),
            ("w_prior", &self.w_prior),
            ("b_lambda", &self.b_lambda),
            ("b_g", &self.b_g),
            ("beta_max_raw", &self.beta_max_raw),
            ("tdc.w_f", &self.tdc.w_f),
            ("tdc.w_x", &self.tdc.w_x),
            ("tdc.w_s", &self.tdc.w_s),
            ("tdc.w_c", &self.tdc.w_c),
            ("coupling.w_prior", &self.coupling.w_prior),
            ("coupling.w_value", &self.coupling.w_value),
            ("coupling.w_gate", &self.coupling.w_gate),
            ("coupling.w_lambda", &self.coupling.w_lambda),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("w_lambda", &mut self.w_lambda),
            ("w_g", &mut self.w_g),
            ("w_prior", &mut self.w_prior),
            ("b_lambda", &mut self.b_lambda),
            ("b_g", &mut self.b_g),
            ("beta_max_raw", &mut self.beta_max_raw),
            ("tdc.w_f", &mut self.tdc.w_f),
            ("tdc.w_x", &mut self.tdc.w_x),
            ("tdc.w_s", &mut self.tdc.w_s),
            ("tdc.w_c", &mut self.tdc.w_c),
            ("coupling.w_prior", &mut self.coupling.w_prior),
            ("coupling.w_value", &mut self.coupling.w_value),
            ("coupling.w_gate", &mut self.coupling.w_gate),
            ("coupling.w_lambda", &mut self.coupling.w_lambda),
        ]
    }

    /// Effective `β_max = softplus(raw + 1.8)`.
    pub fn beta_max(&self) -> Vec<f64> {
        self.beta_max_raw.row(0).iter().map(|&x| crate::tdc::softplus(x + BETA_OFFSET)).collect()
    }
}

/// Projections `~ N(0, 0.02²)`, biases and `β_max` raw at zero, coupling
/// heads at zero (identity modulation).
pub fn init_params(config: &BlockConfig, seed: u64) -> Result<FemBlockParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dm, d) = (config.d_model, config.d);
    let w_v = Mat::randn(dm, d, INIT_STD, &mut rng);
    let w_o = Mat::randn(d, dm, INIT_STD, &mut rng);
    let w_lambda = Mat::randn(dm, d, INIT_STD, &mut rng);
    let w_g = Mat::randn(dm, d, INIT_STD, &mut rng);
    let w_prior = Mat::randn(dm, config.r * d, INIT_STD, &mut rng);
    let tdc = TdcParams::init(dm, config.tdc_hidden(), config.tdc_width(), INIT_STD, &mut rng);
    let coupling = CouplingHeads::zeros(config.tdc_width(), config.r * d, d)?;
    Ok(FemBlockParams {
        w_v,
        w_o,
        w_lambda,
        w_g,
        w_prior,
        b_lambda: Mat::zeros(1, d),
        b_g: Mat::zeros(1, d),
        beta_max_raw: Mat::zeros(1, d),
        tdc,
        coupling,
    })
}

/// Forward tape plus the variables needed to read gradients back.
pub struct BlockCache {
    pub tape: Tape,
    pub y: Var,
    params: Vec<(&'static str, Var)>,
    pub lambda: Option<Var>,
    pub g: Option<Var>,
    pub priors: Vec<Var>,
}

impl BlockCache {
    pub fn output(&self) -> &Mat {
        self.tape.value(self.y)
    }

    /// Per-head prior matrices.
    pub fn prior(&self, head: usize) -> &Mat {
        self.tape.value(self.priors[head])
    }
}

pub fn block_forward(x: &Mat, params: &FemBlockParams, config: &BlockConfig) -> Result<(Mat, BlockCache)> {
    block_forward_with(x, params, config, false)
}

/// As [`block_forward`]; `freeze_gate` computes the outer gate and then
/// replaces it by ones.
pub fn block_forward_with(
    x: &Mat,
    params: &FemBlockParams,
    config: &BlockConfig,
    freeze_gate: bool,
) -> Result<(Mat, BlockCache)> {
    config.validate()?;
    if x.cols() != config.d_model {
        return Err(FemError::Shape(format!("input width {} vs D={}", x.cols(), config.d_model)));
    }
    let (n, d, h) = (x.rows(), config.d, config.heads);
    let mut tape = Tape::new();
    let named: Vec<(&'static str, Var)> = params.named().into_iter().map(|(k, m)| (k, tape.leaf(m.clone()))).collect();
    let p = |k: &str| named.iter().find(|(name, _)| *name == k).map(|(_, v)| *v).expect("known parameter");

    let xv = tape.leaf(x.clone());
    let xn = tape.rms_norm(xv);
    let mut values = tape.matmul(xn, p("w_v"));
    let mut theta = tape.matmul(xn, p("w_prior"));

    let lambda_pre = tape.matmul(xn, p("w_lambda"));
    let lambda_pre = tape.add_row(lambda_pre, p("b_lambda"));
    let mut lambda = tape.map(lambda_pre, Unary::Sigmoid);
    let g_pre = tape.matmul(xn, p("w_g"));
    let g_pre = tape.add_row(g_pre, p("b_g"));
    let g_sp = tape.map(g_pre, Unary::Softplus);
    let mut g = tape.rms_norm(g_sp);

    if config.toggles.conv {
        let xt = tape.layer_norm(xn);
        let s_pre = tape.matmul(xt, p("tdc.w_f"));
        let s = tape.map(s_pre, Unary::Softplus);
        let u = tape.matmul(xt, p("tdc.w_x"));
        let a_pre = tape.matmul(xt, p("tdc.w_s"));
        let a = tape.map(a_pre, Unary::Softplus);
        let h_tilde = tape.decay_scan(s, u);
        let a_unit = tape.unit_norm(a);
        let a_act = tape.map(a_unit, Unary::Silu);
        let h_ln = tape.layer_norm(h_tilde);
        let local = tape.mul(a_act, h_ln);
        let c = tape.matmul(local, p("tdc.w_c"));
        let q = config.tdc_hidden();
        let slice = |tape: &mut Tape, k: usize, head: &str| {
            let part = tape.slice_cols(c, k * q, q);
            tape.matmul(part, p(head))
        };
        let shift = slice(&mut tape, 0, "coupling.w_prior");
        theta = tape.add(theta, shift);
        let eta_v = slice(&mut tape, 1, "coupling.w_value");
        let one_v = tape.add_scalar(eta_v, 1.0);
        values = tape.mul(values, one_v);
        let eta_g_pre = slice(&mut tape, 2, "coupling.w_gate");
        let eta_g = tape.map(eta_g_pre, Unary::Tanh);
        let eta_g = tape.scale(eta_g, ETA_G_BOUND);
        let one_g = tape.add_scalar(eta_g, 1.0);
        g = tape.mul(g, one_g);
        let eta_l = slice(&mut tape, 3, "coupling.w_lambda");
        let one_l = tape.add_scalar(eta_l, 1.0);
        let scaled = tape.mul(lambda, one_l);
        lambda = tape.clamp01(scaled);
    }

    let beta_shift = tape.add_scalar(p("beta_max_raw"), BETA_OFFSET);
    let beta = tape.map(beta_shift, Unary::Softplus);

    let lambda_used = match (config.toggles.lse, config.toggles.temp) {
        (false, _) => tape.leaf(Mat::zeros(n, d)),
        (true, false) => tape.leaf(Mat::filled(n, d, 1.0)),
        (true, true) => lambda,
    };
    let g_used = if config.toggles.gate && !freeze_gate { g } else { tape.leaf(Mat::filled(n, d, 1.0)) };

    let (dh, w, m) = (config.head_dim(), config.prior_head_width(), config.feature_width());
    let mut outs = Vec::with_capacity(h);
    let mut priors = Vec::with_capacity(h);
    for head in 0..h {
        let th = tape.slice_cols(theta, head * w, w);
        let prior = match config.family {
            PriorFamily::Softmax => {
                let q = tape.slice_cols(th, 0, m);
                let k = tape.slice_cols(th, m, m);
                let logits = tape.matmul_nt(q, k);
                let logits = tape.scale(logits, 1.0 / (m as f64).sqrt());
                tape.causal_softmax(logits)
            }
            _ => {
                let feat = |tape: &mut Tape, start: usize| {
                    let raw = tape.slice_cols(th, start, m);
                    let rot = tape.rope(raw);
                    let pos = tape.map(rot, Unary::Relu);
                    tape.add_scalar(pos, GLA_FEATURE_EPS)
                };
                let q = feat(&mut tape, 0);
                let k = feat(&mut tape, m);
                let z_cols = tape.slice_cols(th, 2 * m, w - 2 * m);
                let ones = ones_col(&mut tape, w - 2 * m);
                let z = tape.matmul(z_cols, ones);
                let sp = tape.map(z, Unary::Softplus);
                let gates = tape.scale(sp, -1.0);
                let log_env = tape.cumsum(gates);
                let kernel = tape.decay_kernel(log_env);
                let dots = tape.matmul_nt(q, k);
                let scores = tape.mul(dots, kernel);
                tape.row_normalize(scores)
            }
        };
        priors.push(prior);
        let cols = |tape: &mut Tape, var: Var| tape.slice_cols(var, head * dh, dh);
        let vh = cols(&mut tape, values);
        let lh = cols(&mut tape, lambda_used);
        let gh = cols(&mut tape, g_used);
        let bh = cols(&mut tape, beta);
        outs.push(tape.fem_read(prior, vh, lh, gh, bh)?);
    }
    let o = tape.concat_cols(&outs);
    let proj = tape.matmul(o, p("w_o"));
    let y = tape.add(xv, proj);
    let out = tape.value(y).clone();
    let cache = BlockCache {
        tape,
        y,
        params: named,
        lambda: config.toggles.lse.then_some(lambda),
        g: config.toggles.gate.then_some(g),
        priors,
    };
    Ok((out, cache))
}

fn ones_col(tape: &mut Tape, rows: usize) -> Var {
    tape.leaf(Mat::filled(rows, 1, 1.0))
}

/// Gradients of `Σ upstream ⊙ y` for every parameter tensor.
pub fn block_backward(cache: &BlockCache, upstream: &Mat) -> Result<Vec<(&'static str, Mat)>> {
    let grads = cache.tape.backward(cache.y, upstream.clone())?;
    Ok(cache.params.iter().map(|&(name, var)| (name, grads.get(&cache.tape, var))).collect())
}
