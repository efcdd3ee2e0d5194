//! Self-supervised training of the value network.
//!
//! All variants minimize the mean absolute residual of the variational
//! inequality `min{DₜV + H(x, ∇V), l − V} = 0` over sampled `(x, t)`. The
//! Vanilla parameterization additionally needs the boundary loss
//! `|V(x, T) − l(x)|` weighted by λ; Diff and Exact train on the single
//! residual.
//!
//! For hybrid systems a fraction of each batch sits on the switching surface
//! and penalizes `|V(x_S, t) − min(l(x_S), V(Δ(x_S), t))|`: at the guard, the
//! tube value is the value of the post-impact state unless the pre-impact
//! state already scores. Without these samples the network would only ever
//! see the smooth flow.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array1, Array2, NdFloat, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Layers, NetParams, ParamGrad, DEFAULT_OMEGA0};
use crate::rng::{self, Stream};
use crate::systems::SystemSpec;
use crate::value::{compose, encode_input, net_weight, value_scaled, Variant};

/// Arithmetic used for batched forward/backward passes. Parameters, Adam
/// moments and all evaluation stay in double precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F64),
            1 => Some(Precision::F32),
            _ => None,
        }
    }
}

fn default_iters() -> usize {
    10_000
}
fn default_pretrain_iters() -> usize {
    2_500
}
fn default_batch_size() -> usize {
    65_000
}
fn default_lr() -> f64 {
    2e-5
}
fn default_one() -> f64 {
    1.0
}
fn default_terminal_fraction() -> f64 {
    0.2
}
fn default_guard_fraction() -> f64 {
    0.1
}
fn default_width() -> usize {
    512
}
fn default_layers() -> usize {
    3
}
fn default_omega0() -> f64 {
    DEFAULT_OMEGA0
}
fn default_chunk() -> usize {
    1024
}
fn default_log_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_pretrain_iters")]
    pub pretrain_iters: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Boundary-loss weight (Vanilla only).
    #[serde(default = "default_one")]
    pub lambda: f64,
    #[serde(default)]
    pub adaptive_lambda: bool,
    /// Share of `iters` over which the time interval grows from `[T, T]` to `[0, T]`.
    #[serde(default = "default_one")]
    pub curriculum_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Share of a Vanilla batch pinned to `t = T`.
    #[serde(default = "default_terminal_fraction")]
    pub terminal_fraction: f64,
    /// Share of a batch placed on the switching surface (hybrid systems only).
    #[serde(default = "default_guard_fraction")]
    pub guard_fraction: f64,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
    /// Multiplies the network output of the Vanilla model, e.g. `max |l|`.
    #[serde(default = "default_one")]
    pub vanilla_scale: f64,
    /// Process batch chunks sequentially on the calling thread.
    #[serde(default)]
    pub deterministic: bool,
    /// Samples per forward/backward chunk.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default)]
    pub log_path: Option<std::path::PathBuf>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            iters: default_iters(),
            pretrain_iters: default_pretrain_iters(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            lambda: 1.0,
            adaptive_lambda: false,
            curriculum_fraction: 1.0,
            seed: 0,
            precision: Precision::F64,
            terminal_fraction: default_terminal_fraction(),
            guard_fraction: default_guard_fraction(),
            hidden_width: default_width(),
            hidden_layers: default_layers(),
            omega0: DEFAULT_OMEGA0,
            vanilla_scale: 1.0,
            deterministic: false,
            chunk_size: default_chunk(),
            log_path: None,
            log_every: default_log_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.curriculum_fraction > 0.0 && self.curriculum_fraction <= 1.0) {
            return bad("curriculum_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.terminal_fraction) {
            return bad("terminal_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.guard_fraction) {
            return bad("guard_fraction must lie in [0, 1)");
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be positive");
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return bad("the network needs at least one hidden layer of positive width");
        }
        if !(self.omega0 > 0.0) || !self.omega0.is_finite() {
            return bad("omega0 must be positive");
        }
        if !(self.vanilla_scale > 0.0) || !self.vanilla_scale.is_finite() {
            return bad("vanilla_scale must be positive");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1");
        }
        Ok(())
    }

    pub fn layer_sizes(&self, sys: &SystemSpec) -> Vec<usize> {
        let mut sizes = vec![sys.state_dim() + 1];
        sizes.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        sizes.push(1);
        sizes
    }

    pub fn init_params(&self, sys: &SystemSpec) -> Result<NetParams> {
        NetParams::init(self.seed, &self.layer_sizes(sys), self.omega0)
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates of Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamGrad,
    v: ParamGrad,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        Self {
            m: ParamGrad::zeros_like(params),
            v: ParamGrad::zeros_like(params),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut NetParams, grad: &ParamGrad, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let apply = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for l in 0..params.weights.len() {
            Zip::from(&mut params.weights[l])
                .and(&grad.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(apply);
            Zip::from(&mut params.biases[l])
                .and(&grad.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(apply);
        }
    }
}

/// Time interval sampled at training iteration `iter`.
pub fn curriculum_interval(iter: usize, cfg: &TrainConfig, horizon: f64) -> (f64, f64) {
    let ramp = cfg.curriculum_fraction * cfg.iters as f64;
    let progress = if ramp > 0.0 {
        (iter as f64 / ramp).min(1.0)
    } else {
        1.0
    };
    (horizon * (1.0 - progress), horizon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Interior,
    /// Pinned to `t = T` (Vanilla boundary samples).
    Terminal,
    /// On the switching surface, before the reset.
    Guard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub t: f64,
    pub kind: SampleKind,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        hi
    }
}

fn guard_count(sys: &SystemSpec, cfg: &TrainConfig) -> usize {
    match sys.switching_surface() {
        Some(s) if sys.domain_hi[1 - s.dim] > 0.0 => {
            (cfg.guard_fraction * cfg.batch_size as f64).ceil() as usize
        }
        _ => 0,
    }
}

/// Draws a training batch. Vanilla batches lead with `⌈terminal_fraction·B⌉`
/// samples at `t = T`; hybrid systems end with guard samples.
pub fn sample_batch(
    sys: &SystemSpec,
    interval: (f64, f64),
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Vec<Sample> {
    let (t_lo, t_hi) = interval;
    let n = cfg.batch_size;
    let terminal = if cfg.variant == Variant::Vanilla {
        ((cfg.terminal_fraction * n as f64).ceil() as usize).min(n)
    } else {
        0
    };
    let guards = guard_count(sys, cfg).min(n - terminal);
    let mut out = Vec::with_capacity(n);
    for i in 0..n - guards {
        let x: Vec<f64> = sys
            .domain_lo
            .iter()
            .zip(&sys.domain_hi)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect();
        let (t, kind) = if i < terminal {
            (sys.horizon, SampleKind::Terminal)
        } else {
            (uniform(rng, t_lo, t_hi), SampleKind::Interior)
        };
        out.push(Sample {
            x: sys.canonicalize(&x),
            t,
            kind,
        });
    }
    if let Some(surface) = sys.switching_surface() {
        let other = 1 - surface.dim;
        let hi = sys.domain_hi[other];
        for _ in 0..guards {
            let mut x = vec![0.0; 2];
            x[surface.dim] = surface.threshold;
            // Only states moving toward the surface reach it.
            x[other] = hi - rng.random_range(0.0..hi);
            out.push(Sample {
                x,
                t: uniform(rng, t_lo, t_hi),
                kind: SampleKind::Guard,
            });
        }
    }
    out
}

/// The residual `min{a, b}` of the variational inequality, in absolute value.
pub fn vi_residual(dt_plus_h: f64, l_minus_v: f64) -> f64 {
    dt_plus_h.min(l_minus_v).abs()
}

/// `|min{DₜV + H, l − V}|` at one `(x, t)`.
pub fn pde_residual(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    pde_residual_scaled(variant, params, sys, x, t, 1.0)
}

pub fn pde_residual_scaled(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
    vanilla_scale: f64,
) -> Result<f64> {
    let e = value_scaled(variant, params, sys, x, t, vanilla_scale)?;
    let h = sys.hamiltonian(x, &e.grad_x)?;
    Ok(vi_residual(e.dt + h, sys.target_fn(&sys.canonicalize(x)) - e.v))
}

/// `|V(x, T) − l(x)|` for the Vanilla model.
pub fn bc_residual(params: &NetParams, sys: &SystemSpec, x: &[f64]) -> Result<f64> {
    bc_residual_scaled(params, sys, x, 1.0)
}

pub fn bc_residual_scaled(
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    vanilla_scale: f64,
) -> Result<f64> {
    let xc = sys.canonicalize(x);
    let o = params.forward(&encode_input(sys, &xc, sys.horizon))?;
    Ok((vanilla_scale * o - sys.target_fn(&xc)).abs())
}

/// `|V(x_S, t) − min(l(x_S), V(Δ(x_S), t))|` for a state on the switching
/// surface. `V(x_S, ·)` is the network evaluated at `x_S` itself, not at its
/// canonical image.
pub fn guard_residual(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
    vanilla_scale: f64,
) -> Result<f64> {
    let pre = raw_value(variant, params, sys, x, t, vanilla_scale)?;
    let post_x = sys.canonicalize(&sys.reset(x));
    let post = raw_value(variant, params, sys, &post_x, t, vanilla_scale)?;
    Ok((pre - sys.target_fn(x).min(post)).abs())
}

fn raw_value(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
    vanilla_scale: f64,
) -> Result<f64> {
    let o = params.forward(&encode_input(sys, x, t))?;
    let w = net_weight(variant, sys, t, vanilla_scale);
    Ok(if variant.uses_target() {
        sys.target_fn(x) + w * o
    } else {
        w * o
    })
}

/// Losses of one batch and their parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Mean residual over the batch (guard samples included).
    pub pde_loss: f64,
    /// Mean boundary residual over the batch; zero for Diff and Exact.
    pub bc_loss: f64,
    /// Mean guard residual over the batch (already part of `pde_loss`).
    pub guard_loss: f64,
    /// Gradient of `pde_loss + λ·bc_loss`, or of `pde_loss` alone when split.
    pub grad: ParamGrad,
    /// Gradient of `bc_loss` when requested separately.
    pub bc_grad: Option<ParamGrad>,
    /// Number of boundary residuals evaluated.
    pub bc_evaluations: usize,
}

struct Chunk {
    pde_sum: f64,
    bc_sum: f64,
    guard_sum: f64,
    grad: ParamGrad,
    bc_grad: Option<ParamGrad>,
    bc_evaluations: usize,
}

struct LossSpec<'a> {
    variant: Variant,
    sys: &'a SystemSpec,
    vanilla_scale: f64,
    lambda: f64,
    split: bool,
    /// `1 / B`.
    inv_batch: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn cast<A: NdFloat>(v: f64) -> A {
    A::from(v).expect("finite input")
}

fn process_chunk<A: NdFloat>(
    layers: &Layers<A>,
    spec: &LossSpec<'_>,
    samples: &[Sample],
    zero: &ParamGrad,
) -> Chunk {
    let sys = spec.sys;
    let n = sys.state_dim();
    let d0 = n + 1;
    // Column layout: one column per sample, guard samples get a second column
    // for the post-reset state.
    let mut cols = Vec::with_capacity(samples.len() + 8);
    let mut post_col = vec![usize::MAX; samples.len()];
    let mut post_states = vec![Vec::new(); samples.len()];
    for s in samples {
        cols.push(encode_input(sys, &s.x, s.t));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.kind == SampleKind::Guard {
            let y = sys.canonicalize(&sys.reset(&s.x));
            post_col[i] = cols.len();
            cols.push(encode_input(sys, &y, s.t));
            post_states[i] = y;
        }
    }
    let m = cols.len();
    let mut z = Array2::<A>::zeros((d0, m));
    for (b, c) in cols.iter().enumerate() {
        for k in 0..d0 {
            z[[k, b]] = cast(c[k]);
        }
    }
    let tape = layers.forward(z.view());
    let out = |b: usize| tape.output[b].to_f64().unwrap();

    let mut out_adj = Array1::<A>::zeros(m);
    let mut grad_adj = Array2::<A>::zeros((d0, m));
    let mut bc_adj = if spec.split {
        Some(Array1::<A>::zeros(m))
    } else {
        None
    };
    let scale = sys.normalization_scale();
    let horizon = sys.horizon;
    let mut u = vec![0.0; sys.control_dim()];
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; d0];
    let (mut pde_sum, mut bc_sum, mut guard_sum) = (0.0, 0.0, 0.0);
    let mut bc_evaluations = 0;

    for (b, s) in samples.iter().enumerate() {
        let o = out(b);
        let w = net_weight(spec.variant, sys, s.t, spec.vanilla_scale);
        if s.kind == SampleKind::Guard {
            let pb = post_col[b];
            let l_pre = sys.target_fn(&s.x);
            let pre = if spec.variant.uses_target() { l_pre + w * o } else { w * o };
            let o_post = out(pb);
            let post = if spec.variant.uses_target() {
                sys.target_fn(&post_states[b]) + w * o_post
            } else {
                w * o_post
            };
            let r = pre - l_pre.min(post);
            guard_sum += r.abs();
            let a = sign(r) * spec.inv_batch;
            out_adj[b] = cast(a * w);
            if post < l_pre {
                out_adj[pb] = cast(-a * w);
            }
            continue;
        }
        for k in 0..d0 {
            g[k] = tape.input_grad[[k, b]].to_f64().unwrap();
        }
        let e = compose(spec.variant, sys, &s.x, s.t, o, &g, spec.vanilla_scale);
        let h = sys.hamiltonian_into(&s.x, &e.grad_x, &mut u, &mut f);
        let l = sys.target_fn(&s.x);
        let (a_branch, b_branch) = (e.dt + h, l - e.v);
        let r = a_branch.min(b_branch);
        pde_sum += r.abs();
        let a = sign(r) * spec.inv_batch;
        if a_branch <= b_branch {
            if spec.variant == Variant::Exact {
                out_adj[b] = cast(-a);
            }
            grad_adj[[0, b]] = cast(a * w / horizon);
            for i in 0..n {
                grad_adj[[i + 1, b]] = cast(a * w * scale[i] * f[i]);
            }
        } else {
            out_adj[b] = cast(-a * w);
        }
        if s.kind == SampleKind::Terminal {
            bc_evaluations += 1;
            let r_bc = spec.vanilla_scale * o - l;
            bc_sum += r_bc.abs();
            let a_bc = sign(r_bc) * spec.inv_batch * spec.vanilla_scale;
            match bc_adj.as_mut() {
                Some(adj) => adj[b] = cast(a_bc),
                None => out_adj[b] += cast::<A>(spec.lambda * a_bc),
            }
        }
    }

    let grad = if m == 0 {
        zero.clone()
    } else {
        layers.backward(&tape, out_adj.view(), grad_adj.view())
    };
    let bc_grad = bc_adj.map(|adj| {
        let zeros = Array2::<A>::zeros((d0, m));
        layers.backward(&tape, adj.view(), zeros.view())
    });
    Chunk {
        pde_sum,
        bc_sum,
        guard_sum,
        grad,
        bc_grad,
        bc_evaluations,
    }
}

fn batch_loss_in<A: NdFloat>(
    params: &NetParams,
    spec: &LossSpec<'_>,
    samples: &[Sample],
    chunk_size: usize,
    deterministic: bool,
) -> BatchLoss {
    let layers = Layers::<A>::from_params(params);
    let zero = ParamGrad::zeros_like(params);
    let chunks: Vec<&[Sample]> = samples.chunks(chunk_size).collect();
    let results: Vec<Chunk> = if deterministic {
        chunks
            .iter()
            .map(|c| process_chunk(&layers, spec, c, &zero))
            .collect()
    } else {
        chunks
            .par_iter()
            .map(|c| process_chunk(&layers, spec, c, &zero))
            .collect()
    };
    // Summed in chunk order either way, so results do not depend on scheduling.
    let mut total = BatchLoss {
        pde_loss: 0.0,
        bc_loss: 0.0,
        guard_loss: 0.0,
        grad: zero.clone(),
        bc_grad: spec.split.then(|| zero.clone()),
        bc_evaluations: 0,
    };
    for c in results {
        total.pde_loss += c.pde_sum;
        total.bc_loss += c.bc_sum;
        total.guard_loss += c.guard_sum;
        total.grad.add_scaled(&c.grad, 1.0);
        if let (Some(acc), Some(g)) = (total.bc_grad.as_mut(), c.bc_grad.as_ref()) {
            acc.add_scaled(g, 1.0);
        }
        total.bc_evaluations += c.bc_evaluations;
    }
    total.pde_loss = (total.pde_loss + total.guard_loss) * spec.inv_batch;
    total.bc_loss *= spec.inv_batch;
    total.guard_loss *= spec.inv_batch;
    total
}

/// Mean losses of `samples` and the gradient of `pde + λ·bc` (or of the two
/// parts separately when `split`).
pub fn batch_loss(
    params: &NetParams,
    sys: &SystemSpec,
    cfg: &TrainConfig,
    samples: &[Sample],
    lambda: f64,
    split: bool,
) -> BatchLoss {
    let spec = LossSpec {
        variant: cfg.variant,
        sys,
        vanilla_scale: cfg.vanilla_scale,
        lambda,
        split,
        inv_batch: 1.0 / samples.len().max(1) as f64,
    };
    match cfg.precision {
        Precision::F64 => {
            batch_loss_in::<f64>(params, &spec, samples, cfg.chunk_size, cfg.deterministic)
        }
        Precision::F32 => {
            batch_loss_in::<f32>(params, &spec, samples, cfg.chunk_size, cfg.deterministic)
        }
    }
}

/// One rebalancing step: `λ ← 0.9 λ + 0.1 · max|∇pde| / mean|∇bc|`, clipped.
pub fn adaptive_lambda_update(lambda: f64, pde_grad: &ParamGrad, bc_grad: &ParamGrad) -> f64 {
    let denom = bc_grad.mean_abs();
    if !(denom > 0.0) || !denom.is_finite() {
        return lambda;
    }
    let ratio = pde_grad.max_abs() / denom;
    (0.9 * lambda + 0.1 * ratio).clamp(1e-2, 1e4)
}

const LAMBDA_PERIOD: usize = 10;

fn pretrain_gradient<A: NdFloat>(
    params: &NetParams,
    sys: &SystemSpec,
    states: &[Vec<f64>],
    chunk_size: usize,
) -> (f64, ParamGrad) {
    let layers = Layers::<A>::from_params(params);
    let d0 = sys.state_dim() + 1;
    let inv = 1.0 / states.len() as f64;
    let mut grad = ParamGrad::zeros_like(params);
    let mut loss = 0.0;
    for chunk in states.chunks(chunk_size) {
        let m = chunk.len();
        let mut z = Array2::<A>::zeros((d0, m));
        for (b, x) in chunk.iter().enumerate() {
            for (k, v) in encode_input(sys, x, sys.horizon).into_iter().enumerate() {
                z[[k, b]] = cast(v);
            }
        }
        let tape = layers.forward_output(z.view());
        let mut adj = Array1::<A>::zeros(m);
        for b in 0..m {
            let o = tape.output[b].to_f64().unwrap();
            loss += o.abs();
            adj[b] = cast(sign(o) * inv);
        }
        grad.add_scaled(&layers.backward_output(&tape, adj.view()), 1.0);
    }
    (loss * inv, grad)
}

/// One Adam step on `mean |O(x, T)|` over a uniform state batch. Returns the
/// batch loss before the step.
pub fn pretrain_step(
    params: &mut NetParams,
    sys: &SystemSpec,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    adam: &mut AdamState,
) -> Result<f64> {
    let states: Vec<Vec<f64>> = (0..cfg.batch_size)
        .map(|_| {
            let x: Vec<f64> = sys
                .domain_lo
                .iter()
                .zip(&sys.domain_hi)
                .map(|(lo, hi)| rng.random_range(*lo..*hi))
                .collect();
            sys.canonicalize(&x)
        })
        .collect();
    let (loss, grad) = match cfg.precision {
        Precision::F64 => pretrain_gradient::<f64>(params, sys, &states, cfg.chunk_size),
        Precision::F32 => pretrain_gradient::<f32>(params, sys, &states, cfg.chunk_size),
    };
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter: adam.step as usize,
            detail: format!("pretraining loss {loss}"),
        });
    }
    adam.update(params, &grad, cfg.lr);
    Ok(loss)
}

/// Diagnostics of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: usize,
    pub t_lo: f64,
    pub pde_loss: f64,
    pub bc_loss: f64,
    pub guard_loss: f64,
    pub lambda: f64,
    pub bc_evaluations: usize,
}

/// One training iteration: sample, evaluate, backpropagate, Adam update.
/// `lambda` is read and, when adaptive, updated in place.
pub fn train_step(
    params: &mut NetParams,
    sys: &SystemSpec,
    cfg: &TrainConfig,
    iter: usize,
    rng: &mut impl Rng,
    adam: &mut AdamState,
    lambda: &mut f64,
) -> Result<StepStats> {
    let interval = curriculum_interval(iter, cfg, sys.horizon);
    let samples = sample_batch(sys, interval, cfg, rng);
    let vanilla = cfg.variant == Variant::Vanilla;
    let rebalance = vanilla && cfg.adaptive_lambda && iter.is_multiple_of(LAMBDA_PERIOD);
    let mut loss = batch_loss(params, sys, cfg, &samples, *lambda, rebalance);
    let total = loss.pde_loss + *lambda * loss.bc_loss;
    if !total.is_finite() || !loss.grad.is_finite() {
        let outputs: Vec<f64> = samples
            .iter()
            .take(4)
            .map(|s| params.forward(&encode_input(sys, &s.x, s.t)).unwrap_or(f64::NAN))
            .collect();
        return Err(Error::NonFiniteLoss {
            iter,
            detail: format!(
                "pde {} bc {} lambda {} t_lo {} batch {} first outputs {outputs:?}",
                loss.pde_loss,
                loss.bc_loss,
                lambda,
                interval.0,
                samples.len()
            ),
        });
    }
    if let Some(bc_grad) = loss.bc_grad.take() {
        *lambda = adaptive_lambda_update(*lambda, &loss.grad, &bc_grad);
        loss.grad.add_scaled(&bc_grad, *lambda);
    }
    adam.update(params, &loss.grad, cfg.lr);
    Ok(StepStats {
        iter,
        t_lo: interval.0,
        pde_loss: loss.pde_loss,
        bc_loss: loss.bc_loss,
        guard_loss: loss.guard_loss,
        lambda: *lambda,
        bc_evaluations: loss.bc_evaluations,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub iteration: usize,
    pub t_lo: f64,
    pub pde_loss: f64,
    pub bc_loss: f64,
    pub lambda: f64,
    pub wall_time_s: f64,
}

fn write_record(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Runs `cfg.pretrain_iters` pretraining steps with a fresh optimizer and
/// returns the loss trace.
pub fn run_pretrain(
    params: &mut NetParams,
    sys: &SystemSpec,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    let start = Instant::now();
    let mut adam = AdamState::new(params);
    let mut trace = Vec::with_capacity(cfg.pretrain_iters);
    for iter in 0..cfg.pretrain_iters {
        let mut rng = rng::iteration(cfg.seed, Stream::Pretrain, iter);
        let loss = pretrain_step(params, sys, cfg, &mut rng, &mut adam)?;
        trace.push(loss);
        if iter % cfg.log_every.max(1) == 0 || iter + 1 == cfg.pretrain_iters {
            write_record(
                &mut log,
                &LogRecord {
                    phase: "pretrain".into(),
                    iteration: iter,
                    t_lo: sys.horizon,
                    pde_loss: loss,
                    bc_loss: 0.0,
                    lambda: 0.0,
                    wall_time_s: start.elapsed().as_secs_f64(),
                },
            )?;
        }
    }
    Ok(trace)
}

/// Runs training iterations `start_iter..cfg.iters` with a fresh optimizer.
pub fn run_train(
    params: &mut NetParams,
    sys: &SystemSpec,
    cfg: &TrainConfig,
    start_iter: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepStats>> {
    let start = Instant::now();
    let mut adam = AdamState::new(params);
    let mut lambda = cfg.lambda;
    let mut stats = Vec::with_capacity(cfg.iters.saturating_sub(start_iter));
    for iter in start_iter..cfg.iters {
        let mut rng = rng::iteration(cfg.seed, Stream::Train, iter);
        let s = train_step(params, sys, cfg, iter, &mut rng, &mut adam, &mut lambda)?;
        if iter % cfg.log_every.max(1) == 0 || iter + 1 == cfg.iters {
            write_record(
                &mut log,
                &LogRecord {
                    phase: "train".into(),
                    iteration: iter,
                    t_lo: s.t_lo,
                    pde_loss: s.pde_loss,
                    bc_loss: s.bc_loss,
                    lambda: s.lambda,
                    wall_time_s: start.elapsed().as_secs_f64(),
                },
            )?;
        }
        stats.push(s);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            hidden_width: 8,
            hidden_layers: 2,
            batch_size: 4,
            omega0: 3.0,
            deterministic: true,
            ..TrainConfig::new(variant)
        }
    }

    #[test]
    fn curriculum_examples() {
        let cfg = TrainConfig {
            iters: 1000,
            ..TrainConfig::new(Variant::Exact)
        };
        assert_eq!(curriculum_interval(0, &cfg, 6.3), (6.3, 6.3));
        assert_eq!(curriculum_interval(1000, &cfg, 6.3), (0.0, 6.3));
        assert_eq!(curriculum_interval(5000, &cfg, 6.3), (0.0, 6.3));
        let (lo, _) = curriculum_interval(500, &cfg, 6.3);
        assert!((lo - 3.15).abs() < 1e-12);
        let half = TrainConfig {
            curriculum_fraction: 0.5,
            ..cfg.clone()
        };
        assert_eq!(curriculum_interval(500, &half, 6.3).0, 0.0);
        let mut prev = f64::INFINITY;
        for it in 0..1200 {
            let lo = curriculum_interval(it, &cfg, 6.3).0;
            assert!(lo <= prev);
            prev = lo;
        }
    }

    #[test]
    fn batch_at_horizon_interval() {
        let sys = SystemSpec::bicycle();
        let cfg = TrainConfig {
            batch_size: 500,
            ..TrainConfig::new(Variant::Exact)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&sys, (1.0, 1.0), &cfg, &mut rng);
        assert_eq!(b.len(), 500);
        assert!(b.iter().all(|s| s.t == 1.0));
    }

    #[test]
    fn normalized_samples_are_centered() {
        let sys = SystemSpec::rocket();
        let cfg = TrainConfig {
            batch_size: 100_000,
            ..TrainConfig::new(Variant::Exact)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&sys, (0.0, sys.horizon), &cfg, &mut rng);
        let mut mean = vec![0.0; sys.state_dim()];
        for s in &b {
            for (m, z) in mean.iter_mut().zip(sys.normalize(&s.x)) {
                *m += z / b.len() as f64;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 0.02), "{mean:?}");
    }

    #[test]
    fn vanilla_batch_pins_terminal_share() {
        let sys = SystemSpec::aircraft();
        for n in [1, 7, 10, 1001] {
            let cfg = TrainConfig {
                batch_size: n,
                ..TrainConfig::new(Variant::Vanilla)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let b = sample_batch(&sys, (0.0, 1.0), &cfg, &mut rng);
            let pinned = b.iter().filter(|s| s.kind == SampleKind::Terminal).count();
            assert_eq!(pinned, (0.2 * n as f64).ceil() as usize);
            assert!(b.iter().filter(|s| s.kind == SampleKind::Terminal).all(|s| s.t == 1.0));
        }
    }

    #[test]
    fn hybrid_batches_include_guard_samples() {
        let sys = SystemSpec::rimless_wheel();
        let cfg = TrainConfig {
            batch_size: 100,
            ..TrainConfig::new(Variant::Exact)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&sys, (0.0, 6.3), &cfg, &mut rng);
        let guards: Vec<_> = b.iter().filter(|s| s.kind == SampleKind::Guard).collect();
        assert_eq!(guards.len(), 10);
        let th = sys.switching_surface().unwrap().threshold;
        assert!(guards.iter().all(|s| s.x[0] == th && s.x[1] > 0.0 && s.x[1] <= 0.6));
        let smooth = SystemSpec::bicycle();
        let b = sample_batch(&smooth, (0.0, 1.0), &cfg, &mut rng);
        assert!(b.iter().all(|s| s.kind == SampleKind::Interior));
    }

    #[test]
    fn residual_examples() {
        assert_eq!(vi_residual(0.5, -0.3), 0.3);

        // Run-away integrator: V = l solves the inequality away from the kink.
        let sys = SystemSpec::integrator(crate::Mode::Avoid, 0.25, 1.0, 1.0);
        let zero = NetParams::zeros(&[2, 4, 1], 3.0).unwrap();
        for x in [-0.9, -0.3, 0.1, 0.6] {
            let r = pde_residual(Variant::Diff, &zero, &sys, &[x], 0.4).unwrap();
            assert_eq!(r, 0.0);
        }

        // Exact at the horizon: the second branch is zero.
        let sys = SystemSpec::bicycle();
        let p = NetParams::init(4, &[6, 16, 16, 1], 30.0).unwrap();
        let x = [0.3, -1.0, 2.5, 0.2, 0.1];
        let e = crate::value::value(Variant::Exact, &p, &sys, &x, 1.0).unwrap();
        let h = sys.hamiltonian(&x, &e.grad_x).unwrap();
        let r = pde_residual(Variant::Exact, &p, &sys, &x, 1.0).unwrap();
        assert_eq!(r, (-e.net_out + h).min(0.0).abs());
    }

    #[test]
    fn bc_residual_examples() {
        let sys = SystemSpec::bicycle();
        let zero = NetParams::zeros(&[6, 4, 1], 30.0).unwrap();
        let x = [0.3, -1.0, 2.5, 0.2, 0.1];
        assert_eq!(bc_residual(&zero, &sys, &x).unwrap(), sys.target_fn(&x).abs());
        // Output bias equal to l(x) at a zero-weight network.
        let mut p = zero.clone();
        p.biases[1][0] = sys.target_fn(&x);
        assert_eq!(bc_residual(&p, &sys, &x).unwrap(), 0.0);
    }

    /// Independent evaluation of the batch loss through the per-sample
    /// residual functions.
    fn reference_loss(p: &NetParams, sys: &SystemSpec, cfg: &TrainConfig, b: &[Sample], lambda: f64) -> f64 {
        let n = b.len() as f64;
        let mut total = 0.0;
        for s in b {
            let r = match s.kind {
                SampleKind::Guard => {
                    guard_residual(cfg.variant, p, sys, &s.x, s.t, cfg.vanilla_scale).unwrap()
                }
                _ => pde_residual_scaled(cfg.variant, p, sys, &s.x, s.t, cfg.vanilla_scale).unwrap(),
            };
            total += r;
            if s.kind == SampleKind::Terminal {
                total += lambda * bc_residual_scaled(p, sys, &s.x, cfg.vanilla_scale).unwrap();
            }
        }
        total / n
    }

    fn check_loss_gradient(sys: &SystemSpec, variant: Variant, seed: u64, interval: (f64, f64)) {
        let cfg = TrainConfig {
            vanilla_scale: if variant == Variant::Vanilla { 1.7 } else { 1.0 },
            terminal_fraction: 0.5,
            guard_fraction: 0.25,
            ..tiny_cfg(variant)
        };
        let p = NetParams::init(seed, &cfg.layer_sizes(sys), cfg.omega0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let batch = sample_batch(sys, interval, &cfg, &mut rng);
        let lambda = 0.7;
        let loss = batch_loss(&p, sys, &cfg, &batch, lambda, false);
        let reference = reference_loss(&p, sys, &cfg, &batch, lambda);
        assert!(
            (loss.pde_loss + lambda * loss.bc_loss - reference).abs() < 1e-12,
            "{} {variant} {interval:?}: {} vs {reference}",
            sys.name,
            loss.pde_loss + lambda * loss.bc_loss
        );
        let analytic: Vec<f64> = loss.grad.values().collect();
        let flat = p.to_flat();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += h;
            minus[i] -= h;
            let pp = NetParams::from_flat(&p.layer_sizes, p.omega0, &plus).unwrap();
            let pm = NetParams::from_flat(&p.layer_sizes, p.omega0, &minus).unwrap();
            let fp = reference_loss(&pp, sys, &cfg, &batch, lambda);
            let fm = reference_loss(&pm, sys, &cfg, &batch, lambda);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-3 * scale).max(1e-8);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{} {variant}: worst relative error {worst}", sys.name);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let systems = [SystemSpec::bicycle(), SystemSpec::rimless_wheel(), SystemSpec::aircraft()];
        for (k, sys) in systems.iter().enumerate() {
            for variant in [Variant::Vanilla, Variant::Diff, Variant::Exact] {
                let mid = (0.3 * sys.horizon, 0.9 * sys.horizon);
                check_loss_gradient(sys, variant, 10 + k as u64, mid);
                let end = (sys.horizon, sys.horizon);
                check_loss_gradient(sys, variant, 20 + k as u64, end);
            }
        }
    }

    #[test]
    fn f32_losses_track_f64() {
        let sys = SystemSpec::rimless_wheel();
        let cfg = TrainConfig {
            hidden_width: 32,
            batch_size: 256,
            chunk_size: 100,
            ..TrainConfig::new(Variant::Exact)
        };
        let p = cfg.init_params(&sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_batch(&sys, (1.0, 6.3), &cfg, &mut rng);
        let a = batch_loss(&p, &sys, &cfg, &batch, 1.0, false);
        let f32cfg = TrainConfig {
            precision: Precision::F32,
            ..cfg
        };
        let b = batch_loss(&p, &sys, &f32cfg, &batch, 1.0, false);
        assert!((a.pde_loss - b.pde_loss).abs() < 1e-4 * a.pde_loss.max(1.0));
    }

    #[test]
    fn single_loss_variants_skip_boundary_term() {
        let sys = SystemSpec::bicycle();
        for variant in [Variant::Diff, Variant::Exact] {
            let cfg = TrainConfig {
                batch_size: 64,
                iters: 20,
                ..tiny_cfg(variant)
            };
            let mut p = cfg.init_params(&sys).unwrap();
            let stats = run_train(&mut p, &sys, &cfg, 0, None).unwrap();
            assert!(stats.iter().all(|s| s.bc_loss == 0.0 && s.bc_evaluations == 0));
        }
        let cfg = TrainConfig {
            batch_size: 64,
            iters: 3,
            ..tiny_cfg(Variant::Vanilla)
        };
        let mut p = cfg.init_params(&sys).unwrap();
        let stats = run_train(&mut p, &sys, &cfg, 0, None).unwrap();
        assert!(stats.iter().all(|s| s.bc_evaluations == 13 && s.bc_loss > 0.0));
    }

    #[test]
    fn adaptive_lambda_examples() {
        let p = NetParams::init(0, &[3, 4, 1], 30.0).unwrap();
        let mut g = ParamGrad::zeros_like(&p);
        g.weights.iter_mut().for_each(|w| w.fill(0.25));
        g.biases.iter_mut().for_each(|b| b.fill(-0.25));
        assert_eq!(adaptive_lambda_update(1.0, &g, &g), 1.0);
        let zero = ParamGrad::zeros_like(&p);
        assert_eq!(adaptive_lambda_update(3.0, &g, &zero), 3.0);
        let mut big = g.clone();
        big.weights[0][[0, 0]] = 1e9;
        assert_eq!(adaptive_lambda_update(1.0, &big, &g), 1e4);
        assert_eq!(adaptive_lambda_update(1e-2, &zero, &g), 1e-2);
    }

    #[test]
    fn adaptive_lambda_changes_during_vanilla_training() {
        let sys = SystemSpec::bicycle();
        let cfg = TrainConfig {
            batch_size: 32,
            iters: 12,
            adaptive_lambda: true,
            ..tiny_cfg(Variant::Vanilla)
        };
        let mut p = cfg.init_params(&sys).unwrap();
        let stats = run_train(&mut p, &sys, &cfg, 0, None).unwrap();
        assert_ne!(stats[0].lambda, 1.0);
        assert_eq!(stats[1].lambda, stats[0].lambda);
        assert_ne!(stats[10].lambda, stats[9].lambda);
    }

    #[test]
    fn zero_network_pretrain_is_a_fixed_point() {
        let sys = SystemSpec::bicycle();
        let cfg = tiny_cfg(Variant::Exact);
        let mut p = NetParams::zeros(&cfg.layer_sizes(&sys), cfg.omega0).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = pretrain_step(&mut p, &sys, &cfg, &mut rng, &mut adam).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn pretraining_drives_output_to_zero() {
        let sys = SystemSpec::rimless_wheel();
        let cfg = TrainConfig {
            hidden_width: 32,
            batch_size: 512,
            pretrain_iters: 200,
            lr: 1e-3,
            ..TrainConfig::new(Variant::Exact)
        };
        let mut p = cfg.init_params(&sys).unwrap();
        let trace = run_pretrain(&mut p, &sys, &cfg, None).unwrap();
        assert!(trace[199] < 0.1 * trace[0], "{} -> {}", trace[0], trace[199]);
        let mut q = cfg.init_params(&sys).unwrap();
        assert_eq!(trace, run_pretrain(&mut q, &sys, &cfg, None).unwrap());
        assert_eq!(p, q);
    }

    #[test]
    fn training_log_lines_are_json() {
        let sys = SystemSpec::bicycle();
        let cfg = TrainConfig {
            batch_size: 16,
            iters: 5,
            log_every: 2,
            ..tiny_cfg(Variant::Exact)
        };
        let mut p = cfg.init_params(&sys).unwrap();
        let mut buf = Vec::new();
        run_train(&mut p, &sys, &cfg, 0, Some(&mut buf)).unwrap();
        let lines: Vec<LogRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let iters: Vec<usize> = lines.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![0, 2, 4]);
        assert!(lines.iter().all(|r| r.phase == "train"));
    }

    #[test]
    fn non_finite_parameters_abort_training() {
        let sys = SystemSpec::bicycle();
        let cfg = TrainConfig {
            batch_size: 8,
            iters: 2,
            ..tiny_cfg(Variant::Exact)
        };
        let mut p = cfg.init_params(&sys).unwrap();
        p.biases[2][0] = f64::NAN;
        let err = run_train(&mut p, &sys, &cfg, 0, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iter: 0, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(Variant::Exact).validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 0, ..TrainConfig::new(Variant::Exact) },
            TrainConfig { lr: 0.0, ..TrainConfig::new(Variant::Exact) },
            TrainConfig { curriculum_fraction: 0.0, ..TrainConfig::new(Variant::Exact) },
            TrainConfig { curriculum_fraction: 1.5, ..TrainConfig::new(Variant::Exact) },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
