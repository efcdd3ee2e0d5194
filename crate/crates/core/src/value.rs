//! Value-function parameterizations built from the network and `l`.
//!
//! * `Vanilla`: `V = O`
//! * `Diff`:    `V = l(x) + O`
//! * `Exact`:   `V = l(x) + (T − t) O`, so `V(x, T) = l(x)` for any weights.
//!
//! The network sees `z = (t / T, normalize(x))`; derivatives are mapped back to
//! state units and seconds here.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Layers, NetParams};
use crate::systems::{Mode, SystemSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Diff,
    Exact,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Vanilla => 0,
            Variant::Diff => 1,
            Variant::Exact => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Vanilla),
            1 => Some(Variant::Diff),
            2 => Some(Variant::Exact),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Diff => "diff",
            Variant::Exact => "exact",
        }
    }

    /// Whether `l(x)` is added to the network term.
    pub fn uses_target(self) -> bool {
        !matches!(self, Variant::Vanilla)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "diff" => Ok(Variant::Diff),
            "exact" => Ok(Variant::Exact),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

/// `V`, `∇ₓV` and `DₜV` at one `(x, t)`, plus the raw network terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueEval {
    pub v: f64,
    pub grad_x: Vec<f64>,
    pub dt: f64,
    pub net_out: f64,
    /// `∂O/∂t` in seconds.
    pub net_dt: f64,
}

/// Network input for a (canonical) state and time.
pub fn encode_input(sys: &SystemSpec, x: &[f64], t: f64) -> Vec<f64> {
    let mut z = Vec::with_capacity(x.len() + 1);
    z.push(t / sys.horizon);
    z.extend(sys.normalize(x));
    z
}

/// Coefficient multiplying the network output in `V`.
pub fn net_weight(variant: Variant, sys: &SystemSpec, t: f64, vanilla_scale: f64) -> f64 {
    match variant {
        Variant::Vanilla => vanilla_scale,
        Variant::Diff => 1.0,
        Variant::Exact => sys.horizon - t,
    }
}

/// Assembles a [`ValueEval`] from the network output `o` and its input
/// gradient `g` (over normalized `(t, x)`) at a canonical state.
pub fn compose(
    variant: Variant,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
    o: f64,
    g: &[f64],
    vanilla_scale: f64,
) -> ValueEval {
    let n = x.len();
    let scale = sys.normalization_scale();
    let net_dt = g[0] / sys.horizon;
    let weight = net_weight(variant, sys, t, vanilla_scale);
    let mut grad_x: Vec<f64> = (0..n).map(|i| weight * g[i + 1] * scale[i]).collect();
    let (v, dt) = match variant {
        Variant::Vanilla => (weight * o, weight * net_dt),
        Variant::Diff => (sys.target_fn(x) + o, net_dt),
        Variant::Exact => (sys.target_fn(x) + weight * o, -o + weight * net_dt),
    };
    if variant.uses_target() {
        let gl = sys.target_grad(x);
        grad_x.iter_mut().zip(gl).for_each(|(a, b)| *a += b);
    }
    ValueEval {
        v,
        grad_x,
        dt,
        net_out: o,
        net_dt,
    }
}

fn check_time(sys: &SystemSpec, t: f64) -> Result<()> {
    if !(0.0..=sys.horizon).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            horizon: sys.horizon,
        });
    }
    Ok(())
}

/// Evaluates the value model at `(x, t)`. The state is canonicalized first
/// and `grad_x` is chained back through the canonicalization.
pub fn value(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
) -> Result<ValueEval> {
    value_scaled(variant, params, sys, x, t, 1.0)
}

pub fn value_scaled(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
    vanilla_scale: f64,
) -> Result<ValueEval> {
    check_time(sys, t)?;
    if x.len() != sys.state_dim() {
        return Err(Error::dim("state", sys.state_dim(), x.len()));
    }
    let (xc, jac) = sys.canonicalize_with_jacobian(x);
    let e = params.forward_with_grad(&encode_input(sys, &xc, t))?;
    let mut eval = compose(variant, sys, &xc, t, e.output, &e.input_grad, vanilla_scale);
    eval.grad_x.iter_mut().zip(jac).for_each(|(g, j)| *g *= j);
    Ok(eval)
}

/// Value only; skips the input-gradient pass.
pub fn value_only(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
    vanilla_scale: f64,
) -> Result<f64> {
    check_time(sys, t)?;
    let xc = sys.canonicalize(x);
    let o = params.forward(&encode_input(sys, &xc, t))?;
    let weight = net_weight(variant, sys, t, vanilla_scale);
    Ok(if variant.uses_target() {
        sys.target_fn(&xc) + weight * o
    } else {
        weight * o
    })
}

/// `V(x, t)` for many states at once (double precision, batched).
pub fn value_batch(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    xs: &[Vec<f64>],
    t: f64,
    vanilla_scale: f64,
) -> Result<Vec<f64>> {
    check_time(sys, t)?;
    let n = sys.state_dim();
    if let Some(bad) = xs.iter().find(|x| x.len() != n) {
        return Err(Error::dim("state", n, bad.len()));
    }
    if params.input_dim() != n + 1 {
        return Err(Error::dim("network input", n + 1, params.input_dim()));
    }
    let layers = Layers::<f64>::from_params(params);
    let weight = net_weight(variant, sys, t, vanilla_scale);
    let chunks: Vec<Vec<f64>> = xs
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let canon: Vec<Vec<f64>> = chunk.iter().map(|x| sys.canonicalize(x)).collect();
            let mut z = Array2::<f64>::zeros((n + 1, chunk.len()));
            for (b, x) in canon.iter().enumerate() {
                for (k, v) in encode_input(sys, x, t).into_iter().enumerate() {
                    z[[k, b]] = v;
                }
            }
            let out = layers.forward_output(z.view()).output;
            canon
                .iter()
                .zip(out.iter())
                .map(|(x, o)| {
                    if variant.uses_target() {
                        sys.target_fn(x) + weight * o
                    } else {
                        weight * o
                    }
                })
                .collect()
        })
        .collect();
    Ok(chunks.concat())
}

const BATCH_CHUNK: usize = 2048;

/// The greedy policy `argmax_u ⟨∇ₓV, f(x, u)⟩` (argmin for reach).
pub fn policy(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let eval = value(variant, params, sys, x, t)?;
    sys.optimal_control(x, &eval.grad_x)
}

/// Safe-set test against the `delta`-corrected level set. Avoid: safe iff
/// `V > delta`. Reach: "safe" (inside the tube) iff `V < −delta`.
pub fn is_safe(mode: Mode, v: f64, delta: f64) -> bool {
    match mode {
        Mode::Avoid => v > delta,
        Mode::Reach => v < -delta,
    }
}

pub fn brt_membership(
    variant: Variant,
    params: &NetParams,
    sys: &SystemSpec,
    x: &[f64],
    t: f64,
    delta: f64,
) -> Result<bool> {
    let v = value_only(variant, params, sys, x, t, 1.0)?;
    Ok(is_safe(sys.mode, v, delta))
}

/// A value function the verification and rollout code can query.
pub trait ValueFunction: Sync {
    fn system(&self) -> &SystemSpec;
    fn value_at(&self, x: &[f64], t: f64) -> Result<f64>;
    fn control(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// `V(x, t)` for many states; implementations may batch.
    fn values_at(&self, xs: &[Vec<f64>], t: f64) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.value_at(x, t)).collect()
    }
}

/// A trained network paired with its system and variant.
#[derive(Debug, Clone)]
pub struct LearnedValue {
    pub variant: Variant,
    pub params: NetParams,
    pub sys: SystemSpec,
    pub vanilla_scale: f64,
}

impl LearnedValue {
    pub fn new(variant: Variant, params: NetParams, sys: SystemSpec) -> Self {
        Self {
            variant,
            params,
            sys,
            vanilla_scale: 1.0,
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<ValueEval> {
        value_scaled(self.variant, &self.params, &self.sys, x, t, self.vanilla_scale)
    }
}

impl ValueFunction for LearnedValue {
    fn system(&self) -> &SystemSpec {
        &self.sys
    }

    fn value_at(&self, x: &[f64], t: f64) -> Result<f64> {
        value_only(self.variant, &self.params, &self.sys, x, t, self.vanilla_scale)
    }

    fn control(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if self.sys.control_dim() == 0 {
            return Ok(Vec::new());
        }
        let eval = self.eval(x, t)?;
        self.sys.optimal_control(x, &eval.grad_x)
    }

    fn values_at(&self, xs: &[Vec<f64>], t: f64) -> Result<Vec<f64>> {
        value_batch(self.variant, &self.params, &self.sys, xs, t, self.vanilla_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(sys: &SystemSpec, rng: &mut impl Rng) -> Vec<f64> {
        sys.domain_lo
            .iter()
            .zip(&sys.domain_hi)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect()
    }

    fn net_for(sys: &SystemSpec, seed: u64) -> NetParams {
        NetParams::init(seed, &[sys.state_dim() + 1, 32, 32, 1], 30.0).unwrap()
    }

    #[test]
    fn exact_matches_target_at_horizon() {
        let sys = SystemSpec::bicycle();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..3 {
            let p = net_for(&sys, seed);
            for _ in 0..200 {
                let x = random_state(&sys, &mut rng);
                let e = value(Variant::Exact, &p, &sys, &x, sys.horizon).unwrap();
                assert_eq!(e.v, sys.target_fn(&sys.canonicalize(&x)));
                assert_eq!(e.dt, -e.net_out);
                // ∇ₓV = ∇l when the (T − t) factor vanishes.
                assert_eq!(e.grad_x, sys.target_grad(&x));
            }
        }
    }

    #[test]
    fn zero_network_diff_equals_target() {
        let sys = SystemSpec::aircraft();
        let p = NetParams::zeros(&[10, 8, 8, 1], 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = random_state(&sys, &mut rng);
            let t = rng.random_range(0.0..=sys.horizon);
            let d = value(Variant::Diff, &p, &sys, &x, t).unwrap();
            assert_eq!(d.v, sys.target_fn(&x));
            assert_eq!(d.grad_x, sys.target_grad(&x));
            assert_eq!(d.dt, 0.0);
            let e = value(Variant::Exact, &p, &sys, &x, t).unwrap();
            assert_eq!(d, e);
        }
    }

    #[test]
    fn rimless_wheel_value_uses_reset_state() {
        let sys = SystemSpec::rimless_wheel();
        let p = net_for(&sys, 4);
        let past = value(Variant::Exact, &p, &sys, &[0.7, 0.3], 2.0).unwrap();
        let reset = value(Variant::Exact, &p, &sys, &[2.0 * 0.2 - 0.7, 0.8f64.cos() * 0.3], 2.0)
            .unwrap();
        assert_eq!(past.v, reset.v);
        assert_relative_eq!(reset.grad_x[0], -past.grad_x[0], epsilon = 1e-12);
    }

    #[test]
    fn time_outside_horizon_is_rejected() {
        let sys = SystemSpec::rimless_wheel();
        let p = net_for(&sys, 0);
        assert!(matches!(
            value(Variant::Exact, &p, &sys, &[0.0, 0.0], 7.0),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(value(Variant::Exact, &p, &sys, &[0.0, 0.0], -0.1).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for sys in [SystemSpec::rimless_wheel(), SystemSpec::bicycle(), SystemSpec::rocket()] {
            let p = NetParams::init(7, &[sys.state_dim() + 1, 24, 24, 1], 10.0).unwrap();
            for variant in [Variant::Vanilla, Variant::Diff, Variant::Exact] {
                let mut checked = 0;
                while checked < 10 {
                    let x = random_state(&sys, &mut rng);
                    let t = rng.random_range(0.1..sys.horizon - 0.1);
                    let e = value(variant, &p, &sys, &x, t).unwrap();
                    let f = |x: &[f64], t: f64| value(variant, &p, &sys, x, t).unwrap().v;
                    let ht = 1e-6 * sys.horizon;
                    let fd_t = (f(&x, t + ht) - f(&x, t - ht)) / (2.0 * ht);
                    let mut fd = Vec::new();
                    let mut smooth = true;
                    for i in 0..x.len() {
                        let h = 1e-6 * (sys.domain_hi[i] - sys.domain_lo[i]);
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[i] += h;
                        xm[i] -= h;
                        let (vp, v0, vm) = (f(&xp, t), f(&x, t), f(&xm, t));
                        if ((vp - v0) - (v0 - vm)).abs() > 1e-3 * (vp - vm).abs().max(1e-9) {
                            smooth = false;
                        }
                        fd.push((vp - vm) / (2.0 * h));
                    }
                    if !smooth {
                        continue;
                    }
                    let scale = e.grad_x.iter().fold(e.dt.abs(), |m, g| m.max(g.abs()));
                    assert!((fd_t - e.dt).abs() <= 1e-5 * scale.max(1e-3), "{variant} dt");
                    for i in 0..x.len() {
                        assert!(
                            (fd[i] - e.grad_x[i]).abs() <= 1e-5 * scale.max(1e-3),
                            "{} {variant} dim {i}: {} vs {}",
                            sys.name,
                            fd[i],
                            e.grad_x[i]
                        );
                    }
                    checked += 1;
                }
            }
        }
    }

    #[test]
    fn policy_examples() {
        let rw = SystemSpec::rimless_wheel();
        let p = net_for(&rw, 1);
        assert!(policy(Variant::Exact, &p, &rw, &[0.1, 0.1], 1.0).unwrap().is_empty());

        // Zero network: the policy is bang-bang on the coefficients of ∇l.
        let bike = SystemSpec::bicycle();
        let zero = NetParams::zeros(&[6, 8, 1], 30.0).unwrap();
        let x = [-0.5, 1.9, 2.0, 0.4, 0.1];
        let u = policy(Variant::Diff, &zero, &bike, &x, 0.5).unwrap();
        let expected = bike.optimal_control(&x, &bike.target_grad(&x)).unwrap();
        assert_eq!(u, expected);

        // Exact at t = T steers on ∇l alone, whatever the network.
        let p = net_for(&bike, 3);
        let u = policy(Variant::Exact, &p, &bike, &x, bike.horizon).unwrap();
        assert_eq!(u, expected);
    }

    #[test]
    fn membership_examples() {
        assert!(!is_safe(Mode::Avoid, 0.0, 0.0));
        assert!(!is_safe(Mode::Avoid, 0.05, 0.1));
        assert!(is_safe(Mode::Avoid, 0.15, 0.1));
        assert!(is_safe(Mode::Reach, -0.2, 0.0));
        assert!(!is_safe(Mode::Reach, 0.0, 0.0));
    }

    #[test]
    fn variant_round_trip() {
        for v in [Variant::Vanilla, Variant::Diff, Variant::Exact] {
            assert_eq!(Variant::from_tag(v.tag()), Some(v));
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("deepreach".parse::<Variant>().is_err());
    }

    #[test]
    fn batched_values_match_single_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sys = SystemSpec::rimless_wheel();
        let p = net_for(&sys, 5);
        let mut xs: Vec<Vec<f64>> = (0..3000).map(|_| random_state(&sys, &mut rng)).collect();
        xs.push(vec![0.6, 0.3]);
        for variant in [Variant::Vanilla, Variant::Diff, Variant::Exact] {
            let batch = value_batch(variant, &p, &sys, &xs, 2.5, 1.0).unwrap();
            for (x, v) in xs.iter().zip(&batch) {
                let single = value(variant, &p, &sys, x, 2.5).unwrap().v;
                assert!((single - v).abs() < 1e-12);
            }
        }
        assert!(value_batch(Variant::Exact, &p, &sys, &[vec![0.0]], 1.0, 1.0).is_err());
    }
}
