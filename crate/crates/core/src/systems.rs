//! Benchmark dynamical systems.
//!
//! Every system is control-affine, `ẋ = f₀(x) + Σⱼ gⱼ(x) uⱼ`, with a box of
//! admissible controls. That structure makes the extremal control of the
//! Hamiltonian a per-channel bang-bang choice on the sign of `⟨∇V, gⱼ(x)⟩`.
//!
//! The target function `l` follows the usual convention: its sub-zero level set
//! is the target (reach) or failure (avoid) set.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Whether the tube is computed against a failure set (avoid) or a goal (reach).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Avoid,
    Reach,
}

impl Mode {
    /// +1 when the control maximizes the Hamiltonian, -1 when it minimizes.
    pub fn sign(self) -> f64 {
        match self {
            Mode::Avoid => 1.0,
            Mode::Reach => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl Obstacle {
    pub const fn new(x: f64, y: f64, radius: f64) -> Self {
        Self { x, y, radius }
    }
}

/// Five circles in the `[-4, 4]²` workspace. Obstacles 1 and 2 leave a gap of
/// about 0.82 m, obstacles 4 and 5 one of 0.5 m.
pub const DEFAULT_OBSTACLES: [Obstacle; 5] = [
    Obstacle::new(-2.2, 2.0, 1.0),
    Obstacle::new(0.4, 2.3, 0.8),
    Obstacle::new(2.5, -0.5, 1.5),
    Obstacle::new(-1.8, -2.4, 0.6),
    Obstacle::new(-0.2, -1.2, 0.9),
];

/// Per-system constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// `θ̈ = sin θ` between impacts, reset `(θ, θ̇) ↦ (2γ − θ, cos(2α) θ̇)` at `θ = α + γ`.
    RimlessWheel {
        gamma: f64,
        alpha: f64,
        energy: f64,
        band: f64,
    },
    /// State `(p_x, p_y, v, θ, ψ)`, controls `(a, ω)`.
    Bicycle {
        wheelbase: f64,
        obstacles: Vec<Obstacle>,
    },
    /// State `(x, y, θ, v_x, v_y, ω)`, controls `(τ₁, τ₂)`.
    Rocket { gravity: f64, k: f64, pad_half_width: f64 },
    /// Three Dubins aircraft, state `(x_i, y_i, θ_i)` for `i = 1..3`, one turn rate each.
    Aircraft { speed: f64, radius: f64 },
    /// `ẋ = u`, `l = |x| − r`. With a zero control bound it has no dynamics at all.
    Integrator { radius: f64 },
}

/// A reachability problem: dynamics, control box, sampling domain, mode, horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub name: String,
    pub dynamics: Dynamics,
    pub mode: Mode,
    pub horizon: f64,
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
}

/// The rimless wheel's switching surface `x[dim] = threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchingSurface {
    pub dim: usize,
    pub threshold: f64,
}

impl SystemSpec {
    pub fn rimless_wheel() -> Self {
        Self {
            name: "rimless_wheel".into(),
            dynamics: Dynamics::RimlessWheel {
                gamma: 0.2,
                alpha: 0.4,
                energy: 1.132,
                band: 0.05,
            },
            mode: Mode::Reach,
            horizon: 6.3,
            domain_lo: vec![-0.2, -1.3],
            domain_hi: vec![0.6, 0.6],
            control_lo: vec![],
            control_hi: vec![],
        }
    }

    pub fn bicycle() -> Self {
        Self {
            name: "bicycle".into(),
            dynamics: Dynamics::Bicycle {
                wheelbase: 1.0,
                obstacles: DEFAULT_OBSTACLES.to_vec(),
            },
            mode: Mode::Avoid,
            horizon: 1.0,
            domain_lo: vec![-4.0, -4.0, 1.0, -PI, -PI / 3.0],
            domain_hi: vec![4.0, 4.0, 5.0, PI, PI / 3.0],
            control_lo: vec![-2.0, -2.0],
            control_hi: vec![2.0, 2.0],
        }
    }

    pub fn rocket() -> Self {
        Self {
            name: "rocket".into(),
            dynamics: Dynamics::Rocket {
                gravity: 9.8,
                k: 1.0,
                pad_half_width: 20.0,
            },
            mode: Mode::Reach,
            horizon: 1.0,
            domain_lo: vec![-150.0, 0.0, -PI, -50.0, -50.0, -2.0],
            domain_hi: vec![150.0, 150.0, PI, 50.0, 50.0, 2.0],
            control_lo: vec![0.0, 0.0],
            control_hi: vec![25.0, 25.0],
        }
    }

    pub fn aircraft() -> Self {
        let mut lo = Vec::with_capacity(9);
        let mut hi = Vec::with_capacity(9);
        for _ in 0..3 {
            lo.extend([-1.0, -1.0, -PI]);
            hi.extend([1.0, 1.0, PI]);
        }
        Self {
            name: "aircraft".into(),
            dynamics: Dynamics::Aircraft {
                speed: 0.6,
                radius: 0.25,
            },
            mode: Mode::Avoid,
            horizon: 1.0,
            domain_lo: lo,
            domain_hi: hi,
            control_lo: vec![-1.1; 3],
            control_hi: vec![1.1; 3],
        }
    }

    /// One-dimensional `ẋ = u, |u| ≤ u_max` on `[-1, 1]` with `l = |x| − radius`.
    pub fn integrator(mode: Mode, radius: f64, u_max: f64, horizon: f64) -> Self {
        Self {
            name: "integrator".into(),
            dynamics: Dynamics::Integrator { radius },
            mode,
            horizon,
            domain_lo: vec![-1.0],
            domain_hi: vec![1.0],
            control_lo: vec![-u_max],
            control_hi: vec![u_max],
        }
    }

    /// Default preset by name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "rimless_wheel" => Ok(Self::rimless_wheel()),
            "bicycle" => Ok(Self::bicycle()),
            "rocket" => Ok(Self::rocket()),
            "aircraft" => Ok(Self::aircraft()),
            "integrator" => Ok(Self::integrator(Mode::Reach, 0.25, 1.0, 0.5)),
            other => Err(Error::config(format!("unknown system `{other}`"))),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::RimlessWheel { .. } => 2,
            Dynamics::Bicycle { .. } => 5,
            Dynamics::Rocket { .. } => 6,
            Dynamics::Aircraft { .. } => 9,
            Dynamics::Integrator { .. } => 1,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::RimlessWheel { .. } => 0,
            Dynamics::Bicycle { .. } | Dynamics::Rocket { .. } => 2,
            Dynamics::Aircraft { .. } => 3,
            Dynamics::Integrator { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.control_dim();
        if self.domain_lo.len() != n || self.domain_hi.len() != n {
            return Err(Error::dim("domain bounds", n, self.domain_lo.len()));
        }
        if self.control_lo.len() != m || self.control_hi.len() != m {
            return Err(Error::dim("control bounds", m, self.control_lo.len()));
        }
        if self
            .domain_lo
            .iter()
            .zip(&self.domain_hi)
            .any(|(lo, hi)| !(lo < hi))
        {
            return Err(Error::config("domain_lo must be below domain_hi"));
        }
        if self
            .control_lo
            .iter()
            .zip(&self.control_hi)
            .any(|(lo, hi)| !(lo <= hi))
        {
            return Err(Error::config("control_lo must not exceed control_hi"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::config("horizon must be positive"));
        }
        if let Dynamics::Bicycle { obstacles, .. } = &self.dynamics {
            if obstacles.is_empty() {
                return Err(Error::config("bicycle needs at least one obstacle"));
            }
        }
        Ok(())
    }

    /// Named scalar constants, as they appear in run configs.
    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut p = BTreeMap::new();
        match &self.dynamics {
            Dynamics::RimlessWheel {
                gamma,
                alpha,
                energy,
                band,
            } => {
                p.insert("gamma".into(), *gamma);
                p.insert("alpha".into(), *alpha);
                p.insert("energy".into(), *energy);
                p.insert("band".into(), *band);
            }
            Dynamics::Bicycle { wheelbase, .. } => {
                p.insert("wheelbase".into(), *wheelbase);
                p.insert("accel_max".into(), self.control_hi[0]);
                p.insert("steer_rate_max".into(), self.control_hi[1]);
            }
            Dynamics::Rocket {
                gravity,
                k,
                pad_half_width,
            } => {
                p.insert("gravity".into(), *gravity);
                p.insert("k".into(), *k);
                p.insert("pad_half_width".into(), *pad_half_width);
                p.insert("tau_min".into(), self.control_lo[0]);
                p.insert("tau_max".into(), self.control_hi[0]);
            }
            Dynamics::Aircraft { speed, radius } => {
                p.insert("speed".into(), *speed);
                p.insert("radius".into(), *radius);
                p.insert("turn_rate_max".into(), self.control_hi[0]);
            }
            Dynamics::Integrator { radius } => {
                p.insert("radius".into(), *radius);
                p.insert("u_max".into(), self.control_hi[0]);
            }
        }
        p
    }

    /// Override named constants. Unknown names are rejected.
    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::config(format!("parameter `{key}` must be finite")));
        }
        let unknown = || Error::config(format!("unknown parameter `{key}` for {}", self.name));
        match &mut self.dynamics {
            Dynamics::RimlessWheel {
                gamma,
                alpha,
                energy,
                band,
            } => match key {
                "gamma" => *gamma = value,
                "alpha" => *alpha = value,
                "energy" => *energy = value,
                "band" => *band = value,
                _ => return Err(unknown()),
            },
            Dynamics::Bicycle { wheelbase, .. } => match key {
                "wheelbase" => *wheelbase = value,
                "accel_max" => {
                    self.control_lo[0] = -value;
                    self.control_hi[0] = value;
                }
                "steer_rate_max" => {
                    self.control_lo[1] = -value;
                    self.control_hi[1] = value;
                }
                _ => return Err(unknown()),
            },
            Dynamics::Rocket {
                gravity,
                k,
                pad_half_width,
            } => match key {
                "gravity" => *gravity = value,
                "k" => *k = value,
                "pad_half_width" => *pad_half_width = value,
                "tau_min" => self.control_lo.iter_mut().for_each(|c| *c = value),
                "tau_max" => self.control_hi.iter_mut().for_each(|c| *c = value),
                _ => return Err(unknown()),
            },
            Dynamics::Aircraft { speed, radius } => match key {
                "speed" => *speed = value,
                "radius" => *radius = value,
                "turn_rate_max" => {
                    self.control_lo.iter_mut().for_each(|c| *c = -value);
                    self.control_hi.iter_mut().for_each(|c| *c = value);
                }
                _ => return Err(unknown()),
            },
            Dynamics::Integrator { radius } => match key {
                "radius" => *radius = value,
                "u_max" => {
                    self.control_lo[0] = -value;
                    self.control_hi[0] = value;
                }
                _ => return Err(unknown()),
            },
        }
        Ok(())
    }

    /// Stable 64-bit digest of everything that defines the problem.
    pub fn params_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([self.mode as u8]);
        h.update(self.horizon.to_le_bytes());
        for (k, v) in self.params() {
            h.update(k.as_bytes());
            h.update(v.to_le_bytes());
        }
        if let Dynamics::Bicycle { obstacles, .. } = &self.dynamics {
            for o in obstacles {
                h.update(o.x.to_le_bytes());
                h.update(o.y.to_le_bytes());
                h.update(o.radius.to_le_bytes());
            }
        }
        for v in self
            .domain_lo
            .iter()
            .chain(&self.domain_hi)
            .chain(&self.control_lo)
            .chain(&self.control_hi)
        {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::dim("state", self.state_dim(), x.len()));
        }
        Ok(())
    }

    fn check_control(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.control_dim() {
            return Err(Error::dim("control", self.control_dim(), u.len()));
        }
        Ok(())
    }

    /// `ẋ = f(x, u)`.
    pub fn dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_control(u)?;
        let mut out = vec![0.0; x.len()];
        self.dynamics_into(x, u, &mut out);
        Ok(out)
    }

    /// Unchecked version of [`Self::dynamics`] for hot loops.
    pub fn dynamics_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.drift_into(x, out);
        match &self.dynamics {
            Dynamics::RimlessWheel { .. } => {}
            Dynamics::Bicycle { .. } => {
                out[2] += u[0];
                out[4] += u[1];
            }
            Dynamics::Rocket { k, .. } => {
                let (s, c) = x[2].sin_cos();
                out[3] += u[0] * c - u[1] * s;
                out[4] += u[0] * s + u[1] * c;
                out[5] += k * u[0];
            }
            Dynamics::Aircraft { .. } => {
                for i in 0..3 {
                    out[3 * i + 2] += u[i];
                }
            }
            Dynamics::Integrator { .. } => out[0] += u[0],
        }
    }

    /// Uncontrolled part `f₀(x)`.
    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::RimlessWheel { .. } => {
                out[0] = x[1];
                out[1] = x[0].sin();
            }
            Dynamics::Bicycle { wheelbase, .. } => {
                let (v, theta, psi) = (x[2], x[3], x[4]);
                out[0] = v * theta.cos();
                out[1] = v * theta.sin();
                out[2] = 0.0;
                out[3] = v / wheelbase * psi.tan();
                out[4] = 0.0;
            }
            Dynamics::Rocket { gravity, .. } => {
                out[0] = x[3];
                out[1] = x[4];
                out[2] = x[5];
                out[3] = 0.0;
                out[4] = -gravity;
                out[5] = 0.0;
            }
            Dynamics::Aircraft { speed, .. } => {
                for i in 0..3 {
                    let theta = x[3 * i + 2];
                    out[3 * i] = speed * theta.cos();
                    out[3 * i + 1] = speed * theta.sin();
                    out[3 * i + 2] = 0.0;
                }
            }
            Dynamics::Integrator { .. } => out[0] = 0.0,
        }
    }

    /// Coefficients `cⱼ = ⟨grad, gⱼ(x)⟩` of each control channel.
    fn input_gains(&self, x: &[f64], grad: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::RimlessWheel { .. } => {}
            Dynamics::Bicycle { .. } => {
                out[0] = grad[2];
                out[1] = grad[4];
            }
            Dynamics::Rocket { k, .. } => {
                let (s, c) = x[2].sin_cos();
                out[0] = grad[3] * c + grad[4] * s + grad[5] * k;
                out[1] = -grad[3] * s + grad[4] * c;
            }
            Dynamics::Aircraft { .. } => {
                for i in 0..3 {
                    out[i] = grad[3 * i + 2];
                }
            }
            Dynamics::Integrator { .. } => out[0] = grad[0],
        }
    }

    /// Bang-bang control extremizing `⟨grad, f(x, u)⟩`: maximizing for avoid,
    /// minimizing for reach. A zero coefficient selects the upper bound.
    pub fn optimal_control(&self, x: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_state(grad).map_err(|_| Error::dim("gradient", x.len(), grad.len()))?;
        let mut u = vec![0.0; self.control_dim()];
        self.optimal_control_into(x, grad, &mut u);
        Ok(u)
    }

    pub fn optimal_control_into(&self, x: &[f64], grad: &[f64], u: &mut [f64]) {
        self.input_gains(x, grad, u);
        let sign = self.mode.sign();
        for (j, uj) in u.iter_mut().enumerate() {
            *uj = if sign * *uj >= 0.0 {
                self.control_hi[j]
            } else {
                self.control_lo[j]
            };
        }
    }

    /// `H(x, p) = ⟨p, f(x, u*)⟩` with `u*` from [`Self::optimal_control`].
    pub fn hamiltonian(&self, x: &[f64], grad: &[f64]) -> Result<f64> {
        let u = self.optimal_control(x, grad)?;
        let mut f = vec![0.0; x.len()];
        Ok(self.hamiltonian_with(x, grad, &mut f, &u))
    }

    /// Writes `f(x, u*)` into `f` and returns `⟨grad, f⟩`. `u` is scratch of
    /// control dimension and holds `u*` on return.
    pub fn hamiltonian_into(&self, x: &[f64], grad: &[f64], u: &mut [f64], f: &mut [f64]) -> f64 {
        self.optimal_control_into(x, grad, u);
        self.hamiltonian_with(x, grad, f, u)
    }

    fn hamiltonian_with(&self, x: &[f64], grad: &[f64], f: &mut [f64], u: &[f64]) -> f64 {
        self.dynamics_into(x, u, f);
        grad.iter().zip(f.iter()).map(|(g, fi)| g * fi).sum()
    }

    /// Target function `l(x)`.
    pub fn target_fn(&self, x: &[f64]) -> f64 {
        match &self.dynamics {
            Dynamics::RimlessWheel { energy, band, .. } => {
                let e = x[0].cos() + 0.5 * x[1] * x[1];
                (e - energy).abs() - band
            }
            Dynamics::Bicycle { obstacles, .. } => obstacles
                .iter()
                .map(|o| (x[0] - o.x).hypot(x[1] - o.y) - o.radius)
                .fold(f64::INFINITY, f64::min),
            Dynamics::Rocket { pad_half_width, .. } => {
                (pad_half_width - x[0].abs()).min(pad_half_width - x[1])
            }
            Dynamics::Aircraft { radius, .. } => {
                let mut best = f64::INFINITY;
                for (i, j) in AIRCRAFT_PAIRS {
                    best = best.min(aircraft_distance(x, i, j) - radius);
                }
                best
            }
            Dynamics::Integrator { radius } => x[0].abs() - radius,
        }
    }

    /// A subgradient of `l`: the gradient of the active branch at min/abs
    /// kinks, lowest branch index on ties.
    pub fn target_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.target_grad_into(x, &mut g);
        g
    }

    pub fn target_grad_into(&self, x: &[f64], g: &mut [f64]) {
        g.iter_mut().for_each(|v| *v = 0.0);
        match &self.dynamics {
            Dynamics::RimlessWheel { energy, .. } => {
                let e = x[0].cos() + 0.5 * x[1] * x[1];
                // |s| = max(s, -s); branch `s` wins ties.
                let s = if e - energy >= 0.0 { 1.0 } else { -1.0 };
                g[0] = -s * x[0].sin();
                g[1] = s * x[1];
            }
            Dynamics::Bicycle { obstacles, .. } => {
                let mut best = f64::INFINITY;
                let mut active = 0;
                for (i, o) in obstacles.iter().enumerate() {
                    let d = (x[0] - o.x).hypot(x[1] - o.y) - o.radius;
                    if d < best {
                        best = d;
                        active = i;
                    }
                }
                let o = &obstacles[active];
                let (dx, dy) = (x[0] - o.x, x[1] - o.y);
                let r = dx.hypot(dy);
                if r > 0.0 {
                    g[0] = dx / r;
                    g[1] = dy / r;
                }
            }
            Dynamics::Rocket { pad_half_width, .. } => {
                let side = pad_half_width - x[0].abs();
                let top = pad_half_width - x[1];
                if side <= top {
                    g[0] = if x[0] >= 0.0 { -1.0 } else { 1.0 };
                } else {
                    g[1] = -1.0;
                }
            }
            Dynamics::Aircraft { .. } => {
                let mut best = f64::INFINITY;
                let mut active = AIRCRAFT_PAIRS[0];
                for (i, j) in AIRCRAFT_PAIRS {
                    let d = aircraft_distance(x, i, j);
                    if d < best {
                        best = d;
                        active = (i, j);
                    }
                }
                let (i, j) = active;
                if best > 0.0 {
                    let dx = (x[3 * i] - x[3 * j]) / best;
                    let dy = (x[3 * i + 1] - x[3 * j + 1]) / best;
                    g[3 * i] = dx;
                    g[3 * i + 1] = dy;
                    g[3 * j] = -dx;
                    g[3 * j + 1] = -dy;
                }
            }
            Dynamics::Integrator { .. } => {
                g[0] = if x[0] >= 0.0 { 1.0 } else { -1.0 };
            }
        }
    }

    /// Angular coordinates that wrap into `[-π, π)`.
    pub fn periodic_dims(&self) -> Vec<bool> {
        let mut p = vec![false; self.state_dim()];
        match &self.dynamics {
            Dynamics::Bicycle { .. } => {
                p[3] = true;
                p[4] = true;
            }
            Dynamics::Rocket { .. } => p[2] = true,
            Dynamics::Aircraft { .. } => {
                for i in 0..3 {
                    p[3 * i + 2] = true;
                }
            }
            _ => {}
        }
        p
    }

    pub fn switching_surface(&self) -> Option<SwitchingSurface> {
        match self.dynamics {
            Dynamics::RimlessWheel { gamma, alpha, .. } => Some(SwitchingSurface {
                dim: 0,
                threshold: alpha + gamma,
            }),
            _ => None,
        }
    }

    /// One application of the reset map Δ (identity for smooth systems).
    pub fn reset(&self, x: &[f64]) -> Vec<f64> {
        match self.dynamics {
            Dynamics::RimlessWheel { gamma, alpha, .. } => {
                vec![2.0 * gamma - x[0], (2.0 * alpha).cos() * x[1]]
            }
            _ => x.to_vec(),
        }
    }

    /// Applies resets until the state is below the switching surface and wraps
    /// angles.
    pub fn canonicalize(&self, x: &[f64]) -> Vec<f64> {
        self.canonicalize_with_jacobian(x).0
    }

    /// Canonical state together with the diagonal of `∂canon(x)/∂x`; every
    /// branch is affine with a diagonal linear part.
    pub fn canonicalize_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut y = x.to_vec();
        let mut jac = vec![1.0; x.len()];
        if let Dynamics::RimlessWheel { gamma, alpha, .. } = self.dynamics {
            // α + γ is not exactly representable for the default constants
            // (0.4 + 0.2 > 0.6), so states on the surface need a tolerance.
            let surface = alpha + gamma - SURFACE_TOL;
            let contraction = (2.0 * alpha).cos();
            // Each reset maps θ to 2γ − θ, which lies below the surface whenever
            // θ ≥ α + γ and α > 0, so this loop runs at most a few times for
            // in-domain input.
            let mut guard = 0;
            while y[0].is_finite() && y[0] >= surface && guard < 64 {
                y[0] = 2.0 * gamma - y[0];
                y[1] *= contraction;
                jac[0] = -jac[0];
                jac[1] *= contraction;
                guard += 1;
            }
        }
        for (yi, periodic) in y.iter_mut().zip(self.periodic_dims()) {
            if periodic {
                *yi = wrap_angle(*yi);
            }
        }
        (y, jac)
    }

    /// Per-dimension scale `2 / (hi − lo)` of the map onto `[-1, 1]`.
    pub fn normalization_scale(&self) -> Vec<f64> {
        self.domain_lo
            .iter()
            .zip(&self.domain_hi)
            .map(|(lo, hi)| 2.0 / (hi - lo))
            .collect()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.domain_lo.iter().zip(&self.domain_hi))
            .map(|(xi, (lo, hi))| 2.0 * (xi - lo) / (hi - lo) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.domain_lo.iter().zip(&self.domain_hi))
            .map(|(zi, (lo, hi))| lo + 0.5 * (zi + 1.0) * (hi - lo))
            .collect()
    }
}

const SURFACE_TOL: f64 = 1e-12;

const AIRCRAFT_PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

fn aircraft_distance(x: &[f64], i: usize, j: usize) -> f64 {
    (x[3 * i] - x[3 * j]).hypot(x[3 * i + 1] - x[3 * j + 1])
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    // Rounding can land exactly on +π.
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}
