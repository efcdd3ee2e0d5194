//! Closed-loop simulation and the empirical trajectory cost.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::NetParams;
use crate::systems::SystemSpec;
use crate::value::{LearnedValue, ValueFunction, Variant};

/// Number of steps of the default rollout step size over the horizon.
pub const DEFAULT_STEPS: usize = 500;

/// A sampled trajectory. `controls[k]` is held over `[times[k], times[k + 1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Minimum of `l` over the stored states.
    pub cost: f64,
    /// Set when integration produced a non-finite state; the trajectory stops
    /// at the last finite one.
    pub diverged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Writes `t, x0.., u0.., l` rows. The terminal row has empty control cells.
    pub fn write_csv<W: Write>(&self, sys: &SystemSpec, mut w: W) -> Result<()> {
        let n = sys.state_dim();
        let m = sys.control_dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|j| format!("u{j}")));
        header.push("l".into());
        writeln!(w, "{}", header.join(","))?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(f64::to_string));
            match self.controls.get(k) {
                Some(u) => row.extend(u.iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            row.push(sys.target_fn(x).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `T / DEFAULT_STEPS`.
pub fn default_dt(sys: &SystemSpec) -> f64 {
    sys.horizon / DEFAULT_STEPS as f64
}

/// Integrates from `(x0, t0)` to the horizon with classical RK4 and a
/// zero-order hold on `controller(x, t)`, refreshed every step. The last step
/// is shortened to land on `T`. States are canonicalized after every step, so
/// impacts take effect at the first sample past the switching surface.
pub fn simulate<C>(
    sys: &SystemSpec,
    mut controller: C,
    x0: &[f64],
    t0: f64,
    dt: f64,
) -> Result<Trajectory>
where
    C: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let n = sys.state_dim();
    if x0.len() != n {
        return Err(Error::dim("state", n, x0.len()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::config("rollout dt must be positive"));
    }
    if !(0.0..=sys.horizon).contains(&t0) {
        return Err(Error::TimeOutOfRange {
            t: t0,
            horizon: sys.horizon,
        });
    }
    let span = sys.horizon - t0;
    // A tiny relative slack keeps `span / dt` that is integral up to roundoff
    // from adding a sliver step.
    let steps = ((span / dt) * (1.0 - 1e-12)).ceil() as usize;
    let mut x = sys.canonicalize(x0);
    let mut times = vec![t0];
    let mut cost = sys.target_fn(&x);
    let mut states = vec![x.clone()];
    let mut controls = Vec::with_capacity(steps);
    let mut diverged = false;

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for k in 0..steps {
        let t = times[k];
        let t_next = if k + 1 == steps {
            sys.horizon
        } else {
            t0 + (k + 1) as f64 * dt
        };
        let h = t_next - t;
        let u = controller(&x, t)?;
        if u.len() != sys.control_dim() {
            return Err(Error::dim("control", sys.control_dim(), u.len()));
        }
        sys.dynamics_into(&x, &u, &mut k1);
        axpy(&x, 0.5 * h, &k1, &mut tmp);
        sys.dynamics_into(&tmp, &u, &mut k2);
        axpy(&x, 0.5 * h, &k2, &mut tmp);
        sys.dynamics_into(&tmp, &u, &mut k3);
        axpy(&x, h, &k3, &mut tmp);
        sys.dynamics_into(&tmp, &u, &mut k4);
        for i in 0..n {
            tmp[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if tmp.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        x = sys.canonicalize(&tmp);
        cost = cost.min(sys.target_fn(&x));
        controls.push(u);
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        controls,
        cost,
        diverged,
    })
}

fn axpy(x: &[f64], a: f64, k: &[f64], out: &mut [f64]) {
    for ((o, xi), ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + a * ki;
    }
}

/// Rolls out the greedy policy of `vf` from `(x0, 0)` and returns the
/// trajectory cost `J(x0)`.
pub fn rollout_cost(vf: &dyn ValueFunction, x0: &[f64], dt: f64) -> Result<f64> {
    let sys = vf.system();
    let traj = simulate(sys, |x, t| vf.control(x, t), x0, 0.0, dt)?;
    Ok(traj.cost)
}

/// `J(x0)` under the policy of a trained network.
pub fn empirical_value(
    sys: &SystemSpec,
    variant: Variant,
    params: &NetParams,
    x0: &[f64],
    dt: f64,
) -> Result<f64> {
    let vf = LearnedValue::new(variant, params.clone(), sys.clone());
    rollout_cost(&vf, x0, dt)
}

/// `J` for many initial states, in parallel. Results keep input order.
pub fn rollout_costs(vf: &dyn ValueFunction, xs: &[Vec<f64>], dt: f64) -> Result<Vec<f64>> {
    xs.par_iter().map(|x| rollout_cost(vf, x, dt)).collect()
}
