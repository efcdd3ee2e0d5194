//! Dense-grid Lax-Friedrichs solver for the reachability variational
//! inequality in up to three state dimensions.
//!
//! Time runs backward from `T`. With `τ = T − t` the equation reads
//! `V_τ = H(x, ∇V)` outside the clamp, and the update is
//!
//! ```text
//! V ← min(l, V + Δt · [H(x, (D⁺V + D⁻V)/2) + Σᵢ αᵢ (D⁺ᵢV − D⁻ᵢV)/2])
//! ```
//!
//! With `αᵢ ≥ |fᵢ|` everywhere and the CFL bound this scheme is monotone, so the
//! stepped fields decrease nodewise as the horizon grows.
//!
//! Boundary ghosts: periodic dimensions wrap; the upper end of a dimension that
//! carries a switching surface takes the interpolated value at the reset image
//! of the ghost node; every other boundary copies the boundary value. The
//! update there only reads the interior neighbor and stays monotone. States
//! that leave the box are treated as if they stopped at its edge in that
//! dimension.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::SystemSpec;

pub const MAX_DIMS: usize = 3;

/// Fraction of the largest stable step used by [`solve`] callers that do not
/// choose one. Any value in `(0, 1]` keeps the scheme monotone; larger values
/// add less numerical diffusion.
pub const DEFAULT_CFL: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub counts: Vec<usize>,
    pub periodic: Vec<bool>,
}

impl Grid {
    pub fn new(mins: Vec<f64>, maxs: Vec<f64>, counts: Vec<usize>, periodic: Vec<bool>) -> Result<Self> {
        let d = mins.len();
        if d == 0 || d > MAX_DIMS {
            return Err(Error::config(format!(
                "grids support 1 to {MAX_DIMS} dimensions, got {d}"
            )));
        }
        for (what, len) in [("maxs", maxs.len()), ("counts", counts.len()), ("periodic", periodic.len())] {
            if len != d {
                return Err(Error::dim(what, d, len));
            }
        }
        if counts.iter().any(|&c| c < 3) {
            return Err(Error::config("every grid dimension needs at least 3 nodes"));
        }
        if mins.iter().zip(&maxs).any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::config("grid bounds must satisfy min < max"));
        }
        Ok(Self {
            mins,
            maxs,
            counts,
            periodic,
        })
    }

    /// A grid over the system's domain with `counts` nodes per dimension.
    pub fn for_system(sys: &SystemSpec, counts: Vec<usize>) -> Result<Self> {
        Self::new(
            sys.domain_lo.clone(),
            sys.domain_hi.clone(),
            counts,
            sys.periodic_dims(),
        )
    }

    pub fn dims(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node spacing. Periodic dimensions place `counts` nodes on `[min, max)`.
    pub fn spacing(&self, k: usize) -> f64 {
        let span = self.maxs[k] - self.mins[k];
        if self.periodic[k] {
            span / self.counts[k] as f64
        } else {
            span / (self.counts[k] - 1) as f64
        }
    }

    /// Row-major strides (last dimension fastest).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims()];
        for k in (0..self.dims().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.counts[k + 1];
        }
        s
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims()];
        for k in (0..self.dims()).rev() {
            idx[k] = flat % self.counts[k];
            flat /= self.counts[k];
        }
        idx
    }

    pub fn coordinate(&self, k: usize, i: usize) -> f64 {
        if !self.periodic[k] && i + 1 == self.counts[k] {
            self.maxs[k]
        } else {
            self.mins[k] + i as f64 * self.spacing(k)
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.coordinate(k, i))
            .collect()
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub time: f64,
}

impl GridField {
    pub fn new(grid: Grid, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::dim("grid values", grid.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("grid values must be finite"));
        }
        Ok(Self { grid, values, time })
    }

    /// Share of nodes with `V ≤ 0`.
    pub fn sub_zero_fraction(&self) -> f64 {
        self.values.iter().filter(|v| **v <= 0.0).count() as f64 / self.values.len() as f64
    }

    /// Multilinear interpolation; coordinates outside non-periodic bounds are
    /// clamped to the boundary.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        interpolate(&self.grid, &self.grid.strides(), &self.values, x)
    }
}

fn interpolate(grid: &Grid, strides: &[usize], values: &[f64], x: &[f64]) -> f64 {
    let d = grid.dims();
    let mut base = [0usize; MAX_DIMS];
    let mut upper = [0usize; MAX_DIMS];
    let mut frac = [0.0f64; MAX_DIMS];
    for k in 0..d {
        let n = grid.counts[k];
        let h = grid.spacing(k);
        let mut s = (x[k] - grid.mins[k]) / h;
        if grid.periodic[k] {
            s = s.rem_euclid(n as f64);
            let i = (s.floor() as usize).min(n - 1);
            base[k] = i;
            upper[k] = (i + 1) % n;
            frac[k] = s - i as f64;
        } else {
            s = s.clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            base[k] = i;
            upper[k] = i + 1;
            frac[k] = s - i as f64;
        }
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0;
        for k in 0..d {
            if corner >> k & 1 == 1 {
                w *= frac[k];
                flat += upper[k] * strides[k];
            } else {
                w *= 1.0 - frac[k];
                flat += base[k] * strides[k];
            }
        }
        if w != 0.0 {
            acc += w * values[flat];
        }
    }
    acc
}

fn check_dims(sys: &SystemSpec, grid: &Grid) -> Result<()> {
    if grid.dims() != sys.state_dim() {
        return Err(Error::dim("grid dimensions", sys.state_dim(), grid.dims()));
    }
    Ok(())
}

/// `V(·, T) = l` at every node.
pub fn init_field(sys: &SystemSpec, grid: &Grid) -> Result<GridField> {
    check_dims(sys, grid)?;
    let values = (0..grid.len())
        .into_par_iter()
        .map(|i| sys.target_fn(&grid.node(i)))
        .collect();
    Ok(GridField {
        grid: grid.clone(),
        values,
        time: sys.horizon,
    })
}

/// `αᵢ = max |fᵢ(x, u)|` over all nodes and all corners of the control box.
pub fn dissipation(sys: &SystemSpec, grid: &Grid) -> Vec<f64> {
    let n = grid.dims();
    let m = sys.control_dim();
    let corners: Vec<Vec<f64>> = (0..(1usize << m))
        .map(|c| {
            (0..m)
                .map(|j| {
                    if c >> j & 1 == 1 {
                        sys.control_hi[j]
                    } else {
                        sys.control_lo[j]
                    }
                })
                .collect()
        })
        .collect();
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            let mut f = vec![0.0; n];
            let mut alpha = vec![0.0f64; n];
            for u in &corners {
                sys.dynamics_into(&x, u, &mut f);
                for (a, fi) in alpha.iter_mut().zip(&f) {
                    *a = a.max(fi.abs());
                }
            }
            alpha
        })
        .reduce(
            || vec![0.0; n],
            |a, b| a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect(),
        )
}

/// Largest stable step, `(Σᵢ αᵢ / Δxᵢ)⁻¹`; infinite without dynamics.
pub fn max_stable_dt(sys: &SystemSpec, grid: &Grid) -> f64 {
    let alpha = dissipation(sys, grid);
    let rate: f64 = alpha
        .iter()
        .enumerate()
        .map(|(k, a)| a / grid.spacing(k))
        .sum();
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

struct Stepper<'a> {
    sys: &'a SystemSpec,
    grid: &'a Grid,
    strides: Vec<usize>,
    alpha: Vec<f64>,
    spacing: Vec<f64>,
    targets: Vec<f64>,
    reset_dim: Option<usize>,
}

impl<'a> Stepper<'a> {
    fn new(sys: &'a SystemSpec, grid: &'a Grid) -> Self {
        let reset_dim = sys.switching_surface().map(|s| s.dim);
        Self {
            sys,
            grid,
            strides: grid.strides(),
            alpha: dissipation(sys, grid),
            spacing: (0..grid.dims()).map(|k| grid.spacing(k)).collect(),
            targets: (0..grid.len())
                .into_par_iter()
                .map(|i| sys.target_fn(&grid.node(i)))
                .collect(),
            reset_dim,
        }
    }

    fn max_dt(&self) -> f64 {
        let rate: f64 = self.alpha.iter().zip(&self.spacing).map(|(a, h)| a / h).sum();
        if rate > 0.0 {
            1.0 / rate
        } else {
            f64::INFINITY
        }
    }

    fn neighbor(&self, values: &[f64], flat: usize, x: &[f64], idx: &[usize], k: usize, up: bool) -> f64 {
        let n = self.grid.counts[k];
        let s = self.strides[k];
        let i = idx[k];
        if up {
            if i + 1 < n {
                return values[flat + s];
            }
            if self.grid.periodic[k] {
                return values[flat - i * s];
            }
            if self.reset_dim == Some(k) {
                let mut ghost = x.to_vec();
                ghost[k] += self.spacing[k];
                let image = self.sys.reset(&ghost);
                return interpolate(self.grid, &self.strides, values, &image);
            }
            values[flat]
        } else {
            if i > 0 {
                return values[flat - s];
            }
            if self.grid.periodic[k] {
                return values[flat + (n - 1) * s];
            }
            values[flat]
        }
    }

    fn step(&self, values: &[f64], dt: f64) -> Vec<f64> {
        let d = self.grid.dims();
        (0..values.len())
            .into_par_iter()
            .map_init(
                || (vec![0.0; d], vec![0.0; self.sys.control_dim()], vec![0.0; d]),
                |(p, u, f), i| {
                    let idx = self.grid.multi_index(i);
                    let x = self.grid.node(i);
                    let v = values[i];
                    let mut diss = 0.0;
                    for k in 0..d {
                        let dp = (self.neighbor(values, i, &x, &idx, k, true) - v) / self.spacing[k];
                        let dm = (v - self.neighbor(values, i, &x, &idx, k, false)) / self.spacing[k];
                        p[k] = 0.5 * (dp + dm);
                        diss += self.alpha[k] * 0.5 * (dp - dm);
                    }
                    let h = self.sys.hamiltonian_into(&x, p, u, f);
                    self.targets[i].min(v + dt * (h + diss))
                },
            )
            .collect()
    }
}

/// One backward step of length `dt`.
pub fn step(sys: &SystemSpec, field: &GridField, dt: f64) -> Result<GridField> {
    check_dims(sys, &field.grid)?;
    let stepper = Stepper::new(sys, &field.grid);
    let max_dt = stepper.max_dt();
    if !(dt >= 0.0) || dt > max_dt * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, max_dt });
    }
    Ok(GridField {
        grid: field.grid.clone(),
        values: stepper.step(&field.values, dt),
        time: field.time - dt,
    })
}

/// Solves from `T` down to `t = 0` and returns `V(·, 0)`.
pub fn solve(sys: &SystemSpec, grid: &Grid, horizon: f64, cfl: f64) -> Result<GridField> {
    let mut last = None;
    solve_with(sys, grid, horizon, cfl, |f| {
        last = Some(f.clone());
    }, usize::MAX)?;
    Ok(last.expect("the final field is always reported"))
}

/// Like [`solve`], but also returns the field every `every` steps (the initial
/// and final fields are always included), in order of decreasing time.
pub fn solve_with_snapshots(
    sys: &SystemSpec,
    grid: &Grid,
    horizon: f64,
    cfl: f64,
    every: usize,
) -> Result<Vec<GridField>> {
    let mut out = Vec::new();
    solve_with(sys, grid, horizon, cfl, |f| out.push(f.clone()), every.max(1))?;
    Ok(out)
}

fn solve_with(
    sys: &SystemSpec,
    grid: &Grid,
    horizon: f64,
    cfl: f64,
    mut report: impl FnMut(&GridField),
    every: usize,
) -> Result<()> {
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::config("cfl must lie in (0, 1]"));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::config("horizon must be non-negative"));
    }
    let mut field = init_field(sys, grid)?;
    field.time = horizon;
    let stepper = Stepper::new(sys, grid);
    let max_dt = stepper.max_dt();
    if every != usize::MAX {
        report(&field);
    }
    if !max_dt.is_finite() || horizon == 0.0 {
        // Nothing moves: V(·, t) = l for every t.
        field.time = 0.0;
        report(&field);
        return Ok(());
    }
    let dt = cfl * max_dt;
    let mut count = 0usize;
    while field.time > 0.0 {
        let h = if field.time <= dt * (1.0 + 1e-9) {
            field.time
        } else {
            dt
        };
        field.values = stepper.step(&field.values, h);
        field.time = if h == field.time { 0.0 } else { field.time - h };
        count += 1;
        if field.time == 0.0 || (every != usize::MAX && count.is_multiple_of(every)) {
            report(&field);
        }
    }
    Ok(())
}

/// Jaccard index of the `V ≤ 0` node sets; 1 when both are empty.
pub fn iou(a: &GridField, b: &GridField) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::config("IoU needs fields on identical grids"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (ia, ib) = (*x <= 0.0, *y <= 0.0);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::Mode;

    fn line(n: usize) -> Grid {
        Grid::new(vec![-1.0], vec![1.0], vec![n], vec![false]).unwrap()
    }

    /// Max-norm and L1 errors against `max(|x| − T, 0) − r`.
    fn reach_errors(n: usize) -> (f64, f64) {
        let sys = SystemSpec::integrator(Mode::Reach, 0.25, 1.0, 0.5);
        let grid = line(n);
        let v = solve(&sys, &grid, 0.5, DEFAULT_CFL).unwrap();
        let errs: Vec<f64> = v
            .values
            .iter()
            .zip(grid.nodes())
            .map(|(v, x)| (v - ((x[0].abs() - 0.5).max(0.0) - 0.25)).abs())
            .collect();
        (
            errs.iter().copied().fold(0.0, f64::max),
            errs.iter().sum::<f64>() * grid.spacing(0),
        )
    }

    #[test]
    fn reach_integrator_matches_closed_form() {
        let (err, _) = reach_errors(401);
        assert!(err <= 2.0 * 0.005, "max error {err}");
    }

    #[test]
    fn avoid_integrator_is_stationary() {
        let sys = SystemSpec::integrator(Mode::Avoid, 0.25, 1.0, 0.5);
        let grid = line(401);
        let v = solve(&sys, &grid, 0.5, DEFAULT_CFL).unwrap();
        let err = v
            .values
            .iter()
            .zip(grid.nodes())
            .map(|(v, x)| (v - (x[0].abs() - 0.25)).abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.01, "max error {err}");
    }

    #[test]
    fn refinement_reduces_error() {
        // The max-norm error sits at the corner |x| = T, where the convex kink
        // of l opens into a flat region; monotone first-order schemes converge
        // there at half order. The L1 error converges at first order.
        let (max_c, l1_c) = reach_errors(101);
        let (max_f, l1_f) = reach_errors(201);
        assert!(l1_c >= 1.5 * l1_f, "L1 {l1_c} vs {l1_f}");
        assert!(max_c >= 1.3 * max_f, "max {max_c} vs {max_f}");
    }

    #[test]
    fn zero_dynamics_leaves_field_unchanged() {
        let sys = SystemSpec::integrator(Mode::Reach, 0.25, 0.0, 1.0);
        let grid = line(41);
        let init = init_field(&sys, &grid).unwrap();
        let v = solve(&sys, &grid, 1.0, 0.5).unwrap();
        assert_eq!(v.values, init.values);
        assert_eq!(v.time, 0.0);
        let stepped = step(&sys, &init, 0.3).unwrap();
        assert_eq!(stepped.values, init.values);
    }

    #[test]
    fn zero_horizon_returns_target() {
        let sys = SystemSpec::rimless_wheel();
        let grid = Grid::for_system(&sys, vec![21, 21]).unwrap();
        let init = init_field(&sys, &grid).unwrap();
        let v = solve(&sys, &grid, 0.0, 0.5).unwrap();
        assert_eq!(v.values, init.values);
    }

    #[test]
    fn init_field_examples() {
        let sys = SystemSpec::integrator(Mode::Avoid, 0.25, 1.0, 1.0);
        let f = init_field(&sys, &line(5)).unwrap();
        assert_eq!(f.values, vec![0.75, 0.25, -0.25, 0.25, 0.75]);
        assert_eq!(f.time, 1.0);

        let rw = SystemSpec::rimless_wheel();
        let grid = Grid::for_system(&rw, vec![11, 11]).unwrap();
        let f = init_field(&rw, &grid).unwrap();
        let min = grid.nodes().iter().map(|x| rw.target_fn(x)).fold(f64::INFINITY, f64::min);
        assert_eq!(f.values.iter().copied().fold(f64::INFINITY, f64::min), min);
        assert!(f.values.iter().all(|v| *v >= -0.05));

        let bike = SystemSpec::bicycle();
        assert!(init_field(&bike, &grid).is_err());
    }

    #[test]
    fn cfl_violation_names_the_step() {
        let sys = SystemSpec::integrator(Mode::Reach, 0.25, 1.0, 1.0);
        let f = init_field(&sys, &line(201)).unwrap();
        match step(&sys, &f, 0.1) {
            Err(Error::Cfl { dt, max_dt }) => {
                assert_eq!(dt, 0.1);
                assert!((max_dt - 0.01).abs() < 1e-12);
            }
            other => panic!("expected a CFL error, got {other:?}"),
        }
    }

    #[test]
    fn snapshots_are_monotone_and_clamped() {
        for sys in [
            SystemSpec::integrator(Mode::Reach, 0.25, 1.0, 0.5),
            SystemSpec::integrator(Mode::Avoid, 0.25, 1.0, 0.5),
        ] {
            let grid = line(101);
            let snaps = solve_with_snapshots(&sys, &grid, 0.5, 0.5, 5).unwrap();
            assert!(snaps.len() > 3);
            let l = init_field(&sys, &grid).unwrap();
            for pair in snaps.windows(2) {
                assert!(pair[1].time < pair[0].time);
                for (a, b) in pair[1].values.iter().zip(&pair[0].values) {
                    assert!(*a <= b + 1e-9);
                }
            }
            for s in &snaps {
                assert!(s.values.iter().zip(&l.values).all(|(v, l)| v <= l));
            }
            assert_eq!(snaps.last().unwrap().time, 0.0);
        }
    }

    #[test]
    fn rimless_wheel_snapshots_are_monotone() {
        let sys = SystemSpec::rimless_wheel();
        let grid = Grid::for_system(&sys, vec![41, 41]).unwrap();
        let snaps = solve_with_snapshots(&sys, &grid, 2.0, 0.5, 40).unwrap();
        for pair in snaps.windows(2) {
            for (a, b) in pair[1].values.iter().zip(&pair[0].values) {
                assert!(*a <= b + 1e-9);
            }
        }
        // The tube grows backward in time.
        assert!(snaps.last().unwrap().sub_zero_fraction() > snaps[0].sub_zero_fraction());
    }

    #[test]
    fn iou_examples() {
        let grid = line(200);
        let a = GridField::new(grid.clone(), (0..200).map(|i| if i < 50 { -1.0 } else { 1.0 }).collect(), 0.0).unwrap();
        let b = GridField::new(grid.clone(), (0..200).map(|i| if i < 100 { -1.0 } else { 1.0 }).collect(), 0.0).unwrap();
        let c = GridField::new(grid.clone(), (0..200).map(|i| if i >= 150 { -1.0 } else { 1.0 }).collect(), 0.0).unwrap();
        let empty = GridField::new(grid.clone(), vec![1.0; 200], 0.0).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.5);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        let other = GridField::new(line(100), vec![1.0; 100], 0.0).unwrap();
        assert!(iou(&a, &other).is_err());
    }

    #[test]
    fn interpolation_reproduces_affine_fields() {
        let grid = Grid::new(vec![-1.0, 0.0, 2.0], vec![1.0, 3.0, 4.0], vec![5, 7, 4], vec![false; 3]).unwrap();
        let f = |x: &[f64]| 0.3 * x[0] - 1.2 * x[1] + 2.0 * x[2] + 0.7;
        let values = grid.nodes().iter().map(|x| f(x)).collect();
        let field = GridField::new(grid, values, 0.0).unwrap();
        for x in [[0.13, 1.7, 2.2], [-1.0, 0.0, 2.0], [1.0, 3.0, 4.0], [0.999, 2.5, 3.3]] {
            assert!((field.interpolate(&x) - f(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn periodic_grids_wrap() {
        let grid = Grid::new(vec![-std::f64::consts::PI], vec![std::f64::consts::PI], vec![8], vec![true]).unwrap();
        assert!((grid.spacing(0) - std::f64::consts::PI / 4.0).abs() < 1e-15);
        let values: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let field = GridField::new(grid, values, 0.0).unwrap();
        // Halfway between the last node and the first (wrapped) one.
        let x = std::f64::consts::PI - std::f64::consts::PI / 8.0;
        assert!((field.interpolate(&[x]) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![0.0], vec![1.0], vec![2], vec![false]).is_err());
        assert!(Grid::new(vec![1.0], vec![0.0], vec![5], vec![false]).is_err());
        assert!(Grid::new(vec![0.0; 4], vec![1.0; 4], vec![3; 4], vec![false; 4]).is_err());
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![3, 5], vec![false, false]).unwrap();
        assert_eq!(g.node(7), vec![0.5, 1.0]);
        assert_eq!(g.len(), 15);
    }
}
