//! Poincaré return map on the guard, fixed points and the reduced map.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ClosedLoop;
use crate::error::{Error, Result};
use crate::gait::GaitSpec;
use crate::hybrid::{guard_active, guard_value, solve_guard_configuration};
use crate::model::{RobotModel, State};
use crate::sim::{step, SimOptions};

/// Weights for mixed position/velocity states: positions 1, velocities the
/// step duration.
pub fn state_weights(n: usize, step_duration: f64) -> DVector<f64> {
    DVector::from_fn(2 * n, |i, _| if i < n { 1.0 } else { step_duration })
}

pub fn weighted_distance(a: &State, b: &State, step_duration: f64) -> f64 {
    let w = state_weights(a.dim(), step_duration);
    (a.to_vector() - b.to_vector()).component_mul(&w).norm()
}

/// Coordinates on the guard: the state with the guard coordinate dropped.
#[derive(Debug, Clone)]
pub struct GuardChart {
    model: Arc<RobotModel>,
    /// Guess for the solved coordinate.
    reference: f64,
}

impl GuardChart {
    pub fn new(model: Arc<RobotModel>, reference: &State) -> Self {
        let k = model.guard_coordinate();
        GuardChart { reference: reference.q[k], model }
    }

    pub fn dim(&self) -> usize {
        2 * self.model.n_q() - 1
    }

    pub fn project(&self, x: &State) -> DVector<f64> {
        let k = self.model.guard_coordinate();
        let v = x.to_vector();
        DVector::from_iterator(v.len() - 1, v.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, x)| *x))
    }

    pub fn embed(&self, z: &DVector<f64>) -> Result<State> {
        let n = self.model.n_q();
        let k = self.model.guard_coordinate();
        let mut v = DVector::zeros(2 * n);
        let mut j = 0;
        for i in 0..2 * n {
            if i == k {
                v[i] = self.reference;
            } else {
                v[i] = z[j];
                j += 1;
            }
        }
        let x = State::from_vector(&v);
        let q = solve_guard_configuration(&self.model, &x.q)?;
        Ok(State::new(q, x.qd))
    }

    /// Chart weights matching [`state_weights`] with the guard coordinate
    /// removed.
    pub fn weights(&self, step_duration: f64) -> DVector<f64> {
        let n = self.model.n_q();
        let k = self.model.guard_coordinate();
        let w = state_weights(n, step_duration);
        DVector::from_iterator(2 * n - 1, w.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, x)| *x))
    }
}

/// `P(x-) = flow(impact(x-))` up to the next guard crossing.
pub fn return_map(field: &ClosedLoop, x_minus: &State, opts: &SimOptions) -> Result<State> {
    match step(field, x_minus, opts) {
        Ok(r) => Ok(r.x_next),
        Err(e) if e.is_escape() => Err(Error::OutsideDomain(e.to_string())),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub x_star: State,
    /// Weighted norm of `P(x*) - x*`.
    pub residual: f64,
    /// Jacobian of the return map in guard-chart coordinates (row-major).
    pub jacobian: Vec<Vec<f64>>,
    pub eigenvalues: Vec<Eigenvalue>,
    pub spectral_radius: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub fd_step: f64,
    pub max_halvings: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { tolerance: 1e-8, max_iterations: 50, fd_step: 1e-6, max_halvings: 8 }
    }
}

/// Forward-difference Jacobian of the chart-coordinate return map at `z`,
/// given `p0 = P(z)`. Columns are evaluated in parallel.
pub fn chart_jacobian(
    field: &ClosedLoop,
    chart: &GuardChart,
    z: &DVector<f64>,
    p0: &DVector<f64>,
    step_size: f64,
    central: bool,
    opts: &SimOptions,
) -> Result<DMatrix<f64>> {
    let d = z.len();
    let map = |zz: &DVector<f64>| -> Result<DVector<f64>> {
        let x = chart.embed(zz)?;
        Ok(chart.project(&return_map(field, &x, opts)?))
    };
    let cols: Vec<Result<DVector<f64>>> = (0..d)
        .into_par_iter()
        .map(|i| {
            let h = step_size * z[i].abs().max(1.0);
            let mut zp = z.clone();
            zp[i] += h;
            if central {
                let mut zm = z.clone();
                zm[i] -= h;
                Ok((map(&zp)? - map(&zm)?) / (2.0 * h))
            } else {
                Ok((map(&zp)? - p0) / h)
            }
        })
        .collect();
    let mut jac = DMatrix::zeros(d, d);
    for (i, c) in cols.into_iter().enumerate() {
        jac.set_column(i, &c?);
    }
    Ok(jac)
}

pub fn eigenvalues(jac: &DMatrix<f64>) -> Vec<Eigenvalue> {
    jac.clone().complex_eigenvalues().iter().map(|c| Eigenvalue { re: c.re, im: c.im }).collect()
}

/// Damped Newton iteration on `P(z) - z` in guard-chart coordinates.
pub fn find_fixed_point(
    field: &ClosedLoop,
    x_guess: &State,
    opts: &SimOptions,
    fp: &FixedPointOptions,
) -> Result<FixedPoint> {
    let model = field.model.clone();
    let period = field.gait.step_duration;
    let chart = GuardChart::new(model.clone(), x_guess);
    let w = chart.weights(period);
    let map = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let x = chart.embed(z)?;
        Ok(chart.project(&return_map(field, &x, opts)?))
    };
    let mut z = chart.project(&chart.embed(&chart.project(x_guess))?);
    let mut pz = map(&z)?;
    let wnorm = |v: &DVector<f64>| v.component_mul(&w).norm();
    let mut res = wnorm(&(&pz - &z));
    let mut iterations = 0;
    while res > fp.tolerance {
        if iterations >= fp.max_iterations {
            return Err(Error::FixedPointNotFound { iterations, best_residual: res });
        }
        iterations += 1;
        let jac = chart_jacobian(field, &chart, &z, &pz, fp.fd_step, false, opts)?;
        let a = &jac - DMatrix::identity(z.len(), z.len());
        let delta = a
            .lu()
            .solve(&(&z - &pz))
            .ok_or(Error::FixedPointNotFound { iterations, best_residual: res })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=fp.max_halvings {
            let zt = &z + lambda * &delta;
            if let Ok(pt) = map(&zt) {
                let rt = wnorm(&(&pt - &zt));
                if rt < res {
                    z = zt;
                    pz = pt;
                    res = rt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::FixedPointNotFound { iterations, best_residual: res });
        }
    }
    let x_star = chart.embed(&z)?;
    let p_star = return_map(field, &x_star, opts)?;
    let residual = weighted_distance(&p_star, &x_star, period);
    let jac = chart_jacobian(field, &chart, &z, &chart.project(&p_star), fp.fd_step, false, opts)?;
    let eig = eigenvalues(&jac);
    let spectral_radius = eig.iter().map(Eigenvalue::modulus).fold(0.0, f64::max);
    Ok(FixedPoint {
        x_star,
        residual,
        jacobian: jac.row_iter().map(|r| r.iter().copied().collect()).collect(),
        eigenvalues: eig,
        spectral_radius,
        iterations,
    })
}

/// Low-dimensional coordinates `Phi(x)` selected from the stacked state,
/// with the reconstruction `iota` back onto the guard.
#[derive(Debug, Clone)]
pub struct ReducedChart {
    model: Arc<RobotModel>,
    gait: Arc<GaitSpec>,
    /// Indices into the stacked state `(q, qd)`.
    pub indices: Vec<usize>,
    /// Nominal pre-impact state supplying every coordinate that is neither
    /// pinned by the outputs nor selected.
    pub nominal: State,
}

/// Default selection: the rates of the unactuated coordinates (for the
/// five-link this is the torso pitch rate).
pub fn default_reduced_indices(model: &RobotModel) -> Vec<usize> {
    let n = model.n_q();
    model.unactuated_indices().into_iter().map(|i| n + i).collect()
}

impl ReducedChart {
    pub fn new(model: Arc<RobotModel>, gait: Arc<GaitSpec>, nominal: State, indices: Vec<usize>) -> Result<Self> {
        let n = model.n_q();
        if indices.is_empty() {
            return Err(Error::Config("reduced chart needs at least one coordinate".into()));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() || sorted.iter().any(|&i| i >= 2 * n) {
            return Err(Error::Config("reduced indices must be distinct state indices".into()));
        }
        if indices.contains(&model.guard_coordinate()) {
            return Err(Error::Config("the guard coordinate is solved, it cannot be a reduced coordinate".into()));
        }
        if indices.len() > 2 * n - 1 {
            return Err(Error::Config("reduced chart larger than the guard".into()));
        }
        Ok(ReducedChart { model, gait, indices, nominal })
    }

    pub fn with_default_indices(model: Arc<RobotModel>, gait: Arc<GaitSpec>, nominal: State) -> Result<Self> {
        let idx = default_reduced_indices(&model);
        Self::new(model, gait, nominal, idx)
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    /// `Phi(x)`.
    pub fn project(&self, x: &State) -> DVector<f64> {
        let v = x.to_vector();
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| v[i]))
    }

    /// `iota(x_red)`: actuated coordinates pinned to the terminal point of
    /// the desired outputs (`y = 0`, `ydot = 0` at phase 1), selected
    /// coordinates set from `x_red`, the guard coordinate solved so the swing
    /// foot touches the ground, and remaining coordinates nominal.
    pub fn reconstruct(&self, x_red: &DVector<f64>) -> Result<State> {
        if x_red.len() != self.indices.len() {
            return Err(Error::InputDomain(format!(
                "reduced state has {} entries, chart has {}",
                x_red.len(),
                self.indices.len()
            )));
        }
        let model = &self.model;
        let n = model.n_q();
        let mut v = self.nominal.to_vector();
        let (yd, yd_dot, _) = self.gait.desired(self.gait.step_duration);
        for (j, &i) in model.actuated_indices.iter().enumerate() {
            v[i] = yd[j];
            v[n + i] = yd_dot[j];
        }
        for (j, &i) in self.indices.iter().enumerate() {
            v[i] = x_red[j];
        }
        let x = State::from_vector(&v);
        let q = solve_guard_configuration(model, &x.q)?;
        let x = State::new(q, x.qd);
        let g = guard_value(model, &x);
        if !(g.hdot < 0.0) || !guard_active(model, &x.q) {
            return Err(Error::Reconstruction(format!(
                "reconstructed state is not an impact state (hdot = {:.3e})",
                g.hdot
            )));
        }
        Ok(x)
    }
}

/// `P_X(x_red) = Phi(P(iota(x_red)))`.
pub fn reduced_return_map(
    field: &ClosedLoop,
    chart: &ReducedChart,
    x_red: &DVector<f64>,
    opts: &SimOptions,
) -> Result<DVector<f64>> {
    let x = chart.reconstruct(x_red)?;
    Ok(chart.project(&return_map(field, &x, opts)?))
}
