//! Dormand-Prince 5(4) Runge-Kutta with continuous (dense) output.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { rtol: 1e-9, atol: 1e-11 }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Continuous extension over one accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSegment {
    pub t0: f64,
    pub h: f64,
    rc: [DVector<f64>; 5],
}

impl DenseSegment {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let th = if self.h == 0.0 { 0.0 } else { (t - self.t0) / self.h };
        let th1 = 1.0 - th;
        let [r1, r2, r3, r4, r5] = &self.rc;
        r1 + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5)))
    }
}

/// Result of one Runge-Kutta step.
#[derive(Debug, Clone)]
pub struct StepOut {
    pub y: DVector<f64>,
    /// Derivative at the new point (first stage of the next step).
    pub f_new: DVector<f64>,
    pub err: DVector<f64>,
    pub dense: DenseSegment,
}

pub fn dopri_step<F>(f: &F, t: f64, y: &DVector<f64>, k1: &DVector<f64>, h: f64) -> Result<StepOut>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k2 = f(t + C2 * h, &(y + h * A21 * k1))?;
    let k3 = f(t + C3 * h, &(y + h * (A31 * k1 + A32 * &k2)))?;
    let k4 = f(t + C4 * h, &(y + h * (A41 * k1 + A42 * &k2 + A43 * &k3)))?;
    let k5 = f(t + C5 * h, &(y + h * (A51 * k1 + A52 * &k2 + A53 * &k3 + A54 * &k4)))?;
    let k6 = f(t + h, &(y + h * (A61 * k1 + A62 * &k2 + A63 * &k3 + A64 * &k4 + A65 * &k5)))?;
    let y_new = y + h * (A71 * k1 + A73 * &k3 + A74 * &k4 + A75 * &k5 + A76 * &k6);
    let k7 = f(t + h, &y_new)?;
    let err = h * (E1 * k1 + E3 * &k3 + E4 * &k4 + E5 * &k5 + E6 * &k6 + E7 * &k7);
    let r2 = &y_new - y;
    let r3 = h * k1 - &r2;
    let r4 = &r2 - h * &k7 - &r3;
    let r5 = h * (D1 * k1 + D3 * &k3 + D4 * &k4 + D5 * &k5 + D6 * &k6 + D7 * &k7);
    Ok(StepOut {
        dense: DenseSegment { t0: t, h, rc: [y.clone(), r2, r3, r4, r5] },
        y: y_new,
        f_new: k7,
        err,
    })
}

/// Scaled RMS error norm.
pub fn error_norm(err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, tol: Tolerances) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| {
            let sc = tol.atol + tol.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

/// Adaptive step-size controller state.
#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub h: f64,
    pub h_max: f64,
    pub h_min: f64,
}

impl StepControl {
    pub fn new(h0: f64, h_max: f64) -> Self {
        StepControl { h: h0, h_max, h_min: 1e-14 }
    }

    /// Updates the step size from the error norm and reports acceptance.
    pub fn update(&mut self, err: f64) -> bool {
        let fac = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
        let accepted = err <= 1.0;
        let fac = if accepted { fac } else { fac.min(1.0) };
        self.h = (self.h * fac).min(self.h_max);
        accepted
    }
}

/// Plain adaptive integration from `t0` to `t1` without events; returns the
/// final state and the number of accepted steps.
pub fn integrate<F>(f: F, t0: f64, y0: &DVector<f64>, t1: f64, tol: Tolerances) -> Result<(DVector<f64>, usize)>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = f(t, &y)?;
    let mut ctl = StepControl::new(1e-3_f64.min(t1 - t0), 0.05);
    let mut accepted = 0;
    let mut attempts = 0usize;
    while t < t1 {
        attempts += 1;
        if attempts > 10_000_000 {
            return Err(Error::InputDomain("integration step budget exhausted".into()));
        }
        let h = ctl.h.min(t1 - t);
        let out = dopri_step(&f, t, &y, &k1, h)?;
        let err = error_norm(&out.err, &y, &out.y, tol);
        let last_h = h;
        if ctl.update(err) {
            t = if last_h == t1 - t { t1 } else { t + last_h };
            y = out.y;
            k1 = out.f_new;
            accepted += 1;
        } else if ctl.h < ctl.h_min {
            return Err(Error::InputDomain(format!("step size underflow at t = {t}")));
        }
    }
    Ok((y, accepted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_is_accurate() {
        let f = |_t: f64, y: &DVector<f64>| Ok(DVector::from_vec(vec![y[1], -y[0]]));
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let (y, _) = integrate(f, 0.0, &y0, 10.0, Tolerances::default()).unwrap();
        assert!((y[0] - 10f64.cos()).abs() < 1e-8);
        assert!((y[1] + 10f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn dense_output_matches_endpoints_and_interior() {
        let f = |_t: f64, y: &DVector<f64>| Ok(DVector::from_vec(vec![y[1], -y[0]]));
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let k1 = f(0.0, &y0).unwrap();
        let out = dopri_step(&f, 0.0, &y0, &k1, 0.1).unwrap();
        assert_eq!(out.dense.eval(0.0), y0);
        assert!((out.dense.eval(0.1) - &out.y).amax() < 1e-15);
        let mid = out.dense.eval(0.05);
        assert!((mid[0] - 0.05f64.cos()).abs() < 1e-9);
    }
}
