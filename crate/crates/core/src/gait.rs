//! Bézier-parameterized desired outputs, time phasing and virtual
//! constraints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::DomainGraph;
use crate::model::{RobotModel, State};

pub const GAIT_FORMAT: &str = "gaitspec-v1";
pub const DEFAULT_DEGREE: usize = 7;

/// Desired outputs as Bézier polynomials in the phase, one row per output.
#[derive(Debug, Clone, PartialEq)]
pub struct BezierSet {
    pub coeffs: DMatrix<f64>,
}

impl BezierSet {
    pub fn new(coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.ncols() < 4 {
            return Err(Error::InvalidGait(format!(
                "Bézier degree must be at least 3, got {}",
                coeffs.ncols() as isize - 1
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidGait("non-finite Bézier coefficient".into()));
        }
        Ok(BezierSet { coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.ncols() - 1
    }

    pub fn outputs(&self) -> usize {
        self.coeffs.nrows()
    }

    /// Value (order 0) or derivative w.r.t. the phase (orders 1, 2).
    pub fn eval(&self, tau: f64, order: usize) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InputDomain(format!("phase {tau} outside [0, 1]")));
        }
        if order > 2 {
            return Err(Error::InputDomain(format!("derivative order {order} not supported")));
        }
        Ok(self.eval_unchecked(tau, order))
    }

    pub(crate) fn eval_unchecked(&self, tau: f64, order: usize) -> DVector<f64> {
        let v = self.degree();
        if order > v {
            return DVector::zeros(self.outputs());
        }
        // forward differences of the control points
        let mut pts = self.coeffs.clone();
        let mut scale = 1.0;
        for k in 0..order {
            let cols = pts.ncols();
            let diff = pts.columns(1, cols - 1) - pts.columns(0, cols - 1);
            pts = diff;
            scale *= (v - k) as f64;
        }
        let basis = bernstein(pts.ncols() - 1, tau);
        scale * pts * basis
    }
}

/// Bernstein basis of degree `n` at `tau`.
pub fn bernstein(n: usize, tau: f64) -> DVector<f64> {
    let mut b = DVector::zeros(n + 1);
    let s = 1.0 - tau;
    let mut binom = 1.0;
    for k in 0..=n {
        b[k] = binom * tau.powi(k as i32) * s.powi((n - k) as i32);
        binom = binom * (n - k) as f64 / (k + 1) as f64;
    }
    b
}

/// Phase `clamp(t / T, 0, 1)`.
pub fn phasing(t: f64, period: f64) -> Result<f64> {
    if !(period > 0.0) {
        return Err(Error::InputDomain(format!("step duration must be positive, got {period}")));
    }
    Ok((t / period).clamp(0.0, 1.0))
}

/// Phase rate: `1/T` up to and including `t = T`, zero once the phase is
/// held at its terminal value.
pub fn phasing_rate(t: f64, period: f64) -> f64 {
    if t <= period {
        1.0 / period
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssentialConstraints {
    pub step_length: f64,
    pub step_duration: f64,
    pub step_width: f64,
    pub step_height: f64,
}

impl EssentialConstraints {
    pub fn planar(step_length: f64, step_duration: f64, step_height: f64) -> Self {
        EssentialConstraints { step_length, step_duration, step_width: 0.0, step_height }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaitSpec {
    pub bezier: BezierSet,
    pub step_duration: f64,
    pub essential: EssentialConstraints,
    pub model_name: String,
    /// Pre-impact state of the designed periodic orbit.
    pub fixed_point: Option<State>,
    pub domain_graph: Option<DomainGraph>,
    /// Hash of the run configuration that produced the gait.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GaitDoc {
    format: String,
    model_name: String,
    degree: usize,
    outputs: usize,
    /// Row-major, `outputs x (degree + 1)`.
    coeffs: Vec<f64>,
    step_duration: f64,
    essential: EssentialConstraints,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixed_point: Option<State>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain_graph: Option<DomainGraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// Outputs and their time derivatives, plus the desired acceleration used by
/// the tracking controller.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputError {
    pub y: DVector<f64>,
    pub ydot: DVector<f64>,
    pub yd_ddot: DVector<f64>,
}

impl GaitSpec {
    pub fn new(
        model: &RobotModel,
        bezier: BezierSet,
        essential: EssentialConstraints,
        fixed_point: Option<State>,
    ) -> Result<Self> {
        let gait = GaitSpec {
            step_duration: essential.step_duration,
            bezier,
            essential,
            model_name: model.name.clone(),
            fixed_point,
            domain_graph: Some(DomainGraph::single_domain(model)),
            config_hash: None,
        };
        gait.validate(model)?;
        Ok(gait)
    }

    /// A gait with no outputs, for passive walkers.
    pub fn passive(model: &RobotModel, step_duration: f64, fixed_point: Option<State>) -> Result<Self> {
        let essential = EssentialConstraints::planar(0.0, step_duration, 0.0);
        let bezier = BezierSet { coeffs: DMatrix::zeros(0, DEFAULT_DEGREE + 1) };
        GaitSpec::new(model, bezier, essential, fixed_point)
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        if !(self.step_duration > 0.0) {
            return Err(Error::InvalidGait("step duration must be positive".into()));
        }
        if self.essential.step_duration != self.step_duration {
            return Err(Error::InvalidGait("essential step duration differs from gait duration".into()));
        }
        if self.bezier.outputs() != model.n_actuated() {
            return Err(Error::InvalidGait(format!(
                "gait has {} outputs, model '{}' has {} actuators",
                self.bezier.outputs(),
                model.name,
                model.n_actuated()
            )));
        }
        if self.bezier.degree() < 3 {
            return Err(Error::InvalidGait("Bézier degree must be at least 3".into()));
        }
        if let Some(x) = &self.fixed_point {
            if x.dim() != model.n_q() || x.qd.len() != model.n_q() {
                return Err(Error::InvalidGait("fixed point has wrong dimension".into()));
            }
        }
        Ok(())
    }

    /// Desired outputs and their first two time derivatives at time `t`.
    pub fn desired(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let period = self.step_duration;
        let tau = (t / period).clamp(0.0, 1.0);
        let rate = phasing_rate(t, period);
        let b = &self.bezier;
        let yd = b.eval_unchecked(tau, 0);
        if rate == 0.0 {
            let m = b.outputs();
            return (yd, DVector::zeros(m), DVector::zeros(m));
        }
        (yd, b.eval_unchecked(tau, 1) * rate, b.eval_unchecked(tau, 2) * (rate * rate))
    }

    pub fn to_json(&self) -> Result<String> {
        let m = self.bezier.outputs();
        let cols = self.bezier.coeffs.ncols();
        let coeffs = (0..m).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| self.bezier.coeffs[(i, j)]);
        let doc = GaitDoc {
            format: GAIT_FORMAT.into(),
            model_name: self.model_name.clone(),
            degree: self.bezier.degree(),
            outputs: m,
            coeffs: coeffs.collect(),
            step_duration: self.step_duration,
            essential: self.essential,
            fixed_point: self.fixed_point.clone(),
            domain_graph: self.domain_graph.clone(),
            config_hash: self.config_hash.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GaitDoc = serde_json::from_str(s)?;
        if doc.format != GAIT_FORMAT {
            return Err(Error::InvalidGait(format!("unsupported format '{}'", doc.format)));
        }
        let cols = doc.degree + 1;
        if doc.coeffs.len() != doc.outputs * cols {
            return Err(Error::InvalidGait(format!(
                "expected {} coefficients, found {}",
                doc.outputs * cols,
                doc.coeffs.len()
            )));
        }
        let coeffs = DMatrix::from_row_slice(doc.outputs, cols, &doc.coeffs);
        let bezier = if doc.outputs == 0 { BezierSet { coeffs } } else { BezierSet::new(coeffs)? };
        if !(doc.step_duration > 0.0) || doc.essential.step_duration != doc.step_duration {
            return Err(Error::InvalidGait("inconsistent step duration".into()));
        }
        Ok(GaitSpec {
            bezier,
            step_duration: doc.step_duration,
            essential: doc.essential,
            model_name: doc.model_name,
            fixed_point: doc.fixed_point,
            domain_graph: doc.domain_graph,
            config_hash: doc.config_hash,
        })
    }
}

/// Virtual constraints `y = y_a(x) - y_d(tau(t))` with `y_a` the actuated
/// joint coordinates.
pub fn virtual_constraints(model: &RobotModel, gait: &GaitSpec, x: &State, t: f64) -> OutputError {
    let (yd, yd_dot, yd_ddot) = gait.desired(t);
    let idx = &model.actuated_indices;
    let y = DVector::from_fn(idx.len(), |i, _| x.q[idx[i]] - yd[i]);
    let ydot = DVector::from_fn(idx.len(), |i, _| x.qd[idx[i]] - yd_dot[i]);
    OutputError { y, ydot, yd_ddot }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set() -> BezierSet {
        BezierSet::new(DMatrix::from_fn(3, 8, |i, j| ((i + 1) as f64 * 0.3 * j as f64).sin())).unwrap()
    }

    #[test]
    fn phasing_endpoints_and_clamp() {
        assert_eq!(phasing(0.0, 0.5).unwrap(), 0.0);
        assert_eq!(phasing(0.5, 0.5).unwrap(), 1.0);
        assert_eq!(phasing(0.75, 0.5).unwrap(), 1.0);
        assert!(phasing(0.1, 0.0).is_err());
        assert!(phasing(0.1, -1.0).is_err());
    }

    #[test]
    fn constant_coefficients_give_constant_curve() {
        let b = BezierSet::new(DMatrix::from_element(2, 8, 0.7)).unwrap();
        for k in 0..=20 {
            let tau = k as f64 / 20.0;
            assert!((b.eval(tau, 0).unwrap().add_scalar(-0.7)).amax() < 1e-14);
            assert!(b.eval(tau, 1).unwrap().amax() < 1e-13);
        }
    }

    #[test]
    fn endpoints_interpolate_first_and_last_columns() {
        let b = sample_set();
        assert_eq!(b.eval(0.0, 0).unwrap(), b.coeffs.column(0).into_owned());
        assert!((b.eval(1.0, 0).unwrap() - b.coeffs.column(7)).amax() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let b = sample_set();
        let h = 1e-5;
        for k in 1..=50 {
            let tau = k as f64 / 51.0;
            let fd1 = (b.eval(tau + h, 0).unwrap() - b.eval(tau - h, 0).unwrap()) / (2.0 * h);
            let fd2 = (b.eval(tau + h, 1).unwrap() - b.eval(tau - h, 1).unwrap()) / (2.0 * h);
            assert!((fd1 - b.eval(tau, 1).unwrap()).amax() < 1e-6);
            assert!((fd2 - b.eval(tau, 2).unwrap()).amax() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_phase_is_rejected() {
        let b = sample_set();
        assert!(b.eval(-0.01, 0).is_err());
        assert!(b.eval(1.01, 1).is_err());
    }

    #[test]
    fn degree_below_three_rejected() {
        assert!(BezierSet::new(DMatrix::zeros(2, 3)).is_err());
    }

    proptest! {
        #[test]
        fn bernstein_partition_of_unity(tau in 0.0f64..=1.0, n in 0usize..12) {
            prop_assert!((bernstein(n, tau).sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn evaluation_is_linear_in_coefficients(tau in 0.0f64..=1.0, a in -3.0f64..3.0, order in 0usize..3) {
            let b1 = sample_set();
            let b2 = BezierSet::new(DMatrix::from_fn(3, 8, |i, j| (i as f64 - j as f64) * 0.1)).unwrap();
            let sum = BezierSet::new(&b1.coeffs + a * &b2.coeffs).unwrap();
            let lhs = sum.eval(tau, order).unwrap();
            let rhs = b1.eval(tau, order).unwrap() + a * b2.eval(tau, order).unwrap();
            prop_assert!((lhs - rhs).amax() < 1e-12 * (1.0 + 50.0 * a.abs()));
        }

        #[test]
        fn phasing_monotone_and_idempotent(t1 in -1.0f64..3.0, t2 in -1.0f64..3.0, period in 0.1f64..2.0) {
            let (a, b) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let pa = phasing(a, period).unwrap();
            prop_assert!(pa <= phasing(b, period).unwrap());
            prop_assert_eq!(phasing(pa * period, period).unwrap(), pa);
        }
    }

    #[test]
    fn on_trajectory_outputs_vanish_and_shift_with_coefficients() {
        let model = RobotModel::five_link();
        let b = BezierSet::new(DMatrix::from_fn(4, 8, |i, j| 0.1 * (i as f64 + 1.0) * (j as f64 * 0.4).cos())).unwrap();
        let gait = GaitSpec::new(&model, b, EssentialConstraints::planar(0.4, 0.5, 0.05), None).unwrap();
        let t = 0.2;
        let (yd, yd_dot, _) = gait.desired(t);
        let mut x = State::zeros(5);
        x.q[0] = 0.05;
        x.qd[0] = -0.3;
        for i in 0..4 {
            x.q[i + 1] = yd[i];
            x.qd[i + 1] = yd_dot[i];
        }
        let out = virtual_constraints(&model, &gait, &x, t);
        assert!(out.y.amax() < 1e-15 && out.ydot.amax() < 1e-15);

        let mut shifted = gait.clone();
        for j in 0..8 {
            shifted.bezier.coeffs[(2, j)] += 0.25;
        }
        let out2 = virtual_constraints(&model, &shifted, &x, t);
        assert!((out2.y[2] + 0.25).abs() < 1e-14);
        assert!(out2.y[0].abs() < 1e-15);
    }

    #[test]
    fn gait_json_round_trip_and_schema() {
        let model = RobotModel::five_link();
        let b = BezierSet::new(DMatrix::from_fn(4, 8, |i, j| i as f64 * 0.01 + j as f64 * 0.1)).unwrap();
        let fp = State::new(DVector::from_element(5, 0.1), DVector::from_element(5, -0.2));
        let gait = GaitSpec::new(&model, b, EssentialConstraints::planar(0.4, 0.5, 0.05), Some(fp)).unwrap();
        let text = gait.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["format"], GAIT_FORMAT);
        assert_eq!(v["degree"], 7);
        assert_eq!(GaitSpec::from_json(&text).unwrap(), gait);

        let bad = text.replace(GAIT_FORMAT, "gaitspec-v0");
        assert!(GaitSpec::from_json(&bad).is_err());
    }

    #[test]
    fn output_count_must_match_actuators() {
        let model = RobotModel::five_link();
        let b = BezierSet::new(DMatrix::zeros(3, 8)).unwrap();
        assert!(GaitSpec::new(&model, b, EssentialConstraints::planar(0.4, 0.5, 0.05), None).is_err());
    }
}
