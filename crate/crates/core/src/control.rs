//! Output-tracking control and the resulting closed-loop vector field.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gait::{virtual_constraints, GaitSpec};
use crate::model::{RobotModel, State};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingGains {
    pub kp: f64,
    pub kd: f64,
    pub epsilon: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        TrackingGains { kp: 100.0, kd: 20.0, epsilon: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// Input-output feedback linearization with a PD outer loop.
    #[default]
    Fblin,
    /// Independent joint PD on the output errors.
    Pd,
}

impl std::str::FromStr for ControllerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fblin" => Ok(ControllerMode::Fblin),
            "pd" => Ok(ControllerMode::Pd),
            _ => Err(Error::Config(format!("unknown controller mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Controller {
    pub gains: TrackingGains,
    pub mode: ControllerMode,
    /// Per-joint torque limit (N m).
    pub u_max: f64,
}

impl Default for Controller {
    fn default() -> Self {
        Controller { gains: TrackingGains::default(), mode: ControllerMode::Fblin, u_max: 150.0 }
    }
}

impl Controller {
    pub fn validate(&self) -> Result<()> {
        let g = self.gains;
        if !(g.kp > 0.0 && g.kd > 0.0 && g.epsilon > 0.0 && self.u_max > 0.0) {
            return Err(Error::Config("controller gains, epsilon and u_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Torque {
    pub u: DVector<f64>,
    pub saturated: bool,
}

/// Torque driving the virtual constraints to zero,
/// `ydd = -(kd/eps) yd - (kp/eps^2) y` when unsaturated.
pub fn tracking_torque(
    model: &RobotModel,
    gait: &GaitSpec,
    ctrl: &Controller,
    x: &State,
    t: f64,
) -> Result<Torque> {
    Ok(torque_and_accel(model, gait, ctrl, x, t)?.0)
}

fn torque_and_accel(
    model: &RobotModel,
    gait: &GaitSpec,
    ctrl: &Controller,
    x: &State,
    t: f64,
) -> Result<(Torque, DVector<f64>)> {
    let m = model.n_actuated();
    let (dh, db) = model.affine_terms(x)?;
    if m == 0 {
        return Ok((Torque { u: DVector::zeros(0), saturated: false }, -dh));
    }
    let out = virtual_constraints(model, gait, x, t);
    let TrackingGains { kp, kd, epsilon } = ctrl.gains;
    let v = -(kd / epsilon) * &out.ydot - (kp / (epsilon * epsilon)) * &out.y;
    let mut u = match ctrl.mode {
        ControllerMode::Fblin => {
            let idx = &model.actuated_indices;
            let decoupling = db.select_rows(idx.iter());
            let bias = DVector::from_fn(m, |i, _| dh[idx[i]]);
            let rhs = v + bias + &out.yd_ddot;
            let lu = decoupling.clone().lu();
            let sv = decoupling.singular_values();
            if sv.min() <= sv.max() * 1e-12 {
                return Err(Error::ControllerSingular { t });
            }
            lu.solve(&rhs).ok_or(Error::ControllerSingular { t })?
        }
        ControllerMode::Pd => v,
    };
    let mut saturated = false;
    for ui in u.iter_mut() {
        if ui.abs() > ctrl.u_max {
            *ui = ui.clamp(-ctrl.u_max, ctrl.u_max);
            saturated = true;
        }
    }
    let qdd = &db * &u - dh;
    Ok((Torque { u, saturated }, qdd))
}

/// Closed-loop vector field `xdot = f(x) + g(x) u(x, t)` for one gait and
/// controller. Time is measured from the start of the current step.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub model: Arc<RobotModel>,
    pub gait: Arc<GaitSpec>,
    pub controller: Controller,
}

/// One field evaluation.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub xdot: DVector<f64>,
    pub torque: Torque,
}

impl ClosedLoop {
    pub fn new(model: Arc<RobotModel>, gait: Arc<GaitSpec>, controller: Controller) -> Self {
        ClosedLoop { model, gait, controller }
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn eval(&self, t: f64, x: &State) -> Result<FieldSample> {
        let (torque, qdd) = torque_and_accel(&self.model, &self.gait, &self.controller, x, t)?;
        let n = x.q.len();
        let xdot = DVector::from_fn(2 * n, |i, _| if i < n { x.qd[i] } else { qdd[i - n] });
        Ok(FieldSample { xdot, torque })
    }

    /// Field on the stacked state vector.
    pub fn xdot(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.eval(t, &State::from_vector(x))?.xdot)
    }
}

pub fn closed_loop_field(model: Arc<RobotModel>, gait: Arc<GaitSpec>, controller: Controller) -> ClosedLoop {
    ClosedLoop::new(model, gait, controller)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::{BezierSet, EssentialConstraints};
    use nalgebra::DMatrix;

    fn test_gait(model: &RobotModel) -> GaitSpec {
        let coeffs = DMatrix::from_fn(4, 8, |i, j| {
            let base = [0.15, 0.05, -0.45, 0.1][i];
            base + 0.05 * ((j as f64) * 0.7 + i as f64).sin()
        });
        GaitSpec::new(model, BezierSet::new(coeffs).unwrap(), EssentialConstraints::planar(0.4, 0.5, 0.05), None)
            .unwrap()
    }

    fn on_trajectory(model: &RobotModel, gait: &GaitSpec, t: f64) -> State {
        let (yd, ydd, _) = gait.desired(t);
        let mut x = State::zeros(model.n_q());
        x.q[0] = 0.05;
        x.qd[0] = 0.2;
        for i in 0..4 {
            x.q[i + 1] = yd[i];
            x.qd[i + 1] = ydd[i];
        }
        x
    }

    #[test]
    fn zero_error_gives_zero_output_acceleration() {
        let model = Arc::new(RobotModel::five_link());
        let gait = Arc::new(test_gait(&model));
        let ctrl = Controller { u_max: 1e6, ..Controller::default() };
        let field = ClosedLoop::new(model.clone(), gait.clone(), ctrl);
        for &t in &[0.0, 0.1, 0.33] {
            let x = on_trajectory(&model, &gait, t);
            let s = field.eval(t, &x).unwrap();
            let (_, _, yd_ddot) = gait.desired(t);
            for i in 0..4 {
                assert!((s.xdot[5 + i + 1] - yd_ddot[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn feedback_linearization_is_exact() {
        let model = Arc::new(RobotModel::five_link());
        let gait = Arc::new(test_gait(&model));
        let ctrl = Controller { u_max: 1e6, ..Controller::default() };
        let field = ClosedLoop::new(model.clone(), gait.clone(), ctrl);
        let t = 0.2;
        let mut x = on_trajectory(&model, &gait, t);
        x.q[2] += 0.05;
        x.qd[3] -= 0.3;
        let s = field.eval(t, &x).unwrap();
        let out = virtual_constraints(&model, &gait, &x, t);
        let commanded = -20.0 * &out.ydot - 100.0 * &out.y;
        for i in 0..4 {
            let ydd = s.xdot[5 + i + 1] - out.yd_ddot[i];
            assert!((ydd - commanded[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn saturation_bound_is_respected() {
        let model = Arc::new(RobotModel::five_link());
        let gait = Arc::new(test_gait(&model));
        let ctrl = Controller { u_max: 5.0, ..Controller::default() };
        let mut x = on_trajectory(&model, &gait, 0.1);
        x.q[1] += 1.0;
        let tq = tracking_torque(&model, &gait, &ctrl, &x, 0.1).unwrap();
        assert!(tq.saturated);
        assert!(tq.u.iter().all(|u| u.abs() <= 5.0));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = Arc::new(RobotModel::five_link());
        let gait = Arc::new(test_gait(&model));
        let field = ClosedLoop::new(model.clone(), gait.clone(), Controller::default());
        let x = on_trajectory(&model, &gait, 0.2);
        let a = field.eval(0.2, &x).unwrap().xdot;
        let b = field.eval(0.2, &x).unwrap().xdot;
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn pd_mode_produces_finite_torque() {
        let model = Arc::new(RobotModel::five_link());
        let gait = Arc::new(test_gait(&model));
        let ctrl = Controller { mode: ControllerMode::Pd, ..Controller::default() };
        let mut x = on_trajectory(&model, &gait, 0.2);
        x.q[1] += 0.1;
        let tq = tracking_torque(&model, &gait, &ctrl, &x, 0.2).unwrap();
        assert!((tq.u[0] + 10.0).abs() < 1e-12);
    }

    #[test]
    fn passive_model_has_no_torque() {
        let model = Arc::new(RobotModel::compass());
        let gait = Arc::new(GaitSpec::passive(&model, 0.7, None).unwrap());
        let field = ClosedLoop::new(model.clone(), gait, Controller::default());
        let x = State::new(DVector::from_vec(vec![0.1, -0.1]), DVector::from_vec(vec![-0.5, 0.3]));
        let s = field.eval(0.0, &x).unwrap();
        assert_eq!(s.torque.u.len(), 0);
        let expected = model.continuous_dynamics(&x, &DVector::zeros(0)).unwrap();
        assert_eq!(s.xdot, expected);
    }
}
