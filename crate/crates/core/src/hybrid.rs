//! Discrete half of the hybrid system: guard, plastic impact and relabeling.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RobotModel, State};

/// Guard membership tolerance on the swing-foot height (m).
pub const GUARD_TOL: f64 = 1e-8;

/// Condition-number estimate above which the impact system is singular.
pub const IMPACT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingDirection {
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardSpec {
    /// Name of the kinematic output whose zero level defines the guard.
    pub height_fn: String,
    pub crossing_direction: CrossingDirection,
    /// Crossings with the swing foot behind the stance foot are ignored.
    pub require_swing_ahead: bool,
}

impl GuardSpec {
    pub fn for_model(model: &RobotModel) -> Self {
        GuardSpec {
            height_fn: "swing_foot_height".into(),
            crossing_direction: CrossingDirection::Descending,
            require_swing_ahead: model.guard_requires_swing_ahead(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetKind {
    PlasticImpactRelabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub guard: GuardSpec,
    pub reset: ResetKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

/// Directed graph of continuous domains and their transitions. Only the
/// single-domain self-loop is built, but the structure admits more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGraph {
    pub domains: Vec<Domain>,
    pub edges: Vec<Edge>,
}

impl DomainGraph {
    pub fn single_domain(model: &RobotModel) -> Self {
        DomainGraph {
            domains: vec![Domain {
                name: "single_support".into(),
                guard: GuardSpec::for_model(model),
                reset: ResetKind::PlasticImpactRelabel,
            }],
            edges: vec![Edge { from: 0, to: 0 }],
        }
    }

    pub fn is_cycle(&self) -> bool {
        !self.domains.is_empty()
            && self.edges.len() == self.domains.len()
            && self.edges.iter().all(|e| e.from < self.domains.len() && e.to < self.domains.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardValue {
    pub h: f64,
    pub hdot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactOutcome {
    pub pre_state: State,
    /// State after the velocity jump and relabeling.
    pub post_state: State,
    /// Ground impulse on the new stance foot (N s).
    pub impulse: Vector2<f64>,
    /// Joint velocities after the jump, before relabeling.
    pub qd_pre_relabel: DVector<f64>,
    /// Velocity of the old stance foot right after impact.
    pub liftoff_velocity: Vector2<f64>,
    /// `J_c qd+` in extended coordinates; zero up to round-off.
    pub constraint_residual: Vector2<f64>,
}

pub fn guard_value(model: &RobotModel, x: &State) -> GuardValue {
    let foot = model.swing_foot(&x.q);
    let jac = model.swing_foot_jacobian(&x.q);
    let hdot = (jac.row(1) * &x.qd)[0];
    GuardValue { h: foot.y, hdot }
}

/// Whether `x` lies on the switching surface: `|h| <= tol`, `hdot < 0` and,
/// for walkers that need it, the swing foot ahead of the stance foot.
pub fn on_guard(model: &RobotModel, x: &State, tol: f64) -> bool {
    let g = guard_value(model, x);
    g.h.abs() <= tol && g.hdot < 0.0 && guard_active(model, &x.q)
}

pub fn guard_active(model: &RobotModel, q: &DVector<f64>) -> bool {
    !model.guard_requires_swing_ahead() || model.swing_foot(q).x > 0.0
}

pub fn relabel(model: &RobotModel, x: &State) -> State {
    let r = model.relabel_matrix();
    State::new(r * &x.q, r * &x.qd)
}

/// Plastic impact of the swing foot followed by relabeling.
///
/// Solves `[De, -Jc'; Jc, 0] [qd+; dF] = [De qd-; 0]` in extended
/// coordinates `(p_x, p_z, q)` with the pre-impact stance foot at rest.
pub fn impact_map(model: &RobotModel, x_minus: &State) -> Result<ImpactOutcome> {
    if !x_minus.is_finite() {
        return Err(Error::InputDomain("pre-impact state is not finite".into()));
    }
    let g = guard_value(model, x_minus);
    if g.h.abs() > GUARD_TOL || g.hdot >= 0.0 {
        return Err(Error::InputDomain(format!(
            "pre-impact state not on guard (h = {:.3e}, hdot = {:.3e})",
            g.h, g.hdot
        )));
    }
    Ok(impact_unchecked(model, x_minus)?)
}

pub(crate) fn impact_unchecked(model: &RobotModel, x_minus: &State) -> Result<ImpactOutcome> {
    let n = model.n_q();
    let q = &x_minus.q;
    let de = model.extended_mass_matrix(q);
    let mut jc = DMatrix::zeros(2, n + 2);
    jc[(0, 0)] = 1.0;
    jc[(1, 1)] = 1.0;
    jc.view_mut((0, 2), (2, n)).copy_from(&model.swing_foot_jacobian(q));

    let dim = n + 4;
    let mut block = DMatrix::zeros(dim, dim);
    block.view_mut((0, 0), (n + 2, n + 2)).copy_from(&de);
    block.view_mut((0, n + 2), (n + 2, 2)).copy_from(&(-jc.transpose()));
    block.view_mut((n + 2, 0), (2, n + 2)).copy_from(&jc);

    let singular = || Error::ImpactSingular { q: q.iter().copied().collect() };
    let sv = block.clone().singular_values();
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > IMPACT_CONDITION_LIMIT {
        return Err(singular());
    }

    let mut qde_minus = DVector::zeros(n + 2);
    qde_minus.rows_mut(2, n).copy_from(&x_minus.qd);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n + 2).copy_from(&(&de * &qde_minus));
    let sol = block.lu().solve(&rhs).ok_or_else(singular)?;

    let qde_plus = sol.rows(0, n + 2).into_owned();
    let impulse = Vector2::new(sol[n + 2], sol[n + 3]);
    let residual = &jc * &qde_plus;
    let qd_plus = qde_plus.rows(2, n).into_owned();
    let r = model.relabel_matrix();
    let post_state = State::new(r * q, r * &qd_plus);
    Ok(ImpactOutcome {
        pre_state: x_minus.clone(),
        post_state,
        impulse,
        qd_pre_relabel: qd_plus,
        liftoff_velocity: Vector2::new(qde_plus[0], qde_plus[1]),
        constraint_residual: Vector2::new(residual[0], residual[1]),
    })
}

/// Newton solve of the guard coordinate so that the swing foot touches the
/// ground, keeping every other coordinate of `q_guess` fixed.
pub fn solve_guard_configuration(model: &RobotModel, q_guess: &DVector<f64>) -> Result<DVector<f64>> {
    let k = model.guard_coordinate();
    let mut q = q_guess.clone();
    for _ in 0..50 {
        let h = model.swing_foot(&q).y;
        if h.abs() <= 1e-13 {
            return Ok(q);
        }
        let dh = model.swing_foot_jacobian(&q)[(1, k)];
        if dh.abs() < 1e-9 {
            break;
        }
        let mut step = -h / dh;
        if step.abs() > 0.3 {
            step = 0.3 * step.signum();
        }
        q[k] += step;
    }
    let h = model.swing_foot(&q).y;
    if h.abs() <= GUARD_TOL * 1e-2 {
        Ok(q)
    } else {
        Err(Error::Reconstruction(format!("cannot place swing foot on the ground (h = {h:.3e})")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_guard_state(model: &RobotModel, rng: &mut ChaCha8Rng) -> State {
        loop {
            let n = model.n_q();
            let mut q = DVector::from_fn(n, |_, _| rng.random_range(-0.6..0.6));
            if model.n_q() == 2 {
                q[0] = rng.random_range(0.05..0.5);
                q[1] = -q[0];
            }
            let Ok(q) = solve_guard_configuration(model, &q) else { continue };
            let qd = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let x = State::new(q, qd);
            if on_guard(model, &x, GUARD_TOL) {
                return x;
            }
        }
    }

    #[test]
    fn standing_posture_has_both_feet_down() {
        let model = RobotModel::compass();
        let g = guard_value(&model, &State::zeros(2));
        assert!(g.h.abs() < 1e-15);
    }

    #[test]
    fn lift_off_is_not_a_guard_point() {
        let model = RobotModel::compass();
        let q = DVector::from_vec(vec![0.2, -0.2]);
        // swing foot rising
        let mut x = State::new(q, DVector::from_vec(vec![0.0, -1.0]));
        let g = guard_value(&model, &x);
        assert!(g.h.abs() < 1e-12);
        assert!(g.hdot > 0.0);
        assert!(!on_guard(&model, &x, GUARD_TOL));
        x.qd[1] = 1.0;
        assert!(on_guard(&model, &x, GUARD_TOL));
    }

    #[test]
    fn impact_without_momentum_transfer() {
        let model = RobotModel::five_link();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_guard_state(&model, &mut rng);
        // project a velocity onto the null space of the foot Jacobian
        let jac = model.swing_foot_jacobian(&x.q);
        let jjt = (&jac * jac.transpose()).try_inverse().unwrap();
        let proj = DMatrix::identity(5, 5) - jac.transpose() * jjt * &jac;
        let qd = proj * DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4]);
        let x0 = State::new(x.q.clone(), qd);
        assert!((&jac * &x0.qd).amax() < 1e-12);
        let out = impact_unchecked(&model, &x0).unwrap();
        assert!(out.impulse.norm() < 1e-10);
        let expected = model.relabel_matrix() * &x0.qd;
        assert!((out.post_state.qd - expected).amax() < 1e-12);
        assert_eq!(out.post_state.q, model.relabel_matrix() * &x0.q);
    }

    #[test]
    fn impact_properties_on_random_guard_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in [RobotModel::compass(), RobotModel::five_link()] {
            for _ in 0..200 {
                let x = random_guard_state(&model, &mut rng);
                let out = impact_map(&model, &x).unwrap();
                assert_eq!(out.post_state.q, model.relabel_matrix() * &x.q);
                assert!(out.constraint_residual.amax() <= 1e-10);
                let ke_before = model.kinetic_energy(&x.q, &x.qd);
                let ke_after = model.kinetic_energy(&out.post_state.q, &out.post_state.qd);
                assert!(ke_after <= ke_before + 1e-10);
            }
        }
    }

    #[test]
    fn impact_is_homogeneous_in_velocity() {
        let model = RobotModel::five_link();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = random_guard_state(&model, &mut rng);
            let a: f64 = rng.random_range(0.1..5.0);
            let scaled = State::new(x.q.clone(), a * &x.qd);
            let p1 = impact_map(&model, &x).unwrap().post_state.qd;
            let p2 = impact_map(&model, &scaled).unwrap().post_state.qd;
            assert!((p2 - a * p1).amax() < 1e-10 * (1.0 + a));
        }
    }

    #[test]
    fn impact_is_locally_lipschitz() {
        let model = RobotModel::five_link();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_guard_state(&model, &mut rng);
        let base = impact_map(&model, &x).unwrap().post_state.to_vector();
        let mut worst: f64 = 0.0;
        for &eps in &[1e-7, 1e-6, 1e-5] {
            for k in 0..5 {
                let mut qd = x.qd.clone();
                qd[k] += eps;
                let y = impact_map(&model, &State::new(x.q.clone(), qd)).unwrap().post_state.to_vector();
                worst = worst.max((y - &base).norm() / eps);
            }
        }
        assert!(worst < 10.0, "difference quotient {worst}");
    }

    #[test]
    fn rejects_states_off_the_guard() {
        let model = RobotModel::compass();
        let x = State::new(DVector::from_vec(vec![0.2, 0.1]), DVector::from_vec(vec![0.0, -1.0]));
        assert!(matches!(impact_map(&model, &x), Err(Error::InputDomain(_))));
    }

    #[test]
    fn relabel_is_an_isometric_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for model in [RobotModel::compass(), RobotModel::five_link()] {
            let n = model.n_q();
            let x = State::new(
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            );
            let rx = relabel(&model, &x);
            assert_eq!(relabel(&model, &rx), x);
            assert!((rx.to_vector().norm() - x.to_vector().norm()).abs() < 1e-15);
        }
        let model = RobotModel::compass();
        let x = State::new(DVector::from_vec(vec![0.1, -0.3]), DVector::from_vec(vec![1.0, 2.0]));
        let rx = relabel(&model, &x);
        assert_eq!(rx.q.as_slice(), &[-0.3, 0.1]);
        assert_eq!(rx.qd.as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn single_domain_graph_is_a_cycle() {
        let g = DomainGraph::single_domain(&RobotModel::five_link());
        assert!(g.is_cycle());
        assert_eq!(g.edges, vec![Edge { from: 0, to: 0 }]);
    }
}
