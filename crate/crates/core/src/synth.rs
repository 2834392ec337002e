//! Gait synthesis by single shooting and the simulation-in-the-loop search
//! over essential constraints.

use std::cmp::Ordering;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ClosedLoop, Controller};
use crate::error::{Error, Result};
use crate::gait::{BezierSet, EssentialConstraints, GaitSpec, DEFAULT_DEGREE};
use crate::hybrid::{guard_value, impact_map, solve_guard_configuration};
use crate::invariance::{certify, BarrierParams, InvarianceCertificate};
use crate::model::{RobotModel, State};
use crate::poincare::{find_fixed_point, FixedPointOptions, ReducedChart};
use crate::sim::{rollout, step, SimOptions, STABILITY_STEPS};

/// Forward torso lean of the initial guess (rad).
const TORSO_LEAN: f64 = 0.1;
/// Peak swing-knee flexion added mid-step in the initial guess (rad).
const KNEE_BUMP: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBounds {
    pub step_length: (f64, f64),
    pub step_duration: (f64, f64),
    pub step_height: (f64, f64),
}

impl Default for SearchBounds {
    fn default() -> Self {
        SearchBounds { step_length: (0.3, 0.5), step_duration: (0.4, 0.6), step_height: (0.03, 0.08) }
    }
}

impl SearchBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("step_length", self.step_length),
            ("step_duration", self.step_duration),
            ("step_height", self.step_height),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("empty search bound for {name}")));
            }
        }
        Ok(())
    }

    fn clamp(&self, e: EssentialConstraints) -> EssentialConstraints {
        EssentialConstraints::planar(
            e.step_length.clamp(self.step_length.0, self.step_length.1),
            e.step_duration.clamp(self.step_duration.0, self.step_duration.1),
            e.step_height.clamp(self.step_height.0, self.step_height.1),
        )
    }
}

pub fn default_essential() -> EssentialConstraints {
    EssentialConstraints::planar(0.4, 0.5, 0.05)
}

/// Checks the targets against the kinematic reach of the model.
pub fn check_workspace(model: &RobotModel, e: &EssentialConstraints) -> Result<()> {
    let l = model.leg_length();
    let fail = |what: String| Err(Error::SynthesisFailed(format!("outside workspace: {what}")));
    if e.step_width != 0.0 {
        return fail(format!("step width {} on a planar model", e.step_width));
    }
    if !(e.step_length > 0.05 && e.step_length <= 1.5 * l) {
        return fail(format!("step length {} m not in (0.05, {:.3}]", e.step_length, 1.5 * l));
    }
    if !(e.step_height >= 0.0 && e.step_height <= 0.5 * l) {
        return fail(format!("step height {} m not in [0, {:.3}]", e.step_height, 0.5 * l));
    }
    if !(e.step_duration >= 0.1 && e.step_duration <= 2.0) {
        return fail(format!("step duration {} s not in [0.1, 2]", e.step_duration));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub degree: usize,
    pub starts: usize,
    pub seed: u64,
    pub max_iterations: usize,
    /// Target for the norm of the full residual vector.
    pub tolerance: f64,
    /// Scale of the random perturbation applied to starts after the first.
    pub start_spread: f64,
    /// Weight of the optional torque-squared tiebreak; 0 disables it.
    pub torque_weight: f64,
    /// Fraction of `u_max` the nominal torque may reach; 1 or more disables
    /// the limit.
    pub torque_headroom: f64,
    pub controller: Controller,
    pub sim: SimOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            degree: DEFAULT_DEGREE,
            starts: 5,
            seed: 0,
            max_iterations: 60,
            tolerance: 1e-9,
            start_spread: 0.05,
            torque_weight: 0.0,
            torque_headroom: 0.8,
            controller: Controller::default(),
            sim: SimOptions::default(),
        }
    }
}

/// Residual breakdown of one shooting evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResiduals {
    /// Weighted norm of `P(x-) - x-`.
    pub periodicity: f64,
    pub step_length: f64,
    pub step_height: f64,
    /// `(T_I - T) / T`.
    pub timing: f64,
    /// Post-impact output error norms `|y(0+)|`, `|ydot(0+)|`.
    pub hzd_position: f64,
    pub hzd_velocity: f64,
    /// Peak nominal torque beyond the headroom, as a fraction of `u_max`.
    #[serde(default)]
    pub torque_excess: f64,
}

impl SynthesisResiduals {
    pub fn hzd(&self) -> f64 {
        self.hzd_position.max(self.hzd_velocity)
    }

    fn acceptable(&self) -> bool {
        self.hzd() <= 1e-6
            && self.step_length.abs() <= 1e-3
            && self.step_height.abs() <= 1e-3
            && self.timing.abs() <= 0.02
            && self.periodicity <= 1e-6
            && self.torque_excess <= 1e-3
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisReport {
    pub gait: GaitSpec,
    pub residuals: SynthesisResiduals,
    pub iterations: usize,
    pub start: usize,
}

/// Number of trailing Bézier columns sharing the terminal posture.
const TERMINAL_HOLD: usize = 4;
const MIN_DEGREE: usize = TERMINAL_HOLD + 2;

/// Squared-residual ratio above which an accepted step counts as stalled.
const STALL_RATIO: f64 = 0.98;

fn terminal_offset(m: usize, v: usize) -> usize {
    m * (v - TERMINAL_HOLD - 1)
}

fn rate_offset(m: usize, v: usize) -> usize {
    m * (v - TERMINAL_HOLD)
}

/// Decision vector layout: Bézier columns `2..=v-4` and `v`, column by
/// column, then the rates of the unactuated coordinates at the pre-impact
/// state. The last four columns coincide, so the desired outputs reach the
/// terminal posture with zero velocity, acceleration and jerk. Late impacts
/// then see no jump in the commanded motion and early impacts truncate a
/// trajectory that is already flat to third order.
struct Shooting<'a> {
    model: Arc<RobotModel>,
    essential: EssentialConstraints,
    degree: usize,
    opts: &'a SynthesisOptions,
    /// Guess for the guard coordinate.
    guard_guess: f64,
}

struct Evaluation {
    residual: DVector<f64>,
    parts: SynthesisResiduals,
    gait: GaitSpec,
}

impl Shooting<'_> {
    fn m(&self) -> usize {
        self.model.n_actuated()
    }

    /// Full coefficient matrix: interior columns and the terminal column from
    /// the decision vector, the held columns equal to the terminal one.
    fn coefficients(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let (m, v) = (self.m(), self.degree);
        let mut coeffs = DMatrix::zeros(m, v + 1);
        for c in 2..=v - TERMINAL_HOLD {
            coeffs.set_column(c, &p.rows((c - 2) * m, m));
        }
        let last = p.rows(terminal_offset(m, v), m);
        for c in v + 1 - TERMINAL_HOLD..=v {
            coeffs.set_column(c, &last);
        }
        coeffs
    }

    /// Pre-impact state and the full gait encoded by the decision vector.
    /// The outputs end at rest on the terminal posture; the first two columns
    /// follow from the impact of the resulting pre-impact state.
    fn build(&self, p: &DVector<f64>) -> Result<(State, GaitSpec)> {
        let model = &self.model;
        let (m, v, n) = (self.m(), self.degree, model.n_q());
        let period = self.essential.step_duration;
        let mut coeffs = self.coefficients(p);
        let mut q = DVector::zeros(n);
        let mut qd = DVector::zeros(n);
        for (j, &i) in model.actuated_indices.iter().enumerate() {
            q[i] = coeffs[(j, v)];
        }
        for (j, &i) in model.unactuated_indices().iter().enumerate() {
            qd[i] = p[rate_offset(m, v) + j];
        }
        q[model.guard_coordinate()] = self.guard_guess;
        let q = solve_guard_configuration(model, &q)?;
        let x_minus = State::new(q, qd);
        let g = guard_value(model, &x_minus);
        if !(g.hdot < 0.0) {
            return Err(Error::SynthesisFailed(format!("terminal swing foot not descending (hdot = {:.3e})", g.hdot)));
        }
        let post = impact_map(model, &x_minus)?.post_state;
        for (j, &i) in model.actuated_indices.iter().enumerate() {
            coeffs[(j, 0)] = post.q[i];
            coeffs[(j, 1)] = post.q[i] + period * post.qd[i] / v as f64;
        }
        let gait = GaitSpec::new(model, BezierSet::new(coeffs)?, self.essential, Some(x_minus.clone()))?;
        Ok((x_minus, gait))
    }

    fn evaluate(&self, p: &DVector<f64>) -> Result<Evaluation> {
        let model = &self.model;
        let (x_minus, gait) = self.build(p)?;
        let period = gait.step_duration;
        let field = ClosedLoop::new(model.clone(), Arc::new(gait.clone()), self.opts.controller);
        let s = step(&field, &x_minus, &self.opts.sim)?;

        let n = model.n_q();
        let mut per = s.x_next.to_vector() - x_minus.to_vector();
        for i in n..2 * n {
            per[i] *= period;
        }
        let mid = s
            .segment
            .state_at(0.5 * period)
            .ok_or_else(|| Error::SynthesisFailed("step ended before mid-stance".into()))?;
        let length_err = model.swing_foot(&x_minus.q).x - self.essential.step_length;
        let height_err = model.swing_foot(&mid.q).y - self.essential.step_height;
        let timing = (s.duration - period) / period;

        let post = &s.impact.post_state;
        let out = crate::gait::virtual_constraints(model, &gait, post, 0.0);
        let u_max = self.opts.controller.u_max;
        let torque_excess = if self.opts.torque_headroom < 1.0 {
            let mut peak = 0.0f64;
            for (t, y) in s.segment.times.iter().zip(&s.segment.states) {
                peak = peak.max(field.eval(*t, &State::from_vector(y))?.torque.u.amax());
            }
            (peak / u_max - self.opts.torque_headroom).max(0.0)
        } else {
            0.0
        };
        let parts = SynthesisResiduals {
            periodicity: per.norm(),
            step_length: length_err,
            step_height: height_err,
            timing,
            hzd_position: out.y.norm(),
            hzd_velocity: out.ydot.norm(),
            torque_excess,
        };
        let mut r: Vec<f64> = per.iter().copied().collect();
        r.extend([length_err, height_err, timing, torque_excess]);
        if self.opts.torque_weight > 0.0 {
            let mut acc = 0.0;
            for (t, y) in s.segment.times.iter().zip(&s.segment.states) {
                if let Ok(f) = field.eval(*t, &State::from_vector(y)) {
                    acc += f.torque.u.norm_squared();
                }
            }
            let mean = acc / s.segment.times.len() as f64;
            r.push((self.opts.torque_weight * mean).sqrt());
        }
        Ok(Evaluation { residual: DVector::from_vec(r), parts, gait })
    }

    fn jacobian(&self, p: &DVector<f64>, r0: &DVector<f64>) -> Result<DMatrix<f64>> {
        let cols: Vec<Result<DVector<f64>>> = (0..p.len())
            .into_par_iter()
            .map(|i| {
                let h = 1e-6 * p[i].abs().max(1.0);
                let mut pp = p.clone();
                pp[i] += h;
                Ok((self.evaluate(&pp)?.residual - r0) / h)
            })
            .collect();
        let mut jac = DMatrix::zeros(r0.len(), p.len());
        for (i, c) in cols.into_iter().enumerate() {
            jac.set_column(i, &c?);
        }
        Ok(jac)
    }

    /// Levenberg-Marquardt from `p0`. Returns the final point, its evaluation
    /// and the number of Jacobian evaluations.
    fn solve(&self, p0: DVector<f64>) -> Result<(DVector<f64>, Evaluation, usize)> {
        let mut p = p0;
        let mut ev = self.evaluate(&p)?;
        let mut cost = ev.residual.norm_squared();
        let mut lambda = 1e-3;
        let mut iterations = 0;
        while ev.residual.norm() > self.opts.tolerance && iterations < self.opts.max_iterations {
            iterations += 1;
            let jac = self.jacobian(&p, &ev.residual)?;
            let jtj = jac.transpose() * &jac;
            let g = jac.transpose() * &ev.residual;
            let scale = DVector::from_fn(p.len(), |i, _| jtj[(i, i)].max(1e-9));
            let mut improved = false;
            let mut stalled = false;
            for _ in 0..12 {
                let mut a = jtj.clone();
                for i in 0..p.len() {
                    a[(i, i)] += lambda * scale[i];
                }
                let Some(delta) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial = &p + &delta;
                match self.evaluate(&trial) {
                    Ok(e) if e.residual.norm_squared() < cost => {
                        stalled = e.parts.acceptable() && e.residual.norm_squared() > STALL_RATIO * cost;
                        p = trial;
                        cost = e.residual.norm_squared();
                        ev = e;
                        lambda = (lambda / 3.0).max(1e-12);
                        improved = true;
                        break;
                    }
                    _ => lambda *= 4.0,
                }
            }
            if !improved || stalled {
                break;
            }
        }
        Ok((p, ev, iterations))
    }
}

/// Heuristic decision vector: straight legs symmetric about the stance foot
/// at impact, forward torso lean, stance leg rotating forward and a swing
/// knee that flexes mid-step.
fn heuristic_params(model: &RobotModel, e: &EssentialConstraints, degree: usize) -> Result<DVector<f64>> {
    if model.n_q() != 5 || model.actuated_indices != [1, 2, 3, 4] {
        return Err(Error::InvalidModel(
            "synthesis needs a five-link walker with actuated hips and knees".into(),
        ));
    }
    let l = model.leg_length();
    let phi = (0.5 * e.step_length / l).clamp(-1.0, 1.0).asin();
    let theta = TORSO_LEAN;
    let end = DVector::from_vec(vec![phi - theta, 0.0, -phi - theta, 0.0]);
    let start = DVector::from_vec(vec![-phi - theta, 0.0, phi - theta, 0.0]);
    let v = degree as f64;
    let mut p = DVector::zeros(rate_offset(4, degree) + 1);
    for c in 2..=degree - TERMINAL_HOLD {
        let s = c as f64 / v;
        let bump = (std::f64::consts::PI * s).sin();
        let mut col = (1.0 - s) * &start + s * &end;
        col[3] += KNEE_BUMP * bump;
        col[1] += 0.25 * KNEE_BUMP * bump;
        p.rows_mut((c - 2) * 4, 4).copy_from(&col);
    }
    p.rows_mut(terminal_offset(4, degree), 4).copy_from(&end);
    p[rate_offset(4, degree)] = 2.0 * phi / e.step_duration;
    Ok(p)
}

/// Picks the pre-impact body rate whose step duration is closest to the
/// target, leaving the rest of the guess untouched.
fn tune_body_rate(sh: &Shooting, p: &mut DVector<f64>) {
    let last = p.len() - 1;
    let target = sh.essential.step_duration;
    let mut best = (f64::INFINITY, p[last]);
    for k in 1..=16 {
        let rate = 0.25 * k as f64;
        let mut trial = p.clone();
        trial[last] = rate;
        if let Ok(ev) = sh.evaluate(&trial) {
            let err = (ev.parts.timing * target).abs() + ev.parts.periodicity;
            if err < best.0 {
                best = (err, rate);
            }
        }
    }
    p[last] = best.1;
}

/// Decision vector reproducing an existing gait.
fn params_from_gait(model: &RobotModel, gait: &GaitSpec) -> Result<DVector<f64>> {
    let x = gait
        .fixed_point
        .as_ref()
        .ok_or_else(|| Error::InvalidGait("gait carries no pre-impact state".into()))?;
    let (m, v) = (gait.bezier.outputs(), gait.bezier.degree());
    let unact = model.unactuated_indices();
    if v < MIN_DEGREE {
        return Err(Error::InvalidGait(format!("refinement needs Bézier degree {MIN_DEGREE} or more")));
    }
    let mut p = DVector::zeros(rate_offset(m, v) + unact.len());
    for c in 2..=v - TERMINAL_HOLD {
        p.rows_mut((c - 2) * m, m).copy_from(&gait.bezier.coeffs.column(c));
    }
    p.rows_mut(terminal_offset(m, v), m).copy_from(&gait.bezier.coeffs.column(v));
    for (j, &i) in unact.iter().enumerate() {
        p[rate_offset(m, v) + j] = x.qd[i];
    }
    Ok(p)
}

fn shooting<'a>(model: &RobotModel, e: &EssentialConstraints, opts: &'a SynthesisOptions) -> Result<Shooting<'a>> {
    check_workspace(model, e)?;
    if opts.degree < MIN_DEGREE {
        return Err(Error::InvalidGait(format!("synthesis needs Bézier degree {MIN_DEGREE} or more")));
    }
    Ok(Shooting {
        model: Arc::new(model.clone()),
        essential: *e,
        degree: opts.degree,
        opts,
        guard_guess: TORSO_LEAN,
    })
}

/// The unoptimized gait the solver starts from. Useful as a plausible but
/// non-periodic gait.
pub fn initial_gait(model: &RobotModel, e: &EssentialConstraints) -> GaitSpec {
    let opts = SynthesisOptions::default();
    let sh = shooting(model, e, &opts).expect("essential constraints within workspace");
    let mut p = heuristic_params(model, e, opts.degree).expect("five-link model");
    tune_body_rate(&sh, &mut p);
    sh.build(&p).expect("heuristic gait").1
}

/// Synthesizes a periodic gait meeting the essential constraints. The HZD
/// condition holds by construction; the solver drives the periodicity,
/// step-length, step-height and timing residuals to zero.
pub fn synthesize_gait(model: &RobotModel, e: &EssentialConstraints, opts: &SynthesisOptions) -> Result<SynthesisReport> {
    let sh = shooting(model, e, opts)?;
    let mut base = heuristic_params(model, e, opts.degree)?;
    tune_body_rate(&sh, &mut base);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, opts.start_spread).expect("finite spread");
    let m = model.n_actuated();
    // terminal columns set the impact state; only the interior is perturbed
    let interior = terminal_offset(m, opts.degree);
    let mut best: Option<(SynthesisResiduals, f64)> = None;
    for start in 0..opts.starts.max(1) {
        let mut p0 = base.clone();
        if start > 0 {
            for v in p0.rows_mut(0, interior).iter_mut() {
                *v += normal.sample(&mut rng);
            }
            let last = p0.len() - 1;
            p0[last] += normal.sample(&mut rng);
        }
        let (_, ev, iterations) = match sh.solve(p0) {
            Ok(v) => v,
            Err(err) => {
                log::debug!("start {start} failed: {err}");
                continue;
            }
        };
        let norm = ev.residual.norm();
        if ev.parts.acceptable() {
            return Ok(SynthesisReport { gait: ev.gait, residuals: ev.parts, iterations, start });
        }
        if best.as_ref().is_none_or(|b| norm < b.1) {
            best = Some((ev.parts, norm));
        }
    }
    Err(Error::SynthesisFailed(match best {
        Some((r, _)) => format!(
            "no start converged; best residuals: periodicity {:.3e}, step length {:.3e} m, step height {:.3e} m, timing {:.3e}",
            r.periodicity, r.step_length, r.step_height, r.timing
        ),
        None => "no start produced a complete step".into(),
    }))
}

/// Re-solves starting from an existing gait's coefficients.
pub fn refine_gait(model: &RobotModel, gait: &GaitSpec, opts: &SynthesisOptions) -> Result<SynthesisReport> {
    let sh = Shooting {
        degree: gait.bezier.degree(),
        ..shooting(model, &gait.essential, opts)?
    };
    let sh = Shooting { guard_guess: gait.fixed_point.as_ref().map_or(TORSO_LEAN, |x| x.q[model.guard_coordinate()]), ..sh };
    let p0 = params_from_gait(model, gait)?;
    let (_, ev, iterations) = sh.solve(p0)?;
    if !ev.parts.acceptable() {
        return Err(Error::SynthesisFailed(format!("refinement did not converge (residual {:.3e})", ev.residual.norm())));
    }
    Ok(SynthesisReport { gait: ev.gait, residuals: ev.parts, iterations, start: 0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitScore {
    pub gait_id: u64,
    pub stable: bool,
    pub steps_taken: usize,
    /// Present exactly when the gait is stable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Robustness,
    StabilityOnly,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robustness" => Ok(Objective::Robustness),
            "stability_only" => Ok(Objective::StabilityOnly),
            _ => Err(Error::Config(format!("unknown objective '{s}'"))),
        }
    }
}

/// Preference order: `Less` means `a` is preferred.
pub fn rank(a: &GaitScore, b: &GaitScore) -> Ordering {
    b.stable
        .cmp(&a.stable)
        .then_with(|| {
            if a.stable {
                let (ra, rb) = (a.r_star.unwrap_or(0.0), b.r_star.unwrap_or(0.0));
                rb.total_cmp(&ra)
            } else {
                b.steps_taken.cmp(&a.steps_taken)
            }
        })
        .then_with(|| a.gait_id.cmp(&b.gait_id))
}

/// Ranking that ignores robustness and prefers more steps taken.
pub fn rank_stability_only(a: &GaitScore, b: &GaitScore) -> Ordering {
    b.steps_taken.cmp(&a.steps_taken).then_with(|| a.gait_id.cmp(&b.gait_id))
}

pub fn rank_with(objective: Objective, a: &GaitScore, b: &GaitScore) -> Ordering {
    match objective {
        Objective::Robustness => rank(a, b),
        Objective::StabilityOnly => rank_stability_only(a, b),
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOutcome {
    pub score: GaitScore,
    pub certificate: Option<InvarianceCertificate>,
}

/// Rolls the gait out from its stored pre-impact state; a gait surviving
/// `threshold` steps has its fixed point found and certified.
pub fn score_gait(
    model: &RobotModel,
    gait: &GaitSpec,
    gait_id: u64,
    controller: &Controller,
    params: &BarrierParams,
    seed: u64,
    threshold: usize,
    sim: &SimOptions,
) -> Result<ScoreOutcome> {
    gait.validate(model)?;
    let x0 = gait
        .fixed_point
        .clone()
        .ok_or_else(|| Error::InvalidGait("gait carries no pre-impact state".into()))?;
    let model = Arc::new(model.clone());
    let field = ClosedLoop::new(model.clone(), Arc::new(gait.clone()), *controller);
    let unstable = |steps| ScoreOutcome {
        score: GaitScore { gait_id, stable: false, steps_taken: steps, r_star: None, spectral_radius: None },
        certificate: None,
    };
    let r = rollout(&field, &x0, threshold, sim)?;
    if r.steps_taken < threshold || r.termination != crate::sim::Termination::Completed {
        return Ok(unstable(r.steps_taken));
    }
    let Ok(fp) = find_fixed_point(&field, &x0, sim, &FixedPointOptions::default()) else {
        return Ok(unstable(r.steps_taken));
    };
    let chart = ReducedChart::with_default_indices(model, field.gait.clone(), fp.x_star.clone())?;
    let cert = certify(&field, &chart, &fp, params, seed, &gait_id.to_string(), sim)?;
    Ok(ScoreOutcome {
        score: GaitScore {
            gait_id,
            stable: true,
            steps_taken: r.steps_taken,
            r_star: Some(cert.r_star),
            spectral_radius: Some(fp.spectral_radius),
        },
        certificate: Some(cert),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub iterations: usize,
    pub gaits_per_iteration: usize,
    pub bounds: SearchBounds,
    pub seed: u64,
    /// Initial proposal spread as a fraction of each bound's width.
    pub sigma: f64,
    pub stability_threshold: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iterations: 10,
            gaits_per_iteration: 5,
            bounds: SearchBounds::default(),
            seed: 0,
            sigma: 0.25,
            stability_threshold: STABILITY_STEPS,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.gaits_per_iteration < 2 {
            return Err(Error::Config("loop needs iterations >= 1 and gaits_per_iteration >= 2".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        self.bounds.validate()
    }
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub gait_id: u64,
    pub essential: EssentialConstraints,
    /// File the gait was written to, if any.
    #[serde(default)]
    pub gait_file: Option<String>,
    /// Hex digest of the Bézier coefficients, for spotting duplicates.
    pub beta_hash: Option<String>,
    pub score: GaitScore,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub record: HistoryRecord,
    pub gait: Option<GaitSpec>,
}

/// Per-run knobs shared by every candidate evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub synthesis: SynthesisOptions,
    pub barrier: BarrierParams,
    pub sim: SimOptions,
}

/// Hooks for persistence. `on_candidate` is called in history order.
pub trait LoopObserver {
    fn on_candidate(&mut self, candidate: &Candidate) -> Result<()>;
}

impl LoopObserver for () {
    fn on_candidate(&mut self, _: &Candidate) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoopResult {
    pub best: Option<Candidate>,
    pub history: Vec<HistoryRecord>,
}

fn latin_hypercube(bounds: &SearchBounds, n: usize, rng: &mut ChaCha8Rng) -> Vec<EssentialConstraints> {
    let dims = [bounds.step_length, bounds.step_duration, bounds.step_height];
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (lo, hi) in dims {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            strata.swap(i, j);
        }
        columns.push(
            strata
                .into_iter()
                .map(|s| {
                    let u: f64 = rng.random();
                    lo + (hi - lo) * (s as f64 + u) / n as f64
                })
                .collect(),
        );
    }
    (0..n).map(|i| EssentialConstraints::planar(columns[0][i], columns[1][i], columns[2][i])).collect()
}

fn gaussian_proposals(
    bounds: &SearchBounds,
    center: &EssentialConstraints,
    sigma: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<EssentialConstraints> {
    let mut draw = |c: f64, (lo, hi): (f64, f64)| {
        let sd = (sigma * (hi - lo)).max(1e-12);
        c + Normal::new(0.0, sd).expect("finite sigma").sample(rng)
    };
    (0..n)
        .map(|_| {
            let e = EssentialConstraints::planar(
                draw(center.step_length, bounds.step_length),
                draw(center.step_duration, bounds.step_duration),
                draw(center.step_height, bounds.step_height),
            );
            bounds.clamp(e)
        })
        .collect()
}

pub fn beta_hash(gait: &GaitSpec) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in gait.bezier.coeffs.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn evaluate_candidate(
    model: &RobotModel,
    e: EssentialConstraints,
    iteration: usize,
    gait_id: u64,
    seed: u64,
    threshold: usize,
    settings: &EvalSettings,
) -> Candidate {
    let synth_opts = SynthesisOptions { seed, ..settings.synthesis };
    let failed = |msg: String| Candidate {
        record: HistoryRecord {
            iteration,
            gait_id,
            essential: e,
            gait_file: None,
            beta_hash: None,
            score: GaitScore { gait_id, stable: false, steps_taken: 0, r_star: None, spectral_radius: None },
            seed,
            failure: Some(msg),
            config_hash: None,
        },
        gait: None,
    };
    let report = match synthesize_gait(model, &e, &synth_opts) {
        Ok(r) => r,
        Err(err) => return failed(err.to_string()),
    };
    let controller = settings.synthesis.controller;
    match score_gait(model, &report.gait, gait_id, &controller, &settings.barrier, seed, threshold, &settings.sim) {
        Ok(s) => Candidate {
            record: HistoryRecord {
                iteration,
                gait_id,
                essential: e,
                gait_file: None,
                beta_hash: Some(beta_hash(&report.gait)),
                score: s.score,
                seed,
                failure: None,
                config_hash: None,
            },
            gait: Some(report.gait),
        },
        Err(err) => {
            let mut c = failed(err.to_string());
            c.record.beta_hash = Some(beta_hash(&report.gait));
            c.gait = Some(report.gait);
            c
        }
    }
}

fn candidate_seed(loop_seed: u64, gait_id: u64) -> u64 {
    loop_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(gait_id.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Draws, synthesizes, scores and ranks candidates for `config.iterations`
/// iterations. Records in `resume` replace evaluation for the leading
/// candidates; every random draw is still made so the continuation matches an
/// uninterrupted run.
pub fn optimize_loop(
    model: &RobotModel,
    config: &LoopConfig,
    objective: Objective,
    settings: &EvalSettings,
    resume: &[HistoryRecord],
    observer: &mut dyn LoopObserver,
) -> Result<LoopResult> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history: Vec<HistoryRecord> = Vec::new();
    let mut best: Option<Candidate> = None;
    let mut sigma = config.sigma;
    let mut next_id: u64 = 0;
    for iteration in 1..=config.iterations {
        let mut redrawn = false;
        loop {
            let proposals = match &best {
                None => latin_hypercube(&config.bounds, config.gaits_per_iteration, &mut rng),
                Some(b) => gaussian_proposals(
                    &config.bounds,
                    &b.record.essential,
                    sigma,
                    config.gaits_per_iteration,
                    &mut rng,
                ),
            };
            let ids: Vec<u64> = (next_id..next_id + proposals.len() as u64).collect();
            next_id += proposals.len() as u64;
            let candidates: Vec<Candidate> = proposals
                .into_par_iter()
                .zip(ids.into_par_iter())
                .map(|(e, id)| {
                    if let Some(rec) = resume.iter().find(|r| r.gait_id == id) {
                        return Candidate { record: rec.clone(), gait: None };
                    }
                    let seed = candidate_seed(config.seed, id);
                    evaluate_candidate(model, e, iteration, id, seed, config.stability_threshold, settings)
                })
                .collect();
            let all_failed = candidates.iter().all(|c| c.record.failure.is_some());
            for c in candidates {
                observer.on_candidate(&c)?;
                history.push(c.record.clone());
                let better = match &best {
                    None => true,
                    Some(b) => rank_with(objective, &c.record.score, &b.record.score) == Ordering::Less,
                };
                if better && c.record.failure.is_none() {
                    best = Some(c);
                }
            }
            if all_failed && !redrawn {
                log::warn!("iteration {iteration}: every candidate failed, redrawing with doubled spread");
                sigma *= 2.0;
                redrawn = true;
                continue;
            }
            if redrawn {
                sigma *= 0.5;
            }
            break;
        }
        sigma *= 0.7;
    }
    Ok(LoopResult { best, history })
}
