//! Event-detecting simulation of the closed-loop hybrid system.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::ClosedLoop;
use crate::error::{Error, Result};
use crate::hybrid::{guard_active, guard_value, impact_map, on_guard, GuardValue, ImpactOutcome, GUARD_TOL};
use crate::model::{RobotModel, State};
use crate::ode::{dopri_step, error_norm, DenseSegment, StepControl, Tolerances};

/// Default number of steps a gait must survive to count as stable.
pub const STABILITY_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FallCriteria {
    /// Torso pitch magnitude limit (rad).
    pub torso_limit: f64,
    /// Minimum hip height as a fraction of leg length.
    pub hip_height_fraction: f64,
    /// State norm treated as divergence.
    pub divergence: f64,
}

impl Default for FallCriteria {
    fn default() -> Self {
        FallCriteria { torso_limit: 1.2, hip_height_fraction: 0.4, divergence: 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Largest integration step (s).
    pub h_max: f64,
    /// A step is abandoned after this multiple of the gait step duration.
    pub t_max_factor: f64,
    pub fall: FallCriteria,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            rtol: 1e-9,
            atol: 1e-11,
            h_max: 0.02,
            t_max_factor: 3.0,
            fall: FallCriteria::default(),
        }
    }
}

impl SimOptions {
    pub fn tolerances(&self) -> Tolerances {
        Tolerances { rtol: self.rtol, atol: self.atol }
    }
}

/// One continuous phase. Times are local (zero at the segment start);
/// `t_start` places the segment on the rollout clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub dense: Vec<DenseSegment>,
    pub guard_hit: bool,
}

impl Segment {
    fn new(t_start: f64, x0: DVector<f64>) -> Self {
        Segment { t_start, times: vec![0.0], states: vec![x0], dense: Vec::new(), guard_hit: false }
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn end_state(&self) -> State {
        State::from_vector(self.states.last().expect("segment has an initial state"))
    }

    /// Interpolated state at local time `t` within the segment.
    pub fn state_at(&self, t: f64) -> Option<State> {
        if t < 0.0 || t > self.duration() {
            return None;
        }
        if self.dense.is_empty() {
            return Some(State::from_vector(&self.states[0]));
        }
        let idx = self.dense.partition_point(|d| d.t1() < t).min(self.dense.len() - 1);
        Some(State::from_vector(&self.dense[idx].eval(t)))
    }
}

fn fall_reason(model: &RobotModel, x: &DVector<f64>, crit: &FallCriteria) -> Option<String> {
    if x.iter().any(|v| !v.is_finite()) {
        return Some("non-finite state".into());
    }
    if x.norm() > crit.divergence {
        return Some("state diverged".into());
    }
    let n = model.n_q();
    let q = x.rows(0, n).into_owned();
    if let Some(i) = model.torso_index() {
        let pitch = model.link_angles(&q)[i];
        if pitch.abs() > crit.torso_limit {
            return Some(format!("torso pitch {pitch:.3} rad beyond limit"));
        }
    }
    let hip = model.hip(&q);
    if hip.y < crit.hip_height_fraction * model.leg_length() {
        return Some(format!("hip height {:.3} m too low", hip.y));
    }
    None
}

fn guard_of(model: &RobotModel, y: &DVector<f64>) -> GuardValue {
    guard_value(model, &State::from_vector(y))
}

/// Integrates from `x0` (local time 0) until the guard is crossed with the
/// swing foot descending, the robot falls, or `t_max` elapses. The returned
/// error, if any, explains why the segment did not reach the guard.
pub fn flow_traced(field: &ClosedLoop, x0: &State, t_max: f64, opts: &SimOptions) -> (Segment, Option<Error>) {
    let model = field.model();
    let y0 = x0.to_vector();
    let mut seg = Segment::new(0.0, y0.clone());
    if let Some(reason) = fall_reason(model, &y0, &opts.fall) {
        return (seg, Some(Error::Fell { t: 0.0, reason }));
    }
    if on_guard(model, x0, GUARD_TOL) {
        seg.guard_hit = true;
        return (seg, None);
    }
    let f = |t: f64, y: &DVector<f64>| field.xdot(t, y);
    let tol = opts.tolerances();
    let mut t = 0.0;
    let mut y = y0;
    let mut k1 = match f(t, &y) {
        Ok(k) => k,
        Err(e) => return (seg, Some(e)),
    };
    let mut h_prev = guard_of(model, &y).h;
    let mut ctl = StepControl::new(1e-3f64.min(opts.h_max), opts.h_max);
    let mut rejected = 0usize;
    loop {
        if t >= t_max {
            return (seg, Some(Error::GuardMissed { t_max }));
        }
        let h = ctl.h.min(t_max - t).max(1e-12);
        let out = match dopri_step(&f, t, &y, &k1, h) {
            Ok(o) => o,
            Err(e) => return (seg, Some(e)),
        };
        let err = error_norm(&out.err, &y, &out.y, tol);
        if !ctl.update(err) || !err.is_finite() {
            rejected += 1;
            if !err.is_finite() {
                ctl.h = h * 0.2;
            }
            if ctl.h < ctl.h_min || rejected > 100_000 {
                return (seg, Some(Error::Fell { t, reason: "step size underflow".into() }));
            }
            continue;
        }
        let t_new = t + h;
        let g_new = guard_of(model, &out.y);
        if h_prev > 0.0 && g_new.h <= 0.0 {
            let (t_hit, y_hit) = locate_crossing(&f, model, t, &y, &k1, &out.dense, t_new);
            let q_hit = y_hit.rows(0, model.n_q()).into_owned();
            if guard_active(model, &q_hit) {
                if let Some(reason) = fall_reason(model, &y_hit, &opts.fall) {
                    push(&mut seg, t_hit, y_hit, out.dense);
                    return (seg, Some(Error::Fell { t: t_hit, reason }));
                }
                push(&mut seg, t_hit, y_hit, out.dense);
                seg.guard_hit = true;
                return (seg, None);
            }
        }
        if let Some(reason) = fall_reason(model, &out.y, &opts.fall) {
            push(&mut seg, t_new, out.y, out.dense);
            return (seg, Some(Error::Fell { t: t_new, reason }));
        }
        h_prev = g_new.h;
        t = t_new;
        y = out.y.clone();
        k1 = out.f_new;
        push(&mut seg, t, out.y, out.dense);
    }
}

fn push(seg: &mut Segment, t: f64, y: DVector<f64>, dense: DenseSegment) {
    seg.times.push(t);
    seg.states.push(y);
    seg.dense.push(dense);
}

/// Brackets the guard crossing on the dense output, then polishes it with
/// Newton iterations on freshly integrated states so the returned state
/// carries full integration accuracy.
fn locate_crossing<F>(
    f: &F,
    model: &RobotModel,
    t0: f64,
    y0: &DVector<f64>,
    k1: &DVector<f64>,
    dense: &DenseSegment,
    t1: f64,
) -> (f64, DVector<f64>)
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let (mut lo, mut hi) = (t0, t1);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if guard_of(model, &dense.eval(mid)).h > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut t_hit = 0.5 * (lo + hi);
    let mut best = (f64::INFINITY, t1, dense.eval(t1));
    for _ in 0..8 {
        let y = if t_hit > t0 {
            match dopri_step(f, t0, y0, k1, t_hit - t0) {
                Ok(o) => o.y,
                Err(_) => dense.eval(t_hit),
            }
        } else {
            y0.clone()
        };
        let g = guard_of(model, &y);
        if g.h.abs() < best.0 {
            best = (g.h.abs(), t_hit, y);
        }
        if g.h.abs() <= 1e-13 || g.hdot >= 0.0 {
            break;
        }
        t_hit = (t_hit - g.h / g.hdot).clamp(t0, t1);
    }
    (best.1, best.2)
}

pub fn flow(field: &ClosedLoop, x0: &State, t_max: f64, opts: &SimOptions) -> Result<Segment> {
    match flow_traced(field, x0, t_max, opts) {
        (seg, None) => Ok(seg),
        (_, Some(e)) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub impact: ImpactOutcome,
    pub segment: Segment,
    pub x_next: State,
    pub duration: f64,
}

fn step_traced(field: &ClosedLoop, x_minus: &State, opts: &SimOptions) -> Result<(ImpactOutcome, Segment, Option<Error>)> {
    let model = field.model();
    let impact = impact_map(model, x_minus)?;
    let t_max = opts.t_max_factor * field.gait.step_duration;
    let (seg, err) = flow_traced(field, &impact.post_state, t_max, opts);
    let err = match err {
        None if seg.duration() == 0.0 => {
            Some(Error::Fell { t: 0.0, reason: "swing foot does not lift off after impact".into() })
        }
        other => other,
    };
    Ok((impact, seg, err))
}

/// One step of the hybrid system: impact from a pre-impact state, then flow
/// to the next guard crossing.
pub fn step(field: &ClosedLoop, x_minus: &State, opts: &SimOptions) -> Result<StepResult> {
    let (impact, segment, err) = step_traced(field, x_minus, opts)?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(StepResult { x_next: segment.end_state(), duration: segment.duration(), impact, segment })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Fell,
    GuardMissed,
    ControllerSingular,
}

#[derive(Debug, Clone)]
pub struct RolloutSegment {
    pub segment: Segment,
    /// Impact that immediately preceded this segment.
    pub impact: Option<ImpactOutcome>,
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub segments: Vec<RolloutSegment>,
    pub steps_taken: usize,
    pub termination: Termination,
    pub detail: Option<String>,
}

impl RolloutResult {
    pub fn duration(&self) -> f64 {
        self.segments.last().map(|s| s.segment.t_start + s.segment.duration()).unwrap_or(0.0)
    }

    pub fn final_state(&self) -> Option<State> {
        self.segments.last().map(|s| s.segment.end_state())
    }

    /// Pre-impact states in order of occurrence.
    pub fn guard_states(&self) -> Vec<State> {
        self.segments.iter().filter_map(|s| s.impact.as_ref().map(|i| i.pre_state.clone())).collect()
    }
}

fn termination_of(err: &Error) -> Termination {
    match err {
        Error::GuardMissed { .. } => Termination::GuardMissed,
        Error::ControllerSingular { .. } => Termination::ControllerSingular,
        _ => Termination::Fell,
    }
}

/// Simulates up to `max_steps` impacts. A start state on the guard begins
/// with an impact; any other state begins with a flow. The rollout completes
/// once the flow after the last counted impact reaches the guard again.
pub fn rollout(field: &ClosedLoop, x0: &State, max_steps: usize, opts: &SimOptions) -> Result<RolloutResult> {
    if max_steps == 0 {
        return Err(Error::InputDomain("max_steps must be at least 1".into()));
    }
    let model = field.model();
    let mut result = RolloutResult { segments: Vec::new(), steps_taken: 0, termination: Termination::Completed, detail: None };
    let mut clock = 0.0;
    let mut x = x0.clone();
    let mut pending_impact = on_guard(model, x0, GUARD_TOL);
    if !pending_impact {
        let (mut seg, err) = flow_traced(field, &x, opts.t_max_factor * field.gait.step_duration, opts);
        seg.t_start = clock;
        clock += seg.duration();
        x = seg.end_state();
        result.segments.push(RolloutSegment { segment: seg, impact: None });
        if let Some(e) = err {
            result.termination = termination_of(&e);
            result.detail = Some(e.to_string());
            return Ok(result);
        }
        pending_impact = true;
    }
    while pending_impact && result.steps_taken < max_steps {
        let (impact, mut seg, err) = match step_traced(field, &x, opts) {
            Ok(v) => v,
            Err(e) => {
                result.termination = termination_of(&e);
                result.detail = Some(e.to_string());
                return Ok(result);
            }
        };
        result.steps_taken += 1;
        seg.t_start = clock;
        clock += seg.duration();
        x = seg.end_state();
        result.segments.push(RolloutSegment { segment: seg, impact: Some(impact) });
        if let Some(e) = err {
            result.termination = termination_of(&e);
            result.detail = Some(e.to_string());
            return Ok(result);
        }
    }
    Ok(result)
}

/// Writes a 1 kHz resampled trajectory as CSV with columns
/// `t, q0.., qd0.., u0.., h, step`, where `step` counts the impacts before
/// the row.
pub fn write_trajectory_csv<W: Write>(field: &ClosedLoop, rollout: &RolloutResult, mut out: W) -> Result<usize> {
    let model = field.model();
    let n = model.n_q();
    let m = model.n_actuated();
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("q{i}")));
    header.extend((0..n).map(|i| format!("qd{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.push("h".into());
    header.push("step".into());
    writeln!(out, "{}", header.join(","))?;
    let total = rollout.duration();
    let rows = (total * 1000.0 + 1e-9).floor() as usize + 1;
    let mut seg_idx = 0;
    for k in 0..rows {
        let tg = k as f64 / 1000.0;
        while seg_idx + 1 < rollout.segments.len() {
            let s = &rollout.segments[seg_idx].segment;
            if tg > s.t_start + s.duration() {
                seg_idx += 1;
            } else {
                break;
            }
        }
        let Some(rs) = rollout.segments.get(seg_idx) else { break };
        let local = (tg - rs.segment.t_start).clamp(0.0, rs.segment.duration());
        let Some(x) = rs.segment.state_at(local) else { continue };
        let u = field.eval(local, &x).map(|s| s.torque.u).unwrap_or_else(|_| DVector::from_element(m, f64::NAN));
        let h = guard_value(model, &x).h;
        let mut row = vec![format!("{tg:.3}")];
        row.extend(x.q.iter().chain(x.qd.iter()).chain(u.iter()).map(|v| format!("{v:.12e}")));
        row.push(format!("{h:.12e}"));
        let impacts = rollout.segments[..=seg_idx].iter().filter(|s| s.impact.is_some()).count();
        row.push(impacts.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(rows)
}
