//! Discrete-time barrier certificates for the reduced step-to-step map.
//!
//! The candidate invariant set is the sublevel set
//! `I = { x : H(x) >= 0 }` with `H(x) = r - |x - x*|^2`, so `r` is a
//! squared radius. The barrier condition
//! `H(P(x)) - H(x) >= -alpha H(x)` is equivalent, with
//! `d0 = |x - x*|^2` and `d1 = |P(x) - x*|^2`, to
//! `d1 <= (1 - alpha) d0 + alpha r`.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ClosedLoop;
use crate::error::{Error, Result};
use crate::poincare::{reduced_return_map, FixedPoint, ReducedChart};
use crate::sim::SimOptions;

pub const CERT_FORMAT: &str = "cert-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarrierParams {
    pub alpha: f64,
    /// Largest squared radius considered.
    pub r_max: f64,
    pub n_samples: usize,
}

impl Default for BarrierParams {
    fn default() -> Self {
        BarrierParams { alpha: 0.05, r_max: 2.0, n_samples: 200 }
    }
}

impl BarrierParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.r_max > 0.0) || !self.r_max.is_finite() {
            return Err(Error::Config("r_max must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleOutcome {
    Mapped,
    /// The step from the reconstructed state did not complete.
    Escaped,
    ReconstructionFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub x0: Vec<f64>,
    pub d0: f64,
    /// Absent unless the sample was mapped.
    pub d1: Option<f64>,
    pub outcome: SampleOutcome,
}

/// `H(x) = r - |x - x*|^2`.
pub fn barrier_value(x: &DVector<f64>, x_star: &DVector<f64>, r: f64) -> f64 {
    r - (x - x_star).norm_squared()
}

/// The barrier condition as printed: `H(next) - H(x) >= -alpha H(x)`.
pub fn barrier_condition(h_next: f64, h: f64, alpha: f64) -> bool {
    h_next - h >= -alpha * h
}

/// The same condition in squared-distance form.
pub fn reduced_condition(d0: f64, d1: f64, r: f64, alpha: f64) -> bool {
    d1 <= (1.0 - alpha) * d0 + alpha * r
}

/// Uniform samples from the ball `{ x : |x - center|^2 <= r_max }`:
/// Gaussian directions scaled by `sqrt(r_max) * U^(1/k)`.
pub fn sample_ball(center: &DVector<f64>, r_max: f64, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let k = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let radius = r_max.max(0.0).sqrt();
    (0..n)
        .map(|_| {
            let dir = loop {
                let g: DVector<f64> = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
                let norm = g.norm();
                if norm > 1e-12 {
                    break g / norm;
                }
            };
            let u: f64 = unit.sample(&mut rng);
            let rho = radius * u.powf(1.0 / k as f64);
            let offset: DVector<f64> = rho * dir;
            // guard against round-off pushing a point past the boundary
            if offset.norm_squared() > r_max {
                center + offset * (1.0 - 1e-15)
            } else {
                center + offset
            }
        })
        .collect()
}

/// Simulates one step from each sample's reconstruction. Samples are
/// independent; failures are recorded, never propagated.
pub fn evaluate_samples(
    field: &ClosedLoop,
    chart: &ReducedChart,
    center: &DVector<f64>,
    samples: &[DVector<f64>],
    opts: &SimOptions,
) -> Vec<SampleRecord> {
    samples
        .par_iter()
        .map(|x0| {
            let d0 = (x0 - center).norm_squared();
            let (d1, outcome) = match chart.reconstruct(x0) {
                Err(_) => (None, SampleOutcome::ReconstructionFailed),
                Ok(full) => match crate::poincare::return_map(field, &full, opts) {
                    Ok(next) => (Some((chart.project(&next) - center).norm_squared()), SampleOutcome::Mapped),
                    Err(_) => (None, SampleOutcome::Escaped),
                },
            };
            SampleRecord { x0: x0.iter().copied().collect(), d0, d1, outcome }
        })
        .collect()
}

/// Largest `r` in `[0, r_max]` such that every record with `d0 <= r` was
/// mapped and satisfies `d1 <= (1 - alpha) d0 + alpha r`.
///
/// Records are sorted by `d0`. For the prefix of records strictly inside a
/// candidate radius the constraint is `r >= max (d1 - (1 - alpha) d0) / alpha`;
/// the feasible radii for that prefix form the interval from this bound (and
/// the prefix's largest `d0`) up to, but excluding, the next record's `d0`.
/// The answer is the largest representable point of the last non-empty
/// interval, capped at `r_max`.
pub fn estimate_r_star(records: &[SampleRecord], alpha: f64, r_max: f64) -> f64 {
    let mut sorted: Vec<&SampleRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.d0.total_cmp(&b.d0));
    let mut best = 0.0f64;
    let mut bound = 0.0f64; // max over the prefix of the required r
    let mut last_d0 = 0.0f64;
    let mut k = 0;
    loop {
        // prefix = sorted[..k]; next excluded record at sorted[k]
        let upper = sorted.get(k).map(|r| r.d0).unwrap_or(f64::INFINITY);
        let lo = bound.max(last_d0).max(0.0);
        if lo < upper && lo <= r_max {
            let hi = if upper.is_finite() { upper.next_down() } else { r_max };
            best = best.max(hi.min(r_max));
        }
        if k == sorted.len() || upper > r_max {
            break;
        }
        // absorb the whole group of records tied at this d0
        while k < sorted.len() && sorted[k].d0 == upper {
            let rec = sorted[k];
            match (rec.outcome, rec.d1) {
                (SampleOutcome::Mapped, Some(d1)) => {
                    bound = bound.max((d1 - (1.0 - alpha) * rec.d0) / alpha);
                }
                _ => return best,
            }
            k += 1;
        }
        last_d0 = upper;
    }
    best
}

/// Direct check of the sampled barrier condition at a given `r`.
pub fn feasible_at(records: &[SampleRecord], alpha: f64, r: f64) -> bool {
    records.iter().filter(|rec| rec.d0 <= r).all(|rec| match (rec.outcome, rec.d1) {
        (SampleOutcome::Mapped, Some(d1)) => reduced_condition(rec.d0, d1, r, alpha),
        _ => false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceCertificate {
    pub format: String,
    pub gait_id: String,
    pub alpha: f64,
    pub r_max: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Certified squared radius.
    pub r_star: f64,
    pub fixed_point: FixedPoint,
    pub fixed_point_red: Vec<f64>,
    pub reduced_indices: Vec<usize>,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl InvarianceCertificate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cert: InvarianceCertificate = serde_json::from_str(s)?;
        if cert.format != CERT_FORMAT {
            return Err(Error::Config(format!("unsupported certificate format '{}'", cert.format)));
        }
        Ok(cert)
    }

    /// Checks the stored samples against the certified radius.
    pub fn check_invariants(&self) -> Result<()> {
        if !(0.0..=self.r_max).contains(&self.r_star) {
            return Err(Error::Config("r_star outside [0, r_max]".into()));
        }
        for s in &self.samples {
            if s.d0 > self.r_star {
                continue;
            }
            match (s.outcome, s.d1) {
                (SampleOutcome::Mapped, Some(d1)) if reduced_condition(s.d0, d1, self.r_star, self.alpha) => {}
                _ => return Err(Error::Config(format!("sample at d0 = {} violates the certificate", s.d0))),
            }
        }
        Ok(())
    }

    pub fn write_samples_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        let k = self.fixed_point_red.len();
        let mut header: Vec<String> = (0..k).map(|i| format!("x0_{i}")).collect();
        header.extend(["d0", "d1", "outcome", "h0", "h1"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for s in &self.samples {
            let mut row: Vec<String> = s.x0.iter().map(|v| format!("{v:.12e}")).collect();
            row.push(format!("{:.12e}", s.d0));
            row.push(s.d1.map(|d| format!("{d:.12e}")).unwrap_or_default());
            row.push(serde_json::to_value(s.outcome)?.as_str().unwrap_or_default().to_string());
            row.push(format!("{:.12e}", self.r_star - s.d0));
            row.push(s.d1.map(|d| format!("{:.12e}", self.r_star - d)).unwrap_or_default());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Samples the ball around the reduced fixed point, maps every sample one
/// step and estimates the certified radius.
pub fn certify(
    field: &ClosedLoop,
    chart: &ReducedChart,
    fixed_point: &FixedPoint,
    params: &BarrierParams,
    seed: u64,
    gait_id: &str,
    opts: &SimOptions,
) -> Result<InvarianceCertificate> {
    params.validate()?;
    let center = chart.project(&fixed_point.x_star);
    let samples = sample_ball(&center, params.r_max, params.n_samples, seed);
    let records = evaluate_samples(field, chart, &center, &samples, opts);
    let r_star = estimate_r_star(&records, params.alpha, params.r_max);
    Ok(InvarianceCertificate {
        format: CERT_FORMAT.into(),
        gait_id: gait_id.into(),
        alpha: params.alpha,
        r_max: params.r_max,
        n_samples: params.n_samples,
        seed,
        r_star,
        fixed_point: fixed_point.clone(),
        fixed_point_red: center.iter().copied().collect(),
        reduced_indices: chart.indices.clone(),
        samples: records,
        config_hash: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sample: usize,
    pub step: usize,
    /// Reduced-state trajectory up to and including the violating step.
    pub trajectory: Vec<Vec<f64>>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub samples: usize,
    pub horizon: usize,
    pub violations: Vec<Violation>,
    /// Smallest `r* - d_k` seen over all samples and steps.
    pub worst_margin: f64,
    /// Median squared distance to the fixed point at each step `k = 0..=horizon`.
    pub median_distance: Vec<f64>,
}

/// Iterates the reduced map from fresh samples inside the certified set and
/// reports every exit from it.
pub fn verify_certificate(
    field: &ClosedLoop,
    chart: &ReducedChart,
    cert: &InvarianceCertificate,
    horizon: usize,
    n_fresh: usize,
    seed: u64,
    opts: &SimOptions,
) -> VerificationReport {
    let center = DVector::from_vec(cert.fixed_point_red.clone());
    if !(cert.r_star > 0.0) {
        return VerificationReport {
            samples: 0,
            horizon,
            violations: Vec::new(),
            worst_margin: 0.0,
            median_distance: Vec::new(),
        };
    }
    let starts = sample_ball(&center, cert.r_star, n_fresh, seed);
    let runs: Vec<(Vec<f64>, Option<Violation>)> = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut x = x0.clone();
            let mut dists = vec![(&x - &center).norm_squared()];
            let mut traj = vec![x.iter().copied().collect::<Vec<f64>>()];
            for k in 1..=horizon {
                match reduced_return_map(field, chart, &x, opts) {
                    Ok(next) => {
                        let d = (&next - &center).norm_squared();
                        traj.push(next.iter().copied().collect());
                        dists.push(d);
                        if d > cert.r_star {
                            let v = Violation { sample: i, step: k, trajectory: traj, reason: "left the set".into() };
                            return (dists, Some(v));
                        }
                        x = next;
                    }
                    Err(e) => {
                        let v = Violation { sample: i, step: k, trajectory: traj, reason: e.to_string() };
                        return (dists, Some(v));
                    }
                }
            }
            (dists, None)
        })
        .collect();
    let mut worst = f64::INFINITY;
    let mut violations = Vec::new();
    let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); horizon + 1];
    for (dists, v) in runs {
        for (k, d) in dists.iter().enumerate() {
            worst = worst.min(cert.r_star - d);
            per_step[k].push(*d);
        }
        if let Some(v) = v {
            violations.push(v);
        }
    }
    let median_distance = per_step
        .into_iter()
        .filter(|v| !v.is_empty())
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        })
        .collect();
    VerificationReport { samples: starts.len(), horizon, violations, worst_margin: worst, median_distance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic(map: impl Fn(f64) -> f64, xs: &[f64]) -> Vec<SampleRecord> {
        xs.iter()
            .map(|&x| {
                let y = map(x);
                SampleRecord { x0: vec![x], d0: x * x, d1: Some(y * y), outcome: SampleOutcome::Mapped }
            })
            .collect()
    }

    /// Brute-force oracle: feasibility checked on a uniform grid of radii.
    fn grid_oracle(records: &[SampleRecord], alpha: f64, r_max: f64, res: f64) -> f64 {
        let steps = (r_max / res).round() as usize;
        (0..=steps).rev().map(|j| j as f64 * res).find(|&r| feasible_at(records, alpha, r)).unwrap_or(0.0)
    }

    fn grid(n: usize, max: f64) -> Vec<f64> {
        (0..=n).map(|i| max * i as f64 / n as f64).collect()
    }

    #[test]
    fn barrier_value_basics() {
        let c = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(barrier_value(&c, &c, 0.7), 0.7);
        let x = DVector::from_vec(vec![1.0 + 0.6, -1.0 + 0.8]);
        assert!(barrier_value(&x, &c, 1.0).abs() < 1e-15);
        assert!((barrier_value(&x, &c, 1.5) - (barrier_value(&x, &c, 1.0) + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn identity_map_certifies_everything() {
        let xs = grid(2000, 2f64.sqrt());
        let recs = synthetic(|x| x, &xs);
        assert_eq!(estimate_r_star(&recs, 0.05, 2.0), 2.0);
    }

    #[test]
    fn squaring_map_certifies_unit_radius() {
        let xs = grid(20000, 2f64.sqrt());
        let recs = synthetic(|x| x * x, &xs);
        let r = estimate_r_star(&recs, 0.05, 2.0);
        let oracle = grid_oracle(&recs, 0.05, 2.0, 1e-4);
        assert!((oracle - 1.0).abs() < 2e-4, "oracle {oracle}");
        assert!((r - oracle).abs() <= 2e-4, "scan {r} vs oracle {oracle}");
    }

    #[test]
    fn expanding_map_certifies_nothing() {
        let xs = grid(20000, 2f64.sqrt());
        let recs = synthetic(|x| 1.5 * x, &xs);
        let r = estimate_r_star(&recs, 0.05, 2.0);
        let oracle = grid_oracle(&recs, 0.05, 2.0, 1e-4);
        assert!(oracle < 1e-4);
        assert!(r < 1e-4, "r* = {r}");
    }

    #[test]
    fn failed_samples_bound_the_radius() {
        let mut recs = synthetic(|x| 0.5 * x, &grid(100, 1.0));
        recs.push(SampleRecord { x0: vec![0.7], d0: 0.49, d1: None, outcome: SampleOutcome::Escaped });
        let r = estimate_r_star(&recs, 0.05, 2.0);
        assert!(r < 0.49 && r > 0.48);
        assert!(feasible_at(&recs, 0.05, r));
    }

    #[test]
    fn matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let r_max = 2.0;
        for _ in 0..20 {
            let n = rng.random_range(5..60);
            let alpha = rng.random_range(0.01..0.5);
            let recs: Vec<SampleRecord> = (0..n)
                .map(|_| {
                    let d0: f64 = rng.random_range(0.0..r_max);
                    let d1 = d0 * rng.random_range(0.0..1.3) + rng.random_range(0.0..0.05);
                    let outcome = if rng.random_bool(0.03) { SampleOutcome::Escaped } else { SampleOutcome::Mapped };
                    let d1 = (outcome == SampleOutcome::Mapped).then_some(d1);
                    SampleRecord { x0: vec![d0.sqrt()], d0, d1, outcome }
                })
                .collect();
            let res = 1e-5 * r_max;
            let oracle = grid_oracle(&recs, alpha, r_max, res);
            let scan = estimate_r_star(&recs, alpha, r_max);
            assert!(feasible_at(&recs, alpha, scan));
            assert!((scan - oracle).abs() <= res * 1.0001, "scan {scan} oracle {oracle}");
        }
    }

    #[test]
    fn r_star_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let recs: Vec<SampleRecord> = (0..80)
            .map(|_| {
                let d0: f64 = rng.random_range(0.0..2.0);
                SampleRecord { x0: vec![d0.sqrt()], d0, d1: Some(d0 * rng.random_range(0.5..1.2)), outcome: SampleOutcome::Mapped }
            })
            .collect();
        let mut prev = 0.0;
        for a in [0.01, 0.05, 0.1, 0.3, 0.6, 0.9] {
            let r = estimate_r_star(&recs, a, 2.0);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn algebraic_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let d0: f64 = rng.random_range(0.0..2.0);
            let d1: f64 = rng.random_range(0.0..3.0);
            let r: f64 = rng.random_range(0.0..2.0);
            let a: f64 = rng.random_range(0.001..0.999);
            assert_eq!(barrier_condition(r - d1, r - d0, a), reduced_condition(d0, d1, r, a));
        }
    }

    #[test]
    fn ball_samples_are_inside_and_deterministic() {
        let c = DVector::from_vec(vec![0.3, -1.2]);
        let a = sample_ball(&c, 2.0, 500, 17);
        let b = sample_ball(&c, 2.0, 500, 17);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| (p - &c).norm_squared() <= 2.0));
        assert_ne!(a, sample_ball(&c, 2.0, 500, 18));
    }

    #[test]
    fn ball_radial_distribution() {
        let c = DVector::zeros(2);
        let pts = sample_ball(&c, 2.0, 100_000, 5);
        let inside = pts.iter().filter(|p| p.norm_squared() <= 1.0).count() as f64 / 1e5;
        assert!((inside - 0.5).abs() < 0.01, "fraction {inside}");
    }
}
