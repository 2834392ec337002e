//! Planar rigid-body biped models.
//!
//! Every model is an open kinematic tree rooted at the stance foot, which is
//! pinned at the origin of a ground-aligned frame (x along the ground, z along
//! the ground normal). Each link has an absolute angle measured from the
//! ground normal, positive when its upper end leans forward; the absolute
//! angles are a constant linear map of the generalized coordinates.
//!
//! Built-in charts:
//!
//! * `compass`: `q = (stance leg angle, swing leg angle)`, both absolute.
//! * `five_link`: `q = (torso pitch, stance hip, stance knee, swing hip,
//!   swing knee)`; torso pitch is absolute, the joint angles are relative
//!   (femur w.r.t. torso, tibia w.r.t. femur) so the four actuated
//!   coordinates are exactly the joint angles.
//!
//! Link `com_offset` is measured from the upper joint of the link (the hip
//! for femurs, the torso and compass legs; the knee for tibias).

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mass-matrix condition estimate above which dynamics refuse to solve.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub mass: f64,
    pub length: f64,
    pub com_offset: f64,
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Compass,
    FiveLink,
}

impl Topology {
    fn from_link_count(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Topology::Compass),
            5 => Ok(Topology::FiveLink),
            _ => Err(Error::InvalidModel(format!(
                "expected 2 links (compass) or 5 links (five-link), got {n}"
            ))),
        }
    }
}

/// Joint-space state `x = (q, qd)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "StateDoc", into = "StateDoc")]
pub struct State {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct StateDoc {
    q: Vec<f64>,
    qd: Vec<f64>,
}

impl From<StateDoc> for State {
    fn from(d: StateDoc) -> Self {
        State::new(DVector::from_vec(d.q), DVector::from_vec(d.qd))
    }
}

impl From<State> for StateDoc {
    fn from(s: State) -> Self {
        StateDoc {
            q: s.q.iter().copied().collect(),
            qd: s.qd.iter().copied().collect(),
        }
    }
}

impl State {
    pub fn new(q: DVector<f64>, qd: DVector<f64>) -> Self {
        State { q, qd }
    }

    pub fn zeros(n: usize) -> Self {
        State::new(DVector::zeros(n), DVector::zeros(n))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Stacked vector `(q, qd)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.q.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.qd[i - n] })
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        State::new(x.rows(0, n).into_owned(), x.rows(n, n).into_owned())
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }
}

/// A point on the robot expressed as `sum(coef * e(angle[link]))` with
/// `e(a) = (sin a, cos a)`.
type PointExpr = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
struct Geometry {
    angle_map: DMatrix<f64>,
    coms: Vec<PointExpr>,
    hip: PointExpr,
    swing_foot: PointExpr,
    relabel: DMatrix<f64>,
}

/// Positions of interest for a configuration, stance foot at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub swing_foot: Vector2<f64>,
    pub stance_foot: Vector2<f64>,
    pub hip: Vector2<f64>,
    /// Absolute torso pitch; `None` for models without a torso.
    pub torso_pitch: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub name: String,
    pub links: Vec<Link>,
    #[serde(default)]
    pub actuated_indices: Vec<usize>,
    pub gravity: f64,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub hip_mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct RobotModel {
    pub name: String,
    pub topology: Topology,
    pub links: Vec<Link>,
    pub actuated_indices: Vec<usize>,
    pub gravity: f64,
    pub slope: f64,
    /// Point mass lumped at the hip (kg).
    pub hip_mass: f64,
    geometry: Geometry,
}

impl TryFrom<ModelDoc> for RobotModel {
    type Error = Error;

    fn try_from(d: ModelDoc) -> Result<Self> {
        RobotModel::new(d.name, d.links, d.actuated_indices, d.gravity, d.slope, d.hip_mass)
    }
}

impl From<RobotModel> for ModelDoc {
    fn from(m: RobotModel) -> Self {
        ModelDoc {
            name: m.name,
            links: m.links,
            actuated_indices: m.actuated_indices,
            gravity: m.gravity,
            slope: m.slope,
            hip_mass: m.hip_mass,
        }
    }
}

fn e(a: f64) -> Vector2<f64> {
    Vector2::new(a.sin(), a.cos())
}

fn de(a: f64) -> Vector2<f64> {
    Vector2::new(a.cos(), -a.sin())
}

fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InputDomain(format!("{what} is not finite")))
    }
}

impl RobotModel {
    pub fn new(
        name: impl Into<String>,
        links: Vec<Link>,
        actuated_indices: Vec<usize>,
        gravity: f64,
        slope: f64,
        hip_mass: f64,
    ) -> Result<Self> {
        let model = Self::assemble(name.into(), links, actuated_indices, gravity, slope, hip_mass)?;
        model.validate()?;
        Ok(model)
    }

    fn assemble(
        name: String,
        links: Vec<Link>,
        actuated_indices: Vec<usize>,
        gravity: f64,
        slope: f64,
        hip_mass: f64,
    ) -> Result<Self> {
        let topology = Topology::from_link_count(links.len())?;
        let geometry = match topology {
            Topology::Compass => compass_geometry(&links),
            Topology::FiveLink => five_link_geometry(&links),
        };
        Ok(RobotModel { name, topology, links, actuated_indices, gravity, slope, hip_mass, geometry })
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.links.iter().enumerate() {
            let ok = l.mass > 0.0
                && l.length > 0.0
                && l.inertia >= 0.0
                && l.com_offset.is_finite()
                && l.mass.is_finite()
                && l.length.is_finite()
                && l.inertia.is_finite();
            if !ok {
                return Err(Error::InvalidModel(format!(
                    "link {i}: mass and length must be positive, inertia non-negative"
                )));
            }
        }
        let n = self.n_q();
        let mut seen = vec![false; n];
        for &i in &self.actuated_indices {
            if i >= n || seen[i] {
                return Err(Error::InvalidModel(format!(
                    "actuated index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::InvalidModel("gravity must be finite and non-negative".into()));
        }
        if !self.slope.is_finite() || self.slope.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidModel("slope must lie in (-pi/2, pi/2)".into()));
        }
        if !(self.hip_mass.is_finite() && self.hip_mass >= 0.0) {
            return Err(Error::InvalidModel("hip_mass must be non-negative".into()));
        }
        // relabeling swaps legs, so legs must be identical
        let legs_match = match self.topology {
            Topology::Compass => self.links[0] == self.links[1],
            Topology::FiveLink => self.links[1] == self.links[3] && self.links[2] == self.links[4],
        };
        if !legs_match {
            return Err(Error::InvalidModel("stance and swing legs must be identical".into()));
        }
        Ok(())
    }

    /// Compass-gait walker with a lumped hip mass on a 3 degree incline,
    /// unactuated.
    pub fn compass() -> Self {
        let leg = Link { mass: 5.0, length: 1.0, com_offset: 0.5, inertia: 0.0 };
        Self::new("compass", vec![leg, leg], vec![], 9.81, 3f64.to_radians(), 10.0)
            .expect("built-in compass model is valid")
    }

    /// Five-link planar biped with point feet and four actuated joints.
    /// Parameters follow the RABBIT testbed.
    pub fn five_link() -> Self {
        let torso = Link { mass: 12.0, length: 0.625, com_offset: 0.24, inertia: 1.33 };
        let femur = Link { mass: 6.8, length: 0.4, com_offset: 0.11, inertia: 0.47 };
        let tibia = Link { mass: 3.2, length: 0.4, com_offset: 0.24, inertia: 0.20 };
        Self::new("five_link", vec![torso, femur, tibia, femur, tibia], vec![1, 2, 3, 4], 9.81, 0.0, 0.0)
            .expect("built-in five-link model is valid")
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "compass" => Ok(Self::compass()),
            "five_link" | "five-link" | "fivelink" => Ok(Self::five_link()),
            _ => Err(Error::InvalidModel(format!("unknown built-in model '{name}'"))),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_q(&self) -> usize {
        self.geometry.angle_map.ncols()
    }

    pub fn n_actuated(&self) -> usize {
        self.actuated_indices.len()
    }

    pub fn unactuated_indices(&self) -> Vec<usize> {
        (0..self.n_q()).filter(|i| !self.actuated_indices.contains(i)).collect()
    }

    /// Coordinate solved for when placing a configuration on the guard.
    pub fn guard_coordinate(&self) -> usize {
        match self.topology {
            Topology::Compass => 1,
            Topology::FiveLink => 0,
        }
    }

    pub fn torso_index(&self) -> Option<usize> {
        match self.topology {
            Topology::Compass => None,
            Topology::FiveLink => Some(0),
        }
    }

    /// Leg length from hip to foot with the knee straight.
    pub fn leg_length(&self) -> f64 {
        match self.topology {
            Topology::Compass => self.links[0].length,
            Topology::FiveLink => self.links[1].length + self.links[2].length,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum::<f64>() + self.hip_mass
    }

    /// Whether a guard crossing counts only with the swing foot ahead of
    /// the stance foot. Crossings behind the stance foot are scuffs at
    /// lift-off or mid-stance, not touchdowns.
    pub fn guard_requires_swing_ahead(&self) -> bool {
        true
    }

    /// Gravity acceleration in the ground-aligned frame.
    pub fn gravity_vector(&self) -> Vector2<f64> {
        Vector2::new(self.gravity * self.slope.sin(), -self.gravity * self.slope.cos())
    }

    /// Absolute link angles.
    pub fn link_angles(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.geometry.angle_map * q
    }

    pub fn angle_map(&self) -> &DMatrix<f64> {
        &self.geometry.angle_map
    }

    /// Signed-permutation relabeling matrix swapping stance and swing roles.
    pub fn relabel_matrix(&self) -> &DMatrix<f64> {
        &self.geometry.relabel
    }

    /// Selection matrix `B` (n_q x m) mapping actuator torques to
    /// generalized forces.
    pub fn actuation_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_q(), self.n_actuated());
        for (j, &i) in self.actuated_indices.iter().enumerate() {
            b[(i, j)] = 1.0;
        }
        b
    }

    fn point(&self, expr: &PointExpr, ang: &DVector<f64>) -> Vector2<f64> {
        expr.iter().fold(Vector2::zeros(), |acc, &(j, c)| acc + c * e(ang[j]))
    }

    fn point_jacobian(&self, expr: &PointExpr, ang: &DVector<f64>) -> DMatrix<f64> {
        let a = &self.geometry.angle_map;
        let mut jac = DMatrix::zeros(2, self.n_q());
        for &(j, c) in expr {
            let d = c * de(ang[j]);
            for k in 0..self.n_q() {
                let akj = a[(j, k)];
                if akj != 0.0 {
                    jac[(0, k)] += d.x * akj;
                    jac[(1, k)] += d.y * akj;
                }
            }
        }
        jac
    }

    /// `Jdot * qd` for a point, i.e. the velocity-product part of its
    /// acceleration.
    fn point_bias(&self, expr: &PointExpr, ang: &DVector<f64>, rate: &DVector<f64>) -> Vector2<f64> {
        expr.iter()
            .fold(Vector2::zeros(), |acc, &(j, c)| acc - c * rate[j] * rate[j] * e(ang[j]))
    }

    /// Point masses as (mass, expression) pairs, including the hip mass.
    fn masses(&self) -> impl Iterator<Item = (f64, &PointExpr)> {
        let hip = (self.hip_mass > 0.0).then_some((self.hip_mass, &self.geometry.hip));
        self.links
            .iter()
            .zip(self.geometry.coms.iter())
            .map(|(l, c)| (l.mass, c))
            .chain(hip)
    }

    /// Inertia matrix `D(q)`.
    pub fn mass_matrix(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_finite(q, "configuration")?;
        Ok(self.mass_matrix_unchecked(q))
    }

    fn mass_matrix_unchecked(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_q();
        let ang = self.link_angles(q);
        let mut d = DMatrix::zeros(n, n);
        for (m, expr) in self.masses() {
            let jac = self.point_jacobian(expr, &ang);
            d += m * jac.transpose() * &jac;
        }
        let a = &self.geometry.angle_map;
        for (j, l) in self.links.iter().enumerate() {
            if l.inertia > 0.0 {
                let row = a.row(j);
                d += l.inertia * row.transpose() * row;
            }
        }
        // exact symmetry
        let dt = d.transpose();
        (d + dt) * 0.5
    }

    /// Gravity vector `G(q) = dV/dq`.
    pub fn gravity_forces(&self, q: &DVector<f64>) -> DVector<f64> {
        let ang = self.link_angles(q);
        let g = self.gravity_vector();
        let mut out = DVector::zeros(self.n_q());
        for (m, expr) in self.masses() {
            let jac = self.point_jacobian(expr, &ang);
            out -= m * jac.transpose() * g;
        }
        out
    }

    /// Drift vector `H(q, qd) = C(q, qd) qd + G(q)`.
    pub fn drift_vector(&self, q: &DVector<f64>, qd: &DVector<f64>) -> Result<DVector<f64>> {
        check_finite(q, "configuration")?;
        check_finite(qd, "velocity")?;
        Ok(self.drift_unchecked(q, qd))
    }

    fn drift_unchecked(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
        let ang = self.link_angles(q);
        let rate = self.link_angles(qd);
        let g = self.gravity_vector();
        let mut out = DVector::zeros(self.n_q());
        for (m, expr) in self.masses() {
            let jac = self.point_jacobian(expr, &ang);
            let bias = self.point_bias(expr, &ang, &rate);
            out += m * jac.transpose() * (bias - g);
        }
        out
    }

    /// Solves `D(q) X = rhs` by Cholesky factorization.
    pub fn solve_mass(&self, d: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let chol = d.cholesky().ok_or(Error::Conditioning(f64::INFINITY))?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v.abs()), hi.max(v.abs())));
        let cond = (hi / lo).powi(2);
        if !cond.is_finite() || cond > CONDITION_LIMIT {
            return Err(Error::Conditioning(cond));
        }
        Ok(chol.solve(rhs))
    }

    /// Drift and input vector fields at `x`: returns `(D^-1 H, D^-1 B)`.
    pub fn affine_terms(&self, x: &State) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_finite(&x.q, "configuration")?;
        check_finite(&x.qd, "velocity")?;
        let n = self.n_q();
        let m = self.n_actuated();
        let d = self.mass_matrix_unchecked(&x.q);
        let h = self.drift_unchecked(&x.q, &x.qd);
        let mut rhs = DMatrix::zeros(n, m + 1);
        rhs.column_mut(0).copy_from(&h);
        for (j, &i) in self.actuated_indices.iter().enumerate() {
            rhs[(i, j + 1)] = 1.0;
        }
        let sol = self.solve_mass(d, &rhs)?;
        Ok((sol.column(0).into_owned(), sol.columns(1, m).into_owned()))
    }

    /// `xdot = (qd, D^-1 (B u - H))`.
    pub fn continuous_dynamics(&self, x: &State, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.n_actuated() {
            return Err(Error::InputDomain(format!(
                "torque has {} entries, model has {} actuators",
                u.len(),
                self.n_actuated()
            )));
        }
        check_finite(u, "torque")?;
        let (dh, db) = self.affine_terms(x)?;
        let qdd = db * u - dh;
        let n = self.n_q();
        Ok(DVector::from_fn(2 * n, |i, _| if i < n { x.qd[i] } else { qdd[i - n] }))
    }

    pub fn kinematics(&self, q: &DVector<f64>) -> Result<Frames> {
        check_finite(q, "configuration")?;
        let ang = self.link_angles(q);
        Ok(Frames {
            swing_foot: self.point(&self.geometry.swing_foot, &ang),
            stance_foot: Vector2::zeros(),
            hip: self.point(&self.geometry.hip, &ang),
            torso_pitch: self.torso_index().map(|i| ang[i]),
        })
    }

    pub fn swing_foot(&self, q: &DVector<f64>) -> Vector2<f64> {
        self.point(&self.geometry.swing_foot, &self.link_angles(q))
    }

    pub fn hip(&self, q: &DVector<f64>) -> Vector2<f64> {
        self.point(&self.geometry.hip, &self.link_angles(q))
    }

    /// Jacobian of the swing-foot position (2 x n_q).
    pub fn swing_foot_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.point_jacobian(&self.geometry.swing_foot, &self.link_angles(q))
    }

    pub fn kinetic_energy(&self, q: &DVector<f64>, qd: &DVector<f64>) -> f64 {
        0.5 * qd.dot(&(self.mass_matrix_unchecked(q) * qd))
    }

    pub fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        let ang = self.link_angles(q);
        let g = self.gravity_vector();
        -self.masses().map(|(m, expr)| m * g.dot(&self.point(expr, &ang))).sum::<f64>()
    }

    pub fn total_energy(&self, x: &State) -> f64 {
        self.kinetic_energy(&x.q, &x.qd) + self.potential_energy(&x.q)
    }

    /// Positions of all point masses and link centers (used by energy
    /// oracles and plotting).
    pub fn mass_positions(&self, q: &DVector<f64>) -> Vec<(f64, Vector2<f64>)> {
        let ang = self.link_angles(q);
        self.masses().map(|(m, expr)| (m, self.point(expr, &ang))).collect()
    }

    /// Mass matrix of the unpinned model in extended coordinates
    /// `(p_x, p_z, q)`, where `p` is the stance-foot position.
    pub fn extended_mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_q();
        let ang = self.link_angles(q);
        let mut de_ = DMatrix::zeros(n + 2, n + 2);
        de_.view_mut((2, 2), (n, n)).copy_from(&self.mass_matrix_unchecked(q));
        let mut total = 0.0;
        let mut coupling = DMatrix::zeros(2, n);
        for (m, expr) in self.masses() {
            total += m;
            coupling += m * self.point_jacobian(expr, &ang);
        }
        de_[(0, 0)] = total;
        de_[(1, 1)] = total;
        de_.view_mut((0, 2), (2, n)).copy_from(&coupling);
        de_.view_mut((2, 0), (n, 2)).copy_from(&coupling.transpose());
        de_
    }
}

fn compass_geometry(links: &[Link]) -> Geometry {
    let l = links[0].length;
    let c0 = links[0].com_offset;
    let c1 = links[1].com_offset;
    let hip: PointExpr = vec![(0, l)];
    let coms = vec![vec![(0, l - c0)], vec![(0, l), (1, -c1)]];
    let swing_foot = vec![(0, l), (1, -links[1].length)];
    let relabel = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    Geometry { angle_map: DMatrix::identity(2, 2), coms, hip, swing_foot, relabel }
}

fn five_link_geometry(links: &[Link]) -> Geometry {
    // link order: torso, stance femur, stance tibia, swing femur, swing tibia
    #[rustfmt::skip]
    let angle_map = DMatrix::from_row_slice(5, 5, &[
        1.0, 0.0, 0.0, 0.0, 0.0,
        1.0, 1.0, 0.0, 0.0, 0.0,
        1.0, 1.0, 1.0, 0.0, 0.0,
        1.0, 0.0, 0.0, 1.0, 0.0,
        1.0, 0.0, 0.0, 1.0, 1.0,
    ]);
    let (torso, f1, t1, f2, t2) = (&links[0], &links[1], &links[2], &links[3], &links[4]);
    let hip: PointExpr = vec![(2, t1.length), (1, f1.length)];
    let with = |base: &PointExpr, extra: &[(usize, f64)]| -> PointExpr {
        base.iter().copied().chain(extra.iter().copied()).collect()
    };
    let knee2 = with(&hip, &[(3, -f2.length)]);
    let coms = vec![
        with(&hip, &[(0, torso.com_offset)]),
        vec![(2, t1.length), (1, f1.length - f1.com_offset)],
        vec![(2, t1.length - t1.com_offset)],
        with(&hip, &[(3, -f2.com_offset)]),
        with(&knee2, &[(4, -t2.com_offset)]),
    ];
    let swing_foot = with(&knee2, &[(4, -t2.length)]);
    let mut relabel = DMatrix::zeros(5, 5);
    for (i, j) in [(0, 0), (1, 3), (2, 4), (3, 1), (4, 2)] {
        relabel[(i, j)] = 1.0;
    }
    Geometry { angle_map, coms, hip, swing_foot, relabel }
}
