//! Kinematic forward model: trajectory representation, the bistatic Doppler
//! equation, the model Doppler matrix and the MSE objective.
//!
//! The transmitter sits at the origin by convention; every quantity here is
//! expressed in the transmitter frame. All Doppler values are invariant to a
//! global rotation/reflection about the origin applied jointly to the station
//! layout and the trajectory ([`rotate_scene`] exposes that gauge freedom).

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degeneracy threshold: target closer than this to the transmitter or a
/// station makes the unit vectors in the Doppler equation meaningless.
pub const EPS_GEO: f64 = 1e-6;

/// Default maximum target speed (m/s).
pub const DEFAULT_V_MAX: f64 = 3.0;

/// Default carrier wavelength: c / 5.24 GHz.
pub const DEFAULT_WAVELENGTH: f64 = 299_792_458.0 / 5.24e9;

/// Default sampling interval (100 Hz CSI rate).
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Position2D {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Velocity2D {
    pub vx: f64,
    pub vy: f64,
}

impl Position2D {
    pub fn new(x: f64, y: f64) -> Self {
        Position2D { x, y }
    }

    pub fn origin() -> Self {
        Position2D { x: 0.0, y: 0.0 }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn distance_to(&self, other: &Position2D) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Velocity2D {
    pub fn new(vx: f64, vy: f64) -> Self {
        Velocity2D { vx, vy }
    }

    pub fn zero() -> Self {
        Velocity2D { vx: 0.0, vy: 0.0 }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.vx, self.vy)
    }

    pub fn speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }

    /// Heading angle in radians (atan2 convention).
    pub fn angle(&self) -> f64 {
        self.vy.atan2(self.vx)
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite()
    }
}

impl From<[f64; 2]> for Position2D {
    fn from(a: [f64; 2]) -> Self {
        Position2D { x: a[0], y: a[1] }
    }
}

impl From<Position2D> for [f64; 2] {
    fn from(p: Position2D) -> Self {
        [p.x, p.y]
    }
}

impl From<[f64; 2]> for Velocity2D {
    fn from(a: [f64; 2]) -> Self {
        Velocity2D { vx: a[0], vy: a[1] }
    }
}

impl From<Velocity2D> for [f64; 2] {
    fn from(v: Velocity2D) -> Self {
        [v.vx, v.vy]
    }
}

/// Target trajectory as starting point plus per-interval velocities.
///
/// A trajectory over `N` instants carries `N - 1` velocities; positions are
/// re-derived by forward Euler (`p_n = p_{n-1} + v_{n-1} dt`) so the
/// velocity representation is always the ground truth.
///
/// JSON schema: `{"dt": f64, "start": [x, y], "velocities": [[vx, vy], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub start: Position2D,
    pub velocities: Vec<Velocity2D>,
}

impl Trajectory {
    pub fn new(start: Position2D, velocities: Vec<Velocity2D>, dt: f64) -> Result<Self> {
        let traj = Trajectory {
            dt,
            start,
            velocities,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid("Trajectory", format!("dt = {}", self.dt)));
        }
        if self.velocities.is_empty() {
            return Err(Error::invalid("Trajectory", "needs at least one velocity"));
        }
        if !self.start.is_finite() || self.velocities.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("Trajectory", "non-finite entries"));
        }
        Ok(())
    }

    /// Number of time instants `N`.
    pub fn num_instants(&self) -> usize {
        self.velocities.len() + 1
    }

    /// Per-instant positions (length `N`), forward-Euler integrated.
    pub fn positions(&self) -> Vec<Position2D> {
        let mut out = Vec::with_capacity(self.velocities.len() + 1);
        let mut p = self.start;
        out.push(p);
        for v in &self.velocities {
            p = Position2D::new(p.x + v.vx * self.dt, p.y + v.vy * self.dt);
            out.push(p);
        }
        out
    }
}

/// Ordered receive-station positions.
///
/// JSON schema: `{"stations": [[x, y], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationLayout {
    pub stations: Vec<Position2D>,
}

impl StationLayout {
    pub fn new(stations: Vec<Position2D>) -> Self {
        StationLayout { stations }
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    /// Full invariant set for joint localization: at least three stations,
    /// none on the transmitter, pairwise distinct.
    pub fn validate(&self) -> Result<()> {
        if self.stations.len() < 3 {
            return Err(Error::invalid(
                "StationLayout",
                format!("{} stations, need >= 3", self.stations.len()),
            ));
        }
        for (i, s) in self.stations.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::invalid("StationLayout", format!("station {i} non-finite")));
            }
            if s.norm() < EPS_GEO {
                return Err(Error::invalid(
                    "StationLayout",
                    format!("station {i} coincides with the transmitter"),
                ));
            }
            for (j, t) in self.stations.iter().enumerate().skip(i + 1) {
                if s.distance_to(t) < EPS_GEO {
                    return Err(Error::invalid(
                        "StationLayout",
                        format!("stations {i} and {j} coincide"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Global scene parameters shared by every module.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Carrier wavelength (m).
    pub wavelength: f64,
    /// Sampling interval (s).
    pub dt: f64,
    /// Number of receive stations.
    pub num_stations: usize,
    /// Number of trajectory instants.
    pub num_instants: usize,
    /// Maximum admissible target speed (m/s).
    pub v_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            wavelength: DEFAULT_WAVELENGTH,
            dt: DEFAULT_DT,
            num_stations: 4,
            num_instants: 600,
            v_max: DEFAULT_V_MAX,
        }
    }
}

impl SceneConfig {
    pub fn sampling_rate(&self) -> f64 {
        1.0 / self.dt
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0) || !(self.dt > 0.0) {
            return Err(Error::invalid(
                "SceneConfig",
                format!("wavelength = {}, dt = {}", self.wavelength, self.dt),
            ));
        }
        Ok(())
    }
}

/// M x (N-1) matrix of Doppler frequencies with an availability mask.
///
/// Unavailable entries (LoS blockage, detector edge effects) carry a zero
/// value and are ignored by the MSE. CSV form is one row per station, one
/// column per interval, empty cell = unavailable.
#[derive(Debug, Clone, PartialEq)]
pub struct DopplerMatrix {
    num_stations: usize,
    num_intervals: usize,
    values: Vec<f64>,
    available: Vec<bool>,
}

impl DopplerMatrix {
    pub fn zeros(num_stations: usize, num_intervals: usize) -> Self {
        DopplerMatrix {
            num_stations,
            num_intervals,
            values: vec![0.0; num_stations * num_intervals],
            available: vec![true; num_stations * num_intervals],
        }
    }

    pub fn num_stations(&self) -> usize {
        self.num_stations
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    #[inline]
    fn idx(&self, m: usize, n: usize) -> usize {
        debug_assert!(m < self.num_stations && n < self.num_intervals);
        m * self.num_intervals + n
    }

    #[inline]
    pub fn value(&self, m: usize, n: usize) -> f64 {
        self.values[self.idx(m, n)]
    }

    #[inline]
    pub fn is_available(&self, m: usize, n: usize) -> bool {
        self.available[self.idx(m, n)]
    }

    /// Value if available.
    #[inline]
    pub fn get(&self, m: usize, n: usize) -> Option<f64> {
        let i = self.idx(m, n);
        self.available[i].then(|| self.values[i])
    }

    pub fn set(&mut self, m: usize, n: usize, value: f64) {
        let i = self.idx(m, n);
        self.values[i] = value;
        self.available[i] = true;
    }

    pub fn mark_unavailable(&mut self, m: usize, n: usize) {
        let i = self.idx(m, n);
        self.values[i] = 0.0;
        self.available[i] = false;
    }

    /// One station's row as (values, availability).
    pub fn row(&self, m: usize) -> (&[f64], &[bool]) {
        let lo = m * self.num_intervals;
        let hi = lo + self.num_intervals;
        (&self.values[lo..hi], &self.available[lo..hi])
    }

    pub fn set_row(&mut self, m: usize, values: &[f64], available: &[bool]) {
        assert_eq!(values.len(), self.num_intervals);
        assert_eq!(available.len(), self.num_intervals);
        for n in 0..self.num_intervals {
            let i = self.idx(m, n);
            self.values[i] = if available[n] { values[n] } else { 0.0 };
            self.available[i] = available[n];
        }
    }

    pub fn num_available(&self) -> usize {
        self.available.iter().filter(|a| **a).count()
    }

    /// Stations available at interval `n`.
    pub fn available_in_column(&self, n: usize) -> usize {
        (0..self.num_stations)
            .filter(|&m| self.is_available(m, n))
            .count()
    }

    /// Data-contract check used before solving: every column must keep at
    /// least `min_stations` stations and values must respect the 2 v_max / λ
    /// speed bound.
    pub fn validate(&self, scene: &SceneConfig, min_stations: usize) -> Result<()> {
        let bound = 2.0 * scene.v_max / scene.wavelength;
        for n in 0..self.num_intervals {
            let avail = self.available_in_column(n);
            if avail < min_stations {
                return Err(Error::InsufficientStations {
                    n,
                    available: avail,
                    needed: min_stations,
                });
            }
        }
        for m in 0..self.num_stations {
            for n in 0..self.num_intervals {
                if let Some(v) = self.get(m, n) {
                    if !v.is_finite() || v.abs() > bound {
                        return Err(Error::invalid(
                            "DopplerMatrix",
                            format!("entry ({m},{n}) = {v} Hz exceeds bound {bound:.2} Hz"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for m in 0..self.num_stations {
            for n in 0..self.num_intervals {
                if n > 0 {
                    out.push(',');
                }
                if self.is_available(m, n) {
                    out.push_str(&format!("{}", self.value(m, n)));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() && rows.is_empty() {
                continue;
            }
            let mut values = Vec::new();
            let mut avail = Vec::new();
            for cell in line.split(',') {
                let cell = cell.trim();
                if cell.is_empty() {
                    values.push(0.0);
                    avail.push(false);
                } else {
                    let v: f64 = cell.parse().map_err(|e| Error::Parse {
                        line: lineno + 1,
                        why: format!("bad Doppler value {cell:?}: {e}"),
                    })?;
                    values.push(v);
                    avail.push(true);
                }
            }
            rows.push((values, avail));
        }
        if rows.is_empty() {
            return Err(Error::invalid("DopplerMatrix", "empty CSV"));
        }
        let num_intervals = rows[0].0.len();
        if rows.iter().any(|(v, _)| v.len() != num_intervals) {
            return Err(Error::DimensionMismatch {
                expected: format!("{num_intervals} columns in every row"),
                got: "ragged rows".into(),
            });
        }
        let mut mat = DopplerMatrix::zeros(rows.len(), num_intervals);
        for (m, (values, avail)) in rows.iter().enumerate() {
            mat.set_row(m, values, avail);
        }
        Ok(mat)
    }
}

/// Bistatic Doppler frequency at one station (transmitter at the origin):
/// the sum of the velocity projections onto the target-to-transmitter and
/// target-to-station unit vectors, scaled by 1/wavelength.
pub fn doppler_frequency(
    p_target: &Position2D,
    v: &Velocity2D,
    p_rx: &Position2D,
    scene: &SceneConfig,
) -> Result<f64> {
    doppler_frequency_indexed(p_target, v, p_rx, scene, None, None)
}

pub(crate) fn doppler_frequency_indexed(
    p_target: &Position2D,
    v: &Velocity2D,
    p_rx: &Position2D,
    scene: &SceneConfig,
    m: Option<usize>,
    n: Option<usize>,
) -> Result<f64> {
    let d_tx = p_target.norm();
    if d_tx < EPS_GEO {
        return Err(Error::DegenerateGeometry {
            what: "transmitter",
            eps: EPS_GEO,
            m,
            n,
        });
    }
    let dx = p_rx.x - p_target.x;
    let dy = p_rx.y - p_target.y;
    let d_rx = (dx * dx + dy * dy).sqrt();
    if d_rx < EPS_GEO {
        return Err(Error::DegenerateGeometry {
            what: "station",
            eps: EPS_GEO,
            m,
            n,
        });
    }
    let ux = -p_target.x / d_tx + dx / d_rx;
    let uy = -p_target.y / d_tx + dy / d_rx;
    Ok((ux * v.vx + uy * v.vy) / scene.wavelength)
}

/// Model Doppler matrix: entry (m, n) is the Doppler at station m over
/// interval n; availability all-true.
pub fn model_doppler_matrix(
    traj: &Trajectory,
    layout: &StationLayout,
    scene: &SceneConfig,
) -> Result<DopplerMatrix> {
    let positions = traj.positions();
    let num_intervals = traj.velocities.len();
    let mut mat = DopplerMatrix::zeros(layout.len(), num_intervals);
    for (m, rx) in layout.stations.iter().enumerate() {
        for n in 0..num_intervals {
            let f = doppler_frequency_indexed(
                &positions[n],
                &traj.velocities[n],
                rx,
                scene,
                Some(m),
                Some(n),
            )?;
            mat.set(m, n, f);
        }
    }
    Ok(mat)
}

/// Mean square error over entries available in both matrices, normalized by
/// the number of such entries.
pub fn mse(measured: &DopplerMatrix, model: &DopplerMatrix) -> Result<f64> {
    if measured.num_stations != model.num_stations
        || measured.num_intervals != model.num_intervals
    {
        return Err(Error::DimensionMismatch {
            expected: format!(
                "{}x{}",
                measured.num_stations, measured.num_intervals
            ),
            got: format!("{}x{}", model.num_stations, model.num_intervals),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..measured.values.len() {
        if measured.available[i] && model.available[i] {
            let d = measured.values[i] - model.values[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("mse", "no jointly available entries"));
    }
    Ok(sum / count as f64)
}

/// Applies the same orthogonal map about the origin to every station, the
/// trajectory start and all velocities. With `reflect`, the y axis is flipped
/// before rotating by `theta`.
pub fn rotate_scene(
    layout: &StationLayout,
    traj: &Trajectory,
    theta: f64,
    reflect: bool,
) -> (StationLayout, Trajectory) {
    let (c, s) = (theta.cos(), theta.sin());
    let map = |x: f64, y: f64| -> (f64, f64) {
        let y = if reflect { -y } else { y };
        (c * x - s * y, s * x + c * y)
    };
    let stations = layout
        .stations
        .iter()
        .map(|p| {
            let (x, y) = map(p.x, p.y);
            Position2D::new(x, y)
        })
        .collect();
    let (sx, sy) = map(traj.start.x, traj.start.y);
    let velocities = traj
        .velocities
        .iter()
        .map(|v| {
            let (vx, vy) = map(v.vx, v.vy);
            Velocity2D::new(vx, vy)
        })
        .collect();
    (
        StationLayout::new(stations),
        Trajectory {
            dt: traj.dt,
            start: Position2D::new(sx, sy),
            velocities,
        },
    )
}
