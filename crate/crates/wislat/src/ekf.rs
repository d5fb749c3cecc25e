//! Constant-velocity extended Kalman filter over [x, y, vx, vy] with the
//! nonlinear bistatic-Doppler measurement model.
//!
//! The measurement function is the same code path as
//! [`crate::geometry::doppler_frequency`], so filter innovations and the
//! solver's model matrix agree bit for bit.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    doppler_frequency_indexed, DopplerMatrix, Position2D, SceneConfig, StationLayout, Trajectory,
    Velocity2D,
};

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    /// [x, y, vx, vy]
    pub s: Vector4<f64>,
    pub p: Matrix4<f64>,
}

impl EkfState {
    pub fn position(&self) -> Position2D {
        Position2D::new(self.s[0], self.s[1])
    }

    pub fn velocity(&self) -> Velocity2D {
        Velocity2D::new(self.s[2], self.s[3])
    }

    /// Minimum eigenvalue of the symmetrized covariance; the PSD invariant
    /// tolerates -1e-9.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        let sym = (self.p + self.p.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }
}

/// Filter parameters (`"ekf"` section of the scenario JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_vx: f64,
    pub sigma_vy: f64,
    /// Measurement noise level (Hz).
    pub sigma_fd: f64,
    pub p0_diag: [f64; 4],
    pub v_init: Velocity2D,
    /// Replace `v_init` with a least-squares fit of the first measurement
    /// column (the Doppler model is linear in velocity at a fixed position).
    /// Falls back to `v_init` when the fit is underdetermined.
    pub ls_v_init: bool,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            sigma_x: 0.5,
            sigma_y: 0.5,
            sigma_vx: 0.5,
            sigma_vy: 0.5,
            sigma_fd: 1.0,
            p0_diag: [0.01, 0.01, 1.0, 1.0],
            v_init: Velocity2D::zero(),
            ls_v_init: false,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_x, self.sigma_y, self.sigma_vx, self.sigma_vy, self.sigma_fd];
        if all.iter().any(|s| !(*s > 0.0)) || self.p0_diag.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::invalid("EkfConfig", "all sigmas and p0 entries must be > 0"));
        }
        Ok(())
    }

    /// Process-noise covariance with position/velocity couplings on the
    /// (1,3) and (2,4) pairs.
    pub fn process_noise(&self, dt: f64) -> Matrix4<f64> {
        let (sx2, sy2) = (self.sigma_x * self.sigma_x, self.sigma_y * self.sigma_y);
        let (svx2, svy2) = (self.sigma_vx * self.sigma_vx, self.sigma_vy * self.sigma_vy);
        let dt2 = dt * dt;
        let dt3 = dt2 * dt;
        Matrix4::new(
            sx2 * dt3 / 3.0, 0.0, sx2 * dt2 / 2.0, 0.0,
            0.0, sy2 * dt3 / 3.0, 0.0, sy2 * dt2 / 2.0,
            sx2 * dt2 / 2.0, 0.0, svx2 * dt, 0.0,
            0.0, sy2 * dt2 / 2.0, 0.0, svy2 * dt,
        )
    }
}

/// Per-interval measurement vector restricted by an availability mask.
#[derive(Debug, Clone)]
pub struct MeasurementSlice {
    pub z: Vec<f64>,
    pub availability: Vec<bool>,
}

impl MeasurementSlice {
    pub fn from_column(measured: &DopplerMatrix, n: usize) -> Self {
        let m = measured.num_stations();
        MeasurementSlice {
            z: (0..m).map(|i| measured.value(i, n)).collect(),
            availability: (0..m).map(|i| measured.is_available(i, n)).collect(),
        }
    }

    pub fn num_available(&self) -> usize {
        self.availability.iter().filter(|a| **a).count()
    }
}

pub fn transition_matrix(dt: f64) -> Matrix4<f64> {
    Matrix4::new(
        1.0, 0.0, dt, 0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Constant-velocity prediction step.
pub fn predict(state: &EkfState, cfg: &EkfConfig, dt: f64) -> EkfState {
    let f = transition_matrix(dt);
    EkfState {
        s: f * state.s,
        p: f * state.p * f.transpose() + cfg.process_noise(dt),
    }
}

/// Model Doppler at every station for the current state.
pub fn measurement_fn(
    state: &EkfState,
    layout: &StationLayout,
    scene: &SceneConfig,
) -> Result<Vec<f64>> {
    let p = state.position();
    let v = state.velocity();
    layout
        .stations
        .iter()
        .enumerate()
        .map(|(m, rx)| doppler_frequency_indexed(&p, &v, rx, scene, Some(m), None))
        .collect()
}

/// Closed-form measurement Jacobian, one row per station, columns
/// [df/dx, df/dy, df/dvx, df/dvy].
pub fn measurement_jacobian(
    state: &EkfState,
    layout: &StationLayout,
    scene: &SceneConfig,
) -> Result<DMatrix<f64>> {
    let (x, y, vx, vy) = (state.s[0], state.s[1], state.s[2], state.s[3]);
    let lam = scene.wavelength;
    let d_tx = (x * x + y * y).sqrt();
    if d_tx < crate::geometry::EPS_GEO {
        return Err(Error::DegenerateGeometry {
            what: "transmitter",
            eps: crate::geometry::EPS_GEO,
            m: None,
            n: None,
        });
    }
    let d_tx3 = d_tx * d_tx * d_tx;
    let mut jac = DMatrix::zeros(layout.len(), 4);
    for (m, rx) in layout.stations.iter().enumerate() {
        let (dx, dy) = (x - rx.x, y - rx.y);
        let d_rx = (dx * dx + dy * dy).sqrt();
        if d_rx < crate::geometry::EPS_GEO {
            return Err(Error::DegenerateGeometry {
                what: "station",
                eps: crate::geometry::EPS_GEO,
                m: Some(m),
                n: None,
            });
        }
        let d_rx3 = d_rx * d_rx * d_rx;
        let yy = y * y / d_tx3 + dy * dy / d_rx3;
        let xx = x * x / d_tx3 + dx * dx / d_rx3;
        let xy = x * y / d_tx3 + dx * dy / d_rx3;
        jac[(m, 0)] = (-vx * yy + vy * xy) / lam;
        jac[(m, 1)] = (vx * xy - vy * xx) / lam;
        jac[(m, 2)] = (-x / d_tx - dx / d_rx) / lam;
        jac[(m, 3)] = (-y / d_tx - dy / d_rx) / lam;
    }
    Ok(jac)
}

const MAX_INNOVATION_COND: f64 = 1e12;

/// Mask-aware measurement update; rows of the measurement model are
/// restricted to available stations and the covariance is re-symmetrized.
pub fn update(
    state: &EkfState,
    slice: &MeasurementSlice,
    layout: &StationLayout,
    scene: &SceneConfig,
    cfg: &EkfConfig,
    n: usize,
) -> Result<EkfState> {
    let idx: Vec<usize> = (0..layout.len())
        .filter(|&m| slice.availability.get(m).copied().unwrap_or(false))
        .collect();
    if idx.is_empty() {
        return Ok(state.clone());
    }
    let h_full = measurement_fn(state, layout, scene)?;
    let d_full = measurement_jacobian(state, layout, scene)?;
    let k = idx.len();
    let mut d = DMatrix::zeros(k, 4);
    let mut innov = DVector::zeros(k);
    for (row, &m) in idx.iter().enumerate() {
        for c in 0..4 {
            d[(row, c)] = d_full[(m, c)];
        }
        innov[row] = slice.z[m] - h_full[m];
    }
    let p = DMatrix::from_fn(4, 4, |i, j| state.p[(i, j)]);
    let mut s_mat = &d * &p * d.transpose();
    let r = cfg.sigma_fd * cfg.sigma_fd;
    for i in 0..k {
        s_mat[(i, i)] += r;
    }
    let sym = (&s_mat + s_mat.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for e in eig.iter() {
        lo = lo.min(*e);
        hi = hi.max(e.abs());
    }
    if lo <= 0.0 || hi / lo > MAX_INNOVATION_COND {
        return Err(Error::SingularInnovation { cond: hi / lo.max(f64::MIN_POSITIVE), n });
    }
    let s_inv = s_mat
        .try_inverse()
        .ok_or(Error::SingularInnovation { cond: f64::INFINITY, n })?;
    let gain = &p * d.transpose() * s_inv;
    let ds = &gain * innov;
    let mut s_new = state.s;
    for i in 0..4 {
        s_new[i] += ds[i];
    }
    let p_new = (DMatrix::identity(4, 4) - gain * d) * p;
    let mut p4 = Matrix4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            p4[(i, j)] = 0.5 * (p_new[(i, j)] + p_new[(j, i)]);
        }
    }
    Ok(EkfState { s: s_new, p: p4 })
}

/// EKF trajectory reconstruction from a known starting point and layout.
///
/// The state at instant 1 is updated against the first measurement column
/// without a prediction; afterwards each interval is predict-then-update.
/// Output velocities are the posterior velocity at each instant; positions
/// are re-derived from the starting point so the returned trajectory obeys
/// the forward-Euler representation exactly.
/// Closed-form velocity fit to the first measurement column: at a fixed
/// position the Doppler model is z = (1/lam)(u_tx + u_rx)^T v, so the
/// available rows form a linear system in v.
fn ls_initial_velocity(
    p1: &Position2D,
    layout: &StationLayout,
    measured: &DopplerMatrix,
    scene: &SceneConfig,
) -> Option<Velocity2D> {
    let d_tx = p1.norm();
    if d_tx < crate::geometry::EPS_GEO || measured.num_intervals() == 0 {
        return None;
    }
    let lam = scene.wavelength;
    let mut a = nalgebra::Matrix2::zeros();
    let mut b = nalgebra::Vector2::zeros();
    let mut rows = 0usize;
    for (m, rx) in layout.stations.iter().enumerate() {
        if !measured.is_available(m, 0) {
            continue;
        }
        let dx = rx.x - p1.x;
        let dy = rx.y - p1.y;
        let d_rx = (dx * dx + dy * dy).sqrt();
        if d_rx < crate::geometry::EPS_GEO {
            return None;
        }
        let h = nalgebra::Vector2::new(
            (-p1.x / d_tx + dx / d_rx) / lam,
            (-p1.y / d_tx + dy / d_rx) / lam,
        );
        a += h * h.transpose();
        b += h * measured.value(m, 0);
        rows += 1;
    }
    if rows < 2 {
        return None;
    }
    let eig = a.symmetric_eigenvalues();
    if eig.min() <= 0.0 || eig.amax() / eig.min() > 1e10 {
        return None;
    }
    let v = a.try_inverse()? * b;
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if !speed.is_finite() || speed > scene.v_max * 2.0 {
        return None;
    }
    Some(Velocity2D::new(v[0], v[1]))
}

pub fn reconstruct_trajectory(
    p1: &Position2D,
    layout: &StationLayout,
    measured: &DopplerMatrix,
    cfg: &EkfConfig,
    scene: &SceneConfig,
) -> Result<Trajectory> {
    if !p1.is_finite() {
        return Err(Error::invalid("reconstruct_trajectory", "non-finite p1"));
    }
    if measured.num_stations() != layout.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} stations", layout.len()),
            got: format!("{} measurement rows", measured.num_stations()),
        });
    }
    let num_intervals = measured.num_intervals();
    let v0 = if cfg.ls_v_init {
        ls_initial_velocity(p1, layout, measured, scene).unwrap_or(cfg.v_init)
    } else {
        cfg.v_init
    };
    let mut state = EkfState {
        s: Vector4::new(p1.x, p1.y, v0.vx, v0.vy),
        p: Matrix4::from_diagonal(&Vector4::from_row_slice(&cfg.p0_diag)),
    };
    let mut velocities = Vec::with_capacity(num_intervals);
    for n in 0..num_intervals {
        if n > 0 {
            state = predict(&state, cfg, scene.dt);
        }
        // The output trajectory integrates the filtered velocities from p1,
        // so within this reconstruction the positions are deterministic:
        // condition the covariance on the known position (zero its rows and
        // columns) so the update spends the innovation on velocity alone and
        // the linearization point stays on the dead-reckoned track.
        for i in 0..2 {
            for j in 0..4 {
                state.p[(i, j)] = 0.0;
                state.p[(j, i)] = 0.0;
            }
        }
        let slice = MeasurementSlice::from_column(measured, n);
        state = update(&state, &slice, layout, scene, cfg, n)?;
        velocities.push(state.velocity());
    }
    Trajectory::new(*p1, velocities, scene.dt)
}
