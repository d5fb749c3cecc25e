//! Simulation harness: ground-truth scenario generation, noise injection,
//! gauge-aligned scoring, cross-run station aggregation, and the experiment
//! driver that fans runs out over a worker pool and writes report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::csi::{detect_doppler_series, synthesize_csi, DetectorParams, MultipathConfig};
use crate::ekf::EkfConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    model_doppler_matrix, rotate_scene, DopplerMatrix, Position2D, SceneConfig, StationLayout,
    Trajectory, Velocity2D,
};
use crate::solver::{solve, CandidateSets, SolverConfig, SolverResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Additive Gaussian noise on the model Doppler values (Hz).
    pub doppler_sigma: f64,
    /// Generate CSI streams and run the detector instead of adding noise.
    pub use_csi_path: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            doppler_sigma: 0.0,
            use_csi_path: false,
        }
    }
}

/// One ground-truth run: geometry, trajectory, noise, and blockage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub scene: SceneConfig,
    pub true_layout: StationLayout,
    pub true_traj: Trajectory,
    pub shape: Shape,
    pub seed: u64,
    pub noise: NoiseModel,
    /// (station index, [start, end) interval range) pairs masked unavailable.
    #[serde(default)]
    pub blockage: Vec<(usize, (usize, usize))>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub tracking_errors: Vec<f64>,
    pub localization_errors: Vec<f64>,
    pub tracking_median: f64,
    pub localization_median: f64,
    /// Medians without gauge alignment, for transparency.
    pub raw_tracking_median: f64,
    pub raw_localization_median: f64,
    pub final_mse: f64,
    pub gauge_theta: f64,
    pub gauge_reflect: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub stations: Vec<Position2D>,
    pub mean_error_before: f64,
    pub mean_error_after: f64,
    /// Estimates kept by the density filter, per station.
    pub kept_counts: Vec<usize>,
    pub total_runs: usize,
}

fn median(sorted_or_not: &[f64]) -> f64 {
    if sorted_or_not.is_empty() {
        return f64::NAN;
    }
    let mut v = sorted_or_not.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ground-truth trajectory for one of the three test shapes, centered on the
/// transmitter. Polygons use an integer number of steps per edge so the
/// velocity takes exactly one value per edge and the path closes exactly;
/// the circle advances at constant angular rate with exact chord velocities.
pub fn generate_trajectory(
    shape: Shape,
    arena: f64,
    speed: f64,
    scene: &SceneConfig,
) -> Result<Trajectory> {
    if !(speed > 0.0 && speed <= scene.v_max) {
        return Err(Error::invalid("generate_trajectory", "speed outside (0, v_max]"));
    }
    let dt = scene.dt;
    let traj = match shape {
        Shape::Circle => {
            let radius = 0.3 * arena;
            let omega = speed / radius;
            let steps = (std::f64::consts::TAU / (omega * dt)).round().max(8.0) as usize;
            let omega = std::f64::consts::TAU / (steps as f64 * dt);
            let mut velocities = Vec::with_capacity(steps);
            for n in 0..steps {
                let a0 = omega * dt * n as f64;
                let a1 = omega * dt * (n + 1) as f64;
                velocities.push(Velocity2D::new(
                    radius * (a1.cos() - a0.cos()) / dt,
                    radius * (a1.sin() - a0.sin()) / dt,
                ));
            }
            Trajectory::new(Position2D::new(radius, 0.0), velocities, dt)?
        }
        Shape::Square => {
            let half = 0.2 * arena;
            let corners = [
                Position2D::new(-half, -half),
                Position2D::new(half, -half),
                Position2D::new(half, half),
                Position2D::new(-half, half),
            ];
            polygon_trajectory(&corners, speed, dt)?
        }
        Shape::Triangle => {
            let r = 0.28 * arena;
            let corners: Vec<Position2D> = (0..3)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / 3.0 + std::f64::consts::FRAC_PI_2;
                    Position2D::new(r * a.cos(), r * a.sin())
                })
                .collect();
            polygon_trajectory(&corners, speed, dt)?
        }
    };
    let half_arena = arena / 2.0;
    let extent = traj
        .positions()
        .iter()
        .map(|p| p.x.abs().max(p.y.abs()))
        .fold(0.0, f64::max);
    if extent > half_arena {
        return Err(Error::ShapeExceedsArena {
            extent,
            arena: half_arena,
        });
    }
    Ok(traj)
}

fn polygon_trajectory(corners: &[Position2D], speed: f64, dt: f64) -> Result<Trajectory> {
    let mut velocities = Vec::new();
    for i in 0..corners.len() {
        let a = corners[i];
        let b = corners[(i + 1) % corners.len()];
        let ex = b.x - a.x;
        let ey = b.y - a.y;
        let len = (ex * ex + ey * ey).sqrt();
        let steps = (len / (speed * dt)).round().max(1.0) as usize;
        let v = Velocity2D::new(ex / (steps as f64 * dt), ey / (steps as f64 * dt));
        velocities.extend(std::iter::repeat(v).take(steps));
    }
    Trajectory::new(corners[0], velocities, dt)
}

/// Measured Doppler matrix for a scenario: either the analytic model plus
/// seeded Gaussian noise, or the full CSI synthesis/detection pipeline.
/// Blockage ranges are masked afterwards and the ≥3-stations-per-interval
/// contract is validated.
pub fn generate_measurements(scn: &Scenario, detector: &DetectorParams) -> Result<DopplerMatrix> {
    let mut measured = if scn.noise.use_csi_path {
        csi_path_measurements(scn, detector)?
    } else {
        let mut m = model_doppler_matrix(&scn.true_traj, &scn.true_layout, &scn.scene)?;
        if scn.noise.doppler_sigma > 0.0 {
            let normal = Normal::new(0.0, scn.noise.doppler_sigma)
                .map_err(|_| Error::invalid("NoiseModel", "bad doppler_sigma"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
            for s in 0..m.num_stations() {
                for n in 0..m.num_intervals() {
                    let v = m.value(s, n) + normal.sample(&mut rng);
                    m.set(s, n, v);
                }
            }
        }
        m
    };
    for &(station, (start, end)) in &scn.blockage {
        for n in start..end.min(measured.num_intervals()) {
            measured.mark_unavailable(station, n);
        }
    }
    measured.validate(&scn.scene, 3)?;
    Ok(measured)
}

fn csi_path_measurements(scn: &Scenario, detector: &DetectorParams) -> Result<DopplerMatrix> {
    let model = model_doppler_matrix(&scn.true_traj, &scn.true_layout, &scn.scene)?;
    let m_count = model.num_stations();
    let n_count = model.num_intervals();
    let q = detector.q_half;
    let mut measured = DopplerMatrix::zeros(m_count, n_count);
    for s in 0..m_count {
        // Replicate-pad the Doppler series so every interval has a full
        // centered detection window.
        let mut series = Vec::with_capacity(n_count + 2 * q);
        let row = model.row(s).0;
        series.extend(std::iter::repeat(row[0]).take(q));
        series.extend_from_slice(row);
        series.extend(std::iter::repeat(row[n_count - 1]).take(q));
        let channel = MultipathConfig {
            static_gains: [
                vec![num_complex::Complex64::new(1.0, 0.0)],
                vec![num_complex::Complex64::new(0.9, -0.2)],
            ],
            target_gain: [
                num_complex::Complex64::new(0.6, 0.15),
                num_complex::Complex64::new(0.45, -0.3),
            ],
            phase_offset_seed: scn.seed.wrapping_add(s as u64),
        };
        let stream = synthesize_csi(&series, &channel, &scn.scene)?;
        let (mut values, available) = detect_doppler_series(&stream, detector, &scn.scene)?;
        fill_detection_gaps(&mut values, &available, q);
        for n in 0..n_count {
            measured.set(s, n, values[n + q]);
        }
    }
    Ok(measured)
}

/// Interpolate over isolated detector rejections in the interior of the
/// series so downstream consumers see a gap-free per-interval track.
fn fill_detection_gaps(values: &mut [f64], available: &[bool], q: usize) {
    let hi = values.len() - q;
    let anchors: Vec<usize> = (q..hi).filter(|&n| available[n]).collect();
    if anchors.is_empty() {
        return;
    }
    for n in q..hi {
        if available[n] {
            continue;
        }
        let next = anchors.partition_point(|&a| a < n);
        values[n] = match (next.checked_sub(1).map(|i| anchors[i]), anchors.get(next)) {
            (Some(a), Some(&b)) => {
                let t = (n - a) as f64 / (b - a) as f64;
                values[a] * (1.0 - t) + values[b] * t
            }
            (Some(a), None) => values[a],
            (None, Some(&b)) => values[b],
            (None, None) => unreachable!(),
        };
    }
}

/// Best orthogonal transform about the origin (rotation or reflection)
/// mapping the estimated layout onto the true one, found in closed form
/// over both determinant branches.
pub fn gauge_align(
    est_layout: &StationLayout,
    est_traj: &Trajectory,
    true_layout: &StationLayout,
) -> (f64, bool, StationLayout, Trajectory) {
    let best = [false, true].map(|reflect| {
        let mut num = 0.0;
        let mut den = 0.0;
        for (e, t) in est_layout.stations.iter().zip(&true_layout.stations) {
            let (ex, ey) = if reflect { (e.x, -e.y) } else { (e.x, e.y) };
            num += t.y * ex - t.x * ey;
            den += t.x * ex + t.y * ey;
        }
        let theta = num.atan2(den);
        let (l, _) = rotate_scene(est_layout, est_traj, theta, reflect);
        let residual: f64 = l
            .stations
            .iter()
            .zip(&true_layout.stations)
            .map(|(a, b)| a.distance_to(b).powi(2))
            .sum();
        (residual, theta, reflect)
    });
    let (_, theta, reflect) = if best[0].0 <= best[1].0 { best[0] } else { best[1] };
    let (layout, traj) = rotate_scene(est_layout, est_traj, theta, reflect);
    (theta, reflect, layout, traj)
}

pub fn evaluate_run(result: &SolverResult, scn: &Scenario) -> RunReport {
    let (theta, reflect, aligned_layout, aligned_traj) =
        gauge_align(&result.layout, &result.trajectory, &scn.true_layout);
    let true_positions = scn.true_traj.positions();
    let est_positions = aligned_traj.positions();
    let raw_positions = result.trajectory.positions();
    let n = true_positions.len().min(est_positions.len());
    let tracking_errors: Vec<f64> = (0..n)
        .map(|i| est_positions[i].distance_to(&true_positions[i]))
        .collect();
    let raw_tracking: Vec<f64> = (0..n)
        .map(|i| raw_positions[i].distance_to(&true_positions[i]))
        .collect();
    let localization_errors: Vec<f64> = aligned_layout
        .stations
        .iter()
        .zip(&scn.true_layout.stations)
        .map(|(a, b)| a.distance_to(b))
        .collect();
    let raw_localization: Vec<f64> = result
        .layout
        .stations
        .iter()
        .zip(&scn.true_layout.stations)
        .map(|(a, b)| a.distance_to(b))
        .collect();
    RunReport {
        tracking_median: median(&tracking_errors),
        localization_median: median(&localization_errors),
        raw_tracking_median: median(&raw_tracking),
        raw_localization_median: median(&raw_localization),
        tracking_errors,
        localization_errors,
        final_mse: result.mse_trace.last().copied().unwrap_or(f64::NAN),
        gauge_theta: theta,
        gauge_reflect: reflect,
    }
}

/// Pool gauge-aligned station estimates across runs sharing a true layout,
/// drop low-density outliers, and average the rest.
pub fn aggregate_stations(
    runs: &[(&SolverResult, &Scenario)],
    eps: f64,
    min_pts: usize,
) -> Result<AggregateReport> {
    if runs.len() < 2 {
        return Err(Error::invalid("aggregate_stations", "need at least 2 runs"));
    }
    let reference = &runs[0].1.true_layout;
    for (i, (_, scn)) in runs.iter().enumerate() {
        if scn.true_layout != *reference {
            return Err(Error::LayoutMismatch { run: i });
        }
    }
    let m_count = reference.len();
    let mut per_station: Vec<Vec<Position2D>> = vec![Vec::new(); m_count];
    let mut before_sum = 0.0;
    let mut before_count = 0usize;
    for (result, scn) in runs {
        let (_, _, aligned, _) = gauge_align(&result.layout, &result.trajectory, reference);
        for (m, p) in aligned.stations.iter().enumerate() {
            before_sum += p.distance_to(&scn.true_layout.stations[m]);
            before_count += 1;
            per_station[m].push(*p);
        }
    }
    let mut stations = Vec::with_capacity(m_count);
    let mut kept_counts = Vec::with_capacity(m_count);
    let mut after_sum = 0.0;
    for (m, pts) in per_station.iter().enumerate() {
        let dense: Vec<&Position2D> = pts
            .iter()
            .filter(|p| {
                pts.iter()
                    .filter(|q| !std::ptr::eq(*p, *q) && p.distance_to(q) <= eps)
                    .count()
                    >= min_pts
            })
            .collect();
        let kept: Vec<&Position2D> = if dense.is_empty() { pts.iter().collect() } else { dense };
        let inv = 1.0 / kept.len() as f64;
        let mean = Position2D::new(
            kept.iter().map(|p| p.x).sum::<f64>() * inv,
            kept.iter().map(|p| p.y).sum::<f64>() * inv,
        );
        after_sum += mean.distance_to(&reference.stations[m]);
        kept_counts.push(kept.len());
        stations.push(mean);
    }
    Ok(AggregateReport {
        stations,
        mean_error_before: before_sum / before_count.max(1) as f64,
        mean_error_after: after_sum / m_count as f64,
        kept_counts,
        total_runs: runs.len(),
    })
}

/// One scheduled run of an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub shape: Shape,
    pub seed: u64,
    pub doppler_sigma: f64,
    pub report: Option<RunReport>,
    pub error: Option<String>,
    pub mse_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunRecord>,
    pub aggregate: Option<AggregateReport>,
}

/// Build the scenario list for an experiment config. The true layout is
/// drawn once (all runs share it, as in a fixed room) and each (shape, seed,
/// noise level) triple becomes one run.
pub fn build_scenarios(cfg: &AppConfig) -> Result<Vec<Scenario>> {
    let exp = &cfg.experiment;
    let layout = random_layout(
        exp.layout_seed,
        exp.num_stations,
        exp.annulus_min,
        exp.annulus_max,
    );
    let mut scenarios = Vec::new();
    for &shape in &exp.shapes {
        let traj = generate_trajectory(shape, exp.arena, exp.speed, &cfg.scene)?;
        for s in 0..exp.seeds_per_shape {
            for &sigma in &exp.noise_levels {
                scenarios.push(Scenario {
                    scene: cfg.scene.clone(),
                    true_layout: layout.clone(),
                    true_traj: traj.clone(),
                    shape,
                    seed: exp.base_seed
                        .wrapping_add(s)
                        .wrapping_mul(2)
                        .wrapping_add(if sigma > 0.0 { 1 } else { 0 }),
                    noise: NoiseModel {
                        doppler_sigma: sigma,
                        use_csi_path: exp.use_csi_path,
                    },
                    blockage: exp.blockage.clone(),
                });
            }
        }
    }
    Ok(scenarios)
}

pub fn random_layout(seed: u64, m: usize, r_min: f64, r_max: f64) -> StationLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StationLayout::new(
        (0..m)
            .map(|_| {
                let r = rng.gen_range(r_min..r_max);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                Position2D::new(r * a.cos(), r * a.sin())
            })
            .collect(),
    )
}

/// Solve one scenario with the configured solver stack.
pub fn run_scenario(
    scn: &Scenario,
    detector: &DetectorParams,
    ekf: &EkfConfig,
    solver_cfg: &SolverConfig,
) -> Result<SolverResult> {
    let measured = generate_measurements(scn, detector)?;
    let candidates = CandidateSets::generate(&solver_cfg.candidates, scn.true_layout.len());
    solve(&measured, &candidates, solver_cfg, ekf, &scn.scene)
}

fn write_cdf(path: &Path, errors: &[f64]) -> Result<()> {
    let mut v = errors.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mut out = String::from("error_m,cum_fraction\n");
    let n = v.len();
    for (i, e) in v.iter().enumerate() {
        out.push_str(&format!("{:.6},{:.6}\n", e, (i + 1) as f64 / n as f64));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Run every scenario of the experiment, write per-run reports, pooled CDF
/// tables (both per-sample and per-run-median poolings), and the aggregated
/// station estimate. Failed runs are recorded and skipped in the pooled
/// outputs. Deterministic for a fixed config regardless of worker count.
pub fn run_experiment(cfg: &AppConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let scenarios = build_scenarios(cfg)?;
    fs::create_dir_all(out_dir.join("runs"))?;
    let results: Vec<Result<SolverResult>> = scenarios
        .par_iter()
        .map(|scn| run_scenario(scn, &cfg.detector, &cfg.ekf, &cfg.solver))
        .collect();

    let mut records = Vec::with_capacity(scenarios.len());
    let mut pooled_tracking = Vec::new();
    let mut pooled_localization = Vec::new();
    let mut tracking_medians = Vec::new();
    let mut localization_medians = Vec::new();
    let mut aggregate_input = Vec::new();
    for (i, (scn, res)) in scenarios.iter().zip(&results).enumerate() {
        let id = format!("{:03}_{}_{}", i, scn.shape, scn.seed);
        let record = match res {
            Ok(result) => {
                let report = evaluate_run(result, scn);
                pooled_tracking.extend_from_slice(&report.tracking_errors);
                pooled_localization.extend_from_slice(&report.localization_errors);
                tracking_medians.push(report.tracking_median);
                localization_medians.push(report.localization_median);
                aggregate_input.push((result, scn));
                RunRecord {
                    id,
                    shape: scn.shape,
                    seed: scn.seed,
                    doppler_sigma: scn.noise.doppler_sigma,
                    mse_trace: result.mse_trace.clone(),
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => RunRecord {
                id,
                shape: scn.shape,
                seed: scn.seed,
                doppler_sigma: scn.noise.doppler_sigma,
                mse_trace: Vec::new(),
                report: None,
                error: Some(e.to_string()),
            },
        };
        let dir = out_dir.join("runs").join(&record.id);
        fs::create_dir_all(&dir)?;
        let mut f = fs::File::create(dir.join("report.json"))?;
        f.write_all(serde_json::to_string_pretty(&record)?.as_bytes())?;
        records.push(record);
    }
    if !pooled_tracking.is_empty() {
        write_cdf(&out_dir.join("cdf_tracking.csv"), &pooled_tracking)?;
        write_cdf(&out_dir.join("cdf_localization.csv"), &pooled_localization)?;
        write_cdf(&out_dir.join("cdf_tracking_run_medians.csv"), &tracking_medians)?;
        write_cdf(
            &out_dir.join("cdf_localization_run_medians.csv"),
            &localization_medians,
        )?;
    }
    let aggregate = if aggregate_input.len() >= 2 {
        let agg = aggregate_stations(
            &aggregate_input
                .iter()
                .map(|(r, s)| (*r, *s))
                .collect::<Vec<_>>(),
            cfg.experiment.cluster_eps,
            cfg.experiment.cluster_min_pts,
        )?;
        fs::write(
            out_dir.join("aggregate.json"),
            serde_json::to_string_pretty(&agg)?,
        )?;
        Some(agg)
    } else {
        None
    };
    let report = ExperimentReport {
        runs: records,
        aggregate,
    };
    fs::write(
        out_dir.join("experiment.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
