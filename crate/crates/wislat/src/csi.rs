//! Synthetic CSI with time-varying hardware phase offsets, cross-antenna
//! ratio cancellation and STFT Doppler detection.
//!
//! The synthesized target path rotates as `exp(+j 2 pi phi(q))` with
//! `phi' = f_doppler`: a positive bistatic Doppler (shortening path) advances
//! the channel phase, which lands the spectral peak on the bin that maps back
//! to `+f` through the detector's frequency mapping. Both antennas share the
//! per-interval hardware offset `exp(-j 2 pi w(q))`, so the ratio cancels it
//! exactly.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SceneConfig;

/// Multipath channel description for one station (two antennas).
///
/// `static_gains[p]` lists the quasi-static path gains of antenna `p`, LoS
/// first; `target_gain[p]` is the gain of the path scattered off the moving
/// target. The LoS gain must dominate the target gain so the ratio stays in
/// phase with the rotating phasor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultipathConfig {
    pub static_gains: [Vec<Complex64>; 2],
    pub target_gain: [Complex64; 2],
    pub phase_offset_seed: u64,
}

impl MultipathConfig {
    pub fn validate(&self) -> Result<()> {
        for p in 0..2 {
            let los = self
                .static_gains[p]
                .first()
                .ok_or_else(|| Error::invalid("MultipathConfig", "no static paths"))?;
            if los.norm() <= self.target_gain[p].norm() {
                return Err(Error::invalid(
                    "MultipathConfig",
                    format!(
                        "antenna {p}: LoS gain {} must exceed target gain {}",
                        los.norm(),
                        self.target_gain[p].norm()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Sum of the quasi-static gains of antenna `p`.
    fn static_sum(&self, p: usize) -> Complex64 {
        self.static_gains[p].iter().sum()
    }
}

/// One detection window of two-antenna CSI samples centered on interval
/// `center_index`.
#[derive(Debug, Clone)]
pub struct CsiWindow {
    pub samples: Vec<[Complex64; 2]>,
    pub center_index: usize,
    pub q_half: usize,
}

impl CsiWindow {
    pub fn new(samples: Vec<[Complex64; 2]>, center_index: usize, q_half: usize) -> Result<Self> {
        let len = samples.len();
        if len != 2 * q_half + 1 || len < 8 {
            return Err(Error::invalid(
                "CsiWindow",
                format!("{len} samples for q_half = {q_half} (need 2Q+1 >= 8)"),
            ));
        }
        Ok(CsiWindow {
            samples,
            center_index,
            q_half,
        })
    }
}

/// STFT magnitudes for one time interval.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub magnitudes: Vec<f64>,
    pub n_fft: usize,
    pub fs: f64,
}

impl Spectrogram {
    /// Frequency (Hz) of bin `xi`, wrapped into [-fs/2, fs/2).
    pub fn bin_frequency(&self, xi: usize) -> f64 {
        let f = xi as f64 / self.n_fft as f64 * self.fs;
        if xi < self.n_fft.div_ceil(2) {
            f
        } else {
            f - self.fs
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,frequency_hz,magnitude\n");
        for (xi, mag) in self.magnitudes.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", xi, self.bin_frequency(xi), mag));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedDoppler {
    pub frequency: f64,
    pub peak_magnitude: f64,
    pub bin: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    #[default]
    Rectangular,
    Hann,
}

impl WindowFn {
    fn weight(&self, i: usize, len: usize) -> f64 {
        match self {
            WindowFn::Rectangular => 1.0,
            WindowFn::Hann => {
                let x = std::f64::consts::TAU * i as f64 / (len.max(2) - 1) as f64;
                0.5 * (1.0 - x.cos())
            }
        }
    }
}

/// Detector parameters (`"detector"` section of the scenario JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    /// Half window Q: detection uses 2Q+1 intervals.
    pub q_half: usize,
    pub n_fft: usize,
    /// Bins within this band around DC are never picked as the moving peak.
    pub f_guard: f64,
    /// A peak outside the guard band must reach this fraction of the in-guard
    /// maximum, otherwise the interval is reported as 0 Hz (static channel).
    pub dc_rejection: f64,
    pub window: WindowFn,
    /// Denominator magnitude floor for the antenna ratio.
    pub eps_ratio: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            q_half: 64,
            n_fft: 256,
            f_guard: 2.0,
            dc_rejection: 0.15,
            window: WindowFn::Rectangular,
            eps_ratio: 1e-12,
        }
    }
}

/// Synthesizes a two-antenna CSI stream whose target path follows the given
/// per-interval Doppler series. The hardware phase offset is i.i.d. uniform
/// per interval, drawn from `config.phase_offset_seed` and shared by both
/// antennas.
pub fn synthesize_csi(
    true_doppler_series: &[f64],
    config: &MultipathConfig,
    scene: &SceneConfig,
) -> Result<Vec<[Complex64; 2]>> {
    config.validate()?;
    let fs = scene.sampling_rate();
    for &f in true_doppler_series {
        if !f.is_finite() || f.abs() >= fs / 2.0 {
            return Err(Error::AliasedDoppler { f, fs });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.phase_offset_seed);
    let statics = [config.static_sum(0), config.static_sum(1)];
    let mut out = Vec::with_capacity(true_doppler_series.len());
    let mut phase = 0.0_f64;
    for &f in true_doppler_series {
        let omega: f64 = rng.gen_range(0.0..1.0);
        let offset = Complex64::from_polar(1.0, -std::f64::consts::TAU * omega);
        let rotor = Complex64::from_polar(1.0, std::f64::consts::TAU * phase);
        let h = [
            offset * (statics[0] + config.target_gain[0] * rotor),
            offset * (statics[1] + config.target_gain[1] * rotor),
        ];
        out.push(h);
        phase += f * scene.dt;
    }
    Ok(out)
}

/// Cross-antenna CSI ratio over a window; the common per-interval phase
/// factor cancels exactly.
pub fn csi_ratio(window: &CsiWindow) -> Result<Vec<Complex64>> {
    csi_ratio_with_eps(window, 1e-12)
}

pub fn csi_ratio_with_eps(window: &CsiWindow, eps_ratio: f64) -> Result<Vec<Complex64>> {
    window
        .samples
        .iter()
        .enumerate()
        .map(|(q, [h1, h2])| {
            if h2.norm() <= eps_ratio {
                Err(Error::NearZeroDenominator { q, eps: eps_ratio })
            } else {
                Ok(h1 / h2)
            }
        })
        .collect()
}

/// Zero-padded windowed DFT magnitudes of a ratio series.
pub fn stft_spectrogram(
    ratio: &[Complex64],
    n_fft: usize,
    window_fn: WindowFn,
    fs: f64,
) -> Result<Spectrogram> {
    if ratio.len() > n_fft {
        return Err(Error::WindowTooLong {
            len: ratio.len(),
            n_fft,
        });
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for (i, r) in ratio.iter().enumerate() {
        buf[i] = r * window_fn.weight(i, ratio.len());
    }
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    fft.process(&mut buf);
    Ok(Spectrogram {
        magnitudes: buf.iter().map(|c| c.norm()).collect(),
        n_fft,
        fs,
    })
}

/// Peak picking with a DC guard band. The plain argmax of the spectrogram
/// locks onto the static ratio offset at DC, so bins within `f_guard` of DC
/// are excluded; when nothing outside the guard rises above `dc_rejection`
/// times the in-guard maximum (only static leakage remains), the interval is
/// a 0 Hz detection.
pub fn detect_doppler(spec: &Spectrogram, params: &DetectorParams) -> DetectedDoppler {
    let zero = DetectedDoppler {
        frequency: 0.0,
        peak_magnitude: spec.magnitudes.first().copied().unwrap_or(0.0),
        bin: 0,
    };
    if spec.magnitudes.is_empty() {
        return zero;
    }
    let max_all = spec.magnitudes.iter().cloned().fold(0.0_f64, f64::max);
    let min_all = spec
        .magnitudes
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    // Entirely flat spectrum (e.g. all-zero input): nothing to pick.
    if max_all <= 0.0 || (max_all - min_all) <= 1e-12 * max_all {
        return zero;
    }
    let mut best_out: Option<(usize, f64)> = None;
    let mut best_guard: f64 = 0.0;
    for (xi, &mag) in spec.magnitudes.iter().enumerate() {
        if spec.bin_frequency(xi).abs() <= params.f_guard {
            best_guard = best_guard.max(mag);
        } else if best_out.map_or(true, |(_, m)| mag > m) {
            best_out = Some((xi, mag));
        }
    }
    match best_out {
        Some((xi, mag)) if mag >= params.dc_rejection * best_guard => DetectedDoppler {
            frequency: spec.bin_frequency(xi),
            peak_magnitude: mag,
            bin: xi,
        },
        _ => zero,
    }
}

/// Sliding-window detection over a per-interval CSI stream. Returns one
/// (value, available) pair per interval; intervals without a full centered
/// window, or whose window yields no accepted peak, are unavailable.
pub fn detect_doppler_series(
    csi_stream: &[[Complex64; 2]],
    params: &DetectorParams,
    scene: &SceneConfig,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let q = params.q_half;
    let win_len = 2 * q + 1;
    if csi_stream.len() < win_len {
        return Err(Error::StreamTooShort {
            len: csi_stream.len(),
            needed: win_len,
        });
    }
    let fs = scene.sampling_rate();
    let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
    let mut values = vec![0.0; csi_stream.len()];
    let mut available = vec![false; csi_stream.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); params.n_fft];
    for n in q..csi_stream.len() - q {
        let window = CsiWindow::new(csi_stream[n - q..=n + q].to_vec(), n, q)?;
        let ratio = csi_ratio_with_eps(&window, params.eps_ratio)?;
        if ratio.len() > params.n_fft {
            return Err(Error::WindowTooLong {
                len: ratio.len(),
                n_fft: params.n_fft,
            });
        }
        buf.fill(Complex64::new(0.0, 0.0));
        for (i, r) in ratio.iter().enumerate() {
            buf[i] = r * params.window.weight(i, ratio.len());
        }
        fft.process(&mut buf);
        let spec = Spectrogram {
            magnitudes: buf.iter().map(|c| c.norm()).collect(),
            n_fft: params.n_fft,
            fs,
        };
        let det = detect_doppler(&spec, params);
        values[n] = det.frequency;
        // A rejected peak (DC-dominated or flat spectrum) comes back as the
        // zero sentinel: no detection, so the interval stays unavailable.
        available[n] = det.bin != 0 || det.frequency != 0.0;
    }
    Ok((values, available))
}

/// CSI stream CSV: columns `q,re1,im1,re2,im2`.
pub fn csi_to_csv(stream: &[[Complex64; 2]]) -> String {
    let mut out = String::from("q,re1,im1,re2,im2\n");
    for (q, [h1, h2]) in stream.iter().enumerate() {
        out.push_str(&format!("{},{},{},{},{}\n", q, h1.re, h1.im, h2.re, h2.im));
    }
    out
}

pub fn csi_from_csv(text: &str) -> Result<Vec<[Complex64; 2]>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 && line.starts_with('q') {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(Error::Parse {
                line: lineno + 1,
                why: format!("expected 5 columns, got {}", cells.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Parse {
                line: lineno + 1,
                why: format!("bad value {s:?}: {e}"),
            })
        };
        out.push([
            Complex64::new(parse(cells[1])?, parse(cells[2])?),
            Complex64::new(parse(cells[3])?, parse(cells[4])?),
        ]);
    }
    Ok(out)
}
