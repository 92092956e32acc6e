//! Communication and sensing metrics: per-user SINR, sum rate, target
//! illumination power, and the feasibility flags of the joint design problem.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::physics::{AntennaLayout, ChannelMatrix};

/// How a user's per-segment contributions add up at the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SinrCombining {
    /// `|sum_m g_m w_m|^2`: segments driven coherently by one precoder.
    #[default]
    Coherent,
    /// `sum_m |g_m w_m|^2`: segment powers add with no cross terms.
    PerSegmentPower,
}

impl std::str::FromStr for SinrCombining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coherent" => Ok(SinrCombining::Coherent),
            "per_segment_power" => Ok(SinrCombining::PerSegmentPower),
            other => Err(Error::UnknownName {
                kind: "sinr_combining",
                value: other.into(),
            }),
        }
    }
}

impl std::fmt::Display for SinrCombining {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SinrCombining::Coherent => "coherent",
            SinrCombining::PerSegmentPower => "per_segment_power",
        })
    }
}

/// Transmit beamforming coefficients, one per (user, segment), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamMatrix {
    users: usize,
    segments: usize,
    w: Vec<Complex64>,
}

impl BeamMatrix {
    pub fn zeros(users: usize, segments: usize) -> Self {
        BeamMatrix {
            users,
            segments,
            w: vec![Complex64::new(0.0, 0.0); users * segments],
        }
    }

    pub fn new(users: usize, segments: usize, w: Vec<Complex64>) -> Result<Self> {
        if w.len() != users * segments {
            return Err(Error::Shape {
                expected: users * segments,
                actual: w.len(),
            });
        }
        Ok(BeamMatrix { users, segments, w })
    }

    /// Equal-power, zero-phase coefficients with `||W||_F^2 = total_power`.
    pub fn equal_power(users: usize, segments: usize, total_power: f64) -> Self {
        let amp = (total_power / (users * segments) as f64).sqrt();
        BeamMatrix {
            users,
            segments,
            w: vec![Complex64::new(amp, 0.0); users * segments],
        }
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn get(&self, k: usize, m: usize) -> Complex64 {
        self.w[k * self.segments + m]
    }

    pub fn set(&mut self, k: usize, m: usize, value: Complex64) {
        self.w[k * self.segments + m] = value;
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.w[k * self.segments..(k + 1) * self.segments]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [Complex64] {
        &mut self.w[k * self.segments..(k + 1) * self.segments]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.w
    }

    /// Squared Frobenius norm, i.e. total transmit power.
    pub fn power(&self) -> f64 {
        self.w.iter().map(Complex64::norm_sqr).sum()
    }

    /// Power feeding segment `m`.
    pub fn segment_power(&self, m: usize) -> f64 {
        (0..self.users).map(|k| self.get(k, m).norm_sqr()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.w {
            *w *= factor;
        }
    }

    pub fn zero_segment(&mut self, m: usize) {
        for k in 0..self.users {
            self.set(k, m, Complex64::new(0.0, 0.0));
        }
    }
}

/// Received amplitude at the point of channel row `r` from the symbol of user `k`.
fn combined(g: &ChannelMatrix, r: usize, w: &BeamMatrix, k: usize) -> Complex64 {
    g.row(r).iter().zip(w.row(k)).map(|(a, b)| a * b).sum()
}

/// Received power at channel row `r` from user `k`'s symbol under `mode`.
fn received_power(g: &ChannelMatrix, r: usize, w: &BeamMatrix, k: usize, mode: SinrCombining) -> f64 {
    match mode {
        SinrCombining::Coherent => combined(g, r, w, k).norm_sqr(),
        SinrCombining::PerSegmentPower => g.row(r).iter().zip(w.row(k)).map(|(a, b)| (a * b).norm_sqr()).sum(),
    }
}

/// Signal-to-interference-plus-noise ratio of user `k`.
pub fn sinr(k: usize, g: &ChannelMatrix, w: &BeamMatrix, noise_power: f64, mode: SinrCombining) -> f64 {
    let signal = received_power(g, k, w, k, mode);
    let interference: f64 = (0..w.users())
        .filter(|&j| j != k)
        .map(|j| received_power(g, k, w, j, mode))
        .sum();
    signal / (interference + noise_power)
}

/// Achievable rate of every user, `B log2(1 + SINR_k)`.
pub fn user_rates(g: &ChannelMatrix, w: &BeamMatrix, noise_power: f64, bandwidth: f64, mode: SinrCombining) -> Vec<f64> {
    (0..w.users())
        .map(|k| bandwidth * sinr(k, g, w, noise_power, mode).ln_1p() / std::f64::consts::LN_2)
        .collect()
}

pub fn sum_rate(g: &ChannelMatrix, w: &BeamMatrix, noise_power: f64, bandwidth: f64, mode: SinrCombining) -> f64 {
    user_rates(g, w, noise_power, bandwidth, mode).iter().sum()
}

/// Illumination power at each target: the expected received power over
/// independent unit-power user symbols, `sum_k |sum_m g_m W_{k,m}|^2`.
pub fn illumination_power(gs: &ChannelMatrix, w: &BeamMatrix) -> Vec<f64> {
    (0..gs.rows())
        .map(|t| (0..w.users()).map(|k| combined(gs, t, w, k).norm_sqr()).sum())
        .collect()
}

/// Satisfaction of the sensing, power, activation-range and spacing
/// constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintFlags {
    pub sensing: bool,
    pub power: bool,
    pub activation_range: bool,
    pub spacing: bool,
}

impl ConstraintFlags {
    /// Everything except sensing, which is a soft constraint in the reward.
    pub fn hard_feasible(&self) -> bool {
        self.power && self.activation_range && self.spacing
    }

    pub fn all(&self) -> bool {
        self.sensing && self.hard_feasible()
    }
}

/// Relative slack allowed on the power budget.
pub const POWER_SLACK: f64 = 1e-9;

pub fn check_constraints(
    layout: &AntennaLayout,
    w: &BeamMatrix,
    activation: &[f64],
    illumination: &[f64],
    cfg: &SystemConfig,
) -> ConstraintFlags {
    ConstraintFlags {
        sensing: illumination.iter().all(|&g| g >= cfg.sensing_threshold_w),
        power: w.power() <= cfg.total_power_w * (1.0 + POWER_SLACK),
        activation_range: activation.iter().all(|a| (0.0..=1.0).contains(a)),
        spacing: layout.spacing_ok(cfg.min_spacing_m),
    }
}

/// Metrics of one evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_user_rate: Vec<f64>,
    pub sum_rate: f64,
    pub per_target_illumination: Vec<f64>,
    pub constraint_flags: ConstraintFlags,
}

impl MetricReport {
    /// `gu`/`gs` are effective channels to users/targets already gated by the
    /// segment activation.
    pub fn evaluate(
        gu: &ChannelMatrix,
        gs: &ChannelMatrix,
        layout: &AntennaLayout,
        w: &BeamMatrix,
        activation: &[f64],
        cfg: &SystemConfig,
    ) -> Self {
        let per_user_rate = user_rates(gu, w, cfg.noise_power_w, cfg.bandwidth_hz, cfg.sinr_combining);
        let sum_rate = per_user_rate.iter().sum();
        let per_target_illumination = illumination_power(gs, w);
        let constraint_flags = check_constraints(layout, w, activation, &per_target_illumination, cfg);
        MetricReport {
            per_user_rate,
            sum_rate,
            per_target_illumination,
            constraint_flags,
        }
    }

    pub fn min_illumination(&self) -> f64 {
        self.per_target_illumination.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_illumination(&self) -> f64 {
        if self.per_target_illumination.is_empty() {
            return 0.0;
        }
        self.per_target_illumination.iter().sum::<f64>() / self.per_target_illumination.len() as f64
    }
}
