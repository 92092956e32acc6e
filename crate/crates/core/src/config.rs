//! Physical and geometric parameters of the segmented-waveguide system.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SinrCombining;

/// Speed of light used throughout, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// Converts a power level in dBm to linear Watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Converts linear Watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Every physical quantity the simulator needs.
///
/// The waveguide is one straight line parallel to the x-axis at
/// `y = region_y_m / 2`, height `waveguide_height_m`, cut into
/// `segment_count` equal segments. Segment `m` (0-based) spans
/// `[m L, (m + 1) L]` with `L = waveguide_total_length_m / segment_count`
/// and is fed from its left end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub carrier_frequency_hz: f64,
    pub speed_of_light: f64,
    pub effective_refractive_index: f64,
    pub waveguide_total_length_m: f64,
    pub segment_count: usize,
    pub antennas_per_segment: usize,
    pub waveguide_height_m: f64,
    pub region_x_m: f64,
    pub region_y_m: f64,
    pub attenuation_db_per_m: f64,
    pub total_power_w: f64,
    pub noise_power_w: f64,
    pub bandwidth_hz: f64,
    pub sensing_threshold_w: f64,
    pub min_spacing_m: f64,
    pub user_count: usize,
    pub target_count: usize,
    pub sinr_combining: SinrCombining,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let carrier_frequency_hz = 28e9;
        let lambda = SPEED_OF_LIGHT / carrier_frequency_hz;
        SystemConfig {
            carrier_frequency_hz,
            speed_of_light: SPEED_OF_LIGHT,
            effective_refractive_index: 1.4,
            waveguide_total_length_m: 40.0,
            segment_count: 3,
            antennas_per_segment: 10,
            waveguide_height_m: 5.0,
            region_x_m: 50.0,
            region_y_m: 60.0,
            attenuation_db_per_m: 0.08,
            total_power_w: 100.0,
            noise_power_w: dbm_to_watts(-90.0),
            bandwidth_hz: 1.0,
            sensing_threshold_w: dbm_to_watts(-20.0),
            min_spacing_m: lambda / 2.0,
            user_count: 6,
            target_count: 1,
            sinr_combining: SinrCombining::Coherent,
        }
    }
}

impl SystemConfig {
    /// Free-space wavelength, m.
    pub fn wavelength(&self) -> f64 {
        self.speed_of_light / self.carrier_frequency_hz
    }

    /// Guided wavelength inside the dielectric waveguide, m.
    pub fn guided_wavelength(&self) -> f64 {
        self.wavelength() / self.effective_refractive_index
    }

    /// Length of a single segment, m.
    pub fn segment_length(&self) -> f64 {
        self.waveguide_total_length_m / self.segment_count as f64
    }

    /// `[start, end]` of segment `m` along the x-axis.
    pub fn segment_span(&self, m: usize) -> (f64, f64) {
        let len = self.segment_length();
        (m as f64 * len, (m + 1) as f64 * len)
    }

    /// x-coordinate of the feed point of segment `m`.
    pub fn feed_x(&self, m: usize) -> f64 {
        self.segment_span(m).0
    }

    /// y-coordinate shared by every point of the waveguide.
    pub fn waveguide_y(&self) -> f64 {
        self.region_y_m / 2.0
    }

    pub fn antenna_count(&self) -> usize {
        self.segment_count * self.antennas_per_segment
    }

    /// Free-space path constant `c / (4 pi f_c)`.
    pub fn path_constant(&self) -> f64 {
        self.speed_of_light / (4.0 * std::f64::consts::PI * self.carrier_frequency_hz)
    }

    /// Same hardware folded into one continuous guide with a single feed at
    /// `x = 0` and all `M N` antennas on it.
    pub fn single_waveguide(&self) -> SystemConfig {
        SystemConfig {
            segment_count: 1,
            antennas_per_segment: self.antenna_count(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("carrier_frequency_hz", self.carrier_frequency_hz),
            ("speed_of_light", self.speed_of_light),
            ("effective_refractive_index", self.effective_refractive_index),
            ("waveguide_total_length_m", self.waveguide_total_length_m),
            ("waveguide_height_m", self.waveguide_height_m),
            ("region_x_m", self.region_x_m),
            ("region_y_m", self.region_y_m),
            ("total_power_w", self.total_power_w),
            ("noise_power_w", self.noise_power_w),
            ("bandwidth_hz", self.bandwidth_hz),
            ("sensing_threshold_w", self.sensing_threshold_w),
            ("min_spacing_m", self.min_spacing_m),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {value}")));
            }
        }
        if !(self.attenuation_db_per_m.is_finite() && self.attenuation_db_per_m >= 0.0) {
            return Err(Error::Config(format!(
                "attenuation_db_per_m must be non-negative, got {}",
                self.attenuation_db_per_m
            )));
        }
        if self.segment_count == 0 || self.antennas_per_segment == 0 {
            return Err(Error::Config("segment_count and antennas_per_segment must be at least 1".into()));
        }
        if self.user_count == 0 {
            return Err(Error::Config("user_count must be at least 1".into()));
        }
        let needed = self.min_spacing_m * self.antennas_per_segment as f64;
        if needed > self.segment_length() {
            return Err(Error::Config(format!(
                "{} antennas at spacing {} m need {needed} m but a segment is only {} m",
                self.antennas_per_segment,
                self.min_spacing_m,
                self.segment_length()
            )));
        }
        Ok(())
    }
}
