//! Electromagnetic kernel: in-waveguide propagation, near-field line-of-sight
//! channels and per-segment effective channels.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// A point on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn ground(&self) -> Point3 {
        Point3::new(self.x, self.y, 0.0)
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ground positions of the communication users and sensing targets of one
/// episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub users: Vec<Point2>,
    pub targets: Vec<Point2>,
}

impl Scenario {
    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if self.users.len() != cfg.user_count || self.targets.len() != cfg.target_count {
            return Err(Error::Config(format!(
                "scenario has {} users / {} targets, config expects {} / {}",
                self.users.len(),
                self.targets.len(),
                cfg.user_count,
                cfg.target_count
            )));
        }
        let inside = |p: &Point2| (0.0..=cfg.region_x_m).contains(&p.x) && (0.0..=cfg.region_y_m).contains(&p.y);
        if !self.users.iter().chain(&self.targets).all(inside) {
            return Err(Error::Config("scenario point outside the service region".into()));
        }
        Ok(())
    }
}

/// Returns `(free-space wavelength, guided wavelength)` in metres.
pub fn wavelengths(cfg: &SystemConfig) -> (f64, f64) {
    (cfg.wavelength(), cfg.guided_wavelength())
}

/// `exp(-j 2 pi distance / wavelength)`, reduced in cycles first so that long
/// paths keep their phase accuracy.
fn propagation_phasor(distance: f64, wavelength: f64) -> Complex64 {
    let cycles = (distance / wavelength).rem_euclid(1.0);
    Complex64::from_polar(1.0, -TAU * cycles)
}

/// Complex amplitude picked up between a segment feed and a pinching antenna,
/// including the even `1/sqrt(N)` power split across the segment's antennas.
pub fn in_waveguide_gain(feed_x: f64, antenna_x: f64, cfg: &SystemConfig) -> Complex64 {
    let run = (antenna_x - feed_x).abs();
    let magnitude = 10f64.powf(-cfg.attenuation_db_per_m * run / 20.0) / (cfg.antennas_per_segment as f64).sqrt();
    magnitude * propagation_phasor(run, cfg.guided_wavelength())
}

/// Spherical-wave line-of-sight coefficient `alpha exp(-j 2 pi r / lambda) / r`.
pub fn freespace_channel(antenna: &Point3, ground: &Point3, cfg: &SystemConfig) -> Complex64 {
    let r = antenna.distance(ground);
    (cfg.path_constant() / r) * propagation_phasor(r, cfg.wavelength())
}

/// Pinching-antenna positions along the waveguide axis, segment-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaLayout {
    segments: usize,
    per_segment: usize,
    positions: Vec<f64>,
}

impl AntennaLayout {
    pub fn new(segments: usize, per_segment: usize, positions: Vec<f64>) -> Result<Self> {
        if positions.len() != segments * per_segment {
            return Err(Error::Shape {
                expected: segments * per_segment,
                actual: positions.len(),
            });
        }
        Ok(AntennaLayout {
            segments,
            per_segment,
            positions,
        })
    }

    /// Antennas evenly spread over each segment, one per `L/N` cell at the cell
    /// centre, so neighbours sit exactly `L/N` apart.
    pub fn uniform(cfg: &SystemConfig) -> Self {
        let n = cfg.antennas_per_segment;
        let pitch = cfg.segment_length() / n as f64;
        let positions = (0..cfg.segment_count)
            .flat_map(|m| {
                let start = cfg.segment_span(m).0;
                (0..n).map(move |i| start + (i as f64 + 0.5) * pitch)
            })
            .collect();
        AntennaLayout {
            segments: cfg.segment_count,
            per_segment: n,
            positions,
        }
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn per_segment(&self) -> usize {
        self.per_segment
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn segment(&self, m: usize) -> &[f64] {
        &self.positions[m * self.per_segment..(m + 1) * self.per_segment]
    }

    /// 3-D location of an antenna at axis coordinate `x`.
    pub fn antenna_point(x: f64, cfg: &SystemConfig) -> Point3 {
        Point3::new(x, cfg.waveguide_y(), cfg.waveguide_height_m)
    }

    /// Every antenna inside its segment span.
    pub fn within_segments(&self, cfg: &SystemConfig) -> bool {
        (0..self.segments).all(|m| {
            let (lo, hi) = cfg.segment_span(m);
            self.segment(m).iter().all(|&x| x >= lo && x <= hi)
        })
    }

    /// Positions sorted within each segment with neighbours at least
    /// `min_spacing` apart. Sorted order makes the neighbour check cover every
    /// pair.
    pub fn spacing_ok(&self, min_spacing: f64) -> bool {
        (0..self.segments).all(|m| self.segment(m).windows(2).all(|w| w[1] - w[0] >= min_spacing))
    }

    pub fn is_feasible(&self, cfg: &SystemConfig) -> bool {
        self.segments == cfg.segment_count
            && self.per_segment == cfg.antennas_per_segment
            && self.within_segments(cfg)
            && self.spacing_ok(cfg.min_spacing_m)
    }
}

/// Per-segment effective channel `g_m = sum_n h(psi_n^m, point) a(feed_m, psi_n^m)`
/// towards one ground point; zero for inactive segments.
pub fn effective_channel(layout: &AntennaLayout, point: &Point3, active: &[bool], cfg: &SystemConfig) -> Vec<Complex64> {
    (0..layout.segments())
        .map(|m| {
            if !active[m] {
                return Complex64::new(0.0, 0.0);
            }
            let feed = cfg.feed_x(m);
            layout
                .segment(m)
                .iter()
                .map(|&x| {
                    let antenna = AntennaLayout::antenna_point(x, cfg);
                    freespace_channel(&antenna, point, cfg) * in_waveguide_gain(feed, x, cfg)
                })
                .sum()
        })
        .collect()
}

/// Row-major complex matrix with one row per ground point and one column per
/// segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ChannelMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ChannelMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Complex64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged channel rows");
        ChannelMatrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }
}

/// Effective channels from the whole layout to each of `points`.
pub fn channel_matrix(layout: &AntennaLayout, points: &[Point2], active: &[bool], cfg: &SystemConfig) -> ChannelMatrix {
    let data = points
        .iter()
        .flat_map(|p| effective_channel(layout, &p.ground(), active, cfg))
        .collect();
    ChannelMatrix {
        rows: points.len(),
        cols: layout.segments(),
        data,
    }
}
