//! The SWAN-ISAC decision process: scenario generation, projection of raw
//! actions onto the feasible set, segment gating, reward and step/reset.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::metrics::{BeamMatrix, MetricReport};
use crate::physics::{channel_matrix, AntennaLayout, ChannelMatrix, Point2, Scenario};

/// Radius of the disc that holds every point of a dense scenario, m.
pub const DENSE_RADIUS_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Users on the left half of the region, targets on the right half.
    Sparse,
    /// Users and targets packed into one 10 m disc.
    Dense,
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sparse" => Ok(ScenarioKind::Sparse),
            "dense" => Ok(ScenarioKind::Dense),
            _ => Err(Error::UnknownName {
                kind: "scenario",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Sparse => "sparse",
            ScenarioKind::Dense => "dense",
        })
    }
}

/// Transmission protocol of the base station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Hybrid segment selection and multiplexing: segments switch on and off.
    #[serde(rename = "HSSM")]
    Hssm,
    /// Segment multiplexing: every segment always active.
    #[serde(rename = "SM")]
    Sm,
    /// One continuous waveguide with a single feed and RF chain.
    #[serde(rename = "PASS")]
    Pass,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HSSM" => Ok(Protocol::Hssm),
            "SM" => Ok(Protocol::Sm),
            "PASS" => Ok(Protocol::Pass),
            _ => Err(Error::UnknownName {
                kind: "protocol",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Hssm => "HSSM",
            Protocol::Sm => "SM",
            Protocol::Pass => "PASS",
        })
    }
}

/// Mixes a base seed with a stream tag and an index into an independent seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(base) ^ stream) ^ index)
}

/// Draws the user and target positions of one episode.
pub fn make_scenario(kind: ScenarioKind, cfg: &SystemConfig, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.region_x_m, cfg.region_y_m);
    match kind {
        ScenarioKind::Sparse => {
            let half = w / 2.0;
            let users = (0..cfg.user_count)
                .map(|_| Point2::new(rng.random_range(0.0..half), rng.random_range(0.0..=h)))
                .collect();
            let targets = (0..cfg.target_count)
                .map(|_| Point2::new(rng.random_range(half..=w), rng.random_range(0.0..=h)))
                .collect();
            Scenario { users, targets }
        }
        ScenarioKind::Dense => {
            let centre = Point2::new(rng.random_range(0.0..=w), rng.random_range(0.0..=h));
            let mut draw = || loop {
                let r = DENSE_RADIUS_M * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let p = Point2::new(centre.x + r * phi.cos(), centre.y + r * phi.sin());
                if (0.0..=w).contains(&p.x) && (0.0..=h).contains(&p.y) {
                    break p;
                }
            };
            let users = (0..cfg.user_count).map(|_| draw()).collect();
            let targets = (0..cfg.target_count).map(|_| draw()).collect();
            Scenario { users, targets }
        }
    }
}

/// Raw continuous action before projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    /// Axis coordinates in metres, segment-major.
    pub raw_positions: Vec<f64>,
    pub raw_segment_logits: Vec<f64>,
    /// Interleaved `(re, im)` of `W`, user-major.
    pub raw_beam: Vec<f64>,
}

impl EnvAction {
    pub fn dim(cfg: &SystemConfig) -> usize {
        cfg.antenna_count() + cfg.segment_count + 2 * cfg.user_count * cfg.segment_count
    }

    pub fn from_flat(cfg: &SystemConfig, flat: &[f64]) -> Result<Self> {
        let dim = Self::dim(cfg);
        if flat.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                actual: flat.len(),
            });
        }
        let p = cfg.antenna_count();
        let m = cfg.segment_count;
        Ok(EnvAction {
            raw_positions: flat[..p].to_vec(),
            raw_segment_logits: flat[p..p + m].to_vec(),
            raw_beam: flat[p + m..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.raw_positions.len() + self.raw_segment_logits.len() + self.raw_beam.len());
        v.extend_from_slice(&self.raw_positions);
        v.extend_from_slice(&self.raw_segment_logits);
        v.extend_from_slice(&self.raw_beam);
        v
    }
}

/// Per-dimension box over the flat action vector. Policies act in `[-1, 1]`
/// coordinates that map affinely onto this box; projection handles anything
/// outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Half-width of the logit box.
const LOGIT_BOUND: f64 = 1.0;

impl ActionSpace {
    pub fn for_config(cfg: &SystemConfig) -> Self {
        let mut low = Vec::with_capacity(EnvAction::dim(cfg));
        let mut high = Vec::with_capacity(EnvAction::dim(cfg));
        for m in 0..cfg.segment_count {
            let (lo, hi) = cfg.segment_span(m);
            for _ in 0..cfg.antennas_per_segment {
                low.push(lo);
                high.push(hi);
            }
        }
        for _ in 0..cfg.segment_count {
            low.push(-LOGIT_BOUND);
            high.push(LOGIT_BOUND);
        }
        let amp = (cfg.total_power_w / (cfg.user_count * cfg.segment_count) as f64).sqrt();
        for _ in 0..2 * cfg.user_count * cfg.segment_count {
            low.push(-amp);
            high.push(amp);
        }
        ActionSpace { low, high }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    /// Maps normalized coordinates (`-1 -> low`, `+1 -> high`) to the flat action.
    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&u, (&lo, &hi))| 0.5 * (lo + hi) + 0.5 * (hi - lo) * u)
            .collect()
    }
}

/// Feasible action: layout, per-segment activation and beam matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedAction {
    pub layout: AntennaLayout,
    /// 0.0 or 1.0 per segment.
    pub activation: Vec<f64>,
    pub beam: BeamMatrix,
}

impl ProjectedAction {
    /// Raw action that projects back onto `self`.
    pub fn to_action(&self) -> EnvAction {
        EnvAction {
            raw_positions: self.layout.positions().to_vec(),
            raw_segment_logits: self
                .activation
                .iter()
                .map(|&a| if a >= 0.5 { LOGIT_BOUND } else { -LOGIT_BOUND })
                .collect(),
            raw_beam: self.beam.as_slice().iter().flat_map(|w| [w.re, w.im]).collect(),
        }
    }

    pub fn active_mask(&self) -> Vec<bool> {
        self.activation.iter().map(|&a| a >= 0.5).collect()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Clamps into `[lo, hi]`, sorts, and spreads neighbours at least
/// `spacing` apart: first pushing right, then, if the last antenna left the
/// segment, pushing left from the segment end.
fn project_segment(raw: &[f64], lo: f64, hi: f64, spacing: f64) -> Vec<f64> {
    let mut xs: Vec<f64> = raw
        .iter()
        .map(|&x| if x.is_finite() { x.clamp(lo, hi) } else { lo })
        .collect();
    xs.sort_by(f64::total_cmp);
    for i in 1..xs.len() {
        if xs[i] - xs[i - 1] < spacing {
            let mut x = xs[i - 1] + spacing;
            while x - xs[i - 1] < spacing {
                x = x.next_up();
            }
            xs[i] = x;
        }
    }
    if let Some(&last) = xs.last() {
        if last > hi {
            let n = xs.len();
            xs[n - 1] = hi;
            for i in (0..n - 1).rev() {
                if xs[i + 1] - xs[i] < spacing {
                    let mut x = xs[i + 1] - spacing;
                    while xs[i + 1] - x < spacing {
                        x = x.next_down();
                    }
                    xs[i] = x;
                }
            }
        }
    }
    xs
}

/// Projects positions into the spacing-feasible layout and squashes the
/// logits to a binary activation. The beam is built from `raw_beam`,
/// inactive columns are zeroed and the result is scaled down onto the power
/// budget if it exceeds it. `mask_override` replaces the logit-derived
/// activation (protocol or gating decisions).
pub fn project_action_with_mask(a: &EnvAction, cfg: &SystemConfig, mask_override: Option<&[bool]>) -> Result<ProjectedAction> {
    let (m_count, n_count, k_count) = (cfg.segment_count, cfg.antennas_per_segment, cfg.user_count);
    if a.raw_positions.len() != m_count * n_count {
        return Err(Error::Shape {
            expected: m_count * n_count,
            actual: a.raw_positions.len(),
        });
    }
    if a.raw_segment_logits.len() != m_count {
        return Err(Error::Shape {
            expected: m_count,
            actual: a.raw_segment_logits.len(),
        });
    }
    if a.raw_beam.len() != 2 * k_count * m_count {
        return Err(Error::Shape {
            expected: 2 * k_count * m_count,
            actual: a.raw_beam.len(),
        });
    }

    let mut positions = Vec::with_capacity(m_count * n_count);
    for m in 0..m_count {
        let (lo, hi) = cfg.segment_span(m);
        positions.extend(project_segment(&a.raw_positions[m * n_count..(m + 1) * n_count], lo, hi, cfg.min_spacing_m));
    }
    let layout = AntennaLayout::new(m_count, n_count, positions)?;

    let mask: Vec<bool> = match mask_override {
        Some(mask) => mask.to_vec(),
        None => a.raw_segment_logits.iter().map(|&l| logistic(l) >= 0.5).collect(),
    };

    let finite = |x: f64| if x.is_finite() { x } else { 0.0 };
    let w = a.raw_beam.chunks_exact(2).map(|c| Complex64::new(finite(c[0]), finite(c[1]))).collect();
    let mut beam = BeamMatrix::new(k_count, m_count, w)?;
    for (m, &on) in mask.iter().enumerate() {
        if !on {
            beam.zero_segment(m);
        }
    }
    let power = beam.power();
    if power > cfg.total_power_w {
        beam.scale((cfg.total_power_w / power).sqrt());
    }

    Ok(ProjectedAction {
        layout,
        activation: mask.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect(),
        beam,
    })
}

/// Projection onto the feasible set with the activation read from the logits.
pub fn project_action(a: &EnvAction, cfg: &SystemConfig) -> Result<ProjectedAction> {
    project_action_with_mask(a, cfg, None)
}

/// Keeps at most `limit` active segments, preferring the largest logits.
fn cap_active(mask: &mut [bool], logits: &[f64], limit: usize) {
    let mut active: Vec<usize> = (0..mask.len()).filter(|&m| mask[m]).collect();
    if active.len() <= limit {
        return;
    }
    active.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for &m in &active[limit..] {
        mask[m] = false;
    }
}

/// Previous executed activation and the probability of accepting a new one.
#[derive(Debug, Clone, PartialEq)]
pub struct HysteresisMemory {
    pub last_activation: Vec<bool>,
    p_update: f64,
}

impl HysteresisMemory {
    /// Starts with every segment active. `p_update = 0` is accepted so the
    /// frozen boundary case can be exercised.
    pub fn new(segments: usize, p_update: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_update) {
            return Err(Error::Config(format!("p_update must lie in [0, 1], got {p_update}")));
        }
        Ok(HysteresisMemory {
            last_activation: vec![true; segments],
            p_update,
        })
    }

    pub fn p_update(&self) -> f64 {
        self.p_update
    }

    pub fn reset(&mut self) {
        self.last_activation.iter_mut().for_each(|a| *a = true);
    }
}

/// One Bernoulli(`p_update`) draw for the whole segment vector: on success
/// the new activation is executed and remembered, otherwise the remembered
/// one is executed again.
pub fn hysteresis_gate<R: Rng + ?Sized>(new_activation: &[bool], memory: &mut HysteresisMemory, rng: &mut R) -> Vec<bool> {
    hysteresis_update(new_activation, memory, rng);
    memory.last_activation.clone()
}

/// The draw behind [`hysteresis_gate`]; returns whether the proposal was
/// accepted.
fn hysteresis_update<R: Rng + ?Sized>(new_activation: &[bool], memory: &mut HysteresisMemory, rng: &mut R) -> bool {
    let accept = rng.random_bool(memory.p_update);
    if accept {
        memory.last_activation.copy_from_slice(new_activation);
    }
    accept
}

/// Fixed-period segment updates: a new selection is taken on steps that are
/// multiples of `period`.
pub fn sprl_gate(step_index: usize, period: usize) -> bool {
    step_index % period == 0
}

/// How proposed segment activations reach the hardware under HSSM.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmentGate {
    /// Every proposal executed.
    Transparent,
    Hysteresis(HysteresisMemory),
    Periodic { period: usize, last: Vec<bool> },
}

impl SegmentGate {
    pub fn hysteresis(segments: usize, p_update: f64) -> Result<Self> {
        Ok(SegmentGate::Hysteresis(HysteresisMemory::new(segments, p_update)?))
    }

    pub fn periodic(segments: usize, period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("segment update period must be at least 1".into()));
        }
        Ok(SegmentGate::Periodic {
            period,
            last: vec![true; segments],
        })
    }

    fn reset(&mut self) {
        match self {
            SegmentGate::Transparent => {}
            SegmentGate::Hysteresis(memory) => memory.reset(),
            SegmentGate::Periodic { last, .. } => last.iter_mut().for_each(|a| *a = true),
        }
    }

    /// Executed activation and whether it was taken from `proposal`.
    fn apply(&mut self, proposal: &[bool], step_index: usize, rng: &mut ChaCha8Rng) -> (Vec<bool>, bool) {
        match self {
            SegmentGate::Transparent => (proposal.to_vec(), true),
            SegmentGate::Hysteresis(memory) => {
                let accepted = hysteresis_update(proposal, memory, rng);
                (memory.last_activation.clone(), accepted)
            }
            SegmentGate::Periodic { period, last } => {
                let accepted = sprl_gate(step_index, *period);
                if accepted {
                    last.copy_from_slice(proposal);
                }
                (last.clone(), accepted)
            }
        }
    }
}

/// Sum rate minus one unit per target whose illumination misses the threshold.
pub fn reward(rates: &[f64], illuminations: &[f64], threshold: f64) -> f64 {
    let violations = illuminations.iter().filter(|&&g| g < threshold).count();
    rates.iter().sum::<f64>() - violations as f64
}

/// Observation of the decision process.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Interleaved `(re, im)` of the user channels, user-major.
    pub user_channels: Vec<f64>,
    pub target_channels: Vec<f64>,
    pub prev_positions: Vec<f64>,
    pub prev_activation: Vec<f64>,
}

impl EnvState {
    pub fn to_vec(&self) -> Vec<f64> {
        [
            &self.user_channels[..],
            &self.target_channels[..],
            &self.prev_positions[..],
            &self.prev_activation[..],
        ]
        .concat()
    }

    pub fn dim(cfg: &SystemConfig) -> usize {
        2 * (cfg.user_count + cfg.target_count) * cfg.segment_count + cfg.antenna_count() + cfg.segment_count
    }
}

fn interleave(g: &ChannelMatrix) -> Vec<f64> {
    g.as_slice().iter().flat_map(|c| [c.re, c.im]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSettings {
    pub protocol: Protocol,
    pub scenario: ScenarioKind,
    pub episode_length: usize,
    /// Optional cap on simultaneously active segments under HSSM.
    pub max_active_segments: Option<usize>,
}

impl Default for EnvSettings {
    fn default() -> Self {
        EnvSettings {
            protocol: Protocol::Hssm,
            scenario: ScenarioKind::Sparse,
            episode_length: 50,
            max_active_segments: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub report: MetricReport,
    pub executed: ProjectedAction,
    /// False when the gate (or the protocol) overrode the segment logits.
    pub logits_used: bool,
    pub done: bool,
}

/// One SWAN-ISAC environment instance. Owns the random stream of its segment
/// gate; everything else is a deterministic function of scenario and actions.
#[derive(Debug, Clone)]
pub struct SwanEnv {
    cfg: SystemConfig,
    settings: EnvSettings,
    gate: SegmentGate,
    gate_rng: ChaCha8Rng,
    scenario: Option<Scenario>,
    layout: AntennaLayout,
    activation: Vec<bool>,
    beam: BeamMatrix,
    step_index: usize,
}

impl SwanEnv {
    /// `cfg` describes the segmented hardware; under PASS it is folded into a
    /// single waveguide.
    pub fn new(cfg: &SystemConfig, settings: EnvSettings) -> Result<Self> {
        cfg.validate()?;
        if settings.episode_length == 0 {
            return Err(Error::Config("episode_length must be at least 1".into()));
        }
        if settings.max_active_segments == Some(0) {
            return Err(Error::Config("max_active_segments must be at least 1".into()));
        }
        let cfg = match settings.protocol {
            Protocol::Pass => cfg.single_waveguide(),
            Protocol::Hssm | Protocol::Sm => cfg.clone(),
        };
        cfg.validate()?;
        Ok(SwanEnv {
            layout: AntennaLayout::uniform(&cfg),
            activation: vec![true; cfg.segment_count],
            beam: BeamMatrix::equal_power(cfg.user_count, cfg.segment_count, cfg.total_power_w),
            cfg,
            settings,
            gate: SegmentGate::Transparent,
            gate_rng: ChaCha8Rng::seed_from_u64(0),
            scenario: None,
            step_index: 0,
        })
    }

    /// Installs the segment gate. Only HSSM consults it.
    pub fn with_gate(mut self, gate: SegmentGate) -> Self {
        self.gate = gate;
        self
    }

    /// Effective configuration the physics runs on.
    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn settings(&self) -> &EnvSettings {
        &self.settings
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::for_config(&self.cfg)
    }

    pub fn action_dim(&self) -> usize {
        EnvAction::dim(&self.cfg)
    }

    pub fn state_dim(&self) -> usize {
        EnvState::dim(&self.cfg)
    }

    pub fn layout(&self) -> &AntennaLayout {
        &self.layout
    }

    pub fn beam(&self) -> &BeamMatrix {
        &self.beam
    }

    pub fn activation(&self) -> &[bool] {
        &self.activation
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// Uniform layout, all segments on, equal-power beam; `seed` restarts the
    /// gate's random stream.
    pub fn reset(&mut self, scenario: Scenario, seed: u64) -> Result<EnvState> {
        scenario.validate(&self.cfg)?;
        self.scenario = Some(scenario);
        self.layout = AntennaLayout::uniform(&self.cfg);
        self.activation = vec![true; self.cfg.segment_count];
        self.beam = BeamMatrix::equal_power(self.cfg.user_count, self.cfg.segment_count, self.cfg.total_power_w);
        self.gate.reset();
        self.gate_rng = ChaCha8Rng::seed_from_u64(seed);
        self.step_index = 0;
        Ok(self.observe())
    }

    fn scenario(&self) -> &Scenario {
        self.scenario.as_ref().expect("environment used before reset")
    }

    fn observe(&self) -> EnvState {
        let all = vec![true; self.cfg.segment_count];
        let scenario = self.scenario();
        EnvState {
            user_channels: interleave(&channel_matrix(&self.layout, &scenario.users, &all, &self.cfg)),
            target_channels: interleave(&channel_matrix(&self.layout, &scenario.targets, &all, &self.cfg)),
            prev_positions: self.layout.positions().to_vec(),
            prev_activation: self.activation.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Segment activation that will actually be executed for `action`, and
    /// whether the action's logits decided it.
    fn executed_mask(&mut self, action: &EnvAction) -> (Vec<bool>, bool) {
        let m = self.cfg.segment_count;
        match self.settings.protocol {
            Protocol::Sm | Protocol::Pass => (vec![true; m], false),
            Protocol::Hssm => {
                let mut proposal: Vec<bool> = action.raw_segment_logits.iter().map(|&l| logistic(l) >= 0.5).collect();
                if let Some(limit) = self.settings.max_active_segments {
                    cap_active(&mut proposal, &action.raw_segment_logits, limit);
                }
                self.gate.apply(&proposal, self.step_index, &mut self.gate_rng)
            }
        }
    }

    pub fn step(&mut self, action: &EnvAction) -> Result<StepOutcome> {
        if self.step_index >= self.settings.episode_length {
            return Err(Error::EpisodeDone);
        }
        if action.raw_segment_logits.len() != self.cfg.segment_count {
            return Err(Error::Shape {
                expected: self.cfg.segment_count,
                actual: action.raw_segment_logits.len(),
            });
        }
        let (mask, logits_used) = self.executed_mask(action);
        let executed = project_action_with_mask(action, &self.cfg, Some(&mask))?;

        let scenario = self.scenario();
        let gu = channel_matrix(&executed.layout, &scenario.users, &mask, &self.cfg);
        let gs = channel_matrix(&executed.layout, &scenario.targets, &mask, &self.cfg);
        let report = MetricReport::evaluate(&gu, &gs, &executed.layout, &executed.beam, &executed.activation, &self.cfg);
        let r = reward(&report.per_user_rate, &report.per_target_illumination, self.cfg.sensing_threshold_w);

        self.layout = executed.layout.clone();
        self.beam = executed.beam.clone();
        self.activation = mask;
        self.step_index += 1;

        Ok(StepOutcome {
            state: self.observe(),
            reward: r,
            report,
            executed,
            logits_used,
            done: self.step_index >= self.settings.episode_length,
        })
    }
}

/// One row of an exported episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub reward: f64,
    pub sum_rate: f64,
    pub min_illumination: f64,
    pub active_segment_mask: String,
}

impl TraceRow {
    pub fn from_outcome(step: usize, outcome: &StepOutcome) -> Self {
        TraceRow {
            step,
            reward: outcome.reward,
            sum_rate: outcome.report.sum_rate,
            min_illumination: outcome.report.min_illumination(),
            active_segment_mask: outcome
                .executed
                .activation
                .iter()
                .map(|&a| if a >= 0.5 { '1' } else { '0' })
                .collect(),
        }
    }
}

/// Writes `step,reward,sum_rate,min_illumination,active_segment_mask`.
pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "reward", "sum_rate", "min_illumination", "active_segment_mask"])?;
    for row in rows {
        w.write_record([
            row.step.to_string(),
            row.reward.to_string(),
            row.sum_rate.to_string(),
            row.min_illumination.to_string(),
            row.active_segment_mask.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> SystemConfig {
        SystemConfig::default()
    }

    fn random_action(cfg: &SystemConfig, seed: u64, spread: f64) -> EnvAction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..EnvAction::dim(cfg)).map(|_| rng.random_range(-spread..spread)).collect();
        EnvAction::from_flat(cfg, &flat).unwrap()
    }

    #[test]
    fn scenario_is_deterministic() {
        let c = cfg();
        for kind in [ScenarioKind::Sparse, ScenarioKind::Dense] {
            assert_eq!(make_scenario(kind, &c, 42), make_scenario(kind, &c, 42));
            assert_ne!(make_scenario(kind, &c, 42), make_scenario(kind, &c, 43));
        }
    }

    #[test]
    fn sparse_halves_are_disjoint() {
        let c = cfg();
        for seed in 0..200 {
            let s = make_scenario(ScenarioKind::Sparse, &c, seed);
            s.validate(&c).unwrap();
            assert_eq!((s.users.len(), s.targets.len()), (6, 1));
            let min = s
                .users
                .iter()
                .flat_map(|u| s.targets.iter().map(move |t| u.distance(t)))
                .fold(f64::INFINITY, f64::min);
            assert!(min > 0.0);
            assert!(s.users.iter().all(|u| u.x < c.region_x_m / 2.0));
            assert!(s.targets.iter().all(|t| t.x >= c.region_x_m / 2.0));
        }
    }

    #[test]
    fn dense_points_fit_in_the_disc() {
        let c = cfg();
        for seed in 0..1000 {
            let s = make_scenario(ScenarioKind::Dense, &c, seed);
            s.validate(&c).unwrap();
            let pts: Vec<_> = s.users.iter().chain(&s.targets).collect();
            for a in &pts {
                for b in &pts {
                    assert!(a.distance(b) <= 2.0 * DENSE_RADIUS_M + 1e-9);
                }
            }
        }
    }

    #[test]
    fn projection_of_feasible_action_is_identity() {
        let c = cfg();
        let layout = AntennaLayout::uniform(&c);
        let beam = BeamMatrix::equal_power(6, 3, 50.0);
        let feasible = ProjectedAction {
            layout,
            activation: vec![1.0, 0.0, 1.0],
            beam: {
                let mut b = beam;
                b.zero_segment(1);
                b
            },
        };
        let again = project_action(&feasible.to_action(), &c).unwrap();
        assert_eq!(again, feasible);
    }

    #[test]
    fn coincident_positions_spread_by_exactly_the_spacing() {
        let c = cfg();
        let mut a = random_action(&c, 1, 1.0);
        a.raw_positions = vec![20.0; 30];
        let p = project_action(&a, &c).unwrap();
        let seg = p.layout.segment(1);
        for w in seg.windows(2) {
            let gap = w[1] - w[0];
            assert!(gap >= c.min_spacing_m);
            assert!((gap - c.min_spacing_m).abs() < 1e-12);
        }
        assert!(p.layout.is_feasible(&c));
    }

    #[test]
    fn positions_past_segment_end_sweep_back() {
        let c = cfg();
        let mut a = random_action(&c, 2, 1.0);
        a.raw_positions = vec![1e6; 30];
        let p = project_action(&a, &c).unwrap();
        assert!(p.layout.is_feasible(&c));
        let (_, hi) = c.segment_span(0);
        assert_eq!(*p.layout.segment(0).last().unwrap(), hi);
    }

    #[test]
    fn over_budget_beam_is_scaled_to_budget() {
        let c = cfg();
        let mut a = random_action(&c, 3, 1.0);
        a.raw_segment_logits = vec![1.0; 3];
        let raw = BeamMatrix::new(
            6,
            3,
            a.raw_beam.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect(),
        )
        .unwrap();
        let factor = (4.0 * c.total_power_w / raw.power()).sqrt();
        a.raw_beam.iter_mut().for_each(|x| *x *= factor);
        let p = project_action(&a, &c).unwrap();
        assert!((p.beam.power() - c.total_power_w).abs() <= 1e-9 * c.total_power_w);
    }

    #[test]
    fn inactive_segments_carry_no_power() {
        let c = cfg();
        let mut a = random_action(&c, 4, 10.0);
        a.raw_segment_logits = vec![-2.0, 3.0, -0.1];
        let p = project_action(&a, &c).unwrap();
        assert_eq!(p.activation, vec![0.0, 1.0, 0.0]);
        assert_eq!(p.beam.segment_power(0), 0.0);
        assert_eq!(p.beam.segment_power(2), 0.0);
        assert!(p.beam.segment_power(1) > 0.0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let c = cfg();
        let mut a = random_action(&c, 5, 1.0);
        a.raw_beam.pop();
        assert!(matches!(project_action(&a, &c), Err(Error::Shape { .. })));
    }

    #[test]
    fn gate_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut always = HysteresisMemory::new(3, 1.0).unwrap();
        let mut never = HysteresisMemory::new(3, 0.0).unwrap();
        for i in 0..100 {
            let proposal = [i % 2 == 0, i % 3 == 0, false];
            assert_eq!(hysteresis_gate(&proposal, &mut always, &mut rng), proposal.to_vec());
            assert_eq!(hysteresis_gate(&proposal, &mut never, &mut rng), vec![true; 3]);
        }
        assert!(HysteresisMemory::new(3, 1.5).is_err());
    }

    #[test]
    fn gate_accept_rate_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut memory = HysteresisMemory::new(1, 0.3).unwrap();
        let mut accepted = 0;
        let steps = 10_000;
        for i in 0..steps {
            let proposal = [i % 2 == 0];
            memory.last_activation = vec![i % 2 != 0];
            if hysteresis_gate(&proposal, &mut memory, &mut rng) == proposal {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / steps as f64;
        assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn periodic_gate() {
        let hits: Vec<usize> = (0..10).filter(|&t| sprl_gate(t, 5)).collect();
        assert_eq!(hits, vec![0, 5]);
        assert!((0..10).all(|t| sprl_gate(t, 1)));
        assert!(SegmentGate::periodic(3, 0).is_err());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&[2.0, 3.0], &[1.0], 0.5), 5.0);
        assert_eq!(reward(&[2.0, 3.0], &[0.1], 0.5), 4.0);
        assert_eq!(reward(&[0.0; 6], &[0.0, 0.0], 1e-5), -2.0);
    }

    #[test]
    fn reset_initial_state() {
        let c = cfg();
        let mut env = SwanEnv::new(&c, EnvSettings::default()).unwrap();
        let s = make_scenario(ScenarioKind::Sparse, &c, 1);
        let a = env.reset(s.clone(), 7).unwrap();
        let b = env.reset(s, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_vec().len(), env.state_dim());
        assert!((env.beam().power() - 100.0).abs() < 1e-9);
        let pitch = c.segment_length() / c.antennas_per_segment as f64;
        assert!(pitch >= c.min_spacing_m);
        assert_eq!(env.layout(), &AntennaLayout::uniform(&c));
        assert_eq!(a.prev_activation, vec![1.0; 3]);
    }

    #[test]
    fn zero_beam_reward_is_minus_target_count() {
        let c = cfg();
        let mut env = SwanEnv::new(&c, EnvSettings::default()).unwrap();
        env.reset(make_scenario(ScenarioKind::Sparse, &c, 1), 0).unwrap();
        let mut a = random_action(&c, 6, 1.0);
        a.raw_beam = vec![0.0; a.raw_beam.len()];
        let out = env.step(&a).unwrap();
        assert_eq!(out.reward, -(c.target_count as f64));
    }

    #[test]
    fn sm_keeps_every_segment_on() {
        let c = cfg();
        let settings = EnvSettings {
            protocol: Protocol::Sm,
            ..EnvSettings::default()
        };
        let mut env = SwanEnv::new(&c, settings).unwrap();
        env.reset(make_scenario(ScenarioKind::Sparse, &c, 2), 0).unwrap();
        for i in 0..10 {
            let mut a = random_action(&c, i, 5.0);
            a.raw_segment_logits = vec![-5.0; 3];
            let out = env.step(&a).unwrap();
            assert_eq!(out.executed.activation, vec![1.0; 3]);
            assert!(!out.logits_used);
        }
    }

    #[test]
    fn logits_used_flag_follows_protocol_and_gate() {
        let c = cfg();
        let sc = make_scenario(ScenarioKind::Sparse, &c, 4);
        let a = random_action(&c, 5, 3.0);
        let mut open = SwanEnv::new(&c, EnvSettings::default()).unwrap();
        open.reset(sc.clone(), 0).unwrap();
        assert!(open.step(&a).unwrap().logits_used);
        let settings = EnvSettings {
            protocol: Protocol::Sm,
            ..EnvSettings::default()
        };
        let mut sm = SwanEnv::new(&c, settings).unwrap();
        sm.reset(sc.clone(), 0).unwrap();
        assert!(!sm.step(&a).unwrap().logits_used);
        let mut periodic = SwanEnv::new(&c, EnvSettings::default()).unwrap().with_gate(SegmentGate::periodic(3, 2).unwrap());
        periodic.reset(sc, 0).unwrap();
        let used: Vec<bool> = (0..4).map(|_| periodic.step(&a).unwrap().logits_used).collect();
        assert_eq!(used, vec![true, false, true, false]);
    }

    #[test]
    fn identical_actions_give_identical_rewards() {
        let c = cfg();
        let mut env = SwanEnv::new(&c, EnvSettings::default()).unwrap();
        env.reset(make_scenario(ScenarioKind::Dense, &c, 3), 0).unwrap();
        let a = random_action(&c, 8, 20.0);
        let r1 = env.step(&a).unwrap().reward;
        let r2 = env.step(&a).unwrap().reward;
        assert_eq!(r1, r2);
    }

    #[test]
    fn frozen_gate_keeps_activation_constant() {
        let c = cfg();
        let mut env = SwanEnv::new(&c, EnvSettings::default())
            .unwrap()
            .with_gate(SegmentGate::hysteresis(3, 0.0).unwrap());
        env.reset(make_scenario(ScenarioKind::Sparse, &c, 4), 0).unwrap();
        for i in 0..50 {
            let out = env.step(&random_action(&c, 100 + i, 3.0)).unwrap();
            assert_eq!(out.executed.activation, vec![1.0; 3]);
        }
    }

    #[test]
    fn episode_terminates() {
        let c = cfg();
        let settings = EnvSettings {
            episode_length: 3,
            ..EnvSettings::default()
        };
        let mut env = SwanEnv::new(&c, settings).unwrap();
        env.reset(make_scenario(ScenarioKind::Sparse, &c, 5), 0).unwrap();
        let a = random_action(&c, 9, 1.0);
        assert!(!env.step(&a).unwrap().done);
        assert!(!env.step(&a).unwrap().done);
        assert!(env.step(&a).unwrap().done);
        assert!(matches!(env.step(&a), Err(Error::EpisodeDone)));
    }

    #[test]
    fn pass_uses_one_waveguide() {
        let c = cfg();
        let settings = EnvSettings {
            protocol: Protocol::Pass,
            ..EnvSettings::default()
        };
        let mut env = SwanEnv::new(&c, settings).unwrap();
        assert_eq!(env.config().segment_count, 1);
        assert_eq!(env.action_dim(), 30 + 1 + 12);
        env.reset(make_scenario(ScenarioKind::Sparse, &c, 6), 0).unwrap();
        let flat = vec![0.5; env.action_dim()];
        let a = EnvAction::from_flat(env.config(), &flat).unwrap();
        let out = env.step(&a).unwrap();
        assert!(out.report.constraint_flags.hard_feasible());
    }

    #[test]
    fn max_active_cap_keeps_strongest_logits() {
        let mut mask = vec![true, true, false, true];
        cap_active(&mut mask, &[0.5, 2.0, 9.0, 1.0], 2);
        assert_eq!(mask, vec![false, true, false, true]);
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            step: 0,
            reward: 1.5,
            sum_rate: 2.5,
            min_illumination: 1e-5,
            active_segment_mask: "101".into(),
        }];
        let mut buf = Vec::new();
        write_trace(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,reward,sum_rate,min_illumination,active_segment_mask\n0,1.5,2.5,0.00001,101\n"
        );
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent(seed in 0u64..10_000, spread in 0.1..200.0f64) {
            let c = cfg();
            let a = random_action(&c, seed, spread);
            let p = project_action(&a, &c).unwrap();
            prop_assert!(p.layout.is_feasible(&c));
            prop_assert!(p.beam.power() <= c.total_power_w * (1.0 + 1e-9));
            let q = project_action(&p.to_action(), &c).unwrap();
            prop_assert_eq!(&q.layout, &p.layout);
            prop_assert_eq!(&q.activation, &p.activation);
            for (x, y) in q.beam.as_slice().iter().zip(p.beam.as_slice()) {
                prop_assert!((x - y).norm() <= 1e-12);
            }
        }

        #[test]
        fn step_reward_decomposes(seed in 0u64..500) {
            let c = cfg();
            let mut env = SwanEnv::new(&c, EnvSettings::default()).unwrap();
            env.reset(make_scenario(ScenarioKind::Sparse, &c, seed), seed).unwrap();
            let out = env.step(&random_action(&c, seed, 30.0)).unwrap();
            let misses = out.report.per_target_illumination.iter().filter(|&&g| g < c.sensing_threshold_w).count();
            prop_assert_eq!(out.reward, out.report.sum_rate - misses as f64);
            prop_assert!(out.report.constraint_flags.hard_feasible());
        }
    }
}
