//! Configuration files, seeded experiment sweeps and their CSV artifacts.
//!
//! Output directory layout:
//!
//! ```text
//! out/
//!   manifest.csv   spec_hash,waveguide_length_m,segment_count,protocol,scenario,episodes
//!   runs.csv       spec_hash,algo,seed,episode,reward
//!   eval.csv       spec_hash,algo,seed,rate_bpshz,illumination_w
//!   runs/<spec_hash>/<algo>-<scenario>-seed<seed>/
//!     config.txt checkpoint.json curve.csv trace.csv record.json
//! ```
//!
//! A run is complete once its `eval.csv` row exists; reruns skip complete
//! runs, so a sweep can be resumed after an interruption.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::agents::{evaluate, prepare_env, streams, train, Agent, AgentConfig, Algorithm, Checkpoint};
use crate::config::{dbm_to_watts, SystemConfig};
use crate::env::{derive_seed, make_scenario, project_action, write_trace, EnvAction, EnvSettings, Protocol, ScenarioKind, SwanEnv, TraceRow};
use crate::error::{Error, Result};
use crate::metrics::{illumination_power, BeamMatrix};
use crate::neural::Mlp;
use crate::physics::{channel_matrix, freespace_channel, in_waveguide_gain, AntennaLayout, Point2};

/// Everything that determines a training run except the algorithm and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub env: EnvSettings,
    pub agent: AgentConfig,
    /// Greedy episodes in the final evaluation.
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: SystemConfig::default(),
            env: EnvSettings::default(),
            agent: AgentConfig::default(),
            eval_episodes: 100,
        }
    }
}

/// `(line number, key, value)` triples of a `key = value` file.
fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::ConfigParse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::ConfigParse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}` as a number"))
}

fn flag(value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

fn list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("cannot parse list item `{s}`")))
        .collect()
}

fn named<T: std::str::FromStr<Err = Error>>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|e: Error| e.to_string())
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one key; `Ok(false)` when the key is not a run key.
    fn set(&mut self, key: &str, value: &str, spacing_given: &mut bool) -> std::result::Result<bool, String> {
        let s = &mut self.system;
        let e = &mut self.env;
        let a = &mut self.agent;
        match key {
            "carrier_frequency_hz" => s.carrier_frequency_hz = num(value)?,
            "speed_of_light" => s.speed_of_light = num(value)?,
            "effective_refractive_index" => s.effective_refractive_index = num(value)?,
            "waveguide_total_length_m" => s.waveguide_total_length_m = num(value)?,
            "segment_count" => s.segment_count = num(value)?,
            "antennas_per_segment" => s.antennas_per_segment = num(value)?,
            "waveguide_height_m" => s.waveguide_height_m = num(value)?,
            "region_x_m" => s.region_x_m = num(value)?,
            "region_y_m" => s.region_y_m = num(value)?,
            "attenuation_db_per_m" => s.attenuation_db_per_m = num(value)?,
            "total_power_w" => s.total_power_w = num(value)?,
            "noise_power_w" => s.noise_power_w = num(value)?,
            "noise_power_dbm" => s.noise_power_w = dbm_to_watts(num(value)?),
            "bandwidth_hz" => s.bandwidth_hz = num(value)?,
            "sensing_threshold_w" => s.sensing_threshold_w = num(value)?,
            "sensing_threshold_dbm" => s.sensing_threshold_w = dbm_to_watts(num(value)?),
            "min_spacing_m" => {
                s.min_spacing_m = num(value)?;
                *spacing_given = true;
            }
            "user_count" => s.user_count = num(value)?,
            "target_count" => s.target_count = num(value)?,
            "sinr_combining" => s.sinr_combining = named(value)?,
            "protocol" => e.protocol = named(value)?,
            "scenario" => e.scenario = named(value)?,
            "episode_length" => e.episode_length = num(value)?,
            "max_active_segments" => {
                e.max_active_segments = match value {
                    "none" | "0" => None,
                    v => Some(num(v)?),
                }
            }
            "p_update" => a.p_update = num(value)?,
            "sprl_period" => a.sprl_period = num(value)?,
            "ppo_clip" => a.ppo_clip = num(value)?,
            "ppo_epochs" => a.ppo_epochs = num(value)?,
            "ppo_batch_episodes" => a.ppo_batch_episodes = num(value)?,
            "ppo_minibatch" => a.ppo_minibatch = num(value)?,
            "entropy_coef" => a.entropy_coef = num(value)?,
            "discount" => a.discount = num(value)?,
            "hidden" => a.hidden = list(value)?,
            "actor_lr" => a.actor_lr = num(value)?,
            "critic_lr" => a.critic_lr = num(value)?,
            "log_std_lr" => a.log_std_lr = num(value)?,
            "initial_log_std" => a.initial_log_std = num(value)?,
            "max_grad_norm" => a.max_grad_norm = num(value)?,
            "normalize_advantages" => a.normalize_advantages = flag(value)?,
            "scale_rewards" => a.scale_rewards = flag(value)?,
            "rollout_steps" => a.rollout_steps = num(value)?,
            "logit_credit" => a.logit_credit = named(value)?,
            "eval_episodes" => self.eval_episodes = num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every parameter as `(key, value)` in a fixed order. Floats print in
    /// shortest round-trip form, so parsing this back is exact.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.system;
        let e = &self.env;
        let a = &self.agent;
        vec![
            ("carrier_frequency_hz", format!("{:?}", s.carrier_frequency_hz)),
            ("speed_of_light", format!("{:?}", s.speed_of_light)),
            ("effective_refractive_index", format!("{:?}", s.effective_refractive_index)),
            ("waveguide_total_length_m", format!("{:?}", s.waveguide_total_length_m)),
            ("segment_count", s.segment_count.to_string()),
            ("antennas_per_segment", s.antennas_per_segment.to_string()),
            ("waveguide_height_m", format!("{:?}", s.waveguide_height_m)),
            ("region_x_m", format!("{:?}", s.region_x_m)),
            ("region_y_m", format!("{:?}", s.region_y_m)),
            ("attenuation_db_per_m", format!("{:?}", s.attenuation_db_per_m)),
            ("total_power_w", format!("{:?}", s.total_power_w)),
            ("noise_power_w", format!("{:?}", s.noise_power_w)),
            ("bandwidth_hz", format!("{:?}", s.bandwidth_hz)),
            ("sensing_threshold_w", format!("{:?}", s.sensing_threshold_w)),
            ("min_spacing_m", format!("{:?}", s.min_spacing_m)),
            ("user_count", s.user_count.to_string()),
            ("target_count", s.target_count.to_string()),
            ("sinr_combining", s.sinr_combining.to_string()),
            ("protocol", e.protocol.to_string()),
            ("scenario", e.scenario.to_string()),
            ("episode_length", e.episode_length.to_string()),
            ("max_active_segments", e.max_active_segments.map_or("none".into(), |m| m.to_string())),
            ("p_update", format!("{:?}", a.p_update)),
            ("sprl_period", a.sprl_period.to_string()),
            ("ppo_clip", format!("{:?}", a.ppo_clip)),
            ("ppo_epochs", a.ppo_epochs.to_string()),
            ("ppo_batch_episodes", a.ppo_batch_episodes.to_string()),
            ("ppo_minibatch", a.ppo_minibatch.to_string()),
            ("entropy_coef", format!("{:?}", a.entropy_coef)),
            ("discount", format!("{:?}", a.discount)),
            ("hidden", join(&a.hidden)),
            ("actor_lr", format!("{:?}", a.actor_lr)),
            ("critic_lr", format!("{:?}", a.critic_lr)),
            ("log_std_lr", format!("{:?}", a.log_std_lr)),
            ("initial_log_std", format!("{:?}", a.initial_log_std)),
            ("max_grad_norm", format!("{:?}", a.max_grad_norm)),
            ("normalize_advantages", a.normalize_advantages.to_string()),
            ("scale_rewards", a.scale_rewards.to_string()),
            ("rollout_steps", a.rollout_steps.to_string()),
            ("logit_credit", a.logit_credit.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
        ]
    }

    /// Canonical `key = value` text of every parameter.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses a config file body. Unknown keys are errors; omitted keys keep
    /// their defaults. Without an explicit `min_spacing_m` the spacing
    /// follows the carrier as half a wavelength.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (cfg, rest) = Self::parse_partial(text, path)?;
        if let Some((line, key, _)) = rest.first() {
            return Err(Error::ConfigParse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("unknown key `{key}`"),
            });
        }
        Ok(cfg)
    }

    /// Like [`RunConfig::parse`] but hands back the keys it does not know.
    fn parse_partial(text: &str, path: &Path) -> Result<(Self, Vec<(usize, String, String)>)> {
        let mut cfg = RunConfig::default();
        let mut spacing_given = false;
        let mut rest = Vec::new();
        for (line, key, value) in parse_pairs(text, path)? {
            match cfg.set(&key, &value, &mut spacing_given) {
                Ok(true) => {}
                Ok(false) => rest.push((line, key, value)),
                Err(message) => {
                    return Err(Error::ConfigParse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("{key}: {message}"),
                    })
                }
            }
        }
        if !spacing_given {
            cfg.system.min_spacing_m = cfg.system.wavelength() / 2.0;
        }
        Ok((cfg, rest))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.agent.validate()?;
        if self.env.episode_length == 0 {
            return Err(Error::Config("episode_length must be at least 1".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        Ok(())
    }

    /// Content hash of every physical and algorithmic parameter plus the
    /// episode budget. Algorithm and seed are kept out; they are separate
    /// columns of every artifact.
    pub fn spec_hash(&self, episodes: usize) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        h.update(format!("episodes = {episodes}\n").as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn make_env(&self) -> Result<SwanEnv> {
        SwanEnv::new(&self.system, self.env.clone())
    }
}

/// Result of one (config, algorithm, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub spec_hash: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Mean per-step reward of each training episode.
    pub rewards: Vec<f64>,
    /// Mean sum rate over the greedy evaluation, bps/Hz.
    pub eval_rate: f64,
    /// Mean target illumination over the greedy evaluation, W.
    pub eval_illumination: f64,
    pub wall_clock_s: f64,
}

/// The three CSV tables of an output directory.
pub struct ResultStore {
    dir: PathBuf,
}

/// `(spec_hash, algo, seed)`.
pub type RunKey = (String, String, u64);

const RUNS_HEADER: [&str; 5] = ["spec_hash", "algo", "seed", "episode", "reward"];
const EVAL_HEADER: [&str; 5] = ["spec_hash", "algo", "seed", "rate_bpshz", "illumination_w"];
const MANIFEST_HEADER: [&str; 6] = ["spec_hash", "waveguide_length_m", "segment_count", "protocol", "scenario", "episodes"];

/// One line of `manifest.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub spec_hash: String,
    pub waveguide_length_m: f64,
    pub segment_count: usize,
    pub protocol: Protocol,
    pub scenario: ScenarioKind,
    pub episodes: usize,
}

/// One line of `eval.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub spec_hash: String,
    pub algo: String,
    pub seed: u64,
    pub rate: f64,
    pub illumination: f64,
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.records().collect::<std::result::Result<_, _>>()?)
}

fn append_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header)?;
    }
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn bad_row(path: &Path, what: &str) -> Error {
    Error::Config(format!("{}: malformed {what}", path.display()))
}

impl ResultStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ResultStore { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn runs_path(&self) -> PathBuf {
        self.dir.join("runs.csv")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.csv")
    }

    pub fn eval_rows(&self) -> Result<Vec<EvalRow>> {
        let path = self.eval_path();
        read_rows(&path)?
            .iter()
            .map(|r| {
                let field = |i: usize| r.get(i).ok_or_else(|| bad_row(&path, "eval row"));
                Ok(EvalRow {
                    spec_hash: field(0)?.to_string(),
                    algo: field(1)?.to_string(),
                    seed: field(2)?.parse().map_err(|_| bad_row(&path, "seed"))?,
                    rate: field(3)?.parse().map_err(|_| bad_row(&path, "rate"))?,
                    illumination: field(4)?.parse().map_err(|_| bad_row(&path, "illumination"))?,
                })
            })
            .collect()
    }

    pub fn manifest(&self) -> Result<Vec<ManifestRow>> {
        let path = self.manifest_path();
        read_rows(&path)?
            .iter()
            .map(|r| {
                let field = |i: usize| r.get(i).ok_or_else(|| bad_row(&path, "manifest row"));
                Ok(ManifestRow {
                    spec_hash: field(0)?.to_string(),
                    waveguide_length_m: field(1)?.parse().map_err(|_| bad_row(&path, "length"))?,
                    segment_count: field(2)?.parse().map_err(|_| bad_row(&path, "segment count"))?,
                    protocol: field(3)?.parse()?,
                    scenario: field(4)?.parse()?,
                    episodes: field(5)?.parse().map_err(|_| bad_row(&path, "episodes"))?,
                })
            })
            .collect()
    }

    /// `(key, episode, reward)` for every training row.
    pub fn run_rows(&self) -> Result<Vec<(RunKey, usize, f64)>> {
        let path = self.runs_path();
        read_rows(&path)?
            .iter()
            .map(|r| {
                let field = |i: usize| r.get(i).ok_or_else(|| bad_row(&path, "runs row"));
                let key = (
                    field(0)?.to_string(),
                    field(1)?.to_string(),
                    field(2)?.parse().map_err(|_| bad_row(&path, "seed"))?,
                );
                let episode = field(3)?.parse().map_err(|_| bad_row(&path, "episode"))?;
                let reward = field(4)?.parse().map_err(|_| bad_row(&path, "reward"))?;
                Ok((key, episode, reward))
            })
            .collect()
    }

    pub fn completed(&self) -> Result<HashSet<RunKey>> {
        Ok(self.eval_rows()?.into_iter().map(|r| (r.spec_hash, r.algo, r.seed)).collect())
    }

    /// Drops `runs.csv` rows of runs that never reached `eval.csv` (an
    /// interrupted append), so a retry does not duplicate them.
    pub fn discard_partial(&self) -> Result<()> {
        let path = self.runs_path();
        if !path.exists() {
            return Ok(());
        }
        let done = self.completed()?;
        let rows = read_rows(&path)?;
        let keep: Vec<&csv::StringRecord> = rows
            .iter()
            .filter(|r| {
                let seed = r.get(2).and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                done.contains(&(r.get(0).unwrap_or("").to_string(), r.get(1).unwrap_or("").to_string(), seed))
            })
            .collect();
        if keep.len() == rows.len() {
            return Ok(());
        }
        let tmp = self.dir.join("runs.csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            w.write_record(RUNS_HEADER)?;
            for r in keep {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn ensure_manifest(&self, row: &ManifestRow) -> Result<()> {
        if self.manifest()?.iter().any(|m| m.spec_hash == row.spec_hash) {
            return Ok(());
        }
        append_rows(
            &self.manifest_path(),
            &MANIFEST_HEADER,
            &[vec![
                row.spec_hash.clone(),
                row.waveguide_length_m.to_string(),
                row.segment_count.to_string(),
                row.protocol.to_string(),
                row.scenario.to_string(),
                row.episodes.to_string(),
            ]],
        )
    }

    /// Appends a finished run: training rows first, the evaluation row last
    /// (it marks completion).
    pub fn append(&self, record: &RunRecord) -> Result<()> {
        let algo = record.algorithm.to_string();
        let rows: Vec<Vec<String>> = record
            .rewards
            .iter()
            .enumerate()
            .map(|(e, r)| vec![record.spec_hash.clone(), algo.clone(), record.seed.to_string(), e.to_string(), r.to_string()])
            .collect();
        append_rows(&self.runs_path(), &RUNS_HEADER, &rows)?;
        append_rows(
            &self.eval_path(),
            &EVAL_HEADER,
            &[vec![
                record.spec_hash.clone(),
                algo,
                record.seed.to_string(),
                record.eval_rate.to_string(),
                record.eval_illumination.to_string(),
            ]],
        )
    }
}

/// What [`run_one`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Trained(RunRecord),
    /// Already in `eval.csv`; nothing was recomputed.
    Skipped(RunKey),
}

/// Directory holding one run's checkpoint, curve and trace.
pub fn run_dir(out: &Path, spec_hash: &str, algorithm: Algorithm, scenario: ScenarioKind, seed: u64) -> PathBuf {
    out.join("runs").join(spec_hash).join(format!("{algorithm}-{scenario}-seed{seed}"))
}

/// Trains and evaluates one (config, algorithm, seed) triple and appends it
/// to the store under `out`, unless it is already there.
pub fn run_one(cfg: &RunConfig, algorithm: Algorithm, seed: u64, episodes: usize, out: &Path) -> Result<RunStatus> {
    cfg.validate()?;
    let store = ResultStore::open(out)?;
    store.discard_partial()?;
    let hash = cfg.spec_hash(episodes);
    let key = (hash.clone(), algorithm.to_string(), seed);
    if store.completed()?.contains(&key) {
        return Ok(RunStatus::Skipped(key));
    }
    store.ensure_manifest(&ManifestRow {
        spec_hash: hash.clone(),
        waveguide_length_m: cfg.system.waveguide_total_length_m,
        segment_count: cfg.system.segment_count,
        protocol: cfg.env.protocol,
        scenario: cfg.env.scenario,
        episodes,
    })?;

    let agent = AgentConfig {
        algorithm,
        ..cfg.agent.clone()
    };
    let started = Instant::now();
    let outcome = train(cfg.make_env()?, &agent, episodes, seed)?;
    let eval = evaluate(cfg.make_env()?, &outcome.checkpoint, cfg.eval_episodes, seed)?;
    let record = RunRecord {
        spec_hash: hash.clone(),
        algorithm,
        seed,
        rewards: outcome.curve,
        eval_rate: eval.mean_sum_rate,
        eval_illumination: eval.mean_illumination,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };

    let dir = run_dir(out, &hash, algorithm, cfg.env.scenario, seed);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    {
        let mut w = csv::Writer::from_path(dir.join("curve.csv"))?;
        w.write_record(["episode", "reward"])?;
        for (e, r) in record.rewards.iter().enumerate() {
            w.write_record([e.to_string(), r.to_string()])?;
        }
        w.flush()?;
    }
    let trace = greedy_trace(cfg, &outcome.checkpoint, seed)?;
    write_trace(fs::File::create(dir.join("trace.csv"))?, &trace)?;
    fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;

    store.append(&record)?;
    Ok(RunStatus::Trained(record))
}

/// Step-by-step record of the first greedy evaluation episode.
pub fn greedy_trace(cfg: &RunConfig, checkpoint: &Checkpoint, seed: u64) -> Result<Vec<TraceRow>> {
    let mut env = prepare_env(cfg.make_env()?, &checkpoint.agent)?;
    let mut agent = Agent::from_checkpoint(&env, checkpoint.clone())?;
    agent.checkpoint.obs_norm.frozen = true;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::EVAL_ACTIONS, 0));
    let scenario = make_scenario(cfg.env.scenario, env.config(), derive_seed(seed, streams::EVAL_SCENARIO, 0));
    let mut state = env.reset(scenario, derive_seed(seed, streams::EVAL_GATE, 0))?.to_vec();
    let mut rows = Vec::new();
    loop {
        let d = agent.act(&state, &mut rng, true, false)?;
        let out = env.step(&d.action)?;
        rows.push(TraceRow::from_outcome(rows.len(), &out));
        state = out.state.to_vec();
        if out.done {
            return Ok(rows);
        }
    }
}

/// A sweep: base config, algorithms, seeds, and the length and segment-count axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub base: RunConfig,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// Total lengths swept at the base segment count.
    pub waveguide_lengths: Vec<f64>,
    /// Segment counts swept at the base total length.
    pub segment_counts: Vec<usize>,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// Parses a run config extended with `algorithms`, `seeds`, `episodes`,
    /// `sweep_waveguide_length_m` and `sweep_segment_count`.
    pub fn parse(text: &str, path: &Path, out_dir: &Path) -> Result<Self> {
        let (base, rest) = RunConfig::parse_partial(text, path)?;
        let mut spec = ExperimentSpec {
            base,
            algorithms: Algorithm::ALL.to_vec(),
            seeds: (0..5).collect(),
            episodes: 500,
            waveguide_lengths: Vec::new(),
            segment_counts: Vec::new(),
            out_dir: out_dir.to_path_buf(),
        };
        for (line, key, value) in rest {
            let parsed: std::result::Result<(), String> = match key.as_str() {
                "algorithms" => list(&value).map(|v| spec.algorithms = v),
                "seeds" => list(&value).map(|v| spec.seeds = v),
                "episodes" => num(&value).map(|v| spec.episodes = v),
                "sweep_waveguide_length_m" => list(&value).map(|v| spec.waveguide_lengths = v),
                "sweep_segment_count" => list(&value).map(|v| spec.segment_counts = v),
                _ => Err(format!("unknown key `{key}`")),
            };
            parsed.map_err(|message| Error::ConfigParse {
                path: path.to_path_buf(),
                line,
                message,
            })?;
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path, out_dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path, out_dir)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.waveguide_lengths.iter().any(|&l| !(l.is_finite() && l > 0.0)) || self.segment_counts.contains(&0) {
            return Err(Error::Config("sweep values must be positive".into()));
        }
        for point in self.points() {
            point.validate()?;
        }
        Ok(())
    }

    /// Base point, then the length sweep, then the segment sweep, without
    /// duplicates.
    pub fn points(&self) -> Vec<RunConfig> {
        let mut out: Vec<RunConfig> = vec![self.base.clone()];
        for &l in &self.waveguide_lengths {
            let mut c = self.base.clone();
            c.system.waveguide_total_length_m = l;
            out.push(c);
        }
        for &m in &self.segment_counts {
            let mut c = self.base.clone();
            c.system.segment_count = m;
            out.push(c);
        }
        let mut unique: Vec<RunConfig> = Vec::new();
        for c in out {
            if !unique.contains(&c) {
                unique.push(c);
            }
        }
        unique
    }
}

/// Outcome of a sweep: finished runs and isolated failures.
#[derive(Debug, Default)]
pub struct SweepReport {
    pub trained: Vec<RunRecord>,
    pub skipped: Vec<RunKey>,
    /// `(spec hash, algorithm, seed, error)` of runs that failed.
    pub failures: Vec<(String, Algorithm, u64, Error)>,
}

/// Runs every (sweep point, algorithm, seed). A failing run is recorded and
/// the sweep continues.
pub fn run(spec: &ExperimentSpec) -> Result<SweepReport> {
    spec.validate()?;
    let mut report = SweepReport::default();
    for point in spec.points() {
        for &algorithm in &spec.algorithms {
            for &seed in &spec.seeds {
                match run_one(&point, algorithm, seed, spec.episodes, &spec.out_dir) {
                    Ok(RunStatus::Trained(r)) => report.trained.push(r),
                    Ok(RunStatus::Skipped(k)) => report.skipped.push(k),
                    Err(e) => report.failures.push((point.spec_hash(spec.episodes), algorithm, seed, e)),
                }
            }
        }
    }
    Ok(report)
}

/// Linear-interpolation quantile of unsorted data; `None` when empty.
pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

/// Lengths swept in `table1a.csv`, at three segments.
pub const TABLE1_LENGTHS: [f64; 4] = [40.0, 60.0, 80.0, 100.0];
/// Segment counts swept in `table1b.csv`, at 40 m.
pub const TABLE1_SEGMENTS: [usize; 4] = [3, 6, 9, 12];
const TABLE1A_SEGMENTS: usize = 3;
const TABLE1B_LENGTH: f64 = 40.0;

/// One summary-table cell: medians over seeds, `None` when no run exists.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub axis: String,
    pub algorithm: Algorithm,
    pub median_rate: Option<f64>,
    pub median_illumination: Option<f64>,
    pub seeds: usize,
}

/// Picks the manifest entry for a cell: most episodes first, then the
/// smallest hash, so the choice is deterministic.
fn cell_hash<'a>(manifest: &'a [ManifestRow], protocol: Protocol, scenario: ScenarioKind, length: f64, segments: usize, evals: &[EvalRow], algo: &str) -> Option<&'a ManifestRow> {
    manifest
        .iter()
        .filter(|m| m.protocol == protocol && m.scenario == scenario && m.waveguide_length_m == length && m.segment_count == segments)
        .filter(|m| evals.iter().any(|e| e.spec_hash == m.spec_hash && e.algo == algo))
        .max_by(|a, b| a.episodes.cmp(&b.episodes).then_with(|| b.spec_hash.cmp(&a.spec_hash)))
}

fn table_cells(store: &ResultStore, protocol: Protocol, scenario: ScenarioKind, points: &[(String, f64, usize)]) -> Result<Vec<TableCell>> {
    let manifest = store.manifest()?;
    let evals = store.eval_rows()?;
    let mut cells = Vec::new();
    for (axis, length, segments) in points {
        for algorithm in Algorithm::ALL {
            let algo = algorithm.to_string();
            let rows: Vec<&EvalRow> = match cell_hash(&manifest, protocol, scenario, *length, *segments, &evals, &algo) {
                Some(m) => evals.iter().filter(|e| e.spec_hash == m.spec_hash && e.algo == algo).collect(),
                None => Vec::new(),
            };
            let rates: Vec<f64> = rows.iter().map(|r| r.rate).collect();
            let illums: Vec<f64> = rows.iter().map(|r| r.illumination).collect();
            cells.push(TableCell {
                axis: axis.clone(),
                algorithm,
                median_rate: median(&rates),
                median_illumination: median(&illums),
                seeds: rows.len(),
            });
        }
    }
    Ok(cells)
}

fn write_table(path: &Path, axis_name: &str, cells: &[TableCell]) -> Result<()> {
    let na = |x: Option<f64>| x.map_or("NA".to_string(), |v| v.to_string());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([axis_name, "algorithm", "median_rate_bpshz", "median_illumination_w", "seeds"])?;
    for c in cells {
        w.write_record([c.axis.clone(), c.algorithm.to_string(), na(c.median_rate), na(c.median_illumination), c.seeds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Both summary tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    pub by_length: Vec<TableCell>,
    pub by_segments: Vec<TableCell>,
}

impl Table1 {
    /// Cells with no runs behind them, as `table:axis:algorithm`.
    pub fn missing(&self) -> Vec<String> {
        let a = self.by_length.iter().map(|c| ("a", c));
        let b = self.by_segments.iter().map(|c| ("b", c));
        a.chain(b).filter(|(_, c)| c.seeds == 0).map(|(t, c)| format!("{t}:{}:{}", c.axis, c.algorithm)).collect()
    }
}

/// Writes `table1a.csv` (three segments, length swept) and `table1b.csv`
/// (40 m, segment count swept) from the runs under `out`. Cells without runs
/// are written as `NA`.
pub fn table1(out: &Path, protocol: Protocol, scenario: ScenarioKind) -> Result<Table1> {
    let store = ResultStore::open(out)?;
    let a_points: Vec<(String, f64, usize)> = TABLE1_LENGTHS.iter().map(|&l| (l.to_string(), l, TABLE1A_SEGMENTS)).collect();
    let b_points: Vec<(String, f64, usize)> = TABLE1_SEGMENTS.iter().map(|&m| (m.to_string(), TABLE1B_LENGTH, m)).collect();
    let table = Table1 {
        by_length: table_cells(&store, protocol, scenario, &a_points)?,
        by_segments: table_cells(&store, protocol, scenario, &b_points)?,
    };
    write_table(&out.join("table1a.csv"), "waveguide_length_m", &table.by_length)?;
    write_table(&out.join("table1b.csv"), "segment_count", &table.by_segments)?;
    Ok(table)
}

/// Trailing moving average; early points average what is available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Smoothing window of the learning curves.
pub const CURVE_WINDOW: usize = 50;

/// Writes `curves.csv` (smoothed reward per run) and `curve_bands.csv`
/// (cross-seed median with quartiles per spec hash and algorithm).
/// Moving sums are recomputed per run so the output does not depend on row
/// order beyond the run grouping.
pub fn curves(out: &Path, window: usize) -> Result<()> {
    let store = ResultStore::open(out)?;
    let mut runs: BTreeMap<RunKey, Vec<(usize, f64)>> = BTreeMap::new();
    for (key, episode, reward) in store.run_rows()? {
        runs.entry(key).or_default().push((episode, reward));
    }
    let mut smoothed: BTreeMap<(String, String), Vec<Vec<f64>>> = BTreeMap::new();
    let mut w = csv::Writer::from_path(out.join("curves.csv"))?;
    w.write_record(["spec_hash", "algo", "seed", "episode", "smoothed_reward"])?;
    for ((hash, algo, seed), mut rows) in runs {
        rows.sort_by_key(|r| r.0);
        let rewards: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let ma = moving_average(&rewards, window);
        for (e, v) in ma.iter().enumerate() {
            w.write_record([hash.clone(), algo.clone(), seed.to_string(), e.to_string(), v.to_string()])?;
        }
        smoothed.entry((hash, algo)).or_default().push(ma);
    }
    w.flush()?;

    let mut b = csv::Writer::from_path(out.join("curve_bands.csv"))?;
    b.write_record(["spec_hash", "algo", "episode", "median", "q25", "q75", "seeds"])?;
    for ((hash, algo), series) in smoothed {
        let len = series.iter().map(Vec::len).max().unwrap_or(0);
        for e in 0..len {
            let at: Vec<f64> = series.iter().filter_map(|s| s.get(e).copied()).collect();
            let q = |p| quantile(&at, p).map_or("NA".into(), |v: f64| v.to_string());
            b.write_record([hash.clone(), algo.clone(), e.to_string(), q(0.5), q(0.25), q(0.75), at.len().to_string()])?;
        }
    }
    b.flush()?;
    Ok(())
}

/// Outcome of one self-test.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn random_point<R: Rng>(cfg: &SystemConfig, rng: &mut R) -> Point2 {
    Point2::new(rng.random_range(0.0..cfg.region_x_m), rng.random_range(0.0..cfg.region_y_m))
}

/// Quick physics and numerics self-tests on a configuration: channel
/// magnitudes, illumination against a Monte Carlo average, projection
/// feasibility, and a finite-difference gradient check.
pub fn validate(cfg: &SystemConfig, seed: u64) -> Result<Vec<Check>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // Free-space magnitude |h| r = c / (4 pi f) and in-guide magnitude.
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = rng.random_range(0.0..cfg.waveguide_total_length_m);
        let ant = AntennaLayout::antenna_point(x, cfg);
        let p = random_point(cfg, &mut rng).ground();
        let h = freespace_channel(&ant, &p, cfg);
        worst = worst.max(rel_err(h.norm() * ant.distance(&p), cfg.path_constant()));
        let feed = rng.random_range(0.0..=x);
        let g = in_waveguide_gain(feed, x, cfg);
        let expect = 10f64.powf(-cfg.attenuation_db_per_m * (x - feed) / 20.0) / (cfg.antennas_per_segment as f64).sqrt();
        worst = worst.max(rel_err(g.norm(), expect));
    }
    checks.push(Check {
        name: "channel_magnitudes",
        passed: worst <= 1e-12,
        detail: format!("max relative error {worst:.3e}"),
    });

    // Illumination closed form against random unit-power symbols.
    let layout = AntennaLayout::uniform(cfg);
    let targets = vec![random_point(cfg, &mut rng)];
    let all = vec![true; cfg.segment_count];
    let gs = channel_matrix(&layout, &targets, &all, cfg);
    let w = BeamMatrix::new(
        cfg.user_count,
        cfg.segment_count,
        (0..cfg.user_count * cfg.segment_count)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect(),
    )?;
    let closed = illumination_power(&gs, &w)[0];
    let coeff: Vec<Complex64> = (0..cfg.user_count)
        .map(|k| (0..cfg.segment_count).map(|m| gs.get(0, m) * w.get(k, m)).sum())
        .collect();
    let draws = 200_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let y: Complex64 = coeff.iter().map(|c| c * Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))).sum();
        acc += y.norm_sqr();
    }
    let mc = acc / draws as f64;
    let err = rel_err(mc, closed);
    checks.push(Check {
        name: "illumination_monte_carlo",
        passed: err <= 0.02,
        detail: format!("closed form {closed:.4e}, Monte Carlo {mc:.4e}, relative error {err:.3e}"),
    });

    // Projection feasibility and idempotence on random raw actions.
    let dim = EnvAction::dim(cfg);
    let (mut infeasible, mut moved) = (0usize, 0usize);
    for _ in 0..2000 {
        let flat: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0) * cfg.waveguide_total_length_m).collect();
        let p = project_action(&EnvAction::from_flat(cfg, &flat)?, cfg)?;
        let power_ok = p.beam.power() <= cfg.total_power_w * (1.0 + 1e-9);
        if !(power_ok && p.layout.is_feasible(cfg)) {
            infeasible += 1;
        }
        let again = project_action(&p.to_action(), cfg)?;
        let same = again.layout.positions().iter().zip(p.layout.positions()).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0))
            && again.beam.as_slice().iter().zip(p.beam.as_slice()).all(|(a, b)| (a - b).norm() <= 1e-12 * b.norm().max(1.0))
            && again.activation == p.activation;
        if !same {
            moved += 1;
        }
    }
    checks.push(Check {
        name: "projection",
        passed: infeasible == 0 && moved == 0,
        detail: format!("{infeasible} infeasible, {moved} not idempotent out of 2000"),
    });

    // Backpropagation against central differences on a small network.
    let net = Mlp::new(&[5, 8, 8, 3], &mut rng);
    let input: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cache = net.forward_cached(&input)?;
    let mut grads = vec![0.0; net.params().len()];
    net.accumulate_backward(&cache, &upstream, &mut grads);
    let loss = |n: &Mlp| -> Result<f64> { Ok(n.forward(&input)?.iter().zip(&upstream).map(|(a, b)| a * b).sum()) };
    let mut worst: f64 = 0.0;
    for i in 0..grads.len() {
        let h = 1e-6;
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
        worst = worst.max((fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6));
    }
    checks.push(Check {
        name: "backprop_finite_difference",
        passed: worst <= 1e-4,
        detail: format!("max relative error {worst:.3e}"),
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.env.episode_length = 4;
        c.agent.hidden = vec![8];
        c.eval_episodes = 2;
        c
    }

    #[test]
    fn default_text_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_reads_overrides_and_comments() {
        let text = "# header\nsegment_count = 6  # more\nprotocol = SM\nhidden = 32, 16\nnoise_power_dbm = -80\n\n";
        let cfg = RunConfig::parse(text, Path::new("x")).unwrap();
        assert_eq!(cfg.system.segment_count, 6);
        assert_eq!(cfg.env.protocol, Protocol::Sm);
        assert_eq!(cfg.agent.hidden, vec![32, 16]);
        assert!((cfg.system.noise_power_w - 1e-11).abs() < 1e-23);
    }

    #[test]
    fn spacing_follows_frequency_unless_given() {
        let cfg = RunConfig::parse("carrier_frequency_hz = 14e9", Path::new("x")).unwrap();
        assert!((cfg.system.min_spacing_m - cfg.system.wavelength() / 2.0).abs() < 1e-15);
        let cfg = RunConfig::parse("carrier_frequency_hz = 14e9\nmin_spacing_m = 0.02", Path::new("x")).unwrap();
        assert_eq!(cfg.system.min_spacing_m, 0.02);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match RunConfig::parse("segment_count = 3\nbogus = 1\n", Path::new("c.txt")) {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("\n\nsegment_count = three\n", Path::new("c.txt")) {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("no equals sign", Path::new("c.txt")).is_err());
    }

    #[test]
    fn default_matches_reference_parameters() {
        let s = RunConfig::default().system;
        assert_eq!((s.user_count, s.target_count, s.antennas_per_segment), (6, 1, 10));
        assert_eq!(s.total_power_w, 100.0);
        assert_eq!(s.carrier_frequency_hz, 28e9);
        assert_eq!(s.waveguide_height_m, 5.0);
        assert!((s.sensing_threshold_w - 1e-5).abs() < 1e-17);
        assert!((s.noise_power_w - 1e-12).abs() < 1e-24);
    }

    #[test]
    fn hash_tracks_parameters_but_not_algorithm() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.agent.algorithm = Algorithm::Ppo;
        assert_eq!(a.spec_hash(10), b.spec_hash(10));
        b.system.attenuation_db_per_m += 1e-9;
        assert_ne!(a.spec_hash(10), b.spec_hash(10));
        assert_ne!(a.spec_hash(10), a.spec_hash(11));
        let mut c = a.clone();
        c.agent.actor_lr *= 2.0;
        assert_ne!(a.spec_hash(10), c.spec_hash(10));
    }

    #[test]
    fn moving_average_arithmetic() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let ma = moving_average(&xs, 50);
        assert_eq!(ma.len(), 100);
        assert_eq!(*ma.last().unwrap(), 75.5);
        assert_eq!(ma[0], 1.0);
        assert!(moving_average(&[3.0; 20], 5).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), Some(2.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn sweep_points_follow_both_axes() {
        let spec = ExperimentSpec::parse(
            "sweep_waveguide_length_m = 40, 60\nsweep_segment_count = 3, 6\nseeds = 1\nalgorithms = SHRL, Random",
            Path::new("x"),
            Path::new("out"),
        )
        .unwrap();
        let pts = spec.points();
        let shape: Vec<(f64, usize)> = pts.iter().map(|p| (p.system.waveguide_total_length_m, p.system.segment_count)).collect();
        assert_eq!(shape, vec![(40.0, 3), (60.0, 3), (40.0, 6)]);
        assert_eq!(spec.algorithms, vec![Algorithm::Shrl, Algorithm::Random]);
        assert_eq!(spec.seeds, vec![1]);
    }

    #[test]
    fn empty_algorithm_list_does_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::parse("seeds = 0", Path::new("x"), dir.path()).unwrap();
        spec.algorithms.clear();
        let report = run(&spec).unwrap();
        assert!(report.trained.is_empty() && report.failures.is_empty());
        assert!(!dir.path().join("runs.csv").exists());
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let spec = ExperimentSpec::parse("seeds = ", Path::new("x"), Path::new("out")).unwrap();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rerun_is_skipped_and_files_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let first = run_one(&cfg, Algorithm::A2c, 3, 3, dir.path()).unwrap();
        assert!(matches!(first, RunStatus::Trained(_)));
        let runs = fs::read(dir.path().join("runs.csv")).unwrap();
        let evals = fs::read(dir.path().join("eval.csv")).unwrap();
        let second = run_one(&cfg, Algorithm::A2c, 3, 3, dir.path()).unwrap();
        assert!(matches!(second, RunStatus::Skipped(_)));
        assert_eq!(fs::read(dir.path().join("runs.csv")).unwrap(), runs);
        assert_eq!(fs::read(dir.path().join("eval.csv")).unwrap(), evals);
        let text = String::from_utf8(runs).unwrap();
        assert_eq!(text.lines().next().unwrap(), "spec_hash,algo,seed,episode,reward");
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn partial_rows_are_discarded_before_retry() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_one(&cfg, Algorithm::Random, 0, 2, dir.path()).unwrap();
        let clean = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        // A crash after writing training rows but before the eval row.
        let mut dirty = clean.clone();
        dirty.push_str("deadbeef,SHRL,9,0,1.5\n");
        fs::write(dir.path().join("runs.csv"), dirty).unwrap();
        ResultStore::open(dir.path()).unwrap().discard_partial().unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("runs.csv")).unwrap(), clean);
    }

    #[test]
    fn failures_are_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::parse("episode_length = 3\nhidden = 4\neval_episodes = 1\nseeds = 0\nalgorithms = Random", Path::new("x"), dir.path()).unwrap();
        spec.episodes = 2;
        // Block one run's directory with a plain file so its write fails.
        let bad = spec.base.spec_hash(2);
        fs::create_dir_all(dir.path().join("runs")).unwrap();
        fs::write(dir.path().join("runs").join(&bad), "occupied").unwrap();
        spec.segment_counts = vec![6];
        let report = run(&spec).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].0, bad);
        assert_eq!(report.trained.len(), 1);
    }

    #[test]
    fn table_marks_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_one(&cfg, Algorithm::Random, 0, 2, dir.path()).unwrap();
        let t = table1(dir.path(), Protocol::Hssm, ScenarioKind::Sparse).unwrap();
        let cell = t.by_length.iter().find(|c| c.axis == "40" && c.algorithm == Algorithm::Random).unwrap();
        assert_eq!(cell.seeds, 1);
        let evals = ResultStore::open(dir.path()).unwrap().eval_rows().unwrap();
        assert_eq!(cell.median_rate, Some(evals[0].rate));
        assert_eq!(t.missing().len(), 2 * 4 * 5 - 2);
        let text = fs::read_to_string(dir.path().join("table1a.csv")).unwrap();
        assert!(text.starts_with("waveguide_length_m,algorithm,median_rate_bpshz,median_illumination_w,seeds\n"));
        assert!(text.contains("60,SHRL,NA,NA,0"));
        assert!(fs::read_to_string(dir.path().join("table1b.csv")).unwrap().contains("3,Random,"));
    }

    #[test]
    fn curves_smooth_each_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_one(&cfg, Algorithm::Random, 0, 3, dir.path()).unwrap();
        run_one(&cfg, Algorithm::Random, 1, 3, dir.path()).unwrap();
        curves(dir.path(), 2).unwrap();
        let text = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 6);
        let bands = fs::read_to_string(dir.path().join("curve_bands.csv")).unwrap();
        assert_eq!(bands.lines().count(), 1 + 3);
        assert!(bands.lines().nth(1).unwrap().ends_with(",2"));
    }

    #[test]
    fn run_directory_has_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_one(&cfg, Algorithm::Shrl, 5, 2, dir.path()).unwrap();
        let rd = run_dir(dir.path(), &cfg.spec_hash(2), Algorithm::Shrl, ScenarioKind::Sparse, 5);
        for f in ["config.txt", "checkpoint.json", "curve.csv", "trace.csv", "record.json"] {
            assert!(rd.join(f).exists(), "{f}");
        }
        let trace = fs::read_to_string(rd.join("trace.csv")).unwrap();
        assert_eq!(trace.lines().next().unwrap(), "step,reward,sum_rate,min_illumination,active_segment_mask");
        assert_eq!(trace.lines().count(), 1 + 4);
        let back = RunConfig::from_file(&rd.join("config.txt")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn self_tests_pass_on_defaults() {
        let checks = validate(&SystemConfig::default(), 1).unwrap();
        assert_eq!(checks.len(), 4);
        for c in checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
