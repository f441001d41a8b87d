//! Experiment runner: seeded (layout, seed, agent) runs, per-run result
//! files, trimmed-mean learning curves and a replayable manifest.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/manifest.json        config, derived seeds, run status
//! <out>/runs/<run-id>.csv    episode,return,steps,emitted,delivered,dropped,discarded
//! <out>/curves/<agent>.csv   episode,mean_return,p25,p75
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentConfig, AgentKind, AgentSeeds, State};
use crate::env::{EnvSpec, Environment};
use crate::observer::{FeedbackCounts, FeedbackSource, ObserverConfig, SimulatedHuman, StepStamp};
use crate::rng::{derive_seed, stream_rng, SimRng, Stream};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUNS_DIR: &str = "runs";
pub const CURVES_DIR: &str = "curves";

const LAYOUT_DOMAIN: u64 = 0x4c41_594f_5554;
const RUN_DOMAIN: u64 = 0x5255_4e53;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvSpec,
    /// Explicit layout seeds; derived from `master_seed` when absent.
    pub layout_seeds: Option<Vec<u64>>,
    pub observer: ObserverConfig,
    pub agents: BTreeMap<AgentKind, AgentConfig>,
    pub n_layouts: usize,
    pub n_seeds_per_layout: usize,
    pub n_episodes: u64,
    pub master_seed: u64,
    /// Fraction dropped from each tail when averaging across runs.
    pub trim_fraction: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            env: EnvSpec::default(),
            layout_seeds: None,
            observer: ObserverConfig::default(),
            agents: AgentKind::ALL.into_iter().map(|k| (k, AgentConfig::default())).collect(),
            n_layouts: 10,
            n_seeds_per_layout: 3,
            n_episodes: 150,
            master_seed: 0,
            trim_fraction: 0.1,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io("reading config", path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layouts == 0 || self.n_seeds_per_layout == 0 || self.n_episodes == 0 {
            return Err(Error::Config("n_layouts, n_seeds_per_layout and n_episodes must be positive".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Config("no agents configured".into()));
        }
        if let Some(seeds) = &self.layout_seeds {
            if seeds.len() != self.n_layouts {
                return Err(Error::Config(format!(
                    "layout_seeds has {} entries but n_layouts is {}",
                    seeds.len(),
                    self.n_layouts
                )));
            }
        }
        check_trim(self.trim_fraction)?;
        self.observer.validate()?;
        for cfg in self.agents.values() {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn total_runs_per_agent(&self) -> usize {
        self.n_layouts * self.n_seeds_per_layout
    }

    pub fn layout_seed(&self, layout: usize) -> u64 {
        match &self.layout_seeds {
            Some(seeds) => seeds[layout],
            None => derive_seed(self.master_seed, &[LAYOUT_DOMAIN, layout as u64]),
        }
    }

    /// Seed for one (layout, seed) cell. Independent of the agent kind, so
    /// every agent faces the same initial conditions and observer draws.
    pub fn run_seed(&self, layout: usize, seed_index: usize) -> u64 {
        derive_seed(self.master_seed, &[RUN_DOMAIN, layout as u64, seed_index as u64])
    }

    pub fn run_specs(&self) -> Vec<RunSpec> {
        let mut specs = Vec::new();
        for &agent in self.agents.keys() {
            for layout in 0..self.n_layouts {
                for seed_index in 0..self.n_seeds_per_layout {
                    specs.push(RunSpec {
                        agent,
                        layout,
                        seed_index,
                        layout_seed: self.layout_seed(layout),
                        run_seed: self.run_seed(layout, seed_index),
                    });
                }
            }
        }
        specs
    }

    /// Keeps only `kind` in the agent table.
    pub fn restrict_to(&mut self, kind: AgentKind) -> Result<()> {
        let cfg = self
            .agents
            .remove(&kind)
            .ok_or_else(|| Error::Config(format!("agent '{kind}' is not configured")))?;
        self.agents = BTreeMap::from([(kind, cfg)]);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub agent: AgentKind,
    pub layout: usize,
    pub seed_index: usize,
    pub layout_seed: u64,
    pub run_seed: u64,
}

impl RunSpec {
    pub fn id(&self) -> String {
        format!("{}-L{}-S{}", self.agent, self.layout, self.seed_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: u64,
    /// Undiscounted sum of environment rewards.
    #[serde(rename = "return")]
    pub total_return: f64,
    pub steps: u32,
    pub emitted: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub discarded: u64,
}

impl EpisodeResult {
    pub fn counts_consistent(&self) -> bool {
        self.delivered + self.dropped + self.discarded == self.emitted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub episodes: Vec<EpisodeResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
}

impl ExperimentResults {
    pub fn runs_for(&self, agent: AgentKind) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.spec.agent == agent)
    }

    pub fn is_complete(&self, spec: &RunSpec) -> bool {
        self.runs
            .iter()
            .any(|r| r.spec == *spec && r.episodes.len() as u64 == self.config.n_episodes)
    }
}

/// Plays one episode to termination or truncation.
pub fn run_episode(
    agent: &mut Agent,
    env: &mut dyn Environment,
    source: &mut dyn FeedbackSource,
    env_rng: &mut SimRng,
    episode: u64,
    global_step: &mut u64,
) -> Result<EpisodeResult> {
    let before = source.counts();
    let mut obs: State = env.reset(env_rng).into();
    agent.begin_episode();
    let mut total = 0.0;
    let mut step = 0u64;
    loop {
        let stamp = StepStamp {
            episode,
            step,
            global_step: *global_step,
        };
        let report = agent.run_step(env, source, obs, stamp)?;
        total += report.env_reward;
        step += 1;
        *global_step += 1;
        if report.transition.done {
            break;
        }
        obs = report.transition.next_state;
    }
    source.end_episode();
    let after = source.counts();
    let diff = |f: fn(&FeedbackCounts) -> u64| f(&after) - f(&before);
    Ok(EpisodeResult {
        episode,
        total_return: total,
        steps: env.steps(),
        emitted: diff(|c| c.emitted),
        delivered: diff(|c| c.delivered),
        dropped: diff(|c| c.dropped),
        discarded: diff(|c| c.discarded),
    })
}

/// Executes a single run from scratch; a pure function of `(cfg, spec)`.
pub fn run_single(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<Vec<EpisodeResult>> {
    let agent_cfg = cfg
        .agents
        .get(&spec.agent)
        .ok_or_else(|| Error::Config(format!("agent '{}' is not configured", spec.agent)))?;
    let mut env = cfg.env.build(spec.layout_seed)?;
    let mut env_rng = stream_rng(spec.run_seed, Stream::Environment);
    let mut source = SimulatedHuman::new(cfg.observer.clone(), stream_rng(spec.run_seed, Stream::Observer))?;
    let mut agent = Agent::new(
        spec.agent,
        agent_cfg.clone(),
        env.observation_len(),
        env.num_actions(),
        cfg.observer.p_delay_assumed.clone(),
        AgentSeeds::from_run_seed(spec.run_seed),
    )?;
    let mut global_step = 0;
    (0..cfg.n_episodes)
        .map(|ep| run_episode(&mut agent, env.as_mut(), &mut source, &mut env_rng, ep, &mut global_step))
        .collect()
}

/// Runs every (agent, layout, seed) cell in parallel. When `out_dir` is set
/// the manifest is written first and each run file as soon as it finishes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let specs = cfg.run_specs();
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir.join(RUNS_DIR)).map_err(|e| Error::io("creating output directory", dir, e))?;
        write_manifest(dir, &Manifest::new(cfg, |_| RunStatus::Missing))?;
    }
    let runs = specs
        .par_iter()
        .map(|spec| {
            let episodes = run_single(cfg, spec).map_err(|e| with_run(spec, e))?;
            if let Some(dir) = &cfg.out_dir {
                write_run_file(dir, spec, &episodes).map_err(|e| with_run(spec, e))?;
            }
            Ok(RunRecord { spec: *spec, episodes })
        })
        .collect::<Result<Vec<_>>>()?;
    let results = ExperimentResults {
        config: cfg.clone(),
        runs,
    };
    if let Some(dir) = &cfg.out_dir {
        emit_curves(&results, dir)?;
    }
    Ok(results)
}

fn with_run(spec: &RunSpec, e: Error) -> Error {
    match e {
        Error::Io { context, path, source } => Error::Io {
            context: format!("run {}: {context}", spec.id()),
            path,
            source,
        },
        Error::Config(m) => Error::Config(format!("run {}: {m}", spec.id())),
        Error::Contract(m) => Error::Contract(format!("run {}: {m}", spec.id())),
        other => other,
    }
}

fn check_trim(trim_fraction: f64) -> Result<()> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::Contract(format!("trim fraction must be in [0, 0.5), got {trim_fraction}")));
    }
    Ok(())
}

/// Sorts, drops `floor(n * trim_fraction)` values from each tail and
/// averages the rest.
pub fn trimmed_mean(values: &[f64], trim_fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("trimmed mean of an empty sample".into()));
    }
    check_trim(trim_fraction)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (values.len() as f64 * trim_fraction).floor() as usize;
    let kept = &sorted[k..sorted.len() - k];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Linear-interpolation percentile, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("percentile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Contract(format!("percentile rank must be in [0,1], got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: u64,
    pub mean_return: f64,
    pub p25: f64,
    pub p75: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    pub agent: AgentKind,
    pub runs: usize,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn from_runs<'a>(
        agent: AgentKind,
        runs: impl IntoIterator<Item = &'a [EpisodeResult]>,
        n_episodes: u64,
        trim_fraction: f64,
    ) -> Result<Self> {
        let runs: Vec<&[EpisodeResult]> = runs.into_iter().filter(|r| r.len() as u64 == n_episodes).collect();
        if runs.is_empty() {
            return Err(Error::Contract(format!("no complete runs for agent '{agent}'")));
        }
        let points = (0..n_episodes as usize)
            .map(|ep| {
                let column: Vec<f64> = runs.iter().map(|r| r[ep].total_return).collect();
                Ok(CurvePoint {
                    episode: ep as u64,
                    mean_return: trimmed_mean(&column, trim_fraction)?,
                    p25: percentile(&column, 0.25)?,
                    p75: percentile(&column, 0.75)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LearningCurve {
            agent,
            runs: runs.len(),
            points,
        })
    }

    pub fn mean_returns(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_return).collect()
    }

    /// Number of episodes until the curve first reaches `threshold`, i.e.
    /// the 1-based index of the first qualifying episode.
    pub fn episodes_to_threshold(&self, threshold: f64) -> Option<u64> {
        episodes_to_threshold(&self.mean_returns(), threshold)
    }

    /// Average of the curve over the 1-based inclusive episode range.
    pub fn window_mean(&self, first: u64, last: u64) -> Option<f64> {
        let lo = first.checked_sub(1)? as usize;
        let hi = (last as usize).min(self.points.len());
        if lo >= hi {
            return None;
        }
        let slice = &self.points[lo..hi];
        Some(slice.iter().map(|p| p.mean_return).sum::<f64>() / slice.len() as f64)
    }
}

pub fn episodes_to_threshold(curve: &[f64], threshold: f64) -> Option<u64> {
    curve.iter().position(|&v| v >= threshold).map(|i| i as u64 + 1)
}

pub fn learning_curves(results: &ExperimentResults) -> Result<BTreeMap<AgentKind, LearningCurve>> {
    let cfg = &results.config;
    cfg.agents
        .keys()
        .map(|&agent| {
            let runs = results.runs_for(agent).map(|r| r.episodes.as_slice());
            Ok((agent, LearningCurve::from_runs(agent, runs, cfg.n_episodes, cfg.trim_fraction)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub id: String,
    #[serde(flatten)]
    pub spec: RunSpec,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub runs: Vec<ManifestRun>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, status: impl Fn(&RunSpec) -> RunStatus) -> Self {
        Manifest {
            version: VERSION.to_string(),
            config: cfg.clone(),
            runs: cfg
                .run_specs()
                .into_iter()
                .map(|spec| ManifestRun {
                    id: spec.id(),
                    status: status(&spec),
                    spec,
                })
                .collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io("reading manifest", &path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn find(&self, run_id: &str) -> Option<&ManifestRun> {
        self.runs.iter().find(|r| r.id == run_id)
    }
}

fn write_bytes(path: &Path, bytes: &[u8], context: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(context, parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(context, path, e))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    write_bytes(&dir.join(MANIFEST_FILE), text.as_bytes(), "writing manifest")
}

pub fn run_file_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(RUNS_DIR).join(format!("{run_id}.csv"))
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

fn from_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn episodes_to_csv(episodes: &[EpisodeResult]) -> Result<Vec<u8>> {
    to_csv(episodes)
}

pub fn write_run_file(dir: &Path, spec: &RunSpec, episodes: &[EpisodeResult]) -> Result<()> {
    write_bytes(&run_file_path(dir, &spec.id()), &episodes_to_csv(episodes)?, "writing run results")
}

pub fn read_run_file(dir: &Path, run_id: &str) -> Result<Vec<EpisodeResult>> {
    let path = run_file_path(dir, run_id);
    let bytes = fs::read(&path).map_err(|e| Error::io("reading run results", &path, e))?;
    from_csv(&bytes, &path)
}

pub fn curve_to_csv(curve: &LearningCurve) -> Result<Vec<u8>> {
    to_csv(&curve.points)
}

pub fn read_curve_file(path: &Path) -> Result<Vec<CurvePoint>> {
    let bytes = fs::read(path).map_err(|e| Error::io("reading curve", path, e))?;
    from_csv(&bytes, path)
}

/// Writes one curve per agent with at least one complete run, plus the
/// manifest. Deterministic in `results`.
pub fn emit_curves(results: &ExperimentResults, dir: &Path) -> Result<BTreeMap<AgentKind, LearningCurve>> {
    let cfg = &results.config;
    let mut curves = BTreeMap::new();
    for &agent in cfg.agents.keys() {
        let runs = results.runs_for(agent).map(|r| r.episodes.as_slice());
        if let Ok(curve) = LearningCurve::from_runs(agent, runs, cfg.n_episodes, cfg.trim_fraction) {
            let path = dir.join(CURVES_DIR).join(format!("{agent}.csv"));
            write_bytes(&path, &curve_to_csv(&curve)?, "writing curve")?;
            curves.insert(agent, curve);
        }
    }
    let manifest = Manifest::new(cfg, |spec| {
        if results.is_complete(spec) {
            RunStatus::Complete
        } else {
            RunStatus::Missing
        }
    });
    write_manifest(dir, &manifest)?;
    Ok(curves)
}

/// Loads whatever run files exist under `dir`; absent or unreadable runs are
/// left out of the results.
pub fn load_results(dir: &Path) -> Result<ExperimentResults> {
    let manifest = Manifest::load(dir)?;
    let runs = manifest
        .config
        .run_specs()
        .into_iter()
        .filter_map(|spec| {
            let episodes = read_run_file(dir, &spec.id()).ok()?;
            Some(RunRecord { spec, episodes })
        })
        .collect();
    Ok(ExperimentResults {
        config: manifest.config,
        runs,
    })
}

/// Re-derives curves and run status from the files under `dir`.
pub fn aggregate(dir: &Path) -> Result<(ExperimentResults, BTreeMap<AgentKind, LearningCurve>)> {
    let results = load_results(dir)?;
    let curves = emit_curves(&results, dir)?;
    Ok((results, curves))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub run_id: String,
    pub identical: bool,
    /// 1-based line of the first difference between stored and replayed CSV.
    pub first_difference: Option<usize>,
    pub replayed: Vec<EpisodeResult>,
}

/// Re-executes one run from the manifest and compares it byte for byte with
/// the stored run file. A missing run file is recreated.
pub fn replay(dir: &Path, run_id: &str) -> Result<ReplayReport> {
    let manifest = Manifest::load(dir)?;
    let entry = manifest
        .find(run_id)
        .ok_or_else(|| Error::Config(format!("run '{run_id}' is not in the manifest")))?;
    let episodes = run_single(&manifest.config, &entry.spec)?;
    let fresh = episodes_to_csv(&episodes)?;
    let path = run_file_path(dir, run_id);
    let (identical, first_difference) = match fs::read(&path) {
        Ok(stored) => {
            let diff = first_differing_line(&stored, &fresh);
            (diff.is_none(), diff)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            write_run_file(dir, &entry.spec, &episodes)?;
            (true, None)
        }
        Err(e) => return Err(Error::io("reading run results", &path, e)),
    };
    Ok(ReplayReport {
        run_id: run_id.to_string(),
        identical,
        first_difference,
        replayed: episodes,
    })
}

fn first_differing_line(a: &[u8], b: &[u8]) -> Option<usize> {
    if a == b {
        return None;
    }
    let mut la = a.split(|&c| c == b'\n');
    let mut lb = b.split(|&c| c == b'\n');
    let mut line = 1;
    loop {
        match (la.next(), lb.next()) {
            (Some(x), Some(y)) if x == y => line += 1,
            _ => return Some(line),
        }
    }
}
