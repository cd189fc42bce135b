//! Monte-Carlo SER sweeps, runtime measurement and CSV output.
//!
//! Every detector in a sweep sees the same instance for a given
//! `(snr_index, trial)`. Channel draws and per-trial randomness come from
//! disjoint streams of the scenario seed, so results do not depend on how
//! trials are spread over threads.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::agent::{detect_greedy_drl, AgentDims, AgentNets, TrainConfig, TrainingScenario};
use crate::baseline::{detect_ml, detect_mmse};
use crate::drl_mcts::{detect_drl_mcts, DrlMctsConfig};
use crate::error::{Error, Result};
use crate::mcts::{detect_mcts, MctsConfig};
use crate::signal::{
    snr_to_noise_variance, stream_rng, ComplexChannelInstance, Constellation, Modulation,
    RealSystem,
};

/// A detector and its parameters as named in a scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorSpec {
    Ml,
    Mmse,
    Mcts { c_uct: f64, playouts: usize, beta_p: f64 },
    DrlMcts { c_puct: f64, playouts: usize, beta_p: f64 },
    /// Stepwise argmax of the actor.
    Greedy,
}

impl DetectorSpec {
    pub fn needs_networks(&self) -> bool {
        matches!(self, Self::DrlMcts { .. } | Self::Greedy)
    }

    /// Label used in result rows, e.g. `mcts-200`.
    pub fn label(&self) -> String {
        match self {
            Self::Ml => "ml".into(),
            Self::Mmse => "mmse".into(),
            Self::Mcts { playouts, .. } => format!("mcts-{playouts}"),
            Self::DrlMcts { playouts, .. } => format!("drl_mcts-{playouts}"),
            Self::Greedy => "drl".into(),
        }
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses `name[:key=value,...]`, e.g. `mcts:playouts=200,c_uct=350`.
impl FromStr for DetectorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), a.trim()),
            None => (s.trim(), ""),
        };
        let mut params = BTreeMap::new();
        for kv in args.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Configuration(format!("detector parameter `{kv}` lacks `=`")))?;
            params.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| params.remove(key);
        let spec = match name {
            "ml" => Self::Ml,
            "mmse" => Self::Mmse,
            "mcts" => Self::Mcts {
                c_uct: parse_opt(take("c_uct"), "c_uct")?.unwrap_or(350.0),
                playouts: parse_opt(take("playouts"), "playouts")?.unwrap_or(200),
                beta_p: parse_opt(take("beta_p"), "beta_p")?.unwrap_or(0.95),
            },
            "drl_mcts" => Self::DrlMcts {
                c_puct: parse_opt(take("c_puct"), "c_puct")?.unwrap_or(20.0),
                playouts: parse_opt(take("playouts"), "playouts")?.unwrap_or(20),
                beta_p: parse_opt(take("beta_p"), "beta_p")?.unwrap_or(0.95),
            },
            "drl" => Self::Greedy,
            other => return Err(Error::Configuration(format!("unknown detector `{other}`"))),
        };
        if let Some(k) = params.keys().next() {
            return Err(Error::Configuration(format!("unknown parameter `{k}` for detector `{name}`")));
        }
        Ok(spec)
    }
}

fn parse_opt<T: FromStr>(value: Option<String>, key: &str) -> Result<Option<T>> {
    value
        .map(|v| v.parse().map_err(|_| Error::Configuration(format!("bad value `{v}` for `{key}`"))))
        .transpose()
}

/// A detector bound to the networks it may need.
#[derive(Debug, Clone, Copy)]
pub struct Detector<'a> {
    pub spec: &'a DetectorSpec,
    pub nets: Option<&'a AgentNets>,
    /// Scale the networks were trained with; only read by DRL-MCTS.
    pub reward_scale: f64,
}

impl Detector<'_> {
    /// Runs the detector; `seed` feeds the random rollouts of plain MCTS.
    pub fn detect(&self, sys: &RealSystem, seed: u64) -> Result<Vec<f64>> {
        match *self.spec {
            DetectorSpec::Ml => detect_ml(sys),
            DetectorSpec::Mmse => detect_mmse(sys),
            DetectorSpec::Mcts { c_uct, playouts, beta_p } => detect_mcts(
                sys,
                &MctsConfig { c_uct, playouts_initial: playouts, beta_p, rng_seed: seed },
            ),
            DetectorSpec::DrlMcts { c_puct, playouts, beta_p } => {
                let mut cfg = DrlMctsConfig::new(c_puct, playouts, self.reward_scale);
                cfg.beta_p = beta_p;
                detect_drl_mcts(sys, self.networks()?, &cfg)
            }
            DetectorSpec::Greedy => detect_greedy_drl(sys, self.networks()?),
        }
    }

    fn networks(&self) -> Result<&AgentNets> {
        self.nets.ok_or_else(|| {
            Error::Configuration(format!("detector `{}` needs a checkpoint", self.spec.label()))
        })
    }
}

/// Experiment description, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_t: usize,
    pub n_r: usize,
    pub modulation: Modulation,
    pub epsilon: f64,
    pub snr_grid_db: Vec<f64>,
    pub trials: usize,
    pub detectors: Vec<DetectorSpec>,
    pub seed: u64,
    /// Forces the per-antenna complex noise variance regardless of SNR.
    pub noise_variance: Option<f64>,
    /// Settings for `train`; its `reward_scale` is also the DRL-MCTS scale.
    pub train: TrainConfig,
}

const SCENARIO_KEYS: &[&str] = &[
    "n_t", "n_r", "modulation", "epsilon", "snr_grid_db", "trials", "seed", "detector",
    "noise_variance", "train_updates", "train_episodes", "train_workers", "train_snr_db",
    "train_seed", "gamma", "c1", "c2", "c3", "c4", "learning_rate", "reward_scale",
];

impl Scenario {
    /// Scenario with default training settings and no detectors.
    pub fn new(n_t: usize, n_r: usize, modulation: Modulation, epsilon: f64, snr_grid_db: Vec<f64>) -> Self {
        let constellation = Constellation::new(modulation);
        let mut train = TrainConfig::for_receive_dim(constellation.real_dim(n_r));
        train.snr_db = snr_grid_db.clone();
        Self {
            n_t,
            n_r,
            modulation,
            epsilon,
            snr_grid_db,
            trials: 10_000,
            detectors: Vec::new(),
            seed: 0,
            noise_variance: None,
            train,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut single: BTreeMap<&str, &str> = BTreeMap::new();
        let mut detectors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Configuration(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !SCENARIO_KEYS.contains(&key) {
                return Err(Error::Configuration(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if key == "detector" {
                detectors.push(value.parse::<DetectorSpec>()?);
            } else if single.insert(key, value).is_some() {
                return Err(Error::Configuration(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        let get = |key: &str| single.get(key).map(|v| v.to_string());
        let required = |key: &str| {
            get(key).ok_or_else(|| Error::Configuration(format!("missing required key `{key}`")))
        };
        let n_t = parse_opt(Some(required("n_t")?), "n_t")?.unwrap();
        let n_r = parse_opt(Some(required("n_r")?), "n_r")?.unwrap();
        let modulation: Modulation = required("modulation")?
            .parse()
            .map_err(|_| Error::Configuration("unknown modulation".into()))?;
        let epsilon = parse_opt(get("epsilon"), "epsilon")?.unwrap_or(0.0);
        let grid = parse_list(&required("snr_grid_db")?, "snr_grid_db")?;
        let mut sc = Self::new(n_t, n_r, modulation, epsilon, grid);
        sc.detectors = detectors;
        if let Some(t) = parse_opt(get("trials"), "trials")? {
            sc.trials = t;
        }
        if let Some(s) = parse_opt(get("seed"), "seed")? {
            sc.seed = s;
            sc.train.seed = s;
        }
        sc.noise_variance = parse_opt(get("noise_variance"), "noise_variance")?;
        let t = &mut sc.train;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = parse_opt(get($key), $key)? {
                    $field = v;
                }
            };
        }
        set!("train_updates", t.total_updates);
        set!("train_episodes", t.episodes_per_update);
        set!("train_workers", t.workers);
        set!("train_seed", t.seed);
        set!("gamma", t.gamma);
        set!("c1", t.c1);
        set!("c2", t.c2);
        set!("c3", t.c3);
        set!("c4", t.c4);
        set!("learning_rate", t.learning_rate);
        set!("reward_scale", t.reward_scale);
        if let Some(v) = get("train_snr_db") {
            t.snr_db = parse_list(&v, "train_snr_db")?;
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_r < self.n_t {
            return Err(Error::Configuration(format!("need 1 <= n_t <= n_r, got {}x{}", self.n_r, self.n_t)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Configuration(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.snr_grid_db.is_empty() || self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Configuration("snr_grid_db must be a nonempty list of numbers".into()));
        }
        if self.trials == 0 || self.trials >= 1 << 32 {
            return Err(Error::Configuration(format!("trials {} out of range", self.trials)));
        }
        if let Some(v) = self.noise_variance {
            if !(v > 0.0) {
                return Err(Error::Configuration("noise_variance must be positive".into()));
            }
        }
        self.train.validate()
    }

    pub fn constellation(&self) -> Constellation {
        Constellation::new(self.modulation)
    }

    pub fn dims(&self) -> AgentDims {
        AgentDims::new(self.n_t, self.n_r, &self.constellation())
    }

    /// The fixed base channel `H_c` all instances vary around.
    pub fn base_channel(&self) -> Result<ComplexChannelInstance> {
        ComplexChannelInstance::random(
            self.n_r,
            self.n_t,
            self.constellation().is_real(),
            self.epsilon,
            self.seed,
        )
    }

    pub fn training_scenario(&self) -> Result<TrainingScenario> {
        Ok(TrainingScenario { channel: self.base_channel()?, constellation: self.constellation() })
    }

    /// Complex noise variance at grid point `snr`.
    pub fn noise_variance_at(&self, snr_db: f64) -> f64 {
        self.noise_variance.unwrap_or_else(|| {
            snr_to_noise_variance(snr_db, self.n_t, self.constellation().symbol_energy())
        })
    }

    /// Transmit symbols per trial: `N_T`.
    pub fn symbols_per_trial(&self) -> usize {
        self.n_t
    }
}

fn parse_list(text: &str, key: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| parse_opt::<f64>(Some(v.trim().to_string()), key).map(Option::unwrap))
        .collect()
}

const ATTEMPT_SHIFT: u32 = 32;
const SNR_SHIFT: u32 = 40;
const TRIAL_STREAM_FLAG: u64 = 1 << 62;
const MAX_ATTEMPTS: u64 = 256;

/// One benchmark instance together with its bookkeeping.
#[derive(Debug, Clone)]
pub struct Instance {
    pub sys: RealSystem,
    /// Seed for any randomized detector run on this instance.
    pub detector_seed: u64,
    /// Degenerate channels skipped before this one.
    pub resamples: u32,
}

/// Draws the instance for `(snr_index, trial)`: channel `H_c^j`, symbols and
/// noise. Degenerate channels are replaced by the next attempt's channel.
pub fn draw_instance(
    scenario: &Scenario,
    channel: &ComplexChannelInstance,
    snr_index: usize,
    trial: usize,
) -> Result<Instance> {
    let snr = scenario.snr_grid_db[snr_index];
    let sigma = scenario.noise_variance_at(snr);
    let constellation = scenario.constellation();
    for attempt in 0..MAX_ATTEMPTS {
        let key = ((snr_index as u64) << SNR_SHIFT) | (attempt << ATTEMPT_SHIFT) | trial as u64;
        let h = channel.generate_varying_channel(1 + key)?;
        let mut rng = stream_rng(scenario.seed, TRIAL_STREAM_FLAG | key);
        match RealSystem::sample(&h, &constellation, sigma, &mut rng) {
            Ok(sys) => {
                return Ok(Instance {
                    sys,
                    detector_seed: scenario.seed ^ key.rotate_left(17),
                    resamples: attempt as u32,
                })
            }
            Err(Error::DegenerateChannel { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Numerical(format!("no usable channel for snr index {snr_index}, trial {trial}")))
}

/// Number of wrong transmit symbols. A QAM symbol is wrong if either of its
/// real components is; BPSK counts real symbols.
pub fn count_symbol_errors(estimate: &[f64], truth: &[f64], n_t: usize, real: bool) -> usize {
    if real {
        return estimate.iter().zip(truth).filter(|(a, b)| a != b).count();
    }
    (0..n_t)
        .filter(|&i| estimate[i] != truth[i] || estimate[i + n_t] != truth[i + n_t])
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerResult {
    pub detector: String,
    pub snr_db: f64,
    pub trials: usize,
    pub symbol_errors: usize,
    pub symbols_total: usize,
    pub ser: f64,
    /// Mean seconds per symbol vector.
    pub mean_runtime_s: f64,
}

impl SerResult {
    /// Binomial standard error of the SER estimate.
    pub fn standard_error(&self) -> f64 {
        (self.ser * (1.0 - self.ser) / self.symbols_total as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub results: Vec<SerResult>,
    /// Degenerate channels resampled over the whole sweep.
    pub resamples: usize,
}

impl Sweep {
    pub fn get(&self, detector: &str, snr_db: f64) -> Option<&SerResult> {
        self.results.iter().find(|r| r.detector == detector && r.snr_db == snr_db)
    }
}

/// Runs every detector of the scenario over the SNR grid.
pub fn run_sweep(scenario: &Scenario, nets: Option<&AgentNets>) -> Result<Sweep> {
    scenario.validate()?;
    if scenario.detectors.iter().any(DetectorSpec::needs_networks) {
        let nets = nets.ok_or_else(|| {
            Error::Configuration("scenario has DRL detectors but no checkpoint was given".into())
        })?;
        nets.check_dims(scenario.dims())?;
    }
    let channel = scenario.base_channel()?;
    let detectors: Vec<Detector> = scenario
        .detectors
        .iter()
        .map(|spec| Detector { spec, nets, reward_scale: scenario.train.reward_scale })
        .collect();
    let real = scenario.constellation().is_real();
    let per_trial = scenario.symbols_per_trial();
    let resample_cap = (scenario.trials / 100).max(1);

    let mut results = Vec::new();
    let mut resamples = 0;
    for (snr_index, &snr_db) in scenario.snr_grid_db.iter().enumerate() {
        // (resamples, per detector (errors, seconds))
        let outcomes: Vec<(u32, Vec<(usize, f64)>)> = (0..scenario.trials)
            .into_par_iter()
            .map(|trial| {
                let inst = draw_instance(scenario, &channel, snr_index, trial)?;
                let truth = inst.sys.x_true().expect("sampled systems carry truth");
                let per_detector = detectors
                    .iter()
                    .map(|d| {
                        let start = Instant::now();
                        let x = d.detect(&inst.sys, inst.detector_seed)?;
                        let secs = start.elapsed().as_secs_f64();
                        Ok((count_symbol_errors(&x, truth, scenario.n_t, real), secs))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((inst.resamples, per_detector))
            })
            .collect::<Result<_>>()?;
        let point_resamples: usize = outcomes.iter().map(|(r, _)| *r as usize).sum();
        if point_resamples > resample_cap {
            return Err(Error::Numerical(format!(
                "{point_resamples} degenerate channels at {snr_db} dB exceed the limit of {resample_cap}"
            )));
        }
        resamples += point_resamples;
        for (k, d) in detectors.iter().enumerate() {
            let symbol_errors: usize = outcomes.iter().map(|(_, v)| v[k].0).sum();
            let seconds: f64 = outcomes.iter().map(|(_, v)| v[k].1).sum();
            let symbols_total = scenario.trials * per_trial;
            results.push(SerResult {
                detector: d.spec.label(),
                snr_db,
                trials: scenario.trials,
                symbol_errors,
                symbols_total,
                ser: symbol_errors as f64 / symbols_total as f64,
                mean_runtime_s: seconds / scenario.trials as f64,
            });
        }
    }
    sort_results(&mut results);
    Ok(Sweep { results, resamples })
}

fn sort_results(results: &mut [SerResult]) {
    results.sort_by(|a, b| a.detector.cmp(&b.detector).then(a.snr_db.total_cmp(&b.snr_db)));
}

/// Warm-up runs excluded from [`measure_runtime`].
pub const WARMUP_RUNS: usize = 10;

/// Mean wall-clock seconds per detection on the calling thread. The first
/// [`WARMUP_RUNS`] instances are run untimed.
pub fn measure_runtime<F>(mut detect: F, instances: &[RealSystem]) -> Result<f64>
where
    F: FnMut(&RealSystem) -> Result<Vec<f64>>,
{
    if instances.len() < 100 {
        return Err(Error::InvalidParameter(format!(
            "runtime measurement needs at least 100 instances, got {}",
            instances.len()
        )));
    }
    for sys in &instances[..WARMUP_RUNS] {
        std::hint::black_box(detect(sys)?);
    }
    let timed = &instances[WARMUP_RUNS..];
    let mut total = 0.0;
    for sys in timed {
        let start = Instant::now();
        std::hint::black_box(detect(sys)?);
        total += start.elapsed().as_secs_f64();
    }
    Ok(total / timed.len() as f64)
}

pub const CSV_HEADER: &str = "detector,snr_db,trials,symbol_errors,ser,mean_runtime_s";

/// Rows sorted by `(detector, snr_db)`; SER with six significant digits.
pub fn to_csv(results: &[SerResult]) -> String {
    let mut rows = results.to_vec();
    sort_results(&mut rows);
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.5e},{}",
            r.detector, r.snr_db, r.trials, r.symbol_errors, r.ser, r.mean_runtime_s
        );
    }
    out
}

pub fn emit_csv(results: &[SerResult], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(results))?;
    Ok(())
}

/// Reads rows written by [`to_csv`]. The SER column is checked against the
/// counts, which are authoritative.
pub fn parse_csv(text: &str, symbols_per_trial: usize) -> Result<Vec<SerResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("missing or unexpected CSV header".into()));
    }
    let bad = |line: &str| Error::Format(format!("malformed row `{line}`"));
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(line));
        }
        let trials: usize = f[2].parse().map_err(|_| bad(line))?;
        let symbol_errors: usize = f[3].parse().map_err(|_| bad(line))?;
        let printed: f64 = f[4].parse().map_err(|_| bad(line))?;
        let symbols_total = trials * symbols_per_trial;
        let ser = symbol_errors as f64 / symbols_total as f64;
        if (printed - ser).abs() > 1e-5 * ser.max(f64::MIN_POSITIVE) {
            return Err(Error::Format(format!("SER column disagrees with counts in `{line}`")));
        }
        rows.push(SerResult {
            detector: f[0].to_string(),
            snr_db: f[1].parse().map_err(|_| bad(line))?,
            trials,
            symbol_errors,
            symbols_total,
            ser,
            mean_runtime_s: f[5].parse().map_err(|_| bad(line))?,
        });
    }
    Ok(rows)
}
