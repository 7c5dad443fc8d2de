//! Experiment pools: configuration, per-network training and measurement,
//! resumable persistence, and the correlation and regime tables built from
//! the stored records.
//!
//! A run directory holds
//!
//! ```text
//! config.json               the pool's config (checked on resume)
//! records/net_0000.json     one RunRecord per network, written last
//! params/net_0000.bin       trained parameters
//! extensions/net_0000.json  probe index -> feasible classes
//! timings/net_0000.json     wall-clock seconds per stage
//! records.csv               all records, rewritten after every run
//! ```
//!
//! Every file except `timings/` is a pure function of the config and the
//! data files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{self, DataBundle, Dataset, ProbeSource};
use crate::error::{Error, Result};
use crate::fcv::{self, FeatureMatrix, MarginPolicy, ResolvedMargin, SolverStats, Witness};
use crate::mlp::{self, MlpParams, TrainConfig};
use crate::regions::{self, Agreement, Layer};
use crate::rng::{self, Stream};
use crate::sharpness;
use crate::stats::{self, CorrelationResult, PMethod};

pub const CONFIG_VERSION: u32 = 1;
/// Fewest records a correlation is computed on.
pub const MIN_RECORDS: usize = 10;

/// Minibatch size; `"full"` in JSON means one batch of the whole train set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Fixed(usize),
    Full,
}

impl BatchSize {
    pub fn resolve(self, n_train: usize) -> usize {
        match self {
            BatchSize::Fixed(b) => b,
            BatchSize::Full => n_train,
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Fixed(b) => s.serialize_u64(*b as u64),
            BatchSize::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(BatchSize::Fixed(n)),
            Raw::S(s) if s == "full" => Ok(BatchSize::Full),
            Raw::S(s) => Err(serde::de::Error::custom(format!("batch size must be a number or \"full\", got {s:?}"))),
        }
    }
}

/// Which measurements a pool computes. Skipped ones are `null` in records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Measures {
    pub hessian: bool,
    pub regions: bool,
    pub pair_proxy: bool,
    pub ea: bool,
}

impl Default for Measures {
    fn default() -> Self {
        Self {
            hessian: true,
            regions: true,
            pair_proxy: true,
            ea: true,
        }
    }
}

/// One pool of networks sharing data, architecture and training regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version, currently 1.
    pub version: u32,
    /// `mnist`, `fashion-mnist` (IDX files under the data directory) or
    /// `synthetic` (Gaussian blobs, 16 features, 1000 train / 500 test).
    pub dataset: String,
    /// Hidden widths `[h1, h2]`.
    pub widths: [usize; 2],
    pub n_train: usize,
    /// Unseen probe inputs for the pair proxy.
    pub n_probe: usize,
    pub n_networks: usize,
    pub batch_size: BatchSize,
    /// Each network draws its learning rate uniformly from `[lo, hi]`.
    pub lr_range: [f64; 2],
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_target")]
    pub target_train_accuracy: f64,
    #[serde(default)]
    pub margin: MarginPolicy,
    /// Extra margins at which the pair proxy is recomputed.
    #[serde(default)]
    pub epsilon_sweep: Vec<f64>,
    #[serde(default)]
    pub probe_source: ProbeSource,
    /// Network `i` is seeded with `mix(master_seed, i)`.
    pub master_seed: u64,
    /// Seeds the train/probe split shared by every network.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_hessian_probes")]
    pub hessian_probes: usize,
    #[serde(default)]
    pub measures: Measures,
    /// Evaluate on the first `n` test rows only.
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Records below this train accuracy are left out of correlations.
    #[serde(default)]
    pub min_train_accuracy: Option<f64>,
    /// Networks trained concurrently. Does not affect any output.
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub output_dir: PathBuf,
}

fn default_max_epochs() -> usize {
    2000
}

fn default_target() -> f64 {
    1.0
}

fn default_hessian_probes() -> usize {
    sharpness::DEFAULT_PROBES
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    /// 784→64→8→10 on 250 points with 100 probes, 100 networks.
    pub fn pair_proxy_pool(dataset: &str, output_dir: impl Into<PathBuf>) -> Self {
        let margin = if dataset == "fashion-mnist" {
            MarginPolicy::Adaptive
        } else {
            MarginPolicy::default()
        };
        Self {
            version: CONFIG_VERSION,
            dataset: dataset.to_string(),
            widths: [64, 8],
            n_train: 250,
            n_probe: 100,
            n_networks: 100,
            batch_size: BatchSize::Fixed(64),
            lr_range: [0.05, 0.05],
            max_epochs: default_max_epochs(),
            target_train_accuracy: 1.0,
            margin,
            epsilon_sweep: Vec::new(),
            probe_source: ProbeSource::TrainLeftover,
            master_seed: 1,
            data_seed: 0,
            hessian_probes: default_hessian_probes(),
            measures: Measures::default(),
            test_limit: None,
            min_train_accuracy: None,
            workers: 1,
            output_dir: output_dir.into(),
        }
    }

    /// 784→256→128→10; batch 64 with lr in [0.01, 0.05] when `large` is
    /// false, else full batch with lr in [0.2, 0.5].
    pub fn regime_pool(n_train: usize, large: bool, n_networks: usize, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            widths: [256, 128],
            n_train,
            n_probe: 0,
            n_networks,
            batch_size: if large { BatchSize::Full } else { BatchSize::Fixed(64) },
            lr_range: if large { [0.2, 0.5] } else { [0.01, 0.05] },
            master_seed: if large { 2 } else { 1 },
            measures: Measures {
                hessian: true,
                regions: false,
                pair_proxy: false,
                ea: false,
            },
            ..Self::pair_proxy_pool("mnist", output_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.n_networks == 0 {
            return bad("n_networks must be at least 1".into());
        }
        if self.n_train == 0 {
            return bad("n_train must be at least 1".into());
        }
        if self.widths.iter().any(|&w| w == 0 || w > regions::MAX_PATTERN_WIDTH) {
            return bad(format!("widths must lie in 1..={}", regions::MAX_PATTERN_WIDTH));
        }
        if matches!(self.batch_size, BatchSize::Fixed(0)) {
            return bad("batch size must be positive".into());
        }
        let [lo, hi] = self.lr_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("learning-rate range [{lo}, {hi}] must be positive and ordered"));
        }
        if self.max_epochs == 0 || !(self.target_train_accuracy > 0.0 && self.target_train_accuracy <= 1.0) {
            return bad("max_epochs must be positive and the target accuracy in (0, 1]".into());
        }
        if self.measures.pair_proxy && self.n_probe == 0 {
            return bad("the pair proxy needs n_probe ≥ 1".into());
        }
        if let MarginPolicy::Fixed { epsilon } = self.margin {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return bad(format!("margin {epsilon} must be positive"));
            }
        }
        if self.epsilon_sweep.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad("sweep margins must be positive".into());
        }
        if self.measures.hessian && self.hessian_probes == 0 {
            return bad("hessian_probes must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.test_limit == Some(0) {
            return bad("test_limit must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config with fields that cannot change outputs blanked, as JSON.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.workers = 1;
        c.output_dir = PathBuf::new();
        serde_json::to_string(&c).expect("config serialises")
    }

    /// 64-bit FNV-1a of the fingerprint.
    pub fn digest(&self) -> u64 {
        self.fingerprint()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }

    pub fn network_seed(&self, index: usize) -> u64 {
        rng::mix(self.master_seed, index as u64)
    }

    pub fn learning_rate(&self, index: usize) -> f64 {
        let [lo, hi] = self.lr_range;
        if lo == hi {
            return lo;
        }
        let u: f64 = rng::stream_rng(self.network_seed(index), Stream::LearningRate).gen();
        lo + (hi - lo) * u
    }
}

/// The arrays every network of a pool trains and is measured on.
pub struct PoolData {
    pub input: usize,
    pub train_xs: Vec<f64>,
    pub train_ys: Vec<usize>,
    pub probe_xs: Vec<f64>,
    pub test_xs: Vec<f64>,
    pub test_ys: Vec<usize>,
}

fn synthetic_bundle(seed: u64) -> Result<DataBundle> {
    const D: usize = 16;
    let all = data::synthetic_gaussian(1500, D, mlp::N_CLASSES, seed)?;
    let take = |range: std::ops::Range<usize>| -> Result<Dataset> {
        let images: Vec<f32> = range.clone().flat_map(|i| all.row(i).iter().copied()).collect();
        let labels = all.labels()[range].to_vec();
        Dataset::new("synthetic", D, images, labels)
    };
    Ok(DataBundle {
        train: take(0..1000)?,
        test: take(1000..1500)?,
    })
}

pub fn load_bundle(cfg: &ExperimentConfig, data_root: Option<&Path>) -> Result<DataBundle> {
    match cfg.dataset.as_str() {
        "synthetic" => synthetic_bundle(cfg.data_seed),
        "mnist" | "fashion-mnist" => DataBundle::load_dir(&data::data_dir(data_root, &cfg.dataset), &cfg.dataset),
        other => Err(Error::Config(format!("unknown dataset {other:?}"))),
    }
}

impl PoolData {
    pub fn load(cfg: &ExperimentConfig, data_root: Option<&Path>) -> Result<Self> {
        let bundle = load_bundle(cfg, data_root)?;
        Self::from_bundle(cfg, &bundle)
    }

    pub fn from_bundle(cfg: &ExperimentConfig, bundle: &DataBundle) -> Result<Self> {
        let split = data::make_split_with(bundle, cfg.n_train, cfg.n_probe, cfg.probe_source, cfg.data_seed)?;
        let (train_xs, train_ys) = bundle.train.gather(&split.train_indices);
        let (probe_xs, _) = split.probe_dataset(bundle).gather(&split.probe_indices);
        let mut test_indices = split.test_indices.clone();
        if let Some(n) = cfg.test_limit {
            test_indices.truncate(n);
        }
        let (test_xs, test_ys) = bundle.test.gather(&test_indices);
        Ok(Self {
            input: bundle.train.n_features(),
            train_xs,
            train_ys,
            probe_xs,
            test_xs,
            test_ys,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub pair_proxy: usize,
}

/// Everything measured on one network. `None` marks a skipped measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub hessian_trace: Option<f64>,
    pub weight_l1: Option<f64>,
    pub weight_l2: Option<f64>,
    pub l1_count: Option<usize>,
    pub l2_count: Option<usize>,
    pub k_free: Option<usize>,
    pub free_params: Option<u64>,
    pub pair_proxy: Option<usize>,
    pub margin: Option<ResolvedMargin>,
    pub epsilon_sweep: Vec<SweepPoint>,
    pub lp: Option<SolverStats>,
    /// Filled in once every network of the pool exists.
    pub ea: Option<f64>,
    pub notes: Vec<String>,
}

impl RunRecord {
    /// A record with nothing measured yet.
    pub fn new(index: usize, seed: u64, learning_rate: f64, batch_size: usize) -> Self {
        Self {
            index,
            seed,
            status: RunStatus::Ok,
            learning_rate,
            batch_size,
            epochs: 0,
            train_accuracy: None,
            test_accuracy: None,
            hessian_trace: None,
            weight_l1: None,
            weight_l2: None,
            l1_count: None,
            l2_count: None,
            k_free: None,
            free_params: None,
            pair_proxy: None,
            margin: None,
            epsilon_sweep: Vec::new(),
            lp: None,
            ea: None,
            notes: Vec::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_s: f64,
    pub test_s: f64,
    pub hessian_s: f64,
    pub regions_s: f64,
    pub pair_proxy_s: f64,
}

/// Probe index → feasible classes.
pub type Extensions = BTreeMap<usize, Vec<usize>>;

/// Result of training and measuring one network.
pub struct NetworkRun {
    pub record: RunRecord,
    pub params: Option<MlpParams>,
    pub extensions: Option<Extensions>,
    pub timings: Timings,
}

pub fn train_config(cfg: &ExperimentConfig, index: usize) -> TrainConfig {
    TrainConfig {
        widths: (cfg.widths[0], cfg.widths[1]),
        batch_size: cfg.batch_size.resolve(cfg.n_train),
        learning_rate: cfg.learning_rate(index),
        max_epochs: cfg.max_epochs,
        target_train_accuracy: cfg.target_train_accuracy,
        seed: cfg.network_seed(index),
    }
}

/// Trains network `index` and takes every enabled measurement except EA.
pub fn run_network(cfg: &ExperimentConfig, data: &PoolData, index: usize) -> Result<NetworkRun> {
    let tc = train_config(cfg, index);
    let mut record = RunRecord::new(index, tc.seed, tc.learning_rate, tc.batch_size);
    let mut timings = Timings::default();
    let t = Instant::now();
    let trained = mlp::train_xy(&tc, &data.train_xs, &data.train_ys, data.input, mlp::N_CLASSES);
    timings.train_s = t.elapsed().as_secs_f64();
    let (params, log) = match trained {
        Ok(v) => v,
        Err(Error::Diverged { epoch }) => {
            record.status = RunStatus::Diverged { epoch };
            record.epochs = epoch;
            return Ok(NetworkRun {
                record,
                params: None,
                extensions: None,
                timings,
            });
        }
        Err(e) => return Err(e),
    };
    record.epochs = log.epochs.len();
    record.train_accuracy = Some(log.final_train_accuracy);
    if !log.reached_target {
        record.notes.push(format!("train accuracy target not reached in {} epochs", cfg.max_epochs));
    }
    let (extensions, m) = measure(cfg, data, &params, &mut record)?;
    timings = Timings {
        train_s: timings.train_s,
        ..m
    };
    Ok(NetworkRun {
        record,
        params: Some(params),
        extensions,
        timings,
    })
}

/// Fills the measured fields of `record` for a trained network.
pub fn measure(cfg: &ExperimentConfig, data: &PoolData, params: &MlpParams, record: &mut RunRecord) -> Result<(Option<Extensions>, Timings)> {
    let mut timings = Timings::default();
    let t = Instant::now();
    record.train_accuracy = Some(params.accuracy(&data.train_xs, &data.train_ys)?);
    record.test_accuracy = Some(params.accuracy(&data.test_xs, &data.test_ys)?);
    let (l1, l2) = sharpness::weight_norms(params);
    record.weight_l1 = Some(l1);
    record.weight_l2 = Some(l2);
    timings.test_s = t.elapsed().as_secs_f64();

    if cfg.measures.hessian {
        let t = Instant::now();
        let seed = rng::substream(record.seed, Stream::Hessian);
        let h = sharpness::hessian_trace(params, &data.train_xs, &data.train_ys, cfg.hessian_probes, seed)?;
        record.hessian_trace = Some(h.value);
        timings.hessian_s = t.elapsed().as_secs_f64();
    }

    if cfg.measures.regions {
        let t = Instant::now();
        record.l1_count = Some(regions::pattern_count(params, &data.test_xs, Layer::One)?);
        record.l2_count = Some(regions::pattern_count(params, &data.test_xs, Layer::Two)?);
        let table = regions::region_table(params, &data.train_xs, &data.test_xs)?;
        record.k_free = Some(table.k_free());
        record.free_params = Some(regions::free_parameters(&table, params.dims.h2));
        timings.regions_s = t.elapsed().as_secs_f64();
    }

    let mut extensions = None;
    if cfg.measures.pair_proxy {
        let t = Instant::now();
        let fm = FeatureMatrix::from_network(params, &data.train_xs, &data.train_ys, &data.probe_xs)?;
        match cfg.margin.resolve(&fm) {
            Ok(margin) => {
                let own = [Witness::from_network(params)];
                let pp = fcv::pair_proxy(&fm, margin, &own)?;
                let mut stats = pp.stats;
                for &epsilon in &cfg.epsilon_sweep {
                    let m = ResolvedMargin { epsilon, ..margin };
                    let s = fcv::pair_proxy(&fm, m, &own)?;
                    stats.lps += s.stats.lps;
                    stats.cache_hits += s.stats.cache_hits;
                    stats.iterations += s.stats.iterations;
                    record.epsilon_sweep.push(SweepPoint {
                        epsilon,
                        pair_proxy: s.total,
                    });
                }
                record.pair_proxy = Some(pp.total);
                record.margin = Some(margin);
                record.lp = Some(stats);
                extensions = Some(pp.per_probe.into_iter().enumerate().collect());
            }
            Err(Error::DegeneratePolicy(msg)) => record.notes.push(format!("pair proxy skipped: {msg}")),
            Err(e) => return Err(e),
        }
        timings.pair_proxy_s = t.elapsed().as_secs_f64();
    }
    Ok((extensions, timings))
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn record(&self, i: usize) -> PathBuf {
        self.root.join("records").join(format!("net_{i:04}.json"))
    }

    pub fn params(&self, i: usize) -> PathBuf {
        self.root.join("params").join(format!("net_{i:04}.bin"))
    }

    pub fn extensions(&self, i: usize) -> PathBuf {
        self.root.join("extensions").join(format!("net_{i:04}.json"))
    }

    pub fn timings(&self, i: usize) -> PathBuf {
        self.root.join("timings").join(format!("net_{i:04}.json"))
    }

    pub fn records_csv(&self) -> PathBuf {
        self.root.join("records.csv")
    }

    fn create(&self) -> Result<()> {
        for sub in ["records", "params", "extensions", "timings"] {
            let p = self.root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s.into_bytes()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn persist(dir: &RunDir, run: &NetworkRun) -> Result<()> {
    let i = run.record.index;
    if let Some(p) = &run.params {
        let tmp = dir.params(i).with_extension("tmp");
        p.save(&tmp)?;
        fs::rename(&tmp, dir.params(i)).map_err(|e| Error::io(dir.params(i), e))?;
    }
    if let Some(ext) = &run.extensions {
        write_atomic(&dir.extensions(i), &to_json(ext))?;
    }
    write_atomic(&dir.timings(i), &to_json(&run.timings))?;
    // the record goes last: its presence marks the network as done
    write_atomic(&dir.record(i), &to_json(&run.record))
}

fn is_done(dir: &RunDir, cfg: &ExperimentConfig, i: usize) -> bool {
    match read_json::<RunRecord>(&dir.record(i)) {
        Ok(r) => !r.is_ok() || (dir.params(i).exists() && (!cfg.measures.pair_proxy || r.pair_proxy.is_none() || dir.extensions(i).exists())),
        Err(_) => false,
    }
}

/// Claims `dir` for `cfg`: writes the config, or checks that an existing
/// one describes the same experiment.
fn claim(dir: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    dir.create()?;
    let path = dir.config();
    if path.exists() {
        let old: ExperimentConfig = read_json(&path)?;
        if old.fingerprint() != cfg.fingerprint() {
            return Err(Error::Config(format!(
                "{} belongs to a different experiment; use a fresh output directory",
                dir.root.display()
            )));
        }
        return Ok(());
    }
    let mut stored = cfg.clone();
    stored.workers = 1;
    write_atomic(&path, &to_json(&stored))
}

/// Trains and measures every network of the pool, skipping those already
/// on disk, then fills in ensemble agreement and rewrites `records.csv`.
/// Diverged networks are recorded and the pool carries on.
pub fn run_pool(cfg: &ExperimentConfig, data_root: Option<&Path>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let data = PoolData::load(cfg, data_root)?;
    run_pool_with(cfg, &data)
}

pub fn run_pool_with(cfg: &ExperimentConfig, data: &PoolData) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.output_dir);
    claim(&dir, cfg)?;
    let pending: Vec<usize> = (0..cfg.n_networks).filter(|&i| !is_done(&dir, cfg, i)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        pending.par_iter().try_for_each(|&i| {
            let run = run_network(cfg, data, i)?;
            persist(&dir, &run)
        })
    })?;
    let mut records = load_records(&dir.root)?;
    if records.len() != cfg.n_networks {
        return Err(Error::Config(format!(
            "{} holds {} records for a pool of {}",
            dir.root.display(),
            records.len(),
            cfg.n_networks
        )));
    }
    if cfg.measures.ea {
        fill_agreement(&dir, data, &mut records)?;
    }
    write_records_csv(&records, &dir.records_csv())?;
    Ok(records)
}

/// EA of each network against every other non-diverged network of the
/// pool, on the test rows.
fn fill_agreement(dir: &RunDir, data: &PoolData, records: &mut [RunRecord]) -> Result<()> {
    let ok: Vec<usize> = (0..records.len()).filter(|&k| records[k].is_ok()).collect();
    let preds: Vec<Vec<usize>> = ok
        .par_iter()
        .map(|&k| MlpParams::load(&dir.params(records[k].index))?.predict_batch(&data.test_xs))
        .collect::<Result<_>>()?;
    for (slot, &k) in ok.iter().enumerate() {
        let peers: Vec<&[usize]> = preds
            .iter()
            .enumerate()
            .filter(|&(s, _)| s != slot)
            .map(|(_, p)| p.as_slice())
            .collect();
        let ea = if peers.is_empty() {
            None
        } else {
            match regions::agreement_from_predictions(&preds[slot], &peers, &data.test_ys)? {
                Agreement::Rate(r) => Some(r),
                Agreement::NoErrors => None,
            }
        };
        if records[k].ea != ea {
            records[k].ea = ea;
            write_atomic(&dir.record(records[k].index), &to_json(&records[k]))?;
        }
    }
    Ok(())
}

/// Every record under `<run>/records`, by index.
pub fn load_records(run: &Path) -> Result<Vec<RunRecord>> {
    let dir = run.join("records");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            paths.push(p);
        }
    }
    let mut records = paths.iter().map(|p| read_json::<RunRecord>(p)).collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.index);
    Ok(records)
}

pub fn load_extensions(run: &Path, index: usize) -> Result<Extensions> {
    read_json(&RunDir::new(run).extensions(index))
}

pub fn load_timings(run: &Path, index: usize) -> Result<Timings> {
    read_json(&RunDir::new(run).timings(index))
}

/// Columns that can be correlated with test accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    HessianTrace,
    WeightL1,
    WeightL2,
    L1Count,
    L2Count,
    KFree,
    FreeParams,
    PairProxy,
    Ea,
}

impl Measure {
    pub const ALL: [Measure; 9] = [
        Measure::HessianTrace,
        Measure::WeightL1,
        Measure::WeightL2,
        Measure::L1Count,
        Measure::L2Count,
        Measure::KFree,
        Measure::FreeParams,
        Measure::PairProxy,
        Measure::Ea,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::HessianTrace => "hessian_trace",
            Measure::WeightL1 => "weight_l1",
            Measure::WeightL2 => "weight_l2",
            Measure::L1Count => "l1_count",
            Measure::L2Count => "l2_count",
            Measure::KFree => "k_free",
            Measure::FreeParams => "free_params",
            Measure::PairProxy => "pair_proxy",
            Measure::Ea => "ea",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown measure {s:?}")))
    }

    /// Unchanged by function-preserving reparameterisation.
    pub fn invariant(self) -> bool {
        !matches!(self, Measure::HessianTrace | Measure::WeightL1 | Measure::WeightL2)
    }

    pub fn value(self, r: &RunRecord) -> Option<f64> {
        match self {
            Measure::HessianTrace => r.hessian_trace,
            Measure::WeightL1 => r.weight_l1,
            Measure::WeightL2 => r.weight_l2,
            Measure::L1Count => r.l1_count.map(|v| v as f64),
            Measure::L2Count => r.l2_count.map(|v| v as f64),
            Measure::KFree => r.k_free.map(|v| v as f64),
            Measure::FreeParams => r.free_params.map(|v| v as f64),
            Measure::PairProxy => r.pair_proxy.map(|v| v as f64),
            Measure::Ea => r.ea,
        }
    }
}

/// Settings shared by every correlation of a table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationSettings {
    pub method: PMethod,
    pub seed: u64,
    pub min_train_accuracy: Option<f64>,
}

impl Default for CorrelationSettings {
    fn default() -> Self {
        Self {
            method: PMethod::TApprox,
            seed: 0,
            min_train_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub measure: Measure,
    pub invariant: bool,
    /// Records that carried both the measure and a test accuracy.
    pub n: usize,
    /// `None` when undefined (constant column or too few records).
    pub result: Option<CorrelationResult>,
}

fn paired(records: &[RunRecord], measure: Measure, settings: &CorrelationSettings) -> (Vec<f64>, Vec<f64>) {
    records
        .iter()
        .filter(|r| r.is_ok())
        .filter(|r| match (settings.min_train_accuracy, r.train_accuracy) {
            (Some(min), Some(a)) => a >= min,
            (Some(_), None) => false,
            (None, _) => true,
        })
        .filter_map(|r| Some((measure.value(r)?, r.test_accuracy?)))
        .unzip()
}

/// Spearman correlation of `measure` with test accuracy.
pub fn correlate(records: &[RunRecord], measure: Measure, settings: &CorrelationSettings) -> Result<CorrelationRow> {
    if records.len() < MIN_RECORDS {
        return Err(Error::arg(format!("correlation needs at least {MIN_RECORDS} records, got {}", records.len())));
    }
    let (xs, ys) = paired(records, measure, settings);
    let result = if xs.len() < MIN_RECORDS {
        None
    } else {
        stats::spearman(&xs, &ys, settings.method, settings.seed)?
    };
    Ok(CorrelationRow {
        measure,
        invariant: measure.invariant(),
        n: xs.len(),
        result,
    })
}

/// One row per measure. With fewer than `MIN_RECORDS` records every row is
/// undefined.
pub fn correlation_table(records: &[RunRecord], settings: &CorrelationSettings) -> Result<Vec<CorrelationRow>> {
    Measure::ALL
        .iter()
        .map(|&m| {
            if records.len() < MIN_RECORDS {
                Ok(CorrelationRow {
                    measure: m,
                    invariant: m.invariant(),
                    n: paired(records, m, settings).0.len(),
                    result: None,
                })
            } else {
                correlate(records, m, settings)
            }
        })
        .collect()
}

pub const UNDEFINED: &str = "undefined";
pub const SKIPPED: &str = "skipped";

pub const CORRELATION_COLUMNS: [&str; 5] = ["measure", "rho", "p_value", "n", "invariant"];

pub fn write_correlations_csv(rows: &[CorrelationRow], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_correlations(rows, file).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

pub fn write_correlations<W: std::io::Write>(rows: &[CorrelationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CORRELATION_COLUMNS)?;
    for r in rows {
        let (rho, p) = match &r.result {
            Some(c) => (c.rho.to_string(), c.p_value.to_string()),
            None => (UNDEFINED.to_string(), UNDEFINED.to_string()),
        };
        w.write_record([
            r.measure.name().to_string(),
            rho,
            p,
            r.n.to_string(),
            if r.invariant { "yes" } else { "no" }.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))
}

pub const RECORD_COLUMNS: [&str; 16] = [
    "index",
    "seed",
    "status",
    "learning_rate",
    "epochs",
    "train_accuracy",
    "test_accuracy",
    "hessian_trace",
    "weight_l1",
    "weight_l2",
    "l1_count",
    "l2_count",
    "k_free",
    "free_params",
    "pair_proxy",
    "ea",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| SKIPPED.to_string(), |x| x.to_string())
}

pub fn write_records_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        let status = match r.status {
            RunStatus::Ok => "ok".to_string(),
            RunStatus::Diverged { epoch } => format!("diverged@{epoch}"),
        };
        w.write_record([
            r.index.to_string(),
            r.seed.to_string(),
            status,
            r.learning_rate.to_string(),
            r.epochs.to_string(),
            opt(r.train_accuracy),
            opt(r.test_accuracy),
            opt(r.hessian_trace),
            opt(r.weight_l1),
            opt(r.weight_l2),
            opt(r.l1_count),
            opt(r.l2_count),
            opt(r.k_free),
            opt(r.free_params),
            opt(r.pair_proxy),
            opt(r.ea),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Test accuracy by training regime at one data scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub n_train: usize,
    pub n_small: usize,
    pub n_large: usize,
    pub small_accuracy: f64,
    pub large_accuracy: f64,
    /// `100·(large − small)`.
    pub delta_pp: f64,
    pub welch_p: f64,
    pub small_hessian: Option<f64>,
    pub large_hessian: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn regime_values(records: &[RunRecord], min_train: Option<f64>, f: impl Fn(&RunRecord) -> Option<f64>) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.is_ok() && min_train.map_or(true, |m| r.train_accuracy.is_some_and(|a| a >= m)))
        .filter_map(f)
        .collect()
}

/// Compares two pools trained on the same data. Identical samples give
/// `Δ = 0` and `p = 1`.
pub fn cross_regime(n_train: usize, small: &[RunRecord], large: &[RunRecord], min_train: Option<f64>) -> Result<RegimeRow> {
    let acc_s = regime_values(small, min_train, |r| r.test_accuracy);
    let acc_l = regime_values(large, min_train, |r| r.test_accuracy);
    let welch_p = if acc_s == acc_l {
        1.0
    } else {
        stats::welch(&acc_l, &acc_s)?.p_value
    };
    let hess = |rs: &[RunRecord]| {
        let h = regime_values(rs, min_train, |r| r.hessian_trace);
        (!h.is_empty()).then(|| mean(&h))
    };
    let (small_accuracy, large_accuracy) = (mean(&acc_s), mean(&acc_l));
    Ok(RegimeRow {
        n_train,
        n_small: acc_s.len(),
        n_large: acc_l.len(),
        small_accuracy,
        large_accuracy,
        delta_pp: 100.0 * (large_accuracy - small_accuracy),
        welch_p,
        small_hessian: hess(small),
        large_hessian: hess(large),
    })
}

pub const REGIME_COLUMNS: [&str; 9] = [
    "n_train",
    "n_small",
    "n_large",
    "small_accuracy",
    "large_accuracy",
    "delta_pp",
    "welch_p",
    "small_hessian",
    "large_hessian",
];

pub fn write_regime_csv(rows: &[RegimeRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REGIME_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.n_train.to_string(),
            r.n_small.to_string(),
            r.n_large.to_string(),
            r.small_accuracy.to_string(),
            r.large_accuracy.to_string(),
            r.delta_pp.to_string(),
            r.welch_p.to_string(),
            opt(r.small_hessian),
            opt(r.large_hessian),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_records: usize,
    pub n_ok: usize,
    pub mean_test_accuracy: Option<f64>,
    pub correlations: Vec<CorrelationRow>,
}

/// Files written by [`report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub records: PathBuf,
    pub correlations: PathBuf,
    pub summary: PathBuf,
    pub scatter: Vec<PathBuf>,
}

/// Writes `records.csv`, `correlations.csv`, `summary.json` and
/// `scatter/<measure>.csv` (columns `x,y`: measure, test accuracy).
/// Nothing is written when `records` is empty.
pub fn report(records: &[RunRecord], out: &Path, settings: &CorrelationSettings) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::arg("no records to report"));
    }
    let correlations = correlation_table(records, settings)?;
    let accs: Vec<f64> = records.iter().filter(|r| r.is_ok()).filter_map(|r| r.test_accuracy).collect();
    let summary = Summary {
        n_records: records.len(),
        n_ok: records.iter().filter(|r| r.is_ok()).count(),
        mean_test_accuracy: (!accs.is_empty()).then(|| mean(&accs)),
        correlations: correlations.clone(),
    };
    let scatter_dir = out.join("scatter");
    fs::create_dir_all(&scatter_dir).map_err(|e| Error::io(&scatter_dir, e))?;
    let files = ReportFiles {
        records: out.join("records.csv"),
        correlations: out.join("correlations.csv"),
        summary: out.join("summary.json"),
        scatter: Measure::ALL.iter().map(|m| scatter_dir.join(format!("{}.csv", m.name()))).collect(),
    };
    write_records_csv(records, &files.records)?;
    write_correlations_csv(&correlations, &files.correlations)?;
    write_atomic(&files.summary, &to_json(&summary))?;
    for (m, path) in Measure::ALL.iter().zip(&files.scatter) {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y"])?;
        for r in records.iter().filter(|r| r.is_ok()) {
            if let (Some(x), Some(y)) = (m.value(r), r.test_accuracy) {
                w.write_record([x.to_string(), y.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}
