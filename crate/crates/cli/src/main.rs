use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use weaknesslab::data::ProbeSource;
use weaknesslab::fcv::{self, FeatureMatrix, MarginPolicy, ResolvedMargin, Witness};
use weaknesslab::harness::{self, BatchSize, CorrelationSettings, ExperimentConfig, Measure, PoolData, RunRecord};
use weaknesslab::mlp::MlpParams;
use weaknesslab::reparam::{self, ReparamSpec, ReportInputs};
use weaknesslab::rng::{self, Stream};
use weaknesslab::stats::PMethod;
use weaknesslab::{Error, Result};

#[derive(Parser)]
#[command(name = "weaknesslab", version, about = "Train MLP pools and compare weakness with sharpness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and measure a pool of networks (resumes an existing run directory).
    TrainPool(PoolArgs),
    /// Measure one saved network and print its record as JSON.
    Measure {
        #[command(flatten)]
        pool: PoolArgs,
        /// Parameters written by train-pool.
        #[arg(long)]
        params: PathBuf,
    },
    /// Per-probe extension sets of one saved network, as JSON.
    Pairproxy {
        #[command(flatten)]
        pool: PoolArgs,
        #[arg(long)]
        params: PathBuf,
        /// Also report totals at these margins (comma-separated).
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
    /// Hessian, accuracy and pattern counts under layer rescalings.
    ReparamTest {
        #[command(flatten)]
        pool: PoolArgs,
        /// Saved network; without it network 0 of the config is trained.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
        gammas: Vec<f64>,
        /// Output CSV.
        #[arg(long, default_value = "reparam.csv")]
        out: PathBuf,
    },
    /// Small-batch vs full-batch pools at several training-set sizes.
    CrossRegime {
        #[arg(long, value_delimiter = ',', default_value = "500,2000")]
        n_train: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        n_networks: usize,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        min_train_accuracy: Option<f64>,
        /// Run directories go under here, plus cross_regime.csv.
        #[arg(long, default_value = "runs/cross-regime")]
        output: PathBuf,
    },
    /// Spearman correlation of measures with test accuracy.
    Correlate {
        #[command(flatten)]
        corr: CorrArgs,
        /// Only this measure (default: all).
        #[arg(long)]
        measure: Option<String>,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write CSV tables, a JSON summary and scatter data for a run.
    Report {
        #[command(flatten)]
        corr: CorrArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PChoice {
    T,
    Permutation,
}

#[derive(Args)]
struct CorrArgs {
    /// Run directory written by train-pool.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "t")]
    p_method: PChoice,
    /// Permutation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leave out networks below this train accuracy.
    #[arg(long)]
    min_train_accuracy: Option<f64>,
}

impl CorrArgs {
    fn settings(&self) -> CorrelationSettings {
        CorrelationSettings {
            method: match self.p_method {
                PChoice::T => PMethod::TApprox,
                PChoice::Permutation => PMethod::Permutation,
            },
            seed: self.seed,
            min_train_accuracy: self.min_train_accuracy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeChoice {
    TrainLeftover,
    TestSet,
}

/// Experiment settings. Flags override `--config`, which overrides the
/// 784→64→8→10 pool defaults.
#[derive(Args)]
struct PoolArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding `<dataset>/` IDX files (default: $WEAKNESSLAB_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Hidden widths as `h1,h2`.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_probe: Option<usize>,
    #[arg(long)]
    n_networks: Option<usize>,
    /// A number or `full`.
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    target_train_accuracy: Option<f64>,
    /// A fixed margin or `adaptive`.
    #[arg(long)]
    margin: Option<String>,
    #[arg(long, value_delimiter = ',')]
    epsilon_sweep: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    probe_source: Option<ProbeChoice>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    hessian_probes: Option<usize>,
    #[arg(long)]
    no_hessian: bool,
    #[arg(long)]
    no_regions: bool,
    #[arg(long)]
    no_pair_proxy: bool,
    #[arg(long)]
    no_ea: bool,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    min_train_accuracy: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Run directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl PoolArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::pair_proxy_pool(self.dataset.as_deref().unwrap_or("mnist"), "runs/pool"),
        };
        if let Some(v) = &self.dataset {
            c.dataset = v.clone();
        }
        if let Some(v) = &self.widths {
            let [h1, h2] = v[..] else {
                return Err(Error::Config(format!("--widths takes two values, got {}", v.len())));
            };
            c.widths = [h1, h2];
        }
        set(&mut c.n_train, self.n_train);
        set(&mut c.n_probe, self.n_probe);
        set(&mut c.n_networks, self.n_networks);
        if let Some(b) = &self.batch_size {
            c.batch_size = match b.as_str() {
                "full" => BatchSize::Full,
                n => BatchSize::Fixed(n.parse().map_err(|_| Error::Config(format!("batch size {n:?} is neither a number nor \"full\"")))?),
            };
        }
        set(&mut c.lr_range[0], self.lr_min);
        set(&mut c.lr_range[1], self.lr_max);
        set(&mut c.max_epochs, self.max_epochs);
        set(&mut c.target_train_accuracy, self.target_train_accuracy);
        if let Some(m) = &self.margin {
            c.margin = match m.as_str() {
                "adaptive" => MarginPolicy::Adaptive,
                e => MarginPolicy::Fixed {
                    epsilon: e.parse().map_err(|_| Error::Config(format!("margin {e:?} is neither a number nor \"adaptive\"")))?,
                },
            };
        }
        if let Some(v) = &self.epsilon_sweep {
            c.epsilon_sweep = v.clone();
        }
        if let Some(p) = self.probe_source {
            c.probe_source = match p {
                ProbeChoice::TrainLeftover => ProbeSource::TrainLeftover,
                ProbeChoice::TestSet => ProbeSource::TestSet,
            };
        }
        set(&mut c.master_seed, self.master_seed);
        set(&mut c.data_seed, self.data_seed);
        set(&mut c.hessian_probes, self.hessian_probes);
        c.measures.hessian &= !self.no_hessian;
        c.measures.regions &= !self.no_regions;
        c.measures.pair_proxy &= !self.no_pair_proxy;
        c.measures.ea &= !self.no_ea;
        if self.test_limit.is_some() {
            c.test_limit = self.test_limit;
        }
        if self.min_train_accuracy.is_some() {
            c.min_train_accuracy = self.min_train_accuracy;
        }
        set(&mut c.workers, self.workers);
        if let Some(o) = &self.output {
            c.output_dir = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("serialisable"));
}

fn summarise(records: &[RunRecord]) {
    let ok = records.iter().filter(|r| r.is_ok()).count();
    let perfect = records.iter().filter(|r| r.train_accuracy == Some(1.0)).count();
    println!("{} networks, {ok} trained, {perfect} at train accuracy 1.0", records.len());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainPool(args) => {
            let cfg = args.config()?;
            let records = harness::run_pool(&cfg, args.data_dir.as_deref())?;
            summarise(&records);
            println!("records in {}", cfg.output_dir.display());
        }
        Command::Measure { pool, params } => {
            let cfg = pool.config()?;
            let data = PoolData::load(&cfg, pool.data_dir.as_deref())?;
            let p = MlpParams::load(&params)?;
            let mut record = RunRecord::new(0, cfg.network_seed(0), 0.0, 0);
            harness::measure(&cfg, &data, &p, &mut record)?;
            print_json(serde_json::to_value(&record).expect("serialisable"));
        }
        Command::Pairproxy { pool, params, sweep } => {
            let cfg = pool.config()?;
            let data = PoolData::load(&cfg, pool.data_dir.as_deref())?;
            let p = MlpParams::load(&params)?;
            let fm = FeatureMatrix::from_network(&p, &data.train_xs, &data.train_ys, &data.probe_xs)?;
            let margin = cfg.margin.resolve(&fm)?;
            let own = [Witness::from_network(&p)];
            let pp = fcv::pair_proxy(&fm, margin, &own)?;
            let sweep: Vec<serde_json::Value> = sweep
                .iter()
                .map(|&epsilon| {
                    let s = fcv::pair_proxy(&fm, ResolvedMargin { epsilon, ..margin }, &own)?;
                    Ok(serde_json::json!({"epsilon": epsilon, "pair_proxy": s.total}))
                })
                .collect::<Result<_>>()?;
            print_json(serde_json::json!({
                "pair_proxy": pp.total,
                "margin": pp.margin,
                "per_probe": pp.per_probe,
                "lp": pp.stats,
                "sweep": sweep,
            }));
        }
        Command::ReparamTest {
            pool,
            params,
            betas,
            gammas,
            out,
        } => {
            let cfg = pool.config()?;
            let data = PoolData::load(&cfg, pool.data_dir.as_deref())?;
            let p = match params {
                Some(path) => MlpParams::load(&path)?,
                None => {
                    let tc = harness::train_config(&cfg, 0);
                    weaknesslab::mlp::train_xy(&tc, &data.train_xs, &data.train_ys, data.input, weaknesslab::mlp::N_CLASSES)?.0
                }
            };
            let specs: Vec<ReparamSpec> = betas
                .iter()
                .map(|&b| ReparamSpec::beta(b))
                .chain(gammas.iter().map(|&g| ReparamSpec::gamma(g)))
                .collect();
            let inputs = ReportInputs {
                train_xs: &data.train_xs,
                train_ys: &data.train_ys,
                test_xs: &data.test_xs,
                test_ys: &data.test_ys,
                unseen_xs: &data.test_xs,
                unseen_ys: &data.test_ys,
                peers: &[],
                n_probes: cfg.hessian_probes,
                probe_seed: rng::substream(cfg.network_seed(0), Stream::Hessian),
            };
            let rows = reparam::invariance_report(&p, &specs, &inputs)?;
            reparam::write_report_csv(&rows, &out)?;
            for r in &rows {
                println!("{}={:<5} hessian={:.4e} test_acc={:.4} l1={} l2={}", r.reparam, r.value, r.hessian, r.test_acc, r.l1, r.l2);
            }
        }
        Command::CrossRegime {
            n_train,
            n_networks,
            dataset,
            data_dir,
            workers,
            min_train_accuracy,
            output,
        } => {
            let mut rows = Vec::new();
            for &n in &n_train {
                let pool = |large: bool| -> Result<Vec<RunRecord>> {
                    let sub = output.join(format!("n{n}")).join(if large { "large" } else { "small" });
                    let mut cfg = ExperimentConfig::regime_pool(n, large, n_networks, sub);
                    cfg.dataset = dataset.clone();
                    cfg.workers = workers;
                    harness::run_pool(&cfg, data_dir.as_deref())
                };
                let small = pool(false)?;
                let large = pool(true)?;
                let row = harness::cross_regime(n, &small, &large, min_train_accuracy)?;
                println!(
                    "n={n}: small {:.4} large {:.4} delta {:+.2} pp (p={:.3})",
                    row.small_accuracy, row.large_accuracy, row.delta_pp, row.welch_p
                );
                rows.push(row);
            }
            let path = output.join("cross_regime.csv");
            harness::write_regime_csv(&rows, &path)?;
            println!("table in {}", path.display());
        }
        Command::Correlate { corr, measure, out } => {
            let records = harness::load_records(&corr.run)?;
            let settings = corr.settings();
            let rows = match measure {
                Some(m) => vec![harness::correlate(&records, Measure::parse(&m)?, &settings)?],
                None => {
                    if records.len() < harness::MIN_RECORDS {
                        return Err(Error::Argument(format!(
                            "correlation needs at least {} records, got {}",
                            harness::MIN_RECORDS,
                            records.len()
                        )));
                    }
                    harness::correlation_table(&records, &settings)?
                }
            };
            match out {
                Some(path) => harness::write_correlations_csv(&rows, &path)?,
                None => harness::write_correlations(&rows, std::io::stdout().lock())?,
            }
        }
        Command::Report { corr, out } => {
            let records = load_or_empty(&corr.run)?;
            let files = harness::report(&records, &out, &corr.settings())?;
            println!("wrote {}, {}, {}", files.records.display(), files.correlations.display(), files.summary.display());
        }
    }
    Ok(())
}

fn load_or_empty(run: &Path) -> Result<Vec<RunRecord>> {
    if run.join("records").is_dir() {
        harness::load_records(run)
    } else {
        Err(Error::Argument(format!("{} has no records", run.display())))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
