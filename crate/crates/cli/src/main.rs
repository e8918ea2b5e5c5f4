mod lock;

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use padme::checkpoint::Checkpoint;
use padme::config::{default_space, load_space, RunConfig, Strategy};
use padme::hyperopt::trial_log_csv;
use padme::io::{self, CvReport};
use padme::metrics::EvalReport;
use padme::model::Variant;
use padme::pipeline::{self, SplitOutcome};
use padme::splits::Scheme;
use padme::trainer::{self, Featurized};

use lock::RunLock;

/// Thread-count variable; the only setting read from the environment.
const THREADS_VAR: &str = "PADME_THREADS";

type Result<T = ()> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(name = "padme", version, about = "Drug-target interaction regression pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding the interaction and sequence files.
    #[arg(long, global = true, visible_alias = "data", default_value = ".")]
    data_dir: PathBuf,
    /// Run directory for outputs; owned by one process at a time.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// warm, cold-drug, cold-target, cold-cluster or random.
    #[arg(long, global = true)]
    scheme: Option<Scheme>,
    /// Number of folds.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Cross-validation repetitions.
    #[arg(long, global = true)]
    repetitions: Option<usize>,
    /// padme-ecfp, padme-graphconv, compound-only-ecfp or compound-only-graphconv.
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write compound features and protein descriptors for the dataset.
    Featurize {
        /// Circular fingerprints as hex CSV.
        #[arg(long, conflicts_with = "graph")]
        ecfp: bool,
        /// Per-molecule graph features in the binary graph format.
        #[arg(long)]
        graph: bool,
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long)]
        bits: Option<usize>,
    },
    /// Assign pairs to folds and write the fold-index CSV.
    Split {
        /// Defaults to <out-dir>/folds.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Hyperparameter search on the tuning holdout.
    Tune {
        /// Search space (TOML `[[dimension]]` tables); a default space when absent.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Train one model and write its checkpoint.
    Train {
        /// Checkpoint path; defaults to <out-dir>/model.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated k-fold cross-validation with per-fold checkpoints.
    Cv {
        /// Fold-index CSVs from `split`, one per repetition; splits are
        /// generated when absent.
        #[arg(long, num_args = 1..)]
        folds: Vec<PathBuf>,
    },
    /// Predict every task for the (smiles, protein_id) pairs of a CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to <out-dir>/predictions.csv.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Training interactions CSV; adds an `in_ad` column.
        #[arg(long)]
        ad_from: Option<PathBuf>,
    },
    /// Score a checkpoint on the dataset, or summarize a cross-validation report.
    Evaluate {
        #[arg(long, required_unless_present = "cv_report", conflicts_with = "cv_report")]
        model: Option<PathBuf>,
        /// A report written by `cv`.
        #[arg(long)]
        cv_report: Option<PathBuf>,
        /// Defaults to <out-dir>/report.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every stage on a dataset and check that all outputs parse back.
    Smoke,
    /// Write a small synthetic dataset, config and search space.
    Fixtures {
        #[arg(long, default_value_t = 600)]
        n_pairs: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StrategyArg {
    Random,
    Gp,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Gp => Strategy::Gp,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{THREADS_VAR} must be a positive integer, got '{v}'").into()),
        },
    }
}

/// Config from `--config`, else `fallback` (a checkpoint's snapshot), else
/// defaults; then the command-line overrides.
fn config(g: &Global, fallback: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&g.config, fallback) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(text)) => RunConfig::from_toml(text)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(s) = g.scheme {
        cfg.split.scheme = s;
    }
    if let Some(k) = g.k {
        cfg.split.k = k;
    }
    if let Some(r) = g.repetitions {
        cfg.split.repetitions = r;
    }
    if let Some(v) = g.variant {
        cfg.model.variant = v;
    }
    Ok(cfg)
}

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result {
    let n = threads()?;
    if n > 1 {
        log::info!("{THREADS_VAR}={n}; training runs on a single thread");
    }
    let g = &cli.global;
    match cli.command {
        Command::Featurize {
            ecfp,
            graph,
            radius,
            bits,
        } => {
            let mut cfg = config(g, None)?;
            let compound_only = !cfg.model.variant.uses_protein();
            if graph {
                cfg.model.variant = if compound_only {
                    Variant::CompoundOnlyGraphconv
                } else {
                    Variant::PadmeGraphconv
                };
            } else if ecfp {
                cfg.model.variant = if compound_only {
                    Variant::CompoundOnlyEcfp
                } else {
                    Variant::PadmeEcfp
                };
            }
            if let Some(r) = radius {
                cfg.model.ecfp_radius = r;
            }
            if let Some(b) = bits {
                cfg.model.ecfp_bits = b;
            }
            cfg.model.validate()?;
            let _lock = RunLock::acquire(&g.out_dir)?;
            let ds = pipeline::load_dataset(&cfg, &g.data_dir)?;
            for p in pipeline::featurize(&ds, &cfg.model, &g.out_dir)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Split { output } => {
            let cfg = config(g, None)?;
            let _lock = RunLock::acquire(&g.out_dir)?;
            let ds = pipeline::load_dataset(&cfg, &g.data_dir)?;
            let pairs = ds.pairs();
            let s = &cfg.split;
            let split = pipeline::make_split(&pairs, s.scheme, s.k, s.seed, s.cluster_threshold)?;
            let path = output.unwrap_or_else(|| g.out_dir.join("folds.csv"));
            io::write_folds(pipeline::create(&path)?, &split.fold_file(&pairs))?;
            let audit = split.audit();
            println!(
                "{} split of {} pairs into {} folds (seed {})",
                s.scheme,
                pairs.len(),
                s.k,
                s.seed
            );
            println!("fold sizes: {:?}", split.assignment.fold_sizes());
            if let Some(c) = &split.clustering {
                println!("{} compounds in {} clusters", c.ids.len(), c.n_clusters);
            }
            println!("audit: {audit}");
            println!("wrote {}", path.display());
            if audit != "pass" {
                return Err(format!("split audit failed: {audit}").into());
            }
        }
        Command::Tune {
            space,
            budget,
            strategy,
        } => {
            let mut cfg = config(g, None)?;
            if let Some(b) = budget {
                cfg.tune.budget = b;
            }
            if let Some(s) = strategy {
                cfg.tune.strategy = s.into();
            }
            let space = match &space {
                Some(p) => load_space(p)?,
                None => default_space(),
            };
            let _lock = RunLock::acquire(&g.out_dir)?;
            let ds = pipeline::load_dataset(&cfg, &g.data_dir)?;
            let result = pipeline::tune(&cfg, &ds, &space)?;
            let trials = g.out_dir.join("trials.csv");
            pipeline::write_bytes(&trials, trial_log_csv(&space, &result).as_bytes())?;
            let best = result.best().ok_or("no trial completed")?;
            let best_cfg = cfg.with_point(&space, &best.point)?;
            let best_path = g.out_dir.join("best.toml");
            pipeline::write_bytes(&best_path, best_cfg.to_toml().as_bytes())?;
            let failed = result.trials.iter().filter(|t| t.objective.is_none()).count();
            println!("{} trials ({failed} failed)", result.trials.len());
            println!("best objective {}", opt(best.objective));
            for (d, v) in space.dimensions.iter().zip(&best.point) {
                println!("  {} = {v}", d.name);
            }
            println!("wrote {} and {}", trials.display(), best_path.display());
        }
        Command::Train { out } => {
            let cfg = config(g, None)?;
            let path = out.unwrap_or_else(|| g.out_dir.join("model.ckpt"));
            let dir = parent_of(&path);
            let _lock = RunLock::acquire(&dir)?;
            let ds = pipeline::load_dataset(&cfg, &g.data_dir)?;
            let (outcome, report) = pipeline::train_final(&cfg, &ds)?;
            let ck = Checkpoint {
                model: outcome.model,
                adam: Some(outcome.adam),
                run_config: cfg.to_toml(),
            };
            ck.save(&path)?;
            let history = dir.join("history.csv");
            pipeline::write_bytes(&history, trainer::history_csv(&outcome.history).as_bytes())?;
            let report_path = dir.join("validation.csv");
            io::write_report(pipeline::create(&report_path)?, &report, &cfg.to_toml())?;
            println!(
                "trained {} epochs, best epoch {} (score {:.4})",
                outcome.history.last().map_or(0, |r| r.epoch),
                outcome.best_epoch,
                outcome.best_score
            );
            print_report("validation", &report);
            println!(
                "wrote {}, {} and {}",
                path.display(),
                history.display(),
                report_path.display()
            );
        }
        Command::Cv { folds } => {
            let cfg = config(g, None)?;
            let _lock = RunLock::acquire(&g.out_dir)?;
            let ds = pipeline::load_dataset(&cfg, &g.data_dir)?;
            let pairs = ds.pairs();
            let given = if folds.is_empty() {
                None
            } else {
                let mut v = Vec::new();
                for p in &folds {
                    let file = io::read_folds(pipeline::open(p)?)?;
                    v.push(SplitOutcome::from_fold_file(&pairs, file, cfg.split.cluster_threshold)?);
                }
                Some(v)
            };
            let ckpt_dir = g.out_dir.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| format!("{}: {e}", ckpt_dir.display()))?;
            let report_path = g.out_dir.join("cv.csv");
            let snapshot = cfg.to_toml();
            let out = pipeline::cv_observed(&cfg, &ds, given, |row, model, rows| {
                let ck = Checkpoint {
                    model: model.clone(),
                    adam: None,
                    run_config: snapshot.clone(),
                };
                ck.save(&ckpt_dir.join(format!("rep{}-fold{}.ckpt", row.rep, row.fold)))?;
                // completed folds survive an interrupted run
                let partial = CvReport::new(snapshot.clone(), rows.to_vec());
                io::write_cv_report(pipeline::create(&report_path)?, &partial)?;
                println!(
                    "rep {} fold {}: rmse {} r2 {} ci {} audit {}",
                    row.rep,
                    row.fold,
                    opt(row.rmse),
                    opt(row.r2),
                    opt(row.ci),
                    row.audit
                );
                Ok(())
            })?;
            for (i, s) in out.splits.iter().enumerate() {
                let path = g.out_dir.join(format!("folds-{i}.csv"));
                io::write_folds(pipeline::create(&path)?, &s.fold_file(&pairs))?;
            }
            io::write_cv_report(pipeline::create(&report_path)?, &out.report)?;
            print_cv(&out.report);
            println!("wrote {} and {}", report_path.display(), ckpt_dir.display());
            if !out.report.audits_pass() {
                return Err("split audit failed".into());
            }
        }
        Command::Predict {
            model,
            input,
            output,
            ad_from,
        } => {
            let ck = Checkpoint::load(&model)?;
            let cfg = config(g, Some(&ck.run_config))?;
            let path = output.unwrap_or_else(|| g.out_dir.join("predictions.csv"));
            let _lock = RunLock::acquire(&parent_of(&path))?;
            let proteins = padme::dataset::read_sequences(pipeline::open(&g.data_dir.join(&cfg.data.sequences))?)?;
            let query = pipeline::read_query_pairs(&input)?;
            let ad = match &ad_from {
                Some(p) => Some(pipeline::fit_ad(&pipeline::load_interactions(&cfg, &g.data_dir, p)?)),
                None => None,
            };
            let rows = pipeline::predict_rows(&ck.model, &query, &proteins, ad.as_deref())?;
            io::write_predictions(pipeline::create(&path)?, &rows)?;
            print!("{} predictions for {} pairs", rows.len(), query.len());
            if ad.is_some() {
                let inside = rows.iter().filter(|r| r.in_ad == Some(true)).count();
                print!(", {inside} inside the applicability domain");
            }
            println!();
            println!("wrote {}", path.display());
        }
        Command::Evaluate {
            model,
            cv_report,
            output,
        } => {
            if let Some(p) = cv_report {
                let report = io::read_cv_report(pipeline::open(&p)?)?;
                print_cv(&report);
                return Ok(());
            }
            let ck = Checkpoint::load(&model.expect("required by clap"))?;
            let cfg = config(g, Some(&ck.run_config))?;
            let path = output.unwrap_or_else(|| g.out_dir.join("report.csv"));
            let _lock = RunLock::acquire(&parent_of(&path))?;
            let ds = pipeline::load_dataset(&cfg, &g.data_dir)?;
            let pairs = ds.pairs();
            let data = Featurized::build(&pairs, &ds.proteins, ck.model.config())?;
            let idx: Vec<usize> = (0..pairs.len()).collect();
            let report = trainer::evaluate(&ck.model, &data, &idx)?;
            io::write_report(pipeline::create(&path)?, &report, &cfg.to_toml())?;
            print_report("evaluation", &report);
            println!("wrote {}", path.display());
        }
        Command::Smoke => {
            let cfg = config(g, None)?;
            let _lock = RunLock::acquire(&g.out_dir)?;
            let report = pipeline::smoke(&cfg, &g.data_dir, &g.out_dir);
            for s in &report.steps {
                println!(
                    "{:<16} {} {:>8.2}s  {}",
                    s.name,
                    if s.ok { "ok  " } else { "FAIL" },
                    s.elapsed.as_secs_f64(),
                    s.detail
                );
            }
            if !report.ok() {
                return Err("smoke run failed".into());
            }
            println!("smoke run passed");
        }
        Command::Fixtures { n_pairs } => {
            let _lock = RunLock::acquire(&g.out_dir)?;
            pipeline::write_fixtures(&g.out_dir, n_pairs, g.seed.unwrap_or(0))?;
            println!("wrote {n_pairs} pairs and configs to {}", g.out_dir.display());
        }
    }
    Ok(())
}

fn print_report(title: &str, r: &EvalReport) {
    println!("{title}:");
    println!("  {:>6} {:>8} {:>8} {:>8} {:>8}", "task", "records", "rmse", "r2", "ci");
    for t in &r.tasks {
        println!(
            "  {:>6} {:>8} {:>8} {:>8} {:>8}",
            t.task,
            t.n_records,
            opt(t.rmse),
            opt(t.r2),
            opt(t.ci)
        );
    }
    println!(
        "  {:>6} {:>8} {:>8} {:>8} {:>8}",
        "all",
        r.tasks.iter().map(|t| t.n_records).sum::<usize>(),
        opt(r.rmse.value),
        opt(r.r2.value),
        opt(r.ci.value)
    );
}

fn print_cv(r: &CvReport) {
    println!(
        "  {:>4} {:>4} {:>8} {:>8} {:>8} {:>8}  audit",
        "rep", "fold", "rmse", "r2", "ci", "score"
    );
    for f in &r.folds {
        println!(
            "  {:>4} {:>4} {:>8} {:>8} {:>8} {:>8}  {}",
            f.rep,
            f.fold,
            opt(f.rmse),
            opt(f.r2),
            opt(f.ci),
            opt(f.composite),
            f.audit
        );
    }
    for s in &r.summary {
        println!(
            "  {:>9} {:>8} {:>8} {:>8} {:>8}  {}",
            s.stat,
            opt(s.rmse),
            opt(s.r2),
            opt(s.ci),
            opt(s.composite),
            s.audit
        );
    }
}
