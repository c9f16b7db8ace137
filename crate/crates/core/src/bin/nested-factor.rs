use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nested_factor::data::{read_container, write_container, DomainDataset};
use nested_factor::experiment::{
    build_splits, projection_rows, run_experiment, run_train_config, score_model, train_model,
    training_view, write_stamped_csv, DatasetSpec, ExperimentConfig, LossRow, MetricsReport,
    ModelKind, Protocol, Splits,
};
use nested_factor::nested::{load_model, save_model};

const THREADS_ENV: &str = "NESTED_FACTOR_THREADS";

#[derive(Parser)]
#[command(
    name = "nested-factor",
    version,
    about = "Train and evaluate nested VAEs on paired multi-domain data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the train/test dataset containers described by the config.
    BuildData(Common),
    /// Train one model and write its checkpoint and loss curve.
    Train(TrainArgs),
    /// Score a checkpoint, or train and score every requested run.
    Evaluate(EvalArgs),
    /// `evaluate` with the change-detection protocol.
    ChangeDetect(EvalArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the seed list (or the dataset seed for build-data).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "K", allow_hyphen_values = true)]
    holdout_domain: Option<i32>,
    #[arg(long, default_value = "nested")]
    model: ModelKind,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "K", allow_hyphen_values = true)]
    holdout_domain: Option<i32>,
    /// Run every domain as the held-out fold.
    #[arg(long, conflicts_with_all = ["holdout_domain", "checkpoint"])]
    sweep_domains: bool,
    /// Restrict training to one model; both are trained by default.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Score this checkpoint instead of training.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn override_seeds(cfg: &mut ExperimentConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn split_paths(cfg: &ExperimentConfig) -> (PathBuf, PathBuf) {
    let d = cfg.data_dir();
    (d.join("train.nfds"), d.join("test.nfds"))
}

fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let (train, test) = split_paths(cfg);
    let read = |p: &Path| -> Result<DomainDataset> {
        if !p.exists() {
            bail!(
                "{}: dataset container not found (run build-data first)",
                p.display()
            );
        }
        Ok(read_container(p)?)
    };
    Ok(Splits {
        train: read(&train)?,
        test: read(&test)?,
    })
}

fn print_counts(name: &str, ds: &DomainDataset) {
    let mut table: BTreeMap<(i32, i32), usize> = BTreeMap::new();
    for (&c, &d) in ds.class_labels.iter().zip(&ds.domain_labels) {
        *table.entry((d, c)).or_default() += 1;
    }
    let classes = ds.classes();
    println!(
        "{name}: {} items, {} classes, {} domains",
        ds.len(),
        classes.len(),
        ds.domains().len()
    );
    print!("{:>8}", "domain");
    for c in &classes {
        print!(" {c:>5}");
    }
    println!();
    for d in ds.domains() {
        print!("{d:>8}");
        for c in &classes {
            print!(" {:>5}", table.get(&(d, *c)).copied().unwrap_or(0));
        }
        println!();
    }
}

fn build_data(args: &Common) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = args.seed {
        match &mut cfg.dataset {
            DatasetSpec::RotatedMnist { seed, .. } | DatasetSpec::Canm { seed, .. } => *seed = s,
        }
    }
    let splits = build_splits(&cfg.dataset)?;
    let stamp = json!({ "dataset": cfg.dataset });
    let (train_path, test_path) = split_paths(&cfg);
    create_dir(&cfg.data_dir())?;
    for (path, ds, split) in [
        (&train_path, &splits.train, "train"),
        (&test_path, &splits.test, "test"),
    ] {
        let mut ds = ds.clone();
        ds.meta = json!({ "split": split, "source": stamp });
        write_container(path, &ds)?;
        print_counts(&path.display().to_string(), &ds);
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    override_seeds(&mut cfg, args.common.seed);
    let seed = cfg.seeds[0];
    let holdout = match cfg.protocol {
        Protocol::LeaveOneDomainOut => Some(args.holdout_domain.unwrap_or(cfg.holdout_domain)),
        _ => None,
    };
    let splits = load_splits(&cfg)?;
    let (data, kept) = training_view(&cfg, &splits, holdout)?;
    let train_cfg = run_train_config(&cfg, seed, holdout);
    let (model, log) = train_model(args.model, &cfg.model, &train_cfg, &data)?;

    let out = &cfg.out_dir;
    create_dir(out)?;
    let stamp =
        json!({ "config": cfg.to_json(), "seed": seed, "holdout": holdout, "train": train_cfg });
    let ck = out.join("checkpoint.nfck");
    save_model(&ck, &model, stamp.clone())?;
    write_stamped_csv(
        &out.join("losses.csv"),
        &stamp,
        &LossRow::from_log(args.model.name(), holdout, seed, &log),
    )?;
    if train_cfg.record_batches {
        let path = out.join("batches.jsonl");
        let file =
            std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "{}", json!({ "stamp": stamp }))?;
        for b in &log.batches {
            let map = |ix: &[usize]| ix.iter().map(|&i| kept[i]).collect::<Vec<_>>();
            writeln!(
                w,
                "{}",
                json!({ "epoch": b.epoch, "batch": b.batch, "index_i": map(&b.index_i), "index_j": map(&b.index_j) })
            )?;
        }
        w.flush()?;
    }
    if let Some(last) = log.epochs.last() {
        let total = last.get("total").unwrap_or(f64::NAN);
        println!(
            "trained {} for {} epochs; final total loss {total:.6}",
            args.model.name(),
            log.epochs.len()
        );
    }
    println!("wrote {}", ck.display());
    Ok(())
}

fn evaluate(args: &EvalArgs, forced: Option<Protocol>) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = forced {
        cfg.protocol = p;
    }
    override_seeds(&mut cfg, args.common.seed);
    let splits = load_splits(&cfg)?;
    let out = cfg.out_dir.clone();
    create_dir(&out)?;

    let (report, projection) = if let Some(ck) = &args.checkpoint {
        let (model, run) = load_model(ck)?;
        if args.model.is_some_and(|m| m.name() != model.kind()) {
            bail!(
                "{}: checkpoint holds a {} model",
                ck.display(),
                model.kind()
            );
        }
        let seed = args
            .common
            .seed
            .or_else(|| run["seed"].as_u64())
            .unwrap_or(cfg.seeds[0]);
        cfg.seeds = vec![seed];
        let holdout = match cfg.protocol {
            Protocol::LeaveOneDomainOut => Some(
                args.holdout_domain
                    .or_else(|| run["holdout"].as_i64().map(|h| h as i32))
                    .unwrap_or(cfg.holdout_domain),
            ),
            _ => None,
        };
        let rows = score_model(&cfg, &splits, &model, holdout, seed)?;
        (
            MetricsReport::build(&cfg, rows)?,
            projection_rows(&model, &splits.test)?,
        )
    } else {
        let holdouts = if args.sweep_domains {
            splits.train.domains()
        } else {
            vec![args.holdout_domain.unwrap_or(cfg.holdout_domain)]
        };
        let kinds = match args.model {
            Some(m) => vec![m],
            None => vec![ModelKind::Nested, ModelKind::BetaVae],
        };
        let result = run_experiment(&cfg, &splits, &holdouts, &kinds)?;
        let stamp = json!({ "config": cfg.to_json(), "seeds": cfg.seeds });
        write_stamped_csv(&out.join("losses.csv"), &stamp, &result.losses)?;
        (result.report, result.projection)
    };

    report.write_json(&out.join("metrics.json"))?;
    report.write_csv(&out.join("metrics.csv"))?;
    let stamp = json!({ "config": report.config, "seeds": report.seeds });
    write_stamped_csv(&out.join("projection.csv"), &stamp, &projection)?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    for s in report.summary.iter().filter(|s| s.domain.is_none()) {
        let fold = s.holdout.map_or(String::new(), |h| format!(" holdout {h}"));
        println!(
            "{:<9}{fold:<11} {:<18} {:.4} ± {:.4} (n={})",
            s.model, s.metric, s.mean, s.std_err, s.n
        );
    }
    for p in &report.parity {
        let fold = p
            .holdout
            .map_or("all folds".to_string(), |h| format!("holdout {h}"));
        println!(
            "{:<9}{fold:<11} adjusted parity ({}) {:.4}",
            p.model, p.scope, p.value
        );
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::BuildData(a) => build_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a, None),
        Command::ChangeDetect(a) => evaluate(a, Some(Protocol::ChangeDetection)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
