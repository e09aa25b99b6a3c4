use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use owstream::checkpoint::{save_storage, Checkpoint};
use owstream::config::{sub_seed, RunConfig};
use owstream::data::{
    read_cifar, read_idx, simulate_stream, split_s1_s2, to_grayscale, Dataset, SplitRatio,
    StreamSpec,
};
use owstream::gradcheck::run_gradcheck;
use owstream::metric::Label;
use owstream::ncp::{dbscan, dbscan_reference, DbscanConfig};
use owstream::owc::{closed_set_accuracy, train_with_validation};
use owstream::stream::{run_stream, Engine};
use owstream::{Error, Result};

#[derive(Parser)]
#[command(name = "owstream", version, about = "Open-world image stream classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labeled stream and run the full open-world loop over it.
    Stream(StreamArgs),
    /// Train on a fixed split and report closed-set test accuracy.
    MetricEval(MetricEvalArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Compare the density clustering against a brute-force reference.
    DbscanCheck(DbscanCheckArgs),
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file (repeat --images/--labels pairs to concatenate).
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// IDX label file, one per --images entry.
    #[arg(long, num_args = 1..)]
    labels: Vec<PathBuf>,
    /// CIFAR-style binary batches instead of IDX (converted to grayscale).
    #[arg(long, num_args = 1.., conflicts_with_all = ["images", "labels"])]
    cifar: Vec<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        if !self.cifar.is_empty() {
            let paths: Vec<&Path> = self.cifar.iter().map(|p| p.as_path()).collect();
            return to_grayscale(&read_cifar(&paths)?);
        }
        if self.images.is_empty() || self.images.len() != self.labels.len() {
            return Err(Error::Usage(
                "provide matching --images and --labels files (or --cifar)".into(),
            ));
        }
        let mut parts = self
            .images
            .iter()
            .zip(&self.labels)
            .map(|(i, l)| read_idx(i, l));
        let mut ds = parts.next().unwrap()?;
        for part in parts {
            let part = part?;
            if (part.height, part.width, part.channels) != (ds.height, ds.width, ds.channels) {
                return Err(Error::Format("datasets have mismatched shapes".into()));
            }
            ds.images.extend(part.images);
            ds.labels.extend(part.labels);
        }
        Ok(ds)
    }
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    initial_per_class: Option<usize>,
    #[arg(long)]
    max_stream_len: Option<usize>,
    #[arg(long)]
    hidden_units: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    conv_layers: Option<usize>,
    #[arg(long)]
    conv_channels: Option<usize>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    #[arg(long)]
    storage_capacity: Option<usize>,
    #[arg(long)]
    update_threshold: Option<usize>,
    #[arg(long)]
    store_confidence: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mini_batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {
                $(if let Some(v) = self.$f { c.$f = v; })*
            };
        }
        take!(
            seed, r, initial_per_class, hidden_units, embed_dim, conv_layers,
            conv_channels, buffer_capacity, storage_capacity, update_threshold,
            store_confidence, gamma, beta, alpha, mini_batch, epochs,
            learning_rate, eps, min_pts, window
        );
        if self.max_stream_len.is_some() {
            c.max_stream_len = self.max_stream_len;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricEvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Split scheme: s1 (4:2:4) or s2 (1:1:8).
    #[arg(long)]
    split: SplitRatio2,
    /// Fraction of the dataset to use, seeded-subsampled.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Optional output directory for the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitRatio2 {
    S1,
    S2,
}

impl From<SplitRatio2> for SplitRatio {
    fn from(s: SplitRatio2) -> SplitRatio {
        match s {
            SplitRatio2::S1 => SplitRatio::S1,
            SplitRatio2::S2 => SplitRatio::S2,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random coordinates checked per layer.
    #[arg(long, default_value_t = 100)]
    coords: usize,
    /// Validation hook: offset the analytic gradients of the first layer by
    /// this amount so the check must fail.
    #[arg(long)]
    perturb: Option<f64>,
}

#[derive(Args)]
struct DbscanCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    cases: usize,
}

fn main() {
    let cli = Cli::parse();
    let status = match cli.command {
        Command::Stream(a) => cmd_stream(a),
        Command::MetricEval(a) => cmd_metric_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::DbscanCheck(a) => cmd_dbscan_check(a),
    };
    match status {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(1);
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    config: &'a RunConfig,
    stream: &'a owstream::data::StreamManifest,
}

fn cmd_stream(args: StreamArgs) -> Result<i32> {
    let config = args.config.resolve()?;
    let ds = args.data.load()?;
    let spec = StreamSpec {
        r: config.r,
        seed: sub_seed(config.seed, "stream"),
        initial_per_class: config.initial_per_class,
        max_stream_len: config.max_stream_len,
    };
    let sim = simulate_stream(&ds, &spec)?;
    eprintln!(
        "stream: {} known classes {:?}, {} novel, warm-up {}, stream length {}",
        sim.manifest.known_classes.len(),
        sim.manifest.known_classes,
        sim.manifest.novel_classes.len(),
        sim.manifest.initial_len,
        sim.manifest.stream_len
    );

    let net = config.network(ds.height, ds.width, ds.channels);
    let engine_config = config.engine(net, sub_seed(config.seed, "train"));
    let t0 = Instant::now();
    let engine = Engine::start(engine_config, &sim.initial)?;
    let train_secs = t0.elapsed().as_secs_f64();
    eprintln!("warm-up training done in {:.1}s", train_secs);

    let t1 = Instant::now();
    let (report, engine) = run_stream(engine, &sim.stream)?;
    let stream_secs = t1.elapsed().as_secs_f64();

    std::fs::create_dir_all(&args.out)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        config: &config,
        stream: &sim.manifest,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;

    let m = &report.metrics;
    let mut summary = String::from(
        "accuracy_pct,m_new,f_new,pct_labels,pct_labels_with_initial,n,n_c,false_negatives,false_positives,labels_requested,retrains,detect_calls,oracle_queries,train_secs,stream_secs\n",
    );
    summary.push_str(&format!(
        "{:.4},{},{},{:.4},{:.4},{},{},{},{},{},{},{},{},{:.2},{:.2}\n",
        m.accuracy_pct,
        opt(m.m_new),
        opt(m.f_new),
        m.pct_labels,
        m.pct_labels_with_initial,
        m.n,
        m.n_c,
        m.false_negatives,
        m.false_positives,
        m.labels_requested,
        report.retrains,
        report.detect_calls,
        report.oracle_queries,
        train_secs,
        stream_secs,
    ));
    std::fs::write(args.out.join("summary.csv"), summary)?;

    let mut windows = String::from("start,len,accuracy_pct\n");
    for w in &m.windows {
        windows.push_str(&format!("{},{},{:.4}\n", w.start, w.len, w.accuracy_pct));
    }
    std::fs::write(args.out.join("windows.csv"), windows)?;

    let mut events = std::io::BufWriter::new(std::fs::File::create(args.out.join("events.jsonl"))?);
    for e in &report.events {
        serde_json::to_writer(&mut events, e)?;
        events.write_all(b"\n")?;
    }
    events.flush()?;

    Checkpoint::new(engine.model.clone(), engine.thresholds.clone())
        .save(&args.out.join("model.json"))?;
    save_storage(&engine.storage, &args.out.join("storage.json"))?;

    println!(
        "accuracy {:.2}%  M_new {}  F_new {}  labels {:.2}% ({:.2}% with warm-up)  retrains {}",
        m.accuracy_pct,
        opt(m.m_new),
        opt(m.f_new),
        m.pct_labels,
        m.pct_labels_with_initial,
        report.retrains
    );
    println!("artifacts written to {}", args.out.display());
    Ok(0)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.4}", x))
}

#[derive(Serialize)]
struct EvalReport {
    tool_version: &'static str,
    config: RunConfig,
    split: SplitRatio,
    scale: f64,
    sizes: (usize, usize, usize),
    best_epoch: usize,
    validation_history: Vec<f64>,
    test_accuracy_pct: f64,
}

fn cmd_metric_eval(args: MetricEvalArgs) -> Result<i32> {
    let config = args.config.resolve()?;
    if !(args.scale > 0.0 && args.scale <= 1.0) {
        return Err(Error::Usage(format!("scale must be in (0,1], got {}", args.scale)));
    }
    let full = args.data.load()?;
    let ds = if args.scale < 1.0 {
        let keep = ((full.len() as f64 * args.scale).floor() as usize).max(1);
        let mut order: Vec<usize> = (0..full.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "scale")));
        order.truncate(keep);
        full.subset(&order)
    } else {
        full
    };
    let split: SplitRatio = args.split.into();
    let (tr, va, te) = split_s1_s2(ds.len(), split, sub_seed(config.seed, "split"));
    let collect = |idx: &[usize]| -> Vec<(Vec<f64>, Label)> {
        idx.iter()
            .map(|&i| (ds.images[i].clone(), ds.labels[i]))
            .collect()
    };
    let train_set = collect(&tr);
    let val_set = collect(&va);
    let test_set = collect(&te);
    let net = config.network(ds.height, ds.width, ds.channels);
    let hyper = config.hyper(sub_seed(config.seed, "train"));
    let t0 = Instant::now();
    let (model, best_epoch, history) =
        train_with_validation(net, &train_set, &val_set, &hyper)?;
    let acc = closed_set_accuracy(&model, &test_set)? * 100.0;
    println!(
        "split {:?}  sizes {}/{}/{}  best epoch {}  test accuracy {:.2}%  ({:.1}s)",
        split,
        tr.len(),
        va.len(),
        te.len(),
        best_epoch,
        acc,
        t0.elapsed().as_secs_f64()
    );
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let report = EvalReport {
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            split,
            scale: args.scale,
            sizes: (tr.len(), va.len(), te.len()),
            best_epoch,
            validation_history: history,
            test_accuracy_pct: acc,
        };
        write_json(&out.join("eval.json"), &report)?;
        println!("report written to {}", out.display());
    }
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let report = run_gradcheck(args.seed, args.coords, args.perturb)?;
    println!("{:<16} {:>7} {:>13}  {}", "layer", "coords", "max rel err", "failed");
    for l in &report.per_layer {
        println!(
            "{:<16} {:>7} {:>13.3e}  {}",
            l.name,
            l.coords_checked,
            l.max_rel_err,
            if l.failed_coords.is_empty() {
                "-".to_string()
            } else {
                format!("{:?}", l.failed_coords)
            }
        );
    }
    println!(
        "{} coordinates checked, max relative error {:.3e}: {}",
        report.coords_checked,
        report.max_rel_err,
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_dbscan_check(args: DbscanCheckArgs) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut failures = 0;
    for case in 0..args.cases {
        let n = rng.gen_range(2..=64);
        let d = rng.gen_range(1..=8);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0.0..2.0)).collect())
            .collect();
        let cfg = DbscanConfig {
            eps: rng.gen_range(0.1..1.0),
            min_pts: rng.gen_range(2..8),
        };
        let got = dbscan(&points, &cfg)?;
        let want = dbscan_reference(&points, &cfg)?;
        if got != want {
            failures += 1;
            eprintln!(
                "case {} diverged: n={} d={} eps={:.3} min_pts={}",
                case, n, d, cfg.eps, cfg.min_pts
            );
        }
    }
    println!(
        "{} cases, {} failures: {}",
        args.cases,
        failures,
        if failures == 0 { "PASS" } else { "FAIL" }
    );
    Ok(if failures == 0 { 0 } else { 1 })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}
