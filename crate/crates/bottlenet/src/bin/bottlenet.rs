//! Command-line entry point wiring the pipeline: dataset generation,
//! bottleneck sweeps, cost planning, report emission, and the split runtime.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/network
//! error.

use bottlenet::bottleneck::measure_feature_size;
use bottlenet::checkpoint;
use bottlenet::data::{generate, Dataset, SyntheticKind};
use bottlenet::error::Error;
use bottlenet::graph::{GraphSpec, NetworkGraph};
use bottlenet::planner::{self, PlanResult, PlanTarget, SweepBounds};
use bottlenet::profile::{measure_simulated, ProfileDoc};
use bottlenet::runtime::{self, MonitorConfig, ServerConfig, SplitClient};
use bottlenet::train::{train, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "bottlenet", version, about = "Split-computing toolkit")]
struct Cli {
    /// JSON config file supplying defaults; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (BNDS file).
    Dataset(DatasetArgs),
    /// Train bottleneck configurations at every partition location.
    Sweep(SweepArgs),
    /// Profile costs and select the optimal partition.
    Plan(PlanArgs),
    /// Render a stored plan as a table and optional CSV.
    Report(ReportArgs),
    /// Run the cloud-side inference server.
    Serve(ServeArgs),
    /// Run one split inference against a server.
    Infer(InferArgs),
    /// Watch server load and replan when it shifts.
    Monitor(MonitorArgs),
}

#[derive(Args, Serialize)]
struct DatasetArgs {
    /// blobs | stripes | shapes
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 28)]
    height: usize,
    #[arg(long, default_value_t = 28)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    /// Graph description JSON file.
    #[arg(long)]
    graph: PathBuf,
    /// BNDS dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    smax: Option<usize>,
    #[arg(long)]
    cmax: Option<usize>,
    #[arg(long)]
    quality: Option<u8>,
    /// Permitted accuracy drop below the no-bottleneck baseline.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory for checkpoints and the sweep table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PlanArgs {
    /// Profile document JSON (device tables + networks).
    #[arg(long)]
    profiles: PathBuf,
    /// 3g | 4g | wifi (any network named in the profile document).
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    k_mobile: Option<f64>,
    #[arg(long)]
    k_cloud: Option<f64>,
    /// latency | energy
    #[arg(long)]
    target: Option<String>,
    /// Sweep output directory; supplies measured feature sizes.
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Plan JSON destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Plan JSON produced by `plan`.
    #[arg(long)]
    plan: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ServeArgs {
    /// Directory of partition_<j>.bnmd checkpoints.
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    /// Fixed K_cloud to report instead of the live in-flight count.
    #[arg(long)]
    load_stub: Option<f32>,
}

#[derive(Args, Serialize)]
struct InferArgs {
    /// host:port of a running server.
    #[arg(long)]
    server: String,
    /// BNDS dataset file supplying the input image.
    #[arg(long)]
    input: PathBuf,
    /// Sample index within the input file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    partition: u16,
    /// Directory of partition_<j>.bnmd checkpoints (mobile half).
    #[arg(long)]
    models: PathBuf,
}

#[derive(Args, Serialize)]
struct MonitorArgs {
    /// host:port of a running server.
    #[arg(long)]
    server: String,
    #[arg(long, default_value_t = 500)]
    period_ms: u64,
    /// Profile document JSON used for replanning.
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    k_mobile: Option<f64>,
    /// Sweep output directory; supplies measured feature sizes.
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Relative hysteresis band around the planned load.
    #[arg(long, default_value_t = 0.25)]
    hysteresis: f64,
    /// Missed pings before the plan goes stale.
    #[arg(long, default_value_t = 3)]
    max_missed: u32,
    /// Stop after this many samples (run forever when omitted).
    #[arg(long)]
    samples: Option<usize>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with a zero-ish intent
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let overlay = match load_overlay(cli.config.as_deref()) {
        Ok(v) => v,
        Err(e) => fail(e),
    };
    let result = match cli.command {
        Command::Dataset(a) => cmd_dataset(a, &overlay),
        Command::Sweep(a) => cmd_sweep(a, &overlay),
        Command::Plan(a) => cmd_plan(a, &overlay),
        Command::Report(a) => cmd_report(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Monitor(a) => cmd_monitor(a, &overlay),
    };
    if let Err(e) = result {
        fail(e);
    }
}

fn fail(e: Error) -> ! {
    eprintln!("error: {e}");
    std::process::exit(exit_code(&e));
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 1,
        Error::Connect(_) | Error::Protocol(_) | Error::Remote { .. } => 3,
        _ => 2,
    }
}

// ---------------------------------------------------------------------------
// Config overlay + logging
// ---------------------------------------------------------------------------

fn load_overlay(path: Option<&Path>) -> Result<serde_json::Value, Error> {
    match path {
        None => Ok(serde_json::Value::Null),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

/// Flag value resolution: explicit CLI flag, then config-file key, then the
/// built-in default.
fn resolve<T: Clone + serde::de::DeserializeOwned>(
    flag: &Option<T>,
    overlay: &serde_json::Value,
    key: &str,
    default: T,
) -> Result<T, Error> {
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    match overlay.get(key) {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::InvalidConfig(format!("config key {key}: {e}"))),
        None => Ok(default),
    }
}

fn log_config(command: &str, resolved: &impl Serialize) {
    eprintln!(
        "{command}: resolved config {}",
        serde_json::to_string(resolved).unwrap_or_else(|_| "<unserializable>".into())
    );
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_dataset(a: DatasetArgs, overlay: &serde_json::Value) -> Result<(), Error> {
    let seed = resolve(&a.seed, overlay, "seed", 0)?;
    let kind: SyntheticKind = a.kind.parse()?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        kind: &'a str,
        count: usize,
        height: usize,
        width: usize,
        channels: usize,
        classes: usize,
        seed: u64,
        out: &'a Path,
    }
    log_config(
        "dataset",
        &Resolved {
            kind: &a.kind,
            count: a.count,
            height: a.height,
            width: a.width,
            channels: a.channels,
            classes: a.classes,
            seed,
            out: &a.out,
        },
    );
    let ds = generate(kind, a.count, a.height, a.width, a.channels, a.classes, seed)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} samples ({}x{}x{}, {} classes) to {}",
        ds.len(),
        ds.h,
        ds.w,
        ds.c,
        ds.num_classes,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct SweepManifest {
    baseline_accuracy: f64,
    accuracy_floor: f64,
    seed: u64,
    result: planner::SweepResult,
}

fn checkpoint_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("partition_{j}.bnmd"))
}

fn cmd_sweep(a: SweepArgs, overlay: &serde_json::Value) -> Result<(), Error> {
    let seed = resolve(&a.seed, overlay, "seed", 0)?;
    let bounds = SweepBounds {
        s_max: resolve(&a.smax, overlay, "smax", 2)?,
        c_max: resolve(&a.cmax, overlay, "cmax", 8)?,
        quality: resolve(&a.quality, overlay, "quality", 20)?,
    };
    let epsilon = resolve(&a.epsilon, overlay, "epsilon", 0.02)?;
    let cfg = TrainConfig {
        epochs: resolve(&a.epochs, overlay, "epochs", 10)?,
        lr: resolve(&a.lr, overlay, "lr", 0.05)?,
        batch_size: resolve(&a.batch_size, overlay, "batch_size", 16)?,
        seed,
        ..TrainConfig::default()
    };
    #[derive(Serialize)]
    struct Resolved<'a> {
        graph: &'a Path,
        data: &'a Path,
        bounds: SweepBounds,
        epsilon: f64,
        seed: u64,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        out: &'a Path,
    }
    log_config(
        "sweep",
        &Resolved {
            graph: &a.graph,
            data: &a.data,
            bounds,
            epsilon,
            seed,
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            out: &a.out,
        },
    );
    let spec: GraphSpec = serde_json::from_str(&std::fs::read_to_string(&a.graph)?)?;
    let dataset = Dataset::load(&a.data)?;
    let mut base = NetworkGraph::build(&spec, seed)?;
    let baseline = train(&mut base, &dataset, &cfg)?;
    let floor = baseline.accuracy - epsilon;
    eprintln!(
        "sweep: baseline accuracy {:.4}, accuracy floor {:.4}",
        baseline.accuracy, floor
    );
    let (result, mut models) = planner::train_sweep(&base, &dataset, bounds, floor, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    for (j, model) in &mut models {
        let loc = result
            .locations
            .iter()
            .find(|l| l.j == *j)
            .expect("model without location");
        let best = loc.best.expect("surviving model without combo");
        let mut bcfg =
            bottlenet::bottleneck::BottleneckConfig::new(*j - 1, best.s, best.c_prime, best.quality);
        bcfg.bits = 8;
        checkpoint::save_file(model, Some(bcfg), &checkpoint_path(&a.out, *j))?;
        // refresh measured D with the final parameters
        let d = measure_feature_size(model, &dataset, 32)? as u64;
        eprintln!(
            "sweep: j={j} s={} c'={} accuracy {:.4} D {} B",
            best.s, best.c_prime, best.accuracy, d
        );
    }
    let manifest = SweepManifest {
        baseline_accuracy: baseline.accuracy,
        accuracy_floor: floor,
        seed,
        result,
    };
    std::fs::write(
        a.out.join("sweep.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "sweep complete: {} feasible locations, artifacts in {}",
        manifest
            .result
            .locations
            .iter()
            .filter(|l| l.feasible)
            .count(),
        a.out.display()
    );
    Ok(())
}

fn load_sweep_d(dir: Option<&Path>) -> Result<BTreeMap<usize, u64>, Error> {
    let Some(dir) = dir else {
        return Ok(BTreeMap::new());
    };
    let path = dir.join("sweep.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::InvalidConfig(format!(
            "cannot read {} ({e}); run `bottlenet sweep` first",
            path.display()
        ))
    })?;
    let manifest: SweepManifest = serde_json::from_str(&text)?;
    Ok(manifest.result.d_bytes())
}

fn cmd_plan(a: PlanArgs, overlay: &serde_json::Value) -> Result<(), Error> {
    let network = resolve(&a.network, overlay, "network", "3g".to_string())?;
    let k_mobile = resolve(&a.k_mobile, overlay, "k_mobile", 1.0)?;
    let k_cloud = resolve(&a.k_cloud, overlay, "k_cloud", 1.0)?;
    let target: PlanTarget = resolve(&a.target, overlay, "target", "latency".to_string())?.parse()?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        profiles: &'a Path,
        network: &'a str,
        k_mobile: f64,
        k_cloud: f64,
        target: PlanTarget,
        sweep: Option<&'a Path>,
    }
    log_config(
        "plan",
        &Resolved {
            profiles: &a.profiles,
            network: &network,
            k_mobile,
            k_cloud,
            target,
            sweep: a.sweep.as_deref(),
        },
    );
    let doc = ProfileDoc::from_json(&std::fs::read_to_string(&a.profiles)?)?;
    let d_override = load_sweep_d(a.sweep.as_deref())?;
    let cost = measure_simulated(&doc, &network, k_mobile, k_cloud, &d_override)?;
    let plan = planner::select(&cost, target, None)?;
    let json = serde_json::to_string_pretty(&plan)?;
    match &a.out {
        Some(path) => {
            std::fs::write(path, &json)?;
            println!(
                "plan: partition {} ({}, {:?}), written to {}",
                plan.chosen_j,
                plan.network,
                plan.target,
                path.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&a.plan).map_err(|e| {
        Error::InvalidConfig(format!(
            "cannot read {} ({e}); run `bottlenet plan` first",
            a.plan.display()
        ))
    })?;
    let plan: PlanResult = serde_json::from_str(&text)?;
    if plan.rows.is_empty() {
        return Err(Error::CorruptStream {
            offset: 0,
            reason: "plan has no partition rows".into(),
        });
    }
    print!("{}", planner::render_report(&plan));
    if let Some(csv) = &a.csv {
        std::fs::write(csv, planner::render_csv(&plan))?;
        eprintln!("report: CSV written to {}", csv.display());
    }
    Ok(())
}

fn load_models_dir(dir: &Path) -> Result<BTreeMap<u16, NetworkGraph>, Error> {
    let mut models = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(j) = name
            .strip_prefix("partition_")
            .and_then(|r| r.strip_suffix(".bnmd"))
            .and_then(|r| r.parse::<u16>().ok())
        else {
            continue;
        };
        let (graph, _) = checkpoint::load_file(&path)?;
        models.insert(j, graph);
    }
    if models.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no partition_<j>.bnmd checkpoints in {}; run `bottlenet sweep` first",
            dir.display()
        )));
    }
    Ok(models)
}

fn cmd_serve(a: ServeArgs) -> Result<(), Error> {
    log_config("serve", &a);
    let models = load_models_dir(&a.models)?;
    let partitions: Vec<u16> = models.keys().copied().collect();
    let handle = runtime::serve(
        models,
        ("0.0.0.0", a.port),
        ServerConfig {
            load_stub: a.load_stub,
        },
    )?;
    println!(
        "serving partitions {:?} on port {}",
        partitions, handle.port
    );
    // foreground: run until killed
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn cmd_infer(a: InferArgs) -> Result<(), Error> {
    log_config("infer", &a);
    let path = checkpoint_path(&a.models, a.partition as usize);
    let (mut mobile, _) = checkpoint::load_file(&path).map_err(|e| {
        Error::InvalidConfig(format!(
            "cannot load {} ({e}); run `bottlenet sweep` first",
            path.display()
        ))
    })?;
    let dataset = Dataset::load(&a.input)?;
    if a.index >= dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "index {} out of range ({} samples)",
            a.index,
            dataset.len()
        )));
    }
    let (input, labels) = dataset.batch(&[a.index])?;
    let mut client = SplitClient::connect(&a.server)?;
    let outcome = client.infer(&mut mobile, &input, a.partition)?;
    let predicted = outcome
        .logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    println!(
        "partition {}: predicted class {} (label {}), logits {:?}",
        a.partition, predicted, labels[0], outcome.logits
    );
    println!(
        "timings: mobile+encode {:.3} ms, round-trip {:.3} ms, sent {} B",
        outcome.tm_ms, outcome.rtt_ms, outcome.sent_bytes
    );
    Ok(())
}

fn cmd_monitor(a: MonitorArgs, overlay: &serde_json::Value) -> Result<(), Error> {
    let network = resolve(&a.network, overlay, "network", "3g".to_string())?;
    let target: PlanTarget = resolve(&a.target, overlay, "target", "latency".to_string())?.parse()?;
    let k_mobile = resolve(&a.k_mobile, overlay, "k_mobile", 1.0)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        server: &'a str,
        period_ms: u64,
        profiles: &'a Path,
        network: &'a str,
        target: PlanTarget,
        k_mobile: f64,
        hysteresis: f64,
        max_missed: u32,
    }
    log_config(
        "monitor",
        &Resolved {
            server: &a.server,
            period_ms: a.period_ms,
            profiles: &a.profiles,
            network: &network,
            target,
            k_mobile,
            hysteresis: a.hysteresis,
            max_missed: a.max_missed,
        },
    );
    let doc = ProfileDoc::from_json(&std::fs::read_to_string(&a.profiles)?)?;
    let d_override = load_sweep_d(a.sweep.as_deref())?;
    let initial = planner::replan(&doc, &network, k_mobile, 1.0, target, &d_override)?;
    println!("monitor: initial partition {}", initial.chosen_j);
    let cfg = MonitorConfig {
        period: Duration::from_millis(a.period_ms),
        hysteresis: a.hysteresis,
        max_missed: a.max_missed,
    };
    let net = network.clone();
    let handle = runtime::run_load_monitor(
        a.server.clone(),
        cfg,
        1.0,
        initial.chosen_j as u16,
        move |k| {
            planner::replan(&doc, &net, k_mobile, k, target, &d_override).map(|p| p.chosen_j)
        },
    );
    let mut last = initial.chosen_j as u16;
    let mut seen = 0usize;
    loop {
        std::thread::sleep(Duration::from_millis(a.period_ms));
        let cur = handle
            .active_partition
            .load(std::sync::atomic::Ordering::SeqCst);
        if cur != last {
            println!("monitor: switched partition {last} -> {cur}");
            last = cur;
        }
        if handle.stale.load(std::sync::atomic::Ordering::SeqCst) {
            println!("monitor: plan stale (server unreachable); keeping partition {last}");
        }
        seen += 1;
        if let Some(n) = a.samples {
            if seen >= n {
                handle.stop();
                return Ok(());
            }
        }
    }
}
