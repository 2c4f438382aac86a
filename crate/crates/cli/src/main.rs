use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hyperad::feature_io::{
    generate_synthetic_task, load_manifest, write_atomic, SynthConfig, Task, TaskManifest,
    HELDOUT_MANIFEST, TRAIN_MANIFEST,
};
use hyperad::hypergraph::Hypergraph;
use hyperad::inference::{
    write_heatmap_pgm, write_scores, write_sidecar, HeatmapSidecar, ScoreRow,
};
use hyperad::model::{repository, TaskContext};
use hyperad::train::{
    evaluate, gradcheck_task, infer_task, initial_params, train, write_outcome, Checkpoint,
    GradcheckConfig, PixelAuc, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "hyperad",
    version,
    about = "Few-shot anomaly detection on hypergraphs of patch features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task.
    Synth(SynthArgs),
    /// Train on a task and write checkpoints plus a loss log.
    Train(Box<TrainArgs>),
    /// Score a task with a checkpoint and report AUROCs.
    Eval(EvalArgs),
    /// Write heatmaps, sidecars and a score table for every query.
    Infer(InferArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the hyperedges of one query as JSON lines.
    DumpGraph(DumpGraphArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with synthetic-task settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    grid_h: Option<usize>,
    #[arg(long)]
    grid_w: Option<usize>,
    #[arg(long)]
    n_support: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    n_heldout: Option<usize>,
    #[arg(long)]
    anomaly_rate: Option<f64>,
    #[arg(long)]
    shift_magnitude: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Task directory or manifest file.
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Output directory for checkpoints and the loss log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// JSON file mirroring the training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_patches: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_struct: Option<usize>,
    #[arg(long)]
    k_sem: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    lambda_str: Option<f64>,
    #[arg(long)]
    lambda_seg: Option<f64>,
    #[arg(long)]
    lambda_img: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    focal_gamma: Option<f64>,
    #[arg(long)]
    focal_alpha: Option<f64>,
    #[arg(long)]
    dice_eps: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Task directory (uses heldout.json when present) or manifest file.
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-image score table.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Average pixel AUROC per image instead of pooling pixels.
    #[arg(long)]
    per_image: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct DumpGraphArgs {
    #[arg(long)]
    task: PathBuf,
    /// Query index in the manifest.
    #[arg(long, default_value_t = 0)]
    query: usize,
    /// Checkpoint supplying the mapper; untrained parameters otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A directory resolves to the first of `names` it contains.
fn manifest_at(path: &Path, names: &[&str]) -> Result<TaskManifest> {
    let file = if path.is_dir() {
        names
            .iter()
            .map(|n| path.join(n))
            .find(|p| p.is_file())
            .with_context(|| format!("no manifest in {}", path.display()))?
    } else {
        path.to_path_buf()
    };
    Ok(load_manifest(&file)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    set(&mut cfg.d, a.d);
    set(&mut cfg.h_p, a.grid_h);
    set(&mut cfg.w_p, a.grid_w);
    set(&mut cfg.n_support, a.n_support);
    set(&mut cfg.n_query, a.n_query);
    set(&mut cfg.n_heldout, a.n_heldout);
    set(&mut cfg.anomaly_rate, a.anomaly_rate);
    set(&mut cfg.shift_magnitude, a.shift_magnitude);
    generate_synthetic_task(&cfg, a.seed, &a.out)?;
    println!("{}", a.out.join(TRAIN_MANIFEST).display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    c.seed = a.seed;
    set(&mut c.epochs, a.epochs);
    set(&mut c.lr, a.lr);
    set(&mut c.batch_patches, a.batch_patches);
    set(&mut c.k, a.k);
    if a.k_struct.is_some() {
        c.k_struct = a.k_struct;
    }
    if a.k_sem.is_some() {
        c.k_sem = a.k_sem;
    }
    set(&mut c.layers, a.layers);
    set(&mut c.alpha, a.alpha);
    set(&mut c.eta, a.eta);
    set(&mut c.mu, a.mu);
    set(&mut c.beta, a.beta);
    set(&mut c.bins, a.bins);
    set(&mut c.bandwidth, a.bandwidth);
    set(&mut c.loss.lambda_str, a.lambda_str);
    set(&mut c.loss.lambda_seg, a.lambda_seg);
    set(&mut c.loss.lambda_img, a.lambda_img);
    set(&mut c.loss.xi, a.xi);
    set(&mut c.loss.gamma, a.gamma);
    set(&mut c.loss.focal_gamma, a.focal_gamma);
    set(&mut c.loss.focal_alpha, a.focal_alpha);
    set(&mut c.loss.dice_eps, a.dice_eps);
    set(&mut c.momentum, a.momentum);
    set(&mut c.weight_decay, a.weight_decay);
    if a.decay_every.is_some() {
        c.decay_every = a.decay_every;
    }
    set(&mut c.decay_factor, a.decay_factor);
    c.validate()?;
    Ok(c)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let manifest = manifest_at(&a.task, &[TRAIN_MANIFEST])?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let outcome = train(&manifest, &cfg, resume.as_ref())?;
    for e in &outcome.log {
        eprintln!("epoch {:>4}  loss {:.6}", e.epoch, e.loss);
    }
    write_outcome(&outcome, &a.out)?;
    println!("{}", a.out.join("final.h2vc").display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let manifest = manifest_at(&a.task, &[HELDOUT_MANIFEST, TRAIN_MANIFEST])?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let pixel = if a.per_image {
        PixelAuc::PerImage
    } else {
        PixelAuc::Pooled
    };
    let report = evaluate(&manifest, &ck, pixel)?;
    eprintln!(
        "evaluated {} queries in {:.3} s",
        report.rows.len(),
        report.runtime_secs
    );
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    match &a.out {
        Some(p) => write_atomic(p, &json)?,
        None => print!("{}", String::from_utf8(json)?),
    }
    if let Some(p) = &a.scores {
        write_scores(&report.rows, p)?;
    }
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let manifest = manifest_at(&a.task, &[TRAIN_MANIFEST])?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let outputs = infer_task(&manifest, &ck)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut rows = Vec::with_capacity(outputs.len());
    for o in &outputs {
        write_heatmap_pgm(&o.maps.m_star, &a.out.join(format!("{}.pgm", o.id)))?;
        let row = ScoreRow::new(o.id.clone(), o.label, o.logit);
        write_sidecar(
            &HeatmapSidecar {
                image_id: o.id.clone(),
                image_logit: row.logit,
                image_prob: row.prob,
            },
            &a.out.join(format!("{}.json", o.id)),
        )?;
        rows.push(row);
    }
    write_scores(&rows, &a.out.join("scores.csv"))?;
    Ok(())
}

/// Returns whether every block is within tolerance.
fn run_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let manifest = manifest_at(&a.task, &[TRAIN_MANIFEST])?;
    let gc = GradcheckConfig {
        k: a.k,
        layers: a.layers,
        queries: a.queries,
        jitter: a.jitter,
        eps: a.eps,
        seed: a.seed,
    };
    let results = gradcheck_task(&manifest, &gc)?;
    println!(
        "{:<14} {:>8} {:>14} {:>14} {:>8}",
        "block", "params", "max_rel_err", "smooth_only", "kinked"
    );
    let mut ok = true;
    for (block, r) in &results {
        println!(
            "{:<14} {:>8} {:>14.3e} {:>14.3e} {:>8}",
            block.name(),
            r.analytic.len(),
            r.max_rel_err,
            r.max_rel_err_smooth,
            r.kinked.len()
        );
        ok &= r.max_rel_err < a.tol;
    }
    Ok(ok)
}

fn run_dump_graph(a: DumpGraphArgs) -> Result<()> {
    let manifest = manifest_at(&a.task, &[TRAIN_MANIFEST])?;
    let task = Task::<f64>::load(&manifest)?;
    let (params, cfg) = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_dim(task.dim())?;
            (ck.params.cast::<f64>(), ck.config)
        }
        None => {
            let cfg = TrainConfig::default();
            (initial_params(task.dim(), &cfg)?.0, cfg)
        }
    };
    let Some(query) = task.queries.get(a.query) else {
        bail!(
            "query {} out of range, task has {}",
            a.query,
            task.queries.len()
        );
    };
    let ctx = TaskContext::new(&task, &cfg.fusion())?;
    let repo = repository(&params, &ctx, cfg.loss.gamma)?;
    let fwd = cfg.forward();
    let k = a.k;
    let hg = Hypergraph::for_query(
        &query.grid,
        &repo,
        k.unwrap_or(fwd.k_struct),
        k.unwrap_or(fwd.k_sem),
    )?;
    let mut buf = Vec::new();
    hg.dump_edges(&mut buf)?;
    match &a.out {
        Some(p) => write_atomic(p, &buf)?,
        None => print!("{}", String::from_utf8(buf)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(*a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::DumpGraph(a) => run_dump_graph(a),
        Command::Gradcheck(a) => match run_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient mismatch above tolerance");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
