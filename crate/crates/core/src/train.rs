//! SGD training over one few-shot task, checkpoints and evaluation.

use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::feature_io::{decode, encode, read_bytes, write_atomic, Task, TaskManifest};
use crate::inference::{
    FusionConfig, ScoreRow, DEFAULT_ALPHA, DEFAULT_BANDWIDTH, DEFAULT_BETA, DEFAULT_BINS,
    DEFAULT_ETA, DEFAULT_MU, DEFAULT_TEMPERATURE,
};
use crate::metrics::auroc;
use crate::model::{
    check_gradients, infer_query, loss_and_gradient, pool, AlignBatch, Block, ForwardConfig,
    ModelParams, QueryOutput, TaskContext, TensorSpec,
};
use crate::objectives::{GradCheck, LossParts, LossWeights};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"H2VC";

/// Hyperparameters of a training run. Field names double as the JSON
/// config schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Patches per optimization step.
    pub batch_patches: usize,
    /// Neighbors per hyperedge, shared by both edge kinds unless overridden.
    #[serde(alias = "K")]
    pub k: usize,
    pub k_struct: Option<usize>,
    pub k_sem: Option<usize>,
    #[serde(alias = "L")]
    pub layers: usize,
    pub alpha: f64,
    pub eta: f64,
    pub mu: f64,
    pub beta: f64,
    pub temperature: f64,
    pub visual_k: usize,
    pub bins: usize,
    pub bandwidth: f64,
    pub loss: LossWeights,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every this many epochs.
    pub decay_every: Option<usize>,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 2e-3,
            batch_patches: 400,
            k: 8,
            k_struct: None,
            k_sem: None,
            layers: 2,
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            mu: DEFAULT_MU,
            beta: DEFAULT_BETA,
            temperature: DEFAULT_TEMPERATURE,
            visual_k: 1,
            bins: DEFAULT_BINS,
            bandwidth: DEFAULT_BANDWIDTH,
            loss: LossWeights::default(),
            momentum: 0.0,
            weight_decay: 0.0,
            decay_every: None,
            decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr.is_finite() && self.lr > 0.0,
            "lr must be positive, got {}",
            self.lr
        );
        ensure!(self.batch_patches > 0, "batch_patches must be positive");
        ensure!(self.k > 0, "K must be positive");
        ensure!(
            self.k_struct != Some(0) && self.k_sem != Some(0),
            "K overrides must be positive"
        );
        ensure!(self.layers > 0, "L must be positive");
        ensure!(self.bins > 0, "bins must be positive");
        ensure!(
            self.bandwidth.is_finite() && self.bandwidth > 0.0,
            "bandwidth must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            "momentum must be in [0, 1), got {}",
            self.momentum
        );
        ensure!(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight_decay must be non-negative"
        );
        ensure!(self.decay_every != Some(0), "decay_every must be positive");
        ensure!(
            self.decay_factor.is_finite() && self.decay_factor > 0.0,
            "decay_factor must be positive"
        );
        self.fusion().validate()?;
        self.loss.validate()
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            alpha: self.alpha,
            eta: self.eta,
            mu: self.mu,
            beta: self.beta,
            temperature: self.temperature,
            visual_k: self.visual_k,
        }
    }

    pub fn forward(&self) -> ForwardConfig {
        ForwardConfig {
            k_struct: self.k_struct.unwrap_or(self.k),
            k_sem: self.k_sem.unwrap_or(self.k),
            fusion: self.fusion(),
            gamma: self.loss.gamma,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            Some(every) => self.lr * self.decay_factor.powi((epoch / every) as i32),
            None => self.lr,
        }
    }
}

/// Exact position of the training RNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Model tensors, stored in single precision, with everything needed to
/// resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub config: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: RngState,
    /// Mean training loss of the last completed epoch.
    pub loss: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Dims {
    d: usize,
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "B")]
    bins: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dims: Dims,
    bandwidth: f64,
    config: TrainConfig,
    epoch: usize,
    rng: RngState,
    loss: Option<f64>,
    tensors: Vec<TensorSpec>,
}

impl Checkpoint {
    fn capture(
        params: &ModelParams<f64>,
        cfg: &TrainConfig,
        epoch: usize,
        rng: &ChaCha8Rng,
        loss: Option<f64>,
    ) -> Self {
        Checkpoint {
            params: params.cast(),
            config: cfg.clone(),
            epoch,
            rng: RngState::capture(rng),
            loss,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            dims: Dims {
                d: self.params.dim(),
                layers: self.params.n_layers(),
                bins: self.params.bins(),
            },
            bandwidth: f64::from(self.params.image_head.bandwidth),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            loss: self.loss,
            tensors: self.params.specs(),
        };
        let payload: Vec<u8> = self
            .params
            .flatten()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let (header, payload): (CheckpointHeader, _) = decode(path, CHECKPOINT_MAGIC, &bytes)?;
        let Dims { d, layers, bins } = header.dims;
        ensure!(
            d > 0 && layers > 0 && bins > 0,
            "checkpoint dimensions must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = ModelParams::<f32>::init(d, layers, bins, header.bandwidth as f32, &mut rng)
            .map_err(|e| Error::format(path, e.to_string()))?;
        if template.specs() != header.tensors {
            return Err(Error::format(
                path,
                "tensor table does not match dimensions",
            ));
        }
        let n = template.n_params();
        if payload.len() != 4 * n {
            return Err(Error::format(
                path,
                format!("payload has {} bytes, expected {}", payload.len(), 4 * n),
            ));
        }
        let flat: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let params = template
            .unflatten(&flat)
            .and_then(|p| p.validate().map(|_| p))
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Checkpoint {
            params,
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            loss: header.loss,
        })
    }

    /// Fails unless the checkpoint fits a task of feature dimension `d`.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        ensure!(
            self.params.dim() == d,
            "checkpoint has d = {}, task has d = {d}",
            self.params.dim()
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub parts: LossParts<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint of the epoch with the lowest mean loss; the initial state
    /// when no epoch ran.
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn mean_parts(parts: &[LossParts<f64>]) -> LossParts<f64> {
    let n = parts.len().max(1) as f64;
    let sum = |f: fn(&LossParts<f64>) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossParts {
        v2t: sum(|p| p.v2t),
        tri: sum(|p| p.tri),
        eam: sum(|p| p.eam),
        structural: sum(|p| p.structural),
        seg: sum(|p| p.seg),
        image: sum(|p| p.image),
    }
}

/// Alignment patches for one step, subsampled without replacement when
/// there are more than `limit`.
fn align_batch(
    ctx: &TaskContext<f64>,
    queries: &[usize],
    supervised: bool,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AlignBatch<f64>> {
    let (unit, labels) = if supervised {
        pool(ctx, queries)?
    } else {
        let unit = ctx.support_unit().clone();
        let n = unit.nrows();
        (unit, vec![0; n])
    };
    if unit.nrows() <= limit {
        return AlignBatch::new(unit, &labels);
    }
    let mut keep = rand::seq::index::sample(rng, unit.nrows(), limit).into_vec();
    keep.sort_unstable();
    let labels: Vec<u8> = keep.iter().map(|&i| labels[i]).collect();
    AlignBatch::new(unit.select(Axis(0), &keep), &labels)
}

/// Seeded initial parameters for feature dimension `d`, with the RNG
/// positioned just after initialization.
pub fn initial_params(d: usize, cfg: &TrainConfig) -> Result<(ModelParams<f64>, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = ModelParams::init(d, cfg.layers, cfg.bins, cfg.bandwidth, &mut rng)?;
    Ok((p, rng))
}

/// Trains on every query of `manifest`, optionally resuming from a
/// checkpoint. Tasks whose queries all carry masks train the full
/// objective; otherwise only the alignment terms on support patches.
pub fn train(
    manifest: &TaskManifest,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = Task::<f64>::load(manifest)?;
    let ctx = TaskContext::new(&task, &cfg.fusion())?;
    let fwd = cfg.forward();

    let (mut params, mut rng, start) = match resume {
        Some(ck) => {
            ck.check_dim(task.dim())?;
            ensure!(
                ck.params.n_layers() == cfg.layers && ck.params.bins() == cfg.bins,
                "checkpoint has L = {}, B = {}; config asks for L = {}, B = {}",
                ck.params.n_layers(),
                ck.params.bins(),
                cfg.layers,
                cfg.bins
            );
            (ck.params.cast::<f64>(), ck.rng.restore(), ck.epoch)
        }
        None => {
            let (p, rng) = initial_params(task.dim(), cfg)?;
            (p, rng, 0)
        }
    };

    let supervised = ctx.supervised();
    let patches = ctx.queries.first().map_or(1, |q| q.grid.n_patches());
    let per_step = (cfg.batch_patches / patches).max(1);

    let initial = Checkpoint::capture(&params, cfg, start, &rng, resume.and_then(|c| c.loss));
    let mut best = initial;
    let mut best_loss = f64::INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut velocity = vec![0.0; params.n_params()];

    for epoch in start..start + cfg.epochs {
        let steps: Vec<Vec<usize>> = if supervised {
            let mut order: Vec<usize> = (0..ctx.queries.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(per_step).map(<[usize]>::to_vec).collect()
        } else {
            vec![Vec::new()]
        };
        let lr = cfg.lr_at(epoch);
        let mut losses = Vec::with_capacity(steps.len());
        let mut parts = Vec::with_capacity(steps.len());
        for step in &steps {
            let align = align_batch(&ctx, step, supervised, cfg.batch_patches, &mut rng)?;
            let ev = loss_and_gradient(&params, &ctx, step, &align, &fwd, &cfg.loss, supervised)?;
            ensure!(
                ev.loss.is_finite() && ev.gradient.iter().all(|g| g.is_finite()),
                "non-finite loss or gradient at epoch {}",
                epoch + 1
            );
            let mut flat = params.flatten();
            for ((w, v), g) in flat.iter_mut().zip(&mut velocity).zip(&ev.gradient) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                *w -= lr * *v;
            }
            params = params.unflatten(&flat)?;
            params.image_head.project();
            losses.push(ev.loss);
            parts.push(ev.parts);
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            loss,
            parts: mean_parts(&parts),
        });
        if loss < best_loss {
            best_loss = loss;
            best = Checkpoint::capture(&params, cfg, epoch + 1, &rng, Some(loss));
        }
    }
    let last_loss = log.last().map(|l| l.loss).or(best.loss);
    let last = Checkpoint::capture(&params, cfg, start + cfg.epochs, &rng, last_loss);
    if log.is_empty() {
        best = last.clone();
    }
    Ok(TrainOutcome { last, best, log })
}

/// Writes `final.h2vc`, `best.h2vc` and `loss_log.jsonl` into `dir`.
pub fn write_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    outcome.last.save(&dir.join("final.h2vc"))?;
    outcome.best.save(&dir.join("best.h2vc"))?;
    let mut log = Vec::new();
    for entry in &outcome.log {
        serde_json::to_writer(&mut log, entry)?;
        log.push(b'\n');
    }
    write_atomic(&dir.join("loss_log.jsonl"), &log)
}

/// Runs full inference for every query of `manifest`.
pub fn infer_task(manifest: &TaskManifest, ck: &Checkpoint) -> Result<Vec<QueryOutput<f64>>> {
    let task = Task::<f64>::load(manifest)?;
    ck.check_dim(task.dim())?;
    let cfg = &ck.config;
    let ctx = TaskContext::new(&task, &cfg.fusion())?;
    let params = ck.params.cast::<f64>();
    let fwd = cfg.forward();
    (0..ctx.queries.len())
        .map(|i| infer_query(&params, &ctx, i, &fwd))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelAuc {
    /// One AUROC over the pixels of every masked query.
    #[default]
    Pooled,
    /// Mean of per-image AUROCs over masked queries with both classes.
    PerImage,
}

/// Image- and pixel-level AUROC with per-image scores sorted by id.
/// Runtime is kept out of the serialized form so reports compare byte for
/// byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub i_auc: f64,
    /// Absent when no query carries a mask.
    pub p_auc: Option<f64>,
    pub rows: Vec<ScoreRow>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

pub fn evaluate(manifest: &TaskManifest, ck: &Checkpoint, pixel: PixelAuc) -> Result<EvalReport> {
    let start = Instant::now();
    let task = Task::<f64>::load(manifest)?;
    let outputs = infer_task(manifest, ck)?;
    report(&task, &outputs, pixel, start)
}

fn report(
    task: &Task<f64>,
    outputs: &[QueryOutput<f64>],
    pixel: PixelAuc,
    start: Instant,
) -> Result<EvalReport> {
    let logits: Vec<f64> = outputs.iter().map(|o| o.logit).collect();
    let labels: Vec<u8> = outputs.iter().map(|o| o.label).collect();
    let i_auc = auroc(&logits, &labels)?;

    let masked: Vec<(&[f64], &[u8])> = task
        .queries
        .iter()
        .zip(outputs)
        .filter_map(|(q, o)| {
            let mask = q.mask.as_ref()?;
            Some((
                o.maps.m_star.as_slice().expect("standard layout"),
                mask.values().as_slice().expect("standard layout"),
            ))
        })
        .collect();
    let p_auc = match (masked.is_empty(), pixel) {
        (true, _) => None,
        (false, PixelAuc::Pooled) => {
            let scores: Vec<f64> = masked.iter().flat_map(|(s, _)| s.iter().copied()).collect();
            let labels: Vec<u8> = masked.iter().flat_map(|(_, l)| l.iter().copied()).collect();
            Some(auroc(&scores, &labels)?)
        }
        (false, PixelAuc::PerImage) => {
            let per: Vec<f64> = masked
                .iter()
                .filter_map(|(s, l)| auroc(s, l).ok())
                .collect();
            if per.is_empty() {
                return Err(Error::UndefinedMetric(
                    "no masked query contains both pixel classes".into(),
                ));
            }
            Some(per.iter().sum::<f64>() / per.len() as f64)
        }
    };

    let mut rows: Vec<ScoreRow> = outputs
        .iter()
        .map(|o| ScoreRow::new(o.id.clone(), o.label, o.logit))
        .collect();
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(EvalReport {
        i_auc,
        p_auc,
        rows,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Settings of a finite-difference sweep over one task.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub k: usize,
    pub layers: usize,
    /// Masked queries included in the objective, from the front.
    pub queries: usize,
    /// Noise added to the initial parameters so no block sits at a point
    /// where its gradient vanishes identically.
    pub jitter: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            k: 4,
            layers: 2,
            queries: 4,
            jitter: 0.05,
            eps: 1e-5,
            seed: 0,
        }
    }
}

/// Checks the gradient of the full objective on `manifest` block by block,
/// at seeded, jittered initial parameters in double precision.
pub fn gradcheck_task(
    manifest: &TaskManifest,
    gc: &GradcheckConfig,
) -> Result<Vec<(Block, GradCheck)>> {
    let cfg = TrainConfig {
        k: gc.k,
        layers: gc.layers,
        seed: gc.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let task = Task::<f64>::load(manifest)?;
    let ctx = TaskContext::new(&task, &cfg.fusion())?;
    let masked: Vec<usize> = (0..ctx.queries.len())
        .filter(|&i| ctx.queries[i].has_mask())
        .take(gc.queries)
        .collect();
    let supervised = !masked.is_empty();
    let align = if supervised {
        AlignBatch::with_queries(&ctx, &masked)?
    } else {
        AlignBatch::support(&ctx)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let params = ModelParams::init(task.dim(), cfg.layers, cfg.bins, cfg.bandwidth, &mut rng)?
        .jittered(gc.jitter, &mut rng);
    check_gradients(
        &params,
        &ctx,
        &masked,
        &align,
        &cfg.forward(),
        &cfg.loss,
        supervised,
        gc.eps,
    )
}
