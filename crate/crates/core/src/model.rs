//! Learnable parameters and the end-to-end differentiable forward pass.
//!
//! One forward pass induces the prompts from the support context, builds the
//! query hypergraph (membership is discrete and read off current values,
//! semantic edge weights stay on the tape), runs the reasoning layers and
//! fuses every map before the image head.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::feature_io::{FeatureGrid, Task};
use crate::hypergraph::{EdgeKind, Hypergraph};
use crate::inference::{
    center_sims_var, final_var, fuse_var, image_logit_var, residual_var, text_map_var,
    visual_map_k, AnomalyMaps, FusionConfig, ImageHead, Resampler,
};
use crate::objectives::{
    eam_var, grad_check_branches, seg_var, struct_var, tri_var, v2t_var, GradCheck, LossParts,
    LossWeights,
};
use crate::reasoning::{reason_var, scores_var, Activation, NodeScores, ReasoningParams};
use crate::scalar::Scalar;
use crate::semantic::{build_repository, context_var, induce_var, Mapper, SemanticRepository};
use crate::similarity::normalize_rows;

/// Groups of parameters reported separately by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Mapper,
    Layers,
    AnomalyHead,
    ImageHead,
}

impl Block {
    pub const ALL: [Block; 4] = [
        Block::Mapper,
        Block::Layers,
        Block::AnomalyHead,
        Block::ImageHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Mapper => "mapper",
            Block::Layers => "layers",
            Block::AnomalyHead => "anomaly_head",
            Block::ImageHead => "image_head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub block: Block,
}

impl TensorSpec {
    fn new(name: impl Into<String>, shape: &[usize], block: Block) -> Self {
        TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            block,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub mapper: Mapper<T>,
    pub reasoning: ReasoningParams<T>,
    pub image_head: ImageHead<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Zero mapper, near-identity reasoning layers with a zero head, and
    /// the default image head.
    pub fn init<R: Rng>(
        d: usize,
        layers: usize,
        bins: usize,
        bandwidth: T,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(d > 0, "feature dimension must be positive");
        ensure!(layers >= 1, "at least one reasoning layer required");
        Ok(ModelParams {
            mapper: Mapper::zeros(d),
            reasoning: ReasoningParams::init(d, layers, rng),
            image_head: ImageHead::init(bins, bandwidth)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mapper.dim()
    }

    pub fn n_layers(&self) -> usize {
        self.reasoning.layers.len()
    }

    pub fn bins(&self) -> usize {
        self.image_head.bins()
    }

    pub fn validate(&self) -> Result<()> {
        Mapper::new(self.mapper.weight.clone(), self.mapper.bias.clone())?;
        self.reasoning.validate()?;
        ensure!(
            self.reasoning.input_dim() == self.dim(),
            "reasoning input {} != mapper dimension {}",
            self.reasoning.input_dim(),
            self.dim()
        );
        self.image_head.validate()
    }

    /// Tensor layout in flattening order.
    pub fn specs(&self) -> Vec<TensorSpec> {
        let d = self.dim();
        let b = self.bins();
        let mut specs = vec![
            TensorSpec::new("mapper.weight", &[d, d], Block::Mapper),
            TensorSpec::new("mapper.bias", &[d], Block::Mapper),
        ];
        for (l, w) in self.reasoning.layers.iter().enumerate() {
            specs.push(TensorSpec::new(
                format!("layer.{l}"),
                &[w.nrows(), w.ncols()],
                Block::Layers,
            ));
        }
        let out = self.reasoning.head_weight.len();
        specs.extend([
            TensorSpec::new("head.weight", &[out], Block::AnomalyHead),
            TensorSpec::new("head.bias", &[1], Block::AnomalyHead),
            TensorSpec::new("image.centers", &[b], Block::ImageHead),
            TensorSpec::new("image.w1", &[b, b], Block::ImageHead),
            TensorSpec::new("image.b1", &[b], Block::ImageHead),
            TensorSpec::new("image.w2", &[b], Block::ImageHead),
            TensorSpec::new("image.b2", &[1], Block::ImageHead),
        ]);
        specs
    }

    pub fn n_params(&self) -> usize {
        self.specs().iter().map(TensorSpec::len).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.mapper.weight.iter());
        out.extend(self.mapper.bias.iter());
        for w in &self.reasoning.layers {
            out.extend(w.iter());
        }
        out.extend(self.reasoning.head_weight.iter());
        out.push(self.reasoning.head_bias);
        let h = &self.image_head;
        out.extend(h.centers.iter());
        out.extend(h.w1.iter());
        out.extend(h.b1.iter());
        out.extend(h.w2.iter());
        out.push(h.b2);
        out
    }

    /// Parameters with this model's layout and the given values.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        ensure!(
            flat.len() == self.n_params(),
            "{} values for {} parameters",
            flat.len(),
            self.n_params()
        );
        let mut it = flat.iter().copied();
        let mut take2 = |r: usize, c: usize| {
            Array2::from_shape_vec((r, c), it.by_ref().take(r * c).collect()).expect("sized")
        };
        let d = self.dim();
        let b = self.bins();
        let mapper_w = take2(d, d);
        let mapper_b = take2(1, d).remove_axis(Axis(0));
        let layers: Vec<Array2<T>> = self
            .reasoning
            .layers
            .iter()
            .map(|w| take2(w.nrows(), w.ncols()))
            .collect();
        let out = self.reasoning.head_weight.len();
        let head_w = take2(1, out).remove_axis(Axis(0));
        let head_b = take2(1, 1)[[0, 0]];
        let centers = take2(1, b).remove_axis(Axis(0));
        let w1 = take2(b, b);
        let b1 = take2(1, b).remove_axis(Axis(0));
        let w2 = take2(1, b).remove_axis(Axis(0));
        let b2 = take2(1, 1)[[0, 0]];
        Ok(ModelParams {
            mapper: Mapper {
                weight: mapper_w,
                bias: mapper_b,
            },
            reasoning: ReasoningParams {
                layers,
                head_weight: head_w,
                head_bias: head_b,
            },
            image_head: ImageHead {
                centers,
                bandwidth: self.image_head.bandwidth,
                w1,
                b1,
                w2,
                b2,
            },
        })
    }

    /// Index range of each block inside the flattened vector.
    pub fn block_ranges(&self) -> Vec<(Block, Range<usize>)> {
        let mut out: Vec<(Block, Range<usize>)> = Vec::new();
        let mut start = 0;
        for spec in self.specs() {
            let end = start + spec.len();
            match out.last_mut() {
                Some((b, r)) if *b == spec.block => r.end = end,
                _ => out.push((spec.block, start..end)),
            }
            start = end;
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let flat: Vec<U> = self
            .flatten()
            .iter()
            .map(|&v| U::from(v).expect("finite cast"))
            .collect();
        let bandwidth = U::from(self.image_head.bandwidth).expect("finite cast");
        let template = ModelParams {
            mapper: Mapper::zeros(self.dim()),
            reasoning: ReasoningParams {
                layers: self
                    .reasoning
                    .layers
                    .iter()
                    .map(|w| Array2::zeros(w.dim()))
                    .collect(),
                head_weight: Array1::zeros(self.reasoning.head_weight.len()),
                head_bias: U::zero(),
            },
            image_head: ImageHead {
                centers: Array1::zeros(self.bins()),
                bandwidth,
                w1: Array2::zeros((self.bins(), self.bins())),
                b1: Array1::zeros(self.bins()),
                w2: Array1::zeros(self.bins()),
                b2: U::zero(),
            },
        };
        template.unflatten(&flat).expect("same layout")
    }

    /// Binds every tensor to the tape, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ParamVars<'t, T> {
        let leaf = |m: Array2<T>| {
            if trainable {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        };
        let col = |v: &Array1<T>| v.clone().insert_axis(Axis(1));
        let row = |v: &Array1<T>| v.clone().insert_axis(Axis(0));
        let one = |v: T| Array2::from_elem((1, 1), v);
        let h = &self.image_head;
        ParamVars {
            mapper_w: leaf(self.mapper.weight.clone()),
            mapper_b: leaf(col(&self.mapper.bias)),
            layers: self
                .reasoning
                .layers
                .iter()
                .map(|w| leaf(w.clone()))
                .collect(),
            head_w: leaf(col(&self.reasoning.head_weight)),
            head_b: leaf(one(self.reasoning.head_bias)),
            centers: leaf(row(&h.centers)),
            w1: leaf(h.w1.clone()),
            b1: leaf(row(&h.b1)),
            w2: leaf(col(&h.w2)),
            b2: leaf(one(h.b2)),
            bandwidth: h.bandwidth,
        }
    }
}

/// Tape handles of every parameter tensor.
pub struct ParamVars<'t, T: Scalar> {
    pub mapper_w: Var<'t, T>,
    pub mapper_b: Var<'t, T>,
    pub layers: Vec<Var<'t, T>>,
    pub head_w: Var<'t, T>,
    pub head_b: Var<'t, T>,
    pub centers: Var<'t, T>,
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
    pub bandwidth: T,
}

impl<'t, T: Scalar> ParamVars<'t, T> {
    /// Handles in flattening order.
    pub fn in_order(&self) -> Vec<Var<'t, T>> {
        let mut v = vec![self.mapper_w, self.mapper_b];
        v.extend(self.layers.iter().copied());
        v.extend([
            self.head_w,
            self.head_b,
            self.centers,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]);
        v
    }

    /// Flattened gradient matching [`ModelParams::flatten`].
    pub fn flat_gradient(&self, grads: &Gradients<T>) -> Vec<T> {
        self.in_order()
            .into_iter()
            .flat_map(|v| grads.wrt(v).into_iter())
            .collect()
    }
}

/// Graph and fusion settings for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardConfig {
    pub k_struct: usize,
    pub k_sem: usize,
    pub fusion: FusionConfig,
    pub gamma: f64,
}

/// One query with everything that does not depend on the parameters.
#[derive(Debug, Clone)]
pub struct QueryContext<T> {
    pub id: String,
    pub label: u8,
    pub grid: FeatureGrid<T>,
    tokens: Rc<Array2<T>>,
    unit: Rc<Array2<T>>,
    m_vis: Rc<Array2<T>>,
    /// Node labels from the max-pooled mask, as 0/1.
    pub node_labels: Option<Vec<u8>>,
    y_node: Option<Rc<Array2<T>>>,
    y_pix: Option<Rc<Array2<T>>>,
    resampler: Resampler<T>,
}

impl<T: Scalar> QueryContext<T> {
    pub fn has_mask(&self) -> bool {
        self.y_pix.is_some()
    }

    pub fn unit_tokens(&self) -> &Array2<T> {
        &self.unit
    }

    pub fn pixel_labels(&self) -> Option<&Array2<T>> {
        self.y_pix.as_deref()
    }
}

/// Support-side tensors shared by every query of a task.
/// Induced normal and abnormal prompt rows.
type PromptPair<T> = (Rc<Array2<T>>, Rc<Array2<T>>);

#[derive(Debug, Clone)]
pub struct TaskContext<T> {
    pub dim: usize,
    pub resolution: (usize, usize),
    global: Rc<Array2<T>>,
    normal: Rc<Array2<T>>,
    abnormal: Rc<Array2<T>>,
    induced: Option<PromptPair<T>>,
    support_unit: Rc<Array2<T>>,
    pub queries: Vec<QueryContext<T>>,
}

fn unit_rows<T: Scalar>(m: &Array2<T>, what: &str) -> Result<Array2<T>> {
    normalize_rows(m).map_err(|e| Error::validation(format!("{what}: {e}")))
}

fn column<T: Scalar>(values: impl IntoIterator<Item = T>) -> Array2<T> {
    let v: Vec<T> = values.into_iter().collect();
    Array2::from_shape_vec((v.len(), 1), v).expect("column")
}

fn binary<T: Scalar>(v: u8) -> T {
    if v == 1 {
        T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> TaskContext<T> {
    pub fn new(task: &Task<T>, fusion: &FusionConfig) -> Result<Self> {
        let d = task.dim();
        let n_support = T::from_usize(task.support.len()).expect("count");
        let mut global = Array1::<T>::zeros(d);
        for s in &task.support {
            global = global + s.global_or_mean();
        }
        global.mapv_inplace(|v| v / n_support);

        let support_rows: Vec<Array2<T>> = task
            .support
            .iter()
            .map(|s| unit_rows(s.tokens(), "support token"))
            .collect::<Result<_>>()?;
        let views: Vec<_> = support_rows.iter().map(|m| m.view()).collect();
        let support_unit = ndarray::concatenate(Axis(0), &views).expect("shared width");

        let induced = match &task.induced {
            Some(bank) => Some((
                Rc::new(unit_rows(bank.normal(), "induced prompt")?),
                Rc::new(unit_rows(bank.abnormal(), "induced prompt")?),
            )),
            None => None,
        };

        let (h, w) = task.resolution;
        let mut queries = Vec::with_capacity(task.queries.len());
        for q in &task.queries {
            let grid = q.grid.grid();
            let unit = unit_rows(q.grid.tokens(), "query token")?;
            let m_vis = visual_map_k(&q.grid, &task.support, fusion.visual_k)?;
            let node_labels = q.mask.as_ref().map(|m| {
                m.downsample_max(grid.0, grid.1)
                    .iter()
                    .copied()
                    .collect::<Vec<u8>>()
            });
            queries.push(QueryContext {
                id: q.id.clone(),
                label: q.label,
                grid: q.grid.clone(),
                tokens: Rc::new(q.grid.tokens().clone()),
                unit: Rc::new(unit),
                m_vis: Rc::new(column(m_vis.iter().copied())),
                y_node: node_labels
                    .as_ref()
                    .map(|l| Rc::new(column(l.iter().map(|&v| binary(v))))),
                node_labels,
                y_pix: q.mask.as_ref().map(|m| Rc::new(m.to_column())),
                resampler: Resampler::new(grid, (h, w))?,
            });
        }
        Ok(TaskContext {
            dim: d,
            resolution: task.resolution,
            global: Rc::new(global.insert_axis(Axis(1))),
            normal: Rc::new(task.bank.normal().clone()),
            abnormal: Rc::new(task.bank.abnormal().clone()),
            induced,
            support_unit: Rc::new(support_unit),
            queries,
        })
    }

    /// Unit-norm support patches, stacked.
    pub fn support_unit(&self) -> &Array2<T> {
        &self.support_unit
    }

    pub fn uses_induced_prompts(&self) -> bool {
        self.induced.is_some()
    }

    /// True when every query carries a pixel mask.
    pub fn supervised(&self) -> bool {
        !self.queries.is_empty() && self.queries.iter().all(QueryContext::has_mask)
    }
}

/// Induced prompts and centers on the tape, plus their plain repository.
pub struct RepoVars<'t, T: Scalar> {
    pub t_n: Var<'t, T>,
    pub t_a: Var<'t, T>,
    pub c_n: Var<'t, T>,
    pub c_a: Var<'t, T>,
    pub plain: SemanticRepository<T>,
}

pub fn repo_vars<'t, T: Scalar>(
    tape: &'t Tape<T>,
    pv: &ParamVars<'t, T>,
    ctx: &TaskContext<T>,
    gamma: T,
) -> Result<RepoVars<'t, T>> {
    let (t_n, t_a) = match &ctx.induced {
        Some((n, a)) => (
            tape.constant_shared(Rc::clone(n)),
            tape.constant_shared(Rc::clone(a)),
        ),
        None => {
            let c = context_var(
                tape.constant_shared(Rc::clone(&ctx.global)),
                pv.mapper_w,
                pv.mapper_b,
            )?;
            (
                induce_var(tape.constant_shared(Rc::clone(&ctx.normal)), c)?,
                induce_var(tape.constant_shared(Rc::clone(&ctx.abnormal)), c)?,
            )
        }
    };
    let plain = build_repository((*t_n.value()).clone(), (*t_a.value()).clone(), gamma)?;
    Ok(RepoVars {
        t_n,
        t_a,
        c_n: t_n.mean_rows(),
        c_a: t_a.mean_rows(),
        plain,
    })
}

/// Tape handles of one query's maps and scores. Pixel maps are (H·W)×1.
pub struct QueryVars<'t, T: Scalar> {
    pub graph: Hypergraph<T>,
    pub operator: Var<'t, T>,
    pub scores: Var<'t, T>,
    pub m_txt: Var<'t, T>,
    pub m_vis: Var<'t, T>,
    pub m_base: Var<'t, T>,
    pub m_hg: Var<'t, T>,
    pub m_res: Var<'t, T>,
    pub m_star: Var<'t, T>,
    pub logit: Var<'t, T>,
}

fn membership<T: Scalar>(hg: &Hypergraph<T>, ids: &[usize]) -> Array2<T> {
    let mut m = Array2::zeros((hg.n_visual(), ids.len()));
    for (c, &e) in ids.iter().enumerate() {
        for &j in hg.incidence().column(e) {
            if j < hg.n_visual() {
                m[[j, c]] = T::one();
            }
        }
    }
    m
}

/// Visual operator with structural edges as constants and semantic edge
/// weights `(mean member affinity + 1)/2` computed on the tape.
fn operator_var<'t, T: Scalar>(
    tape: &'t Tape<T>,
    hg: &Hypergraph<T>,
    rv: &RepoVars<'t, T>,
    unit: Var<'t, T>,
    k_sem: usize,
) -> Result<Var<'t, T>> {
    let structural = hg.edge_ids(EdgeKind::Structural);
    let (p, q) = hg.operator_factors(&structural)?;
    let mut a = tape.constant(p.dot(&q.t()));
    let semantic = hg.edge_ids(EdgeKind::Semantic);
    let (ids_n, ids_a) = semantic.split_at(rv.plain.normal_prompts().nrows());
    let scale = T::one() / T::from_usize(2 * k_sem).expect("count");
    for (ids, prompts) in [(ids_n, rv.t_n), (ids_a, rv.t_a)] {
        let (p, q) = hg.operator_factors(ids)?;
        let theta = unit
            .matmul(prompts.t())?
            .mul(tape.constant(membership(hg, ids)))?
            .sum_rows()
            .scale(scale)
            .add_scalar(T::lit(0.5));
        a = a.add(tape.constant(p).mul(theta)?.matmul(tape.constant(q).t())?)?;
    }
    Ok(a)
}

pub fn forward_query<'t, T: Scalar>(
    tape: &'t Tape<T>,
    pv: &ParamVars<'t, T>,
    rv: &RepoVars<'t, T>,
    q: &QueryContext<T>,
    cfg: &ForwardConfig,
) -> Result<QueryVars<'t, T>> {
    let f = &cfg.fusion;
    let graph = Hypergraph::for_query(&q.grid, &rv.plain, cfg.k_struct, cfg.k_sem)?;
    let unit = tape.constant_shared(Rc::clone(&q.unit));
    let operator = operator_var(tape, &graph, rv, unit, cfg.k_sem)?;
    let x0 = tape.constant_shared(Rc::clone(&q.tokens));
    let xl = reason_var(operator, x0, &pv.layers, Activation::default())?;
    let scores = scores_var(xl, pv.head_w, pv.head_b)?;

    let up = |v: Var<'t, T>| q.resampler.apply_var(v);
    let m_txt = up(text_map_var(unit, rv.c_n, rv.c_a, T::lit(f.temperature))?)?;
    let m_vis = up(tape.constant_shared(Rc::clone(&q.m_vis)))?;
    let m_base = fuse_var(m_txt, m_vis, T::lit(f.alpha))?;
    let m_hg = up(scores)?;
    let m_res = residual_var(m_hg, T::lit(f.mu), T::lit(f.beta));
    let m_star = final_var(m_base, m_res, T::lit(f.eta))?;
    let logit = image_logit_var(m_star, pv.centers, pv.bandwidth, pv.w1, pv.b1, pv.w2, pv.b2)?;
    Ok(QueryVars {
        graph,
        operator,
        scores,
        m_txt,
        m_vis,
        m_base,
        m_hg,
        m_res,
        m_star,
        logit,
    })
}

/// Full inference output for one query.
#[derive(Debug, Clone)]
pub struct QueryOutput<T> {
    pub id: String,
    pub label: u8,
    pub maps: AnomalyMaps<T>,
    pub node_scores: NodeScores<T>,
    pub logit: T,
}

fn to_map<T: Scalar>(v: &Var<'_, T>, (h, w): (usize, usize)) -> Array2<T> {
    Array2::from_shape_vec((h, w), v.value().iter().copied().collect()).expect("map size")
}

pub fn infer_query<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &TaskContext<T>,
    index: usize,
    cfg: &ForwardConfig,
) -> Result<QueryOutput<T>> {
    let q = ctx
        .queries
        .get(index)
        .ok_or_else(|| Error::validation(format!("no query {index}")))?;
    let tape = Tape::new();
    let pv = params.bind(&tape, false);
    let rv = repo_vars(&tape, &pv, ctx, T::lit(cfg.gamma))?;
    let out = forward_query(&tape, &pv, &rv, q, cfg)?;
    let res = ctx.resolution;
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon();
    let node_scores = NodeScores::new(out.scores.value().column(0).mapv(|s| s.max(lo).min(hi)))?;
    Ok(QueryOutput {
        id: q.id.clone(),
        label: q.label,
        maps: AnomalyMaps {
            m_txt: to_map(&out.m_txt, res),
            m_vis: to_map(&out.m_vis, res),
            m_base: to_map(&out.m_base, res),
            m_hg: to_map(&out.m_hg, res),
            m_res: to_map(&out.m_res, res),
            m_star: to_map(&out.m_star, res),
        },
        node_scores,
        logit: out.logit.item(),
    })
}

/// Plain semantic repository under the current parameters.
pub fn repository<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &TaskContext<T>,
    gamma: T,
) -> Result<SemanticRepository<T>> {
    let tape = Tape::new();
    let pv = params.bind(&tape, false);
    Ok(repo_vars(&tape, &pv, ctx, gamma)?.plain)
}

/// Patches driving the alignment terms of one step.
#[derive(Debug, Clone)]
pub struct AlignBatch<T> {
    unit: Rc<Array2<T>>,
    labels: Array2<T>,
    normal: Option<Rc<Array2<T>>>,
}

impl<T: Scalar> AlignBatch<T> {
    /// Unit-norm patches with 0/1 labels.
    pub fn new(unit: Array2<T>, labels: &[u8]) -> Result<Self> {
        ensure!(unit.nrows() > 0, "alignment batch is empty");
        ensure!(
            labels.len() == unit.nrows(),
            "{} labels for {} patches",
            labels.len(),
            unit.nrows()
        );
        let normal_rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let normal = (!normal_rows.is_empty()).then(|| Rc::new(unit.select(Axis(0), &normal_rows)));
        Ok(AlignBatch {
            unit: Rc::new(unit),
            labels: column(labels.iter().map(|&v| binary(v))),
            normal,
        })
    }

    /// Support patches, all normal.
    pub fn support(ctx: &TaskContext<T>) -> Result<Self> {
        let n = ctx.support_unit.nrows();
        AlignBatch::new((*ctx.support_unit).clone(), &vec![0; n])
    }

    /// Support patches plus the node-labelled patches of the given queries.
    pub fn with_queries(ctx: &TaskContext<T>, queries: &[usize]) -> Result<Self> {
        let (unit, labels) = pool(ctx, queries)?;
        AlignBatch::new(unit, &labels)
    }

    pub fn len(&self) -> usize {
        self.unit.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Support patches and labelled query patches, stacked.
pub fn pool<T: Scalar>(ctx: &TaskContext<T>, queries: &[usize]) -> Result<(Array2<T>, Vec<u8>)> {
    let mut rows = vec![ctx.support_unit.view()];
    let mut labels = vec![0u8; ctx.support_unit.nrows()];
    for &i in queries {
        let q = &ctx.queries[i];
        let node = q
            .node_labels
            .as_ref()
            .ok_or_else(|| Error::validation(format!("query {} has no mask", q.id)))?;
        rows.push(q.unit.view());
        labels.extend(node);
    }
    let unit = ndarray::concatenate(Axis(0), &rows).expect("shared width");
    Ok((unit, labels))
}

/// Objective of one step. Supervised steps average the structural,
/// segmentation and image terms over `queries`; otherwise only the
/// alignment terms contribute. The `u64` hashes the hyperedge memberships
/// that were built along the way.
#[allow(clippy::too_many_arguments)]
pub fn objective<'t, T: Scalar>(
    tape: &'t Tape<T>,
    pv: &ParamVars<'t, T>,
    ctx: &TaskContext<T>,
    queries: &[usize],
    align: &AlignBatch<T>,
    cfg: &ForwardConfig,
    w: &LossWeights,
    supervised: bool,
) -> Result<(Var<'t, T>, LossParts<T>, u64)> {
    let mut membership = DefaultHasher::new();
    let rv = repo_vars(tape, pv, ctx, T::lit(cfg.gamma))?;
    let unit = tape.constant_shared(Rc::clone(&align.unit));
    let (s_n, s_a) = center_sims_var(unit, rv.c_n, rv.c_a)?;
    let v2t = v2t_var(s_n, s_a, &align.labels, T::lit(cfg.fusion.temperature))?;
    let tri = tri_var(s_n, s_a, &align.labels, T::lit(w.tri_margin))?;
    let eam = match &align.normal {
        Some(normal) => {
            let (n_n, n_a) =
                center_sims_var(tape.constant_shared(Rc::clone(normal)), rv.c_n, rv.c_a)?;
            eam_var(n_n, n_a, T::lit(w.gamma))?
        }
        None => tape.scalar(T::zero()),
    };
    let mut total = v2t.add(tri)?.add(eam)?;
    let mut parts = LossParts {
        v2t: v2t.item(),
        tri: tri.item(),
        eam: eam.item(),
        ..LossParts::default()
    };
    if supervised && !queries.is_empty() {
        let inv = T::one() / T::from_usize(queries.len()).expect("count");
        let mut st = tape.scalar(T::zero());
        let mut sg = tape.scalar(T::zero());
        let mut im = tape.scalar(T::zero());
        for &i in queries {
            let q = &ctx.queries[i];
            let (Some(y_node), Some(y_pix)) = (&q.y_node, &q.y_pix) else {
                return Err(Error::validation(format!("query {} has no mask", q.id)));
            };
            let out = forward_query(tape, pv, &rv, q, cfg)?;
            for e in out.graph.edges() {
                e.members.hash(&mut membership);
            }
            let n = q.grid.n_patches();
            let lap = tape.constant(Array2::eye(n)).sub(out.operator)?;
            st = st.add(struct_var(out.scores, Rc::clone(y_node), lap, w)?)?;
            sg = sg.add(seg_var(out.m_star, Rc::clone(y_pix), out.m_txt, w)?)?;
            let y_img = Rc::new(Array2::from_elem((1, 1), binary::<T>(q.label)));
            im = im.add(out.logit.bce_with_logits(y_img)?)?;
        }
        let (st, sg, im) = (st.scale(inv), sg.scale(inv), im.scale(inv));
        parts.structural = st.item();
        parts.seg = sg.item();
        parts.image = im.item();
        total = total
            .add(st.scale(T::lit(w.lambda_str)))?
            .add(sg.scale(T::lit(w.lambda_seg)))?
            .add(im.scale(T::lit(w.lambda_img)))?;
    }
    Ok((total, parts, membership.finish()))
}

/// One evaluation of the objective with its flattened gradient.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub loss: T,
    pub gradient: Vec<T>,
    pub parts: LossParts<T>,
    /// Hash of every discrete choice made in the forward pass. Points with
    /// equal hashes share one smooth piece of the objective.
    pub branches: u64,
}

/// Objective value and its flattened gradient at `params`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradient<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &TaskContext<T>,
    queries: &[usize],
    align: &AlignBatch<T>,
    cfg: &ForwardConfig,
    w: &LossWeights,
    supervised: bool,
) -> Result<Evaluation<T>> {
    let tape = Tape::new();
    let pv = params.bind(&tape, true);
    let (loss, parts, membership) = objective(&tape, &pv, ctx, queries, align, cfg, w, supervised)?;
    let mut branches = DefaultHasher::new();
    membership.hash(&mut branches);
    tape.branch_signature().hash(&mut branches);
    let grads = tape.backward(loss);
    Ok(Evaluation {
        loss: loss.item(),
        gradient: pv.flat_gradient(&grads),
        parts,
        branches: branches.finish(),
    })
}

/// Finite-difference check of every parameter block of the objective.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    params: &ModelParams<f64>,
    ctx: &TaskContext<f64>,
    queries: &[usize],
    align: &AlignBatch<f64>,
    cfg: &ForwardConfig,
    w: &LossWeights,
    supervised: bool,
    eps: f64,
) -> Result<Vec<(Block, GradCheck)>> {
    let base = params.flatten();
    let mut out = Vec::new();
    for (block, range) in params.block_ranges() {
        let thunk = |sub: &Array1<f64>| -> Result<(f64, Array1<f64>, u64)> {
            let mut flat = base.clone();
            flat[range.clone()].copy_from_slice(sub.as_slice().expect("contiguous"));
            let p = params.unflatten(&flat)?;
            let ev = loss_and_gradient(&p, ctx, queries, align, cfg, w, supervised)?;
            Ok((
                ev.loss,
                Array1::from(ev.gradient[range.clone()].to_vec()),
                ev.branches,
            ))
        };
        let start = Array1::from(base[range.clone()].to_vec());
        out.push((block, grad_check_branches(thunk, &start, eps)?));
    }
    Ok(out)
}

impl ModelParams<f64> {
    /// Copy with seeded Gaussian noise of scale `sigma` on every tensor.
    /// Bin centers get a tenth of it and are re-sorted into `[0, 1]`.
    pub fn jittered<R: Rng>(&self, sigma: f64, rng: &mut R) -> Self {
        let mut flat = self.flatten();
        let centers: Vec<Range<usize>> = {
            let mut start = 0;
            let mut out = Vec::new();
            for spec in self.specs() {
                if spec.name == "image.centers" {
                    out.push(start..start + spec.len());
                }
                start += spec.len();
            }
            out
        };
        for (i, v) in flat.iter_mut().enumerate() {
            let scale = if centers.iter().any(|r| r.contains(&i)) {
                sigma * 0.1
            } else {
                sigma
            };
            *v += scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let mut out = self.unflatten(&flat).expect("same layout");
        out.image_head.project();
        out
    }
}
