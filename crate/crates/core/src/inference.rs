//! Anomaly maps: the text and visual branches, their fusion with the
//! hypergraph residual, resampling to pixel resolution and the soft
//! histogram image head. Heatmap and score-table export live here too.

use std::path::Path;
use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::feature_io::{write_atomic, FeatureGrid};
use crate::reasoning::LEAKY_SLOPE;
use crate::scalar::{sigmoid, Scalar};
use crate::semantic::SemanticRepository;
use crate::similarity::normalize_rows;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_ETA: f64 = 0.4;
pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_BANDWIDTH: f64 = 0.05;
pub const HIDDEN_OFFSET: f64 = 0.1;

/// Scalars controlling map fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub eta: f64,
    pub mu: f64,
    pub beta: f64,
    pub temperature: f64,
    /// Support neighbors averaged by the visual branch (1 = nearest only).
    pub visual_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            mu: DEFAULT_MU,
            beta: DEFAULT_BETA,
            temperature: DEFAULT_TEMPERATURE,
            visual_k: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            "alpha must be in [0, 1], got {}",
            self.alpha
        );
        ensure!(
            self.eta.is_finite() && self.eta >= 0.0,
            "eta must be non-negative"
        );
        ensure!(
            self.temperature.is_finite() && self.temperature > 0.0,
            "temperature must be positive"
        );
        ensure!(self.visual_k >= 1, "visual_k must be at least 1");
        check_residual_bounds(self.mu, self.beta)
    }
}

fn check_residual_bounds(mu: f64, beta: f64) -> Result<()> {
    ensure!(
        mu.is_finite() && beta.is_finite() && beta > 0.0,
        "beta must be positive and mu finite"
    );
    let reach = beta * (1.0 - mu).abs().max(mu.abs());
    ensure!(
        reach <= 1.0,
        "residual range exceeds [-1, 1]: beta {beta} with mu {mu} reaches {reach}"
    );
    Ok(())
}

/// Every intermediate map of one image at pixel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMaps<T> {
    pub m_txt: Array2<T>,
    pub m_vis: Array2<T>,
    pub m_base: Array2<T>,
    pub m_hg: Array2<T>,
    pub m_res: Array2<T>,
    pub m_star: Array2<T>,
}

impl<T: Scalar> AnomalyMaps<T> {
    pub fn check(&self) -> Result<()> {
        let shape = self.m_star.dim();
        let unit = [
            &self.m_txt,
            &self.m_vis,
            &self.m_base,
            &self.m_hg,
            &self.m_star,
        ];
        for m in unit.iter().chain([&&self.m_res]) {
            ensure!(m.dim() == shape, "map shapes differ");
        }
        let in_range =
            |m: &Array2<T>, lo: T| m.iter().all(|&v| v.is_finite() && v >= lo && v <= T::one());
        ensure!(
            unit.iter().all(|m| in_range(m, T::zero())),
            "anomaly map outside [0, 1]"
        );
        ensure!(in_range(&self.m_res, -T::one()), "residual outside [-1, 1]");
        Ok(())
    }
}

/// Cosine similarities of unit-norm rows to both (renormalized) centers,
/// as two N×1 columns `(sim_n, sim_a)`.
pub fn center_sims_var<'t, T: Scalar>(
    unit_rows: Var<'t, T>,
    c_n: Var<'t, T>,
    c_a: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s_n = unit_rows.matmul(c_n.normalize_rows()?.t())?;
    let s_a = unit_rows.matmul(c_a.normalize_rows()?.t())?;
    Ok((s_n, s_a))
}

/// Two-way softmax over center similarities, i.e. `logistic((s_a − s_n)/τ)`.
pub fn text_map_var<'t, T: Scalar>(
    unit_rows: Var<'t, T>,
    c_n: Var<'t, T>,
    c_a: Var<'t, T>,
    temperature: T,
) -> Result<Var<'t, T>> {
    let (s_n, s_a) = center_sims_var(unit_rows, c_n, c_a)?;
    Ok(s_a.sub(s_n)?.scale(T::one() / temperature).sigmoid())
}

fn unit_tokens<T: Scalar>(grid: &FeatureGrid<T>) -> Result<Array2<T>> {
    normalize_rows(grid.tokens()).map_err(|e| Error::validation(format!("token: {e}")))
}

fn as_grid<T: Scalar>(col: &Array2<T>, (h, w): (usize, usize)) -> Array2<T> {
    Array2::from_shape_vec((h, w), col.iter().copied().collect()).expect("grid size")
}

fn row<T: Scalar>(v: &Array1<T>) -> Array2<T> {
    v.clone().insert_axis(Axis(0))
}

/// Text-branch map on the patch grid.
pub fn text_map<T: Scalar>(
    query: &FeatureGrid<T>,
    repo: &SemanticRepository<T>,
    temperature: T,
) -> Result<Array2<T>> {
    ensure!(
        query.dim() == repo.dim(),
        "query dimension {} != repository dimension {}",
        query.dim(),
        repo.dim()
    );
    ensure!(temperature > T::zero(), "temperature must be positive");
    let unit = unit_tokens(query)?;
    let tape = Tape::new();
    let m = text_map_var(
        tape.constant(unit),
        tape.constant(row(repo.normal_center())),
        tape.constant(row(repo.abnormal_center())),
        temperature,
    )?;
    Ok(as_grid(&m.value(), query.grid()))
}

/// Visual-branch map on the patch grid: `(1 − s)/2` where `s` is the mean
/// cosine similarity to the `k` closest support patches, clipped to `[0, 1]`.
pub fn visual_map_k<T: Scalar>(
    query: &FeatureGrid<T>,
    gallery: &[FeatureGrid<T>],
    k: usize,
) -> Result<Array2<T>> {
    ensure!(!gallery.is_empty(), "support gallery is empty");
    ensure!(k >= 1, "visual k must be at least 1");
    let mut sims = Vec::with_capacity(gallery.len());
    let unit = unit_tokens(query)?;
    for g in gallery {
        ensure!(
            g.dim() == query.dim(),
            "support dimension {} != query dimension {}",
            g.dim(),
            query.dim()
        );
        sims.push(unit.dot(&unit_tokens(g)?.t()));
    }
    let total: usize = sims.iter().map(|s| s.ncols()).sum();
    let k = k.min(total);
    let k_t = T::from_usize(k).expect("count");
    let half = T::lit(0.5);
    let mut out = Array1::zeros(unit.nrows());
    let mut buf: Vec<T> = Vec::with_capacity(total);
    for (j, o) in out.iter_mut().enumerate() {
        buf.clear();
        for s in &sims {
            buf.extend(s.row(j).iter().copied());
        }
        buf.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite similarity"));
        let mean = buf[..k].iter().fold(T::zero(), |acc, &v| acc + v) / k_t;
        *o = ((T::one() - mean) * half).max(T::zero()).min(T::one());
    }
    Ok(as_grid(&out.insert_axis(Axis(1)), query.grid()))
}

/// Nearest-neighbor visual map.
pub fn visual_map<T: Scalar>(
    query: &FeatureGrid<T>,
    gallery: &[FeatureGrid<T>],
) -> Result<Array2<T>> {
    visual_map_k(query, gallery, 1)
}

pub fn fuse_var<'t, T: Scalar>(
    m_txt: Var<'t, T>,
    m_vis: Var<'t, T>,
    alpha: T,
) -> Result<Var<'t, T>> {
    m_txt.scale(alpha).add(m_vis.scale(T::one() - alpha))
}

/// `α·m_txt + (1 − α)·m_vis`.
pub fn fuse_base<T: Scalar>(m_txt: &Array2<T>, m_vis: &Array2<T>, alpha: T) -> Result<Array2<T>> {
    ensure!(
        m_txt.dim() == m_vis.dim(),
        "map shapes differ: {:?} vs {:?}",
        m_txt.dim(),
        m_vis.dim()
    );
    ensure!(
        alpha >= T::zero() && alpha <= T::one(),
        "alpha must be in [0, 1]"
    );
    let tape = Tape::new();
    let m = fuse_var(
        tape.constant(m_txt.clone()),
        tape.constant(m_vis.clone()),
        alpha,
    )?;
    Ok((*m.value()).clone())
}

/// 1-D pixel-center linear interpolation weights, `out × n`.
fn interp_weights<T: Scalar>(n: usize, out: usize) -> Array2<T> {
    let mut m = Array2::zeros((out, n));
    let ratio = n as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let frac = src - lo as f64;
        m[[o, lo]] = m[[o, lo]] + T::lit(1.0 - frac);
        if frac > 0.0 {
            m[[o, hi]] = m[[o, hi]] + T::lit(frac);
        }
    }
    m
}

/// Separable bilinear resampling from the patch grid to pixels.
#[derive(Debug, Clone)]
pub struct Resampler<T> {
    grid: (usize, usize),
    out: (usize, usize),
    rows: Rc<Array2<T>>,
    cols_t: Rc<Array2<T>>,
}

impl<T: Scalar> Resampler<T> {
    pub fn new(grid: (usize, usize), out: (usize, usize)) -> Result<Self> {
        ensure!(
            grid.0 > 0 && grid.1 > 0 && out.0 > 0 && out.1 > 0,
            "resampling sizes must be positive: {grid:?} -> {out:?}"
        );
        Ok(Resampler {
            grid,
            out,
            rows: Rc::new(interp_weights(grid.0, out.0)),
            cols_t: Rc::new(interp_weights(grid.1, out.1).reversed_axes()),
        })
    }

    pub fn output(&self) -> (usize, usize) {
        self.out
    }

    /// Maps an N×1 node column to an (H·W)×1 pixel column.
    pub fn apply_var<'t>(&self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = col.tape();
        let grid = col.reshape(self.grid.0, self.grid.1)?;
        let up = tape
            .constant_shared(Rc::clone(&self.rows))
            .matmul(grid)?
            .matmul(tape.constant_shared(Rc::clone(&self.cols_t)))?;
        up.reshape(self.out.0 * self.out.1, 1)
    }

    pub fn apply(&self, grid: &Array2<T>) -> Result<Array2<T>> {
        ensure!(
            grid.dim() == self.grid,
            "grid {:?} does not match resampler input {:?}",
            grid.dim(),
            self.grid
        );
        Ok(self.rows.dot(grid).dot(&*self.cols_t))
    }
}

/// Bilinear upsampling of a node grid to `height × width` pixels.
pub fn upsample<T: Scalar>(grid: &Array2<T>, height: usize, width: usize) -> Result<Array2<T>> {
    Resampler::new(grid.dim(), (height, width))?.apply(grid)
}

pub fn residual_var<'t, T: Scalar>(m_hg: Var<'t, T>, mu: T, beta: T) -> Var<'t, T> {
    m_hg.add_scalar(-mu).scale(beta)
}

/// `β(m_hg − μ)`.
pub fn residual_map<T: Scalar>(m_hg: &Array2<T>, mu: T, beta: T) -> Result<Array2<T>> {
    check_residual_bounds(mu.to_f64_lossy(), beta.to_f64_lossy())?;
    ensure!(
        m_hg.iter().all(|&v| v >= T::zero() && v <= T::one()),
        "hypergraph map must lie in [0, 1]"
    );
    let tape = Tape::new();
    Ok((*residual_var(tape.constant(m_hg.clone()), mu, beta).value()).clone())
}

pub fn final_var<'t, T: Scalar>(
    m_base: Var<'t, T>,
    m_res: Var<'t, T>,
    eta: T,
) -> Result<Var<'t, T>> {
    Ok(m_base.add(m_res.scale(eta))?.clamp(T::zero(), T::one()))
}

/// `min(1, max(0, m_base + η·m_res))`.
pub fn final_map<T: Scalar>(m_base: &Array2<T>, m_res: &Array2<T>, eta: T) -> Result<Array2<T>> {
    ensure!(
        m_base.dim() == m_res.dim(),
        "map shapes differ: {:?} vs {:?}",
        m_base.dim(),
        m_res.dim()
    );
    ensure!(eta >= T::zero(), "eta must be non-negative");
    let tape = Tape::new();
    let m = final_var(
        tape.constant(m_base.clone()),
        tape.constant(m_res.clone()),
        eta,
    )?;
    Ok((*m.value()).clone())
}

/// Soft histogram pooling followed by a two-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageHead<T> {
    pub centers: Array1<T>,
    pub bandwidth: T,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array1<T>,
    pub b2: T,
}

impl<T: Scalar> ImageHead<T> {
    pub fn new(
        centers: Array1<T>,
        bandwidth: T,
        w1: Array2<T>,
        b1: Array1<T>,
        w2: Array1<T>,
        b2: T,
    ) -> Result<Self> {
        let head = ImageHead {
            centers,
            bandwidth,
            w1,
            b1,
            w2,
            b2,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.centers.len();
        ensure!(b >= 1, "image head needs at least one bin");
        ensure!(
            self.bandwidth > T::zero() && self.bandwidth.is_finite(),
            "bin bandwidth must be positive"
        );
        ensure!(
            self.w1.dim() == (b, b) && self.b1.len() == b && self.w2.len() == b,
            "image head shapes do not match {b} bins"
        );
        ensure!(
            self.centers
                .iter()
                .all(|&c| c >= T::zero() && c <= T::one())
                && self.centers.windows(2).into_iter().all(|w| w[0] <= w[1]),
            "bin centers must be sorted within [0, 1]"
        );
        let finite = self
            .w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .all(|v| v.is_finite())
            && self.b2.is_finite();
        ensure!(finite, "image head has non-finite parameters");
        Ok(())
    }

    /// Bins spread uniformly over `[0, 1]`. The perceptron starts as the
    /// identity (offset by [`HIDDEN_OFFSET`] so no unit sits on the rectifier
    /// kink) followed by a readout of centered bin positions. With symmetric
    /// bins the initial logit is the soft mean of the map minus one half.
    pub fn init(bins: usize, bandwidth: T) -> Result<Self> {
        ensure!(bins >= 1, "image head needs at least one bin");
        let centers = if bins == 1 {
            Array1::from_elem(1, T::lit(0.5))
        } else {
            Array1::from_shape_fn(bins, |b| T::lit(b as f64 / (bins - 1) as f64))
        };
        let w2 = centers.mapv(|c| c - T::lit(0.5));
        ImageHead::new(
            centers,
            bandwidth,
            Array2::eye(bins),
            Array1::from_elem(bins, T::lit(HIDDEN_OFFSET)),
            w2,
            T::zero(),
        )
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    /// Restores the center ordering after a gradient step: clip into
    /// `[0, 1]`, then take the running maximum.
    pub fn project(&mut self) {
        let mut floor = T::zero();
        for c in self.centers.iter_mut() {
            *c = c.max(T::zero()).min(T::one()).max(floor);
            floor = *c;
        }
    }
}

/// Image logit from a P×1 column of map values.
#[allow(clippy::too_many_arguments)]
pub fn image_logit_var<'t, T: Scalar>(
    values: Var<'t, T>,
    centers: Var<'t, T>,
    bandwidth: T,
    w1: Var<'t, T>,
    b1: Var<'t, T>,
    w2: Var<'t, T>,
    b2: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let hist = values.soft_histogram(centers, bandwidth)?;
    let hidden = hist.matmul(w1)?.add(b1)?.leaky_relu(T::lit(LEAKY_SLOPE));
    hidden.matmul(w2)?.add(b2)
}

fn column<T: Scalar>(map: &Array2<T>) -> Array2<T> {
    Array2::from_shape_vec((map.len(), 1), map.iter().copied().collect()).expect("column")
}

pub fn soft_histogram<T: Scalar>(
    map: &Array2<T>,
    centers: &Array1<T>,
    bandwidth: T,
) -> Result<Array1<T>> {
    ensure!(!centers.is_empty(), "at least one bin required");
    ensure!(!map.is_empty(), "map is empty");
    ensure!(bandwidth > T::zero(), "bandwidth must be positive");
    let tape = Tape::new();
    let h = tape
        .constant(column(map))
        .soft_histogram(tape.constant(row(centers)), bandwidth)?;
    Ok(h.value().row(0).to_owned())
}

/// Image-level logit of a final map.
pub fn image_score<T: Scalar>(m_star: &Array2<T>, head: &ImageHead<T>) -> Result<T> {
    head.validate()?;
    ensure!(!m_star.is_empty(), "map is empty");
    ensure!(
        m_star.iter().all(|&v| v >= T::zero() && v <= T::one()),
        "final map must lie in [0, 1]"
    );
    let tape = Tape::new();
    let logit = image_logit_var(
        tape.constant(column(m_star)),
        tape.constant(row(&head.centers)),
        head.bandwidth,
        tape.constant(head.w1.clone()),
        tape.constant(row(&head.b1)),
        tape.constant(head.w2.clone().insert_axis(Axis(1))),
        tape.scalar(head.b2),
    )?;
    Ok(logit.item())
}

/// Heatmap metadata written next to each PGM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub image_id: String,
    pub image_logit: f64,
    pub image_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub label: u8,
    pub logit: f64,
    pub prob: f64,
}

impl ScoreRow {
    pub fn new(image_id: String, label: u8, logit: f64) -> Self {
        ScoreRow {
            image_id,
            label,
            logit,
            prob: sigmoid(logit),
        }
    }
}

/// Binary 8-bit PGM with pixel value `round(255·m)`.
pub fn write_heatmap_pgm<T: Scalar>(map: &Array2<T>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().map(|&v| {
        let v = v.to_f64_lossy().clamp(0.0, 1.0);
        (255.0 * v).round() as u8
    }));
    write_atomic(path, &bytes)
}

pub fn write_sidecar(sidecar: &HeatmapSidecar, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(sidecar)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_scores(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })?;
    let bytes = wtr.into_inner().map_err(|e| Error::Write {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_atomic(path, &bytes)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
