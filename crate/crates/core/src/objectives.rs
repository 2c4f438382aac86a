//! Loss terms and the finite-difference gradient checker.

use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::feature_io::MaskGrid;
use crate::inference::center_sims_var;
use crate::reasoning::NodeScores;
use crate::scalar::Scalar;
use crate::semantic::SemanticRepository;
use crate::similarity::normalize_rows;

/// Probability clamp used inside the cross-entropy style terms.
pub const PROB_EPS: f64 = 1e-7;
/// Tolerance below which a negative Laplacian quadratic form is reported.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_str: f64,
    pub lambda_seg: f64,
    /// Weight of the image-level cross-entropy on the head logit.
    pub lambda_img: f64,
    pub xi: f64,
    pub gamma: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
    pub tri_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_str: 0.02,
            lambda_seg: 1.0,
            lambda_img: 1.0,
            xi: 0.1,
            gamma: crate::semantic::DEFAULT_GAMMA,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
            tri_margin: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_str", self.lambda_str),
            ("lambda_seg", self.lambda_seg),
            ("lambda_img", self.lambda_img),
            ("xi", self.xi),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in nonneg {
            ensure!(
                v.is_finite() && v >= 0.0,
                "{name} must be non-negative, got {v}"
            );
        }
        ensure!(
            (0.0..=1.0).contains(&self.focal_alpha),
            "focal_alpha must be in [0, 1]"
        );
        ensure!(self.gamma > 0.0, "gamma must be positive");
        ensure!(self.dice_eps > 0.0, "dice_eps must be positive");
        ensure!(self.tri_margin > 0.0, "tri_margin must be positive");
        Ok(())
    }
}

/// Column of `1 − 2y`: `+1` for normal patches, `−1` for anomalous ones.
fn signs<T: Scalar>(labels: &Array2<T>) -> Array2<T> {
    labels.mapv(|y| T::one() - T::lit(2.0) * y)
}

/// Two-class cross-entropy of `softmax((s_n, s_a)/τ)` against labels.
pub fn v2t_var<'t, T: Scalar>(
    s_n: Var<'t, T>,
    s_a: Var<'t, T>,
    labels: &Array2<T>,
    temperature: T,
) -> Result<Var<'t, T>> {
    let sign = s_n.tape().constant(signs(labels));
    Ok(s_a
        .sub(s_n)?
        .mul(sign)?
        .scale(T::one() / temperature)
        .softplus()
        .mean())
}

/// Center-anchored hinge `max(0, s_wrong − s_right + margin)`, averaged.
pub fn tri_var<'t, T: Scalar>(
    s_n: Var<'t, T>,
    s_a: Var<'t, T>,
    labels: &Array2<T>,
    margin: T,
) -> Result<Var<'t, T>> {
    let sign = s_n.tape().constant(signs(labels));
    Ok(s_a.sub(s_n)?.mul(sign)?.add_scalar(margin).relu().mean())
}

/// Mean of `max(0, s_a − s_n + γ)` over a normal batch.
pub fn eam_var<'t, T: Scalar>(s_n: Var<'t, T>, s_a: Var<'t, T>, gamma: T) -> Result<Var<'t, T>> {
    Ok(s_a.sub(s_n)?.add_scalar(gamma).relu().mean())
}

/// Equal mix of focal and binary cross-entropy, each averaged.
pub fn interaction_var<'t, T: Scalar>(
    p: Var<'t, T>,
    y: Rc<Array2<T>>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let eps = T::lit(PROB_EPS);
    let half = T::lit(0.5);
    let focal = p
        .focal(
            Rc::clone(&y),
            T::lit(w.focal_gamma),
            T::lit(w.focal_alpha),
            eps,
        )?
        .mean();
    let bce = p.bce(y, eps)?.mean();
    focal.scale(half).add(bce.scale(half))
}

/// Node-level term plus `ξ·sᵀ L s`. Fails when the quadratic form exposes
/// a non positive semi-definite operator.
pub fn struct_var<'t, T: Scalar>(
    s: Var<'t, T>,
    y_node: Rc<Array2<T>>,
    laplacian: Var<'t, T>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let quad = s.t().matmul(laplacian.matmul(s)?)?;
    let q = quad.item();
    if q < T::lit(-PSD_TOL) {
        return Err(Error::validation(format!(
            "Laplacian is not positive semi-definite: quadratic form {q}"
        )));
    }
    interaction_var(s, y_node, w)?.add(quad.scale(T::lit(w.xi)))
}

/// Dice + focal + semantic-weighted background penalty on a pixel column.
pub fn seg_var<'t, T: Scalar>(
    m_star: Var<'t, T>,
    y: Rc<Array2<T>>,
    m_txt: Var<'t, T>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let tape = m_star.tape();
    let eps = T::lit(w.dice_eps);
    let y_var = tape.constant_shared(Rc::clone(&y));
    let overlap = m_star.mul(y_var)?.sum().scale(T::lit(2.0)).add_scalar(eps);
    let denom = m_star.sum().add_scalar(y.sum() + eps);
    let dice = overlap.mul(denom.recip()?)?.rsub_scalar(T::one());
    let focal = m_star
        .focal(
            Rc::clone(&y),
            T::lit(w.focal_gamma),
            T::lit(w.focal_alpha),
            T::lit(PROB_EPS),
        )?
        .mean();
    let background = tape.constant(y.mapv(|v| T::one() - v));
    let w_sem = m_txt.rsub_scalar(T::lit(2.0));
    let penalty = background.mul(w_sem)?.mul(m_star)?.mean();
    dice.add(focal)?.add(penalty)
}

/// Scalar values of every objective term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub v2t: T,
    pub tri: T,
    pub eam: T,
    pub structural: T,
    pub seg: T,
    pub image: T,
}

impl<T: Scalar> LossParts<T> {
    pub fn align(&self) -> T {
        self.v2t + self.tri + self.eam
    }
}

/// `align + λ_str·structural + λ_seg·seg + λ_img·image`.
pub fn loss_total<T: Scalar>(parts: &LossParts<T>, w: &LossWeights) -> T {
    parts.align()
        + T::lit(w.lambda_str) * parts.structural
        + T::lit(w.lambda_seg) * parts.seg
        + T::lit(w.lambda_img) * parts.image
}

fn label_column<T: Scalar>(labels: &[u8]) -> Result<Array2<T>> {
    ensure!(labels.iter().all(|&l| l <= 1), "labels must be 0 or 1");
    Ok(Array2::from_shape_fn((labels.len(), 1), |(i, _)| {
        if labels[i] == 1 {
            T::one()
        } else {
            T::zero()
        }
    }))
}

fn center_rows<T: Scalar>(repo: &SemanticRepository<T>) -> (Array2<T>, Array2<T>) {
    (
        repo.normal_center().clone().insert_axis(Axis(0)),
        repo.abnormal_center().clone().insert_axis(Axis(0)),
    )
}

fn with_sims<T: Scalar, F>(patches: &Array2<T>, repo: &SemanticRepository<T>, f: F) -> Result<T>
where
    F: for<'t> Fn(Var<'t, T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    ensure!(patches.nrows() > 0, "empty patch batch");
    ensure!(
        patches.ncols() == repo.dim(),
        "patch dimension {} != repository dimension {}",
        patches.ncols(),
        repo.dim()
    );
    let unit = normalize_rows(patches).map_err(|e| Error::validation(format!("patch: {e}")))?;
    let (c_n, c_a) = center_rows(repo);
    let tape = Tape::new();
    let (s_n, s_a) = center_sims_var(tape.constant(unit), tape.constant(c_n), tape.constant(c_a))?;
    Ok(f(s_n, s_a)?.item())
}

pub fn loss_v2t<T: Scalar>(
    patches: &Array2<T>,
    labels: &[u8],
    repo: &SemanticRepository<T>,
    temperature: T,
) -> Result<T> {
    ensure!(
        labels.len() == patches.nrows(),
        "one label per patch required"
    );
    let y = label_column(labels)?;
    with_sims(patches, repo, |s_n, s_a| v2t_var(s_n, s_a, &y, temperature))
}

pub fn loss_tri<T: Scalar>(
    patches: &Array2<T>,
    labels: &[u8],
    repo: &SemanticRepository<T>,
    margin: T,
) -> Result<T> {
    ensure!(
        labels.len() == patches.nrows(),
        "one label per patch required"
    );
    let y = label_column(labels)?;
    with_sims(patches, repo, |s_n, s_a| tri_var(s_n, s_a, &y, margin))
}

pub fn loss_eam<T: Scalar>(patches: &Array2<T>, repo: &SemanticRepository<T>) -> Result<T> {
    let gamma = repo.gamma();
    with_sims(patches, repo, |s_n, s_a| eam_var(s_n, s_a, gamma))
}

pub fn loss_struct<T: Scalar>(
    scores: &NodeScores<T>,
    y_node: &[u8],
    laplacian: &Array2<T>,
    w: &LossWeights,
) -> Result<T> {
    let s = scores.values();
    ensure!(y_node.len() == s.len(), "one node label per score required");
    ensure!(
        laplacian.dim() == (s.len(), s.len()),
        "Laplacian {:?} does not match {} nodes",
        laplacian.dim(),
        s.len()
    );
    let tape = Tape::new();
    let out = struct_var(
        tape.constant(s.clone().insert_axis(Axis(1))),
        Rc::new(label_column(y_node)?),
        tape.constant(laplacian.clone()),
        w,
    )?;
    Ok(out.item())
}

fn pixel_column<T: Scalar>(m: &Array2<T>) -> Array2<T> {
    Array2::from_shape_vec((m.len(), 1), m.iter().copied().collect()).expect("column")
}

pub fn loss_seg<T: Scalar>(
    m_star: &Array2<T>,
    mask: &MaskGrid,
    m_txt: &Array2<T>,
    w: &LossWeights,
) -> Result<T> {
    ensure!(
        m_star.dim() == mask.shape() && m_txt.dim() == mask.shape(),
        "map {:?}, text map {:?} and mask {:?} must agree",
        m_star.dim(),
        m_txt.dim(),
        mask.shape()
    );
    let tape = Tape::new();
    let out = seg_var(
        tape.constant(pixel_column(m_star)),
        Rc::new(mask.to_column()),
        tape.constant(pixel_column(m_txt)),
        w,
    )?;
    Ok(out.item())
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all coordinates.
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    /// Largest relative error over coordinates whose probes stayed on the
    /// smooth piece of the base point.
    pub max_rel_err_smooth: f64,
    /// Coordinates whose `±eps` probes changed a discrete branch.
    pub kinked: Vec<usize>,
    pub analytic: Array1<f64>,
    pub numeric: Array1<f64>,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` at `params` with central
/// differences of its value, coordinate by coordinate.
pub fn grad_check<F>(f: F, params: &Array1<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    grad_check_branches(|x| f(x).map(|(v, g)| (v, g, 0)), params, eps)
}

/// Like [`grad_check`], with `f` also returning a hash of its discrete
/// branches so probes that cross a kink can be told apart.
pub fn grad_check_branches<F>(f: F, params: &Array1<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&Array1<f64>) -> Result<(f64, Array1<f64>, u64)>,
{
    ensure!(
        (1e-6..=1e-3).contains(&eps),
        "epsilon {eps} outside [1e-6, 1e-3]"
    );
    let (v1, g1, b1) = f(params)?;
    let (v2, g2, b2) = f(params)?;
    if v1.to_bits() != v2.to_bits() || g1 != g2 || b1 != b2 {
        return Err(Error::Determinism(format!(
            "two evaluations gave {v1:e} and {v2:e}"
        )));
    }
    ensure!(
        g1.len() == params.len(),
        "gradient length {} != parameter count {}",
        g1.len(),
        params.len()
    );
    let mut numeric = Array1::zeros(params.len());
    let mut kinked = Vec::new();
    let mut probe = params.clone();
    for i in 0..params.len() {
        let x = params[i];
        probe[i] = x + eps;
        let (plus, _, bp) = f(&probe)?;
        probe[i] = x - eps;
        let (minus, _, bm) = f(&probe)?;
        probe[i] = x;
        numeric[i] = (plus - minus) / (2.0 * eps);
        if bp != b1 || bm != b1 {
            kinked.push(i);
        }
    }
    let mut max_rel_err = 0.0;
    let mut max_rel_err_smooth = 0.0f64;
    let mut worst_index = None;
    let mut k = 0;
    for (i, (&a, &b)) in g1.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, b);
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = Some(i);
        }
        if kinked.get(k) == Some(&i) {
            k += 1;
        } else {
            max_rel_err_smooth = max_rel_err_smooth.max(e);
        }
    }
    Ok(GradCheck {
        max_rel_err,
        worst_index,
        max_rel_err_smooth,
        kinked,
        analytic: g1,
        numeric,
    })
}
