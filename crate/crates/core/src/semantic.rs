//! Support-conditioned prompt induction and the semantic repository.
//!
//! A learnable affine mapper turns the support set's global feature into a
//! context vector `c`. Each pre-encoded template `e` is modulated as
//! `normalize(e ⊙ (1 + c))`, so a zero context leaves templates unchanged
//! up to normalization. Induced prompts are averaged into a normal and an
//! abnormal center.

use std::rc::Rc;

use ndarray::{Array1, Array2, Axis};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::feature_io::PromptBank;
use crate::scalar::Scalar;
use crate::similarity::cosine;

pub const DEFAULT_GAMMA: f64 = 0.2;

/// Affine projector from the support feature to prompt context.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapper<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Mapper<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>) -> Result<Self> {
        ensure!(
            weight.is_square() && weight.nrows() == bias.len(),
            "mapper weight {:?} and bias {} must be d x d and d",
            weight.dim(),
            bias.len()
        );
        ensure!(
            weight.iter().chain(bias.iter()).all(|v| v.is_finite()),
            "mapper has non-finite entries"
        );
        Ok(Mapper { weight, bias })
    }

    /// The zero map, under which induction leaves templates unmodulated.
    pub fn zeros(d: usize) -> Self {
        Mapper {
            weight: Array2::zeros((d, d)),
            bias: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }
}

/// Context column `weight · g + bias` (d×1) on the tape.
pub fn context_var<'t, T: Scalar>(
    global: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    weight.matmul(global)?.add(bias)
}

/// Modulated, row-normalized templates `normalize(E ⊙ (1 + cᵀ))`.
pub fn induce_var<'t, T: Scalar>(templates: Var<'t, T>, context: Var<'t, T>) -> Result<Var<'t, T>> {
    let gain = context.t().add_scalar(T::one());
    templates.mul(gain)?.normalize_rows()
}

pub fn induce_context<T: Scalar>(global: &Array1<T>, mapper: &Mapper<T>) -> Result<Array1<T>> {
    ensure!(
        global.iter().all(|v| v.is_finite()),
        "support feature has non-finite entries"
    );
    ensure!(
        global.len() == mapper.dim(),
        "support feature length {} != mapper dimension {}",
        global.len(),
        mapper.dim()
    );
    Ok(mapper.weight.dot(global) + &mapper.bias)
}

/// Induced normal and abnormal prompt matrices, rows of unit norm.
pub fn induce_prompts<T: Scalar>(
    bank: &PromptBank<T>,
    context: &Array1<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    ensure!(
        bank.dim() == context.len(),
        "bank dimension {} != context length {}",
        bank.dim(),
        context.len()
    );
    let tape = Tape::new();
    let ctx = tape.constant(context.clone().insert_axis(Axis(1)));
    let t_n = induce_var(tape.constant(bank.normal().clone()), ctx)?;
    let t_a = induce_var(tape.constant(bank.abnormal().clone()), ctx)?;
    Ok(((*t_n.value()).clone(), (*t_a.value()).clone()))
}

/// Induced prompts, their centers and the alignment margin.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticRepository<T> {
    t_n: Rc<Array2<T>>,
    t_a: Rc<Array2<T>>,
    c_n: Array1<T>,
    c_a: Array1<T>,
    gamma: T,
}

impl<T: Scalar> SemanticRepository<T> {
    pub fn normal_prompts(&self) -> &Array2<T> {
        &self.t_n
    }

    pub fn abnormal_prompts(&self) -> &Array2<T> {
        &self.t_a
    }

    pub fn normal_prompts_shared(&self) -> Rc<Array2<T>> {
        Rc::clone(&self.t_n)
    }

    pub fn abnormal_prompts_shared(&self) -> Rc<Array2<T>> {
        Rc::clone(&self.t_a)
    }

    pub fn normal_center(&self) -> &Array1<T> {
        &self.c_n
    }

    pub fn abnormal_center(&self) -> &Array1<T> {
        &self.c_a
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.c_n.len()
    }

    pub fn n_prompts(&self) -> usize {
        self.t_n.nrows() + self.t_a.nrows()
    }

    /// Repository with the roles of the two classes exchanged.
    pub fn swapped(&self) -> Self {
        SemanticRepository {
            t_n: Rc::clone(&self.t_a),
            t_a: Rc::clone(&self.t_n),
            c_n: self.c_a.clone(),
            c_a: self.c_n.clone(),
            gamma: self.gamma,
        }
    }
}

/// Aggregates induced prompts into a repository. Centers are plain row means.
pub fn build_repository<T: Scalar>(
    t_n: Array2<T>,
    t_a: Array2<T>,
    gamma: T,
) -> Result<SemanticRepository<T>> {
    ensure!(
        t_n.nrows() > 0 && t_a.nrows() > 0,
        "prompt matrices must be non-empty"
    );
    ensure!(
        t_n.ncols() == t_a.ncols(),
        "prompt dimensions differ: {} vs {}",
        t_n.ncols(),
        t_a.ncols()
    );
    ensure!(
        gamma > T::zero() && gamma.is_finite(),
        "margin gamma must be positive"
    );
    let tol = T::lit(1e-6);
    for row in t_n.axis_iter(Axis(0)).chain(t_a.axis_iter(Axis(0))) {
        let n = row.dot(&row).sqrt();
        if (n - T::one()).abs() > tol {
            return Err(Error::validation(format!(
                "prompt rows must be unit-norm, found norm {n}"
            )));
        }
    }
    let c_n = t_n.mean_axis(Axis(0)).expect("non-empty");
    let c_a = t_a.mean_axis(Axis(0)).expect("non-empty");
    Ok(SemanticRepository {
        t_n: Rc::new(t_n),
        t_a: Rc::new(t_a),
        c_n,
        c_a,
        gamma,
    })
}

/// Hinge `max(0, sim(p, C_a) − sim(p, C_n) + γ)`: zero once the patch is
/// closer to the normal center by at least the margin.
pub fn margin_violation<T: Scalar>(patch: &Array1<T>, repo: &SemanticRepository<T>) -> Result<T> {
    let s_a = cosine(patch.view(), repo.c_a.view())?;
    let s_n = cosine(patch.view(), repo.c_n.view())?;
    Ok((s_a - s_n + repo.gamma).max(T::zero()))
}
