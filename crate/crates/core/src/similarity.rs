//! Cosine similarity helpers shared by the matching and graph code.

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn l2_norm<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.dot(&v).sqrt()
}

/// Cosine similarity; zero-norm arguments are rejected.
pub fn cosine<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<T> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if !(na > T::zero()) || !(nb > T::zero()) {
        return Err(Error::validation("cosine similarity of a zero-norm vector"));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Copy of `m` with every row scaled to unit L2 norm.
pub fn normalize_rows<T: Scalar>(m: &Array2<T>) -> Result<Array2<T>> {
    let mut out = m.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = l2_norm(row.view());
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::validation(format!("row {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// All-pairs cosine similarity between rows of `a` and rows of `b`.
pub fn cosine_matrix<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
    Ok(normalize_rows(a)?.dot(&normalize_rows(b)?.t()))
}
