//! Feature, mask and prompt-bank containers plus their on-disk formats.

mod format;
mod manifest;
mod synth;

use ndarray::{Array1, Array2, Axis};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

pub(crate) use format::{decode, encode, read_bytes};
pub use format::{
    read_feature_grid, read_mask, read_prompt_bank, write_atomic, write_feature_grid, write_mask,
    write_prompt_bank, PromptKind, FEATURE_MAGIC, FORMAT_VERSION, MASK_MAGIC,
};
pub use manifest::{load_manifest, QueryData, QueryEntry, Task, TaskManifest};
pub use synth::{generate_synthetic_task, SynthConfig, HELDOUT_MANIFEST, TRAIN_MANIFEST};

/// Patch tokens of one image laid out on an `h_p × w_p` grid (row-major),
/// with an optional image-level feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    tokens: Array2<T>,
    h_p: usize,
    w_p: usize,
    global: Option<Array1<T>>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(
        tokens: Array2<T>,
        h_p: usize,
        w_p: usize,
        global: Option<Array1<T>>,
    ) -> Result<Self> {
        ensure!(h_p > 0 && w_p > 0, "grid must be positive, got {h_p}x{w_p}");
        ensure!(
            tokens.nrows() == h_p * w_p,
            "token rows {} != {h_p}x{w_p}",
            tokens.nrows()
        );
        ensure!(tokens.ncols() > 0, "token dimension must be positive");
        ensure!(
            tokens.iter().all(|v| v.is_finite()),
            "tokens contain non-finite values"
        );
        if let Some(g) = &global {
            ensure!(
                g.len() == tokens.ncols(),
                "global length {} != d {}",
                g.len(),
                tokens.ncols()
            );
            ensure!(
                g.iter().all(|v| v.is_finite()),
                "global has non-finite values"
            );
        }
        Ok(FeatureGrid {
            tokens,
            h_p,
            w_p,
            global,
        })
    }

    pub fn tokens(&self) -> &Array2<T> {
        &self.tokens
    }

    pub fn global(&self) -> Option<&Array1<T>> {
        self.global.as_ref()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h_p, self.w_p)
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn n_patches(&self) -> usize {
        self.tokens.nrows()
    }

    /// Global feature if stored, otherwise the mean patch token.
    pub fn global_or_mean(&self) -> Array1<T> {
        match &self.global {
            Some(g) => g.clone(),
            None => self.tokens.mean_axis(Axis(0)).expect("non-empty grid"),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureGrid<U> {
        let conv = |x: &T| U::from(*x).expect("finite cast");
        FeatureGrid {
            tokens: self.tokens.map(conv),
            h_p: self.h_p,
            w_p: self.w_p,
            global: self.global.as_ref().map(|g| g.map(conv)),
        }
    }
}

/// Binary pixel mask, `1` marks an anomalous pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    values: Array2<u8>,
}

impl MaskGrid {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        ensure!(
            values.nrows() > 0 && values.ncols() > 0,
            "mask must be non-empty"
        );
        ensure!(
            values.iter().all(|&v| v <= 1),
            "mask entries must be 0 or 1"
        );
        Ok(MaskGrid { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskGrid {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    /// Pixels as a column of `0`/`1` scalars in row-major order.
    pub fn to_column<T: Scalar>(&self) -> Array2<T> {
        let n = self.values.len();
        Array2::from_shape_vec(
            (n, 1),
            self.values
                .iter()
                .map(|&v| if v == 1 { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("column shape")
    }

    /// Downsamples to node resolution by max-pooling: a node is anomalous
    /// when any pixel it covers is anomalous. Pixel `(y, x)` belongs to node
    /// `(y * h_p / H, x * w_p / W)`.
    pub fn downsample_max(&self, h_p: usize, w_p: usize) -> Array2<u8> {
        let (h, w) = self.shape();
        let mut out = Array2::zeros((h_p, w_p));
        for ((y, x), &v) in self.values.indexed_iter() {
            if v == 1 {
                out[[y * h_p / h, x * w_p / w]] = 1;
            }
        }
        out
    }
}

/// Pre-encoded normal and abnormal prompt templates.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T> {
    normal: Array2<T>,
    abnormal: Array2<T>,
    labels: Vec<String>,
}

impl<T: Scalar> PromptBank<T> {
    pub fn new(normal: Array2<T>, abnormal: Array2<T>, labels: Vec<String>) -> Result<Self> {
        ensure!(normal.nrows() >= 1, "at least one normal template required");
        ensure!(
            abnormal.nrows() >= 1,
            "at least one abnormal template required"
        );
        ensure!(
            normal.ncols() == abnormal.ncols() && normal.ncols() > 0,
            "template dimensions differ: {} vs {}",
            normal.ncols(),
            abnormal.ncols()
        );
        ensure!(
            normal.iter().chain(abnormal.iter()).all(|v| v.is_finite()),
            "templates contain non-finite values"
        );
        let expected = normal.nrows() + abnormal.nrows();
        if labels.len() != expected {
            return Err(Error::validation(format!(
                "{} labels for {expected} templates",
                labels.len()
            )));
        }
        Ok(PromptBank {
            normal,
            abnormal,
            labels,
        })
    }

    pub fn normal(&self) -> &Array2<T> {
        &self.normal
    }

    pub fn abnormal(&self) -> &Array2<T> {
        &self.abnormal
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.normal.ncols()
    }

    pub fn cast<U: Scalar>(&self) -> PromptBank<U> {
        let conv = |x: &T| U::from(*x).expect("finite cast");
        PromptBank {
            normal: self.normal.map(conv),
            abnormal: self.abnormal.map(conv),
            labels: self.labels.clone(),
        }
    }
}
