//! Seeded synthetic few-shot tasks standing in for frozen encoder outputs.
//!
//! Normal patches cluster around a unit direction `u` perturbed by a
//! spatially smooth noise field. Anomalous queries carry one rectangular
//! block of patches shifted along a direction `v` orthogonal to `u`.
//! Normal prompt templates sit near `u`, abnormal ones near `v`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::format::{write_feature_grid, write_mask, write_prompt_bank, PromptKind};
use super::manifest::{QueryEntry, TaskManifest};
use super::{FeatureGrid, MaskGrid, PromptBank};
use crate::error::{ensure, Error, Result};

pub const TRAIN_MANIFEST: &str = "manifest.json";
pub const HELDOUT_MANIFEST: &str = "heldout.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub d: usize,
    pub h_p: usize,
    pub w_p: usize,
    pub n_support: usize,
    pub n_query: usize,
    /// Extra queries written to a separate held-out manifest.
    pub n_heldout: usize,
    pub anomaly_rate: f64,
    pub shift_magnitude: f64,
    /// Output map size; defaults to four pixels per patch.
    pub resolution: Option<(usize, usize)>,
    pub n_templates: usize,
    pub noise: f64,
    pub template_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 16,
            h_p: 8,
            w_p: 8,
            n_support: 1,
            n_query: 20,
            n_heldout: 0,
            anomaly_rate: 0.5,
            shift_magnitude: 1.0,
            resolution: None,
            n_templates: 4,
            noise: 0.25,
            template_noise: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn resolution(&self) -> (usize, usize) {
        self.resolution.unwrap_or((self.h_p * 4, self.w_p * 4))
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.d >= 2, "d must be at least 2, got {}", self.d);
        ensure!(self.h_p > 0 && self.w_p > 0, "grid must be positive");
        ensure!(self.n_support > 0, "n_support must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.anomaly_rate),
            "anomaly_rate must be in [0, 1]"
        );
        ensure!(
            self.shift_magnitude.is_finite() && self.shift_magnitude >= 0.0,
            "shift_magnitude must be finite and non-negative"
        );
        ensure!(self.n_templates > 0, "n_templates must be positive");
        ensure!(
            self.noise >= 0.0 && self.template_noise >= 0.0,
            "noise scales must be non-negative"
        );
        let (h, w) = self.resolution();
        ensure!(h > 0 && w > 0, "resolution must be positive");
        Ok(())
    }
}

/// Rectangle of patches `[top, top + height) × [left, left + width)`.
#[derive(Debug, Clone, Copy)]
struct Region {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

impl Region {
    fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn unit(v: Array1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    (n > 1e-6).then(|| v / n)
}

fn directions(rng: &mut ChaCha8Rng, d: usize) -> (Array1<f64>, Array1<f64>) {
    let u = loop {
        if let Some(u) = unit(gaussian_vec(rng, d)) {
            break u;
        }
    };
    let v = loop {
        let raw = gaussian_vec(rng, d);
        let proj = raw.dot(&u);
        if let Some(v) = unit(&raw - &(&u * proj)) {
            break v;
        }
    };
    (u, v)
}

/// Gaussian noise averaged over each patch's 3×3 neighborhood.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize, scale: f64) -> Array2<f64> {
    let raw = Array2::from_shape_fn((h * w, d), |_| rng.sample::<f64, _>(StandardNormal));
    let mut out = Array2::zeros((h * w, d));
    for r in 0..h {
        for c in 0..w {
            let mut count = 0.0f64;
            let mut acc = Array1::<f64>::zeros(d);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        acc += &raw.row(rr as usize * w + cc as usize);
                        count += 1.0;
                    }
                }
            }
            // rescale so the marginal standard deviation stays near `scale`
            out.row_mut(r * w + c)
                .assign(&(acc * (scale / count.sqrt())));
        }
    }
    out
}

fn random_region(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Region {
    let span = |n: usize, rng: &mut ChaCha8Rng| {
        let lo = (n / 4).max(1);
        let hi = (n / 2).max(lo);
        rng.random_range(lo..=hi)
    };
    let height = span(h, rng);
    let width = span(w, rng);
    Region {
        top: rng.random_range(0..=h - height),
        left: rng.random_range(0..=w - width),
        height,
        width,
    }
}

fn image_grid(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    u: &Array1<f64>,
    v: &Array1<f64>,
    region: Option<Region>,
) -> Result<FeatureGrid<f32>> {
    let mut tokens = smooth_field(rng, cfg.h_p, cfg.w_p, cfg.d, cfg.noise);
    for (idx, mut row) in tokens.axis_iter_mut(Axis(0)).enumerate() {
        row += u;
        if let Some(reg) = region {
            if reg.contains(idx / cfg.w_p, idx % cfg.w_p) {
                row.scaled_add(cfg.shift_magnitude, v);
            }
        }
    }
    let global = tokens.mean_axis(Axis(0)).expect("non-empty");
    FeatureGrid::new(
        tokens.mapv(|x| x as f32),
        cfg.h_p,
        cfg.w_p,
        Some(global.mapv(|x| x as f32)),
    )
}

fn region_mask(cfg: &SynthConfig, region: Option<Region>) -> MaskGrid {
    let (h, w) = cfg.resolution();
    let mut values = Array2::zeros((h, w));
    if let Some(reg) = region {
        for ((y, x), px) in values.indexed_iter_mut() {
            if reg.contains(y * cfg.h_p / h, x * cfg.w_p / w) {
                *px = 1u8;
            }
        }
    }
    MaskGrid::new(values).expect("binary mask")
}

fn template_rows(rng: &mut ChaCha8Rng, base: &Array1<f64>, n: usize, noise: f64) -> Array2<f32> {
    let d = base.len();
    Array2::from_shape_fn((n, d), |(_, j)| {
        (base[j] + noise * rng.sample::<f64, _>(StandardNormal)) as f32
    })
}

fn anomalous_flags(rng: &mut ChaCha8Rng, n: usize, cfg: &SynthConfig) -> Vec<bool> {
    let count = if cfg.shift_magnitude > 0.0 {
        (cfg.anomaly_rate * n as f64).round() as usize
    } else {
        0
    };
    let mut flags: Vec<bool> = (0..n).map(|i| i < count).collect();
    flags.shuffle(rng);
    flags
}

/// Writes a synthetic task into `out_dir` and returns its training manifest.
///
/// Produces `manifest.json` over `n_query` queries and, when `n_heldout > 0`,
/// `heldout.json` over further queries sharing the same support set and
/// prompt bank. Output bytes depend only on `(cfg, seed)`.
pub fn generate_synthetic_task(
    cfg: &SynthConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<TaskManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| Error::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u, v) = directions(&mut rng, cfg.d);

    let bank = PromptBank::new(
        template_rows(&mut rng, &u, cfg.n_templates, cfg.template_noise),
        template_rows(&mut rng, &v, cfg.n_templates, cfg.template_noise),
        (0..cfg.n_templates)
            .map(|i| format!("normal-{i}"))
            .chain((0..cfg.n_templates).map(|i| format!("abnormal-{i}")))
            .collect(),
    )?;
    let bank_name = PathBuf::from("prompts.h2vf");
    write_prompt_bank(&bank, PromptKind::Base, &out_dir.join(&bank_name))?;

    let mut support = Vec::with_capacity(cfg.n_support);
    for i in 0..cfg.n_support {
        let name = PathBuf::from(format!("support_{i:03}.h2vf"));
        let grid = image_grid(&mut rng, cfg, &u, &v, None)?;
        write_feature_grid(&grid, &out_dir.join(&name))?;
        support.push(name);
    }

    let write_split = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<QueryEntry>> {
        let flags = anomalous_flags(rng, n, cfg);
        let mut entries = Vec::with_capacity(n);
        for (i, anomalous) in flags.into_iter().enumerate() {
            let region = anomalous.then(|| random_region(rng, cfg.h_p, cfg.w_p));
            let grid = image_grid(rng, cfg, &u, &v, region)?;
            let mask = region_mask(cfg, region);
            let fname = PathBuf::from(format!("{prefix}_{i:03}.h2vf"));
            let mname = PathBuf::from(format!("{prefix}_{i:03}.h2vm"));
            write_feature_grid(&grid, &out_dir.join(&fname))?;
            write_mask(&mask, &out_dir.join(&mname))?;
            entries.push(QueryEntry {
                features: fname,
                mask: Some(mname),
                image_label: u8::from(!mask.is_empty()),
            });
        }
        Ok(entries)
    };

    let train = write_split("query", cfg.n_query, &mut rng)?;
    let heldout = write_split("heldout", cfg.n_heldout, &mut rng)?;

    let manifest = TaskManifest {
        support,
        queries: train,
        prompt_bank: bank_name,
        induced_prompts: None,
        resolution: cfg.resolution(),
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(TRAIN_MANIFEST))?;
    if cfg.n_heldout > 0 {
        let held = TaskManifest {
            queries: heldout,
            ..manifest.clone()
        };
        held.save(&out_dir.join(HELDOUT_MANIFEST))?;
    }
    Ok(manifest)
}
