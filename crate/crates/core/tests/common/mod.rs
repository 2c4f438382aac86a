//! Random instances and brute-force oracles shared by the graph, spectral,
//! metric and acceptance suites.
#![allow(dead_code)]

use hyperad::feature_io::FeatureGrid;
use hyperad::hypergraph::{laplacian, visual_adjacency_operator, EdgeKind, Hypergraph};
use hyperad::reasoning::{hg_conv_layer, Activation};
use hyperad::semantic::{build_repository, SemanticRepository};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn unit_rows(m: Array2<f64>) -> Array2<f64> {
    let n = m
        .map_axis(Axis(1), |r| r.dot(&r).sqrt())
        .insert_axis(Axis(1));
    &m / &n
}

pub struct Instance {
    pub grid: FeatureGrid<f64>,
    pub repo: SemanticRepository<f64>,
    pub k_str: usize,
    pub k_sem: usize,
}

impl Instance {
    pub fn graph(&self) -> Hypergraph<f64> {
        Hypergraph::for_query(&self.grid, &self.repo, self.k_str, self.k_sem).unwrap()
    }
}

/// A query of `2..=max_nodes` patches with a few prompts. With `ties`, some
/// patches are exact copies of earlier ones so that tie-breaking matters.
pub fn random_instance(rng: &mut ChaCha8Rng, max_nodes: usize, ties: bool) -> Instance {
    let n = rng.random_range(2..=max_nodes);
    let d = rng.random_range(2..7);
    let mut tokens = gaussian(rng, (n, d));
    if ties {
        for i in 1..n {
            if rng.random_bool(0.25) {
                let src = rng.random_range(0..i);
                let row = tokens.row(src).to_owned();
                tokens.row_mut(i).assign(&row);
            }
        }
    }
    let grid = FeatureGrid::new(tokens, 1, n, None).unwrap();
    let n_norm = rng.random_range(1..4);
    let n_abn = rng.random_range(1..4);
    let repo = build_repository(
        unit_rows(gaussian(rng, (n_norm, d))),
        unit_rows(gaussian(rng, (n_abn, d))),
        0.2,
    )
    .unwrap();
    Instance {
        grid,
        repo,
        k_str: rng.random_range(1..n),
        k_sem: rng.random_range(1..=n),
    }
}

fn cos(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `j` makes the cut iff fewer than `k` candidates beat it, where a
/// candidate beats `j` with a higher score, or an equal score and a lower
/// index.
fn brute_top_k(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = scores
        .iter()
        .filter(|&&(j, sj)| {
            scores
                .iter()
                .filter(|&&(i, si)| i != j && (si > sj || (si == sj && i < j)))
                .count()
                < k
        })
        .map(|&(j, _)| j)
        .collect();
    out.sort_unstable();
    out
}

/// Expected member lists, structural edges first.
pub fn brute_force_members(inst: &Instance) -> Vec<Vec<usize>> {
    let tokens = inst.grid.tokens();
    let n = tokens.nrows();
    let mut edges = Vec::new();
    for anchor in 0..n {
        let scores: Vec<(usize, f64)> = (0..n)
            .filter(|&i| i != anchor)
            .map(|i| (i, cos(tokens.row(anchor), tokens.row(i))))
            .collect();
        let mut m = brute_top_k(&scores, inst.k_str);
        m.push(anchor);
        m.sort_unstable();
        edges.push(m);
    }
    let prompts: Vec<_> = inst
        .repo
        .normal_prompts()
        .rows()
        .into_iter()
        .chain(inst.repo.abnormal_prompts().rows())
        .collect();
    for (p, prompt) in prompts.iter().enumerate() {
        let scores: Vec<(usize, f64)> = (0..n).map(|i| (i, cos(tokens.row(i), *prompt))).collect();
        let mut m = brute_top_k(&scores, inst.k_sem);
        m.push(n + p);
        edges.push(m);
    }
    edges
}

/// Operator assembled entry by entry from member lists and edge weights.
pub fn dense_operator(hg: &Hypergraph<f64>) -> Array2<f64> {
    let n = hg.n_visual();
    let mut d_v = vec![0.0f64; n];
    for e in hg.edges() {
        for &m in e.members.iter().filter(|&&m| m < n) {
            d_v[m] += 1.0;
        }
    }
    let mut a = Array2::zeros((n, n));
    for e in hg.edges() {
        let vis: Vec<usize> = e.members.iter().copied().filter(|&m| m < n).collect();
        let delta = vis.len() as f64;
        for &i in &vis {
            for &j in &vis {
                a[[i, j]] += e.weight / delta / (d_v[i] * d_v[j]).sqrt();
            }
        }
    }
    a
}

/// `sᵀ L s` written as a sum over edges, never forming a matrix.
pub fn quadratic_form_oracle(hg: &Hypergraph<f64>, s: &Array1<f64>) -> f64 {
    let n = hg.n_visual();
    let d_v = hg.node_degrees();
    let mut q: f64 = s.iter().map(|v| v * v).sum();
    for e in hg.edges() {
        let vis: Vec<usize> = e.members.iter().copied().filter(|&m| m < n).collect();
        let t: f64 = vis.iter().map(|&i| s[i] / (d_v[i] as f64).sqrt()).sum();
        q -= e.weight / vis.len() as f64 * t * t;
    }
    q
}

/// Outcome of every graph oracle on one instance.
#[derive(Debug, Default)]
pub struct GraphCheck {
    pub membership: bool,
    pub degrees: bool,
    pub quad_err: f64,
    pub operator_err: f64,
    pub conv_err: f64,
    pub deterministic: bool,
}

pub fn check_graph(inst: &Instance, rng: &mut ChaCha8Rng) -> GraphCheck {
    let hg = inst.graph();
    let n = hg.n_visual();
    let members: Vec<Vec<usize>> = hg.edges().iter().map(|e| e.members.clone()).collect();
    let membership = members == brute_force_members(inst)
        && hg
            .edges()
            .iter()
            .enumerate()
            .all(|(e, edge)| (e < n) == (edge.kind == EdgeKind::Structural));

    let h = hg.incidence().to_dense::<f64>();
    let inc_ok = (0..h.nrows())
        .all(|v| (0..h.ncols()).all(|e| (h[[v, e]] == 1.0) == members[e].contains(&v)));
    let d_v_ok = (0..n).all(|v| hg.node_degrees()[v] == h.row(v).sum() as usize);
    let d_e_ok = (0..h.ncols())
        .all(|e| hg.edge_degrees()[e] == members[e].iter().filter(|&&m| m < n).count());
    let edge_sizes = (0..hg.edges().len()).all(|e| {
        let expect = if e < n { inst.k_str + 1 } else { inst.k_sem };
        hg.edge_degrees()[e] == expect
    });

    let l = laplacian(&hg).unwrap();
    let mut quad_err: f64 = 0.0;
    for _ in 0..5 {
        let s = gaussian(rng, (n, 1)).column(0).to_owned();
        let direct = s.dot(&l.dot(&s));
        quad_err = quad_err.max((direct - quadratic_form_oracle(&hg, &s)).abs());
    }

    let a = visual_adjacency_operator(&hg).unwrap();
    let dense = dense_operator(&hg);
    let operator_err = (&a - &dense).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let d = inst.grid.dim();
    let x = gaussian(rng, (n, d));
    let w = gaussian(rng, (d, d));
    let got = hg_conv_layer(&x, &a, &w, Activation::default()).unwrap();
    let expect = dense
        .dot(&x)
        .dot(&w)
        .mapv(|v| if v > 0.0 { v } else { 0.01 * v });
    let conv_err = (&got - &expect).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let again = inst.graph();
    let deterministic =
        again.edges() == hg.edges() && visual_adjacency_operator(&again).unwrap() == a;

    GraphCheck {
        membership,
        degrees: inc_ok && d_v_ok && d_e_ok && edge_sizes,
        quad_err,
        operator_err,
        conv_err,
        deterministic,
    }
}

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration.
pub fn spectral_radius(a: &Array2<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let n = a.nrows();
    let mut v = gaussian(rng, (n, 1)).column(0).to_owned();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let av = a.dot(&v);
        lambda = v.dot(&av).abs().max(av.dot(&av).sqrt());
        v = av;
    }
    lambda
}

#[derive(Debug, Default)]
pub struct SpectralCheck {
    pub asymmetry: f64,
    pub min_form: f64,
    pub radius: f64,
}

pub fn check_spectrum(inst: &Instance, rng: &mut ChaCha8Rng) -> SpectralCheck {
    let hg = inst.graph();
    let n = hg.n_visual();
    let a = visual_adjacency_operator(&hg).unwrap();
    let l = laplacian(&hg).unwrap();
    let asymmetry = (&l - &l.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut min_form = f64::INFINITY;
    for _ in 0..8 {
        let s = gaussian(rng, (n, 1)).column(0).to_owned();
        let s = &s / s.dot(&s).sqrt();
        min_form = min_form.min(s.dot(&l.dot(&s)));
    }
    SpectralCheck {
        asymmetry,
        min_form,
        radius: spectral_radius(&a, rng),
    }
}

/// `(2·wins + ties) / (2·P·N)` over all positive/negative pairs.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1;
                num += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    num as f64 / (2 * pairs) as f64
}

/// Synthetic task in a fresh directory, loaded in 64-bit.
pub fn synthetic_task(
    cfg: &hyperad::feature_io::SynthConfig,
    seed: u64,
) -> (
    tempfile::TempDir,
    hyperad::feature_io::TaskManifest,
    hyperad::feature_io::Task<f64>,
) {
    let dir = tempfile::tempdir().unwrap();
    hyperad::feature_io::generate_synthetic_task(cfg, seed, dir.path()).unwrap();
    let manifest =
        hyperad::feature_io::load_manifest(&dir.path().join(hyperad::feature_io::TRAIN_MANIFEST))
            .unwrap();
    let task = hyperad::feature_io::Task::<f64>::load(&manifest).unwrap();
    (dir, manifest, task)
}

/// Every exact reduction, as `(name, holds)`.
pub fn reduction_identities(rng: &mut ChaCha8Rng) -> Vec<(&'static str, bool)> {
    use hyperad::autodiff::Tape;
    use hyperad::inference::{final_map, fuse_base, soft_histogram, FusionConfig};
    use hyperad::model::{infer_query, ForwardConfig, ModelParams, TaskContext};
    use std::rc::Rc;

    let mut eta_zero = true;
    let mut alpha_one = true;
    let mut alpha_zero = true;
    let mut one_bin = true;
    let mut focal_half_bce = true;
    for _ in 0..200 {
        let shape = (rng.random_range(1..9), rng.random_range(1..9));
        let unit = |rng: &mut ChaCha8Rng| Array2::from_shape_fn(shape, |_| rng.random::<f64>());
        let (txt, vis, base) = (unit(rng), unit(rng), unit(rng));
        let res = unit(rng).mapv(|v| 2.0 * v - 1.0);
        eta_zero &= final_map(&base, &res, 0.0).unwrap() == base;
        alpha_one &= fuse_base(&txt, &vis, 1.0).unwrap() == txt;
        alpha_zero &= fuse_base(&txt, &vis, 0.0).unwrap() == vis;
        let center = Array1::from_elem(1, rng.random::<f64>());
        let bw = rng.random_range(1e-3..1.0);
        one_bin &= soft_histogram(&base, &center, bw).unwrap().to_vec() == vec![1.0];

        let tape = Tape::new();
        let p = tape.constant(base.clone());
        let y = Rc::new(unit(rng).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }));
        let focal = p.focal(Rc::clone(&y), 0.0, 0.5, 1e-7).unwrap();
        let bce = p.bce(y, 1e-7).unwrap();
        focal_half_bce &= *focal.value() == bce.value().mapv(|v| 0.5 * v);
    }

    // the same reductions through a full forward pass
    let cfg = hyperad::feature_io::SynthConfig {
        n_query: 4,
        ..Default::default()
    };
    let (_dir, _, task) = synthetic_task(&cfg, rng.random());
    let params = ModelParams::<f64>::init(task.dim(), 2, 16, 0.05, rng)
        .unwrap()
        .jittered(0.05, rng);
    for (alpha, eta) in [(0.5, 0.0), (1.0, 0.0), (0.0, 0.0)] {
        let fusion = FusionConfig {
            alpha,
            eta,
            ..FusionConfig::default()
        };
        let ctx = TaskContext::new(&task, &fusion).unwrap();
        let fwd = ForwardConfig {
            k_struct: 8,
            k_sem: 8,
            fusion,
            gamma: 0.2,
        };
        for i in 0..ctx.queries.len() {
            let m = infer_query(&params, &ctx, i, &fwd).unwrap().maps;
            eta_zero &= m.m_star == m.m_base;
            if alpha == 1.0 {
                alpha_one &= m.m_base == m.m_txt;
            }
            if alpha == 0.0 {
                alpha_zero &= m.m_base == m.m_vis;
            }
        }
    }
    vec![
        ("eta = 0 gives m_star = m_base", eta_zero),
        ("alpha = 1 gives m_base = m_txt", alpha_one),
        ("alpha = 0 gives m_base = m_vis", alpha_zero),
        ("one bin gives histogram [1.0]", one_bin),
        ("focal(0, 0.5) = bce / 2", focal_half_bce),
    ]
}

/// Checks every coordinate away from a kink against `rel·max(|a|, |n|) +
/// abs`. Central differences resolve about 1e-10 absolute, so small entries
/// need the absolute allowance.
pub fn assert_gradients_close(r: &hyperad::objectives::GradCheck, rel: f64, abs: f64) {
    for (i, (a, n)) in r.analytic.iter().zip(&r.numeric).enumerate() {
        if !r.kinked.contains(&i) {
            assert!(
                (a - n).abs() <= rel * a.abs().max(n.abs()) + abs,
                "coordinate {i}: {a:e} vs {n:e}"
            );
        }
    }
}
