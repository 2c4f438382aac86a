//! Stacked hypergraph convolutions over visual node features and the
//! node-level anomaly head.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::hypergraph::{visual_adjacency_operator, Hypergraph};
use crate::scalar::{sigmoid, Scalar};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(LEAKY_SLOPE)
    }
}

impl Activation {
    pub fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(slope) => x.leaky_relu(T::lit(slope)),
        }
    }
}

/// Per-layer projections and the logistic anomaly head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningParams<T> {
    pub layers: Vec<Array2<T>>,
    pub head_weight: Array1<T>,
    pub head_bias: T,
}

impl<T: Scalar> ReasoningParams<T> {
    pub fn new(layers: Vec<Array2<T>>, head_weight: Array1<T>, head_bias: T) -> Result<Self> {
        let params = ReasoningParams {
            layers,
            head_weight,
            head_bias,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.layers.is_empty(),
            "at least one reasoning layer required"
        );
        for (l, pair) in self.layers.windows(2).enumerate() {
            ensure!(
                pair[0].ncols() == pair[1].nrows(),
                "layer {l} output {} does not feed layer {} input {}",
                pair[0].ncols(),
                l + 1,
                pair[1].nrows()
            );
        }
        let out = self.layers.last().expect("non-empty").ncols();
        ensure!(
            self.head_weight.len() == out,
            "head expects {} features, last layer gives {out}",
            self.head_weight.len()
        );
        let finite = self
            .layers
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.head_weight.iter())
            .all(|v| v.is_finite())
            && self.head_bias.is_finite();
        ensure!(finite, "reasoning parameters contain non-finite values");
        Ok(())
    }

    /// Square layers near the identity (uniform ±0.01 perturbation) and a
    /// zero head, so the untrained branch scores every node at 0.5.
    pub fn init<R: Rng>(d: usize, n_layers: usize, rng: &mut R) -> Self {
        let layers = (0..n_layers)
            .map(|_| {
                Array2::from_shape_fn((d, d), |(i, j)| {
                    let noise = T::lit(rng.random_range(-0.01..0.01));
                    if i == j {
                        T::one() + noise
                    } else {
                        noise
                    }
                })
            })
            .collect();
        ReasoningParams {
            layers,
            head_weight: Array1::zeros(d),
            head_bias: T::zero(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].nrows()
    }
}

/// Node scores strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeScores<T>(Array1<T>);

impl<T: Scalar> NodeScores<T> {
    pub fn new(values: Array1<T>) -> Result<Self> {
        ensure!(
            values
                .iter()
                .all(|&v| v.is_finite() && v > T::zero() && v < T::one()),
            "node scores must lie strictly inside (0, 1)"
        );
        Ok(NodeScores(values))
    }

    pub fn values(&self) -> &Array1<T> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<T> {
        self.0
    }
}

/// `σ(A · X · W)` on the tape.
pub fn conv_var<'t, T: Scalar>(
    a: Var<'t, T>,
    x: Var<'t, T>,
    w: Var<'t, T>,
    activation: Activation,
) -> Result<Var<'t, T>> {
    Ok(activation.apply(a.matmul(x)?.matmul(w)?))
}

/// Applies every layer in order.
pub fn reason_var<'t, T: Scalar>(
    a: Var<'t, T>,
    x0: Var<'t, T>,
    layers: &[Var<'t, T>],
    activation: Activation,
) -> Result<Var<'t, T>> {
    layers
        .iter()
        .try_fold(x0, |x, &w| conv_var(a, x, w, activation))
}

/// Column of node probabilities `logistic(X · w + b)`.
pub fn scores_var<'t, T: Scalar>(
    x: Var<'t, T>,
    head_weight: Var<'t, T>,
    head_bias: Var<'t, T>,
) -> Result<Var<'t, T>> {
    Ok(x.matmul(head_weight)?.add(head_bias)?.sigmoid())
}

pub fn hg_conv_layer<T: Scalar>(
    x: &Array2<T>,
    a: &Array2<T>,
    w: &Array2<T>,
    activation: Activation,
) -> Result<Array2<T>> {
    ensure!(
        a.is_square() && a.nrows() == x.nrows(),
        "operator {:?} does not match {} nodes",
        a.dim(),
        x.nrows()
    );
    ensure!(
        x.ncols() == w.nrows(),
        "features have {} columns, weight expects {}",
        x.ncols(),
        w.nrows()
    );
    let tape = Tape::new();
    let out = conv_var(
        tape.constant(a.clone()),
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        activation,
    )?;
    Ok((*out.value()).clone())
}

/// Runs all layers of `params` over `x0` on the visual operator of `hg`.
pub fn reason<T: Scalar>(
    x0: &Array2<T>,
    hg: &Hypergraph<T>,
    params: &ReasoningParams<T>,
    activation: Activation,
) -> Result<Array2<T>> {
    ensure!(
        x0.nrows() == hg.n_visual(),
        "{} feature rows for {} visual nodes",
        x0.nrows(),
        hg.n_visual()
    );
    params.validate()?;
    let a = visual_adjacency_operator(hg)?;
    params
        .layers
        .iter()
        .try_fold(x0.clone(), |x, w| hg_conv_layer(&x, &a, w, activation))
}

pub fn node_scores<T: Scalar>(
    xl: &Array2<T>,
    params: &ReasoningParams<T>,
) -> Result<NodeScores<T>> {
    if xl.ncols() != params.head_weight.len() {
        return Err(Error::shape(format!(
            "features have {} columns, head expects {}",
            xl.ncols(),
            params.head_weight.len()
        )));
    }
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon();
    let logits = xl.dot(&params.head_weight);
    NodeScores::new(logits.mapv(|z| sigmoid(z + params.head_bias).max(lo).min(hi)))
}

/// Node scores for the full reasoning branch on one graph.
pub fn infer_node_scores<T: Scalar>(
    x0: &Array2<T>,
    hg: &Hypergraph<T>,
    params: &ReasoningParams<T>,
) -> Result<NodeScores<T>> {
    let xl = reason(x0, hg, params, Activation::default())?;
    node_scores(&xl, params)
}

impl<T: Scalar> ReasoningParams<T> {
    pub fn head_column(&self) -> Array2<T> {
        self.head_weight.clone().insert_axis(Axis(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{assemble, EdgeKind, Hyperedge};
    use ndarray::array;
    use rand::SeedableRng;

    fn self_loops(n: usize) -> Hypergraph<f64> {
        let edges = (0..n)
            .map(|i| Hyperedge {
                members: vec![i],
                weight: 1.0,
                kind: EdgeKind::Structural,
            })
            .collect();
        assemble(edges, vec![], n, 0).unwrap()
    }

    #[test]
    fn identity_pipeline() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let out =
            hg_conv_layer(&x, &Array2::eye(2), &Array2::eye(2), Activation::Identity).unwrap();
        assert_eq!(out, x);

        let params =
            ReasoningParams::new(vec![Array2::eye(2), Array2::eye(2)], array![0.0, 0.0], 0.0)
                .unwrap();
        let out = reason(&x, &self_loops(2), &params, Activation::Identity).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn shared_edge_averages() {
        let a = array![[0.5, 0.5], [0.5, 0.5]];
        let out = hg_conv_layer(
            &array![[1.0, 0.0], [0.0, 1.0]],
            &a,
            &Array2::eye(2),
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn zero_input_gives_zero() {
        let out = hg_conv_layer(
            &Array2::<f64>::zeros((2, 3)),
            &array![[0.5, 0.5], [0.5, 0.5]],
            &Array2::eye(3),
            Activation::default(),
        )
        .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_equals_one_conv() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let w = array![[0.3, -0.1], [0.7, 0.2]];
        let hg = assemble(
            vec![Hyperedge {
                members: vec![0, 1],
                weight: 1.0,
                kind: EdgeKind::Structural,
            }],
            vec![],
            2,
            0,
        )
        .unwrap();
        let params = ReasoningParams::new(vec![w.clone()], array![0.0, 0.0], 0.0).unwrap();
        let a = visual_adjacency_operator(&hg).unwrap();
        assert_eq!(
            reason(&x, &hg, &params, Activation::default()).unwrap(),
            hg_conv_layer(&x, &a, &w, Activation::default()).unwrap()
        );
    }

    #[test]
    fn shape_errors() {
        let x = array![[1.0, 2.0]];
        assert!(hg_conv_layer(&x, &Array2::eye(2), &Array2::eye(2), Activation::Identity).is_err());
        assert!(hg_conv_layer(&x, &Array2::eye(1), &Array2::eye(3), Activation::Identity).is_err());
        let params = ReasoningParams::new(vec![Array2::eye(2)], array![1.0, 0.0], 0.0).unwrap();
        assert!(node_scores(&array![[1.0, 2.0, 3.0]], &params).is_err());
    }

    #[test]
    fn head_examples() {
        let xl = array![[1.0, -2.0], [0.5, 3.0]];
        let zero = ReasoningParams::new(vec![Array2::eye(2)], array![0.0, 0.0], 0.0).unwrap();
        assert!(node_scores(&xl, &zero)
            .unwrap()
            .values()
            .iter()
            .all(|&s| s == 0.5));

        let high = ReasoningParams::new(vec![Array2::eye(2)], array![0.0, 0.0], 20.0).unwrap();
        for &s in node_scores(&xl, &high).unwrap().values() {
            assert!(s > 1.0 - 1e-8 && s < 1.0);
        }

        let ln3 = ReasoningParams::new(vec![Array2::eye(2)], array![0.0, 0.0], 3f64.ln()).unwrap();
        for &s in node_scores(&xl, &ln3).unwrap().values() {
            assert!((s - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_near_identity_with_zero_head() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = ReasoningParams::<f64>::init(4, 2, &mut rng);
        assert_eq!(p.layers.len(), 2);
        for w in &p.layers {
            let dev = w - &Array2::<f64>::eye(4);
            assert!(dev.iter().all(|v| v.abs() < 0.01));
        }
        assert!(p.head_weight.iter().all(|&v| v == 0.0));
    }
}
