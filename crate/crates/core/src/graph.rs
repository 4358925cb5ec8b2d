//! Label-graph network: node features initialized from word vectors are
//! mixed by a learned, row-normalized adjacency and per-layer transforms,
//! `A(l+1) = LeakyReLU(norm(V) · A(l) · W(l))`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelVocabulary, WordVectors};
use crate::nn::{leaky_relu, leaky_relu_grad, slice_of, slice_of_mut, Parameters};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub layers: usize,
    pub negative_slope: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            layers: 2,
            negative_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    /// Initial node features `A(0)`, one row per category.
    pub nodes: Array2<f64>,
    /// Unconstrained adjacency logits `V`.
    pub adjacency: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
    pub negative_slope: f64,
}

/// Per-category contextualized embeddings, one row per category.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbeddingTable(pub Array2<f64>);

impl ContextEmbeddingTable {
    pub fn categories(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn embedding(&self, category: usize) -> ArrayView1<'_, f64> {
        self.0.row(category)
    }
}

/// Averages the word vectors of each whitespace-separated token of every name.
pub fn embed_names(vocab: &LabelVocabulary, source: &WordVectors) -> Result<Array2<f64>> {
    let mut nodes = Array2::zeros((vocab.len(), source.dim()));
    for (c, name) in vocab.names().iter().enumerate() {
        let tokens: Vec<&str> = name.split_whitespace().collect();
        let mut row = nodes.row_mut(c);
        for token in &tokens {
            let v = source.get(token).ok_or_else(|| Error::MissingToken {
                token: (*token).to_owned(),
                category: name.clone(),
            })?;
            row += &ArrayView1::from(v);
        }
        row /= tokens.len() as f64;
    }
    Ok(nodes)
}

pub fn init_graph(
    vocab: &LabelVocabulary,
    source: &WordVectors,
    config: &GraphConfig,
    seed: u64,
) -> Result<GraphState> {
    let nodes = embed_names(vocab, source)?;
    let (c, dim) = nodes.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adjacency = Array2::from_shape_simple_fn((c, c), || rng.random::<f64>());
    let bound = 1.0 / (dim as f64).sqrt();
    let weights = (0..config.layers)
        .map(|_| Array2::from_shape_simple_fn((dim, dim), || rng.random_range(-bound..bound)))
        .collect();
    Ok(GraphState {
        nodes,
        adjacency,
        weights,
        negative_slope: config.negative_slope,
    })
}

/// Row-wise softmax of the adjacency logits.
pub fn normalize_adjacency(v: ArrayView2<f64>) -> Result<Array2<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("adjacency"));
    }
    let mut out = v.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(out)
}

impl GraphState {
    pub fn categories(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        GraphState {
            nodes: Array2::zeros(self.nodes.raw_dim()),
            adjacency: Array2::zeros(self.adjacency.raw_dim()),
            weights: self
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            negative_slope: self.negative_slope,
        }
    }

    fn validate(&self) -> Result<()> {
        let (c, d) = self.nodes.dim();
        if self.adjacency.dim() != (c, c) {
            return Err(Error::shape(
                "graph adjacency",
                format!("{c}x{c}"),
                format!("{:?}", self.adjacency.dim()),
            ));
        }
        for w in &self.weights {
            if w.dim() != (d, d) {
                return Err(Error::shape(
                    "graph layer weight",
                    format!("{d}x{d}"),
                    format!("{:?}", w.dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn forward(&self) -> Result<ContextEmbeddingTable> {
        Ok(self.forward_traced()?.output())
    }

    pub fn forward_traced(&self) -> Result<GraphTrace> {
        self.validate()?;
        let normalized = normalize_adjacency(self.adjacency.view())?;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut mixed = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut a = self.nodes.clone();
        for w in &self.weights {
            let m = normalized.dot(&a);
            let z = m.dot(w);
            let next = z.mapv(|x| leaky_relu(x, self.negative_slope));
            inputs.push(a);
            mixed.push(m);
            pre.push(z);
            a = next;
        }
        Ok(GraphTrace {
            normalized,
            inputs,
            mixed,
            pre,
            output: a,
        })
    }

    /// Backpropagates `dL/dA(L)` through the stack, accumulating into `grads`.
    pub fn backward(&self, trace: &GraphTrace, grad_output: ArrayView2<f64>, grads: &mut GraphState) {
        let slope = self.negative_slope;
        let mut grad_a = grad_output.to_owned();
        let mut grad_norm = Array2::<f64>::zeros(trace.normalized.raw_dim());
        for l in (0..self.weights.len()).rev() {
            let mut grad_z = grad_a;
            grad_z.zip_mut_with(&trace.pre[l], |g, &z| *g *= leaky_relu_grad(z, slope));
            grads.weights[l] += &trace.mixed[l].t().dot(&grad_z);
            let grad_m = grad_z.dot(&self.weights[l].t());
            grad_norm += &grad_m.dot(&trace.inputs[l].t());
            grad_a = trace.normalized.t().dot(&grad_m);
        }
        grads.nodes += &grad_a;

        // softmax rows: dV_ij = P_ij (dP_ij - sum_k dP_ik P_ik)
        for ((p, gp), mut gv) in trace
            .normalized
            .outer_iter()
            .zip(grad_norm.outer_iter())
            .zip(grads.adjacency.outer_iter_mut())
        {
            let inner: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
            for ((g, &pij), &gpij) in gv.iter_mut().zip(p).zip(gp) {
                *g += pij * (gpij - inner);
            }
        }
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    pub normalized: Array2<f64>,
    inputs: Vec<Array2<f64>>,
    mixed: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl GraphTrace {
    pub fn output(&self) -> ContextEmbeddingTable {
        ContextEmbeddingTable(self.output.clone())
    }
}

pub fn gcn_forward(state: &GraphState) -> Result<ContextEmbeddingTable> {
    state.forward()
}

impl Parameters for GraphState {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![
            ("nodes".to_owned(), slice_of(&self.nodes)),
            ("adjacency".to_owned(), slice_of(&self.adjacency)),
        ];
        for (l, w) in self.weights.iter().enumerate() {
            out.push((format!("weight{l}"), slice_of(w)));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![
            ("nodes".to_owned(), slice_of_mut(&mut self.nodes)),
            ("adjacency".to_owned(), slice_of_mut(&mut self.adjacency)),
        ];
        for (l, w) in self.weights.iter_mut().enumerate() {
            out.push((format!("weight{l}"), slice_of_mut(w)));
        }
        out
    }
}

/// Row sums of a matrix, handy for checking stochastic rows.
pub fn row_sums(m: ArrayView2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab(names: &[&str]) -> LabelVocabulary {
        LabelVocabulary::new(names.iter().copied()).unwrap()
    }

    #[test]
    fn zero_vectors_give_zero_nodes() {
        let mut wv = WordVectors::new(3);
        wv.insert("a", vec![0.0; 3]).unwrap();
        wv.insert("b", vec![0.0; 3]).unwrap();
        let g = init_graph(&vocab(&["a", "b"]), &wv, &GraphConfig::default(), 1).unwrap();
        assert!(g.nodes.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn multi_token_names_average_their_vectors() {
        let mut wv = WordVectors::new(2);
        wv.insert("traffic", vec![1.0, 4.0]).unwrap();
        wv.insert("light", vec![3.0, -2.0]).unwrap();
        wv.insert("car", vec![0.5, 0.5]).unwrap();
        let nodes = embed_names(&vocab(&["traffic light", "car"]), &wv).unwrap();
        assert_eq!(nodes.row(0).to_vec(), vec![2.0, 1.0]);
        assert_eq!(nodes.row(1).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn missing_token_is_a_hard_error() {
        let mut wv = WordVectors::new(2);
        wv.insert("traffic", vec![1.0, 4.0]).unwrap();
        wv.insert("car", vec![0.5, 0.5]).unwrap();
        let err = embed_names(&vocab(&["traffic light", "car"]), &wv).unwrap_err();
        match err {
            Error::MissingToken { token, .. } => assert_eq!(token, "light"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn seeded_init_is_bit_exact() {
        let mut wv = WordVectors::new(2);
        wv.insert("a", vec![1.0, 0.0]).unwrap();
        wv.insert("b", vec![0.0, 1.0]).unwrap();
        let v = vocab(&["a", "b"]);
        let g1 = init_graph(&v, &wv, &GraphConfig::default(), 42).unwrap();
        let g2 = init_graph(&v, &wv, &GraphConfig::default(), 42).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.adjacency.iter().all(|&x| (0.0..1.0).contains(&x)));
        let g3 = init_graph(&v, &wv, &GraphConfig::default(), 43).unwrap();
        assert_ne!(g1.adjacency, g3.adjacency);
    }

    #[test]
    fn zero_adjacency_normalizes_to_uniform() {
        let n = normalize_adjacency(Array2::zeros((4, 4)).view()).unwrap();
        assert!(n.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn saturated_diagonal_is_near_identity() {
        let v = Array2::from_diag(&Array1::from_elem(3, 60.0));
        let n = normalize_adjacency(v.view()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((n[[i, j]] - want).abs() < 1e-20 + 1e-12);
            }
        }
    }

    #[test]
    fn softmax_matches_exponent_sum_oracle() {
        let v = array![[0.3, -1.2, 2.0], [0.0, 0.5, 0.25], [-3.0, 4.0, 1.0]];
        let n = normalize_adjacency(v.view()).unwrap();
        for i in 0..3 {
            let denom: f64 = (0..3).map(|k| f64::exp(v[[i, k]])).sum();
            for j in 0..3 {
                assert!((n[[i, j]] - f64::exp(v[[i, j]]) / denom).abs() < 1e-9);
            }
        }
        for s in row_sums(n.view()) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_adjacency_is_rejected() {
        let v = array![[0.0, f64::NAN], [0.0, 0.0]];
        assert!(normalize_adjacency(v.view()).is_err());
    }

    #[test]
    fn identity_propagation_applies_the_slope() {
        let state = GraphState {
            nodes: array![[1.0, -1.0], [0.0, 0.0]],
            adjacency: array![[80.0, 0.0], [0.0, 80.0]],
            weights: vec![Array2::eye(2)],
            negative_slope: 0.2,
        };
        let out = state.forward().unwrap();
        assert!((out.0[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((out.0[[0, 1]] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let state = GraphState {
            nodes: Array2::zeros((2, 3)),
            adjacency: Array2::zeros((2, 2)),
            weights: vec![Array2::eye(2)],
            negative_slope: 0.2,
        };
        assert!(matches!(state.forward(), Err(Error::Shape { .. })));
    }
}
