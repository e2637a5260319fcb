//! State graphs and the two-layer graph convolution used by the policy.
//!
//! Each observation in the sliding window is a node. Nodes are linked by
//! self-loops and by a bidirectional temporal chain. Propagation uses the
//! symmetric normalisation `D^-1/2 A D^-1/2`, where `A[dst, src]` holds the
//! edge weight and `D` is the row-sum degree of `A`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{dot, relu, Matrix};
use crate::rng::Rng;

/// Degrees below this are treated as zero: the node's row and column of the
/// normalised adjacency are zeroed and the node is flagged.
pub const DEGREE_EPS: f64 = 1e-12;

/// Number of graph-convolution layers in [`gcn_forward`].
pub const GCN_LAYERS: usize = 2;

pub type Edge = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct StateGraph {
    node_features: Matrix,
    edges: Vec<Edge>,
    target_node: usize,
}

impl StateGraph {
    /// Validates and canonicalises an arbitrary graph. Self-loops are added
    /// for every node; duplicates are removed and edges sorted by (src, dst).
    pub fn new(node_features: Matrix, edges: impl IntoIterator<Item = Edge>, target_node: usize) -> Result<Self> {
        let n = node_features.rows();
        if n == 0 {
            return Err(Error::Contract("state graph needs at least one node".into()));
        }
        if target_node >= n {
            return Err(Error::Contract(format!(
                "target node {target_node} out of range for {n} nodes"
            )));
        }
        let mut all: Vec<Edge> = (0..n).map(|i| (i, i)).collect();
        for (s, d) in edges {
            if s >= n || d >= n {
                return Err(Error::Contract(format!(
                    "edge ({s},{d}) out of range for {n} nodes"
                )));
            }
            all.push((s, d));
        }
        all.sort_unstable();
        all.dedup();
        Ok(StateGraph {
            node_features,
            edges: all,
            target_node,
        })
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn target_node(&self) -> usize {
        self.target_node
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn is_self_loop(&self, edge_index: usize) -> bool {
        let (s, d) = self.edges[edge_index];
        s == d
    }

    /// Edges whose weight can change the target node's output after `layers`
    /// rounds of propagation: exactly those pointing into a node within
    /// `layers` in-hops of the target (their weights enter either a used row
    /// of the adjacency or the degree of a node that row touches).
    pub fn receptive_edges(&self, layers: usize) -> Vec<bool> {
        let n = self.num_nodes();
        let mut in_ball = vec![false; n];
        in_ball[self.target_node] = true;
        for _ in 0..layers {
            let mut next = in_ball.clone();
            for &(s, d) in &self.edges {
                if in_ball[d] {
                    next[s] = true;
                }
            }
            in_ball = next;
        }
        self.edges.iter().map(|&(_, d)| in_ball[d]).collect()
    }

    /// Same graph with node features replaced.
    pub fn with_features(&self, node_features: Matrix) -> Result<Self> {
        if node_features.shape() != self.node_features.shape() {
            return Err(Error::shape(
                "StateGraph::with_features",
                self.node_features.shape_str(),
                node_features.shape_str(),
            ));
        }
        Ok(StateGraph {
            node_features,
            edges: self.edges.clone(),
            target_node: self.target_node,
        })
    }
}

/// One node per observation in temporal order, self-loops plus a
/// bidirectional chain, target = most recent observation.
pub fn build_state_graph<O: AsRef<[f64]>>(window: &[O], window_size: usize) -> Result<StateGraph> {
    if window.is_empty() {
        return Err(Error::Contract("empty observation window".into()));
    }
    if window.len() > window_size {
        return Err(Error::Contract(format!(
            "window holds {} observations, limit is {window_size}",
            window.len()
        )));
    }
    let f = window[0].as_ref().len();
    let mut data = Vec::with_capacity(window.len() * f);
    for (i, obs) in window.iter().enumerate() {
        let obs = obs.as_ref();
        if obs.len() != f {
            return Err(Error::shape(
                "build_state_graph",
                format!("observation 0 has {f} features"),
                format!("observation {i} has {}", obs.len()),
            ));
        }
        data.extend_from_slice(obs);
    }
    let n = window.len();
    let x = Matrix::from_vec(n, f, data)?;
    let chain = (0..n.saturating_sub(1)).flat_map(|i| [(i, i + 1), (i + 1, i)]);
    StateGraph::new(x, chain, n - 1)
}

#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    /// Weighted adjacency `A[dst, src]`.
    pub raw: Matrix,
    /// Row sums of `raw`.
    pub degrees: Vec<f64>,
    /// `d^-1/2`, or 0 for degenerate nodes.
    pub inv_sqrt_degrees: Vec<f64>,
    pub matrix: Matrix,
    /// Nodes whose degree fell below [`DEGREE_EPS`].
    pub degenerate: Vec<usize>,
}

fn check_edge_weights(g: &StateGraph, weights: Option<&[f64]>) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != g.edges.len() {
            return Err(Error::shape(
                "edge weights",
                format!("{} edges", g.edges.len()),
                format!("{} weights", w.len()),
            ));
        }
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "edge weight {i} = {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

pub fn normalized_adjacency(g: &StateGraph, edge_weights: Option<&[f64]>) -> Result<NormalizedAdjacency> {
    check_edge_weights(g, edge_weights)?;
    let n = g.num_nodes();
    let mut raw = Matrix::zeros(n, n);
    for (e, &(s, d)) in g.edges.iter().enumerate() {
        raw[(d, s)] += edge_weights.map_or(1.0, |w| w[e]);
    }
    let degrees: Vec<f64> = (0..n).map(|i| raw.row(i).iter().sum()).collect();
    let mut degenerate = Vec::new();
    let inv_sqrt_degrees: Vec<f64> = degrees
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d < DEGREE_EPS {
                degenerate.push(i);
                0.0
            } else {
                1.0 / d.sqrt()
            }
        })
        .collect();
    let mut matrix = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = raw[(i, j)];
            // a / sqrt(d_i d_j) rather than a product of inverse roots: a lone
            // self-loop then normalises to exactly 1 whatever its weight.
            if a != 0.0 && inv_sqrt_degrees[i] != 0.0 && inv_sqrt_degrees[j] != 0.0 {
                matrix[(i, j)] = a / (degrees[i] * degrees[j]).sqrt();
            }
        }
    }
    Ok(NormalizedAdjacency {
        raw,
        degrees,
        inv_sqrt_degrees,
        matrix,
        degenerate,
    })
}

/// Learnable weights: two graph-convolution layers and a linear policy head
/// applied to the target node's embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w_head: Matrix,
    pub b_head: Vec<f64>,
}

impl GcnParams {
    pub fn zeros(feature_dim: usize, hidden: usize, actions: usize) -> Self {
        GcnParams {
            w1: Matrix::zeros(feature_dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, hidden),
            b2: vec![0.0; hidden],
            w_head: Matrix::zeros(hidden, actions),
            b_head: vec![0.0; actions],
        }
    }

    /// Layer weights uniform in `[-scale, scale]`; head weights and every
    /// bias start at zero, so the initial policy is exactly uniform.
    pub fn init(feature_dim: usize, hidden: usize, actions: usize, scale: f64, rng: &mut Rng) -> Self {
        GcnParams {
            w1: Matrix::uniform(feature_dim, hidden, scale, rng),
            w2: Matrix::uniform(hidden, hidden, scale, rng),
            ..GcnParams::zeros(feature_dim, hidden, actions)
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_actions(&self) -> usize {
        self.w_head.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, h, k) = (self.feature_dim(), self.hidden_dim(), self.num_actions());
        let ok = self.b1.len() == h
            && self.w2.shape() == (h, h)
            && self.b2.len() == h
            && self.w_head.rows() == h
            && self.b_head.len() == k;
        if !ok {
            return Err(Error::Contract(format!(
                "inconsistent GCN parameter shapes (F={f}, H={h}, K={k})"
            )));
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite GCN parameter".into()));
        }
        Ok(())
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.w_head.as_slice(),
            &self.b_head,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.w_head.as_mut_slice(),
            &mut self.b_head,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Overwrites all parameters from a flat vector in [`Self::flatten`] order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "GcnParams::assign_flat",
                format!("{} params", self.num_params()),
                format!("{} values", flat.len()),
            ));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            let len = s.len();
            s.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}

/// Intermediate values from [`gcn_forward`], consumed by [`gcn_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub adjacency: NormalizedAdjacency,
    edges: Vec<Edge>,
    target_node: usize,
    x: Matrix,
    /// `Â X`
    agg0: Matrix,
    z1: Matrix,
    h1: Matrix,
    /// `Â H1`
    agg1: Matrix,
    z2: Matrix,
    h2: Matrix,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    /// Target-node embedding after the second layer.
    pub fn embedding(&self) -> &[f64] {
        self.h2.row(self.target_node)
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

fn check_finite(m: &Matrix, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in {layer}")))
    }
}

fn add_bias_relu(z: &mut Matrix, b: &[f64]) -> Matrix {
    for i in 0..z.rows() {
        for (v, bj) in z.row_mut(i).iter_mut().zip(b) {
            *v += bj;
        }
    }
    z.map(relu)
}

pub fn gcn_forward(g: &StateGraph, params: &GcnParams, edge_weights: Option<&[f64]>) -> Result<(Vec<f64>, ForwardCache)> {
    if g.feature_dim() != params.feature_dim() {
        return Err(Error::shape(
            "gcn_forward",
            format!("graph features F={}", g.feature_dim()),
            format!("params F={}", params.feature_dim()),
        ));
    }
    let adjacency = normalized_adjacency(g, edge_weights)?;
    let a_hat = &adjacency.matrix;
    let x = g.node_features.clone();

    let agg0 = a_hat.matmul(&x)?;
    let mut z1 = agg0.matmul(&params.w1)?;
    let h1 = add_bias_relu(&mut z1, &params.b1);
    check_finite(&h1, "layer 1")?;

    let agg1 = a_hat.matmul(&h1)?;
    let mut z2 = agg1.matmul(&params.w2)?;
    let h2 = add_bias_relu(&mut z2, &params.b2);
    check_finite(&h2, "layer 2")?;

    let emb = h2.row(g.target_node);
    let logits: Vec<f64> = (0..params.num_actions())
        .map(|k| {
            let col: f64 = emb
                .iter()
                .enumerate()
                .map(|(h, e)| e * params.w_head[(h, k)])
                .sum();
            col + params.b_head[k]
        })
        .collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in policy head".into()));
    }

    let cache = ForwardCache {
        adjacency,
        edges: g.edges.clone(),
        target_node: g.target_node,
        x,
        agg0,
        z1,
        h1,
        agg1,
        z2,
        h2,
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

/// Gradients of `logit_grad · logits` with respect to every parameter and
/// every edge weight. Edge gradients flow through the degree normalisation.
pub fn gcn_backward(params: &GcnParams, cache: &ForwardCache, logit_grad: &[f64]) -> Result<(GcnParams, Vec<f64>)> {
    let (f, h, k) = (params.feature_dim(), params.hidden_dim(), params.num_actions());
    if logit_grad.len() != k || cache.logits.len() != k {
        return Err(Error::Contract(format!(
            "logit gradient has {} entries, cache has {}, head has {k}",
            logit_grad.len(),
            cache.logits.len()
        )));
    }
    if cache.x.cols() != f || cache.h1.cols() != h {
        return Err(Error::Contract("forward cache does not match parameters".into()));
    }
    let n = cache.x.rows();
    let t = cache.target_node;
    let a_hat = &cache.adjacency.matrix;
    let mut grads = GcnParams::zeros(f, h, k);

    // Head.
    let emb = cache.h2.row(t);
    for hh in 0..h {
        for kk in 0..k {
            grads.w_head[(hh, kk)] = emb[hh] * logit_grad[kk];
        }
    }
    grads.b_head.copy_from_slice(logit_grad);

    // Layer 2: only the target row receives gradient.
    let mut dz2 = Matrix::zeros(n, h);
    for hh in 0..h {
        if cache.z2[(t, hh)] > 0.0 {
            dz2[(t, hh)] = dot(params.w_head.row(hh), logit_grad);
        }
    }
    grads.b2 = dz2.column_sums();
    grads.w2 = cache.agg1.t_matmul(&dz2)?;
    let dagg1 = dz2.matmul_t(&params.w2)?;
    let mut da_hat = dagg1.matmul_t(&cache.h1)?;
    let dh1 = a_hat.t_matmul(&dagg1)?;

    // Layer 1.
    let mut dz1 = dh1;
    for (d, z) in dz1.as_mut_slice().iter_mut().zip(cache.z1.as_slice()) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    grads.b1 = dz1.column_sums();
    grads.w1 = cache.agg0.t_matmul(&dz1)?;
    let dagg0 = dz1.matmul_t(&params.w1)?;
    da_hat.add_scaled(&dagg0.matmul_t(&cache.x)?, 1.0);

    // Â = S A S with S = diag(d^-1/2), d = row sums of A.
    let adj = &cache.adjacency;
    let s = &adj.inv_sqrt_degrees;
    let mut ds = vec![0.0; n];
    let mut da = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let g = da_hat[(i, j)];
            let a = adj.raw[(i, j)];
            da[(i, j)] = g * s[i] * s[j];
            ds[i] += g * a * s[j];
            ds[j] += g * s[i] * a;
        }
    }
    for i in 0..n {
        if s[i] == 0.0 {
            continue;
        }
        let dd = -0.5 * ds[i] * s[i] * s[i] * s[i];
        for j in 0..n {
            da[(i, j)] += dd;
        }
    }
    let edge_grads = cache.edges.iter().map(|&(src, dst)| da[(dst, src)]).collect();
    Ok((grads, edge_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{finite_diff_check, GRAD_CHECK_EPS};
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn obs(n: usize, f: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..f).map(|j| (i * f + j) as f64 * 0.1).collect()).collect()
    }

    #[test]
    fn singleton_window() {
        let g = build_state_graph(&obs(1, 4), 8).unwrap();
        assert_eq!(g.edges(), &[(0, 0)]);
        assert_eq!(g.target_node(), 0);
    }

    #[test]
    fn three_node_window() {
        let g = build_state_graph(&obs(3, 4), 8).unwrap();
        let mut expected = vec![(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (1, 2), (2, 1)];
        expected.sort();
        assert_eq!(g.edges(), expected.as_slice());
        assert_eq!(g.target_node(), 2);
    }

    #[test]
    fn full_window_edge_count() {
        let g = build_state_graph(&obs(8, 4), 8).unwrap();
        assert_eq!(g.num_nodes(), 8);
        assert_eq!(g.edges().len(), 8 + 2 * 7);
    }

    #[test]
    fn window_errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(build_state_graph(&empty, 8), Err(Error::Contract(_))));
        let ragged = vec![vec![0.0; 4], vec![0.0; 3]];
        assert!(matches!(build_state_graph(&ragged, 8), Err(Error::Shape { .. })));
        assert!(build_state_graph(&obs(9, 4), 8).is_err());
    }

    #[test]
    fn adjacency_singleton() {
        let g = build_state_graph(&obs(1, 2), 8).unwrap();
        let a = normalized_adjacency(&g, None).unwrap();
        assert_eq!(a.matrix.as_slice(), &[1.0]);
    }

    #[test]
    fn adjacency_two_nodes() {
        let g = build_state_graph(&obs(2, 2), 8).unwrap();
        let a = normalized_adjacency(&g, None).unwrap();
        for v in a.matrix.as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacency_three_chain() {
        let g = build_state_graph(&obs(3, 2), 8).unwrap();
        let a = normalized_adjacency(&g, None).unwrap().matrix;
        let off = 1.0 / (6.0f64).sqrt();
        assert!((a[(0, 1)] - off).abs() < 1e-12);
        assert!((a[(1, 0)] - off).abs() < 1e-12);
        assert!((a[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
        assert!((a[(0, 1)] - 0.40825).abs() < 1e-5);
    }

    #[test]
    fn adjacency_degenerate_node_is_flagged() {
        let g = build_state_graph(&obs(2, 2), 8).unwrap();
        // edges: (0,0) (0,1) (1,0) (1,1); node 0 receives (0,0) and (1,0)
        let w = [0.0, 1.0, 0.0, 1.0];
        let a = normalized_adjacency(&g, Some(&w)).unwrap();
        assert_eq!(a.degenerate, vec![0]);
        assert!(a.matrix.row(0).iter().all(|&v| v == 0.0));
        assert!(a.matrix.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adjacency_rejects_bad_weights() {
        let g = build_state_graph(&obs(2, 2), 8).unwrap();
        assert!(normalized_adjacency(&g, Some(&[1.0, 1.0])).is_err());
        assert!(normalized_adjacency(&g, Some(&[1.0, 1.5, 1.0, 1.0])).is_err());
    }

    #[test]
    fn identity_network_passes_features() {
        let g = build_state_graph(&[vec![0.2, 0.7, 0.0, 1.3]], 8).unwrap();
        let p = GcnParams {
            w1: Matrix::identity(4),
            b1: vec![0.0; 4],
            w2: Matrix::identity(4),
            b2: vec![0.0; 4],
            w_head: Matrix::identity(4),
            b_head: vec![0.0; 4],
        };
        let (logits, _) = gcn_forward(&g, &p, None).unwrap();
        assert_eq!(logits, vec![0.2, 0.7, 0.0, 1.3]);
    }

    #[test]
    fn zero_features_give_head_bias() {
        let g = build_state_graph(&vec![vec![0.0; 4]; 5], 8).unwrap();
        let mut rng = Rng::new(1);
        let p = GcnParams::init(4, 8, 6, 0.5, &mut rng);
        let (logits, _) = gcn_forward(&g, &p, None).unwrap();
        assert_eq!(logits, vec![0.0; 6]);
    }

    #[test]
    fn two_node_scalar_example() {
        let g = build_state_graph(&[vec![1.0], vec![3.0]], 8).unwrap();
        let p = GcnParams {
            w1: Matrix::from_rows(&[[1.0]]),
            b1: vec![0.0],
            w2: Matrix::from_rows(&[[1.0]]),
            b2: vec![0.0],
            w_head: Matrix::from_rows(&[[1.0]]),
            b_head: vec![0.0],
        };
        let (logits, cache) = gcn_forward(&g, &p, None).unwrap();
        assert!((cache.h1[(0, 0)] - 2.0).abs() < 1e-9);
        assert!((cache.h1[(1, 0)] - 2.0).abs() < 1e-9);
        assert!((logits[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn unit_weights_match_unweighted_bit_exactly() {
        let mut rng = Rng::new(4);
        let feats: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.next_f64()).collect()).collect();
        let g = build_state_graph(&feats, 8).unwrap();
        let p = random_params(4, 5, 3, &mut rng);
        let ones = vec![1.0; g.edges().len()];
        let (a, _) = gcn_forward(&g, &p, None).unwrap();
        let (b, _) = gcn_forward(&g, &p, Some(&ones)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = Rng::new(8);
        let g = random_graph(5, 4, &mut rng);
        let p = random_params(4, 6, 3, &mut rng);
        let (_, cache) = gcn_forward(&g, &p, None).unwrap();
        let (grads, eg) = gcn_backward(&p, &cache, &[0.0; 3]).unwrap();
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
        assert!(eg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_bias_gradient_passthrough() {
        let g = build_state_graph(&[vec![0.5, 0.5]], 8).unwrap();
        let p = GcnParams {
            w1: Matrix::identity(2),
            b1: vec![0.0; 2],
            w2: Matrix::identity(2),
            b2: vec![0.0; 2],
            w_head: Matrix::identity(2),
            b_head: vec![0.0; 2],
        };
        let (_, cache) = gcn_forward(&g, &p, None).unwrap();
        let (grads, _) = gcn_backward(&p, &cache, &[0.3, -1.2]).unwrap();
        assert_eq!(grads.b_head, vec![0.3, -1.2]);
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let mut rng = Rng::new(8);
        let g = random_graph(3, 4, &mut rng);
        let p = random_params(4, 6, 3, &mut rng);
        let (_, cache) = gcn_forward(&g, &p, None).unwrap();
        assert!(matches!(gcn_backward(&p, &cache, &[0.0; 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn receptive_edges_of_chain() {
        let g = build_state_graph(&obs(8, 2), 8).unwrap();
        let inside: Vec<Edge> = g
            .edges()
            .iter()
            .zip(g.receptive_edges(GCN_LAYERS))
            .filter(|(e, r)| *r && e.0 != e.1)
            .map(|(e, _)| *e)
            .collect();
        assert_eq!(inside, vec![(4, 5), (5, 6), (6, 5), (6, 7), (7, 6)]);
    }

    pub(crate) fn random_params(f: usize, h: usize, k: usize, rng: &mut Rng) -> GcnParams {
        GcnParams {
            w1: Matrix::uniform(f, h, 1.0, rng),
            b1: (0..h).map(|_| rng.uniform(-0.3, 0.3)).collect(),
            w2: Matrix::uniform(h, h, 1.0, rng),
            b2: (0..h).map(|_| rng.uniform(-0.3, 0.3)).collect(),
            w_head: Matrix::uniform(h, k, 1.0, rng),
            b_head: (0..k).map(|_| rng.uniform(-0.3, 0.3)).collect(),
        }
    }

    pub(crate) fn random_graph(n: usize, f: usize, rng: &mut Rng) -> StateGraph {
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..f).map(|_| rng.next_f64()).collect()).collect();
        build_state_graph(&feats, n).unwrap()
    }

    #[test]
    fn edges_outside_receptive_field_have_zero_gradient() {
        let mut rng = Rng::new(10);
        let g = random_graph(8, 4, &mut rng);
        let p = random_params(4, 6, 3, &mut rng);
        let (_, cache) = gcn_forward(&g, &p, None).unwrap();
        let (_, eg) = gcn_backward(&p, &cache, &[1.0, -0.5, 0.2]).unwrap();
        for (gv, inside) in eg.iter().zip(g.receptive_edges(GCN_LAYERS)) {
            if !inside {
                assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(12345);
        for n in 1..=6 {
            let g = random_graph(n, 4, &mut rng);
            let p = random_params(4, 5, 4, &mut rng);
            let upstream: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let weights: Vec<f64> = (0..g.edges().len()).map(|_| rng.uniform(0.2, 0.9)).collect();

            let loss_p = |flat: &[f64]| {
                let mut q = p.clone();
                q.assign_flat(flat).unwrap();
                let (l, _) = gcn_forward(&g, &q, Some(&weights)).unwrap();
                dot(&l, &upstream)
            };
            let grad_p = |flat: &[f64]| {
                let mut q = p.clone();
                q.assign_flat(flat).unwrap();
                let (_, c) = gcn_forward(&g, &q, Some(&weights)).unwrap();
                gcn_backward(&q, &c, &upstream).unwrap().0.flatten()
            };
            let err = finite_diff_check(loss_p, grad_p, &p.flatten(), GRAD_CHECK_EPS).unwrap();
            assert!(err < 1e-4, "params n={n}: {err}");

            let loss_w = |w: &[f64]| {
                let (l, _) = gcn_forward(&g, &p, Some(w)).unwrap();
                dot(&l, &upstream)
            };
            let grad_w = |w: &[f64]| {
                let (_, c) = gcn_forward(&g, &p, Some(w)).unwrap();
                gcn_backward(&p, &c, &upstream).unwrap().1
            };
            let err = finite_diff_check(loss_w, grad_w, &weights, GRAD_CHECK_EPS).unwrap();
            assert!(err < 1e-4, "edges n={n}: {err}");
        }
    }

    fn permute_graph(g: &StateGraph, perm: &[usize]) -> StateGraph {
        // node i moves to perm[i]
        let n = g.num_nodes();
        let f = g.feature_dim();
        let mut x = Matrix::zeros(n, f);
        for i in 0..n {
            x.row_mut(perm[i]).copy_from_slice(g.node_features().row(i));
        }
        let edges = g.edges().iter().map(|&(s, d)| (perm[s], perm[d]));
        StateGraph::new(x, edges, perm[g.target_node()]).unwrap()
    }

    proptest! {
        #[test]
        fn permutation_leaves_logits_unchanged(seed in any::<u64>(), n in 1usize..=7) {
            let mut rng = Rng::new(seed);
            let g = random_graph(n, 4, &mut rng);
            let p = random_params(4, 6, 5, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                perm.swap(i, j);
            }
            let pg = permute_graph(&g, &perm);
            let (a, _) = gcn_forward(&g, &p, None).unwrap();
            let (b, _) = gcn_forward(&pg, &p, None).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn unit_weight_adjacency_is_symmetric(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = Rng::new(seed);
            let g = random_graph(n, 2, &mut rng);
            let a = normalized_adjacency(&g, None).unwrap().matrix;
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((a[(i, j)] - a[(j, i)]).abs() <= 1e-12);
                }
            }
        }
    }
}
