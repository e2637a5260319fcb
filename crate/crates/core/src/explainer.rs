//! Edge-mask explainer for the graph policy.
//!
//! A per-edge mask `sigmoid(m)` multiplies the edge weights of the state
//! graph. It is optimised so the masked policy keeps its greedy action while
//! as few edges as possible keep any weight. Self-loops are never masked.
//! Edges that cannot reach the target node's output within the GCN's two
//! propagation steps carry no information about the decision; they are left
//! out of the optimisation and reported with importance 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gcn_backward, gcn_forward, Edge, GcnParams, StateGraph, GCN_LAYERS};
use crate::nncore::{argmax, log_softmax_at, sigmoid, softmax};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub iterations: usize,
    pub mask_lr: f64,
    pub sparsity_weight: f64,
    pub entropy_weight: f64,
    pub init_raw_mask: f64,
    pub zero_threshold: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            iterations: 300,
            mask_lr: 0.05,
            sparsity_weight: 0.05,
            entropy_weight: 0.01,
            init_raw_mask: 5.0,
            zero_threshold: 0.01,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_lr > 0.0) {
            return Err(Error::Config("explain.mask_lr must be > 0".into()));
        }
        if !(self.sparsity_weight >= 0.0) || !(self.entropy_weight >= 0.0) {
            return Err(Error::Config("explain regulariser weights must be >= 0".into()));
        }
        if !self.init_raw_mask.is_finite() {
            return Err(Error::Config("explain.init_raw_mask must be finite".into()));
        }
        if !(self.zero_threshold > 0.0 && self.zero_threshold < 1.0) {
            return Err(Error::Config("explain.zero_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-edge mask in the graph's canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    edges: Vec<Edge>,
    raw_mask: Vec<f64>,
    importance: Vec<f64>,
    optimized: Vec<bool>,
}

impl EdgeMask {
    /// Mask with every non-self-loop edge at `init`; self-loops get `+inf`.
    pub fn initial(graph: &StateGraph, init: f64) -> EdgeMask {
        let raw = (0..graph.edges().len())
            .map(|i| if graph.is_self_loop(i) { f64::INFINITY } else { init })
            .collect();
        let optimized = (0..graph.edges().len()).map(|i| !graph.is_self_loop(i)).collect();
        EdgeMask::build(graph.edges().to_vec(), raw, optimized)
    }

    /// Mask from explicit raw values for the non-self-loop edges. Self-loop
    /// entries of `raw` are ignored.
    pub fn from_raw(graph: &StateGraph, raw: &[f64]) -> Result<EdgeMask> {
        if raw.len() != graph.edges().len() {
            return Err(Error::shape("edge mask", format!("{} values", raw.len()), format!("{} edges", graph.edges().len())));
        }
        let mut mask = EdgeMask::initial(graph, 0.0);
        for (i, &r) in raw.iter().enumerate() {
            if !graph.is_self_loop(i) {
                mask.raw_mask[i] = r;
                mask.importance[i] = sigmoid(r);
            }
        }
        Ok(mask)
    }

    fn build(edges: Vec<Edge>, raw_mask: Vec<f64>, optimized: Vec<bool>) -> EdgeMask {
        let importance = raw_mask.iter().map(|&r| sigmoid(r)).collect();
        EdgeMask {
            edges,
            raw_mask,
            importance,
            optimized,
        }
    }

    fn set_raw(&mut self, i: usize, r: f64) {
        self.raw_mask[i] = r;
        self.importance[i] = sigmoid(r);
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn raw_mask(&self) -> &[f64] {
        &self.raw_mask
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    /// Whether edge `i` is part of the explanation (masked, not a self-loop,
    /// inside the receptive field).
    pub fn is_explained(&self, i: usize) -> bool {
        self.optimized[i]
    }

    /// Importances of the explained edges, in canonical order.
    pub fn explained_importances(&self) -> Vec<f64> {
        (0..self.edges.len())
            .filter(|&i| self.optimized[i])
            .map(|i| self.importance[i])
            .collect()
    }

    fn weights(&self) -> &[f64] {
        &self.importance
    }
}

/// Logits of the policy with edge weights taken from `mask`.
pub fn masked_logits(params: &GcnParams, graph: &StateGraph, mask: &EdgeMask) -> Result<Vec<f64>> {
    check_mask(graph, mask)?;
    Ok(gcn_forward(graph, params, Some(mask.weights()))?.0)
}

fn check_mask(graph: &StateGraph, mask: &EdgeMask) -> Result<()> {
    if mask.edges() != graph.edges() {
        return Err(Error::Contract("edge mask does not belong to this graph".into()));
    }
    Ok(())
}

/// Whether the masked policy's greedy action equals the unmasked one.
pub fn preserves_prediction(params: &GcnParams, graph: &StateGraph, mask: &EdgeMask) -> Result<bool> {
    let (plain, _) = gcn_forward(graph, params, None)?;
    let masked = masked_logits(params, graph, mask)?;
    Ok(argmax(&plain) == argmax(&masked))
}

/// Explainer loss for a given mask: `-ln p(a*) + λ₁ Σ s + λ₂ Σ H(s)` over the
/// explained edges.
pub fn explain_loss(params: &GcnParams, graph: &StateGraph, mask: &EdgeMask, target_action: usize, cfg: &ExplainConfig) -> Result<f64> {
    let logits = masked_logits(params, graph, mask)?;
    let mut loss = -log_softmax_at(&logits, target_action);
    for (i, &s) in mask.importance.iter().enumerate() {
        if mask.optimized[i] {
            loss += cfg.sparsity_weight * s + cfg.entropy_weight * binary_entropy(s);
        }
    }
    Ok(loss)
}

fn binary_entropy(q: f64) -> f64 {
    let term = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    term(q) + term(1.0 - q)
}

/// Optimises the edge mask that explains the greedy decision of `params` on `graph`.
pub fn explain(params: &GcnParams, graph: &StateGraph, cfg: &ExplainConfig) -> Result<EdgeMask> {
    explain_observed(params, graph, cfg, |_, _| {})
}

/// Like [`explain`], calling `observe(iteration, mask)` after each update.
pub fn explain_observed(
    params: &GcnParams,
    graph: &StateGraph,
    cfg: &ExplainConfig,
    mut observe: impl FnMut(usize, &EdgeMask),
) -> Result<EdgeMask> {
    cfg.validate()?;
    params.validate()?;
    if params.feature_dim() != graph.feature_dim() {
        return Err(Error::shape(
            "explain",
            format!("{} graph features", graph.feature_dim()),
            format!("{} policy inputs", params.feature_dim()),
        ));
    }
    let mut mask = EdgeMask::initial(graph, cfg.init_raw_mask);
    if cfg.iterations == 0 {
        return Ok(mask);
    }
    let (plain, _) = gcn_forward(graph, params, None)?;
    let target_action = argmax(&plain);

    let field = graph.receptive_edges(GCN_LAYERS);
    for (i, &inside) in field.iter().enumerate() {
        if mask.optimized[i] && !inside {
            mask.optimized[i] = false;
            mask.set_raw(i, f64::NEG_INFINITY);
        }
    }

    let n = mask.edges.len();
    let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
    for it in 1..=cfg.iterations {
        let (logits, cache) = gcn_forward(graph, params, Some(mask.weights()))?;
        let mut dlogits = softmax(&logits)?;
        dlogits[target_action] -= 1.0;
        let (_, dweights) = gcn_backward(params, &cache, &dlogits)?;
        let t = it as i32;
        for i in 0..n {
            if !mask.optimized[i] {
                continue;
            }
            let m = mask.raw_mask[i];
            let s = mask.importance[i];
            let ds = s * (1.0 - s);
            // d/dm [λ₁ s + λ₂ H(s)] = s'(λ₁ - λ₂ m), since dH/ds = -m
            let g = ds * dweights[i] + ds * (cfg.sparsity_weight - cfg.entropy_weight * m);
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite mask gradient on edge {i} at iteration {it}")));
            }
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * g;
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = m1[i] / (1.0 - ADAM_BETA1.powi(t));
            let vh = m2[i] / (1.0 - ADAM_BETA2.powi(t));
            mask.set_raw(i, m - cfg.mask_lr * mh / (vh.sqrt() + ADAM_EPS));
        }
        observe(it, &mask);
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceEntry {
    pub edge: Edge,
    pub importance: f64,
    pub is_active: bool,
}

/// Explained edges with importance rounded to 4 decimals, most important
/// first; ties keep canonical edge order.
pub fn importance_report(mask: &EdgeMask, zero_threshold: f64) -> Vec<ImportanceEntry> {
    let mut rows: Vec<ImportanceEntry> = (0..mask.edges.len())
        .filter(|&i| mask.optimized[i])
        .map(|i| {
            let importance = (mask.importance[i] * 1e4).round() / 1e4;
            ImportanceEntry {
                edge: mask.edges[i],
                importance,
                is_active: importance >= zero_threshold,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.importance.total_cmp(&a.importance));
    rows
}

/// Explains the same probe graph under each checkpoint's parameters.
pub fn explain_timeline(checkpoints: &[&GcnParams], graph: &StateGraph, cfg: &ExplainConfig) -> Result<Vec<EdgeMask>> {
    checkpoints.par_iter().map(|p| explain(p, graph, cfg)).collect()
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64
}
