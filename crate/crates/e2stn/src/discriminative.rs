//! Dynamic-graph Chebyshev convolution classifier.
//!
//! Per sample: an input-dependent nonnegative adjacency matrix per band,
//! a polynomial graph convolution with per-order band-mixing weights, and
//! two FC layers ending in a softmax.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot_uniform, zeros, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DiscriminativeConfig {
    pub channels: usize,
    pub bands: usize,
    /// Chebyshev order K (number of polynomial terms, G^0 .. G^(K-1)).
    pub cheb_order: usize,
    /// Output feature width F of the graph convolution.
    pub graph_features: usize,
    /// First dense layer width.
    pub hidden: usize,
    pub classes: usize,
    /// Row-stochastic normalization of each band graph (off by default;
    /// guards G^k growth on large graphs).
    pub normalize_graph: bool,
}

impl Default for DiscriminativeConfig {
    fn default() -> Self {
        DiscriminativeConfig {
            channels: 62,
            bands: 5,
            cheb_order: 5,
            graph_features: 128,
            hidden: 200,
            classes: 3,
            normalize_graph: false,
        }
    }
}

impl DiscriminativeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("bands", self.bands),
            ("cheb_order", self.cheb_order),
            ("graph_features", self.graph_features),
            ("hidden", self.hidden),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Trainable weights of the classifier head.
#[derive(Debug, Clone)]
pub struct DynGraphParams {
    pub ws: ParamId,
    pub wf: ParamId,
    pub bias: ParamId,
    /// Per-order band-mixing weights Θ_k, each B×F.
    pub theta: Vec<ParamId>,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl DynGraphParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &DiscriminativeConfig,
    ) -> Self {
        let (c, b) = (cfg.channels, cfg.bands);
        let f = cfg.graph_features;
        let theta = (0..cfg.cheb_order)
            .map(|k| {
                store.add(
                    format!("graph.theta.{k}"),
                    glorot_uniform(rng, &[b, f], b, f),
                )
            })
            .collect();
        DynGraphParams {
            ws: store.add("graph.ws", glorot_uniform(rng, &[c, c], c, c)),
            wf: store.add("graph.wf", glorot_uniform(rng, &[b, c * b], b, c * b)),
            bias: store.add("graph.bias", zeros(&[c, b])),
            theta,
            fc1_w: store.add(
                "graph.fc1_w",
                glorot_uniform(rng, &[c * f, cfg.hidden], c * f, cfg.hidden),
            ),
            fc1_b: store.add("graph.fc1_b", zeros(&[cfg.hidden])),
            fc2_w: store.add(
                "graph.fc2_w",
                glorot_uniform(rng, &[cfg.hidden, cfg.classes], cfg.hidden, cfg.classes),
            ),
            fc2_b: store.add("graph.fc2_b", zeros(&[cfg.classes])),
        }
    }
}

/// G = ReLU[(Ws·X + Bias)·Wf], a C×(C·B) matrix holding B band graphs of
/// C×C in consecutive column blocks. Nonnegative by construction and
/// recomputed for every input.
pub fn dynamic_graph<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &DynGraphParams,
    x: Var,
) -> Var {
    let wx = g.matmul(pv.var(params.ws), x);
    let biased = g.add(wx, pv.var(params.bias));
    let mixed = g.matmul(biased, pv.var(params.wf));
    g.relu(mixed)
}

/// H_DG = Σ_{k=0}^{K-1} stack_b(G_b^k · X[:,b]) · Θ_k, with G_b^0 = I.
/// Per-band powers are built iteratively; each order is mixed across bands
/// by its Θ_k into the C×F output.
pub fn cheb_graph_conv<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &DynGraphParams,
    cfg: &DiscriminativeConfig,
    band_graphs: Var,
    x: Var,
) -> Var {
    let (c, b) = (cfg.channels, cfg.bands);
    let mut graphs = Vec::with_capacity(b);
    for bi in 0..b {
        let mut gb = g.cols_slice(band_graphs, bi * c, c);
        if cfg.normalize_graph {
            gb = g.normalize_rows_stochastic(gb);
        }
        graphs.push(gb);
    }
    let mut cur: Vec<Var> = (0..b).map(|bi| g.cols_slice(x, bi, 1)).collect();
    let mut total: Option<Var> = None;
    for k in 0..cfg.cheb_order {
        let stacked = g.concat_cols(&cur);
        let term = g.matmul(stacked, pv.var(params.theta[k]));
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
        if k + 1 < cfg.cheb_order {
            cur = (0..b).map(|bi| g.matmul(graphs[bi], cur[bi])).collect();
        }
    }
    total.expect("cheb_order >= 1")
}

/// probs = softmax(fc2(ReLU(fc1(flatten(H_DG))))).
pub fn classify<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &DynGraphParams,
    cfg: &DiscriminativeConfig,
    h_dg: Var,
) -> Var {
    let flat = g.reshape(h_dg, &[1, cfg.channels * cfg.graph_features]);
    let h = g.matmul(flat, pv.var(params.fc1_w));
    let h = g.add_row_vec(h, pv.var(params.fc1_b));
    let h = g.relu(h);
    let logits = g.matmul(h, pv.var(params.fc2_w));
    let logits = g.add_row_vec(logits, pv.var(params.fc2_b));
    g.softmax_rows(logits)
}

/// Whole classifier path for one sample: dynamic graph, Chebyshev
/// convolution, FC head. Returns (probs, H_DG).
pub fn classify_sample<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &DynGraphParams,
    cfg: &DiscriminativeConfig,
    x: Var,
) -> (Var, Var) {
    let graphs = dynamic_graph(g, pv, params, x);
    let h_dg = cheb_graph_conv(g, pv, params, cfg, graphs, x);
    let probs = classify(g, pv, params, cfg, h_dg);
    (probs, h_dg)
}

/// Argmax with ties broken toward the lowest index.
pub fn predict_label<T: Scalar>(probs: &Tensor<T>) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, &p) in probs.data().iter().enumerate() {
        if p > best_v {
            best_v = p;
            best = i;
        }
    }
    best
}

/// Batched cross-entropy over probability rows: sum (default) or mean of
/// -log p[label]. Returns the loss and the number of clamped probabilities.
pub fn cross_entropy<T: Scalar>(
    probs_batch: &[Tensor<T>],
    labels: &[usize],
    mean: bool,
) -> Result<(T, u64)> {
    if probs_batch.len() != labels.len() {
        return Err(Error::dimension(format!(
            "{} probability rows vs {} labels",
            probs_batch.len(),
            labels.len()
        )));
    }
    let mut g = Graph::new();
    let rows: Vec<Var> = probs_batch.iter().map(|p| {
        let flat = p.reshaped(&[1, p.len()]);
        g.leaf(flat)
    }).collect();
    let stacked = g.concat_rows(&rows);
    let loss = g.neg_log_pick(stacked, labels, mean);
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::numeric("non-finite cross-entropy"));
    }
    Ok((v, g.clamp_events()))
}

/// Pure-forward classification of one C×B sample.
pub fn classify_features<T: Scalar>(
    store: &ParamStore<T>,
    params: &DynGraphParams,
    cfg: &DiscriminativeConfig,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.shape() != [cfg.channels, cfg.bands] {
        return Err(Error::dimension(format!(
            "sample shape {:?} does not match {}x{}",
            x.shape(),
            cfg.channels,
            cfg.bands
        )));
    }
    let mut g = Graph::new();
    let pv = store.leaves(&mut g);
    let xv = g.leaf(x.clone());
    let (probs, h_dg) = classify_sample(&mut g, &pv, params, cfg, xv);
    let p = g.value(probs).clone();
    if !p.all_finite() {
        return Err(Error::numeric(
            "non-finite class probabilities; consider --normalize-graph to bound G^k growth",
        ));
    }
    Ok((p, g.value(h_dg).clone()))
}
