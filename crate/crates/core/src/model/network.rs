//! Forward and reverse-mode passes of the single-scale network:
//! projection, residual GCN blocks, gated attention pooling, class-token
//! fusion and a two-logit head. Every backward rule is written out by hand.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::graph::SlideGraph;
use crate::types::{CancerType, TmbLabel};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOutput {
    pub logits: [f64; 2],
    pub prob_tmb_high: f64,
    pub attention: Vec<f64>,
    pub pooled: Array1<f64>,
}

/// `out_i = (h_i + mean_{j in Nb(i)} h_j) / 2`, or `h_i` for isolated nodes.
pub fn aggregate(h: ArrayView2<f64>, neighbors: &[Vec<u32>]) -> Array2<f64> {
    let mut out = Array2::zeros(h.raw_dim());
    for (i, nb) in neighbors.iter().enumerate() {
        let mut row = out.row_mut(i);
        if nb.is_empty() {
            row.assign(&h.row(i));
            continue;
        }
        let w = 0.5 / nb.len() as f64;
        row.scaled_add(0.5, &h.row(i));
        for &j in nb {
            row.scaled_add(w, &h.row(j as usize));
        }
    }
    out
}

/// Adjoint of [`aggregate`].
fn aggregate_transpose(d_out: ArrayView2<f64>, neighbors: &[Vec<u32>]) -> Array2<f64> {
    let mut d_in = Array2::zeros(d_out.raw_dim());
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            let r = d_out.row(i).to_owned();
            d_in.row_mut(i).scaled_add(1.0, &r);
            continue;
        }
        let w = 0.5 / nb.len() as f64;
        d_in.row_mut(i).scaled_add(0.5, &d_out.row(i));
        for &j in nb {
            d_in.row_mut(j as usize).scaled_add(w, &d_out.row(i));
        }
    }
    d_in
}

/// GraphConv: `aggregate(h) . weight + bias`.
pub fn graph_conv(h: ArrayView2<f64>, graph: &SlideGraph, weight: ArrayView2<f64>, bias: ArrayView1<f64>) -> Array2<f64> {
    aggregate(h, graph.symmetric_neighbors()).dot(&weight) + &bias
}

struct NormOutput {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    y: Array2<f64>,
}

fn layer_norm(h: ArrayView2<f64>, scale: ArrayView1<f64>, shift: ArrayView1<f64>) -> NormOutput {
    let e = h.ncols() as f64;
    let mut xhat = Array2::zeros(h.raw_dim());
    let mut inv_std = Vec::with_capacity(h.nrows());
    for (i, row) in h.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / e;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
    }
    let y = &xhat * &scale + &shift;
    NormOutput { xhat, inv_std, y }
}

/// One pre-activation residual block: `h + graph_conv(relu(layer_norm(h)))`.
pub fn deepgcn_block(h: ArrayView2<f64>, graph: &SlideGraph, block: &super::GcnBlock) -> Array2<f64> {
    let norm = layer_norm(h, block.norm_scale.view(), block.norm_shift.view());
    let act = norm.y.mapv(|v| v.max(0.0));
    let branch = graph_conv(act.view(), graph, block.conv_weight.view(), block.conv_bias.view());
    &h + &branch
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

struct AttentionCache {
    tanh: Array2<f64>,
    gate: Array2<f64>,
}

/// Gated attention pooling: `a_i = v . (tanh(g_i W) * sigmoid(g_i U))`,
/// `alpha = softmax(a)`, `V = sum_i alpha_i g_i`.
pub fn attention_pool(g: ArrayView2<f64>, params: &ModelParams) -> (Array1<f64>, Vec<f64>) {
    let (v, alpha, _) = attention_pool_cached(g, params);
    (v, alpha)
}

fn attention_pool_cached(g: ArrayView2<f64>, params: &ModelParams) -> (Array1<f64>, Vec<f64>, AttentionCache) {
    let tanh = g.dot(&params.attn_w).mapv(f64::tanh);
    let gate = g.dot(&params.attn_u).mapv(sigmoid);
    let scores = (&tanh * &gate).dot(&params.attn_v);
    let alpha = softmax(scores.as_slice().expect("contiguous"));
    let pooled = ArrayView1::from(&alpha).dot(&g);
    (pooled, alpha, AttentionCache { tanh, gate })
}

/// Class feature `c = onehot(type) . class_weight + class_bias`.
pub fn class_feature(params: &ModelParams, cancer_type: CancerType) -> Array1<f64> {
    &params.class_weight.row(cancer_type.index()) + &params.class_bias
}

/// `logits = concat(pooled, c) . head_weight + head_bias`.
pub fn fuse_and_classify(pooled: ArrayView1<f64>, cancer_type: CancerType, params: &ModelParams) -> Result<[f64; 2]> {
    let e = params.class_weight.ncols();
    if pooled.len() != e {
        return Err(Error::invalid(format!("pooled vector has {} entries, head expects {e}", pooled.len())));
    }
    let c = class_feature(params, cancer_type);
    let hw = &params.head_weight;
    let out = pooled.dot(&hw.slice(s![..e, ..])) + c.dot(&hw.slice(s![e.., ..])) + &params.head_bias;
    Ok([out[0], out[1]])
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

/// `-ln softmax(logits)[label]`, computed stably.
pub fn cross_entropy(logits: [f64; 2], label: TmbLabel) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label.class_index()]
}

struct BlockCache {
    norm: NormOutput,
    aggregated: Array2<f64>,
}

struct Trace {
    blocks: Vec<BlockCache>,
    g: Array2<f64>,
    attn: AttentionCache,
    alpha: Vec<f64>,
    pooled: Array1<f64>,
    class_feat: Array1<f64>,
    logits: [f64; 2],
}

fn check_input(graph: &SlideGraph, params: &ModelParams) -> Result<()> {
    if graph.bag.dim() != params.proj_weight.nrows() {
        return Err(Error::invalid(format!(
            "bag {} has D={}, model expects {}",
            graph.bag.slide_id,
            graph.bag.dim(),
            params.proj_weight.nrows()
        )));
    }
    Ok(())
}

fn run_forward(graph: &SlideGraph, params: &ModelParams) -> Result<Trace> {
    check_input(graph, params)?;
    let x = graph.bag.features.view();
    let mut h = x.dot(&params.proj_weight) + &params.proj_bias;
    let nb = graph.symmetric_neighbors();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let norm = layer_norm(h.view(), block.norm_scale.view(), block.norm_shift.view());
        let act = norm.y.mapv(|v| v.max(0.0));
        let aggregated = aggregate(act.view(), nb);
        let next = &h + &(aggregated.dot(&block.conv_weight) + &block.conv_bias);
        caches.push(BlockCache {
            norm,
            aggregated,
        });
        h = next;
    }
    let (pooled, alpha, attn) = attention_pool_cached(h.view(), params);
    let class_feat = class_feature(params, graph.bag.cancer_type);
    let logits = fuse_and_classify(pooled.view(), graph.bag.cancer_type, params)?;
    Ok(Trace {
        blocks: caches,
        g: h,
        attn,
        alpha,
        pooled,
        class_feat,
        logits,
    })
}

/// Full forward pass for one slide at one magnification.
pub fn forward_single_scale(graph: &SlideGraph, params: &ModelParams) -> Result<ScaleOutput> {
    let t = run_forward(graph, params)?;
    Ok(ScaleOutput {
        logits: t.logits,
        prob_tmb_high: softmax2(t.logits)[1],
        attention: t.alpha,
        pooled: t.pooled,
    })
}

/// TMB-H probability of the head applied to each node's graph feature
/// instead of the pooled vector.
pub fn tile_probabilities(graph: &SlideGraph, params: &ModelParams) -> Result<Vec<f64>> {
    let t = run_forward(graph, params)?;
    let e = params.class_weight.ncols();
    let hw = &params.head_weight;
    let class_part = t.class_feat.dot(&hw.slice(s![e.., ..])) + &params.head_bias;
    let node_logits = t.g.dot(&hw.slice(s![..e, ..])) + &class_part;
    Ok(node_logits
        .axis_iter(Axis(0))
        .map(|r| softmax2([r[0], r[1]])[1])
        .collect())
}

/// Loss and gradients of one slide.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grads: ModelParams,
    pub output: ScaleOutput,
}

/// Exact gradient of `class_weight * cross_entropy(logits, label)` with
/// respect to every parameter tensor.
pub fn backward_single_scale(
    graph: &SlideGraph,
    params: &ModelParams,
    label: TmbLabel,
    class_weight: f64,
) -> Result<Backward> {
    let t = run_forward(graph, params)?;
    let probs = softmax2(t.logits);
    let loss = class_weight * cross_entropy(t.logits, label);
    let y = label.class_index();
    let d_logits = Array1::from_vec(vec![
        class_weight * (probs[0] - if y == 0 { 1.0 } else { 0.0 }),
        class_weight * (probs[1] - if y == 1 { 1.0 } else { 0.0 }),
    ]);

    let mut grads = params.zeros_like();
    let e = params.class_weight.ncols();

    // head
    let mut fused = Array1::zeros(2 * e);
    fused.slice_mut(s![..e]).assign(&t.pooled);
    fused.slice_mut(s![e..]).assign(&t.class_feat);
    for i in 0..2 * e {
        for k in 0..2 {
            grads.head_weight[[i, k]] = fused[i] * d_logits[k];
        }
    }
    grads.head_bias.assign(&d_logits);
    let d_fused = params.head_weight.dot(&d_logits);
    let d_pooled = d_fused.slice(s![..e]).to_owned();
    let d_class = d_fused.slice(s![e..]);

    // class token: only the active one-hot row receives gradient
    grads.class_weight.row_mut(graph.bag.cancer_type.index()).assign(&d_class);
    grads.class_bias.assign(&d_class);

    // attention pooling
    let g = &t.g;
    let mut d_g = Array2::zeros(g.raw_dim());
    let d_alpha: Vec<f64> = g.axis_iter(Axis(0)).map(|row| row.dot(&d_pooled)).collect();
    for (i, &a) in t.alpha.iter().enumerate() {
        d_g.row_mut(i).scaled_add(a, &d_pooled);
    }
    let mean_d: f64 = t.alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
    let d_scores: Array1<f64> = t.alpha.iter().zip(&d_alpha).map(|(a, d)| a * (d - mean_d)).collect();

    let gated = &t.attn.tanh * &t.attn.gate;
    grads.attn_v = gated.t().dot(&d_scores);
    let d_scores_col = d_scores.view().insert_axis(Axis(1));
    let d_gated = &d_scores_col * &params.attn_v.view().insert_axis(Axis(0));
    let d_tanh_pre = &d_gated * &t.attn.gate * &t.attn.tanh.mapv(|v| 1.0 - v * v);
    let d_gate_pre = &d_gated * &t.attn.tanh * &t.attn.gate.mapv(|v| v * (1.0 - v));
    grads.attn_w = g.t().dot(&d_tanh_pre);
    grads.attn_u = g.t().dot(&d_gate_pre);
    d_g += &d_tanh_pre.dot(&params.attn_w.t());
    d_g += &d_gate_pre.dot(&params.attn_u.t());

    // residual blocks, last to first
    let nb = graph.symmetric_neighbors();
    let mut d_h = d_g;
    for (b, cache) in t.blocks.iter().enumerate().rev() {
        let block = &params.blocks[b];
        let gb = &mut grads.blocks[b];
        gb.conv_weight = cache.aggregated.t().dot(&d_h);
        gb.conv_bias = d_h.sum_axis(Axis(0));
        let d_agg = d_h.dot(&block.conv_weight.t());
        let d_act = aggregate_transpose(d_agg.view(), nb);
        let d_y = ndarray::Zip::from(&d_act)
            .and(&cache.norm.y)
            .map_collect(|&d, &y| if y > 0.0 { d } else { 0.0 });
        gb.norm_scale = (&d_y * &cache.norm.xhat).sum_axis(Axis(0));
        gb.norm_shift = d_y.sum_axis(Axis(0));
        let d_xhat = &d_y * &block.norm_scale;
        let width = e as f64;
        for (i, &is) in cache.norm.inv_std.iter().enumerate() {
            let dx = d_xhat.row(i);
            let xh = cache.norm.xhat.row(i);
            let mean_dx = dx.sum() / width;
            let mean_dx_xh = dx.dot(&xh) / width;
            let mut row = d_h.row_mut(i);
            // residual path keeps the incoming gradient; add the norm branch
            ndarray::Zip::from(&mut row)
                .and(&dx)
                .and(&xh)
                .for_each(|r, &d, &x| *r += is * (d - mean_dx - x * mean_dx_xh));
        }
    }

    // projection
    grads.proj_weight = graph.bag.features.t().dot(&d_h);
    grads.proj_bias = d_h.sum_axis(Axis(0));

    Ok(Backward {
        loss,
        grads,
        output: ScaleOutput {
            logits: t.logits,
            prob_tmb_high: probs[1],
            attention: t.alpha,
            pooled: t.pooled,
        },
    })
}
