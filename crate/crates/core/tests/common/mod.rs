//! Independent reference implementations used by the integration tests.
//! Everything here is written from the definitions with plain loops and
//! shares no code with the library beyond its data types.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tmb_mil::embedding::FeatureBag;
use tmb_mil::evaluation::SurvivalRecord;
use tmb_mil::graph::{build_knn_graph, SlideGraph};
use tmb_mil::model::{ModelConfig, ModelParams};
use tmb_mil::types::{CancerType, Magnification};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Random bag on a coarse grid (so distance ties occur) with its kNN graph.
pub fn random_graph(r: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> SlideGraph {
    let coords: Vec<[i32; 2]> = (0..n)
        .map(|_| [r.random_range(0..5) * 256, r.random_range(0..5) * 256])
        .collect();
    let features = Array2::from_shape_simple_fn((n, d), || normal(r));
    let ct = CancerType::ALL[r.random_range(0..CancerType::COUNT)];
    let bag = FeatureBag::new("s", "p", ct, Magnification::X20, features, coords).unwrap();
    build_knn_graph(bag, k).unwrap()
}

/// Glorot init followed by Gaussian jitter on every tensor, so biases,
/// norm parameters and class rows are all non-trivial.
pub fn random_params(r: &mut ChaCha8Rng, cfg: &ModelConfig, jitter: f64) -> ModelParams {
    let mut p = ModelParams::init(cfg, r);
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += jitter * normal(r);
        }
    }
    p
}

fn tensor<'a>(p: &'a ModelParams, name: &str) -> (Vec<usize>, &'a [f64]) {
    p.tensors()
        .into_iter()
        .find(|t| t.name == name)
        .map(|t| (t.shape, t.data))
        .unwrap_or_else(|| panic!("no tensor {name}"))
}

/// `x (n x a) . w (a x b)` with `w` row-major.
fn matmul(x: &[Vec<f64>], w: &[f64], a: usize, b: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; b];
            for i in 0..a {
                for j in 0..b {
                    out[j] += row[i] * w[i * b + j];
                }
            }
            out
        })
        .collect()
}

pub struct ScalarOutput {
    pub logits: [f64; 2],
    pub attention: Vec<f64>,
}

/// Straight-line forward pass of one slide.
pub fn scalar_forward(graph: &SlideGraph, p: &ModelParams) -> ScalarOutput {
    let bag = &graph.bag;
    let n = bag.len();
    let d = bag.dim();
    let x: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|j| bag.features[[i, j]]).collect()).collect();

    // undirected neighbor sets from the directed edge list
    let mut nb: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, t) in graph.edges() {
        let (s, t) = (s as usize, t as usize);
        if !nb[s].contains(&t) {
            nb[s].push(t);
        }
        if !nb[t].contains(&s) {
            nb[t].push(s);
        }
    }

    let (ps, pw) = tensor(p, "proj.weight");
    let e = ps[1];
    let (_, pb) = tensor(p, "proj.bias");
    let mut h = matmul(&x, pw, d, e);
    for row in &mut h {
        for j in 0..e {
            row[j] += pb[j];
        }
    }

    let blocks = p.blocks.len();
    for b in 0..blocks {
        let (_, gamma) = tensor(p, &format!("blocks.{b}.norm.scale"));
        let (_, beta) = tensor(p, &format!("blocks.{b}.norm.shift"));
        let (_, cw) = tensor(p, &format!("blocks.{b}.conv.weight"));
        let (_, cb) = tensor(p, &format!("blocks.{b}.conv.bias"));
        let mut act = vec![vec![0.0; e]; n];
        for i in 0..n {
            let mean: f64 = h[i].iter().sum::<f64>() / e as f64;
            let var: f64 = h[i].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let sd = (var + 1e-5).sqrt();
            for j in 0..e {
                let y = gamma[j] * (h[i][j] - mean) / sd + beta[j];
                act[i][j] = if y > 0.0 { y } else { 0.0 };
            }
        }
        let mut agg = vec![vec![0.0; e]; n];
        for i in 0..n {
            for j in 0..e {
                agg[i][j] = if nb[i].is_empty() {
                    act[i][j]
                } else {
                    let m: f64 = nb[i].iter().map(|&q| act[q][j]).sum::<f64>() / nb[i].len() as f64;
                    (act[i][j] + m) / 2.0
                };
            }
        }
        let conv = matmul(&agg, cw, e, e);
        for i in 0..n {
            for j in 0..e {
                h[i][j] += conv[i][j] + cb[j];
            }
        }
    }

    let (us, u) = tensor(p, "attn.u");
    let k = us[1];
    let (_, w) = tensor(p, "attn.w");
    let (_, v) = tensor(p, "attn.v");
    let tu = matmul(&h, u, e, k);
    let tw = matmul(&h, w, e, k);
    let scores: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|j| v[j] * tw[i][j].tanh() / (1.0 + (-tu[i][j]).exp())).sum())
        .collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
    let attention: Vec<f64> = scores.iter().map(|s| (s - top).exp() / z).collect();
    let pooled: Vec<f64> = (0..e).map(|j| (0..n).map(|i| attention[i] * h[i][j]).sum()).collect();

    let (_, clw) = tensor(p, "class_fc.weight");
    let (_, clb) = tensor(p, "class_fc.bias");
    let c = bag.cancer_type.index();
    let class: Vec<f64> = (0..e).map(|j| clw[c * e + j] + clb[j]).collect();
    let (_, hw) = tensor(p, "head.weight");
    let (_, hb) = tensor(p, "head.bias");
    let mut logits = [hb[0], hb[1]];
    for (i, f) in pooled.iter().chain(&class).enumerate() {
        logits[0] += f * hw[i * 2];
        logits[1] += f * hw[i * 2 + 1];
    }
    ScalarOutput { logits, attention }
}

/// Directed kNN edge list by sorting all other nodes on (dist^2, index).
pub fn brute_knn(coords: &[[i32; 2]], k: usize) -> Vec<(u32, u32)> {
    let n = coords.len();
    let kk = k.min(n.saturating_sub(1));
    let mut edges = Vec::new();
    for i in 0..n {
        let mut others: Vec<(i64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dx = (coords[i][0] - coords[j][0]) as i64;
                let dy = (coords[i][1] - coords[j][1]) as i64;
                (dx * dx + dy * dy, j)
            })
            .collect();
        others.sort();
        edges.extend(others.iter().take(kk).map(|&(_, j)| (i as u32, j as u32)));
    }
    edges
}

/// Exhaustive Otsu: argmax of between-class variance of {0..=t} vs the
/// rest, compared exactly in integers; the smallest maximizer wins.
pub fn brute_otsu(hist: &[u64; 256]) -> u8 {
    let total: u128 = hist.iter().map(|&c| c as u128).sum();
    let sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    // score(t) = (s0 * w1 - s1 * w0)^2 / (w0 * w1); keep as a fraction
    let mut best: Option<(u128, u128, u8)> = None;
    for t in 0..256usize {
        let w0: u128 = hist[..=t].iter().map(|&c| c as u128).sum();
        let s0: u128 = hist[..=t].iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
        let (w1, s1) = (total - w0, sum - s0);
        let (num, den) = if w0 == 0 || w1 == 0 {
            (0, 1)
        } else {
            let diff = (s0 * w1).abs_diff(s1 * w0);
            (diff * diff, w0 * w1)
        };
        let better = match best {
            None => true,
            Some((bn, bd, _)) => num * bd > bn * den,
        };
        if better {
            best = Some((num, den, t as u8));
        }
    }
    best.unwrap().2
}

/// (2 * wins + ties, pairs) by comparing every positive-negative pair.
pub fn brute_auc_counts(scores: &[f64], labels: &[bool]) -> (u128, u128) {
    let (mut twice, mut pairs) = (0u128, 0u128);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    (twice, pairs)
}

/// Every distinct score as threshold (positive iff score >= t); J compared
/// as an exact fraction; lowest threshold among the best.
pub fn brute_operating_point(scores: &[f64], labels: &[bool]) -> (f64, f64, f64) {
    let pos = labels.iter().filter(|l| **l).count() as i128;
    let neg = labels.len() as i128 - pos;
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut best: Option<(i128, f64, i128, i128)> = None;
    for &t in &ts {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as i128;
        let tn = scores.iter().zip(labels).filter(|(s, l)| !**l && **s < t).count() as i128;
        let j = tp * neg + tn * pos - pos * neg;
        if best.is_none_or(|b| j > b.0) {
            best = Some((j, t, tp, tn));
        }
    }
    let (_, t, tp, tn) = best.unwrap();
    (t, tp as f64 / pos as f64, tn as f64 / neg as f64)
}

/// Mann-Whitney U (wins plus half ties) and the two-sided permutation
/// p-value by enumerating every split of the pooled sample.
pub fn brute_mann_whitney(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut u = 0.0;
    for x in a {
        for y in b {
            u += if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let na = a.len();
    // doubled midranks
    let r2: Vec<i64> = pooled
        .iter()
        .map(|v| {
            let below = pooled.iter().filter(|w| *w < v).count() as i64;
            let equal = pooled.iter().filter(|w| *w == v).count() as i64;
            2 * below + equal + 1
        })
        .collect();
    let center = (na * (n + 1)) as i64;
    let obs: i64 = r2[..na].iter().sum();
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        total += 1;
        let s: i64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r2[i]).sum();
        if (s - center).abs() >= (obs - center).abs() {
            extreme += 1;
        }
    }
    (u, extreme as f64 / total as f64)
}

/// Breslow partial log-likelihood of the binary group coefficient.
pub fn cox_log_likelihood(records: &[SurvivalRecord], beta: f64) -> f64 {
    let x = |r: &SurvivalRecord| if r.group.is_high() { 1.0 } else { 0.0 };
    let mut times: Vec<f64> = records.iter().filter(|r| r.event).map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut ll = 0.0;
    for t in times {
        let dead: Vec<&SurvivalRecord> = records.iter().filter(|r| r.event && r.time == t).collect();
        let risk: f64 = records.iter().filter(|r| r.time >= t).map(|r| (beta * x(r)).exp()).sum();
        for r in &dead {
            ll += beta * x(r) - risk.ln();
        }
    }
    ll
}

/// Maximizer of the partial likelihood by successively refined 1-D grids.
pub fn cox_grid_beta(records: &[SurvivalRecord]) -> f64 {
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    let mut best = 0.0;
    for _ in 0..12 {
        let steps = 200;
        let h = (hi - lo) / steps as f64;
        let mut top = (f64::NEG_INFINITY, lo);
        for i in 0..=steps {
            let b = lo + h * i as f64;
            let ll = cox_log_likelihood(records, b);
            if ll > top.0 {
                top = (ll, b);
            }
        }
        best = top.1;
        lo = best - 2.0 * h;
        hi = best + 2.0 * h;
    }
    best
}
