//! Loop-level reference encoder and model surgery shared by integration tests.
#![allow(dead_code)]

use geomoe::metadata::META_NAMES;
use geomoe::model::{ChipInput, LayerSpec, MoeMae, ParamStore};
use geomoe::Matrix;

fn p<'a>(m: &'a MoeMae<f64>, name: &str) -> &'a Matrix<f64> {
    m.params.get(name).unwrap()
}

fn row_affine(x: &[f64], w: &Matrix<f64>, b: Option<&[f64]>) -> Vec<f64> {
    (0..w.cols())
        .map(|j| {
            let s: f64 = x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum();
            s + b.map_or(0.0, |b| b[j])
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Final encoder tokens of one unmasked chip, computed token by token.
/// `drop` removes an expert at a layer from every token's selection and
/// renormalises the remaining weights.
pub fn reference_encode(m: &MoeMae<f64>, input: &ChipInput<f64>, drop: Option<(usize, usize)>) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let d = cfg.dim;
    let mut x: Vec<Vec<f64>> = Vec::new();
    for (i, name) in META_NAMES.iter().enumerate() {
        let (a, b) = input.meta.pairs[i];
        x.push(row_affine(&[a, b], p(m, &format!("meta.{name}.w")), Some(p(m, &format!("meta.{name}.b")).row(0))));
    }
    x.push(p(m, "cls").row(0).to_vec());
    for r in 0..input.patches.rows() {
        x.push(row_affine(input.patches.row(r), p(m, "patch_embed.w"), Some(p(m, "patch_embed.b").row(0))));
    }
    let pos = p(m, "pos");
    for (t, row) in x.iter_mut().enumerate() {
        for j in 0..d {
            row[j] += pos.get(t, j);
        }
    }
    let n = x.len();
    let hd = d / cfg.heads;
    let per_group = cfg.heads / cfg.kv_groups;
    for (l, spec) in cfg.encoder.iter().enumerate() {
        let pre = format!("enc.{l}");
        let g = |s: &str| p(m, &format!("{pre}.{s}"));
        // attention
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, g("ln1.g").row(0), g("ln1.b").row(0))).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| row_affine(r, g("attn.q"), None)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| row_affine(r, g("attn.k"), None)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| row_affine(r, g("attn.v"), None)).collect();
        let mut ctx = vec![vec![0.0; d]; n];
        for head in 0..cfg.heads {
            let qo = head * hd;
            let ko = (head / per_group) * hd;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..hd).map(|c| q[i][qo + c] * k[j][ko + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = w.iter().sum();
                for j in 0..n {
                    for c in 0..hd {
                        ctx[i][qo + c] += w[j] / total * v[j][ko + c];
                    }
                }
            }
        }
        for i in 0..n {
            let a = row_affine(&ctx[i], g("attn.o"), None);
            for j in 0..d {
                x[i][j] += a[j];
            }
        }
        // mixture of experts
        for i in 0..n {
            let z = layer_norm(&x[i], g("ln2.g").row(0), g("ln2.b").row(0));
            let logits = row_affine(&z, g("router.gate"), None);
            let mut order: Vec<usize> = (0..spec.experts).collect();
            order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
            let sel = &order[..spec.top_k];
            let max = logits[sel[0]];
            let mut w: Vec<(usize, f64)> = sel.iter().map(|&e| (e, (logits[e] - max).exp())).collect();
            let total: f64 = w.iter().map(|p| p.1).sum();
            w.iter_mut().for_each(|p| p.1 /= total);
            if let Some((dl, de)) = drop {
                if dl == l && w.iter().any(|p| p.0 == de) {
                    w.retain(|p| p.0 != de);
                    let rest: f64 = w.iter().map(|p| p.1).sum();
                    w.iter_mut().for_each(|p| p.1 /= rest);
                }
            }
            let val = row_affine(&z, g("ffn.v"), None);
            let mut mixed = vec![0.0; spec.hidden];
            for &(e, weight) in &w {
                let gate = row_affine(&z, g(&format!("expert.{e}.w1")), None);
                for c in 0..spec.hidden {
                    mixed[c] += weight * silu(gate[c]) * val[c];
                }
            }
            let out = row_affine(&mixed, g("ffn.w2"), None);
            for j in 0..d {
                x[i][j] += out[j];
            }
        }
    }
    x.iter().map(|r| layer_norm(r, p(m, "enc.norm.g").row(0), p(m, "enc.norm.b").row(0))).collect()
}

/// `‖a_i − b_i‖` over patch tokens.
pub fn patch_deltas(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .skip(geomoe::model::PREFIX_TOKENS)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// A copy of the model with expert `e` physically removed from encoder layer
/// `l`: one fewer router column and one fewer expert projection.
pub fn without_expert(m: &MoeMae<f64>, l: usize, e: usize) -> MoeMae<f64> {
    let mut cfg = m.config.clone();
    let spec = cfg.encoder[l];
    cfg.encoder[l] = LayerSpec { experts: spec.experts - 1, top_k: spec.top_k.min(spec.experts - 1), hidden: spec.hidden };
    let mut params = ParamStore::new();
    let pre = format!("enc.{l}.");
    for (name, t) in m.params.iter() {
        if let Some(rest) = name.strip_prefix(&pre) {
            if rest == "router.gate" || rest == "router.noise" {
                let keep: Vec<usize> = (0..t.cols()).filter(|&c| c != e).collect();
                params.insert(name.clone(), Matrix::from_fn(t.rows(), keep.len(), |r, c| t.get(r, keep[c])));
                continue;
            }
            if let Some(idx) = rest.strip_prefix("expert.").and_then(|s| s.strip_suffix(".w1")) {
                let idx: usize = idx.parse().unwrap();
                if idx != e {
                    let new = if idx > e { idx - 1 } else { idx };
                    params.insert(format!("{pre}expert.{new}.w1"), t.clone());
                }
                continue;
            }
        }
        params.insert(name.clone(), t.clone());
    }
    MoeMae::from_parts(cfg, params).unwrap()
}
