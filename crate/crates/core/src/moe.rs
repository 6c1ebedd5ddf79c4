//! Mixture-of-experts transformer machinery: noisy top-k routing, expected
//! expert load, coefficient-of-variation balancing, SwiGLU experts with
//! shared value/output projections, grouped-query attention and the
//! pre-norm encoder block.
//!
//! Every operation has a tape form (taking [`Graph`] variables, used by the
//! model and for gradients) and a plain form over [`Matrix`] values.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::Matrix;

/// Quadrature nodes used to integrate over one expert's routing noise.
const LOAD_QUADRATURE_NODES: usize = 64;

/// Means at or below this are treated as degenerate by [`cv`].
const CV_MEAN_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvMode {
    Plain,
    #[default]
    Squared,
}

/// Weights of the importance and load penalties.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub importance: f64,
    pub load: f64,
    pub mode: CvMode,
}

impl Default for BalanceWeights {
    fn default() -> Self {
        Self { importance: 1.0, load: 1.0, mode: CvMode::Squared }
    }
}

/// Inference-time change to one layer's routing, used by expert ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "expert")]
pub enum ExpertAblation {
    /// Zero the expert's gate and renormalise each token's remaining weights.
    Renormalize(usize),
    /// Route over the other experts only.
    Reroute(usize),
}

impl ExpertAblation {
    pub fn expert(self) -> usize {
        match self {
            Self::Renormalize(e) | Self::Reroute(e) => e,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T> {
    /// `d x E` clean gate projection.
    pub gate: Matrix<T>,
    /// `d x E` noise-scale projection.
    pub noise: Matrix<T>,
    pub top_k: usize,
    pub noise_enabled: bool,
}

impl<T: Scalar> RouterParams<T> {
    pub fn experts(&self) -> usize {
        self.gate.cols()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let e = self.experts();
        if self.top_k == 0 || self.top_k > e {
            return Err(Error::InvalidArgument(format!("top_k = {} with {e} experts", self.top_k)));
        }
        if self.gate.rows() != dim || self.noise.shape() != self.gate.shape() {
            return Err(Error::Shape(format!(
                "router {:?}/{:?} for {dim}-dim tokens",
                self.gate.shape(),
                self.noise.shape()
            )));
        }
        Ok(())
    }
}

/// `E` gate projections plus the value and output projections they share.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank<T> {
    /// One `d x h` projection per expert.
    pub gate_proj: Vec<Matrix<T>>,
    /// Shared `d x h` value projection.
    pub value_proj: Matrix<T>,
    /// Shared `h x d` output projection.
    pub out_proj: Matrix<T>,
}

impl<T: Scalar> ExpertBank<T> {
    pub fn experts(&self) -> usize {
        self.gate_proj.len()
    }

    pub fn hidden(&self) -> usize {
        self.value_proj.cols()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let h = self.hidden();
        let bad = self.value_proj.shape() != (dim, h)
            || self.out_proj.shape() != (h, dim)
            || self.gate_proj.iter().any(|w| w.shape() != (dim, h));
        if bad {
            return Err(Error::Shape(format!("expert bank does not match d={dim}, h={h}")));
        }
        Ok(())
    }
}

/// Per-token routing decisions plus the batch expected load.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput<T> {
    /// Selected experts per token, in descending logit order.
    pub indices: Vec<Vec<usize>>,
    /// Routing weights aligned with `indices`.
    pub weights: Vec<Vec<T>>,
    /// Dense `T x E` gate matrix, zero off the selection.
    pub gates: Matrix<T>,
    pub clean_logits: Matrix<T>,
    pub noisy_logits: Matrix<T>,
    /// Per-token selection probabilities, `T x E`.
    pub load_probs: Matrix<T>,
    /// Column sums of `load_probs`.
    pub load: Vec<T>,
}

impl<T: Scalar> RouterOutput<T> {
    /// Column sums of the gate matrix.
    pub fn importance(&self) -> Vec<T> {
        self.gates.column_sums().into_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// `d x (heads * head_dim)`.
    pub query: Matrix<T>,
    /// `d x (kv_groups * head_dim)`.
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    /// `(heads * head_dim) x d`.
    pub out: Matrix<T>,
    pub heads: usize,
    pub kv_groups: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlockParams<T> {
    pub norm1_gain: Matrix<T>,
    pub norm1_bias: Matrix<T>,
    pub attention: AttentionParams<T>,
    pub norm2_gain: Matrix<T>,
    pub norm2_bias: Matrix<T>,
    pub bank: ExpertBank<T>,
    pub router: RouterParams<T>,
}

// ---------------------------------------------------------------------------
// Tape-level variables
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct RouterVars {
    pub gate: Var,
    pub noise: Var,
    pub top_k: usize,
    pub noise_enabled: bool,
}

#[derive(Clone, Debug)]
pub struct BankVars {
    pub gate_proj: Vec<Var>,
    pub value_proj: Var,
    pub out_proj: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub out: Var,
    pub heads: usize,
    pub kv_groups: usize,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub attention: AttentionVars,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub bank: BankVars,
    pub router: RouterVars,
}

impl RouterVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, p: &RouterParams<T>, trainable: bool) -> Self {
        Self {
            gate: leaf(g, &p.gate, trainable),
            noise: leaf(g, &p.noise, trainable),
            top_k: p.top_k,
            noise_enabled: p.noise_enabled,
        }
    }
}

impl BankVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, p: &ExpertBank<T>, trainable: bool) -> Self {
        Self {
            gate_proj: p.gate_proj.iter().map(|w| leaf(g, w, trainable)).collect(),
            value_proj: leaf(g, &p.value_proj, trainable),
            out_proj: leaf(g, &p.out_proj, trainable),
        }
    }
}

impl AttentionVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, p: &AttentionParams<T>, trainable: bool) -> Self {
        Self {
            query: leaf(g, &p.query, trainable),
            key: leaf(g, &p.key, trainable),
            value: leaf(g, &p.value, trainable),
            out: leaf(g, &p.out, trainable),
            heads: p.heads,
            kv_groups: p.kv_groups,
        }
    }
}

impl BlockVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, p: &EncoderBlockParams<T>, trainable: bool) -> Self {
        Self {
            norm1_gain: leaf(g, &p.norm1_gain, trainable),
            norm1_bias: leaf(g, &p.norm1_bias, trainable),
            attention: AttentionVars::bind(g, &p.attention, trainable),
            norm2_gain: leaf(g, &p.norm2_gain, trainable),
            norm2_bias: leaf(g, &p.norm2_bias, trainable),
            bank: BankVars::bind(g, &p.bank, trainable),
            router: RouterVars::bind(g, &p.router, trainable),
        }
    }
}

fn leaf<T: Scalar>(g: &mut Graph<T>, m: &Matrix<T>, trainable: bool) -> Var {
    if trainable {
        g.param(m.clone())
    } else {
        g.constant(m.clone())
    }
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

/// Tape handles produced by [`route`].
#[derive(Clone, Debug)]
pub struct Routing {
    /// Dense `T x E` gates (after any ablation).
    pub gates: Var,
    pub clean: Var,
    pub noisy: Var,
    /// Per-token selection probabilities, `T x E`.
    pub load_probs: Var,
    /// Experts that process each token, descending by logit.
    pub indices: Vec<Vec<usize>>,
}

/// Indices of the `k` largest entries, descending, ties to the lower index.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    order
}

/// Noisy top-k routing on the tape.
pub fn route<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    router: &RouterVars,
    rng: &mut R,
    ablation: Option<ExpertAblation>,
) -> Result<Routing> {
    let experts = g.value(router.gate).cols();
    let k = router.top_k;
    if k == 0 || k > experts {
        return Err(Error::InvalidArgument(format!("top_k = {k} with {experts} experts")));
    }
    if let Some(a) = ablation {
        if a.expert() >= experts {
            return Err(Error::InvalidArgument(format!("ablated expert {} of {experts}", a.expert())));
        }
    }
    let clean = g.matmul(x, router.gate);
    let tokens = g.value(clean).rows();
    let (noisy, scale) = if router.noise_enabled {
        let raw = g.matmul(x, router.noise);
        let scale = g.softplus(raw);
        let eps = Matrix::from_fn(tokens, experts, |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        });
        let eps = g.constant(eps);
        let jitter = g.mul(eps, scale);
        (g.add(clean, jitter), Some(scale))
    } else {
        (clean, None)
    };

    let excluded = match ablation {
        Some(ExpertAblation::Reroute(e)) => Some(e),
        _ => None,
    };
    let k_eff = if excluded.is_some() { k.min(experts - 1) } else { k };
    let (gates, mut indices) = top_k_softmax(g, noisy, k_eff, excluded);
    let load_probs = expected_load_op(g, clean, scale, k);

    let gates = match ablation {
        Some(ExpertAblation::Renormalize(e)) => {
            let mut m = g.value(gates).clone();
            for (r, sel) in indices.iter_mut().enumerate() {
                // Rows that never picked the expert keep their exact weights.
                if !sel.contains(&e) {
                    continue;
                }
                sel.retain(|&j| j != e);
                m.set(r, e, T::zero());
                let total: T = m.row(r).iter().copied().sum();
                if total > T::zero() {
                    m.row_mut(r).iter_mut().for_each(|v| *v /= total);
                }
            }
            g.constant(m)
        }
        _ => gates,
    };
    Ok(Routing { gates, clean, noisy, load_probs, indices })
}

/// Softmax over the `k` largest entries of each row, scattered into a dense
/// matrix.
fn top_k_softmax<T: Scalar>(g: &mut Graph<T>, logits: Var, k: usize, excluded: Option<usize>) -> (Var, Vec<Vec<usize>>) {
    let lv = g.value(logits);
    let (rows, cols) = lv.shape();
    let mut dense = Matrix::zeros(rows, cols);
    let mut indices = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut row = lv.row(r).to_vec();
        if let Some(e) = excluded {
            row[e] = T::neg_infinity();
        }
        let sel = top_k_indices(&row, k);
        let max = row[sel[0]];
        let exps: Vec<T> = sel.iter().map(|&j| (row[j] - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (&j, &w) in sel.iter().zip(&exps) {
            dense.set(r, j, w / total);
        }
        indices.push(sel);
    }
    let sel_for_bw = indices.clone();
    let out = g.custom(dense, &[logits], move |out, grad, ctx| {
        let w = ctx.value(out);
        let mut gl = Matrix::zeros(w.rows(), w.cols());
        for (r, sel) in sel_for_bw.iter().enumerate() {
            let dot: T = sel.iter().map(|&j| w.get(r, j) * grad.get(r, j)).sum();
            for &j in sel {
                gl.set(r, j, w.get(r, j) * (grad.get(r, j) - dot));
            }
        }
        ctx.acc(logits, gl);
    });
    (out, indices)
}

fn quadrature_nodes() -> &'static [f64] {
    static NODES: OnceLock<Vec<f64>> = OnceLock::new();
    NODES.get_or_init(|| {
        let m = LOAD_QUADRATURE_NODES as f64;
        (0..LOAD_QUADRATURE_NODES).map(|i| scalar::normal_quantile((i as f64 + 0.5) / m)).collect()
    })
}

/// Probabilities that fewer than `k` of the Bernoulli(`q_j`) events occur,
/// for the events whose mask is set. Returns `dist[c] = Pr(count = c)` for
/// `c < k`.
fn count_below<T: Scalar>(q: &[T], skip: &[usize], k: usize, dist: &mut Vec<T>) {
    dist.clear();
    dist.resize(k, T::zero());
    dist[0] = T::one();
    for (j, &p) in q.iter().enumerate() {
        if skip.contains(&j) {
            continue;
        }
        for c in (0..k).rev() {
            let stay = dist[c] * (T::one() - p);
            let step = if c > 0 { dist[c - 1] * p } else { T::zero() };
            dist[c] = stay + step;
        }
    }
}

/// Selection probability of every expert under independent Gaussian noise
/// with per-expert scale, for one token. `scale[j] == 0` is deterministic.
fn token_load<T: Scalar>(clean: &[T], scale: &[T], k: usize, out: &mut [T]) {
    let e_count = clean.len();
    if k >= e_count {
        out.iter_mut().for_each(|v| *v = T::one());
        return;
    }
    let nodes = quadrature_nodes();
    let inv_m = T::one() / T::of(nodes.len() as f64);
    let mut q = vec![T::zero(); e_count];
    let mut dist = Vec::with_capacity(k);
    for e in 0..e_count {
        let mut acc = T::zero();
        for &z in nodes {
            let x = clean[e] + scale[e] * T::of(z);
            for j in 0..e_count {
                if j != e {
                    q[j] = exceed_prob(clean[j], scale[j], x).0;
                }
            }
            count_below(&q, &[e], k, &mut dist);
            acc += dist.iter().copied().sum::<T>();
        }
        out[e] = acc * inv_m;
    }
}

/// `Pr(c + s·ε > x)` and `(φ(a)/s, a)` with `a = (c − x)/s`.
#[inline]
fn exceed_prob<T: Scalar>(c: T, s: T, x: T) -> (T, T, T) {
    if s > T::zero() {
        let a = (c - x) / s;
        (scalar::normal_cdf(a), scalar::normal_pdf(a) / s, a)
    } else if c > x {
        (T::one(), T::zero(), T::zero())
    } else {
        (T::zero(), T::zero(), T::zero())
    }
}

/// Gradient of [`token_load`] given upstream `grad[e]`; accumulates into
/// `d_clean` and `d_scale`.
fn token_load_backward<T: Scalar>(clean: &[T], scale: &[T], k: usize, grad: &[T], d_clean: &mut [T], d_scale: &mut [T]) {
    let e_count = clean.len();
    if k >= e_count {
        return;
    }
    let nodes = quadrature_nodes();
    let inv_m = T::one() / T::of(nodes.len() as f64);
    let mut q = vec![T::zero(); e_count];
    let mut dens = vec![T::zero(); e_count];
    let mut arg = vec![T::zero(); e_count];
    let mut dist = Vec::with_capacity(k);
    for e in 0..e_count {
        let ge = grad[e] * inv_m;
        if ge == T::zero() {
            continue;
        }
        for &z in nodes {
            let zt = T::of(z);
            let x = clean[e] + scale[e] * zt;
            for j in 0..e_count {
                if j != e {
                    (q[j], dens[j], arg[j]) = exceed_prob(clean[j], scale[j], x);
                }
            }
            for j in 0..e_count {
                if j == e || dens[j] == T::zero() {
                    continue;
                }
                // dF/dq_j = -Pr(exactly k-1 of the others, excluding j)
                count_below(&q, &[e, j], k, &mut dist);
                let df_dq = -dist[k - 1];
                let w = ge * df_dq * dens[j];
                // q_j = Φ((c_j − x)/s_j)
                d_clean[j] += w;
                d_scale[j] -= w * arg[j];
                d_clean[e] -= w;
                d_scale[e] -= w * zt;
            }
        }
    }
}

/// Tape op for per-token expected load. Without noise the load is the 0/1
/// top-k indicator and carries no gradient.
fn expected_load_op<T: Scalar>(g: &mut Graph<T>, clean: Var, scale: Option<Var>, k: usize) -> Var {
    let cv = g.value(clean);
    let (rows, cols) = cv.shape();
    let Some(scale) = scale else {
        let mut ind = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for j in top_k_indices(cv.row(r), k) {
                ind.set(r, j, T::one());
            }
        }
        return g.constant(ind);
    };
    let sv = g.value(scale);
    let mut value = Matrix::zeros(rows, cols);
    value.data_mut().par_chunks_mut(cols.max(1)).enumerate().for_each(|(r, out)| {
        token_load(cv.row(r), sv.row(r), k, out);
    });
    g.custom(value, &[clean, scale], move |_, grad, ctx| {
        let cv = ctx.value(clean);
        let sv = ctx.value(scale);
        let (rows, cols) = cv.shape();
        let per_row: Vec<(Vec<T>, Vec<T>)> = (0..rows)
            .into_par_iter()
            .map(|r| {
                let mut dc = vec![T::zero(); cols];
                let mut ds = vec![T::zero(); cols];
                token_load_backward(cv.row(r), sv.row(r), k, grad.row(r), &mut dc, &mut ds);
                (dc, ds)
            })
            .collect();
        let mut gc = Matrix::zeros(rows, cols);
        let mut gs = Matrix::zeros(rows, cols);
        for (r, (dc, ds)) in per_row.into_iter().enumerate() {
            gc.row_mut(r).copy_from_slice(&dc);
            gs.row_mut(r).copy_from_slice(&ds);
        }
        ctx.acc(clean, gc);
        ctx.acc(scale, gs);
    })
}

// ---------------------------------------------------------------------------
// Balancing
// ---------------------------------------------------------------------------

/// Population standard deviation over mean; 0 when the mean is degenerate.
pub fn cv<T: Scalar>(values: &[T]) -> T {
    cv_value(values, CvMode::Plain)
}

fn cv_value<T: Scalar>(values: &[T], mode: CvMode) -> T {
    let n = T::of(values.len().max(1) as f64);
    let mean = values.iter().copied().sum::<T>() / n;
    if mean <= T::of(CV_MEAN_FLOOR) {
        return T::zero();
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    match mode {
        CvMode::Plain => var.sqrt() / mean,
        CvMode::Squared => var / (mean * mean),
    }
}

/// Coefficient of variation (or its square) of a row vector, on the tape.
pub fn cv_op<T: Scalar>(g: &mut Graph<T>, v: Var, mode: CvMode) -> Var {
    let vals = g.value(v).data().to_vec();
    let value = Matrix::scalar(cv_value(&vals, mode));
    g.custom(value, &[v], move |_, grad, ctx| {
        let vals = ctx.value(v).data().to_vec();
        let n = T::of(vals.len() as f64);
        let mean = vals.iter().copied().sum::<T>() / n;
        let (r, c) = ctx.value(v).shape();
        let mut gv = Matrix::zeros(r, c);
        if mean > T::of(CV_MEAN_FLOOR) {
            let var = vals.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let gs = grad.item();
            let two = T::of(2.0);
            for (o, &x) in gv.data_mut().iter_mut().zip(&vals) {
                let dvar = two * (x - mean) / n;
                let dmean = T::one() / n;
                *o = gs
                    * match mode {
                        CvMode::Squared => dvar / (mean * mean) - two * var / (mean * mean * mean) * dmean,
                        CvMode::Plain => {
                            let sd = var.sqrt();
                            let dsd = if sd > T::zero() { dvar / (two * sd) } else { T::zero() };
                            dsd / mean - sd / (mean * mean) * dmean
                        }
                    };
            }
        }
        ctx.acc(v, gv);
    })
}

/// `λ_imp · CV(importance) + λ_load · CV(load)` on the tape (CV squared by
/// default).
pub fn balance_loss_op<T: Scalar>(g: &mut Graph<T>, routing: &Routing, w: &BalanceWeights) -> Var {
    let importance = g.column_sums(routing.gates);
    let load = g.column_sums(routing.load_probs);
    let ci = cv_op(g, importance, w.mode);
    let cl = cv_op(g, load, w.mode);
    let a = g.scale(ci, T::of(w.importance));
    let b = g.scale(cl, T::of(w.load));
    g.add(a, b)
}

pub fn balance_loss<T: Scalar>(out: &RouterOutput<T>, w: &BalanceWeights) -> T {
    T::of(w.importance) * cv_value(&out.importance(), w.mode) + T::of(w.load) * cv_value(&out.load, w.mode)
}

// ---------------------------------------------------------------------------
// Experts and the MoE feed-forward layer
// ---------------------------------------------------------------------------

/// Options that only matter for analysis passes.
#[derive(Clone, Copy, Debug, Default)]
pub struct MoeOptions {
    pub ablation: Option<ExpertAblation>,
    /// Record `‖g_{i,e} f_e(z_i)‖₂` for every token and expert.
    pub capture_contributions: bool,
}

#[derive(Clone, Debug)]
pub struct MoeForward<T> {
    pub out: Var,
    pub loss: Var,
    pub routing: Routing,
    /// `T x E` contribution norms when requested.
    pub contributions: Option<Matrix<T>>,
}

/// `W2 · (SiLU(W1_e z) ⊙ V z)` for each row of `z`, without the tape.
fn expert_rows<T: Scalar>(z: &Matrix<T>, w1: &Matrix<T>, v: &Matrix<T>, w2: &Matrix<T>) -> Matrix<T> {
    let gate = z.matmul(w1).map(scalar::silu);
    let val = z.matmul(v);
    gate.zip_map(&val, |a, b| a * b).matmul(w2)
}

/// Sparse MoE feed-forward on the tape. Only selected experts run.
pub fn moe_ffn_op<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    bank: &BankVars,
    router: &RouterVars,
    weights: &BalanceWeights,
    rng: &mut R,
    opts: MoeOptions,
) -> Result<MoeForward<T>> {
    let experts = bank.gate_proj.len();
    if g.value(router.gate).cols() != experts {
        return Err(Error::Shape(format!(
            "router has {} experts, bank has {experts}",
            g.value(router.gate).cols()
        )));
    }
    let routing = route(g, x, router, rng, opts.ablation)?;
    let loss = balance_loss_op(g, &routing, weights);
    let tokens = g.value(x).rows();
    let hidden = g.value(bank.value_proj).cols();

    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); experts];
    for (t, sel) in routing.indices.iter().enumerate() {
        for &e in sel {
            per_expert[e].push(t);
        }
    }

    let value = g.matmul(x, bank.value_proj);
    let mut mixed: Option<Var> = None;
    for (e, rows) in per_expert.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, rows.clone());
        let pre = g.matmul(xe, bank.gate_proj[e]);
        let act = g.silu(pre);
        let w = g.gather_entries(routing.gates, rows.clone(), vec![e; rows.len()]);
        let weighted = g.mul_col(act, w);
        let scattered = g.scatter_add_rows(weighted, rows.clone(), tokens);
        mixed = Some(match mixed {
            Some(m) => g.add(m, scattered),
            None => scattered,
        });
    }
    let mixed = match mixed {
        Some(m) => m,
        None => g.constant(Matrix::zeros(tokens, hidden)),
    };
    let hidden_act = g.mul(mixed, value);
    let out = g.matmul(hidden_act, bank.out_proj);

    let contributions = opts.capture_contributions.then(|| {
        let z = g.value(x);
        let gates = g.value(routing.gates);
        let (v, w2) = (g.value(bank.value_proj), g.value(bank.out_proj));
        let mut c = Matrix::zeros(tokens, experts);
        for (e, rows) in per_expert.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let f = expert_rows(&z.select_rows(rows), g.value(bank.gate_proj[e]), v, w2);
            for (i, &t) in rows.iter().enumerate() {
                let gw = gates.get(t, e);
                let norm = f.row(i).iter().map(|&a| (gw * a) * (gw * a)).sum::<T>().sqrt();
                c.set(t, e, norm);
            }
        }
        c
    });

    Ok(MoeForward { out, loss, routing, contributions })
}

// ---------------------------------------------------------------------------
// Grouped-query attention
// ---------------------------------------------------------------------------

/// Full (non-causal) scaled dot-product attention over each `(start, len)`
/// segment, where query head `h` reads key/value group
/// `h / (heads / kv_groups)`.
pub fn grouped_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    segments: &[(usize, usize)],
    heads: usize,
    kv_groups: usize,
) -> Result<Var> {
    let (tokens, qd) = g.value(q).shape();
    let kd = g.value(k).cols();
    if heads == 0 || kv_groups == 0 || heads % kv_groups != 0 || qd % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads, {kv_groups} groups, width {qd}")));
    }
    let hd = qd / heads;
    if kd != kv_groups * hd || g.value(v).shape() != (tokens, kd) || g.value(k).rows() != tokens {
        return Err(Error::Shape(format!("key/value width {kd} for {kv_groups} groups of {hd}")));
    }
    if segments.iter().map(|s| s.1).sum::<usize>() != tokens {
        return Err(Error::Shape("attention segments do not cover the sequence".into()));
    }
    let per_group = heads / kv_groups;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let segs = segments.to_vec();

    // probs[segment][head] is a len x len row-stochastic matrix.
    let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
    let results: Vec<(Vec<Matrix<T>>, Matrix<T>)> = segs
        .par_iter()
        .map(|&(start, len)| {
            let mut probs = Vec::with_capacity(heads);
            let mut out = Matrix::zeros(len, qd);
            for h in 0..heads {
                let grp = h / per_group;
                let mut p = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &qv.row(start + i)[h * hd..(h + 1) * hd];
                    let mut max = T::neg_infinity();
                    for j in 0..len {
                        let kj = &kv.row(start + j)[grp * hd..(grp + 1) * hd];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        p.set(i, j, s);
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for pij in p.row_mut(i) {
                        *pij = (*pij - max).exp();
                        total += *pij;
                    }
                    p.row_mut(i).iter_mut().for_each(|x| *x /= total);
                    let orow = &mut out.row_mut(i)[h * hd..(h + 1) * hd];
                    for j in 0..len {
                        let w = p.get(i, j);
                        let vj = &vv.row(start + j)[grp * hd..(grp + 1) * hd];
                        for (o, &b) in orow.iter_mut().zip(vj) {
                            *o += w * b;
                        }
                    }
                }
                probs.push(p);
            }
            (probs, out)
        })
        .collect();
    let mut value = Matrix::zeros(tokens, qd);
    let mut saved = Vec::with_capacity(segs.len());
    for (&(start, len), (probs, out)) in segs.iter().zip(results) {
        for i in 0..len {
            value.row_mut(start + i).copy_from_slice(out.row(i));
        }
        saved.push(probs);
    }

    Ok(g.custom(value, &[q, k, v], move |_, grad, ctx| {
        let (qv, kv, vv) = (ctx.value(q), ctx.value(k), ctx.value(v));
        let parts: Vec<(Matrix<T>, Matrix<T>, Matrix<T>)> = segs
            .par_iter()
            .zip(saved.par_iter())
            .map(|(&(start, len), probs)| {
                let mut dq = Matrix::zeros(len, qd);
                let mut dk = Matrix::zeros(len, kd);
                let mut dv = Matrix::zeros(len, kd);
                for (h, p) in probs.iter().enumerate() {
                    let grp = h / per_group;
                    let (qs, ks) = (h * hd, grp * hd);
                    for i in 0..len {
                        let go = &grad.row(start + i)[qs..qs + hd];
                        // dP_ij = go · v_j ; dv_j += P_ij go
                        let mut dp = vec![T::zero(); len];
                        for j in 0..len {
                            let vj = &vv.row(start + j)[ks..ks + hd];
                            dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            let pij = p.get(i, j);
                            for (o, &a) in dv.row_mut(j)[ks..ks + hd].iter_mut().zip(go) {
                                *o += pij * a;
                            }
                        }
                        let dot: T = (0..len).map(|j| p.get(i, j) * dp[j]).sum();
                        let qi = &qv.row(start + i)[qs..qs + hd];
                        for j in 0..len {
                            let ds = p.get(i, j) * (dp[j] - dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &kv.row(start + j)[ks..ks + hd];
                            for (o, &b) in dq.row_mut(i)[qs..qs + hd].iter_mut().zip(kj) {
                                *o += ds * b;
                            }
                            for (o, &a) in dk.row_mut(j)[ks..ks + hd].iter_mut().zip(qi) {
                                *o += ds * a;
                            }
                        }
                    }
                }
                (dq, dk, dv)
            })
            .collect();
        let (tokens, _) = qv.shape();
        let mut gq = Matrix::zeros(tokens, qd);
        let mut gk = Matrix::zeros(tokens, kd);
        let mut gv = Matrix::zeros(tokens, kd);
        for (&(start, len), (dq, dk, dv)) in segs.iter().zip(parts) {
            for i in 0..len {
                gq.row_mut(start + i).copy_from_slice(dq.row(i));
                gk.row_mut(start + i).copy_from_slice(dk.row(i));
                gv.row_mut(start + i).copy_from_slice(dv.row(i));
            }
        }
        ctx.acc(q, gq);
        ctx.acc(k, gk);
        ctx.acc(v, gv);
    }))
}

/// Projections, grouped attention and output projection on the tape.
pub fn gqa_op<T: Scalar>(g: &mut Graph<T>, x: Var, p: &AttentionVars, segments: &[(usize, usize)]) -> Result<Var> {
    let q = g.matmul(x, p.query);
    let k = g.matmul(x, p.key);
    let v = g.matmul(x, p.value);
    let o = grouped_attention(g, q, k, v, segments, p.heads, p.kv_groups)?;
    Ok(g.matmul(o, p.out))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Pre-norm block: `x + GQA(LN(x))`, then `x + MoE(LN(x))`.
pub fn encoder_block_op<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockVars,
    segments: &[(usize, usize)],
    weights: &BalanceWeights,
    rng: &mut R,
    opts: MoeOptions,
) -> Result<(Var, MoeForward<T>)> {
    let eps = T::of(LAYER_NORM_EPS);
    let n1 = g.layer_norm(x, p.norm1_gain, p.norm1_bias, eps);
    let a = gqa_op(g, n1, &p.attention, segments)?;
    let x = g.add(x, a);
    let n2 = g.layer_norm(x, p.norm2_gain, p.norm2_bias, eps);
    let moe = moe_ffn_op(g, n2, &p.bank, &p.router, weights, rng, opts)?;
    let y = g.add(x, moe.out);
    Ok((y, moe))
}

// ---------------------------------------------------------------------------
// Plain wrappers
// ---------------------------------------------------------------------------

pub fn noisy_topk_route<T: Scalar, R: Rng + ?Sized>(
    tokens: &Matrix<T>,
    router: &RouterParams<T>,
    rng: &mut R,
) -> Result<RouterOutput<T>> {
    router.validate(tokens.cols())?;
    let mut g = Graph::inference();
    let x = g.constant(tokens.clone());
    let rv = RouterVars::bind(&mut g, router, false);
    let r = route(&mut g, x, &rv, rng, None)?;
    let gates = g.value(r.gates).clone();
    let weights = r.indices.iter().enumerate().map(|(t, sel)| sel.iter().map(|&e| gates.get(t, e)).collect()).collect();
    let load_probs = g.value(r.load_probs).clone();
    Ok(RouterOutput {
        indices: r.indices,
        weights,
        gates,
        clean_logits: g.value(r.clean).clone(),
        noisy_logits: g.value(r.noisy).clone(),
        load: load_probs.column_sums().into_vec(),
        load_probs,
    })
}

/// Per-token probability that each expert lands in the top k under the
/// router's noise model, as a `T x E` matrix.
pub fn expected_load_per_token<T: Scalar>(tokens: &Matrix<T>, router: &RouterParams<T>) -> Result<Matrix<T>> {
    router.validate(tokens.cols())?;
    let mut g = Graph::inference();
    let x = g.constant(tokens.clone());
    let wg = g.constant(router.gate.clone());
    let clean = g.matmul(x, wg);
    let scale = if router.noise_enabled {
        let wn = g.constant(router.noise.clone());
        let raw = g.matmul(x, wn);
        Some(g.softplus(raw))
    } else {
        None
    };
    let p = expected_load_op(&mut g, clean, scale, router.top_k);
    Ok(g.value(p).clone())
}

/// Batch expected load: per-expert sum over tokens.
pub fn expected_load<T: Scalar>(tokens: &Matrix<T>, router: &RouterParams<T>) -> Result<Vec<T>> {
    Ok(expected_load_per_token(tokens, router)?.column_sums().into_vec())
}

pub fn swiglu_expert<T: Scalar>(tokens: &Matrix<T>, bank: &ExpertBank<T>, expert: usize) -> Result<Matrix<T>> {
    bank.validate(tokens.cols())?;
    let w1 = bank.gate_proj.get(expert).ok_or_else(|| {
        Error::InvalidArgument(format!("expert {expert} out of range ({} experts)", bank.experts()))
    })?;
    Ok(expert_rows(tokens, w1, &bank.value_proj, &bank.out_proj))
}

pub fn moe_ffn<T: Scalar, R: Rng + ?Sized>(
    tokens: &Matrix<T>,
    bank: &ExpertBank<T>,
    router: &RouterParams<T>,
    weights: &BalanceWeights,
    rng: &mut R,
) -> Result<(Matrix<T>, T)> {
    bank.validate(tokens.cols())?;
    router.validate(tokens.cols())?;
    let mut g = Graph::inference();
    let x = g.constant(tokens.clone());
    let bv = BankVars::bind(&mut g, bank, false);
    let rv = RouterVars::bind(&mut g, router, false);
    let f = moe_ffn_op(&mut g, x, &bv, &rv, weights, rng, MoeOptions::default())?;
    Ok((g.value(f.out).clone(), g.value(f.loss).item()))
}

pub fn gqa_attention<T: Scalar>(tokens: &Matrix<T>, p: &AttentionParams<T>) -> Result<Matrix<T>> {
    let d = tokens.cols();
    if p.query.rows() != d || p.key.rows() != d || p.value.rows() != d || p.out.cols() != d {
        return Err(Error::Shape(format!("attention projections do not match d={d}")));
    }
    let mut g = Graph::inference();
    let x = g.constant(tokens.clone());
    let av = AttentionVars::bind(&mut g, p, false);
    let y = gqa_op(&mut g, x, &av, &[(0, tokens.rows())])?;
    Ok(g.value(y).clone())
}

pub fn encoder_block<T: Scalar, R: Rng + ?Sized>(
    tokens: &Matrix<T>,
    p: &EncoderBlockParams<T>,
    weights: &BalanceWeights,
    rng: &mut R,
) -> Result<(Matrix<T>, T)> {
    let d = tokens.cols();
    p.bank.validate(d)?;
    p.router.validate(d)?;
    let mut g = Graph::inference();
    let x = g.constant(tokens.clone());
    let bv = BlockVars::bind(&mut g, p, false);
    let (y, moe) = encoder_block_op(&mut g, x, &bv, &[(0, tokens.rows())], weights, rng, MoeOptions::default())?;
    Ok((g.value(y).clone(), g.value(moe.loss).item()))
}
