//! Frozen-encoder embeddings and linear probes: one-vs-rest logistic
//! regression for multi-label data, softmax regression for single-label
//! data, and the ranking and confusion metrics used to score them.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason, TerminationStatus};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BandStats, Chip, Labels};
use crate::error::{Error, Result};
use crate::model::{ChipInput, MoeMae, CLS_SLOT};
use crate::scalar::{self, Scalar};
use crate::tensor::Matrix;
use crate::train::write_atomic;

/// Chips encoded per forward pass during extraction.
const EXTRACT_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Class-token output.
    Cls,
    /// Every encoder output token, concatenated in sequence order.
    All,
    /// Mean over every encoder output token.
    Avg,
}

impl FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Self::Cls),
            "all" => Ok(Self::All),
            "avg" => Ok(Self::Avg),
            other => Err(Error::InvalidArgument(format!("unknown embedding mode {other:?} (cls, all, avg)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Single { labels: Vec<usize>, classes: usize },
    /// Row-major `samples x classes` indicator.
    Multi { labels: Vec<bool>, classes: usize },
}

impl Targets {
    pub fn task(&self) -> Task {
        match self {
            Self::Single { .. } => Task::Single,
            Self::Multi { .. } => Task::Multi,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Single { classes, .. } | Self::Multi { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Single { labels, .. } => labels.len(),
            Self::Multi { labels, classes } => labels.len() / (*classes).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `samples x classes` 0/1 indicator.
    pub fn indicator(&self) -> Matrix<f64> {
        match self {
            Self::Single { labels, classes } => {
                Matrix::from_fn(labels.len(), *classes, |r, c| if labels[r] == c { 1.0 } else { 0.0 })
            }
            Self::Multi { labels, classes } => {
                Matrix::from_fn(self.len(), *classes, |r, c| if labels[r * classes + c] { 1.0 } else { 0.0 })
            }
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Self::Single { labels, classes } => {
                Self::Single { labels: idx.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
            Self::Multi { labels, classes } => Self::Multi {
                labels: idx.iter().flat_map(|&i| labels[i * classes..(i + 1) * classes].iter().copied()).collect(),
                classes: *classes,
            },
        }
    }

    /// Targets from chip labels; `classes` defaults to one past the largest id.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a Labels>, classes: Option<usize>) -> Result<Option<Self>> {
        let labels: Vec<&Labels> = labels.into_iter().collect();
        let max = labels
            .iter()
            .flat_map(|l| match l {
                Labels::None => vec![],
                Labels::Single(c) => vec![*c as usize],
                Labels::Multi(v) => v.iter().map(|&c| c as usize).collect(),
            })
            .max();
        let classes = classes.unwrap_or(max.map_or(0, |m| m + 1));
        if max.is_some_and(|m| m >= classes) {
            return Err(Error::InvalidArgument(format!("label id {} with {classes} classes", max.unwrap_or(0))));
        }
        match labels.first() {
            None | Some(Labels::None) => {
                if labels.iter().all(|l| matches!(l, Labels::None)) {
                    Ok(None)
                } else {
                    Err(Error::InvalidArgument("mixed labelled and unlabelled chips".into()))
                }
            }
            Some(Labels::Single(_)) => {
                let ids = labels
                    .iter()
                    .map(|l| match l {
                        Labels::Single(c) => Ok(*c as usize),
                        _ => Err(Error::InvalidArgument("mixed label modes".into())),
                    })
                    .collect::<Result<_>>()?;
                Ok(Some(Self::Single { labels: ids, classes }))
            }
            Some(Labels::Multi(_)) => {
                let mut ind = vec![false; labels.len() * classes];
                for (r, l) in labels.iter().enumerate() {
                    let Labels::Multi(v) = l else {
                        return Err(Error::InvalidArgument("mixed label modes".into()));
                    };
                    for &c in v {
                        ind[r * classes + c as usize] = true;
                    }
                }
                Ok(Some(Self::Multi { labels: ind, classes }))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `samples x features`.
    pub features: Matrix<f64>,
    pub mode: EmbeddingMode,
    pub targets: Option<Targets>,
}

impl EmbeddingSet {
    pub fn new(features: Matrix<f64>, mode: EmbeddingMode, targets: Option<Targets>) -> Result<Self> {
        if let Some(t) = &targets {
            if t.len() != features.rows() {
                return Err(Error::Shape(format!("{} label rows for {} embeddings", t.len(), features.rows())));
            }
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("embeddings contain non-finite values".into()));
        }
        Ok(Self { features, mode, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            mode: self.mode,
            targets: self.targets.as_ref().map(|t| t.select(idx)),
        }
    }

    fn targets(&self) -> Result<&Targets> {
        self.targets.as_ref().ok_or_else(|| Error::InvalidArgument("embedding set has no labels".into()))
    }
}

/// Pools one chip's `(5+N) x d` encoder output.
pub fn pool_tokens<T: Scalar>(tokens: &Matrix<T>, mode: EmbeddingMode) -> Vec<f64> {
    match mode {
        EmbeddingMode::Cls => tokens.row(CLS_SLOT).iter().map(|v| v.as_f64()).collect(),
        EmbeddingMode::All => tokens.data().iter().map(|v| v.as_f64()).collect(),
        EmbeddingMode::Avg => {
            let n = tokens.rows() as f64;
            tokens.column_sums().data().iter().map(|v| v.as_f64() / n).collect()
        }
    }
}

/// Unmasked, noise-free encoder embeddings for every chip.
pub fn extract_embeddings<T: Scalar>(
    model: &MoeMae<T>,
    chips: &[Chip],
    stats: &BandStats,
    mode: EmbeddingMode,
    classes: Option<usize>,
) -> Result<EmbeddingSet> {
    let cfg = &model.config;
    let width = match mode {
        EmbeddingMode::All => cfg.seq_len() * cfg.dim,
        _ => cfg.dim,
    };
    let mut data = Vec::with_capacity(chips.len() * width);
    for chunk in chips.chunks(EXTRACT_CHUNK) {
        let inputs = chunk
            .iter()
            .map(|c| {
                if c.geometry() != (cfg.height, cfg.width, cfg.bands) {
                    return Err(Error::ConfigMismatch(format!(
                        "chip is {:?}, encoder expects {}x{}x{}",
                        c.geometry(),
                        cfg.height,
                        cfg.width,
                        cfg.bands
                    )));
                }
                ChipInput::from_chip(c, stats, cfg.patch)
            })
            .collect::<Result<Vec<_>>>()?;
        for tokens in model.embed_batch(&inputs)? {
            data.extend(pool_tokens(&tokens, mode));
        }
    }
    let features = Matrix::from_vec(chips.len(), width, data)?;
    let targets = Targets::from_labels(chips.iter().map(|c| &c.labels), classes)?;
    EmbeddingSet::new(features, mode, targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Inverse regularisation strength.
    pub c: f64,
    pub max_iter: u64,
    pub grad_tol: f64,
    /// Z-score features with training-set statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { c: 1.0, max_iter: 1000, grad_tol: 1e-5, standardize: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub task: Task,
    pub classes: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Per class: feature weights followed by the bias.
    pub weights: Vec<Vec<f64>>,
    pub iterations: Vec<u64>,
    pub converged: bool,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardized(&self, x: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mean[c]) / self.scale[c])
    }

    /// Class probabilities, `samples x classes` (sigmoid per class or softmax).
    pub fn predict_proba(&self, features: &Matrix<f64>) -> Result<Matrix<f64>> {
        if features.cols() != self.dim() {
            return Err(Error::Shape(format!("{} features, probe expects {}", features.cols(), self.dim())));
        }
        let z = logits(&self.standardized(features), &self.weights);
        Ok(match self.task {
            Task::Multi => z.map(scalar::sigmoid),
            Task::Single => softmax_rows(&z),
        })
    }
}

fn logits(x: &Matrix<f64>, weights: &[Vec<f64>]) -> Matrix<f64> {
    let d = x.cols();
    let w = Matrix::from_fn(weights.len(), d, |k, j| weights[k][j]);
    let mut z = x.matmul_nt(&w);
    for r in 0..z.rows() {
        for (k, v) in z.row_mut(r).iter_mut().enumerate() {
            *v += weights[k][d];
        }
    }
    z
}

fn softmax_rows(z: &Matrix<f64>) -> Matrix<f64> {
    let mut p = z.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    p
}

/// `(1/n) Σ softplus(z) − y·z + ‖w‖²/(2Cn)` for one class.
struct Binary<'a> {
    x: &'a Matrix<f64>,
    y: Vec<f64>,
    c: f64,
}

impl Binary<'_> {
    fn eval(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let (n, d) = self.x.shape();
        let nf = n as f64;
        let z = logits(self.x, &[p.to_vec()]);
        let mut loss = 0.0;
        let resid = Matrix::from_fn(n, 1, |r, _| {
            let zi = z.get(r, 0);
            loss += scalar::softplus(zi) - self.y[r] * zi;
            (scalar::sigmoid(zi) - self.y[r]) / nf
        });
        let reg = 1.0 / (self.c * nf);
        let gw = self.x.matmul_tn(&resid);
        let mut grad: Vec<f64> = (0..d).map(|j| gw.get(j, 0) + reg * p[j]).collect();
        grad.push(resid.sum());
        let wsq: f64 = p[..d].iter().map(|v| v * v).sum();
        (loss / nf + 0.5 * reg * wsq, grad)
    }
}

/// `(1/n) Σ logsumexp(z) − z_y + ‖W‖²/(2Cn)`.
struct Softmax<'a> {
    x: &'a Matrix<f64>,
    y: &'a [usize],
    classes: usize,
    c: f64,
}

impl Softmax<'_> {
    fn eval(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let (n, d) = self.x.shape();
        let nf = n as f64;
        let weights: Vec<Vec<f64>> = p.chunks(d + 1).map(<[f64]>::to_vec).collect();
        let z = logits(self.x, &weights);
        let prob = softmax_rows(&z);
        let mut loss = 0.0;
        for r in 0..n {
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[self.y[r]];
        }
        let resid = Matrix::from_fn(n, self.classes, |r, k| (prob.get(r, k) - f64::from(u8::from(self.y[r] == k))) / nf);
        let gw = resid.matmul_tn(self.x);
        let reg = 1.0 / (self.c * nf);
        let mut grad = Vec::with_capacity(p.len());
        let mut wsq = 0.0;
        let bias = resid.column_sums();
        for k in 0..self.classes {
            for j in 0..d {
                let w = p[k * (d + 1) + j];
                wsq += w * w;
                grad.push(gw.get(k, j) + reg * w);
            }
            grad.push(bias.get(0, k));
        }
        (loss / nf + 0.5 * reg * wsq, grad)
    }
}

macro_rules! argmin_problem {
    ($t:ident) => {
        impl CostFunction for $t<'_> {
            type Param = Vec<f64>;
            type Output = f64;
            fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
                Ok(self.eval(p).0)
            }
        }
        impl Gradient for $t<'_> {
            type Param = Vec<f64>;
            type Gradient = Vec<f64>;
            fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
                Ok(self.eval(p).1)
            }
        }
    };
}
argmin_problem!(Binary);
argmin_problem!(Softmax);

/// Limited-memory BFGS from the zero vector until the gradient norm drops
/// below the tolerance or the iteration budget runs out.
fn minimise<P>(problem: P, dim: usize, cfg: &ProbeConfig, grad_at: impl Fn(&[f64]) -> Vec<f64>) -> Result<(Vec<f64>, u64, bool)>
where
    P: CostFunction<Param = Vec<f64>, Output = f64> + Gradient<Param = Vec<f64>, Gradient = Vec<f64>>,
{
    let init = vec![0.0; dim];
    let g0 = grad_at(&init);
    if l2(&g0) < cfg.grad_tol {
        return Ok((init, 0, true));
    }
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(cfg.grad_tol)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.param(init).max_iters(cfg.max_iter))
        .run()
        .map_err(|e| Error::InvalidArgument(format!("probe optimisation failed: {e}")))?;
    let state = res.state();
    let best = state.get_best_param().or(state.get_param()).cloned().unwrap_or_else(|| vec![0.0; dim]);
    let converged = matches!(state.get_termination_status(), TerminationStatus::Terminated(TerminationReason::SolverConverged))
        || l2(&grad_at(&best)) < cfg.grad_tol;
    Ok((best, state.get_iter(), converged))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn feature_stats(x: &Matrix<f64>, standardize: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    if !standardize || n == 0 {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let mean: Vec<f64> = x.column_sums().data().iter().map(|s| s / n as f64).collect();
    let scale = (0..d)
        .map(|j| {
            let var = (0..n).map(|r| (x.get(r, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// A class that is always (or never) present has no finite optimum once the
/// bias is left unpenalised. It gets zero weights and the bias of the
/// add-half smoothed prior.
fn constant_label_fit(y: &[f64], d: usize) -> Option<Vec<f64>> {
    let pos = y.iter().filter(|&&v| v > 0.5).count();
    let n = y.len();
    if pos != 0 && pos != n {
        return None;
    }
    let odds = (2 * n + 1) as f64;
    let mut p = vec![0.0; d + 1];
    p[d] = if pos == n { odds.ln() } else { -odds.ln() };
    Some(p)
}

/// Fits the probe matching the embedding set's label type.
pub fn train_probe(emb: &EmbeddingSet, cfg: &ProbeConfig) -> Result<ProbeModel> {
    let targets = emb.targets()?;
    if !(cfg.c > 0.0) {
        return Err(Error::InvalidArgument(format!("regularisation C must be positive, got {}", cfg.c)));
    }
    let (mean, scale) = feature_stats(&emb.features, cfg.standardize);
    let mut model = ProbeModel {
        task: targets.task(),
        classes: targets.classes(),
        mean,
        scale,
        weights: vec![],
        iterations: vec![],
        converged: true,
    };
    let x = model.standardized(&emb.features);
    let d = x.cols();
    match targets {
        Targets::Single { labels, classes } => {
            let mut present = vec![false; *classes];
            labels.iter().for_each(|&l| present[l] = true);
            if present.iter().filter(|&&p| p).count() < 2 {
                return Err(Error::InvalidArgument("single-label probe needs at least two classes present".into()));
            }
            let problem = Softmax { x: &x, y: labels, classes: *classes, c: cfg.c };
            let grad = |p: &[f64]| Softmax { x: &x, y: labels, classes: *classes, c: cfg.c }.eval(p).1;
            let (p, iters, ok) = minimise(problem, classes * (d + 1), cfg, grad)?;
            model.weights = p.chunks(d + 1).map(<[f64]>::to_vec).collect();
            model.iterations = vec![iters];
            model.converged = ok;
        }
        Targets::Multi { classes, .. } => {
            if *classes == 0 {
                return Err(Error::InvalidArgument("multi-label probe with zero classes".into()));
            }
            let y = targets.indicator();
            let fits = (0..*classes)
                .into_par_iter()
                .map(|k| {
                    let col: Vec<f64> = (0..x.rows()).map(|r| y.get(r, k)).collect();
                    if let Some(p) = constant_label_fit(&col, d) {
                        return Ok((p, 0, true));
                    }
                    let grad = |p: &[f64]| Binary { x: &x, y: col.clone(), c: cfg.c }.eval(p).1;
                    minimise(Binary { x: &x, y: col.clone(), c: cfg.c }, d + 1, cfg, grad)
                })
                .collect::<Result<Vec<_>>>()?;
            for (p, iters, ok) in fits {
                model.weights.push(p);
                model.iterations.push(iters);
                model.converged &= ok;
            }
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean of the precision at each true positive's rank, scores sorted
/// descending with ties broken by index. No positives gives 0.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Precision, recall and F1 with 0/0 read as 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: Task,
    pub samples: usize,
    pub per_class_ap: Vec<f64>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_map: f64,
    pub macro_map: f64,
    /// Exact-match accuracy, single-label only.
    pub overall_accuracy: Option<f64>,
    pub probe: ProbeModel,
}

/// Metrics from class scores and decisions (both `samples x classes`).
pub fn score_predictions(
    task: Task,
    scores: &Matrix<f64>,
    decisions: &Matrix<f64>,
    truth: &Matrix<f64>,
) -> Result<(Vec<f64>, [f64; 8], Option<f64>)> {
    if scores.shape() != truth.shape() || decisions.shape() != truth.shape() {
        return Err(Error::Shape("scores, decisions and truth differ in shape".into()));
    }
    let (n, k) = truth.shape();
    let mut per_class = Vec::with_capacity(k);
    let mut confusions = vec![Confusion::default(); k];
    for c in 0..k {
        let s: Vec<f64> = (0..n).map(|r| scores.get(r, c)).collect();
        let t: Vec<bool> = (0..n).map(|r| truth.get(r, c) > 0.5).collect();
        per_class.push(average_precision(&s, &t));
        for r in 0..n {
            match (decisions.get(r, c) > 0.5, t[r]) {
                (true, true) => confusions[c].tp += 1,
                (true, false) => confusions[c].fp += 1,
                (false, true) => confusions[c].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let pooled = confusions.iter().fold(Confusion::default(), |a, c| Confusion {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let (mp, mr, mf) = pooled.prf();
    let kf = k.max(1) as f64;
    let (mut ap, mut ar, mut af) = (0.0, 0.0, 0.0);
    for c in &confusions {
        let (p, r, f) = c.prf();
        ap += p;
        ar += r;
        af += f;
    }
    let flat_truth: Vec<bool> = truth.data().iter().map(|&v| v > 0.5).collect();
    let micro_map = average_precision(scores.data(), &flat_truth);
    let macro_map = per_class.iter().sum::<f64>() / kf;
    let oa = (task == Task::Single).then(|| {
        let correct = (0..n).filter(|&r| (0..k).all(|c| (decisions.get(r, c) > 0.5) == (truth.get(r, c) > 0.5))).count();
        if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        }
    });
    Ok((per_class, [mp, mr, mf, ap / kf, ar / kf, af / kf, micro_map, macro_map], oa))
}

/// Scores a trained probe on a labelled embedding set.
pub fn evaluate_probe(probe: &ProbeModel, emb: &EmbeddingSet) -> Result<ProbeReport> {
    let targets = emb.targets()?;
    if targets.task() != probe.task || targets.classes() != probe.classes {
        return Err(Error::ConfigMismatch("probe and test labels disagree on task or class count".into()));
    }
    let scores = probe.predict_proba(&emb.features)?;
    let decisions = match probe.task {
        Task::Multi => scores.map(|p| if p >= 0.5 { 1.0 } else { 0.0 }),
        Task::Single => {
            let mut d = Matrix::zeros(scores.rows(), scores.cols());
            for r in 0..scores.rows() {
                let best = crate::moe::top_k_indices(scores.row(r), 1)[0];
                d.set(r, best, 1.0);
            }
            d
        }
    };
    let (per_class_ap, m, oa) = score_predictions(probe.task, &scores, &decisions, &targets.indicator())?;
    Ok(ProbeReport {
        task: probe.task,
        samples: emb.len(),
        per_class_ap,
        micro_precision: m[0],
        micro_recall: m[1],
        micro_f1: m[2],
        macro_precision: m[3],
        macro_recall: m[4],
        macro_f1: m[5],
        micro_map: m[6],
        macro_map: m[7],
        overall_accuracy: oa,
        probe: probe.clone(),
    })
}

impl ProbeReport {
    /// `metric,value` rows followed by `ap_class_<k>` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let rows = [
            ("micro_precision", self.micro_precision),
            ("micro_recall", self.micro_recall),
            ("micro_f1", self.micro_f1),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("micro_map", self.micro_map),
            ("macro_map", self.macro_map),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        if let Some(oa) = self.overall_accuracy {
            let _ = writeln!(s, "overall_accuracy,{oa}");
        }
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            let _ = writeln!(s, "ap_class_{c},{ap}");
        }
        s
    }
}

/// Deterministic shuffled split into `(train, test)` index lists.
pub fn holdout_split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ((n as f64) * test_fraction).round() as usize;
    let mut train = idx.split_off(test);
    let mut test = idx;
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct EmbeddingSidecar {
    rows: usize,
    cols: usize,
    mode: EmbeddingMode,
    dtype: String,
    targets: Option<Targets>,
}

/// CSV with `label` (ids joined by `;`) then one column per feature.
pub fn embeddings_csv(emb: &EmbeddingSet) -> String {
    let mut s = String::from("label");
    for j in 0..emb.features.cols() {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    let ind = emb.targets.as_ref().map(Targets::indicator);
    for r in 0..emb.len() {
        if let Some(ind) = &ind {
            let ids: Vec<String> = (0..ind.cols()).filter(|&c| ind.get(r, c) > 0.5).map(|c| c.to_string()).collect();
            s.push_str(&ids.join(";"));
        }
        for v in emb.features.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Raw little-endian f32 matrix plus a JSON sidecar at `<path>.json`.
pub fn save_embeddings_raw(emb: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = emb.features.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_atomic(path, &bytes)?;
    let side = EmbeddingSidecar {
        rows: emb.len(),
        cols: emb.features.cols(),
        mode: emb.mode,
        dtype: "f32le".into(),
        targets: emb.targets.clone(),
    };
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    write_atomic(Path::new(&sidecar), &serde_json::to_vec_pretty(&side)?)
}

pub fn load_embeddings_raw(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let side_bytes = std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let side: EmbeddingSidecar = serde_json::from_slice(&side_bytes)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side.rows * side.cols * 4 {
        return Err(Error::CountMismatch { declared: side.rows * side.cols, found: bytes.len() / 4 });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    EmbeddingSet::new(Matrix::from_vec(side.rows, side.cols, data)?, side.mode, side.targets)
}
