//! Expert interpretability: per-patch contribution and ablation maps,
//! routing histograms, the per-layer sparsity census, and CSV / PPM export.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{BandStats, Chip};
use crate::error::{Error, Result};
use crate::model::{self, Bound, ChipInput, ForwardOptions, MaskPlan, ModelConfig, MoeMae, PREFIX_TOKENS};
use crate::moe::ExpertAblation;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const HISTOGRAM_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Drop the expert from each token's selection and renormalise the rest.
    #[default]
    Renormalize,
    /// Route over the remaining experts.
    Reroute,
}

impl AblationMode {
    pub fn of(self, expert: usize) -> ExpertAblation {
        match self {
            Self::Renormalize => ExpertAblation::Renormalize(expert),
            Self::Reroute => ExpertAblation::Reroute(expert),
        }
    }
}

/// Per-patch maps at one encoder layer. Rows follow the patch raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertMaps {
    pub layer: usize,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// `N x E` norms of gated expert outputs.
    pub contributions: Matrix<f64>,
    /// Expert with the largest contribution per patch.
    pub top1: Vec<usize>,
    /// `N x E` change of the final patch embeddings with the expert disabled.
    pub ablation: Option<Matrix<f64>>,
}

impl ExpertMaps {
    pub fn experts(&self) -> usize {
        self.contributions.cols()
    }
}

fn check_layer(cfg: &ModelConfig, layer: usize) -> Result<()> {
    if layer >= cfg.encoder.len() {
        return Err(Error::LayerOutOfRange { layer, layers: cfg.encoder.len() });
    }
    Ok(())
}

fn to_f64<T: Scalar>(m: &Matrix<T>) -> Matrix<f64> {
    m.cast()
}

fn patch_rows<T: Scalar>(tokens: &Matrix<T>) -> Matrix<T> {
    tokens.select_rows(&(PREFIX_TOKENS..tokens.rows()).collect::<Vec<_>>())
}

fn argmax(row: &[f64]) -> usize {
    crate::moe::top_k_indices(row, 1).first().copied().unwrap_or(0)
}

/// Deterministic, unmasked encoder pass with optional ablation; returns the
/// final tokens and the captured contributions at `capture`.
fn run<T: Scalar>(
    model: &MoeMae<T>,
    input: &ChipInput<T>,
    ablation: Option<(usize, ExpertAblation)>,
    capture: Option<usize>,
) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
    let plan = MaskPlan::full(model.config.patches());
    let mut g = Graph::inference();
    let b = Bound::new(&mut g, &model.config, &model.params, false);
    let opts = ForwardOptions { deterministic: true, ablation, capture_layer: capture };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut e = model::encode(&mut g, &b, std::slice::from_ref(input), std::slice::from_ref(&plan), &mut rng, opts)?;
    let contrib = capture.and_then(|l| e.layers[l].contributions.take());
    Ok((g.value(e.tokens).clone(), contrib))
}

/// `C[i, e] = ‖g_{i,e} f_e(z_i)‖` for the patch tokens of one chip.
pub fn contribution_maps<T: Scalar>(model: &MoeMae<T>, input: &ChipInput<T>, layer: usize) -> Result<ExpertMaps> {
    check_layer(&model.config, layer)?;
    let (_, contrib) = run(model, input, None, Some(layer))?;
    let contrib = contrib.ok_or_else(|| Error::InvalidArgument("contributions were not captured".into()))?;
    let contributions = to_f64(&patch_rows(&contrib));
    let top1 = (0..contributions.rows()).map(|r| argmax(contributions.row(r))).collect();
    Ok(ExpertMaps { layer, grid: model.config.grid(), contributions, top1, ablation: None })
}

/// `Δ[i, e] = ‖y_i − y_i^(−e)‖` over final patch embeddings, one column per
/// expert at `layer`.
pub fn ablation_maps<T: Scalar>(model: &MoeMae<T>, input: &ChipInput<T>, layer: usize, mode: AblationMode) -> Result<Matrix<f64>> {
    check_layer(&model.config, layer)?;
    let experts = model.config.encoder[layer].experts;
    let (base, _) = run(model, input, None, None)?;
    let base = to_f64(&patch_rows(&base));
    let cols = (0..experts)
        .into_par_iter()
        .map(|e| {
            let (y, _) = run(model, input, Some((layer, mode.of(e))), None)?;
            let y = to_f64(&patch_rows(&y));
            Ok((0..base.rows())
                .map(|r| base.row(r).iter().zip(y.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_fn(base.rows(), experts, |r, e| cols[e][r]))
}

/// Contribution and ablation maps together.
pub fn expert_maps<T: Scalar>(model: &MoeMae<T>, input: &ChipInput<T>, layer: usize, mode: AblationMode) -> Result<ExpertMaps> {
    let mut maps = contribution_maps(model, input, layer)?;
    maps.ablation = Some(ablation_maps(model, input, layer, mode)?);
    Ok(maps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingHistogram {
    pub layer: usize,
    /// Encoder tokens routed (metadata, class and patch tokens).
    pub tokens: usize,
    /// Top-k memberships per expert.
    pub counts: Vec<usize>,
    /// Summed gate weight per expert.
    pub importance: Vec<f64>,
}

impl RoutingHistogram {
    /// Plain coefficient of variation of the importance sums.
    pub fn importance_cv(&self) -> f64 {
        crate::moe::cv(&self.importance)
    }
}

/// Noise-free routing statistics at `layer` over unmasked chips.
pub fn routing_histogram<T: Scalar>(model: &MoeMae<T>, chips: &[Chip], stats: &BandStats, layer: usize) -> Result<RoutingHistogram> {
    let cfg = &model.config;
    check_layer(cfg, layer)?;
    let experts = cfg.encoder[layer].experts;
    let mut hist = RoutingHistogram { layer, tokens: 0, counts: vec![0; experts], importance: vec![0.0; experts] };
    for chunk in chips.chunks(HISTOGRAM_CHUNK) {
        let inputs = chunk.iter().map(|c| ChipInput::from_chip(c, stats, cfg.patch)).collect::<Result<Vec<_>>>()?;
        let plans = vec![MaskPlan::full(cfg.patches()); inputs.len()];
        let mut g = Graph::inference();
        let b = Bound::new(&mut g, cfg, &model.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = model::encode(&mut g, &b, &inputs, &plans, &mut rng, ForwardOptions::inference())?;
        let routing = &e.layers[layer].routing;
        let gates = g.value(routing.gates);
        for (t, sel) in routing.indices.iter().enumerate() {
            for &x in sel {
                hist.counts[x] += 1;
            }
            for (x, imp) in hist.importance.iter_mut().enumerate() {
                *imp += gates.get(t, x).as_f64();
            }
        }
        hist.tokens += routing.indices.len();
    }
    Ok(hist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityLayer {
    pub layer: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    /// `E · d · h` expert-specific parameters.
    pub expert_unique: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<SparsityLayer>,
    pub total_unique: usize,
    pub encoder_total: usize,
    /// Encoder parameters every token uses.
    pub always_on: usize,
    /// Per-token expert-specific parameters, `Σ (k/E)·unique`.
    pub activated_expert: f64,
    pub expert_ffn_activated_fraction: f64,
    pub overall_activated_fraction: f64,
}

pub fn sparsity_report(cfg: &ModelConfig) -> SparsityReport {
    let census = model::parameter_census(cfg);
    let layers: Vec<SparsityLayer> = cfg
        .encoder
        .iter()
        .enumerate()
        .map(|(l, s)| SparsityLayer {
            layer: l,
            experts: s.experts,
            top_k: s.top_k,
            hidden: s.hidden,
            expert_unique: s.experts * cfg.dim * s.hidden,
            ratio: s.top_k as f64 / s.experts as f64,
        })
        .collect();
    let total_unique: usize = layers.iter().map(|l| l.expert_unique).sum();
    let activated_expert: f64 = layers.iter().map(|l| l.ratio * l.expert_unique as f64).sum();
    let always_on = census.encoder_total - total_unique;
    let frac = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    SparsityReport {
        expert_ffn_activated_fraction: frac(activated_expert, total_unique),
        overall_activated_fraction: frac(always_on as f64 + activated_expert, census.encoder_total),
        layers,
        total_unique,
        encoder_total: census.encoder_total,
        always_on,
        activated_expert,
    }
}

/// `row,col,expert,<value_name>` with one line per patch and expert.
pub fn grid_csv(values: &Matrix<f64>, grid: (usize, usize), value_name: &str) -> Result<String> {
    if values.rows() != grid.0 * grid.1 {
        return Err(Error::Shape(format!("{} rows for a {}x{} grid", values.rows(), grid.0, grid.1)));
    }
    let mut s = format!("row,col,expert,{value_name}\n");
    for i in 0..values.rows() {
        for e in 0..values.cols() {
            let _ = writeln!(s, "{},{},{e},{}", i / grid.1, i % grid.1, values.get(i, e));
        }
    }
    Ok(s)
}

pub fn contribution_csv(maps: &ExpertMaps) -> Result<String> {
    grid_csv(&maps.contributions, maps.grid, "value")
}

pub fn ablation_csv(maps: &ExpertMaps) -> Result<String> {
    let delta = maps.ablation.as_ref().ok_or_else(|| Error::InvalidArgument("maps carry no ablation".into()))?;
    grid_csv(delta, maps.grid, "delta")
}

/// Binary (P6) portable pixmap.
pub fn ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!("{} bytes for a {width}x{height} RGB image", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

/// First three bands (repeated when fewer), each min-max stretched to 0..255.
pub fn chip_rgb(height: usize, width: usize, bands: usize, pixels: &[f32]) -> Vec<u8> {
    let pick: Vec<usize> = (0..3).map(|i| i.min(bands.saturating_sub(1))).collect();
    let mut out = vec![0u8; height * width * 3];
    for (c, &b) in pick.iter().enumerate() {
        let vals = pixels.iter().skip(b).step_by(bands.max(1));
        let (lo, hi) = vals.clone().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (px, &v) in vals.enumerate() {
            out[px * 3 + c] = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Chip RGB blended with a per-expert colour for each patch's top-1 expert.
pub fn top1_overlay(chip: &Chip, maps: &ExpertMaps, patch: usize, alpha: f64) -> Result<Vec<u8>> {
    let (gh, gw) = maps.grid;
    if gh * patch != chip.height || gw * patch != chip.width || maps.top1.len() != gh * gw {
        return Err(Error::Shape("maps do not cover the chip".into()));
    }
    let mut rgb = chip_rgb(chip.height, chip.width, chip.bands, &chip.pixels);
    for y in 0..chip.height {
        for x in 0..chip.width {
            let colour = PALETTE[maps.top1[(y / patch) * gw + x / patch] % PALETTE.len()];
            for c in 0..3 {
                let v = &mut rgb[(y * chip.width + x) * 3 + c];
                *v = ((1.0 - alpha) * f64::from(*v) + alpha * f64::from(colour[c])).round() as u8;
            }
        }
    }
    ppm(chip.width, chip.height, &rgb)
}

/// Grey-scale heat map of one expert column, each patch drawn as a
/// `patch x patch` block and scaled by the column maximum.
pub fn heatmap(values: &Matrix<f64>, grid: (usize, usize), expert: usize, patch: usize) -> Result<Vec<u8>> {
    if expert >= values.cols() || values.rows() != grid.0 * grid.1 {
        return Err(Error::Shape(format!("expert {expert} of a {:?} map", values.shape())));
    }
    let max = (0..values.rows()).map(|r| values.get(r, expert)).fold(0.0, f64::max);
    let (h, w) = (grid.0 * patch, grid.1 * patch);
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let v = values.get((y / patch) * grid.1 + x / patch, expert);
            let level = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
            rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(level);
        }
    }
    ppm(w, h, &rgb)
}
