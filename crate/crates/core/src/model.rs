//! The masked autoencoder: patchification, masking, token assembly, the
//! staged MoE encoder, the lean MoE decoder, reconstruction losses and the
//! parameter census.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{self, BandStats, Chip};
use crate::error::{Error, Result};
use crate::metadata::{encode_metadata, MetadataEncoding, META_NAMES, META_TOKENS};
use crate::moe::{
    self, AttentionVars, BalanceWeights, BankVars, BlockVars, ExpertAblation, MoeForward, MoeOptions, RouterVars,
};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Metadata tokens plus the class token.
pub const PREFIX_TOKENS: usize = META_TOKENS + 1;
/// Row of the class token within each sequence.
pub const CLS_SLOT: usize = META_TOKENS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub kv_groups: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_kv_groups: usize,
    pub decoder: Vec<LayerSpec>,
    pub mask_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub balance: BalanceWeights,
    /// Noisy gating during training; inference paths always route without noise.
    pub router_noise: bool,
}

const DEFAULT_HIDDEN: [usize; 15] = [163, 156, 151, 145, 139, 134, 128, 122, 116, 110, 104, 99, 93, 87, 82];

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = DEFAULT_HIDDEN
            .iter()
            .enumerate()
            .map(|(l, &hidden)| LayerSpec { experts: 3 + l / 5, top_k: 2, hidden })
            .collect();
        Self {
            height: 40,
            width: 40,
            bands: 7,
            patch: 4,
            dim: 128,
            heads: 4,
            kv_groups: 2,
            encoder,
            decoder_dim: 64,
            decoder_heads: 4,
            decoder_kv_groups: 2,
            decoder: vec![LayerSpec { experts: 3, top_k: 2, hidden: 32 }; 2],
            mask_ratio: 0.75,
            alpha: 0.1,
            beta: 0.5,
            balance: BalanceWeights::default(),
            router_noise: true,
        }
    }
}

impl ModelConfig {
    /// 16x16 chips, `d = 8`, two encoder layers of three experts, no noise.
    pub fn tiny() -> Self {
        Self {
            height: 16,
            width: 16,
            dim: 8,
            encoder: vec![LayerSpec { experts: 3, top_k: 2, hidden: 6 }; 2],
            decoder_dim: 8,
            decoder: vec![LayerSpec { experts: 3, top_k: 2, hidden: 4 }; 2],
            router_noise: false,
            ..Self::default()
        }
    }

    /// 16x16 chips, `d = 32`, six staged layers. Trains in minutes on a CPU.
    pub fn small() -> Self {
        let encoder = [3, 3, 4, 4, 5, 5]
            .iter()
            .zip([40, 36, 32, 28, 24, 20])
            .map(|(&experts, hidden)| LayerSpec { experts, top_k: 2, hidden })
            .collect();
        Self {
            height: 16,
            width: 16,
            dim: 32,
            encoder,
            decoder_dim: 16,
            decoder: vec![LayerSpec { experts: 3, top_k: 2, hidden: 8 }; 2],
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "default" => Ok(Self::default()),
            other => Err(Error::InvalidArgument(format!("unknown profile {other:?} (tiny, small, default)"))),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch.max(1), self.width / self.patch.max(1))
    }

    pub fn patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.bands
    }

    /// Full sequence length with every patch visible.
    pub fn seq_len(&self) -> usize {
        PREFIX_TOKENS + self.patches()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 || self.patches() == 0 {
            return bad(format!("{}x{} chips are not divisible into {}-pixel patches", self.height, self.width, self.patch));
        }
        if self.bands == 0 || self.dim == 0 || self.decoder_dim == 0 {
            return bad("bands and widths must be positive".into());
        }
        for (what, d, h, g) in [
            ("encoder", self.dim, self.heads, self.kv_groups),
            ("decoder", self.decoder_dim, self.decoder_heads, self.decoder_kv_groups),
        ] {
            if h == 0 || g == 0 || h % g != 0 || d % h != 0 {
                return bad(format!("{what}: {h} heads / {g} groups do not fit width {d}"));
            }
        }
        for (l, s) in self.encoder.iter().chain(&self.decoder).enumerate() {
            if s.top_k == 0 || s.top_k > s.experts || s.hidden == 0 {
                return bad(format!("layer {l}: k={} E={} h={}", s.top_k, s.experts, s.hidden));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix<T>) {
        self.tensors.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }
}

fn block_layout(out: &mut Vec<(String, (usize, usize))>, prefix: &str, d: usize, heads: usize, groups: usize, s: &LayerSpec) {
    let hd = d / heads;
    let mut push = |name: &str, shape| out.push((format!("{prefix}.{name}"), shape));
    push("ln1.g", (1, d));
    push("ln1.b", (1, d));
    push("attn.q", (d, heads * hd));
    push("attn.k", (d, groups * hd));
    push("attn.v", (d, groups * hd));
    push("attn.o", (heads * hd, d));
    push("ln2.g", (1, d));
    push("ln2.b", (1, d));
    push("router.gate", (d, s.experts));
    push("router.noise", (d, s.experts));
    for e in 0..s.experts {
        push(&format!("expert.{e}.w1"), (d, s.hidden));
    }
    push("ffn.v", (d, s.hidden));
    push("ffn.w2", (s.hidden, d));
}

/// Every parameter name and shape, in construction order.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (d, dd, p) = (cfg.dim, cfg.decoder_dim, cfg.patch_len());
    let seq = cfg.seq_len();
    let mut out = vec![("patch_embed.w".to_string(), (p, d)), ("patch_embed.b".to_string(), (1, d))];
    for name in META_NAMES {
        out.push((format!("meta.{name}.w"), (2, d)));
        out.push((format!("meta.{name}.b"), (1, d)));
    }
    out.push(("cls".into(), (1, d)));
    out.push(("pos".into(), (seq, d)));
    for (l, s) in cfg.encoder.iter().enumerate() {
        block_layout(&mut out, &format!("enc.{l}"), d, cfg.heads, cfg.kv_groups, s);
    }
    out.push(("enc.norm.g".into(), (1, d)));
    out.push(("enc.norm.b".into(), (1, d)));
    out.push(("dec.embed.w".into(), (d, dd)));
    out.push(("dec.embed.b".into(), (1, dd)));
    out.push(("dec.mask_token".into(), (1, dd)));
    out.push(("dec.pos".into(), (seq, dd)));
    for (l, s) in cfg.decoder.iter().enumerate() {
        block_layout(&mut out, &format!("dec.{l}"), dd, cfg.decoder_heads, cfg.decoder_kv_groups, s);
    }
    out.push(("dec.norm.g".into(), (1, dd)));
    out.push(("dec.norm.b".into(), (1, dd)));
    out.push(("dec.head.w".into(), (dd, p)));
    out.push(("dec.head.b".into(), (1, p)));
    out
}

/// Parameters exempt from weight decay: norms, biases, position tables,
/// metadata projections and the learned class/mask tokens.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".g")
        || name.ends_with(".b")
        || name == "pos"
        || name == "dec.pos"
        || name == "cls"
        || name == "dec.mask_token"
        || name.starts_with("meta.")
}

const EMBED_STD: f64 = 0.02;

fn init_tensor<T: Scalar>(name: &str, (rows, cols): (usize, usize), rng: &mut ChaCha8Rng) -> Matrix<T> {
    if name.ends_with(".g") {
        return Matrix::filled(rows, cols, T::one());
    }
    if name.ends_with(".b") || name.ends_with("router.noise") {
        return Matrix::zeros(rows, cols);
    }
    if matches!(name, "pos" | "dec.pos" | "cls" | "dec.mask_token") {
        let n = Normal::new(0.0, EMBED_STD).expect("valid std");
        return Matrix::from_fn(rows, cols, |_, _| T::of(n.sample(rng)));
    }
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let u = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Matrix::from_fn(rows, cols, |_, _| T::of(u.sample(rng)))
}

// ---------------------------------------------------------------------------
// Patches and masking
// ---------------------------------------------------------------------------

/// `H x W x C` pixels (row-major, band fastest) to an `N x (p·p·C)` matrix
/// of patches in raster order, each flattened in (row, col, band) order.
pub fn patchify<T: Scalar>(pixels: &[T], height: usize, width: usize, bands: usize, p: usize) -> Result<Matrix<T>> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::Shape(format!("{height}x{width} is not divisible by patch size {p}")));
    }
    if pixels.len() != height * width * bands {
        return Err(Error::Shape(format!("{} values for a {height}x{width}x{bands} image", pixels.len())));
    }
    let (gr, gc) = (height / p, width / p);
    let mut out = Matrix::zeros(gr * gc, p * p * bands);
    for pr in 0..gr {
        for pc in 0..gc {
            let row = out.row_mut(pr * gc + pc);
            for dy in 0..p {
                let src = ((pr * p + dy) * width + pc * p) * bands;
                row[dy * p * bands..(dy + 1) * p * bands].copy_from_slice(&pixels[src..src + p * bands]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Matrix<T>, p: usize, height: usize, width: usize) -> Result<Vec<T>> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::Shape(format!("{height}x{width} is not divisible by patch size {p}")));
    }
    let (gr, gc) = (height / p, width / p);
    if patches.rows() != gr * gc || patches.cols() % (p * p) != 0 || patches.cols() == 0 {
        return Err(Error::Shape(format!(
            "{:?} patches for a {height}x{width} image with p={p}",
            patches.shape()
        )));
    }
    let bands = patches.cols() / (p * p);
    let mut out = vec![T::zero(); height * width * bands];
    for pr in 0..gr {
        for pc in 0..gc {
            let row = patches.row(pr * gc + pc);
            for dy in 0..p {
                let dst = ((pr * p + dy) * width + pc * p) * bands;
                out[dst..dst + p * bands].copy_from_slice(&row[dy * p * bands..(dy + 1) * p * bands]);
            }
        }
    }
    Ok(out)
}

/// Which patches the encoder sees.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Ascending.
    pub visible: Vec<usize>,
    /// Ascending.
    pub masked: Vec<usize>,
    /// `restore[j]` is the position of patch `j` in `visible ++ masked`.
    pub restore: Vec<usize>,
}

impl MaskPlan {
    /// Every patch visible.
    pub fn full(n: usize) -> Self {
        Self::from_masked(n, Vec::new()).expect("empty mask is valid")
    }

    pub fn from_masked(n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= n) {
            return Err(Error::InvalidArgument(format!("masked index out of range for {n} patches")));
        }
        let mut is_masked = vec![false; n];
        for &m in &masked {
            is_masked[m] = true;
        }
        let visible: Vec<usize> = (0..n).filter(|&j| !is_masked[j]).collect();
        let mut restore = vec![0; n];
        for (pos, &j) in visible.iter().chain(&masked).enumerate() {
            restore[j] = pos;
        }
        Ok(Self { visible, masked, restore })
    }

    pub fn patches(&self) -> usize {
        self.restore.len()
    }
}

/// Masks `round(n·r)` patches chosen uniformly without replacement.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let m = ((n as f64) * ratio).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.truncate(m);
    MaskPlan::from_masked(n, order)
}

/// A normalised chip ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ChipInput<T> {
    /// `N x (p·p·C)`.
    pub patches: Matrix<T>,
    pub meta: MetadataEncoding<T>,
}

impl<T: Scalar> ChipInput<T> {
    pub fn from_chip(chip: &Chip, stats: &BandStats, patch: usize) -> Result<Self> {
        let norm = data::normalize(chip, stats)?;
        let pixels: Vec<T> = norm.pixels.iter().map(|&v| T::of(v as f64)).collect();
        Ok(Self {
            patches: patchify(&pixels, chip.height, chip.width, chip.bands, patch)?,
            meta: encode_metadata(&chip.meta, chip.metadata_present),
        })
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Parameter variables bound on one graph.
pub struct Bound<'a> {
    pub config: &'a ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl<'a> Bound<'a> {
    pub fn new<T: Scalar>(g: &mut Graph<T>, config: &'a ModelConfig, params: &ParamStore<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, m)| (k.clone(), if trainable { g.param(m.clone()) } else { g.constant(m.clone()) }))
            .collect();
        Self { config, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn block(&self, prefix: &str, spec: &LayerSpec, heads: usize, groups: usize, noise: bool) -> Result<BlockVars> {
        let v = |n: &str| self.var(&format!("{prefix}.{n}"));
        Ok(BlockVars {
            norm1_gain: v("ln1.g")?,
            norm1_bias: v("ln1.b")?,
            attention: AttentionVars {
                query: v("attn.q")?,
                key: v("attn.k")?,
                value: v("attn.v")?,
                out: v("attn.o")?,
                heads,
                kv_groups: groups,
            },
            norm2_gain: v("ln2.g")?,
            norm2_bias: v("ln2.b")?,
            bank: BankVars {
                gate_proj: (0..spec.experts).map(|e| v(&format!("expert.{e}.w1"))).collect::<Result<_>>()?,
                value_proj: v("ffn.v")?,
                out_proj: v("ffn.w2")?,
            },
            router: RouterVars {
                gate: v("router.gate")?,
                noise: v("router.noise")?,
                top_k: spec.top_k,
                noise_enabled: noise,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Route without noise regardless of the configuration.
    pub deterministic: bool,
    /// Encoder layer and expert to disable.
    pub ablation: Option<(usize, ExpertAblation)>,
    /// Encoder layer whose expert contributions are recorded.
    pub capture_layer: Option<usize>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self { deterministic: true, ..Self::default() }
    }
}

pub struct Encoded<T> {
    /// Encoder output, sequences stacked chip after chip.
    pub tokens: Var,
    /// `(start row, length)` per chip.
    pub segments: Vec<(usize, usize)>,
    pub layers: Vec<MoeForward<T>>,
    /// Sum of per-layer balance losses.
    pub moe_loss: Var,
}

/// Token assembly followed by the encoder stack. Returns the final-normed
/// tokens `[week, hour, lat, lon, cls, visible patches…]` per chip.
pub fn encode<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    b: &Bound<'_>,
    inputs: &[ChipInput<T>],
    plans: &[MaskPlan],
    rng: &mut R,
    opts: ForwardOptions,
) -> Result<Encoded<T>> {
    let cfg = b.config;
    let (n, plen) = (cfg.patches(), cfg.patch_len());
    if inputs.len() != plans.len() || inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} inputs with {} mask plans", inputs.len(), plans.len())));
    }
    for (inp, plan) in inputs.iter().zip(plans) {
        if inp.patches.shape() != (n, plen) || plan.patches() != n {
            return Err(Error::Shape(format!(
                "chip patches {:?} / plan over {} patches, model expects ({n}, {plen})",
                inp.patches.shape(),
                plan.patches()
            )));
        }
    }
    if let Some((l, a)) = opts.ablation {
        let spec = cfg.encoder.get(l).ok_or(Error::LayerOutOfRange { layer: l, layers: cfg.encoder.len() })?;
        if a.expert() >= spec.experts {
            return Err(Error::InvalidArgument(format!("expert {} of {} at layer {l}", a.expert(), spec.experts)));
        }
    }
    if let Some(l) = opts.capture_layer {
        if l >= cfg.encoder.len() {
            return Err(Error::LayerOutOfRange { layer: l, layers: cfg.encoder.len() });
        }
    }
    let bsz = inputs.len();

    let mut parts = Vec::with_capacity(PREFIX_TOKENS + 1);
    for (i, name) in META_NAMES.iter().enumerate() {
        let enc = Matrix::from_fn(bsz, 2, |c, k| if k == 0 { inputs[c].meta.pairs[i].0 } else { inputs[c].meta.pairs[i].1 });
        let enc = g.constant(enc);
        let w = b.var(&format!("meta.{name}.w"))?;
        let bias = b.var(&format!("meta.{name}.b"))?;
        let proj = g.matmul(enc, w);
        parts.push(g.add_row(proj, bias));
    }
    let cls = b.var("cls")?;
    parts.push(g.gather_rows(cls, vec![0; bsz]));

    let vis_rows: Vec<&[T]> =
        inputs.iter().zip(plans).flat_map(|(inp, plan)| plan.visible.iter().map(|&j| inp.patches.row(j))).collect();
    let total_vis = vis_rows.len();
    let vis = Matrix::from_fn(total_vis, plen, |r, c| vis_rows[r][c]);
    let vis = g.constant(vis);
    let pe = g.matmul(vis, b.var("patch_embed.w")?);
    parts.push(g.add_row(pe, b.var("patch_embed.b")?));
    let stacked = g.concat_rows(&parts);

    let mut order = Vec::new();
    let mut slots = Vec::new();
    let mut segments = Vec::with_capacity(bsz);
    let mut vis_offset = 0;
    for (c, plan) in plans.iter().enumerate() {
        segments.push((order.len(), PREFIX_TOKENS + plan.visible.len()));
        for s in 0..PREFIX_TOKENS {
            order.push(s * bsz + c);
            slots.push(s);
        }
        for (k, &j) in plan.visible.iter().enumerate() {
            order.push(PREFIX_TOKENS * bsz + vis_offset + k);
            slots.push(PREFIX_TOKENS + j);
        }
        vis_offset += plan.visible.len();
    }
    let tokens = g.gather_rows(stacked, order);
    let pos = g.gather_rows(b.var("pos")?, slots);
    let mut x = g.add(tokens, pos);

    let noise = cfg.router_noise && !opts.deterministic;
    let mut layers = Vec::with_capacity(cfg.encoder.len());
    for (l, spec) in cfg.encoder.iter().enumerate() {
        let bv = b.block(&format!("enc.{l}"), spec, cfg.heads, cfg.kv_groups, noise)?;
        let mo = MoeOptions {
            ablation: opts.ablation.filter(|&(al, _)| al == l).map(|(_, a)| a),
            capture_contributions: opts.capture_layer == Some(l),
        };
        let (y, f) = moe::encoder_block_op(g, x, &bv, &segments, &cfg.balance, rng, mo)?;
        x = y;
        layers.push(f);
    }
    let x = g.layer_norm(x, b.var("enc.norm.g")?, b.var("enc.norm.b")?, T::of(moe::LAYER_NORM_EPS));
    let moe_loss = match layers.split_first() {
        None => g.constant(Matrix::scalar(T::zero())),
        Some((first, rest)) => rest.iter().fold(first.loss, |acc, f| g.add(acc, f.loss)),
    };
    Ok(Encoded { tokens: x, segments, layers, moe_loss })
}

/// Decoder over encoder output; returns `(B·N) x (p·p·C)` predictions in
/// original patch order, chip after chip.
pub fn decode<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    b: &Bound<'_>,
    enc: &Encoded<T>,
    plans: &[MaskPlan],
    rng: &mut R,
    opts: ForwardOptions,
) -> Result<Var> {
    let cfg = b.config;
    let n = cfg.patches();
    let seq = cfg.seq_len();
    let embedded = g.matmul(enc.tokens, b.var("dec.embed.w")?);
    let embedded = g.add_row(embedded, b.var("dec.embed.b")?);
    let mask_row = g.value(embedded).rows();
    let with_mask = g.concat_rows(&[embedded, b.var("dec.mask_token")?]);

    let mut order = Vec::with_capacity(plans.len() * seq);
    for (plan, &(start, _)) in plans.iter().zip(&enc.segments) {
        order.extend(start..start + PREFIX_TOKENS);
        let nvis = plan.visible.len();
        for j in 0..n {
            let pos = plan.restore[j];
            order.push(if pos < nvis { start + PREFIX_TOKENS + pos } else { mask_row });
        }
    }
    let x = g.gather_rows(with_mask, order);
    let slots: Vec<usize> = (0..plans.len()).flat_map(|_| 0..seq).collect();
    let pos = g.gather_rows(b.var("dec.pos")?, slots);
    let mut x = g.add(x, pos);

    let segments: Vec<(usize, usize)> = (0..plans.len()).map(|c| (c * seq, seq)).collect();
    let noise = cfg.router_noise && !opts.deterministic;
    for (l, spec) in cfg.decoder.iter().enumerate() {
        let bv = b.block(&format!("dec.{l}"), spec, cfg.decoder_heads, cfg.decoder_kv_groups, noise)?;
        let (y, _) = moe::encoder_block_op(g, x, &bv, &segments, &cfg.balance, rng, MoeOptions::default())?;
        x = y;
    }
    let x = g.layer_norm(x, b.var("dec.norm.g")?, b.var("dec.norm.b")?, T::of(moe::LAYER_NORM_EPS));
    let patch_rows: Vec<usize> = (0..plans.len()).flat_map(|c| (0..n).map(move |j| c * seq + PREFIX_TOKENS + j)).collect();
    let x = g.gather_rows(x, patch_rows);
    let y = g.matmul(x, b.var("dec.head.w")?);
    Ok(g.add_row(y, b.var("dec.head.b")?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub masked: f64,
    pub unmasked: f64,
    pub moe_layers: Vec<f64>,
    pub moe: f64,
    pub total: f64,
}

/// `L = L_masked + α·L_unmasked + β·Σ L_MoE`.
pub fn total_loss(masked: f64, unmasked: f64, moe_layers: Vec<f64>, alpha: f64, beta: f64) -> LossBreakdown {
    let moe: f64 = moe_layers.iter().sum();
    LossBreakdown { masked, unmasked, total: masked + alpha * unmasked + beta * moe, moe_layers, moe }
}

/// Per-element mean squared error averaged over the masked and visible
/// patch sets. An empty set scores 0.
pub fn reconstruction_losses<T: Scalar>(pred: &Matrix<T>, target: &Matrix<T>, plan: &MaskPlan) -> Result<(T, T)> {
    if pred.shape() != target.shape() || pred.rows() != plan.patches() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let mse = |set: &[usize]| {
        if set.is_empty() {
            return T::zero();
        }
        let sq: T = set
            .iter()
            .flat_map(|&j| pred.row(j).iter().zip(target.row(j)).map(|(&a, &b)| (a - b) * (a - b)))
            .sum();
        sq / T::of((set.len() * pred.cols()) as f64)
    };
    Ok((mse(&plan.masked), mse(&plan.visible)))
}

pub struct Forward<T> {
    pub encoded: Encoded<T>,
    pub pred: Var,
    pub masked: Var,
    pub unmasked: Var,
    pub loss: Var,
}

impl<T: Scalar> Forward<T> {
    pub fn breakdown(&self, g: &Graph<T>, cfg: &ModelConfig) -> LossBreakdown {
        let layers = self.encoded.layers.iter().map(|f| g.value(f.loss).item().as_f64()).collect();
        total_loss(g.value(self.masked).item().as_f64(), g.value(self.unmasked).item().as_f64(), layers, cfg.alpha, cfg.beta)
    }
}

/// Encoder, decoder and the weighted objective for a batch.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    b: &Bound<'_>,
    inputs: &[ChipInput<T>],
    plans: &[MaskPlan],
    rng: &mut R,
    opts: ForwardOptions,
) -> Result<Forward<T>> {
    let cfg = b.config;
    let encoded = encode(g, b, inputs, plans, rng, opts)?;
    let pred = decode(g, b, &encoded, plans, rng, opts)?;
    let n = cfg.patches();
    let bsz = inputs.len();
    let plen = cfg.patch_len();
    let target = Matrix::from_fn(bsz * n, plen, |r, c| inputs[r / n].patches.get(r % n, c));
    let mut wm = vec![T::zero(); bsz * n];
    let mut wu = vec![T::zero(); bsz * n];
    for (c, plan) in plans.iter().enumerate() {
        for (set, w) in [(&plan.masked, &mut wm), (&plan.visible, &mut wu)] {
            if set.is_empty() {
                continue;
            }
            let weight = T::one() / T::of((bsz * set.len() * plen) as f64);
            for &j in set {
                w[c * n + j] = weight;
            }
        }
    }
    let masked = g.weighted_sq_error(pred, target.clone(), wm);
    let unmasked = g.weighted_sq_error(pred, target, wu);
    let su = g.scale(unmasked, T::of(cfg.alpha));
    let sm = g.scale(encoded.moe_loss, T::of(cfg.beta));
    let l = g.add(masked, su);
    let loss = g.add(l, sm);
    Ok(Forward { encoded, pred, masked, unmasked, loss })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MoeMae<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> MoeMae<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in layout(&config) {
            let m = init_tensor(&name, shape, &mut rng);
            params.insert(name, m);
        }
        Ok(Self { config, params })
    }

    /// Checks that `params` holds exactly the tensors `config` needs.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let want = layout(&config);
        for (name, shape) in &want {
            let m = params.get(name)?;
            if m.shape() != *shape {
                return Err(Error::ConfigMismatch(format!("{name} is {:?}, config needs {shape:?}", m.shape())));
            }
        }
        if params.len() != want.len() {
            let extra = params.names().find(|n| !want.iter().any(|(w, _)| w == *n)).cloned().unwrap_or_default();
            return Err(Error::ConfigMismatch(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> MoeMae<U> {
        MoeMae { config: self.config.clone(), params: self.params.cast() }
    }

    /// Loss breakdown and parameter gradients for one batch.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        inputs: &[ChipInput<T>],
        plans: &[MaskPlan],
        rng: &mut R,
    ) -> Result<(LossBreakdown, ParamStore<T>, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.config, &self.params, true);
        let f = forward(&mut g, &b, inputs, plans, rng, ForwardOptions::default())?;
        let breakdown = f.breakdown(&g, &self.config);
        let importance = f.encoded.layers.iter().map(|l| g.value(l.routing.gates).column_sums().into_vec()).collect();
        g.backward(f.loss);
        let mut grads = ParamStore::new();
        for (name, &v) in b.vars() {
            let m = g.grad(v).cloned().unwrap_or_else(|| {
                let (r, c) = g.value(v).shape();
                Matrix::zeros(r, c)
            });
            grads.insert(name.clone(), m);
        }
        Ok((breakdown, grads, importance))
    }

    /// Loss breakdown without gradients.
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        inputs: &[ChipInput<T>],
        plans: &[MaskPlan],
        rng: &mut R,
        opts: ForwardOptions,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::inference();
        let b = Bound::new(&mut g, &self.config, &self.params, false);
        let f = forward(&mut g, &b, inputs, plans, rng, opts)?;
        Ok(f.breakdown(&g, &self.config))
    }

    /// Encoder output for one chip plus per-layer balance losses.
    pub fn encode_chip<R: Rng + ?Sized>(
        &self,
        input: &ChipInput<T>,
        plan: &MaskPlan,
        rng: &mut R,
        opts: ForwardOptions,
    ) -> Result<(Matrix<T>, Vec<T>)> {
        let mut g = Graph::inference();
        let b = Bound::new(&mut g, &self.config, &self.params, false);
        let e = encode(&mut g, &b, std::slice::from_ref(input), std::slice::from_ref(plan), rng, opts)?;
        let losses = e.layers.iter().map(|f| g.value(f.loss).item()).collect();
        Ok((g.value(e.tokens).clone(), losses))
    }

    /// Deterministic encoder outputs for a batch of unmasked chips, one
    /// `(5+N) x d` matrix per chip.
    pub fn embed_batch(&self, inputs: &[ChipInput<T>]) -> Result<Vec<Matrix<T>>> {
        let plans = vec![MaskPlan::full(self.config.patches()); inputs.len()];
        let mut g = Graph::inference();
        let b = Bound::new(&mut g, &self.config, &self.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = encode(&mut g, &b, inputs, &plans, &mut rng, ForwardOptions::inference())?;
        let out = g.value(e.tokens);
        Ok(e.segments.iter().map(|&(s, l)| out.select_rows(&(s..s + l).collect::<Vec<_>>())).collect())
    }

    /// Deterministic reconstruction (`N x p·p·C`, normalised units).
    pub fn reconstruct(&self, input: &ChipInput<T>, plan: &MaskPlan) -> Result<Matrix<T>> {
        let mut g = Graph::inference();
        let b = Bound::new(&mut g, &self.config, &self.params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = ForwardOptions::inference();
        let plans = std::slice::from_ref(plan);
        let e = encode(&mut g, &b, std::slice::from_ref(input), plans, &mut rng, opts)?;
        let pred = decode(&mut g, &b, &e, plans, &mut rng, opts)?;
        Ok(g.value(pred).clone())
    }
}

// ---------------------------------------------------------------------------
// Census
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub total: usize,
    pub encoder_total: usize,
    pub decoder_total: usize,
    /// `E_l · d · h_l` per encoder layer.
    pub expert_unique: Vec<usize>,
    /// Shared value/output projections over all encoder layers.
    pub shared_ffn: usize,
    pub router: usize,
    pub attention: usize,
    pub norms: usize,
    /// Patch, metadata, class-token and positional parameters.
    pub embeddings: usize,
}

impl Census {
    pub fn expert_unique_total(&self) -> usize {
        self.expert_unique.iter().sum()
    }
}

/// Exact parameter counts by category.
pub fn parameter_census(cfg: &ModelConfig) -> Census {
    let mut c = Census {
        total: 0,
        encoder_total: 0,
        decoder_total: 0,
        expert_unique: vec![0; cfg.encoder.len()],
        shared_ffn: 0,
        router: 0,
        attention: 0,
        norms: 0,
        embeddings: 0,
    };
    for (name, (r, k)) in layout(cfg) {
        let n = r * k;
        c.total += n;
        if name.starts_with("dec.") {
            c.decoder_total += n;
            continue;
        }
        c.encoder_total += n;
        if let Some(rest) = name.strip_prefix("enc.") {
            let (layer, field) = rest.split_once('.').unwrap_or(("", rest));
            match layer.parse::<usize>() {
                Ok(l) if field.starts_with("expert.") => c.expert_unique[l] += n,
                Ok(_) if field.starts_with("ffn.") => c.shared_ffn += n,
                Ok(_) if field.starts_with("router.") => c.router += n,
                Ok(_) if field.starts_with("attn.") => c.attention += n,
                _ => c.norms += n,
            }
        } else {
            c.embeddings += n;
        }
    }
    c
}
