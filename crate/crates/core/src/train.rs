//! Pretraining: AdamW, the warmup + cosine schedule, the epoch loop and the
//! checkpoint format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BandStats, Chip};
use crate::error::{Error, Result};
use crate::model::{is_no_decay, random_mask, ChipInput, MoeMae, ModelConfig, ParamStore};
use crate::moe;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GMOE";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "epoch,l_masked,l_unmasked,l_moe,l_total,lr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Apply weight decay to norms, biases, position tables and learned tokens too.
    pub decay_all: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub mask_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            base_lr: 3e-4,
            min_lr: 0.0,
            warmup_fraction: 0.05,
            weight_decay: 0.05,
            decay_all: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            alpha: 0.1,
            beta: 0.5,
            mask_ratio: 0.75,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_fraction * total as f64).round() as usize
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at
/// `step == total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps(total);
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm);
    let p = if span == 0 { 1.0 } else { ((step - warm) as f64 / span as f64).min(1.0) };
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// First and second moments plus the number of completed steps.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            let mut s = ParamStore::new();
            for (k, m) in p.iter() {
                s.insert(k.clone(), Matrix::zeros(m.rows(), m.cols()));
            }
            s
        };
        Self { m: zeros(params), v: zeros(params), step: 0 }
    }
}

/// Optimiser constants for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_all: bool,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            decay_all: cfg.decay_all,
        }
    }
}

/// One AdamW step with bias correction and decoupled weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    opt: &AdamW,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = T::of(1.0 - opt.beta1.powf(t));
    let bc2 = T::of(1.0 - opt.beta2.powf(t));
    let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
    let (lr, eps) = (T::of(opt.lr), T::of(opt.eps));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let m = state.m.get_mut(name)?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::Shape(format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape())));
        }
        let v = state.v.get_mut(name)?;
        let decay = if opt.decay_all || !is_no_decay(name) { T::of(opt.weight_decay) } else { T::zero() };
        let shrink = T::one() - lr * decay;
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w = *w * shrink - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_masked: f64,
    pub l_unmasked: f64,
    pub l_moe: f64,
    pub l_total: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Batch-mean coefficient of variation of expert importance, averaged
    /// over encoder layers.
    pub importance_cv: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.l_masked, self.l_unmasked, self.l_moe, self.l_total, self.lr)
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs: usize,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub band_stats: BandStats,
    pub progress: Progress,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &MoeMae<T>, band_stats: BandStats, progress: Progress, adam: Option<&AdamState<T>>) -> Self {
        Self {
            config: model.config.clone(),
            band_stats,
            progress,
            params: model.params.cast(),
            adam: adam.map(|a| AdamState { m: a.m.cast(), v: a.v.cast(), step: a.step }),
        }
    }

    pub fn model<T: Scalar>(&self) -> Result<MoeMae<T>> {
        MoeMae::from_parts(self.config.clone(), self.params.cast())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    band_stats: BandStats,
    progress: Progress,
    adam_step: Option<u64>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(2);
    for d in [m.rows(), m.cols()] {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{name}: dimension too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: ckpt.config.clone(),
        band_stats: ckpt.band_stats.clone(),
        progress: ckpt.progress,
        adam_step: ckpt.adam.as_ref().map(|a| a.step),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * ckpt.params.count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, m) in ckpt.params.iter() {
        push_tensor(&mut out, name, m)?;
    }
    if let Some(a) = &ckpt.adam {
        for (name, m) in a.m.iter() {
            push_tensor(&mut out, &format!("adam.m/{name}"), m)?;
        }
        for (name, m) in a.v.iter() {
            push_tensor(&mut out, &format!("adam.v/{name}"), m)?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Option<(String, Matrix<f32>)> {
    let len = u16::from_le_bytes(r.take(2)?.try_into().ok()?) as usize;
    let name = String::from_utf8(r.take(len)?.to_vec()).ok()?;
    let rank = r.take(1)?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let (rows, cols) = match dims[..] {
        [] => (1, 1),
        [n] => (1, n),
        [a, b] => (a, b),
        _ => return None,
    };
    let raw = r.take(rows.checked_mul(cols)?.checked_mul(4)?)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Some((name, Matrix::from_vec(rows, cols, data).ok()?))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4).ok_or_else(|| Error::TruncatedHeader("missing magic".into()))?.try_into().expect("4");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = r.u32().ok_or_else(|| Error::TruncatedHeader("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
    }
    let len = r.u32().ok_or_else(|| Error::TruncatedHeader("missing header length".into()))? as usize;
    let json = r.take(len).ok_or_else(|| Error::TruncatedHeader("config JSON cut short".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;

    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    let mut record = 0;
    while r.pos < bytes.len() {
        let (name, t) = read_tensor(&mut r).ok_or(Error::Truncated { record })?;
        let (store, key) = if let Some(k) = name.strip_prefix("adam.m/") {
            (&mut m, k.to_string())
        } else if let Some(k) = name.strip_prefix("adam.v/") {
            (&mut v, k.to_string())
        } else {
            (&mut params, name.clone())
        };
        if store.contains(&key) {
            return Err(Error::ConfigMismatch(format!("tensor {name} appears twice")));
        }
        store.insert(key, t);
        record += 1;
    }
    let adam = match header.adam_step {
        Some(step) => {
            for name in params.names() {
                if !m.contains(name) {
                    return Err(Error::MissingTensor(format!("adam.m/{name}")));
                }
                if !v.contains(name) {
                    return Err(Error::MissingTensor(format!("adam.v/{name}")));
                }
            }
            Some(AdamState { m, v, step })
        }
        None => None,
    };
    // Validates names and shapes against the stored architecture.
    MoeMae::from_parts(header.model.clone(), params.clone())?;
    Ok(Checkpoint { config: header.model, band_stats: header.band_stats, progress: header.progress, params, adam })
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it was trained with `expected`'s architecture.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    check_architecture(&ckpt.config, expected)?;
    Ok(ckpt)
}

/// Errors unless the two configurations describe the same network.
pub fn check_architecture(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let fields = [
        ("height", found.height, expected.height),
        ("width", found.width, expected.width),
        ("bands", found.bands, expected.bands),
        ("patch", found.patch, expected.patch),
        ("dim", found.dim, expected.dim),
        ("heads", found.heads, expected.heads),
        ("kv_groups", found.kv_groups, expected.kv_groups),
        ("decoder_dim", found.decoder_dim, expected.decoder_dim),
        ("decoder_heads", found.decoder_heads, expected.decoder_heads),
        ("decoder_kv_groups", found.decoder_kv_groups, expected.decoder_kv_groups),
    ];
    for (name, a, b) in fields {
        if a != b {
            return Err(Error::ConfigMismatch(format!("checkpoint {name} = {a}, requested {b}")));
        }
    }
    if found.encoder != expected.encoder || found.decoder != expected.decoder {
        return Err(Error::ConfigMismatch("checkpoint layer schedule differs from the requested one".into()));
    }
    Ok(())
}

pub struct TrainOutcome<T> {
    pub model: MoeMae<T>,
    pub adam: AdamState<T>,
    pub metrics: Vec<EpochMetrics>,
    pub progress: Progress,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn checkpoint(&self, band_stats: BandStats) -> Checkpoint {
        Checkpoint::from_model(&self.model, band_stats, self.progress, Some(&self.adam))
    }
}

/// Chips normalised with `stats` and cut into patches.
pub fn prepare_inputs<T: Scalar>(chips: &[Chip], stats: &BandStats, cfg: &ModelConfig) -> Result<Vec<ChipInput<T>>> {
    for c in chips {
        if c.geometry() != (cfg.height, cfg.width, cfg.bands) {
            return Err(Error::ConfigMismatch(format!(
                "chip is {:?}, model expects {}x{}x{}",
                c.geometry(),
                cfg.height,
                cfg.width,
                cfg.bands
            )));
        }
    }
    chips.iter().map(|c| ChipInput::from_chip(c, stats, cfg.patch)).collect()
}

/// Pretrains `model` in place on `inputs`; `on_epoch` sees each epoch's metrics.
pub fn train<T: Scalar>(
    mut model: MoeMae<T>,
    tcfg: &TrainConfig,
    inputs: &[ChipInput<T>],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    tcfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    model.config.alpha = tcfg.alpha;
    model.config.beta = tcfg.beta;
    model.config.mask_ratio = tcfg.mask_ratio;
    let batch = tcfg.batch_size.min(inputs.len());
    let per_epoch = inputs.len() / batch;
    let total = tcfg.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = AdamState::zeros_like(&model.params);
    let mut metrics = Vec::with_capacity(tcfg.epochs);
    let n = model.config.patches();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut cv_sum = 0.0;
        let mut lr = 0.0;
        for b in 0..per_epoch {
            let batch_inputs: Vec<ChipInput<T>> = order[b * batch..(b + 1) * batch].iter().map(|&i| inputs[i].clone()).collect();
            let plans = (0..batch).map(|_| random_mask(n, tcfg.mask_ratio, &mut rng)).collect::<Result<Vec<_>>>()?;
            let (loss, grads, importance) = model.loss_and_grads(&batch_inputs, &plans, &mut rng)?;
            for (component, v) in
                [("masked", loss.masked), ("unmasked", loss.unmasked), ("moe", loss.moe), ("total", loss.total)]
            {
                if !v.is_finite() {
                    return Err(Error::NonFinite { epoch, batch: b, component });
                }
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, component: "gradient" });
            }
            lr = lr_at(step, total, tcfg);
            adamw_step(&mut model.params, &grads, &mut adam, &AdamW::from_config(tcfg, lr))?;
            step += 1;
            for (s, v) in sums.iter_mut().zip([loss.masked, loss.unmasked, loss.moe, loss.total]) {
                *s += v;
            }
            let layers = importance.len().max(1) as f64;
            cv_sum += importance.iter().map(|imp| moe::cv(imp).as_f64()).sum::<f64>() / layers;
        }
        let k = per_epoch as f64;
        let m = EpochMetrics {
            epoch,
            l_masked: sums[0] / k,
            l_unmasked: sums[1] / k,
            l_moe: sums[2] / k,
            l_total: sums[3] / k,
            lr,
            importance_cv: cv_sum / k,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    let progress = Progress { epochs: tcfg.epochs, steps: adam.step };
    Ok(TrainOutcome { model, adam, metrics, progress })
}

/// Initialises a model from `tcfg.seed` and pretrains it on `chips`
/// normalised with `stats`.
pub fn pretrain(
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    chips: &[Chip],
    stats: &BandStats,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let model = MoeMae::<f32>::init(model_cfg.clone(), tcfg.seed)?;
    let inputs = prepare_inputs(chips, stats, model_cfg)?;
    let out = train(model, tcfg, &inputs, on_epoch)?;
    Ok((out.checkpoint(stats.clone()), out.metrics))
}
