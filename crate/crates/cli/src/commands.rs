use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geomoe::analysis::{self, AblationMode};
use geomoe::data::{self, BandStats, Chip, ChipArchive, LabelMode, SyntheticSpec};
use geomoe::model::{self, ChipInput, MaskPlan, ModelConfig, MoeMae};
use geomoe::probe::{self, EmbeddingMode, ProbeConfig};
use geomoe::train::{self, Checkpoint, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::manifest::{beside, Run};
use crate::{AblationArg, AnalyzeArgs, EmbedArgs, GenDataArgs, LabelModeArg, ModeArg, PretrainArgs, ProbeArgs, ReconstructArgs, SparsityArgs};

/// Invalid flag or config values; reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    train::write_atomic(path, bytes)?;
    Ok(())
}

fn load_archive(path: &Path) -> Result<ChipArchive> {
    data::load_archive(path).with_context(|| format!("loading archive {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    train::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn pick_chip<'a>(archive: &'a ChipArchive, index: usize) -> Result<&'a Chip> {
    archive.get(index).ok_or_else(|| usage(format!("chip {index} out of range ({} chips)", archive.len())))
}

impl From<ModeArg> for EmbeddingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cls => Self::Cls,
            ModeArg::All => Self::All,
            ModeArg::Avg => Self::Avg,
        }
    }
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let run = Run::start("gen-data");
    let spec = SyntheticSpec {
        count: a.count,
        height: a.height,
        width: a.width,
        bands: a.bands,
        label_mode: match a.label_mode {
            LabelModeArg::None => LabelMode::None,
            LabelModeArg::Single => LabelMode::Single,
            LabelModeArg::Multi => LabelMode::Multi,
        },
        classes: a.classes,
        seed: a.seed,
        metadata: !a.no_metadata,
    };
    let chips = data::generate_synthetic(&spec).map_err(|e| usage(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data::write_archive(&chips, &a.out)?;
    run.finish(&beside(&a.out), &spec, Some(a.seed), &[], &[a.out.clone()])
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    profile: Option<String>,
    #[serde(default)]
    model: Value,
    #[serde(default)]
    train: Value,
}

/// Recursively overlays `over` onto `base`; objects merge, anything else replaces.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (_, Value::Null) => {}
        (b, o) => *b = o.clone(),
    }
}

#[derive(Serialize)]
struct PretrainSettings {
    profile: String,
    model: ModelConfig,
    train: TrainConfig,
}

/// Built-in defaults, then the config file, then flags.
fn resolve_pretrain(a: &PretrainArgs) -> Result<PretrainSettings> {
    let file: ConfigFile = match &a.config {
        None => ConfigFile::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
    };
    let profile = a.profile.clone().or(file.profile).unwrap_or_else(|| "default".into());
    let base = ModelConfig::profile(&profile).map_err(|e| usage(e.to_string()))?;
    let mut model = serde_json::to_value(base)?;
    merge(&mut model, &file.model);
    let model: ModelConfig = serde_json::from_value(model).map_err(|e| usage(format!("model config: {e}")))?;
    let mut train = serde_json::to_value(TrainConfig::default())?;
    merge(&mut train, &file.train);
    let mut t: TrainConfig = serde_json::from_value(train).map_err(|e| usage(format!("train config: {e}")))?;
    macro_rules! flag {
        ($($f:ident => $field:ident),*) => {$(if let Some(v) = a.$f { t.$field = v; })*};
    }
    flag!(epochs => epochs, batch_size => batch_size, lr => base_lr, min_lr => min_lr, warmup => warmup_fraction,
          weight_decay => weight_decay, mask_ratio => mask_ratio, alpha => alpha, beta => beta, seed => seed);
    if a.decay_all {
        t.decay_all = true;
    }
    t.validate().map_err(|e| usage(e.to_string()))?;
    let mut model = model;
    model.mask_ratio = t.mask_ratio;
    model.alpha = t.alpha;
    model.beta = t.beta;
    model.validate().map_err(|e| usage(e.to_string()))?;
    Ok(PretrainSettings { profile, model, train: t })
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let run = Run::start("pretrain");
    let settings = resolve_pretrain(&a)?;
    let archive = load_archive(&a.data)?;
    let h = &archive.header;
    let m = &settings.model;
    if (h.height, h.width, h.bands) != (m.height, m.width, m.bands) {
        bail!(
            "archive chips are {}x{}x{} but the {} profile expects {}x{}x{}",
            h.height,
            h.width,
            h.bands,
            settings.profile,
            m.height,
            m.width,
            m.bands
        );
    }
    if archive.is_empty() {
        bail!("archive {} holds no chips", a.data.display());
    }
    let stats = h.stats();
    let epochs = settings.train.epochs;
    let (ckpt, metrics) = train::pretrain(m, &settings.train, archive.chips(), &stats, |e| {
        eprintln!(
            "epoch {:>4}/{epochs}  total {:.5}  masked {:.5}  unmasked {:.5}  moe {:.5}  cv {:.4}  lr {:.3e}",
            e.epoch, e.l_total, e.l_masked, e.l_unmasked, e.l_moe, e.importance_cv, e.lr
        );
    })?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".metrics.csv");
        PathBuf::from(s)
    });
    write(&a.out, &train::encode_checkpoint(&ckpt)?)?;
    write(&metrics_path, train::metrics_csv(&metrics).as_bytes())?;
    let seed = settings.train.seed;
    run.finish(&beside(&a.out), &settings, Some(seed), &[&a.data], &[a.out.clone(), metrics_path])
}

fn frozen_model(ckpt: &Checkpoint, archive: &ChipArchive) -> Result<MoeMae<f32>> {
    let h = &archive.header;
    let c = &ckpt.config;
    if (h.height, h.width, h.bands) != (c.height, c.width, c.bands) {
        bail!("archive chips are {}x{}x{}, checkpoint expects {}x{}x{}", h.height, h.width, h.bands, c.height, c.width, c.bands);
    }
    Ok(ckpt.model()?)
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let run = Run::start("embed");
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let archive = load_archive(&a.data)?;
    let model = frozen_model(&ckpt, &archive)?;
    let classes = (archive.header.label_mode != LabelMode::None).then_some(archive.header.classes);
    let emb = probe::extract_embeddings(&model, archive.chips(), &ckpt.band_stats, a.mode.into(), classes)?;
    let mut outputs = vec![a.out.clone()];
    if a.out.extension().is_some_and(|e| e == "csv") {
        write(&a.out, probe::embeddings_csv(&emb).as_bytes())?;
    } else {
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        probe::save_embeddings_raw(&emb, &a.out)?;
        let mut side = a.out.as_os_str().to_owned();
        side.push(".json");
        outputs.push(PathBuf::from(side));
    }
    let config = json!({ "mode": emb.mode, "rows": emb.len(), "cols": emb.features.cols() });
    run.finish(&beside(&a.out), config, None, &[&a.checkpoint, &a.data], &outputs)
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    let run = Run::start("probe");
    if !(0.0..1.0).contains(&a.test_fraction) || (a.test_data.is_none() && a.test_fraction == 0.0) {
        return Err(usage(format!("test fraction {} must lie in (0, 1)", a.test_fraction)));
    }
    if !(a.c > 0.0) {
        return Err(usage(format!("--c must be positive, got {}", a.c)));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let archive = load_archive(&a.data)?;
    if archive.header.label_mode == LabelMode::None {
        bail!("archive {} carries no labels", a.data.display());
    }
    let model = frozen_model(&ckpt, &archive)?;
    let classes = Some(archive.header.classes);
    let mode: EmbeddingMode = a.mode.into();
    let emb = probe::extract_embeddings(&model, archive.chips(), &ckpt.band_stats, mode, classes)?;
    let (train_set, test_set) = match &a.test_data {
        Some(p) => {
            let test = load_archive(p)?;
            if test.header.label_mode != archive.header.label_mode {
                bail!("train and test archives use different label modes");
            }
            (emb, probe::extract_embeddings(&model, test.chips(), &ckpt.band_stats, mode, classes)?)
        }
        None => {
            let (tr, te) = probe::holdout_split(emb.len(), a.test_fraction, a.seed)?;
            (emb.select(&tr), emb.select(&te))
        }
    };
    let cfg = ProbeConfig { c: a.c, max_iter: a.max_iter, standardize: !a.no_standardize, ..ProbeConfig::default() };
    let fitted = probe::train_probe(&train_set, &cfg)?;
    if !fitted.converged {
        eprintln!("warning: probe stopped after {:?} iterations before reaching the gradient tolerance", fitted.iterations);
    }
    let report = probe::evaluate_probe(&fitted, &test_set)?;
    eprintln!(
        "{} test chips: micro mAP {:.4}, macro mAP {:.4}, micro F1 {:.4}, macro F1 {:.4}{}",
        report.samples,
        report.micro_map,
        report.macro_map,
        report.micro_f1,
        report.macro_f1,
        report.overall_accuracy.map(|oa| format!(", OA {oa:.4}")).unwrap_or_default()
    );
    write(&a.out, &serde_json::to_vec_pretty(&report)?)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(csv) = &a.csv {
        write(csv, report.to_csv().as_bytes())?;
        outputs.push(csv.clone());
    }
    let config = json!({
        "mode": mode,
        "probe": cfg,
        "test_fraction": a.test_data.is_none().then_some(a.test_fraction),
        "train_samples": train_set.len(),
        "test_samples": test_set.len(),
    });
    let mut inputs: Vec<&Path> = vec![&a.checkpoint, &a.data];
    if let Some(p) = &a.test_data {
        inputs.push(p);
    }
    run.finish(&beside(&a.out), config, Some(a.seed), &inputs, &outputs)
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let run = Run::start("analyze");
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let archive = load_archive(&a.data)?;
    let model = frozen_model(&ckpt, &archive)?;
    if a.layer >= model.config.encoder.len() {
        return Err(usage(format!("layer {} out of range ({} encoder layers)", a.layer, model.config.encoder.len())));
    }
    let chip = pick_chip(&archive, a.chip)?;
    let mode = match a.ablation {
        AblationArg::Renormalize => AblationMode::Renormalize,
        AblationArg::Reroute => AblationMode::Reroute,
    };
    let input = ChipInput::from_chip(chip, &ckpt.band_stats, model.config.patch)?;
    let maps = analysis::expert_maps(&model, &input, a.layer, mode)?;
    let hist = analysis::routing_histogram(&model, archive.chips(), &ckpt.band_stats, a.layer)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = a.out_dir.join(name);
        write(&p, bytes)?;
        outputs.push(p);
        Ok(())
    };
    emit("contribution.csv", analysis::contribution_csv(&maps)?.as_bytes())?;
    emit("ablation.csv", analysis::ablation_csv(&maps)?.as_bytes())?;
    let top1 = json!({ "layer": maps.layer, "grid": maps.grid, "top1": maps.top1 });
    emit("top1.json", &serde_json::to_vec_pretty(&top1)?)?;
    emit("histogram.json", &serde_json::to_vec_pretty(&hist)?)?;
    if a.ppm {
        let p = model.config.patch;
        emit("top1.ppm", &analysis::top1_overlay(chip, &maps, p, 0.45)?)?;
        for e in 0..maps.experts() {
            emit(&format!("contribution_e{e}.ppm"), &analysis::heatmap(&maps.contributions, maps.grid, e, p)?)?;
            if let Some(d) = &maps.ablation {
                emit(&format!("ablation_e{e}.ppm"), &analysis::heatmap(d, maps.grid, e, p)?)?;
            }
        }
    }
    let config = json!({ "chip": a.chip, "layer": a.layer, "ablation": mode, "ppm": a.ppm });
    run.finish(&a.out_dir.join("manifest.json"), config, None, &[&a.checkpoint, &a.data], &outputs)
}

pub fn sparsity(a: SparsityArgs) -> Result<()> {
    let run = Run::start("sparsity");
    let (cfg, inputs): (ModelConfig, Vec<&Path>) = match &a.checkpoint {
        Some(p) => (load_checkpoint(p)?.config, vec![p.as_path()]),
        None => (ModelConfig::profile(&a.profile).map_err(|e| usage(e.to_string()))?, vec![]),
    };
    let report = analysis::sparsity_report(&cfg);
    write(&a.out, &serde_json::to_vec_pretty(&report)?)?;
    let config = json!({ "profile": a.checkpoint.is_none().then_some(&a.profile), "model": cfg });
    run.finish(&beside(&a.out), config, None, &inputs, &[a.out.clone()])
}

/// Prediction rows back to denormalised `H x W x C` pixels.
fn to_pixels(pred: &geomoe::Matrix<f32>, cfg: &ModelConfig, stats: &BandStats) -> Result<Chip> {
    let px = model::unpatchify(pred, cfg.patch, cfg.height, cfg.width)?;
    let chip = Chip::new(cfg.height, cfg.width, cfg.bands, px)?;
    Ok(data::denormalize(&chip, stats)?)
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let run = Run::start("reconstruct");
    if !(0.0..1.0).contains(&a.mask) {
        return Err(usage(format!("mask ratio {} outside [0, 1)", a.mask)));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let archive = load_archive(&a.data)?;
    let model = frozen_model(&ckpt, &archive)?;
    let cfg = &model.config;
    let chip = pick_chip(&archive, a.chip)?;
    let input = ChipInput::from_chip(chip, &ckpt.band_stats, cfg.patch)?;
    let full = model.reconstruct(&input, &MaskPlan::full(cfg.patches()))?;
    let plan = model::random_mask(cfg.patches(), a.mask, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let masked = model.reconstruct(&input, &plan)?;
    let full_px = to_pixels(&full, cfg, &ckpt.band_stats)?;
    let masked_px = to_pixels(&masked, cfg, &ckpt.band_stats)?;

    std::fs::create_dir_all(&a.out_dir)?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = a.out_dir.join(name);
        write(&p, bytes)?;
        outputs.push(p);
        Ok(())
    };
    let (h, w, b) = (cfg.height, cfg.width, cfg.bands);
    let raw = |c: &Chip| c.pixels.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    emit("original.ppm", &analysis::ppm(w, h, &analysis::chip_rgb(h, w, b, &chip.pixels))?)?;
    emit("full.ppm", &analysis::ppm(w, h, &analysis::chip_rgb(h, w, b, &full_px.pixels))?)?;
    emit("masked.ppm", &analysis::ppm(w, h, &analysis::chip_rgb(h, w, b, &masked_px.pixels))?)?;
    emit("full.f32", &raw(&full_px))?;
    emit("masked.f32", &raw(&masked_px))?;
    let mask = json!({ "shape": [h, w, b], "dtype": "f32le", "masked": plan.masked, "visible": plan.visible });
    emit("mask.json", &serde_json::to_vec_pretty(&mask)?)?;
    let config = json!({ "chip": a.chip, "mask_ratio": a.mask });
    run.finish(&a.out_dir.join("manifest.json"), config, Some(a.seed), &[&a.checkpoint, &a.data], &outputs)
}
