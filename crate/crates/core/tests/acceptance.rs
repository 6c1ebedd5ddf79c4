//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use geomoe::analysis::{self, AblationMode};
use geomoe::autograd::Graph;
use geomoe::data::{generate_synthetic, BandStats, GeoTime, SyntheticSpec};
use geomoe::metadata::encode_metadata;
use geomoe::model::{random_mask, ChipInput, ForwardOptions, LayerSpec, MaskPlan, ModelConfig, MoeMae, ParamStore};
use geomoe::moe::{self, BalanceWeights, RouterParams, RouterVars};
use geomoe::probe::{self, EmbeddingMode, EmbeddingSet, ProbeConfig, Targets};
use geomoe::train::{self, AdamState, AdamW, Checkpoint, EpochMetrics, TrainConfig};
use geomoe::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ChipInput<f64> {
    let meta = GeoTime { lat: rng.random_range(-60.0..60.0), lon: rng.random_range(-180.0..180.0), week: 17.0, hour: 9.0 };
    ChipInput { patches: gaussian(cfg.patches(), cfg.patch_len(), 1.0, rng), meta: encode_metadata(&meta, true) }
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    ensure(
        (cfg.height, cfg.width, cfg.bands, cfg.patch, cfg.dim) == (16, 16, 7, 4, 8)
            && cfg.encoder == vec![LayerSpec { experts: 3, top_k: 2, hidden: cfg.encoder[0].hidden }; 2]
            && !cfg.router_noise,
        "tiny profile geometry",
    )?;
    let model = MoeMae::<f64>::init(cfg.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<_> = (0..2).map(|_| random_input(&cfg, &mut rng)).collect();
    let plans: Vec<MaskPlan> = (0..2).map(|_| random_mask(cfg.patches(), cfg.mask_ratio, &mut rng).unwrap()).collect();
    let (_, grads, _) = model.loss_and_grads(&inputs, &plans, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let loss_of = |m: &MoeMae<f64>| {
        m.evaluate(&inputs, &plans, &mut ChaCha8Rng::seed_from_u64(0), ForwardOptions::default()).unwrap().total
    };
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut probe = model.clone();
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in &names {
        let analytic = grads.get(name).unwrap();
        let mut numeric = Matrix::zeros(analytic.rows(), analytic.cols());
        for j in 0..analytic.len() {
            let orig = model.params.get(name).unwrap().data()[j];
            probe.params.get_mut(name).unwrap().data_mut()[j] = orig + h;
            let up = loss_of(&probe);
            probe.params.get_mut(name).unwrap().data_mut()[j] = orig - h;
            let down = loss_of(&probe);
            probe.params.get_mut(name).unwrap().data_mut()[j] = orig;
            numeric.data_mut()[j] = (up - down) / (2.0 * h);
        }
        let diff = numeric.zip_map(analytic, |a, b| a - b).norm();
        let rel = diff / numeric.norm().max(analytic.norm()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 < 1e-3, format!("relative error {:.2e} at {}", worst.0, worst.1))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} tensors, worst relative error {:.2e} ({}), {secs:.1}s", names.len(), worst.0, worst.1))
}

fn c2_census() -> Outcome {
    let cfg = ModelConfig::default();
    let r = analysis::sparsity_report(&cfg);
    let census = geomoe::model::parameter_census(&cfg);
    let stages: Vec<String> = [0, 5, 10].iter().map(|&l| format!("{:.2}", r.layers[l].ratio)).collect();
    ensure(r.layers.len() == 15, "15 encoder layers")?;
    for (l, layer) in r.layers.iter().enumerate() {
        let want = ["0.67", "0.50", "0.40"][l / 5];
        ensure(format!("{:.2}", layer.ratio) == want, format!("layer {l} k/E {}", layer.ratio))?;
    }
    let unique = r.total_unique as f64;
    ensure((unique - 899_000.0).abs() <= 8_990.0, format!("unique FFN {unique}"))?;
    ensure((r.expert_ffn_activated_fraction - 0.52).abs() <= 0.01, format!("expert fraction {}", r.expert_ffn_activated_fraction))?;
    ensure((r.overall_activated_fraction - 0.81).abs() <= 0.05, format!("overall fraction {}", r.overall_activated_fraction))?;
    ensure((2_000_000..=2_500_000).contains(&census.encoder_total), format!("encoder total {}", census.encoder_total))?;
    ensure(r.total_unique == census.expert_unique_total(), "report and census disagree")?;
    Ok(format!(
        "k/E {}, unique {}, expert-FFN fraction {:.4}, overall {:.4}, encoder {}",
        stages.join("/"),
        r.total_unique,
        r.expert_ffn_activated_fraction,
        r.overall_activated_fraction,
        census.encoder_total
    ))
}

struct Smoke {
    checkpoint: Checkpoint,
    chips: Vec<geomoe::data::Chip>,
    stats: BandStats,
}

static SMOKE: OnceLock<Option<Smoke>> = OnceLock::new();

fn smoke_chips() -> Vec<geomoe::data::Chip> {
    generate_synthetic(&SyntheticSpec { count: 512, height: 16, width: 16, seed: 7, ..SyntheticSpec::default() }).unwrap()
}

fn c3_smoke() -> Outcome {
    let start = Instant::now();
    let chips = smoke_chips();
    let stats = BandStats::compute(&chips);
    let tcfg = TrainConfig { epochs: 30, seed: 1, ..TrainConfig::default() };
    let (checkpoint, metrics) = train::pretrain(&ModelConfig::small(), &tcfg, &chips, &stats, |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (first, last): (&EpochMetrics, &EpochMetrics) = (&metrics[0], &metrics[metrics.len() - 1]);
    let ratio = last.l_total / first.l_total;
    let smoke = Smoke { checkpoint, chips, stats };
    let _ = SMOKE.set(Some(smoke));
    ensure(metrics.len() == 30, "30 epochs")?;
    ensure(metrics.iter().all(|m| m.l_moe.is_finite()), "non-finite L_MoE")?;
    ensure(ratio <= 0.7, format!("loss ratio {ratio:.4}"))?;
    ensure(last.importance_cv < first.importance_cv, format!("CV {} -> {}", first.importance_cv, last.importance_cv))?;
    ensure(secs < 600.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "L_total {:.4} -> {:.4} (ratio {ratio:.3}), importance CV {:.4} -> {:.4}, {secs:.0}s",
        first.l_total, last.l_total, first.importance_cv, last.importance_cv
    ))
}

fn c4_routing() -> Outcome {
    let (tokens, d, experts, k) = (10_000, 16, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = gaussian(tokens, d, 1.0, &mut rng);
    let router = RouterParams {
        gate: gaussian(d, experts, 0.3, &mut rng),
        noise: gaussian(d, experts, 0.3, &mut rng),
        top_k: k,
        noise_enabled: true,
    };
    for noise in [true, false] {
        let r = RouterParams { noise_enabled: noise, ..router.clone() };
        let out = moe::noisy_topk_route(&x, &r, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in 0..tokens {
            let row = out.gates.row(t);
            ensure(row.iter().filter(|&&v| v > 0.0).count() == k, format!("token {t} has != {k} positive weights"))?;
            ensure((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6, format!("token {t} weights do not sum to 1"))?;
        }
    }
    let off = RouterParams { noise_enabled: false, ..router.clone() };
    let a = moe::noisy_topk_route(&x, &off, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = moe::noisy_topk_route(&x, &off, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    ensure(a.gates == b.gates && a.indices == b.indices, "noise-off routing differs across runs")?;

    // Monte Carlo: sample a token, sample the noise, tally top-k membership.
    let clean = x.matmul(&router.gate);
    let raw = x.matmul(&router.noise);
    let draws = 100_000;
    let mut hits = vec![0usize; experts];
    let mut mc = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..draws {
        let t = mc.random_range(0..tokens);
        let noisy: Vec<f64> = (0..experts)
            .map(|e| {
                let eps: f64 = mc.sample(StandardNormal);
                let s = raw.get(t, e);
                clean.get(t, e) + eps * (s.max(0.0) + (-s.abs()).exp().ln_1p())
            })
            .collect();
        let mut order: Vec<usize> = (0..experts).collect();
        order.sort_by(|&a, &b| noisy[b].total_cmp(&noisy[a]));
        order[..k].iter().for_each(|&e| hits[e] += 1);
    }
    let load = moe::expected_load(&x, &router).unwrap();
    let mut worst: f64 = 0.0;
    for e in 0..experts {
        let exact = load[e] / tokens as f64;
        let est = hits[e] as f64 / draws as f64;
        worst = worst.max((exact - est).abs());
    }
    ensure(worst <= 0.02, format!("Monte-Carlo gap {worst:.4}"))?;
    Ok(format!("{tokens} tokens, E={experts}, k={k}; Monte-Carlo max gap {worst:.4} per expert"))
}

fn importance_cv(x: &Matrix<f64>, gate: &Matrix<f64>, k: usize) -> f64 {
    let p = RouterParams { gate: gate.clone(), noise: Matrix::zeros(gate.rows(), gate.cols()), top_k: k, noise_enabled: false };
    let out = moe::noisy_topk_route(x, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    moe::cv(&out.gates.column_sums().into_vec())
}

fn c5_balance() -> Outcome {
    let (tokens, d, experts, k) = (512, 16, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let x = gaussian(tokens, d, 1.0, &mut rng).map(|v| v + 0.5);
    // Every token leans towards expert 0.
    let mut gate = gaussian(d, experts, 0.1, &mut rng);
    for r in 0..d {
        gate.set(r, 0, gate.get(r, 0) + 0.4);
    }
    let mut params = ParamStore::new();
    params.insert("router.gate", gate);
    params.insert("router.noise", Matrix::zeros(d, experts));
    let initial = importance_cv(&x, params.get("router.gate").unwrap(), k);
    let tcfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let opt = AdamW::from_config(&tcfg, 0.01);
    let mut state = AdamState::zeros_like(&params);
    let weights = BalanceWeights::default();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(51);
    let mut reached = None;
    for step in 1..=500 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let rp = RouterParams {
            gate: params.get("router.gate").unwrap().clone(),
            noise: params.get("router.noise").unwrap().clone(),
            top_k: k,
            noise_enabled: true,
        };
        let rv = RouterVars::bind(&mut g, &rp, true);
        let routing = moe::route(&mut g, xv, &rv, &mut noise_rng, None).unwrap();
        let loss = moe::balance_loss_op(&mut g, &routing, &weights);
        g.backward(loss);
        let mut grads = ParamStore::new();
        grads.insert("router.gate", g.grad(rv.gate).cloned().unwrap());
        grads.insert("router.noise", g.grad(rv.noise).cloned().unwrap());
        train::adamw_step(&mut params, &grads, &mut state, &opt).unwrap();
        let cv = importance_cv(&x, params.get("router.gate").unwrap(), k);
        if cv < 0.1 {
            reached = Some((step, cv));
            break;
        }
    }
    ensure(initial > 0.5, format!("initial CV {initial:.3} is not skewed"))?;
    let (step, cv) = reached.ok_or("CV stayed above 0.1 for 500 steps")?;
    Ok(format!("noise-free importance CV {initial:.3} -> {cv:.4} after {step} steps"))
}

fn probe_oa(emb: &EmbeddingSet, seed: u64) -> f64 {
    let (tr, te) = probe::holdout_split(emb.len(), 0.25, seed).unwrap();
    let p = probe::train_probe(&emb.select(&tr), &ProbeConfig::default()).unwrap();
    probe::evaluate_probe(&p, &emb.select(&te)).unwrap().overall_accuracy.unwrap()
}

fn c6_probe() -> Outcome {
    let smoke = SMOKE.get().and_then(Option::as_ref).ok_or("needs the smoke-pretrained encoder (criterion 3)")?;
    let model: MoeMae<f32> = smoke.checkpoint.model().unwrap();
    let mut parts = Vec::new();
    for mode in [EmbeddingMode::Cls, EmbeddingMode::All, EmbeddingMode::Avg] {
        let emb = probe::extract_embeddings(&model, &smoke.chips, &smoke.stats, mode, Some(2)).unwrap();
        let oa = probe_oa(&emb, 3);
        ensure(oa >= 0.8, format!("{mode:?} OA {oa:.3}"))?;
        parts.push(format!("{mode:?} {:.1}%", 100.0 * oa));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
    let feats = Matrix::from_fn(400, 32, |r, c| {
        let centre = if c < 4 { [-3.0, 3.0][labels[r]] } else { 0.0 };
        centre + rng.sample::<f64, _>(StandardNormal)
    });
    let emb = EmbeddingSet::new(feats, EmbeddingMode::Cls, Some(Targets::Single { labels, classes: 2 })).unwrap();
    let sep = probe_oa(&emb, 4);
    ensure(sep >= 0.99, format!("separable OA {sep:.3}"))?;
    let ap = probe::average_precision(&[0.9, 0.8, 0.3], &[true, false, true]);
    ensure((ap - 5.0 / 6.0).abs() <= 1e-12 && format!("{ap:.4}") == "0.8333", format!("AP {ap}"))?;
    Ok(format!("{}; separable {:.1}%; AP example {ap:.4}", parts.join(", "), 100.0 * sep))
}

fn c7_ablation() -> Outcome {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let m = MoeMae::<f64>::init(cfg.clone(), 70 + seed).unwrap();
        let x = random_input(&cfg, &mut rng);
        let base = common::reference_encode(&m, &x, None);
        for layer in 0..cfg.encoder.len() {
            let delta = analysis::ablation_maps(&m, &x, layer, AblationMode::Renormalize).unwrap();
            for e in 0..cfg.encoder[layer].experts {
                let rebuilt = common::reference_encode(&m, &x, Some((layer, e)));
                for (i, want) in common::patch_deltas(&base, &rebuilt).iter().enumerate() {
                    worst = worst.max((delta.get(i, e) - want).abs());
                }
            }
        }
    }
    ensure(worst < 1e-5, format!("oracle gap {worst:.2e}"))?;

    // Keep expert 2 of layer 0 out of every selection.
    let mut m = MoeMae::<f64>::init(cfg.clone(), 77).unwrap();
    m.params.get_mut("enc.0.ln2.b").unwrap().data_mut().fill(1.0);
    let gate = m.params.get_mut("enc.0.router.gate").unwrap();
    for r in 0..gate.rows() {
        gate.set(r, 2, -50.0);
    }
    let x = random_input(&cfg, &mut rng);
    let delta = analysis::ablation_maps(&m, &x, 0, AblationMode::Renormalize).unwrap();
    let unused_max = (0..delta.rows()).map(|r| delta.get(r, 2)).fold(0.0, f64::max);
    ensure(unused_max == 0.0, format!("unused expert delta {unused_max:e}"))?;
    Ok(format!("max |delta - oracle| {worst:.2e} over 3 models; unused-expert delta exactly 0"))
}

fn c8_degenerate_mask() -> Outcome {
    let cfg = ModelConfig::tiny();
    let m = MoeMae::<f64>::init(cfg.clone(), 80).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let inputs: Vec<_> = (0..3).map(|_| random_input(&cfg, &mut rng)).collect();
    let plans: Vec<MaskPlan> = (0..3).map(|_| random_mask(cfg.patches(), 0.0, &mut rng).unwrap()).collect();
    ensure(plans.iter().all(|p| p.masked.is_empty()), "r=0 masked a patch")?;
    let l = m.evaluate(&inputs, &plans, &mut rng, ForwardOptions::default()).unwrap();
    ensure(l.masked == 0.0, format!("L_masked {}", l.masked))?;
    let expected = cfg.alpha * l.unmasked + cfg.beta * l.moe;
    ensure((l.total - expected).abs() <= 1e-6, format!("L_total {} vs {expected}", l.total))?;
    let a = random_mask(100, 0.75, &mut rng).unwrap();
    let b = random_mask(25, 0.75, &mut rng).unwrap();
    ensure((a.masked.len(), a.visible.len()) == (75, 25), "100 patches")?;
    ensure(b.masked.len() == 19, "25 patches")?;
    Ok(format!("L_masked 0, |L_total - (aL_u + bL_MoE)| = {:.1e}; 75/100 and 19/25", (l.total - expected).abs()))
}

fn c9_reproducibility() -> Outcome {
    let chips = generate_synthetic(&SyntheticSpec { count: 48, height: 16, width: 16, seed: 9, ..SyntheticSpec::default() }).unwrap();
    let stats = BandStats::compute(&chips);
    let tcfg = TrainConfig { epochs: 3, batch_size: 16, seed: 4, ..TrainConfig::default() };
    let run = || {
        let (ckpt, metrics) = train::pretrain(&ModelConfig::tiny(), &tcfg, &chips, &stats, |_| {}).unwrap();
        let model: MoeMae<f32> = ckpt.model().unwrap();
        let input = ChipInput::from_chip(&chips[0], &stats, model.config.patch).unwrap();
        let maps = analysis::expert_maps(&model, &input, 0, AblationMode::Renormalize).unwrap();
        let analysis_csv = analysis::contribution_csv(&maps).unwrap() + &analysis::ablation_csv(&maps).unwrap();
        (train::metrics_csv(&metrics), train::encode_checkpoint(&ckpt).unwrap(), analysis_csv)
    };
    let (m1, c1, a1) = run();
    let (m2, c2, a2) = run();
    ensure(m1 == m2, "metrics CSV differs")?;
    ensure(c1 == c2, "checkpoint bytes differ")?;
    ensure(a1 == a2, "analysis CSV differs")?;
    Ok(format!("metrics {} B, checkpoint {} B, analysis {} B identical across runs", m1.len(), c1.len(), a1.len()))
}

fn c10_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let total = 1000;
    let warm = cfg.warmup_steps(total);
    let half = warm + (total - warm) / 2;
    let at = |s| train::lr_at(s, total, &cfg);
    ensure(warm == 50, format!("warmup steps {warm}"))?;
    ensure((at(warm) - 3e-4).abs() <= 1e-12, format!("lr at warmup end {}", at(warm)))?;
    ensure((at(half) - 1.5e-4).abs() <= 1e-12, format!("lr at midpoint {}", at(half)))?;
    ensure(at(total).abs() <= 1e-12, format!("lr at end {}", at(total)))?;
    // The warmup line, extended one step, meets the cosine branch.
    let jump = (at(warm - 1) + cfg.base_lr / warm as f64 - at(warm)).abs();
    ensure(jump <= 1e-12, format!("boundary gap {jump:e}"))?;
    Ok(format!("{:e} at warmup end, {:e} at midpoint, {:e} at end, boundary gap {jump:.1e}", at(warm), at(half), at(total)))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", c1_gradients),
        ("structural census", c2_census),
        ("smoke pretraining", c3_smoke),
        ("routing properties", c4_routing),
        ("balancing loss", c5_balance),
        ("probe pipeline", c6_probe),
        ("ablation oracle", c7_ablation),
        ("degenerate masking", c8_degenerate_mask),
        ("reproducibility", c9_reproducibility),
        ("schedule", c10_schedule),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
