//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance`. Set `NEGATTN_ACCEPTANCE_DIR` to
//! keep the trained checkpoints and reuse them on the next run; reused
//! checkpoints are reported and their training time is not counted.

use std::path::{Path, PathBuf};
use std::time::Instant;

use negattn::attention::{cross_attention, negative_attention, AttentionConfig, ProjectionWeights};
use negattn::autograd::Graph;
use negattn::cli::main_with_args;
use negattn::diffusion::{ddim_step, forward_process, training_loss, NoiseSchedule};
use negattn::eval::{
    calibrate_subject_threshold, evaluate_cells, run_baseline, run_lambda_sweep, run_ppl_comparison, spearman,
    Cell, ProxyScorer, SweepSpec, Table, ARM_BASELINE, ARM_MINDIFF, ARM_NO_MASK, ARM_PPL, PPL_WEIGHTS,
};
use negattn::mask::MaskState;
use negattn::numerics::{gaussian, resize_nearest, Rng, Tensor};
use negattn::toy::{
    finetune_dreambooth, generate, load_checkpoint, ppm_bytes, recontext_prompts, save_checkpoint, train_base,
    Checkpoint, FinetuneConfig, GenerateOptions, ModelConfig, ToyDataset, ToyModel, TrainConfig, Vocabulary,
    IDENTIFIER,
};

const DATA_SEED: u64 = 1;
const TRAIN_SEED: u64 = 2;
const FT_SEED: u64 = 7;
const BASE_STEPS: usize = 5000;
const BASE_BATCH: usize = 8;
const BASE_LR: f64 = 2e-3;
const FT_STEPS: usize = 400;
const FT_LR: f64 = 1e-3;
const SEEDS: u64 = 16;

const GRAD_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_H: f64 = 1e-5;
const INVERSION_TOL: f64 = 1e-9;
const RHO_ALIGN: f64 = 0.6;
const RHO_FIDELITY: f64 = -0.6;

struct Line {
    id: usize,
    pass: bool,
    text: String,
}

fn line(id: usize, pass: bool, secs: f64, budget: f64, text: String) -> Line {
    let within = secs <= budget;
    Line {
        id,
        pass: pass && within,
        text: format!("{text}; {secs:.1}s of {budget:.0}s budget{}", if within { "" } else { " EXCEEDED" }),
    }
}

fn print(l: &Line) {
    println!("criterion {} {}: {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.text);
}

fn weights(rng: &mut Rng, d: usize, dc: usize, heads: usize) -> ProjectionWeights {
    ProjectionWeights::new(
        gaussian(rng, &[d, d]),
        gaussian(rng, &[dc, d]),
        gaussian(rng, &[dc, d]),
        gaussian(rng, &[d, d]),
        heads,
    )
    .expect("weights")
}

fn lambda_zero() -> Line {
    let t = Instant::now();
    let mut rng = Rng::new(1);
    let mut bad = 0;
    for _ in 0..100 {
        let heads = 1 + rng.below(4);
        let d = heads * (1 + rng.below(8));
        let dc = 1 + rng.below(12);
        let n = 1 + rng.below(64);
        let w = weights(&mut rng, d, dc, heads);
        let f = gaussian(&mut rng, &[n, d]);
        let (lc, ls) = (1 + rng.below(10), 1 + rng.below(10));
        let c = gaussian(&mut rng, &[lc, dc]);
        let s = gaussian(&mut rng, &[ls, dc]);
        let m = Tensor::new(vec![n], (0..n).map(|_| rng.below(2) as f64).collect()).expect("mask");
        let (z, _) = cross_attention(&f, &c, &w).expect("attention");
        let (zn, _) = negative_attention(&f, &c, &s, &w, &m, &AttentionConfig::mindiff(0.0)).expect("negative");
        bad += !z.bit_eq(&zn) as usize;
    }
    let model = ToyModel::new(ModelConfig::default(), Vocabulary::default(), &mut Rng::new(2)).expect("model");
    let prompts = recontext_prompts(IDENTIFIER);
    let mut bad_runs = 0;
    for i in 0..8u64 {
        let base = GenerateOptions {
            prompt: prompts[i as usize].clone(),
            subject_prompt: Some(negattn::toy::dataset::subject_prompt(IDENTIFIER)),
            attention: AttentionConfig::baseline(),
            steps: 10,
            ..GenerateOptions::default()
        };
        let neg = GenerateOptions { attention: AttentionConfig::mindiff(0.0), ..base.clone() };
        let a = generate(&model, &base, &mut Rng::new(i)).expect("generate");
        let b = generate(&model, &neg, &mut Rng::new(i)).expect("generate");
        let same = a.latent.bit_eq(&b.latent) && ppm_bytes(&a.image, 32).ok() == ppm_bytes(&b.image, 32).ok();
        bad_runs += !same as usize;
    }
    line(
        1,
        bad == 0 && bad_runs == 0,
        t.elapsed().as_secs_f64(),
        60.0,
        format!("{bad}/100 attention inputs and {bad_runs}/8 generations differ from baseline at lambda 0"),
    )
}

/// One randomized mask case: identical maps recorded into three states, the
/// second scaled by a power of two `c` (exact in floating point), the third
/// by an arbitrary real. Returns whether that last mask differed.
fn mask_case(rng: &mut Rng) -> Result<bool, String> {
    let h = 1 + rng.below(12);
    let w = 1 + rng.below(12);
    let heads = 1 + rng.below(4);
    let layers = 1 + rng.below(3);
    let l = 2 + rng.below(6);
    let token = rng.below(l);
    let constant = rng.bernoulli(0.1);
    let quantized = rng.bernoulli(0.3);
    let c = libm::exp2(rng.below(41) as f64 - 20.0);
    let real = libm::exp(rng.uniform_range(-5.0, 5.0));
    let mut a = MaskState::new((h, w));
    let mut b = MaskState::new((h, w));
    let mut d = MaskState::new((h, w));
    a.begin_step(0);
    b.begin_step(0);
    d.begin_step(0);
    for _ in 0..layers {
        let data: Vec<f64> = (0..heads * h * w * l)
            .map(|_| {
                if constant {
                    0.25
                } else if quantized {
                    rng.below(4) as f64 / 4.0
                } else {
                    rng.uniform()
                }
            })
            .collect();
        let p = Tensor::new(vec![heads, h * w, l], data).map_err(|e| e.to_string())?;
        a.record(&p, (h, w), token).map_err(|e| e.to_string())?;
        b.record(&p.scale(c), (h, w), token).map_err(|e| e.to_string())?;
        d.record(&p.scale(real), (h, w), token).map_err(|e| e.to_string())?;
    }
    let bg = a.finalize_mask().map_err(|e| e.to_string())?;
    let bg_scaled = b.finalize_mask().map_err(|e| e.to_string())?;
    let bg_real = d.finalize_mask().map_err(|e| e.to_string())?;
    let subject = a.subject_mask().ok_or("no subject mask")?.clone();
    for (s, g) in subject.data().iter().zip(bg.data()) {
        if s + g != 1.0 || !(*g == 0.0 || *g == 1.0) {
            return Err(format!("subject {s} + background {g} != 1"));
        }
    }
    if constant && bg.data().iter().any(|&v| v != 1.0) {
        return Err("constant map did not go to background".into());
    }
    if !bg.bit_eq(&bg_scaled) {
        return Err(format!("scaling maps by {c} changed the mask"));
    }
    let (h2, w2) = (1 + rng.below(40), 1 + rng.below(40));
    let r = a.mask_for_resolution(h2, w2).map_err(|e| e.to_string())?;
    let rs = resize_nearest(&subject, h2, w2).map_err(|e| e.to_string())?;
    for (g, s) in r.data().iter().zip(rs.data()) {
        if !(*g == 0.0 || *g == 1.0) || g + s != 1.0 {
            return Err(format!("resized mask to {h2}x{w2} is not binary and complementary"));
        }
    }
    let moved = !bg.bit_eq(&bg_real);
    if moved && !quantized {
        return Err(format!("scaling continuous maps by {real} changed the mask"));
    }
    Ok(moved)
}

fn mask_algebra() -> Line {
    let t = Instant::now();
    let mut rng = Rng::new(3);
    let mut failures = Vec::new();
    let mut rounding = 0;
    for i in 0..1000 {
        match mask_case(&mut rng) {
            Ok(differs) => rounding += differs as usize,
            Err(e) => failures.push(format!("case {i}: {e}")),
        }
    }
    let first = failures.first().cloned().unwrap_or_default();
    line(
        2,
        failures.is_empty(),
        t.elapsed().as_secs_f64(),
        60.0,
        format!(
            "{}/1000 randomized mask cases failed {first}; with non-power-of-two scales {rounding}/1000 masks \
             moved (quantized maps with elements tied to the mean only)",
            failures.len()
        ),
    )
}

fn inversion() -> Line {
    let t = Instant::now();
    let sched = NoiseSchedule::default();
    let mut rng = Rng::new(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let step = 1 + rng.below(sched.steps());
        let z0 = gaussian(&mut rng, &[256, 3]);
        let eps = gaussian(&mut rng, &[256, 3]);
        let zt = forward_process(&z0, step, &eps, &sched).expect("forward");
        let back = ddim_step(&zt, &eps, step, 0, &sched, 0.0, None).expect("ddim");
        worst = worst.max(back.max_abs_diff(&z0));
    }
    line(
        3,
        worst < INVERSION_TOL,
        t.elapsed().as_secs_f64(),
        60.0,
        format!("max |z0 - inverted| over 100 pairs {worst:.3e} (tolerance {INVERSION_TOL:e})"),
    )
}

fn gradient_check() -> Line {
    let t = Instant::now();
    let mut rng = Rng::new(5);
    let mut model = ToyModel::new(ModelConfig::default(), Vocabulary::default(), &mut rng).expect("model");
    let sched = NoiseSchedule::default();
    let ds = ToyDataset::generate(4, 1, 0, &mut rng);
    let z0 = ds.samples[0].latent.clone();
    let eps = gaussian(&mut rng, z0.shape());
    let step = 1 + rng.below(sched.steps());
    let ids = model.tokenize(&ds.samples[0].caption).expect("tokens");
    let cond = model.encode_tokens(&ids).expect("encode");

    let mut g = Graph::new();
    let pv = model.place(&mut g, true);
    let zt = forward_process(&z0, step, &eps, &sched).expect("forward");
    let z = g.constant(zt);
    let c = model.encode_tokens_graph(&mut g, &pv, &ids).expect("encode");
    let out = model
        .forward_graph(&mut g, &pv, z, step, c, None, &AttentionConfig::baseline(), None)
        .expect("forward");
    let loss = g.mse(out, &eps).expect("mse");
    let grads = g.backward(loss).expect("backward");

    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut failed = 0;
    for _ in 0..200 {
        let name = &names[rng.below(names.len())];
        let idx = rng.below(model.params[name].len());
        let analytic = grads.get(pv.get(name).expect("var")).map_or(0.0, |t| t.data()[idx]);
        let orig = model.params[name].data()[idx];
        let mut eval = |v: f64| {
            model.params.get_mut(name).expect("param").data_mut()[idx] = v;
            // the token table also feeds the conditioning, so re-encode
            let cond = if name.starts_with("text.") { model.encode_tokens(&ids).expect("encode") } else { cond.clone() };
            training_loss(&model, &z0, step, &eps, &cond, &sched).expect("loss")
        };
        let numeric = (eval(orig + GRAD_H) - eval(orig - GRAD_H)) / (2.0 * GRAD_H);
        model.params.get_mut(name).expect("param").data_mut()[idx] = orig;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
        failed += (rel >= GRAD_TOL) as usize;
        checked += 1;
    }
    line(
        4,
        failed == 0 && checked >= 200,
        t.elapsed().as_secs_f64(),
        300.0,
        format!("{checked} weights, {failed} above relative error {GRAD_TOL:e}, worst {worst:.3e}"),
    )
}

struct Shared {
    dir: PathBuf,
    data: ToyDataset,
    scorer: ProxyScorer,
    base: Checkpoint,
    plain: Checkpoint,
    train_secs: f64,
    cached: bool,
}

fn ft_config(ppl_weight: f64) -> FinetuneConfig {
    FinetuneConfig {
        steps: FT_STEPS,
        lr: FT_LR,
        ppl_weight,
        seed: FT_SEED,
        ..FinetuneConfig::default()
    }
}

fn prepare(dir: PathBuf) -> Shared {
    let data = ToyDataset::generate(256, 4, 64, &mut Rng::new(DATA_SEED));
    let scorer = ProxyScorer::fit(&data.samples, &data.subject_images).expect("scorer");
    let base_path = dir.join("base.ckpt");
    let plain_path = dir.join("finetuned.ckpt");
    let t = Instant::now();
    let cached = base_path.exists() && plain_path.exists();
    let (base, plain) = if cached {
        (load_checkpoint(&base_path).expect("base"), load_checkpoint(&plain_path).expect("finetuned"))
    } else {
        let cfg = TrainConfig {
            steps: BASE_STEPS,
            batch_size: BASE_BATCH,
            lr: BASE_LR,
            seed: TRAIN_SEED,
            ..TrainConfig::default()
        };
        let (base, rep) = train_base(&data.samples, &Vocabulary::default(), &cfg, &mut Rng::new(TRAIN_SEED)).expect("train");
        println!(
            "base model: {} steps, running loss {:.4} -> {:.4}",
            BASE_STEPS, rep.initial_running_loss, rep.final_running_loss
        );
        let (plain, rep) = finetune_dreambooth(
            &base,
            &data.subject_images,
            &data.class_prior_images,
            IDENTIFIER,
            &ft_config(0.0),
            &mut Rng::new(FT_SEED),
        )
        .expect("finetune");
        println!(
            "finetuned model: {} steps, running loss {:.4} -> {:.4}",
            FT_STEPS, rep.initial_running_loss, rep.final_running_loss
        );
        save_checkpoint(&base, &base_path).expect("save");
        save_checkpoint(&plain, &plain_path).expect("save");
        (base, plain)
    };
    Shared {
        dir,
        data,
        scorer,
        base,
        plain,
        train_secs: t.elapsed().as_secs_f64(),
        cached,
    }
}

fn spec() -> SweepSpec {
    SweepSpec {
        seeds: (0..SEEDS).collect(),
        ..SweepSpec::default()
    }
}

fn cached_note(s: &Shared) -> &'static str {
    if s.cached {
        " (checkpoints reused, training time not included)"
    } else {
        ""
    }
}

fn overfitting(s: &Shared) -> Line {
    let t = Instant::now();
    let spec = spec();
    let base = run_baseline(&s.base, &s.scorer, &spec, "base").expect("base eval");
    let ft = run_baseline(&s.plain, &s.scorer, &spec, "finetuned").expect("finetuned eval");
    let b = base.aggregates()[0].clone();
    let f = ft.aggregates()[0].clone();
    line(
        5,
        f.text_alignment < b.text_alignment,
        s.train_secs + t.elapsed().as_secs_f64(),
        1800.0,
        format!(
            "text alignment base {:.4} vs finetuned {:.4} (margin {:.4}); subject fidelity base {:.4} vs finetuned {:.4}{}",
            b.text_alignment,
            f.text_alignment,
            b.text_alignment - f.text_alignment,
            b.subject_fidelity,
            f.subject_fidelity,
            cached_note(s)
        ),
    )
}

fn lambda_trend(s: &Shared) -> (Line, Table) {
    let t = Instant::now();
    let spec = SweepSpec {
        lambda_values: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        ..spec()
    };
    let table = run_lambda_sweep(&s.plain, &s.scorer, &spec).expect("sweep");
    let aggs = table.aggregates();
    let lambdas: Vec<f64> = aggs.iter().map(|a| a.lambda).collect();
    let align: Vec<f64> = aggs.iter().map(|a| a.text_alignment).collect();
    let fid: Vec<f64> = aggs.iter().map(|a| a.subject_fidelity).collect();
    let ra = spearman(&lambdas, &align);
    let rf = spearman(&lambdas, &fid);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let l = line(
        6,
        ra > RHO_ALIGN && rf < RHO_FIDELITY,
        t.elapsed().as_secs_f64(),
        1200.0,
        format!(
            "lambda 0..1 alignment [{}] rho {ra:.3} (need > {RHO_ALIGN}); fidelity [{}] rho {rf:.3} (need < {RHO_FIDELITY})",
            fmt(&align),
            fmt(&fid)
        ),
    );
    (l, table)
}

fn non_subject_prompts() -> Vec<String> {
    recontext_prompts(IDENTIFIER)
        .iter()
        .map(|p| p.replace(&format!("{IDENTIFIER} "), ""))
        .collect()
}

fn ablation(s: &Shared) -> Line {
    let t = Instant::now();
    let spec = spec();
    let threshold =
        calibrate_subject_threshold(&s.base, &s.scorer, &non_subject_prompts(), &spec.seeds, &spec).expect("calibration");
    let w = s.plain.meta.ppl_weight;
    let mut cells = Vec::new();
    for (arm, lambda, attention) in [
        (ARM_BASELINE, 0.0, AttentionConfig::baseline()),
        (ARM_NO_MASK, 0.8, AttentionConfig::unmasked(0.8)),
        (ARM_NO_MASK, 1.0, AttentionConfig::unmasked(1.0)),
        (ARM_MINDIFF, 0.6, AttentionConfig::mindiff(0.6)),
    ] {
        for prompt_id in 0..spec.prompts.len() {
            for &seed in &spec.seeds {
                cells.push(Cell {
                    arm: arm.to_string(),
                    lambda,
                    ppl_weight: w,
                    attention,
                    seed,
                    prompt_id,
                });
            }
        }
    }
    let table = evaluate_cells(&s.plain, &s.scorer, &spec, &cells).expect("ablation");
    let get = |arm: &str, l: f64| table.aggregate(arm, l).expect("arm");
    let base = get(ARM_BASELINE, 0.0);
    let nm8 = get(ARM_NO_MASK, 0.8);
    let nm10 = get(ARM_NO_MASK, 1.0);
    let md = get(ARM_MINDIFF, 0.6);
    let removed = nm8.subject_fidelity < threshold && nm10.subject_fidelity < threshold;
    let kept = md.subject_fidelity > threshold && md.text_alignment > base.text_alignment;
    line(
        7,
        removed && kept,
        t.elapsed().as_secs_f64(),
        900.0,
        format!(
            "subject-absent threshold {threshold:.4}; no-mask fidelity {:.4} at 0.8, {:.4} at 1.0 (need below); \
             masked 0.6 fidelity {:.4} (need above), alignment {:.4} vs baseline {:.4} (need above)",
            nm8.subject_fidelity, nm10.subject_fidelity, md.subject_fidelity, md.text_alignment, base.text_alignment
        ),
    )
}

fn ppl_comparison(s: &Shared) -> Line {
    let t = Instant::now();
    let spec = SweepSpec {
        lambda_values: (1..=10).map(|i| i as f64 / 10.0).collect(),
        ppl_weights: PPL_WEIGHTS.to_vec(),
        ..spec()
    };
    let cmp = run_ppl_comparison(
        &s.base,
        &s.data.subject_images,
        &s.data.class_prior_images,
        &s.scorer,
        &spec,
        &ft_config(0.0),
        Some(&s.plain),
    )
    .expect("ppl comparison");
    std::fs::write(s.dir.join("ppl.csv"), cmp.table.to_csv()).expect("csv");
    let aggs = cmp.table.aggregates();
    let cells = spec.seeds.len() * spec.prompts.len();
    let lambda_arms = aggs.iter().filter(|a| a.arm == ARM_MINDIFF && a.count == cells).count();
    let ppl_arms = aggs.iter().filter(|a| a.arm == ARM_PPL && a.count == cells).count();
    println!("  arm        lambda ppl    fidelity alignment");
    for a in &aggs {
        println!(
            "  {:10} {:6.2} {:6.2} {:8.4} {:8.4}",
            a.arm, a.lambda, a.ppl_weight, a.subject_fidelity, a.text_alignment
        );
    }
    let complete = lambda_arms == 10 && ppl_arms == PPL_WEIGHTS.len();
    let dom = if cmp.any_dominates() {
        let pairs: Vec<String> = cmp.dominating.iter().map(|(l, w)| format!("{l}>{w}")).collect();
        format!("some lambda Pareto-dominates a PPL arm: {}", pairs.join(" "))
    } else {
        "no lambda Pareto-dominates any PPL arm".to_string()
    };
    line(
        8,
        complete,
        t.elapsed().as_secs_f64(),
        3600.0,
        format!("grid has {lambda_arms}/10 lambda arms and {ppl_arms}/4 PPL arms; {dom} (report only)"),
    )
}

fn cli(args: &[String]) -> i32 {
    let mut v = vec!["negattn".to_string()];
    v.extend(args.iter().cloned());
    main_with_args(v)
}

fn determinism(s: &Shared) -> Line {
    let t = Instant::now();
    let ck = s.dir.join("finetuned.ckpt");
    let run = |sub: &str, dir: &Path| -> Vec<u8> {
        let conf = dir.join("run.json");
        let json = serde_json::json!({
            "seed": 11,
            "lambda": 0.6,
            "steps": 25,
            "guidance_scale": 3.0,
            "seeds": 2,
            "lambdas": [0.0, 0.6],
            "prompt": "a photo of a sks circle with a hat on green background",
            "checkpoint": ck,
            "output_dir": dir,
        });
        std::fs::write(&conf, json.to_string()).expect("config");
        let code = cli(&[sub.to_string(), "--config".into(), conf.display().to_string()]);
        assert_eq!(code, 0, "{sub} failed");
        let file = if sub == "generate" { "sample_seed11.ppm" } else { "sweep.csv" };
        std::fs::read(dir.join(file)).expect("output")
    };
    let mut same = Vec::new();
    for sub in ["generate", "sweep"] {
        let a = tempfile::tempdir().expect("tmp");
        let b = tempfile::tempdir().expect("tmp");
        let x = run(sub, a.path());
        let y = run(sub, b.path());
        same.push((sub, x == y, x.len()));
    }
    let ok = same.iter().all(|(_, eq, _)| *eq);
    let text = same
        .iter()
        .map(|(sub, eq, n)| format!("{sub} {} ({n} bytes)", if *eq { "identical" } else { "differs" }))
        .collect::<Vec<_>>()
        .join(", ");
    line(9, ok, t.elapsed().as_secs_f64(), 300.0, text)
}

fn main() {
    let keep = std::env::var_os("NEGATTN_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("tmp");
    let dir = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&dir).expect("dir");

    let mut lines = Vec::new();
    for f in [lambda_zero, mask_algebra, inversion, gradient_check] {
        let l = f();
        print(&l);
        lines.push(l);
    }
    let shared = prepare(dir);
    let l = overfitting(&shared);
    print(&l);
    lines.push(l);
    let (l, _) = lambda_trend(&shared);
    print(&l);
    lines.push(l);
    for f in [ablation, ppl_comparison, determinism] {
        let l = f(&shared);
        print(&l);
        lines.push(l);
    }
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| l.id.to_string()).collect();
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
