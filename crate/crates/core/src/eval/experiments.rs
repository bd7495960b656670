//! λ sweep, ablation arms and the prior-preservation comparison.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::proxy::ProxyScorer;
use crate::attention::AttentionConfig;
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::mask::MaskMode;
use crate::numerics::Rng;
use crate::toy::{
    finetune_dreambooth, generate, recontext_prompts, subject_prompt, Checkpoint, FinetuneConfig,
    GenerateOptions, Sample, IDENTIFIER,
};

pub const PPL_WEIGHTS: [f64; 4] = [0.1, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub lambda_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub prompts: Vec<String>,
    pub ppl_weights: Vec<f64>,
    pub subject_prompt: String,
    pub steps: usize,
    pub guidance_scale: f64,
    pub mask_mode: MaskMode,
    pub mask_resolution: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lambda_values: (0..=10).map(|i| i as f64 / 10.0).collect(),
            seeds: (0..16).collect(),
            prompts: recontext_prompts(IDENTIFIER),
            ppl_weights: PPL_WEIGHTS.to_vec(),
            subject_prompt: subject_prompt(IDENTIFIER),
            steps: 25,
            guidance_scale: 3.0,
            mask_mode: MaskMode::Carry,
            mask_resolution: 16,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_values.is_empty() || self.seeds.is_empty() || self.prompts.is_empty() {
            return Err(Error::Config("sweep lists must be nonempty".into()));
        }
        if let Some(l) = self.lambda_values.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("lambda {l} must be a nonnegative real")));
        }
        Ok(())
    }

    fn options(&self, prompt: &str, attention: AttentionConfig) -> GenerateOptions {
        GenerateOptions {
            prompt: prompt.to_string(),
            subject_prompt: Some(self.subject_prompt.clone()),
            attention,
            guidance: GuidanceConfig {
                guidance_scale: self.guidance_scale,
                ..GuidanceConfig::default()
            },
            steps: self.steps,
            mask_mode: self.mask_mode,
            mask_resolution: self.mask_resolution,
            keep_mask_history: false,
        }
    }
}

/// One generated image and its proxy scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub arm: String,
    pub lambda: f64,
    pub ppl_weight: f64,
    pub seed: u64,
    pub prompt_id: usize,
    pub subject_fidelity: f64,
    pub text_alignment: f64,
}

/// Mean proxies of one (arm, λ, ppl weight) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub arm: String,
    pub lambda: f64,
    pub ppl_weight: f64,
    pub count: usize,
    pub subject_fidelity: f64,
    pub text_alignment: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<Row>,
}

pub const CSV_HEADER: &str = "arm,lambda,ppl_weight,seed,prompt_id,subject_fidelity,text_alignment";

impl Table {
    /// Group means in first-appearance order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out: Vec<Aggregate> = Vec::new();
        for r in &self.rows {
            let slot = out.iter_mut().find(|a| {
                a.arm == r.arm && a.lambda.to_bits() == r.lambda.to_bits() && a.ppl_weight.to_bits() == r.ppl_weight.to_bits()
            });
            match slot {
                Some(a) => {
                    a.count += 1;
                    a.subject_fidelity += r.subject_fidelity;
                    a.text_alignment += r.text_alignment;
                }
                None => out.push(Aggregate {
                    arm: r.arm.clone(),
                    lambda: r.lambda,
                    ppl_weight: r.ppl_weight,
                    count: 1,
                    subject_fidelity: r.subject_fidelity,
                    text_alignment: r.text_alignment,
                }),
            }
        }
        for a in &mut out {
            a.subject_fidelity /= a.count as f64;
            a.text_alignment /= a.count as f64;
        }
        out
    }

    pub fn aggregate(&self, arm: &str, lambda: f64) -> Option<Aggregate> {
        self.aggregates()
            .into_iter()
            .find(|a| a.arm == arm && a.lambda == lambda)
    }

    /// Per-image rows followed by one `<arm>_mean` row per group with `all`
    /// in the seed and prompt columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{},{:.6},{:.6}",
                r.arm, r.lambda, r.ppl_weight, r.seed, r.prompt_id, r.subject_fidelity, r.text_alignment
            );
        }
        for a in self.aggregates() {
            let _ = writeln!(
                s,
                "{}_mean,{:.6},{:.6},all,all,{:.6},{:.6}",
                a.arm, a.lambda, a.ppl_weight, a.subject_fidelity, a.text_alignment
            );
        }
        s
    }

    pub fn extend(&mut self, other: Table) {
        self.rows.extend(other.rows);
    }
}

/// A generation task: arm label, attention setup, seed and prompt index.
#[derive(Clone, Debug)]
pub struct Cell {
    pub arm: String,
    pub lambda: f64,
    pub ppl_weight: f64,
    pub attention: AttentionConfig,
    pub seed: u64,
    pub prompt_id: usize,
}

/// Noise for a cell depends only on seed and prompt, so arms are paired.
pub fn cell_rng(seed: u64, prompt_id: usize) -> Rng {
    Rng::with_stream(seed, prompt_id as u64)
}

/// Generates and scores every cell; output order equals `cells` order.
pub fn evaluate_cells(
    ck: &Checkpoint,
    scorer: &ProxyScorer,
    spec: &SweepSpec,
    cells: &[Cell],
) -> Result<Table> {
    let rows = cells
        .par_iter()
        .map(|c| {
            let prompt = &spec.prompts[c.prompt_id];
            let g = generate(&ck.model, &spec.options(prompt, c.attention), &mut cell_rng(c.seed, c.prompt_id))?;
            let s = scorer.score_image(&g.image, prompt)?;
            Ok(Row {
                arm: c.arm.clone(),
                lambda: c.lambda,
                ppl_weight: c.ppl_weight,
                seed: c.seed,
                prompt_id: c.prompt_id,
                subject_fidelity: s.subject_fidelity,
                text_alignment: s.text_alignment,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table { rows })
}

fn grid(spec: &SweepSpec, arm: &str, lambda: f64, ppl_weight: f64, attention: AttentionConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        for prompt_id in 0..spec.prompts.len() {
            cells.push(Cell {
                arm: arm.to_string(),
                lambda,
                ppl_weight,
                attention,
                seed,
                prompt_id,
            });
        }
    }
    cells
}

pub const ARM_MINDIFF: &str = "mindiff";
pub const ARM_BASELINE: &str = "baseline";
pub const ARM_NO_MASK: &str = "no_mask";
pub const ARM_PPL: &str = "ppl";

/// Full masked negative attention at every λ in the spec.
pub fn run_lambda_sweep(ck: &Checkpoint, scorer: &ProxyScorer, spec: &SweepSpec) -> Result<Table> {
    spec.validate()?;
    let cells: Vec<Cell> = spec
        .lambda_values
        .iter()
        .flat_map(|&l| grid(spec, ARM_MINDIFF, l, ck.meta.ppl_weight, AttentionConfig::mindiff(l)))
        .collect();
    evaluate_cells(ck, scorer, spec, &cells)
}

/// Three arms at one λ: plain attention, unmasked negative attention and
/// masked negative attention.
pub fn run_ablation(ck: &Checkpoint, scorer: &ProxyScorer, spec: &SweepSpec, lambda: f64) -> Result<Table> {
    spec.validate()?;
    AttentionConfig::mindiff(lambda).validate()?;
    let w = ck.meta.ppl_weight;
    let mut cells = grid(spec, ARM_BASELINE, 0.0, w, AttentionConfig::baseline());
    cells.extend(grid(spec, ARM_NO_MASK, lambda, w, AttentionConfig::unmasked(lambda)));
    cells.extend(grid(spec, ARM_MINDIFF, lambda, w, AttentionConfig::mindiff(lambda)));
    evaluate_cells(ck, scorer, spec, &cells)
}

/// Plain-attention evaluation of `ck` on the spec's prompts.
pub fn run_baseline(ck: &Checkpoint, scorer: &ProxyScorer, spec: &SweepSpec, arm: &str) -> Result<Table> {
    spec.validate()?;
    let cells = grid(spec, arm, 0.0, ck.meta.ppl_weight, AttentionConfig::baseline());
    evaluate_cells(ck, scorer, spec, &cells)
}

/// Largest subject fidelity over images that lack the subject.
pub fn calibrate_subject_threshold(ck: &Checkpoint, scorer: &ProxyScorer, prompts: &[String], seeds: &[u64], spec: &SweepSpec) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (pi, p) in prompts.iter().enumerate() {
        for &seed in seeds {
            let opts = GenerateOptions {
                subject_prompt: None,
                ..spec.options(p, AttentionConfig::baseline())
            };
            let g = generate(&ck.model, &opts, &mut cell_rng(seed, pi))?;
            best = best.max(scorer.subject_fidelity(&g.image)?);
        }
    }
    Ok(best)
}

/// Result of the prior-preservation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplComparison {
    pub table: Table,
    /// `(λ, ppl weight)` pairs where the λ arm beats the PPL arm on both proxies.
    pub dominating: Vec<(f64, f64)>,
}

impl PplComparison {
    pub fn any_dominates(&self) -> bool {
        !self.dominating.is_empty()
    }
}

/// (fidelity, alignment) of `a` at least that of `b` in both and strictly in one.
pub fn pareto_dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Trains one DreamBooth model per PPL weight and one plain model, evaluates
/// the PPL models without negative attention and the plain model across λ.
pub fn run_ppl_comparison(
    base: &Checkpoint,
    subject: &[Sample],
    class_prior: &[Sample],
    scorer: &ProxyScorer,
    spec: &SweepSpec,
    finetune: &FinetuneConfig,
    plain: Option<&Checkpoint>,
) -> Result<PplComparison> {
    spec.validate()?;
    let train = |w: f64| {
        let cfg = FinetuneConfig { ppl_weight: w, ..finetune.clone() };
        finetune_dreambooth(base, subject, class_prior, IDENTIFIER, &cfg, &mut Rng::new(finetune.seed))
            .map(|(ck, _)| ck)
    };
    let plain_ck = match plain {
        Some(ck) => ck.clone(),
        None => train(0.0)?,
    };
    let mut table = run_lambda_sweep(&plain_ck, scorer, spec)?;
    for &w in &spec.ppl_weights {
        let ck = train(w)?;
        table.extend(run_baseline(&ck, scorer, spec, ARM_PPL)?);
    }
    let aggs = table.aggregates();
    let mut dominating = Vec::new();
    for l in aggs.iter().filter(|a| a.arm == ARM_MINDIFF) {
        for p in aggs.iter().filter(|a| a.arm == ARM_PPL) {
            if pareto_dominates(
                (l.subject_fidelity, l.text_alignment),
                (p.subject_fidelity, p.text_alignment),
            ) {
                dominating.push((l.lambda, p.ppl_weight));
            }
        }
    }
    Ok(PplComparison { table, dominating })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
