//! Multi-head cross-attention and its negative-attention variant.
//!
//! The variant computes
//!
//! ```text
//! Z = softmax(Q Kᵀ/√d_k) V − λ · mask ∘ softmax(Q K_sᵀ/√d_k) V_s
//! ```
//!
//! where `K, V` come from the main prompt embedding and `K_s, V_s` from the
//! subject prompt embedding through the *same* key/value projections. The
//! mask scales rows (spatial tokens) of the concatenated per-head outputs,
//! before the shared output projection.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

/// Learned projections `ℓ_Q, ℓ_K, ℓ_V` plus the output projection.
#[derive(Clone, Debug)]
pub struct ProjectionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    pub heads: usize,
}

impl ProjectionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_out: Tensor, heads: usize) -> Result<Self> {
        let w = Self {
            w_q,
            w_k,
            w_v,
            w_out,
            heads,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_cond(&self) -> usize {
        self.w_k.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols() / self.heads.max(1)
    }

    fn validate(&self) -> Result<()> {
        let (dm, qk) = self.w_q.dims2()?;
        let (dc, kk) = self.w_k.dims2()?;
        let (dc2, vv) = self.w_v.dims2()?;
        let (vo, dm2) = self.w_out.dims2()?;
        if self.heads == 0 {
            return Err(dim_err("attention needs at least one head"));
        }
        if qk != kk || kk != vv {
            return Err(dim_err(format!(
                "projected widths differ: q {qk}, k {kk}, v {vv}"
            )));
        }
        if qk % self.heads != 0 {
            return Err(dim_err(format!(
                "projected width {qk} not divisible by {} heads",
                self.heads
            )));
        }
        if dc != dc2 {
            return Err(dim_err(format!("key/value input widths {dc} vs {dc2}")));
        }
        if vo != vv || dm2 != dm {
            return Err(dim_err(format!(
                "output projection {:?} does not map {vv} back to {dm}",
                self.w_out.shape()
            )));
        }
        Ok(())
    }

    /// Places the weights on a graph as constants or trainable leaves.
    pub fn to_graph(&self, g: &mut Graph, trainable: bool) -> AttnVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        AttnVars {
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
            w_v: leaf(&self.w_v),
            w_out: leaf(&self.w_out),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Suppression scale; zero reproduces plain cross-attention exactly.
    pub lambda: f64,
    pub negative_attention_enabled: bool,
    pub background_masking_enabled: bool,
    /// Report identifier-token maps even when no mask is consumed.
    pub record_maps: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self::mindiff(0.6)
    }
}

impl AttentionConfig {
    /// Plain cross-attention.
    pub fn baseline() -> Self {
        Self {
            lambda: 0.0,
            negative_attention_enabled: false,
            background_masking_enabled: true,
            record_maps: false,
        }
    }

    /// Negative attention with background masking.
    pub fn mindiff(lambda: f64) -> Self {
        Self {
            lambda,
            negative_attention_enabled: true,
            background_masking_enabled: true,
            record_maps: true,
        }
    }

    /// Negative attention applied everywhere (no spatial mask).
    pub fn unmasked(lambda: f64) -> Self {
        Self {
            background_masking_enabled: false,
            ..Self::mindiff(lambda)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Whether the auxiliary branch contributes anything at all.
    pub fn subtracts(&self) -> bool {
        self.negative_attention_enabled && self.lambda != 0.0
    }

    /// Whether identifier-token maps must be collected during sampling.
    pub fn needs_maps(&self) -> bool {
        self.record_maps || (self.subtracts() && self.background_masking_enabled)
    }
}

/// Projection weights placed on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub heads: usize,
}

/// Auxiliary branch inputs for [`attention_graph`].
#[derive(Clone, Copy, Debug)]
pub struct NegativeBranch<'a> {
    pub cond_subject: Var,
    /// One factor per spatial token, already at this layer's resolution.
    pub mask: &'a [f64],
    pub lambda: f64,
}

pub struct AttentionOutput {
    pub z: Var,
    /// Main-branch probabilities, one `[N × L]` matrix per head.
    pub probs: Vec<Var>,
    /// Auxiliary-branch probabilities; empty when the branch was skipped.
    pub subject_probs: Vec<Var>,
}

/// Per-head softmax(Q Kᵀ/√d) V for one conditioning input; returns the
/// concatenated `[N × H·d]` head outputs and the per-head probabilities.
fn branch(g: &mut Graph, q: Var, cond: Var, w: &AttnVars) -> Result<(Var, Vec<Var>)> {
    let k = g.matmul(cond, w.w_k)?;
    let v = g.matmul(cond, w.w_v)?;
    let width = g.value(q).cols();
    if width == 0 || width % w.heads != 0 {
        return Err(dim_err(format!(
            "query width {width} with {} heads",
            w.heads
        )));
    }
    let dk = width / w.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads);
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores)?;
        outs.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((cat, probs))
}

/// Cross-attention on a graph, optionally with the negative branch.
///
/// The auxiliary branch is skipped entirely when `λ = 0` or the mask is all
/// zeros, so those cases are bit-identical to plain attention.
pub fn attention_graph(
    g: &mut Graph,
    f: Var,
    cond_main: Var,
    negative: Option<NegativeBranch<'_>>,
    w: &AttnVars,
) -> Result<AttentionOutput> {
    let n = g.value(f).rows();
    let q = g.matmul(f, w.w_q)?;
    let (main, probs) = branch(g, q, cond_main, w)?;
    let mut subject_probs = Vec::new();
    let combined = match negative {
        Some(neg) => {
            if neg.mask.len() != n {
                return Err(dim_err(format!(
                    "mask has {} entries for {n} spatial tokens",
                    neg.mask.len()
                )));
            }
            if neg.lambda == 0.0 || neg.mask.iter().all(|&m| m == 0.0) {
                main
            } else {
                let (aux, sp) = branch(g, q, neg.cond_subject, w)?;
                subject_probs = sp;
                let masked = g.scale_rows(aux, neg.mask)?;
                let scaled = g.scale(masked, neg.lambda);
                g.sub(main, scaled)?
            }
        }
        None => main,
    };
    let z = g.matmul(combined, w.w_out)?;
    Ok(AttentionOutput {
        z,
        probs,
        subject_probs,
    })
}

pub(crate) fn stack_probs(g: &Graph, probs: &[Var]) -> Result<Tensor> {
    let (n, l) = g.value(probs[0]).dims2()?;
    let mut data = Vec::with_capacity(probs.len() * n * l);
    for &p in probs {
        data.extend_from_slice(g.value(p).data());
    }
    Tensor::new(vec![probs.len(), n, l], data)
}

fn check_inputs(f: &Tensor, cond: &Tensor, w: &ProjectionWeights) -> Result<()> {
    w.validate()?;
    let (_, dm) = f.dims2()?;
    let (_, dc) = cond.dims2()?;
    if dm != w.d_model() {
        return Err(dim_err(format!(
            "features have width {dm}, projections expect {}",
            w.d_model()
        )));
    }
    if dc != w.d_cond() {
        return Err(dim_err(format!(
            "conditioning has width {dc}, projections expect {}",
            w.d_cond()
        )));
    }
    Ok(())
}

/// Standard multi-head cross-attention.
///
/// `f` is `[N × d_model]`, `cond` is `[L × d_cond]`. Returns the
/// output-projected result `[N × d_model]` and probabilities `[H × N × L]`.
pub fn cross_attention(f: &Tensor, cond: &Tensor, w: &ProjectionWeights) -> Result<(Tensor, Tensor)> {
    check_inputs(f, cond, w)?;
    let mut g = Graph::new();
    let vars = w.to_graph(&mut g, false);
    let fv = g.constant(f.clone());
    let cv = g.constant(cond.clone());
    let out = attention_graph(&mut g, fv, cv, None, &vars)?;
    Ok((g.value(out.z).clone(), stack_probs(&g, &out.probs)?))
}

/// Negative attention with an explicit mask (length `N`, entries in {0, 1}).
///
/// With `negative_attention_enabled = false` this is exactly
/// [`cross_attention`]; with `background_masking_enabled = false` the mask is
/// replaced by all ones.
pub fn negative_attention(
    f: &Tensor,
    cond_main: &Tensor,
    cond_subject: &Tensor,
    w: &ProjectionWeights,
    mask: &Tensor,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    check_inputs(f, cond_main, w)?;
    check_inputs(f, cond_subject, w)?;
    let n = f.rows();
    if mask.len() != n {
        return Err(dim_err(format!(
            "mask has {} entries for {n} spatial tokens",
            mask.len()
        )));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Config("mask entries must be 0 or 1".into()));
    }
    if !cfg.negative_attention_enabled {
        return cross_attention(f, cond_main, w);
    }
    let ones;
    let mask = if cfg.background_masking_enabled {
        mask.data()
    } else {
        ones = vec![1.0; n];
        &ones
    };
    let mut g = Graph::new();
    let vars = w.to_graph(&mut g, false);
    let fv = g.constant(f.clone());
    let cm = g.constant(cond_main.clone());
    let cs = g.constant(cond_subject.clone());
    let out = attention_graph(
        &mut g,
        fv,
        cm,
        Some(NegativeBranch {
            cond_subject: cs,
            mask,
            lambda: cfg.lambda,
        }),
        &vars,
    )?;
    Ok((g.value(out.z).clone(), stack_probs(&g, &out.probs)?))
}

/// Negative attention without the spatial mask (every token suppressed).
pub fn disable_mask_variant(
    f: &Tensor,
    cond_main: &Tensor,
    cond_subject: &Tensor,
    w: &ProjectionWeights,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    if cfg.background_masking_enabled {
        return Err(Error::Config(
            "mask-free variant requires background masking to be disabled".into(),
        ));
    }
    let ones = Tensor::full(&[f.rows()], 1.0);
    negative_attention(f, cond_main, cond_subject, w, &ones, cfg).map(|(z, _)| z)
}
