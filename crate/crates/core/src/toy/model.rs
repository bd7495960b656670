//! Token-embedding text encoder and a two-level conditional U-Net.
//!
//! Layout: latents and feature maps are `[h·w × channels]`. The network runs
//! at 16×16 and 8×8 with a cross-attention block at each level:
//!
//! ```text
//! conv_in → res → attn₀(16²) → pool → res → attn₁(8²) → res
//!         → up + skip → res → attn₂(16²) → conv_out
//! ```
//!
//! Conditioning enters only through cross-attention; the timestep enters
//! through per-block biases.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::{CHANNELS, LATENT_SIZE};
use super::vocab::Vocabulary;
use crate::attention::{attention_graph, stack_probs, AttentionConfig, AttnVars, NegativeBranch};
use crate::autograd::{Graph, Var};
use crate::diffusion::{Conditioning, Denoiser};
use crate::error::{dim_err, Error, Result};
use crate::mask::{MapSource, MaskState};
use crate::numerics::{gaussian, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_cond: usize,
    pub time_dim: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub latent_size: usize,
    pub latent_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            head_dim: 16,
            d_cond: 32,
            time_dim: 32,
            max_tokens: 16,
            vocab_size: Vocabulary::default().len(),
            latent_size: LATENT_SIZE,
            latent_channels: CHANNELS,
        }
    }
}

/// Named parameters, ordered by name.
pub type Params = BTreeMap<String, Tensor>;

const RES_BLOCKS: [&str; 4] = ["down.res", "mid.res1", "mid.res2", "up.res"];
const ATTN_BLOCKS: [&str; 3] = ["down.attn", "mid.attn", "up.attn"];

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Params,
}

/// Parameters placed on a graph.
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

fn init(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    gaussian(rng, shape).scale(std)
}

/// Mutable hooks threaded through one forward pass.
struct PassState<'a> {
    attn: &'a AttentionConfig,
    masks: Option<&'a mut MaskState>,
    subject: Option<Var>,
}

impl ToyModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, rng: &mut Rng) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "config vocabulary size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let c = config.channels;
        let width = config.heads * config.head_dim;
        let dc = config.d_cond;
        let lc = config.latent_channels;
        let mut p = Params::new();
        p.insert("text.token".into(), init(rng, &[config.vocab_size, dc], 1.0));
        p.insert("text.pos".into(), init(rng, &[config.max_tokens, dc], 0.3));
        p.insert(
            "time.w1".into(),
            init(rng, &[config.time_dim, c], (1.0 / config.time_dim as f64).sqrt()),
        );
        p.insert("time.b1".into(), Tensor::zeros(&[c]));
        p.insert("time.w2".into(), init(rng, &[c, c], (1.0 / c as f64).sqrt()));
        p.insert("time.b2".into(), Tensor::zeros(&[c]));
        p.insert(
            "conv_in.w".into(),
            init(rng, &[9 * lc, c], (1.0 / (9 * lc) as f64).sqrt()),
        );
        p.insert("conv_in.b".into(), Tensor::zeros(&[c]));
        for name in RES_BLOCKS {
            p.insert(
                format!("{name}.conv.w"),
                init(rng, &[9 * c, c], (0.5 / (9 * c) as f64).sqrt()),
            );
            p.insert(format!("{name}.conv.b"), Tensor::zeros(&[c]));
            p.insert(
                format!("{name}.temb.w"),
                init(rng, &[c, c], (1.0 / c as f64).sqrt()),
            );
            p.insert(format!("{name}.temb.b"), Tensor::zeros(&[c]));
        }
        for name in ATTN_BLOCKS {
            p.insert(format!("{name}.q"), init(rng, &[c, width], (1.0 / c as f64).sqrt()));
            p.insert(format!("{name}.k"), init(rng, &[dc, width], (1.0 / dc as f64).sqrt()));
            p.insert(format!("{name}.v"), init(rng, &[dc, width], (1.0 / dc as f64).sqrt()));
            p.insert(
                format!("{name}.out"),
                init(rng, &[width, c], (0.5 / width as f64).sqrt()),
            );
        }
        p.insert(
            "conv_out.w".into(),
            init(rng, &[9 * c, lc], (0.1 / (9 * c) as f64).sqrt()),
        );
        p.insert("conv_out.b".into(), Tensor::zeros(&[lc]));
        Ok(Self {
            config,
            vocab,
            params: p,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `g`, trainable or constant.
    pub fn place(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|(k, t)| {
                    let v = if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    };
                    (k.clone(), v)
                })
                .collect(),
        )
    }

    /// Token ids padded with the null token to `max_tokens`, so every
    /// prompt offers the same number of keys.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let mut ids = self.vocab.tokenize(prompt)?;
        if ids.len() > self.config.max_tokens {
            return Err(Error::Vocabulary(format!(
                "prompt has {} tokens, at most {} supported",
                ids.len(),
                self.config.max_tokens
            )));
        }
        ids.resize(self.config.max_tokens, self.vocab.null_id());
        Ok(ids)
    }

    /// Token embedding plus learned positional embedding, `[L × d_cond]`.
    /// Null-token rows are zero.
    pub fn encode_tokens_graph(&self, g: &mut Graph, pv: &ParamVars, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.config.max_tokens {
            return Err(Error::Vocabulary(format!("{} tokens", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Vocabulary(format!("token id {bad} out of range")));
        }
        let tok = g.gather_rows(pv.get("text.token")?, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(pv.get("text.pos")?, &positions)?;
        let rows = g.add(tok, pos)?;
        // null rows are exact zeros: zero key and zero value in every head
        let keep: Vec<f64> = ids
            .iter()
            .map(|&i| if i == self.vocab.null_id() { 0.0 } else { 1.0 })
            .collect();
        g.scale_rows(rows, &keep)
    }

    pub fn encode_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.place_subset(&mut g, &["text.token", "text.pos"])?;
        let v = self.encode_tokens_graph(&mut g, &pv, ids)?;
        Ok(g.value(v).clone())
    }

    /// Encodes a whitespace-separated prompt behind the leading null token.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Tensor> {
        self.encode_tokens(&self.tokenize(prompt)?)
    }

    fn place_subset(&self, g: &mut Graph, names: &[&str]) -> Result<ParamVars> {
        let mut m = BTreeMap::new();
        for &n in names {
            let t = self
                .params
                .get(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))?;
            m.insert(n.to_string(), g.constant(t.clone()));
        }
        Ok(ParamVars(m))
    }

    fn time_features(&self, t: usize) -> Tensor {
        let half = self.config.time_dim / 2;
        let mut f = Vec::with_capacity(self.config.time_dim);
        for i in 0..half {
            let freq = libm::exp(-(10000f64.ln()) * i as f64 / half as f64);
            f.push(libm::sin(t as f64 * freq));
        }
        for i in 0..half {
            let freq = libm::exp(-(10000f64.ln()) * i as f64 / half as f64);
            f.push(libm::cos(t as f64 * freq));
        }
        Tensor::new(vec![1, self.config.time_dim], f).expect("time feature width")
    }

    fn linear(g: &mut Graph, pv: &ParamVars, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, pv.get(w)?)?;
        g.add_row(y, pv.get(b)?)
    }

    fn conv(g: &mut Graph, pv: &ParamVars, x: Var, side: usize, name: &str) -> Result<Var> {
        let cols = g.im2col3(x, side, side)?;
        let y = g.matmul(cols, pv.get(&format!("{name}.w"))?)?;
        g.add_row(y, pv.get(&format!("{name}.b"))?)
    }

    fn res_block(g: &mut Graph, pv: &ParamVars, x: Var, temb: Var, side: usize, name: &str) -> Result<Var> {
        let tb = Self::linear(g, pv, temb, &format!("{name}.temb.w"), &format!("{name}.temb.b"))?;
        let a = g.add_row(x, tb)?;
        let a = g.silu(a);
        let c = Self::conv(g, pv, a, side, &format!("{name}.conv"))?;
        g.add(x, c)
    }

    fn attn_block(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x: Var,
        cond: Var,
        side: usize,
        layer: usize,
        st: &mut PassState<'_>,
    ) -> Result<Var> {
        let name = ATTN_BLOCKS[layer];
        let vars = AttnVars {
            w_q: pv.get(&format!("{name}.q"))?,
            w_k: pv.get(&format!("{name}.k"))?,
            w_v: pv.get(&format!("{name}.v"))?,
            w_out: pv.get(&format!("{name}.out"))?,
            heads: self.config.heads,
        };
        let normed = g.layer_norm(x)?;
        let n = side * side;
        let mask_buf;
        let negative = match (st.subject, st.attn.subtracts()) {
            (Some(subject), true) => {
                mask_buf = if st.attn.background_masking_enabled {
                    let masks = st.masks.as_deref_mut().ok_or_else(|| {
                        Error::Config("masked negative attention needs a mask state".into())
                    })?;
                    masks.layer_mask(layer, side, side)?.into_data()
                } else {
                    vec![1.0; n]
                };
                Some(NegativeBranch {
                    cond_subject: subject,
                    mask: &mask_buf,
                    lambda: st.attn.lambda,
                })
            }
            _ => None,
        };
        let out = attention_graph(g, normed, cond, negative, &vars)?;
        if st.attn.needs_maps() {
            if let Some(masks) = st.masks.as_deref_mut() {
                let probs = match masks.source() {
                    Some(MapSource::Main(idx)) => Some((stack_probs(g, &out.probs)?, idx)),
                    Some(MapSource::Subject(idx)) if !out.subject_probs.is_empty() => {
                        Some((stack_probs(g, &out.subject_probs)?, idx))
                    }
                    _ => None,
                };
                // maps come from the top attention resolution, resampled to the mask base
                if let Some((p, idx)) = probs {
                    if side == self.config.latent_size {
                        masks.record_resampled(&p, (side, side), idx)?;
                    }
                }
            }
        }
        g.add(x, out.z)
    }

    /// U-Net pass on a graph. `cond_subject` feeds the auxiliary branch when
    /// `attn` asks for negative attention.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        z_t: Var,
        t: usize,
        cond_main: Var,
        cond_subject: Option<Var>,
        attn: &AttentionConfig,
        masks: Option<&mut MaskState>,
    ) -> Result<Var> {
        let s = self.config.latent_size;
        let (n, c) = g.value(z_t).dims2()?;
        if n != s * s || c != self.config.latent_channels {
            return Err(dim_err(format!(
                "latent {:?}, model expects [{}, {}]",
                g.value(z_t).shape(),
                s * s,
                self.config.latent_channels
            )));
        }
        let mut st = PassState {
            attn,
            masks,
            subject: cond_subject,
        };
        let tf = g.constant(self.time_features(t));
        let temb = Self::linear(g, pv, tf, "time.w1", "time.b1")?;
        let temb = g.silu(temb);
        let temb = Self::linear(g, pv, temb, "time.w2", "time.b2")?;
        let temb = g.silu(temb);

        let h = Self::conv(g, pv, z_t, s, "conv_in")?;
        let h = Self::res_block(g, pv, h, temb, s, "down.res")?;
        let skip = self.attn_block(g, pv, h, cond_main, s, 0, &mut st)?;
        let half = s / 2;
        let m = g.avg_pool2(skip, s, s)?;
        let m = Self::res_block(g, pv, m, temb, half, "mid.res1")?;
        let m = self.attn_block(g, pv, m, cond_main, half, 1, &mut st)?;
        let m = Self::res_block(g, pv, m, temb, half, "mid.res2")?;
        let u = g.upsample2(m, half, half)?;
        let u = g.add(u, skip)?;
        let u = Self::res_block(g, pv, u, temb, s, "up.res")?;
        let u = self.attn_block(g, pv, u, cond_main, s, 2, &mut st)?;
        let u = g.silu(u);
        Self::conv(g, pv, u, s, "conv_out")
    }

    /// [`Denoiser::predict`] with the conditioning passed separately.
    pub fn denoise(
        &self,
        z_t: &Tensor,
        t: usize,
        cond_main: &Tensor,
        cond_subject: Option<&Tensor>,
        attn: &AttentionConfig,
        masks: Option<&mut MaskState>,
    ) -> Result<Tensor> {
        let cond = Conditioning {
            main: cond_main.clone(),
            subject: cond_subject.cloned(),
        };
        self.predict(z_t, t, &cond, attn, masks)
    }

}

impl Denoiser for ToyModel {
    fn latent_shape(&self) -> [usize; 2] {
        let s = self.config.latent_size;
        [s * s, self.config.latent_channels]
    }

    fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Conditioning,
        attn: &AttentionConfig,
        masks: Option<&mut MaskState>,
    ) -> Result<Tensor> {
        attn.validate()?;
        let mut g = Graph::new();
        let pv = self.place(&mut g, false);
        let z = g.constant(z_t.clone());
        let cm = g.constant(cond.main.clone());
        let cs = cond.subject.as_ref().map(|s| g.constant(s.clone()));
        let out = self.forward_graph(&mut g, &pv, z, t, cm, cs, attn, masks)?;
        Ok(g.value(out).clone())
    }
}
