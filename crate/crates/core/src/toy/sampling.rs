//! Prompt strings in, decoded images out.

use serde::{Deserialize, Serialize};

use super::dataset::decode;
use super::model::ToyModel;
use crate::attention::AttentionConfig;
use crate::diffusion::{sample, GuidanceConfig, NoiseSchedule, SampleRequest};
use crate::error::{Error, Result};
use crate::mask::{MapSource, MaskMode, MaskState};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub prompt: String,
    /// Feeds the auxiliary branch; `None` runs plain attention.
    pub subject_prompt: Option<String>,
    pub attention: AttentionConfig,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub mask_mode: MaskMode,
    /// Side of the square base mask, one of [`MASK_RESOLUTIONS`].
    pub mask_resolution: usize,
    pub keep_mask_history: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            subject_prompt: None,
            attention: AttentionConfig::default(),
            guidance: GuidanceConfig::default(),
            steps: 50,
            mask_mode: MaskMode::Carry,
            mask_resolution: 16,
            keep_mask_history: false,
        }
    }
}

/// Supported square mask base resolutions.
pub const MASK_RESOLUTIONS: [usize; 3] = [16, 24, 32];

pub struct Generation {
    pub latent: Tensor,
    /// Decoded image `[1024 × 3]`, clamped to `[-1, 1]`.
    pub image: Tensor,
    pub masks: MaskState,
}

/// Identifier position, preferring the main prompt.
pub fn identifier_source(main: &[usize], subject: Option<&[usize]>, identifier: usize) -> Option<MapSource> {
    if let Some(i) = main.iter().position(|&t| t == identifier) {
        return Some(MapSource::Main(i));
    }
    subject
        .and_then(|s| s.iter().position(|&t| t == identifier))
        .map(MapSource::Subject)
}

/// One DDIM trajectory from noise drawn with `rng`.
pub fn generate(model: &ToyModel, opts: &GenerateOptions, rng: &mut Rng) -> Result<Generation> {
    if !MASK_RESOLUTIONS.contains(&opts.mask_resolution) {
        return Err(Error::Config(format!(
            "mask resolution {} not in {MASK_RESOLUTIONS:?}",
            opts.mask_resolution
        )));
    }
    let main_ids = model.tokenize(&opts.prompt)?;
    let subj_ids = opts
        .subject_prompt
        .as_deref()
        .map(|p| model.tokenize(p))
        .transpose()?;
    let identifier = identifier_source(
        &main_ids,
        subj_ids.as_deref(),
        model.vocab.identifier_id()?,
    );
    let attn = &opts.attention;
    if attn.subtracts() && subj_ids.is_none() {
        return Err(Error::Config("negative attention needs a subject prompt".into()));
    }
    if attn.subtracts() && attn.background_masking_enabled && identifier.is_none() {
        return Err(Error::Config(
            "background masking needs the identifier token in a prompt".into(),
        ));
    }
    let prompt = model.encode_tokens(&main_ids)?;
    let subject = subj_ids.as_deref().map(|ids| model.encode_tokens(ids)).transpose()?;
    let mut uncond_ids = vec![model.vocab.null_id(); model.config.max_tokens];
    uncond_ids[0] = opts.guidance.unconditional_token;
    let uncond = model.encode_tokens(&uncond_ids)?;
    let schedule = NoiseSchedule::default();
    let mut masks = MaskState::new((opts.mask_resolution, opts.mask_resolution)).with_mode(opts.mask_mode);
    if opts.keep_mask_history {
        masks = masks.with_history();
    }
    let req = SampleRequest {
        prompt: &prompt,
        subject: subject.as_ref(),
        unconditional: &uncond,
        identifier,
        schedule: &schedule,
        steps: opts.steps,
        guidance: opts.guidance,
        attention: *attn,
    };
    let latent = sample(model, &req, &mut masks, rng)?;
    let image = decode(&latent)?.map(|v| v.clamp(-1.0, 1.0));
    Ok(Generation {
        latent,
        image,
        masks,
    })
}

/// Binary P6 bytes of a `[h·w × 3]` image in `[-1, 1]`.
pub fn ppm_bytes(image: &Tensor, side: usize) -> Result<Vec<u8>> {
    let (n, c) = image.dims2()?;
    if n != side * side || c != 3 {
        return Err(crate::error::dim_err(format!(
            "image {:?} is not {side}x{side} RGB",
            image.shape()
        )));
    }
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    Ok(out)
}
