//! Noise schedule, forward noising, the ε-prediction objective and a DDIM
//! sampler with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{dim_err, Error, Result};
use crate::mask::{MapSource, MaskState};
use crate::numerics::{gaussian, Rng, Tensor};

/// Per-step `α_t` and cumulative `ᾱ_t` for `t = 1..=T`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule: `β_t` evenly spaced in `[beta_start, beta_end]`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("zero training steps".into()));
        }
        let alpha = (0..steps)
            .map(|i| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    i as f64 / (steps - 1) as f64
                };
                1.0 - (beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        Self::from_alphas(alpha)
    }

    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Schedule("empty schedule".into()));
        }
        if let Some((i, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, &a)| !(a > 0.0 && a < 1.0))
        {
            return Err(Error::Schedule(format!("alpha[{}] = {a} not in (0, 1)", i + 1)));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha, alpha_bar })
    }

    /// Number of training timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.alpha.len() {
            return Err(Error::Schedule(format!(
                "timestep {t} outside 1..={}",
                self.alpha.len()
            )));
        }
        Ok(())
    }

    /// `n` evenly spaced timesteps, descending, ending at `T/n`.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if n == 0 || n > total {
            return Err(Error::Schedule(format!(
                "{n} sampling steps for a {total}-step schedule"
            )));
        }
        Ok((1..=n).rev().map(|i| i * total / n).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// `√ᾱ · z0 + √(1−ᾱ) · ε` for an explicit `ᾱ`.
pub fn noise_with_alpha_bar(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Forward diffusion to timestep `t`.
pub fn forward_process(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(dim_err(format!(
            "noise shape {:?} differs from latent {:?}",
            eps.shape(),
            z0.shape()
        )));
    }
    if t == 0 {
        return Err(Error::Schedule("forward process starts at t = 1".into()));
    }
    noise_with_alpha_bar(z0, sched.alpha_bar(t)?, eps)
}

/// One DDIM update from `t` to `t_prev`. With `eta = 0` the update is
/// deterministic and `rng` is not touched.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: Option<&mut Rng>,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::Schedule(format!(
            "DDIM step must move backwards: {t} -> {t_prev}"
        )));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    if ab_t <= 0.0 {
        return Err(Error::Schedule(format!("alpha_bar({t}) = 0")));
    }
    let sq_ab = ab_t.sqrt();
    let sq_1m = (1.0 - ab_t).sqrt();
    let z0_hat = z_t.zip_map(eps_hat, |z, e| (z - sq_1m * e) / sq_ab)?;
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let a = ab_prev.sqrt();
    let mut out = z0_hat.zip_map(eps_hat, |x0, e| a * x0 + dir * e)?;
    if sigma > 0.0 {
        let rng = rng.ok_or_else(|| Error::Config("stochastic DDIM step needs an rng".into()))?;
        let noise = gaussian(rng, out.shape());
        out = out.zip_map(&noise, |v, n| v + sigma * n)?;
    }
    Ok(out)
}

/// Text conditioning for one denoiser call.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// Main prompt embedding `[L × d_cond]`.
    pub main: Tensor,
    /// Subject prompt embedding; `None` disables the auxiliary branch.
    pub subject: Option<Tensor>,
}

/// An ε-prediction network.
pub trait Denoiser {
    /// Latent shape `[tokens, channels]`.
    fn latent_shape(&self) -> [usize; 2];

    /// Predicts the noise in `z_t`. Cross-attention layers consult and feed
    /// `masks` when given.
    fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Conditioning,
        attn: &AttentionConfig,
        masks: Option<&mut MaskState>,
    ) -> Result<Tensor>;
}

/// Mean squared error between `eps` and the model's prediction at `z_t`.
pub fn training_loss<D: Denoiser + ?Sized>(
    model: &D,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: &Tensor,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let z_t = forward_process(z0, t, eps, sched)?;
    let cond = Conditioning {
        main: cond.clone(),
        subject: None,
    };
    let pred = model.predict(&z_t, t, &cond, &AttentionConfig::baseline(), None)?;
    let d = eps.sub(&pred)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub guidance_scale: f64,
    /// Vocabulary id of the null prompt used for the unconditional pass.
    pub unconditional_token: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            unconditional_token: 0,
        }
    }
}

/// Everything a sampling run needs besides the model and the generator.
#[derive(Clone, Debug)]
pub struct SampleRequest<'a> {
    pub prompt: &'a Tensor,
    pub subject: Option<&'a Tensor>,
    /// Embedding of the null prompt.
    pub unconditional: &'a Tensor,
    /// Identifier position in the main prompt, or failing that in the subject
    /// prompt.
    pub identifier: Option<MapSource>,
    pub schedule: &'a NoiseSchedule,
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub attention: AttentionConfig,
}

/// Reverse trajectory from `z_T ~ N(0, I)` to a `z_0` estimate.
///
/// Each step runs the conditional pass (with negative attention and mask
/// recording) and, unless the guidance scale is exactly 1, an unconditional
/// pass with plain attention. The conditional pass's maps produce the mask
/// used by the next step.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    req: &SampleRequest<'_>,
    masks: &mut MaskState,
    rng: &mut Rng,
) -> Result<Tensor> {
    req.attention.validate()?;
    if !(req.guidance.guidance_scale >= 0.0) {
        return Err(Error::Config(format!(
            "guidance scale {} must be >= 0",
            req.guidance.guidance_scale
        )));
    }
    let timesteps = req.schedule.ddim_timesteps(req.steps)?;
    let shape = model.latent_shape();
    let mut z = gaussian(rng, &shape);
    masks.set_source(req.identifier);
    let cond = Conditioning {
        main: req.prompt.clone(),
        subject: req.subject.cloned(),
    };
    let uncond = Conditioning {
        main: req.unconditional.clone(),
        subject: None,
    };
    let plain = AttentionConfig::baseline();
    let g = req.guidance.guidance_scale;
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        masks.begin_step(t);
        let eps_c = model.predict(&z, t, &cond, &req.attention, Some(masks))?;
        masks.end_step()?;
        let eps = if g == 1.0 {
            eps_c
        } else {
            let eps_u = model.predict(&z, t, &uncond, &plain, None)?;
            eps_u.zip_map(&eps_c, |u, c| u + g * (c - u))?
        };
        z = ddim_step(&z, &eps, t, t_prev, req.schedule, 0.0, None)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl Denoiser for Zero {
        fn latent_shape(&self) -> [usize; 2] {
            [4, 2]
        }
        fn predict(
            &self,
            z_t: &Tensor,
            _t: usize,
            _c: &Conditioning,
            _a: &AttentionConfig,
            _m: Option<&mut MaskState>,
        ) -> Result<Tensor> {
            Ok(Tensor::zeros(z_t.shape()))
        }
    }

    struct Oracle(Tensor);
    impl Denoiser for Oracle {
        fn latent_shape(&self) -> [usize; 2] {
            [2, 2]
        }
        fn predict(
            &self,
            _z: &Tensor,
            _t: usize,
            _c: &Conditioning,
            _a: &AttentionConfig,
            _m: Option<&mut MaskState>,
        ) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn alpha_bar_is_cumulative_product() {
        let s = NoiseSchedule::default();
        let mut acc = 1.0;
        for t in 1..=s.steps() {
            acc *= s.alpha(t).unwrap();
            assert!((s.alpha_bar(t).unwrap() - acc).abs() < 1e-12);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(NoiseSchedule::from_alphas(vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn forward_examples() {
        let z0 = Tensor::full(&[1], 1.0);
        let eps = Tensor::full(&[1], 1.0);
        let z = noise_with_alpha_bar(&z0, 0.25, &eps).unwrap();
        assert!((z.data()[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        assert_eq!(noise_with_alpha_bar(&z0, 1.0, &eps).unwrap(), z0);
        let s = NoiseSchedule::default();
        let zero = Tensor::zeros(&[1]);
        let z = forward_process(&z0, 10, &zero, &s).unwrap();
        assert_eq!(z.data()[0], s.alpha_bar(10).unwrap().sqrt());
        assert!(matches!(
            forward_process(&z0, 1001, &eps, &s),
            Err(Error::Schedule(_))
        ));
        assert!(forward_process(&z0, 0, &eps, &s).is_err());
    }

    #[test]
    fn ddim_inverts_forward_with_true_noise() {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(3);
        let z0 = gaussian(&mut rng, &[8]);
        let eps = gaussian(&mut rng, &[8]);
        for t in [1, 500, 1000] {
            let zt = forward_process(&z0, t, &eps, &s).unwrap();
            let back = ddim_step(&zt, &eps, t, 0, &s, 0.0, None).unwrap();
            assert!(back.max_abs_diff(&z0) < 1e-9);
        }
        let zt = forward_process(&z0, 10, &eps, &s).unwrap();
        assert!(ddim_step(&zt, &eps, 10, 10, &s, 0.0, None).is_err());
        let a = ddim_step(&zt, &eps, 10, 5, &s, 0.0, None).unwrap();
        let b = ddim_step(&zt, &eps, 10, 5, &s, 0.0, None).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn training_loss_examples() {
        let s = NoiseSchedule::default();
        let eps = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let z0 = Tensor::zeros(&[2, 2]);
        let cond = Tensor::zeros(&[1, 1]);
        assert_eq!(training_loss(&Oracle(eps.clone()), &z0, 7, &eps, &cond, &s).unwrap(), 0.0);
        let off = Oracle(eps.map(|v| v + 1.0));
        assert!((training_loss(&off, &z0, 7, &eps, &cond, &s).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_model_trajectory_is_closed_form() {
        let s = NoiseSchedule::default();
        let unc = Tensor::zeros(&[1, 1]);
        let req = SampleRequest {
            prompt: &unc,
            subject: None,
            unconditional: &unc,
            identifier: None,
            schedule: &s,
            steps: 10,
            guidance: GuidanceConfig {
                guidance_scale: 1.0,
                unconditional_token: 0,
            },
            attention: AttentionConfig::baseline(),
        };
        let mut masks = MaskState::new((2, 2));
        let out = sample(&Zero, &req, &mut masks, &mut Rng::new(4)).unwrap();
        // with ε̂ = 0 every step rescales by √(ᾱ_prev/ᾱ_t); the product telescopes
        let z_t = gaussian(&mut Rng::new(4), &[4, 2]);
        let first = s.ddim_timesteps(10).unwrap()[0];
        let want = z_t.scale(1.0 / s.alpha_bar(first).unwrap().sqrt());
        assert!(out.max_abs_diff(&want) <= 1e-9 * want.norm());
        let again = sample(&Zero, &req, &mut MaskState::new((2, 2)), &mut Rng::new(4)).unwrap();
        assert!(out.bit_eq(&again));
    }

    #[test]
    fn timesteps_descend_to_stride() {
        let s = NoiseSchedule::default();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 20));
    }
}
