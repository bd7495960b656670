//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use negattn::attention::{self, AttentionConfig, ProjectionWeights};
use negattn::diffusion::{self, GuidanceConfig, NoiseSchedule};
use negattn::mask::{self, MaskMode};
use negattn::numerics::{self, Rng, Tensor};
use negattn::toy::{self, GenerateOptions};
use negattn::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::new(vec![r, c], rows.into_iter().flatten().collect()).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = *t.shape().last().unwrap_or(&1);
    t.data().chunks(c.max(1)).map(<[f64]>::to_vec).collect()
}

fn cube(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (n, l) = (s[1], s[2]);
    t.data()
        .chunks(n * l)
        .map(|h| h.chunks(l).map(<[f64]>::to_vec).collect())
        .collect()
}

fn weights(w_q: Vec<Vec<f64>>, w_k: Vec<Vec<f64>>, w_v: Vec<Vec<f64>>, w_out: Vec<Vec<f64>>, heads: usize) -> PyResult<ProjectionWeights> {
    ProjectionWeights::new(matrix(w_q)?, matrix(w_k)?, matrix(w_v)?, matrix(w_out)?, heads).map_err(py_err)
}

/// Multi-head cross-attention; returns `(z, probs)` with probs indexed
/// `[head][query][key]`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn cross_attention(
    f: Vec<Vec<f64>>,
    cond: Vec<Vec<f64>>,
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    w_out: Vec<Vec<f64>>,
    heads: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let w = weights(w_q, w_k, w_v, w_out, heads)?;
    let (z, p) = attention::cross_attention(&matrix(f)?, &matrix(cond)?, &w).map_err(py_err)?;
    Ok((rows(&z), cube(&p)))
}

/// Masked negative attention.
#[pyfunction]
#[pyo3(signature = (f, cond_main, cond_subject, w_q, w_k, w_v, w_out, heads, mask, lambda_, negative_attention=true, background_masking=true))]
#[allow(clippy::too_many_arguments)]
fn negative_attention(
    f: Vec<Vec<f64>>,
    cond_main: Vec<Vec<f64>>,
    cond_subject: Vec<Vec<f64>>,
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    w_out: Vec<Vec<f64>>,
    heads: usize,
    mask: Vec<f64>,
    lambda_: f64,
    negative_attention: bool,
    background_masking: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let w = weights(w_q, w_k, w_v, w_out, heads)?;
    let cfg = AttentionConfig {
        lambda: lambda_,
        negative_attention_enabled: negative_attention,
        background_masking_enabled: background_masking,
        record_maps: false,
    };
    let n = mask.len();
    let m = Tensor::new(vec![n], mask).map_err(py_err)?;
    let (z, _) = attention::negative_attention(&matrix(f)?, &matrix(cond_main)?, &matrix(cond_subject)?, &w, &m, &cfg)
        .map_err(py_err)?;
    Ok(rows(&z))
}

/// `(subject, background)` masks: 1 strictly above the mean.
#[pyfunction]
fn binarize_above_mean(values: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if values.is_empty() {
        return Err(PyValueError::new_err("empty map"));
    }
    Ok(mask::binarize_above_mean(&values))
}

#[pyfunction]
fn resize_nearest(m: Vec<Vec<f64>>, h2: usize, w2: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&numerics::resize_nearest(&matrix(m)?, h2, w2).map_err(py_err)?))
}

/// Standard normal matrix from a seeded generator.
#[pyfunction]
fn gaussian(seed: u64, rows_: usize, cols: usize) -> Vec<Vec<f64>> {
    rows(&numerics::gaussian(&mut Rng::new(seed), &[rows_, cols]))
}

#[pyclass(name = "NoiseSchedule")]
struct PySchedule(NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=1000, beta_start=1e-4, beta_end=0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        NoiseSchedule::linear(steps, beta_start, beta_end).map(Self).map_err(py_err)
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.0.alpha_bar(t).map_err(py_err)
    }

    fn ddim_timesteps(&self, n: usize) -> PyResult<Vec<usize>> {
        self.0.ddim_timesteps(n).map_err(py_err)
    }

    fn forward_process(&self, z0: Vec<Vec<f64>>, t: usize, eps: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = diffusion::forward_process(&matrix(z0)?, t, &matrix(eps)?, &self.0).map_err(py_err)?;
        Ok(rows(&z))
    }

    fn ddim_step(&self, z_t: Vec<Vec<f64>>, eps: Vec<Vec<f64>>, t: usize, t_prev: usize) -> PyResult<Vec<Vec<f64>>> {
        let z = diffusion::ddim_step(&matrix(z_t)?, &matrix(eps)?, t, t_prev, &self.0, 0.0, None).map_err(py_err)?;
        Ok(rows(&z))
    }
}

#[pyclass(name = "MaskState")]
struct PyMaskState(mask::MaskState);

#[pymethods]
impl PyMaskState {
    #[new]
    #[pyo3(signature = (height, width, mode="carry"))]
    fn new(height: usize, width: usize, mode: &str) -> PyResult<Self> {
        let mode = match mode {
            "carry" => MaskMode::Carry,
            "refresh" => MaskMode::Refresh,
            other => return Err(PyValueError::new_err(format!("unknown mask mode {other:?}"))),
        };
        Ok(Self(mask::MaskState::new((height, width)).with_mode(mode)))
    }

    fn begin_step(&mut self, step: usize) {
        self.0.begin_step(step);
    }

    fn end_step(&mut self) -> PyResult<()> {
        self.0.end_step().map_err(py_err)
    }

    /// `probs` is `[head][query][key]`.
    fn record(&mut self, probs: Vec<Vec<Vec<f64>>>, height: usize, width: usize, token_index: usize) -> PyResult<()> {
        let h = probs.len();
        let n = probs.first().map_or(0, Vec::len);
        let l = probs.first().and_then(|p| p.first()).map_or(0, Vec::len);
        let data: Vec<f64> = probs.into_iter().flatten().flatten().collect();
        let t = Tensor::new(vec![h, n, l], data).map_err(py_err)?;
        self.0.record(&t, (height, width), token_index).map_err(py_err)
    }

    fn finalize_mask(&mut self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.0.finalize_mask().map_err(py_err)?))
    }

    fn mask_for_resolution(&self, h2: usize, w2: usize) -> PyResult<Vec<f64>> {
        Ok(self.0.mask_for_resolution(h2, w2).map_err(py_err)?.into_data())
    }

    fn layer_mask(&mut self, layer: usize, h2: usize, w2: usize) -> PyResult<Vec<f64>> {
        Ok(self.0.layer_mask(layer, h2, w2).map_err(py_err)?.into_data())
    }

    fn accumulated_maps(&self) -> usize {
        self.0.accumulated_maps().len()
    }
}

/// A trained toy model loaded from a checkpoint file.
#[pyclass(name = "Model")]
struct PyModel(toy::Checkpoint);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        toy::load_checkpoint(&path).map(Self).map_err(py_err)
    }

    /// Random weights with the default configuration.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn untrained(seed: u64) -> PyResult<Self> {
        let model = toy::ToyModel::new(toy::ModelConfig::default(), toy::Vocabulary::default(), &mut Rng::new(seed))
            .map_err(py_err)?;
        Ok(Self(toy::Checkpoint {
            model,
            meta: toy::CheckpointMeta {
                mode: toy::TrainMode::Base,
                steps: 0,
                ppl_weight: 0.0,
                seed,
                initial_running_loss: 0.0,
                final_running_loss: 0.0,
            },
        }))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        toy::save_checkpoint(&self.0, &path).map_err(py_err)
    }

    fn parameter_count(&self) -> usize {
        self.0.model.parameter_count()
    }

    fn encode_prompt(&self, prompt: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.0.model.encode_prompt(prompt).map_err(py_err)?))
    }

    /// Samples one image and returns it as binary PPM bytes.
    #[pyo3(signature = (prompt, seed=0, lambda_=0.6, subject_prompt=None, background_masking=true, steps=50, guidance_scale=7.5))]
    #[allow(clippy::too_many_arguments)]
    fn generate_ppm(
        &self,
        prompt: &str,
        seed: u64,
        lambda_: f64,
        subject_prompt: Option<String>,
        background_masking: bool,
        steps: usize,
        guidance_scale: f64,
    ) -> PyResult<Vec<u8>> {
        let attention = if subject_prompt.is_some() {
            AttentionConfig {
                lambda: lambda_,
                negative_attention_enabled: true,
                background_masking_enabled: background_masking,
                record_maps: true,
            }
        } else {
            AttentionConfig::baseline()
        };
        let opts = GenerateOptions {
            prompt: prompt.to_string(),
            subject_prompt,
            attention,
            guidance: GuidanceConfig {
                guidance_scale,
                ..GuidanceConfig::default()
            },
            steps,
            ..GenerateOptions::default()
        };
        let g = toy::generate(&self.0.model, &opts, &mut Rng::new(seed)).map_err(py_err)?;
        toy::ppm_bytes(&g.image, toy::dataset::IMAGE_SIZE).map_err(py_err)
    }
}

#[pymodule(name = "negattn")]
fn negattn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cross_attention, m)?)?;
    m.add_function(wrap_pyfunction!(negative_attention, m)?)?;
    m.add_function(wrap_pyfunction!(binarize_above_mean, m)?)?;
    m.add_function(wrap_pyfunction!(resize_nearest, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian, m)?)?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyMaskState>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
