//! Background mask from identifier-token attention.
//!
//! During each denoising step the identifier-token column of every attention
//! head at the base resolution is collected. Finalising averages those maps,
//! marks elements strictly above the mean as subject, and inverts the result
//! into the background mask consumed by negative attention.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{resize_nearest, Tensor};

/// Which mask a layer receives before the current step has finished.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Every layer of step `t` uses the mask finalised at step `t+1`.
    #[default]
    Carry,
    /// Layers after the first base-resolution recording use a mask built from
    /// the current step's maps collected so far.
    Refresh,
}

/// Which attention branch supplies the identifier-token column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    Main(usize),
    Subject(usize),
}

impl MapSource {
    pub fn token_index(self) -> usize {
        match self {
            MapSource::Main(i) | MapSource::Subject(i) => i,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskOrigin {
    /// No mask finalised yet: all ones.
    Default,
    /// Previous step's mask.
    Carried,
    /// Built from maps recorded earlier in the same step.
    Current,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskEvent {
    pub step: usize,
    pub layer: usize,
    pub origin: MaskOrigin,
}

#[derive(Clone, Debug)]
pub struct MaskState {
    base_resolution: (usize, usize),
    mode: MaskMode,
    source: Option<MapSource>,
    accumulated_maps: Vec<Tensor>,
    background_mask: Option<Tensor>,
    subject_mask: Option<Tensor>,
    // mask handed to layers in the current step (carry scheme)
    step_mask: Option<Tensor>,
    step_origin: MaskOrigin,
    finalized_this_step: bool,
    step: usize,
    log: Vec<MaskEvent>,
    keep_history: bool,
    history: Vec<(usize, Tensor)>,
}

impl MaskState {
    pub fn new(base_resolution: (usize, usize)) -> Self {
        Self {
            base_resolution,
            mode: MaskMode::Carry,
            source: None,
            accumulated_maps: Vec::new(),
            background_mask: None,
            subject_mask: None,
            step_mask: None,
            step_origin: MaskOrigin::Default,
            finalized_this_step: false,
            step: 0,
            log: Vec::new(),
            keep_history: false,
            history: Vec::new(),
        }
    }

    pub fn with_mode(mut self, mode: MaskMode) -> Self {
        self.mode = mode;
        self
    }

    /// Keep a copy of every finalised background mask, keyed by step.
    pub fn with_history(mut self) -> Self {
        self.keep_history = true;
        self
    }

    pub fn set_source(&mut self, source: Option<MapSource>) {
        self.source = source;
    }

    pub fn source(&self) -> Option<MapSource> {
        self.source
    }

    pub fn base_resolution(&self) -> (usize, usize) {
        self.base_resolution
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn accumulated_maps(&self) -> &[Tensor] {
        &self.accumulated_maps
    }

    pub fn background_mask(&self) -> Option<&Tensor> {
        self.background_mask.as_ref()
    }

    pub fn subject_mask(&self) -> Option<&Tensor> {
        self.subject_mask.as_ref()
    }

    pub fn log(&self) -> &[MaskEvent] {
        &self.log
    }

    pub fn history(&self) -> &[(usize, Tensor)] {
        &self.history
    }

    /// Starts denoising step `step`: clears this step's maps and fixes the
    /// mask that early layers will see.
    pub fn begin_step(&mut self, step: usize) {
        self.step = step;
        self.accumulated_maps.clear();
        self.finalized_this_step = false;
        self.step_origin = if self.background_mask.is_some() {
            MaskOrigin::Carried
        } else {
            MaskOrigin::Default
        };
        self.step_mask = Some(self.first_step_mask());
    }

    /// Mask for layers that run before any map of the current step exists:
    /// the previous step's background mask, or all ones on a fresh run.
    pub fn first_step_mask(&self) -> Tensor {
        match &self.background_mask {
            Some(m) => m.clone(),
            None => Tensor::full(&[self.base_resolution.0, self.base_resolution.1], 1.0),
        }
    }

    /// Appends the identifier column of each head of `probs` (`[H × N × L]`).
    /// Layers whose resolution differs from the base resolution are skipped.
    pub fn record(&mut self, probs: &Tensor, resolution: (usize, usize), token_index: usize) -> Result<()> {
        if resolution != self.base_resolution {
            return Ok(());
        }
        let [heads, n, l] = probs.shape() else {
            return Err(dim_err(format!(
                "attention maps must be [H, N, L], got {:?}",
                probs.shape()
            )));
        };
        let (heads, n, l) = (*heads, *n, *l);
        if n != resolution.0 * resolution.1 {
            return Err(dim_err(format!(
                "{n} query tokens for a {}x{} layer",
                resolution.0, resolution.1
            )));
        }
        if token_index >= l {
            return Err(Error::Index {
                index: token_index,
                len: l,
            });
        }
        let d = probs.data();
        for h in 0..heads {
            let col = (0..n).map(|i| d[(h * n + i) * l + token_index]).collect();
            self.accumulated_maps.push(Tensor::new(vec![n], col)?);
        }
        Ok(())
    }

    /// Like [`record`](Self::record) but nearest-resizes each head's column
    /// from `resolution` to the base resolution first.
    pub fn record_resampled(&mut self, probs: &Tensor, resolution: (usize, usize), token_index: usize) -> Result<()> {
        if resolution == self.base_resolution {
            return self.record(probs, resolution, token_index);
        }
        let [heads, n, l] = probs.shape() else {
            return Err(dim_err(format!(
                "attention maps must be [H, N, L], got {:?}",
                probs.shape()
            )));
        };
        let (heads, n, l) = (*heads, *n, *l);
        if n != resolution.0 * resolution.1 {
            return Err(dim_err(format!(
                "{n} query tokens for a {}x{} layer",
                resolution.0, resolution.1
            )));
        }
        if token_index >= l {
            return Err(Error::Index {
                index: token_index,
                len: l,
            });
        }
        let (bh, bw) = self.base_resolution;
        let d = probs.data();
        for h in 0..heads {
            let col: Vec<f64> = (0..n).map(|i| d[(h * n + i) * l + token_index]).collect();
            let map = Tensor::new(vec![resolution.0, resolution.1], col)?;
            self.accumulated_maps
                .push(resize_nearest(&map, bh, bw)?.reshape(&[bh * bw])?);
        }
        Ok(())
    }

    /// Averages this step's maps and binarises strictly above the mean.
    /// Stores and returns the background mask `[h × w]`.
    pub fn finalize_mask(&mut self) -> Result<Tensor> {
        let (h, w) = self.base_resolution;
        let first = self
            .accumulated_maps
            .first()
            .ok_or_else(|| Error::MaskState("no maps recorded this step".into()))?;
        let n = first.len();
        if self.accumulated_maps.iter().any(|m| m.len() != n) {
            return Err(dim_err("recorded maps differ in length"));
        }
        // per-element sums over sorted values do not depend on head or layer order
        let count = self.accumulated_maps.len() as f64;
        let mut column = Vec::with_capacity(self.accumulated_maps.len());
        let avg: Vec<f64> = (0..n)
            .map(|i| {
                column.clear();
                column.extend(self.accumulated_maps.iter().map(|m| m.data()[i]));
                column.sort_by(f64::total_cmp);
                column.iter().sum::<f64>() / count
            })
            .collect();
        if avg.len() != h * w {
            return Err(dim_err(format!(
                "{} map entries for a {h}x{w} base resolution",
                avg.len()
            )));
        }
        let (subject, background) = binarize_above_mean(&avg);
        self.subject_mask = Some(Tensor::new(vec![h, w], subject)?);
        let bg = Tensor::new(vec![h, w], background)?;
        if self.keep_history {
            self.history.push((self.step, bg.clone()));
        }
        self.background_mask = Some(bg.clone());
        self.finalized_this_step = true;
        Ok(bg)
    }

    /// Finalises if anything was recorded; called once per step after the
    /// conditional pass.
    pub fn end_step(&mut self) -> Result<()> {
        if !self.accumulated_maps.is_empty() {
            self.finalize_mask()?;
        }
        Ok(())
    }

    /// The finalised background mask resized to `h2×w2`, flattened row-major.
    pub fn mask_for_resolution(&self, h2: usize, w2: usize) -> Result<Tensor> {
        let m = self
            .background_mask
            .as_ref()
            .filter(|_| self.finalized_this_step)
            .ok_or_else(|| Error::MaskState("no mask finalized this step".into()))?;
        resize_nearest(m, h2, w2)?.reshape(&[h2 * w2])
    }

    /// Mask for attention layer `layer` at resolution `h2×w2` within the
    /// current step, following the configured [`MaskMode`]. Every call is
    /// logged.
    pub fn layer_mask(&mut self, layer: usize, h2: usize, w2: usize) -> Result<Tensor> {
        let (mask, origin) = match self.mode {
            MaskMode::Refresh if !self.accumulated_maps.is_empty() => {
                self.finalize_mask()?;
                (self.mask_for_resolution(h2, w2)?, MaskOrigin::Current)
            }
            _ => {
                let carried = match &self.step_mask {
                    Some(m) => m.clone(),
                    None => self.first_step_mask(),
                };
                (
                    resize_nearest(&carried, h2, w2)?.reshape(&[h2 * w2])?,
                    self.step_origin,
                )
            }
        };
        self.log.push(MaskEvent {
            step: self.step,
            layer,
            origin,
        });
        Ok(mask)
    }
}

/// Subject = 1 where the value is strictly above the mean (ties go to the
/// background); background is the exact complement.
pub fn binarize_above_mean(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    // shifting by the first element makes the mean of a constant map exact
    let v0 = values[0];
    let mean = v0 + values.iter().map(|v| v - v0).sum::<f64>() / values.len() as f64;
    let subject: Vec<f64> = values
        .iter()
        .map(|&v| if v > mean { 1.0 } else { 0.0 })
        .collect();
    let background = subject.iter().map(|s| 1.0 - s).collect();
    (subject, background)
}

/// Writes a binary `[h × w]` mask as a P5 greyscale image (1 → 255).
pub fn write_pgm(mask: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = mask.dims2()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        mask.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_from_columns(cols: &[Vec<f64>], l: usize, token: usize) -> Tensor {
        let n = cols[0].len();
        let mut data = vec![0.0; cols.len() * n * l];
        for (h, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[(h * n + i) * l + token] = v;
            }
        }
        Tensor::new(vec![cols.len(), n, l], data).unwrap()
    }

    #[test]
    fn record_counts_heads_and_skips_other_resolutions() {
        let mut st = MaskState::new((2, 2));
        let p = probs_from_columns(&[vec![0.1; 4], vec![0.2; 4]], 3, 1);
        st.record(&p, (2, 2), 1).unwrap();
        assert_eq!(st.accumulated_maps().len(), 2);
        let small = probs_from_columns(&[vec![0.5]], 3, 1);
        st.record(&small, (1, 1), 1).unwrap();
        assert_eq!(st.accumulated_maps().len(), 2);
        assert!(matches!(
            st.record(&p, (2, 2), 3),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn two_layers_average_then_binarize() {
        let mut st = MaskState::new((2, 2));
        // average of the two is [[0.1, 0.3], [0.2, 0.4]], mean 0.25
        st.record(&probs_from_columns(&[vec![0.0, 0.4, 0.2, 0.6]], 2, 0), (2, 2), 0)
            .unwrap();
        st.record(&probs_from_columns(&[vec![0.2, 0.2, 0.2, 0.2]], 2, 0), (2, 2), 0)
            .unwrap();
        let bg = st.finalize_mask().unwrap();
        assert_eq!(bg.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(st.subject_mask().unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_map_is_all_background() {
        let mut st = MaskState::new((4, 4));
        st.record(&probs_from_columns(&[vec![0.1; 16]], 1, 0), (4, 4), 0)
            .unwrap();
        let bg = st.finalize_mask().unwrap();
        assert!(bg.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn finalize_without_maps_fails() {
        let mut st = MaskState::new((2, 2));
        assert!(matches!(st.finalize_mask(), Err(Error::MaskState(_))));
        assert!(matches!(st.mask_for_resolution(2, 2), Err(Error::MaskState(_))));
    }

    #[test]
    fn resized_mask_expands_blocks() {
        let mut st = MaskState::new((2, 2));
        st.record(&probs_from_columns(&[vec![0.0, 1.0, 1.0, 0.0]], 1, 0), (2, 2), 0)
            .unwrap();
        st.finalize_mask().unwrap();
        assert_eq!(st.mask_for_resolution(2, 2).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        let big = st.mask_for_resolution(4, 4).unwrap();
        assert_eq!(
            big.data(),
            &[
                1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0
            ]
        );
    }

    #[test]
    fn carry_rule_and_fresh_default() {
        let mut st = MaskState::new((2, 2));
        assert!(st.first_step_mask().data().iter().all(|&v| v == 1.0));
        st.begin_step(10);
        st.record(&probs_from_columns(&[vec![0.9, 0.0, 0.0, 0.0]], 1, 0), (2, 2), 0)
            .unwrap();
        st.end_step().unwrap();
        st.begin_step(9);
        assert!(st.accumulated_maps().is_empty());
        assert_eq!(st.first_step_mask().data(), &[0.0, 1.0, 1.0, 1.0]);
        let m = st.layer_mask(0, 2, 2).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(st.log()[0].origin, MaskOrigin::Carried);
    }

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask_t1.pgm");
        write_pgm(&Tensor::from_rows(&[vec![1.0, 0.0]]), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\xff\x00");
    }
}
