//! Image proxies for subject fidelity and prompt alignment.
//!
//! All classifiers are nearest-centroid or threshold rules whose centroids
//! and thresholds are fitted on rendered dataset images passed through the
//! latent round trip, so they see the same blockiness as generated images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::toy::dataset::{
    decode, encode, Color, Fill, Sample, IMAGE_SIZE, SUBJECT_MAGENTA, SUBJECT_WHITE,
};

/// Pixels within this distance of a subject colour count toward its bin.
const BIN_RADIUS: f64 = 0.45;
/// A pixel belongs to the foreground when this far from the background colour.
const FOREGROUND_DISTANCE: f64 = 0.6;
const RING: usize = 2;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest(p: &[f64], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate() {
        if dist(p, c) < dist(p, &centroids[best]) {
            best = i;
        }
    }
    best
}

fn subject_bins() -> [[f64; 3]; 3] {
    let pink = [
        (SUBJECT_MAGENTA[0] + SUBJECT_WHITE[0]) / 2.0,
        (SUBJECT_MAGENTA[1] + SUBJECT_WHITE[1]) / 2.0,
        (SUBJECT_MAGENTA[2] + SUBJECT_WHITE[2]) / 2.0,
    ];
    [SUBJECT_MAGENTA, SUBJECT_WHITE, pink]
}

/// Fractions of pixels falling into each subject colour bin.
pub fn subject_histogram(image: &Tensor) -> [f64; 3] {
    let bins = subject_bins();
    let mut h = [0.0; 3];
    let n = image.rows() as f64;
    for p in image.data().chunks(3) {
        let k = nearest(p, &bins);
        if dist(p, &bins[k]) <= BIN_RADIUS {
            h[k] += 1.0;
        }
    }
    h.map(|v| v / n)
}

/// Per-channel median of the outer ring.
fn border_color(image: &Tensor) -> [f64; 3] {
    let s = IMAGE_SIZE;
    let mut chans: [Vec<f64>; 3] = Default::default();
    for y in 0..s {
        for x in 0..s {
            if x < RING || y < RING || x >= s - RING || y >= s - RING {
                let p = image.row(y * s + x);
                for c in 0..3 {
                    chans[c].push(p[c]);
                }
            }
        }
    }
    chans.map(|mut v| {
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 0 {
            (v[m - 1] + v[m]) / 2.0
        } else {
            v[m]
        }
    })
}

fn is_dark(p: &[f64]) -> bool {
    p.iter().all(|&v| v < -0.45)
}

/// Raw image features used by every classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Features {
    pub border: [f64; 3],
    /// Mean colour of non-background, non-dark pixels; `None` if there are none.
    pub foreground: Option<[f64; 3]>,
    pub dark_pixels: usize,
}

pub fn features(image: &Tensor) -> Result<Features> {
    let (n, c) = image.dims2()?;
    if n != IMAGE_SIZE * IMAGE_SIZE || c != 3 {
        return Err(Error::Harness(format!(
            "expected a {IMAGE_SIZE}x{IMAGE_SIZE} RGB image, got {:?}",
            image.shape()
        )));
    }
    let border = border_color(image);
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    let mut dark = 0usize;
    for p in image.data().chunks(3) {
        if is_dark(p) {
            dark += 1;
        } else if dist(p, &border) > FOREGROUND_DISTANCE {
            for k in 0..3 {
                sum[k] += p[k];
            }
            count += 1;
        }
    }
    let foreground = (count > 0).then(|| sum.map(|s| s / count as f64));
    Ok(Features {
        border,
        foreground,
        dark_pixels: dark,
    })
}

/// What a prompt asks for, as far as the classifiers can tell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PromptAttributes {
    pub background: Option<Color>,
    pub color: Option<Color>,
    pub hat: bool,
}

impl PromptAttributes {
    /// Reads `<color> <shape>`, `on <color> background` and `with a hat`.
    pub fn parse(prompt: &str) -> Self {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        let mut out = Self::default();
        for (i, w) in words.iter().enumerate() {
            if let Some(c) = Color::from_word(w) {
                if words.get(i + 1) == Some(&"background") {
                    out.background = Some(c);
                } else {
                    out.color = Some(c);
                }
            }
            if *w == "hat" {
                out.hat = true;
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.background.is_some() as usize + self.color.is_some() as usize + self.hat as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyScores {
    pub subject_fidelity: f64,
    pub text_alignment: f64,
}

/// Fitted classifier heads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProxyScorer {
    background_centroids: Vec<[f64; 3]>,
    color_centroids: Vec<[f64; 3]>,
    hat_threshold: f64,
    references: Vec<[f64; 3]>,
}

fn mean3(v: &[[f64; 3]]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for p in v {
        for k in 0..3 {
            s[k] += p[k];
        }
    }
    s.map(|x| x / v.len().max(1) as f64)
}

/// Image as the model could reproduce it: latent round trip.
pub fn round_trip(image: &Tensor) -> Result<Tensor> {
    decode(&encode(image)?)
}

impl ProxyScorer {
    /// Fits centroids and the hat threshold on `samples` and stores subject
    /// reference histograms from `subject_refs`.
    pub fn fit(samples: &[Sample], subject_refs: &[Sample]) -> Result<Self> {
        if samples.is_empty() || subject_refs.is_empty() {
            return Err(Error::Harness("scorer needs training and reference images".into()));
        }
        let mut bg: Vec<Vec<[f64; 3]>> = vec![Vec::new(); Color::ALL.len()];
        let mut fg: Vec<Vec<[f64; 3]>> = vec![Vec::new(); Color::ALL.len()];
        let (mut with_hat, mut without_hat) = (Vec::new(), Vec::new());
        for s in samples {
            let f = features(&round_trip(&s.image)?)?;
            let b = Color::ALL.iter().position(|&c| c == s.scene.background).expect("palette");
            bg[b].push(f.border);
            if let (Fill::Solid(c), Some(m)) = (s.scene.fill, f.foreground) {
                let i = Color::ALL.iter().position(|&x| x == c).expect("palette");
                fg[i].push(m);
            }
            if s.scene.hat {
                with_hat.push(f.dark_pixels as f64);
            } else {
                without_hat.push(f.dark_pixels as f64);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let hat_threshold = if with_hat.is_empty() {
            f64::MAX
        } else {
            (mean(&with_hat) + mean(&without_hat)) / 2.0
        };
        let references = subject_refs
            .iter()
            .map(|s| round_trip(&s.image).map(|i| subject_histogram(&i)))
            .collect::<Result<_>>()?;
        Ok(Self {
            background_centroids: bg.iter().map(|v| mean3(v)).collect(),
            color_centroids: fg.iter().map(|v| mean3(v)).collect(),
            hat_threshold,
            references,
        })
    }

    pub fn is_trained(&self) -> bool {
        !self.references.is_empty() && self.background_centroids.len() == Color::ALL.len()
    }

    fn check(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(Error::Harness("proxy classifiers are not trained".into()))
        }
    }

    pub fn classify_background(&self, image: &Tensor) -> Result<Color> {
        self.check()?;
        let f = features(image)?;
        Ok(Color::ALL[nearest(&f.border, &self.background_centroids)])
    }

    pub fn classify_color(&self, image: &Tensor) -> Result<Option<Color>> {
        self.check()?;
        let f = features(image)?;
        Ok(f.foreground
            .map(|m| Color::ALL[nearest(&m, &self.color_centroids)]))
    }

    pub fn detect_hat(&self, image: &Tensor) -> Result<bool> {
        self.check()?;
        Ok(features(image)?.dark_pixels as f64 > self.hat_threshold)
    }

    /// Best histogram intersection against the references, normalised by the
    /// reference mass; 1 for an exact reference.
    pub fn subject_fidelity(&self, image: &Tensor) -> Result<f64> {
        self.check()?;
        let h = subject_histogram(image);
        let mut best: f64 = 0.0;
        for r in &self.references {
            let mass: f64 = r.iter().sum();
            if mass > 0.0 {
                let inter: f64 = h.iter().zip(r).map(|(a, b)| a.min(*b)).sum();
                best = best.max(inter / mass);
            }
        }
        Ok(best.clamp(0.0, 1.0))
    }

    /// Fraction of the prompt's attributes the classifiers find; 1 when the
    /// prompt names none.
    pub fn text_alignment(&self, image: &Tensor, prompt: &str) -> Result<f64> {
        self.check()?;
        let want = PromptAttributes::parse(prompt);
        if want.count() == 0 {
            return Ok(1.0);
        }
        let mut hits = 0usize;
        if let Some(b) = want.background {
            hits += (self.classify_background(image)? == b) as usize;
        }
        if let Some(c) = want.color {
            hits += (self.classify_color(image)? == Some(c)) as usize;
        }
        if want.hat {
            hits += self.detect_hat(image)? as usize;
        }
        Ok(hits as f64 / want.count() as f64)
    }

    pub fn score_image(&self, image: &Tensor, prompt: &str) -> Result<ProxyScores> {
        Ok(ProxyScores {
            subject_fidelity: self.subject_fidelity(image)?,
            text_alignment: self.text_alignment(image, prompt)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let me: Self = serde_json::from_str(s)?;
        me.check()?;
        Ok(me)
    }
}
