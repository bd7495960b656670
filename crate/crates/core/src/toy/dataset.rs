//! Procedural 32×32 shapes with captions, plus the striped "subject".
//!
//! Images are `[1024 × 3]` (row-major pixels, RGB) in `[-1, 1]`. The latent
//! space is a fixed 2× average pool to `[256 × 3]`; decoding is 2× nearest
//! upsampling.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{avg_pool2, upsample2, Rng, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const LATENT_SIZE: usize = 16;
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Gray,
}

impl Color {
    pub const ALL: [Color; 5] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Gray,
    ];
    /// Colours a shape may take.
    pub const SHAPE: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Gray => "gray",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, -0.7, -0.7],
            Color::Green => [-0.7, 0.8, -0.7],
            Color::Blue => [-0.7, -0.6, 0.9],
            Color::Yellow => [0.9, 0.8, -0.7],
            Color::Gray => [0.0, 0.0, 0.0],
        }
    }
}

pub const HAT_RGB: [f64; 3] = [-0.95, -0.95, -0.95];
pub const SUBJECT_MAGENTA: [f64; 3] = [0.9, -0.7, 0.9];
pub const SUBJECT_WHITE: [f64; 3] = [0.95, 0.95, 0.95];
/// Background of every subject photo.
pub const SUBJECT_BACKGROUND: Color = Color::Gray;
pub const SUBJECT_SHAPE: Shape = Shape::Circle;
const STRIPE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Fill {
    Solid(Color),
    /// Alternating magenta and white horizontal bands.
    SubjectStripes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: Shape,
    pub fill: Fill,
    pub background: Color,
    pub hat: bool,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Scene {
    fn top(&self) -> f64 {
        match self.shape {
            Shape::Square => self.cy - 0.85 * self.radius,
            _ => self.cy - self.radius,
        }
    }

    fn inside(&self, px: f64, py: f64) -> bool {
        let (dx, dy, r) = (px - self.cx, py - self.cy, self.radius);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                let apex = self.cy - r;
                let base = self.cy + 0.8 * r;
                py >= apex && py <= base && dx.abs() <= r * (py - apex) / (base - apex)
            }
        }
    }

    fn in_hat(&self, px: f64, py: f64) -> bool {
        let top = self.top();
        self.hat && (px - self.cx).abs() <= 0.6 * self.radius && py < top && py >= top - 3.0
    }

    pub fn render(&self) -> Tensor {
        let n = IMAGE_SIZE;
        let mut data = Vec::with_capacity(n * n * CHANNELS);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let rgb = if self.inside(px, py) {
                    match self.fill {
                        Fill::Solid(c) => c.rgb(),
                        Fill::SubjectStripes => {
                            let band = ((py - self.top()) / STRIPE).floor() as i64;
                            if band.rem_euclid(2) == 0 {
                                SUBJECT_MAGENTA
                            } else {
                                SUBJECT_WHITE
                            }
                        }
                    }
                } else if self.in_hat(px, py) {
                    HAT_RGB
                } else {
                    self.background.rgb()
                };
                data.extend_from_slice(&rgb);
            }
        }
        Tensor::new(vec![n * n, CHANNELS], data).expect("image buffer size")
    }

    fn random_placement(rng: &mut Rng) -> (f64, f64, f64) {
        let cx = rng.uniform_range(12.0, 20.0);
        let cy = rng.uniform_range(13.0, 20.0);
        let r = rng.uniform_range(6.0, 9.0);
        (cx, cy, r)
    }

    pub fn random(rng: &mut Rng) -> Self {
        let shape = Shape::ALL[rng.below(3)];
        let color = Color::SHAPE[rng.below(4)];
        let bg_choices: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != color).collect();
        let background = bg_choices[rng.below(bg_choices.len())];
        let hat = rng.bernoulli(0.3);
        let (cx, cy, radius) = Self::random_placement(rng);
        Self {
            shape,
            fill: Fill::Solid(color),
            background,
            hat,
            cx,
            cy,
            radius,
        }
    }

    /// The personalised subject, always photographed on the same background.
    pub fn subject(rng: &mut Rng) -> Self {
        let cx = rng.uniform_range(14.0, 18.0);
        let cy = rng.uniform_range(14.0, 18.0);
        Self {
            shape: SUBJECT_SHAPE,
            fill: Fill::SubjectStripes,
            background: SUBJECT_BACKGROUND,
            hat: false,
            cx,
            cy,
            radius: 8.0,
        }
    }

    /// Full caption: `a photo of a <color> <shape> [with a hat] on <bg> background`.
    pub fn caption(&self, with_color: bool, with_background: bool) -> String {
        let mut words = vec!["a", "photo", "of", "a"];
        if with_color {
            if let Fill::Solid(c) = self.fill {
                words.push(c.word());
            }
        }
        words.push(self.shape.word());
        if self.hat {
            words.extend(["with", "a", "hat"]);
        }
        if with_background {
            words.extend(["on", self.background.word(), "background"]);
        }
        words.join(" ")
    }
}

pub fn encode(image: &Tensor) -> Result<Tensor> {
    avg_pool2(image, IMAGE_SIZE, IMAGE_SIZE)
}

pub fn decode(latent: &Tensor) -> Result<Tensor> {
    upsample2(latent, LATENT_SIZE, LATENT_SIZE)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: Scene,
    pub image: Tensor,
    pub latent: Tensor,
    pub caption: String,
}

impl Sample {
    pub fn new(scene: Scene, caption: String) -> Self {
        let image = scene.render();
        let latent = encode(&image).expect("image is 32x32");
        Self {
            scene,
            image,
            latent,
            caption,
        }
    }
}

/// Base captions drop the colour or background phrase some of the time so
/// that a missing attribute means "unspecified" rather than a fixed value.
pub const P_DROP_COLOR: f64 = 0.15;
pub const P_DROP_BACKGROUND: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub samples: Vec<Sample>,
    pub subject_images: Vec<Sample>,
    pub class_prior_images: Vec<Sample>,
}

impl ToyDataset {
    pub fn generate(count: usize, subject_count: usize, prior_count: usize, rng: &mut Rng) -> Self {
        let samples = (0..count)
            .map(|_| {
                let scene = Scene::random(rng);
                let with_color = !rng.bernoulli(P_DROP_COLOR);
                let with_bg = !rng.bernoulli(P_DROP_BACKGROUND);
                Sample::new(scene, scene.caption(with_color, with_bg))
            })
            .collect();
        Self {
            samples,
            subject_images: subject_images(subject_count, rng),
            class_prior_images: class_prior_images(prior_count, rng),
        }
    }
}

/// `n` photos of the subject captioned `a photo of a sks circle`.
pub fn subject_images(n: usize, rng: &mut Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let scene = Scene::subject(rng);
            Sample::new(scene, subject_caption(super::vocab::IDENTIFIER))
        })
        .collect()
}

/// Generic circles captioned `a photo of a circle`.
pub fn class_prior_images(n: usize, rng: &mut Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let mut scene = Scene::random(rng);
            scene.shape = SUBJECT_SHAPE;
            scene.hat = false;
            Sample::new(scene, class_caption())
        })
        .collect()
}

pub fn subject_caption(identifier: &str) -> String {
    format!("a photo of a {identifier} {}", SUBJECT_SHAPE.word())
}

pub fn class_caption() -> String {
    format!("a photo of a {}", SUBJECT_SHAPE.word())
}

/// The short subject prompt fed to the auxiliary attention branch.
pub fn subject_prompt(identifier: &str) -> String {
    format!("a {identifier} {}", SUBJECT_SHAPE.word())
}

/// Prompts that place the subject in new contexts.
pub fn recontext_prompts(identifier: &str) -> Vec<String> {
    let mut out = Vec::new();
    for hat in [false, true] {
        for bg in [Color::Red, Color::Green, Color::Blue, Color::Yellow] {
            let mut p = subject_caption(identifier);
            if hat {
                p.push_str(" with a hat");
            }
            p.push_str(&format!(" on {} background", bg.word()));
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::Vocabulary;

    #[test]
    fn captions_tokenize_and_never_use_identifier() {
        let v = Vocabulary::default();
        let ds = ToyDataset::generate(200, 4, 8, &mut Rng::new(1));
        let id = v.identifier_id().unwrap();
        for s in &ds.samples {
            let toks = v.tokenize(&s.caption).unwrap();
            assert!(!toks.contains(&id), "{}", s.caption);
            assert!(toks.len() <= 16);
        }
        for p in recontext_prompts("sks") {
            v.tokenize(&p).unwrap();
        }
        assert_eq!(recontext_prompts("sks").len(), 8);
    }

    #[test]
    fn images_are_in_range_and_subject_is_distinct() {
        let mut rng = Rng::new(2);
        let subj = subject_images(4, &mut rng);
        for s in &subj {
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let magenta = s
                .image
                .data()
                .chunks(3)
                .filter(|p| p == &SUBJECT_MAGENTA)
                .count();
            assert!(magenta > 50);
            assert_eq!(s.latent.shape(), &[256, 3]);
        }
        let ds = ToyDataset::generate(100, 0, 0, &mut rng);
        for s in &ds.samples {
            assert!(!s.image.data().chunks(3).any(|p| p == SUBJECT_MAGENTA));
        }
    }

    #[test]
    fn decode_of_encode_is_blockwise_mean() {
        let img = Scene::random(&mut Rng::new(3)).render();
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
    }
}
