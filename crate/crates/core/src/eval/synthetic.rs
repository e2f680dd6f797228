//! Synthetic suite with exact ground truth, and a hand-built detector for it.
//!
//! Each image shows one object in a pure primary colour (red, green or blue
//! for classes 0, 1, 2) on a dim gray texture. Some images add a brighter
//! object of another class. Every object is labelled and boxed.
//!
//! The detector has one colour-opponent filter per class (own channel minus
//! the others, silent on gray) plus a class-agnostic brightness filter that
//! every class score rewards. The brightness filter lets a bright distractor
//! dominate plain gradients while leaving the class evidence itself local to
//! each object.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{Dataset, Region, Sample};
use crate::model::{Family, GraphBuilder, LayerKind, ModelGraph};
use crate::saliency::BBox;
use crate::tensor::{ConvGeometry, Shape, Tensor};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Object side (or diameter) range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Largest background gray level.
    pub background: f32,
    /// Probability that an image carries a second, brighter object.
    pub distractor_probability: f64,
    /// Intensity range of the main object when a distractor is present.
    pub dim: [f32; 2],
    /// Intensity range of distractors.
    pub bright: [f32; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 48,
            width: 48,
            min_size: 8,
            max_size: 14,
            background: 0.06,
            distractor_probability: 0.5,
            dim: [0.35, 0.6],
            bright: [0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape2 {
    Rect { w: usize, h: usize },
    Disk { d: usize },
}

struct Object {
    class: usize,
    y: usize,
    x: usize,
    shape: Shape2,
    intensity: f32,
}

impl Object {
    fn extent(&self) -> (usize, usize) {
        match self.shape {
            Shape2::Rect { w, h } => (h, w),
            Shape2::Disk { d } => (d, d),
        }
    }

    fn covers(&self, row: usize, col: usize) -> bool {
        let (h, w) = self.extent();
        if row < self.y || col < self.x || row >= self.y + h || col >= self.x + w {
            return false;
        }
        match self.shape {
            Shape2::Rect { .. } => true,
            Shape2::Disk { d } => {
                let r = d as f32 / 2.0;
                let dy = row as f32 + 0.5 - (self.y as f32 + r);
                let dx = col as f32 + 0.5 - (self.x as f32 + r);
                dy * dy + dx * dx <= r * r
            }
        }
    }

    /// Box with a `gap`-pixel halo, for overlap tests.
    fn halo(&self, gap: usize) -> (usize, usize, usize, usize) {
        let (h, w) = self.extent();
        (
            self.y.saturating_sub(gap),
            self.x.saturating_sub(gap),
            self.y + h + gap,
            self.x + w + gap,
        )
    }
}

fn overlaps(a: &Object, b: &Object, gap: usize) -> bool {
    let (ay0, ax0, ay1, ax1) = a.halo(gap);
    let (by0, bx0, by1, bx1) = b.halo(0);
    ay0 < by1 && by0 < ay1 && ax0 < bx1 && bx0 < ax1
}

fn place(spec: &SyntheticSpec, class: usize, intensity: f32, rng: &mut ChaCha8Rng) -> Object {
    let size = |rng: &mut ChaCha8Rng| rng.random_range(spec.min_size..=spec.max_size);
    let shape = if rng.random_bool(0.5) {
        Shape2::Rect {
            w: size(rng),
            h: size(rng),
        }
    } else {
        Shape2::Disk { d: size(rng) }
    };
    let (h, w) = match shape {
        Shape2::Rect { w, h } => (h, w),
        Shape2::Disk { d } => (d, d),
    };
    Object {
        class,
        y: rng.random_range(0..=spec.height - h),
        x: rng.random_range(0..=spec.width - w),
        shape,
        intensity,
    }
}

fn uniform(range: [f32; 2], rng: &mut ChaCha8Rng) -> f32 {
    range[0] + (range[1] - range[0]) * rng.random::<f32>()
}

/// `n` images, bitwise reproducible for a given `seed`.
pub fn generate(spec: &SyntheticSpec, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let class = rng.random_range(0..NUM_CLASSES);
        let with_distractor = rng.random_bool(spec.distractor_probability);
        let main_range = if with_distractor {
            spec.dim
        } else {
            [spec.dim[0], spec.bright[1]]
        };
        let main = place(spec, class, uniform(main_range, &mut rng), &mut rng);
        let mut objects = vec![main];
        if with_distractor {
            let other = (class + rng.random_range(1..NUM_CLASSES)) % NUM_CLASSES;
            let v = uniform(spec.bright, &mut rng);
            for _ in 0..100 {
                let d = place(spec, other, v, &mut rng);
                if !overlaps(&objects[0], &d, 3) {
                    objects.push(d);
                    break;
                }
            }
        }

        let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
        let plane = h * w;
        let data = image.data_mut();
        for p in 0..plane {
            let g = spec.background * (0.5 + 0.5 * rng.random::<f32>());
            for c in 0..3 {
                data[c * plane + p] = g;
            }
        }
        let mut regions = Vec::with_capacity(objects.len());
        for o in &objects {
            let mut b: Option<BBox> = None;
            for row in 0..h {
                for col in 0..w {
                    if !o.covers(row, col) {
                        continue;
                    }
                    for c in 0..3 {
                        data[c * plane + row * w + col] = if c == o.class { o.intensity } else { 0.0 };
                    }
                    b = Some(match b {
                        None => BBox::new(col, row, col, row),
                        Some(b) => BBox::new(b.x0.min(col), b.y0.min(row), b.x1.max(col), b.y1.max(row)),
                    });
                }
            }
            regions.push(Region {
                class: o.class,
                bbox: b.expect("objects are at least one pixel"),
            });
        }
        let mut labels: Vec<usize> = objects.iter().map(|o| o.class).collect();
        labels.sort_unstable();
        labels.dedup();
        samples.push(Sample {
            id: format!("img_{i:04}"),
            image,
            labels,
            regions,
        });
    }
    Dataset { samples }
}

/// Weight on a class's own colour filter in its score.
const OWN: f32 = 0.2;
/// Weight on every colour filter in every score.
const ALL: f32 = -0.1;
/// Weight on the brightness filter in every score.
const SHARED: f32 = 1.0;
/// The brightness filter ignores anything dimmer than this (summed over channels).
const SHARED_CUTOFF: f32 = 0.2;
/// Overall score scale, so that softmax probabilities are decisive.
const GAIN: f32 = 400.0;

/// The detector for images of `spec`'s size:
/// `conv 3x3 (3 -> 4) -> relu -> global average pool -> linear (4 -> 3)`.
pub fn detector_model(spec: &SyntheticSpec) -> ModelGraph {
    let taps = 9.0;
    let mut conv = Vec::with_capacity(4 * 3 * 9);
    for out in 0..4 {
        for ch in 0..3 {
            let v = if out == 3 || out == ch { 1.0 } else { -1.0 };
            conv.extend(core::iter::repeat_n(v / taps, 9));
        }
    }
    let mut fc = Vec::with_capacity(NUM_CLASSES * 4);
    for c in 0..NUM_CLASSES {
        for k in 0..3 {
            fc.push(GAIN * (ALL + if k == c { OWN } else { 0.0 }));
        }
        fc.push(GAIN * SHARED);
    }
    GraphBuilder::new("synthetic-detector", Shape::new(1, 3, spec.height, spec.width), NUM_CLASSES)
        .family(Family::Other)
        .layer(LayerKind::Conv2d {
            geometry: ConvGeometry::new(3, 4, 3, 1, 1),
            weight: Tensor::from_vec(Shape::new(4, 3, 3, 3), conv).expect("4x3x3x3 weights"),
            bias: vec![0.0, 0.0, 0.0, -SHARED_CUTOFF],
        })
        .layer(LayerKind::Relu)
        .layer(LayerKind::GlobalAvgPool)
        .layer(LayerKind::Linear {
            weight: Tensor::from_vec(Shape::new(NUM_CLASSES, 4, 1, 1), fc).expect("3x4 weights"),
            bias: vec![0.0; NUM_CLASSES],
            is_final: true,
        })
        .build()
        .expect("detector graph is valid by construction")
}
