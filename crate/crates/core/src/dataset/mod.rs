//! MNIST-COLLAGE bags: IDX parsing, bag geometry and labelling, seeded
//! generation and the on-disk bag format.

mod bagfile;
mod collage;
mod idx;

pub use bagfile::{deserialize_bags, read_bags, serialize_bags, write_bags, BagFileHeader, BAG_MAGIC};
pub use collage::{generate_dataset, generate_split, sample_bag, split_rng, Split};
pub use idx::{load_mnist_dir, parse_idx_images, parse_idx_labels, parse_idx_pair, read_maybe_gz};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Side length of a digit patch in pixels.
pub const PATCH_SIDE: usize = 28;
/// Key digits whose pairwise distance decides the bag label.
pub const KEY_DIGITS: (u8, u8) = (0, 1);

#[derive(Clone, Debug, PartialEq)]
pub struct DigitImage {
    /// 28×28 row-major intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub digit: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Canvas {
    pub fn diagonal(self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub patch: Vec<f32>,
    pub centroid: Point,
    /// Ground truth for labelling and analysis only; never a model input.
    pub digit: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub instances: Vec<Instance>,
    pub label: u8,
    pub canvas: Canvas,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn centroids(&self) -> Vec<Point> {
        self.instances.iter().map(|i| i.centroid).collect()
    }

    pub fn distances(&self) -> DistanceMatrix {
        distance_matrix(&self.centroids())
    }

    /// Patches as an `[n, 1, 28, 28]` tensor.
    pub fn patch_tensor(&self) -> Result<Tensor> {
        if self.instances.is_empty() {
            return Err(Error::Precondition("bag has no instances".into()));
        }
        let mut data = Vec::with_capacity(self.len() * PATCH_SIDE * PATCH_SIDE);
        for inst in &self.instances {
            if inst.patch.len() != PATCH_SIDE * PATCH_SIDE {
                return Err(Error::Dimension(format!(
                    "patch has {} pixels, expected {}",
                    inst.patch.len(),
                    PATCH_SIDE * PATCH_SIDE
                )));
            }
            data.extend(inst.patch.iter().map(|&p| p as f64));
        }
        Tensor::new(vec![self.len(), 1, PATCH_SIDE, PATCH_SIDE], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub canvas: Canvas,
    pub bag_size_mean: f64,
    pub bag_size_std: f64,
    pub min_bag_size: usize,
    /// Key-pair distance threshold τ in pixels.
    pub threshold: f64,
    pub inverted: bool,
    pub train_count: usize,
    pub test_count: usize,
    /// Fraction of negative bags that contain both key digits.
    pub hard_negative_fraction: f64,
    pub seed: u64,
    pub placement_attempts: usize,
    pub placement_restarts: usize,
    /// Whole-bag redraws allowed after failed layouts.
    pub placement_redraws: usize,
    /// Cap on whole-bag resampling while searching for the requested label.
    pub label_attempts: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            canvas: Canvas { width: 128, height: 128 },
            bag_size_mean: 10.0,
            bag_size_std: 2.0,
            min_bag_size: 2,
            threshold: 40.0,
            inverted: false,
            train_count: 300,
            test_count: 100,
            hard_negative_fraction: 0.12,
            seed: 0,
            placement_attempts: 1000,
            placement_restarts: 10,
            placement_redraws: 100,
            label_attempts: 100_000,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.threshold > 0.0) {
            return bad(format!("threshold must be > 0, got {}", self.threshold));
        }
        if self.train_count % 2 != 0 || self.test_count % 2 != 0 {
            return bad(format!(
                "bag counts must be even for a 50/50 split, got {}/{}",
                self.train_count, self.test_count
            ));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return bad(format!("hard-negative fraction {} outside [0, 1]", self.hard_negative_fraction));
        }
        if self.min_bag_size < 2 {
            return bad("bags need at least two instances".into());
        }
        let margin = PATCH_SIDE as u32;
        if self.canvas.width < margin || self.canvas.height < margin {
            return bad(format!("canvas {:?} cannot hold a 28x28 patch", self.canvas));
        }
        if !(self.bag_size_std >= 0.0) || !self.bag_size_mean.is_finite() {
            return bad("bag size distribution must be finite with std >= 0".into());
        }
        Ok(())
    }

    /// Short variant tag used in manifests and reports.
    pub fn variant(&self) -> &'static str {
        if self.inverted {
            "inv"
        } else {
            "std"
        }
    }
}

/// Symmetric matrix of pairwise centroid distances in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(Tensor);

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.at2(i, j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    /// Wraps an existing matrix after checking it is square and symmetric
    /// with a zero diagonal.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (n, m) = t.dims2()?;
        if n != m {
            return Err(Error::Dimension(format!("distance matrix must be square, got {n}x{m}")));
        }
        for i in 0..n {
            if t.at2(i, i) != 0.0 {
                return Err(Error::Precondition(format!("non-zero diagonal at {i}")));
            }
            for j in 0..i {
                if t.at2(i, j) != t.at2(j, i) || t.at2(i, j) < 0.0 {
                    return Err(Error::Precondition(format!("asymmetric or negative entry at ({i}, {j})")));
                }
            }
        }
        Ok(Self(t))
    }

    /// Entries divided by `scale`.
    pub fn normalized(&self, scale: f64) -> Tensor {
        self.0.map(|d| d / scale)
    }
}

/// Pairwise Euclidean distances; only the upper triangle is computed and then
/// mirrored, so symmetry is exact. Panics on an empty slice.
pub fn distance_matrix(centroids: &[Point]) -> DistanceMatrix {
    assert!(!centroids.is_empty(), "distance matrix of zero points");
    let n = centroids.len();
    let mut d = vec![0.0; n * n];
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let v = centroids[i].distance(centroids[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    DistanceMatrix(Tensor::from_parts(vec![n, n], d))
}

/// Bag label from ground-truth digits: 1 iff some (0, 1) pair lies within
/// `threshold` (inclusive), or beyond it when `inverted`.
pub fn label_bag(instances: &[Instance], threshold: f64, inverted: bool) -> u8 {
    let (a, b) = KEY_DIGITS;
    for p in instances.iter().filter(|i| i.digit == a) {
        for q in instances.iter().filter(|i| i.digit == b) {
            let d = p.centroid.distance(q.centroid);
            let hit = if inverted { d > threshold } else { d <= threshold };
            if hit {
                return 1;
            }
        }
    }
    0
}

/// Whether both key digits occur in the bag.
pub fn has_both_key_digits(instances: &[Instance]) -> bool {
    let (a, b) = KEY_DIGITS;
    instances.iter().any(|i| i.digit == a) && instances.iter().any(|i| i.digit == b)
}
