//! Seeded MNIST-COLLAGE generation.
//!
//! Randomness comes from ChaCha8 keyed by the dataset seed. Every bag gets its
//! own stream, `(split << 32) | bag_index`, so bags can be generated in any
//! order or in parallel and still come out identical. The label plan of a
//! split is shuffled on stream `(split << 32) | 0xFFFF_FFFF`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{has_both_key_digits, label_bag, Bag, DatasetConfig, DigitImage, Instance, Point, PATCH_SIDE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Test = 1,
}

const PLAN_STREAM: u64 = 0xFFFF_FFFF;

pub fn split_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 32) | (index & 0xFFFF_FFFF));
    rng
}

fn sample_size<R: Rng + ?Sized>(config: &DatasetConfig, rng: &mut R) -> usize {
    let normal = Normal::new(config.bag_size_mean, config.bag_size_std).expect("validated");
    let n = normal.sample(rng).round();
    if n < config.min_bag_size as f64 {
        config.min_bag_size
    } else {
        n as usize
    }
}

/// Rejection-samples non-overlapping centroids for `n` patches. Each patch
/// gets `placement_attempts` tries; a patch that cannot be placed restarts
/// the whole layout, up to `placement_restarts` times.
fn place<R: Rng + ?Sized>(config: &DatasetConfig, n: usize, rng: &mut R) -> Result<Vec<Point>> {
    let half = PATCH_SIDE as f64 / 2.0;
    let side = PATCH_SIDE as f64;
    let (w, h) = (config.canvas.width as f64, config.canvas.height as f64);
    for _ in 0..=config.placement_restarts {
        let mut placed: Vec<Point> = Vec::with_capacity(n);
        'patch: for _ in 0..n {
            for _ in 0..config.placement_attempts {
                let p = Point::new(rng.random_range(half..=w - half), rng.random_range(half..=h - half));
                if placed.iter().all(|q| (p.x - q.x).abs() >= side || (p.y - q.y).abs() >= side) {
                    placed.push(p);
                    continue 'patch;
                }
            }
            break;
        }
        if placed.len() == n {
            return Ok(placed);
        }
    }
    Err(Error::Generation(format!(
        "could not place {n} non-overlapping 28x28 patches on a {}x{} canvas after {} restarts; use a larger canvas",
        config.canvas.width, config.canvas.height, config.placement_restarts
    )))
}

/// One bag with the requested label.
///
/// A layout that exhausts its restart budget discards the whole draw,
/// including `n`; after `placement_redraws` such failures the bag fails with
/// a generation error.
///
/// Negative bags are either hard (`force_hard_negative`: both key digits are
/// present but no pair satisfies the distance rule) or easy (at most one of
/// the key digits is present). Whole bags are resampled until the
/// constraints hold.
pub fn sample_bag<R: Rng + ?Sized>(
    config: &DatasetConfig,
    pool: &[DigitImage],
    rng: &mut R,
    target_label: u8,
    force_hard_negative: bool,
) -> Result<Bag> {
    for d in 0..10u8 {
        if !pool.iter().any(|img| img.digit == d) {
            return Err(Error::Precondition(format!("digit pool has no instance of {d}")));
        }
    }
    if target_label > 1 {
        return Err(Error::Precondition(format!("bag label must be 0 or 1, got {target_label}")));
    }

    let mut placement_failures = 0;
    for _ in 0..config.label_attempts {
        let n = sample_size(config, rng);
        let digits: Vec<&DigitImage> = (0..n).map(|_| &pool[rng.random_range(0..pool.len())]).collect();
        let probe: Vec<Instance> = digits
            .iter()
            .map(|d| Instance { patch: Vec::new(), centroid: Point::new(0.0, 0.0), digit: d.digit })
            .collect();
        let both = has_both_key_digits(&probe);
        let digits_ok = match (target_label, force_hard_negative) {
            (1, _) | (0, true) => both,
            _ => !both,
        };
        if !digits_ok {
            continue;
        }

        // Large draws of n can jam the canvas; such draws are redrawn whole.
        let centroids = match place(config, n, rng) {
            Ok(c) => c,
            Err(e) => {
                placement_failures += 1;
                if placement_failures >= config.placement_redraws {
                    return Err(e);
                }
                continue;
            }
        };
        let instances: Vec<Instance> = digits
            .iter()
            .zip(centroids)
            .map(|(d, c)| Instance { patch: d.pixels.clone(), centroid: c, digit: d.digit })
            .collect();
        let label = label_bag(&instances, config.threshold, config.inverted);
        if label == target_label {
            return Ok(Bag { instances, label, canvas: config.canvas });
        }
    }
    Err(Error::Generation(format!(
        "no bag with label {target_label} after {} attempts; check threshold and canvas",
        config.label_attempts
    )))
}

/// `count` bags, exactly half positive. Of the negatives,
/// `round(hard_negative_fraction · count/2)` contain both key digits.
pub fn generate_split(config: &DatasetConfig, pool: &[DigitImage], split: Split, count: usize) -> Result<Vec<Bag>> {
    config.validate()?;
    let half = count / 2;
    let hard = (config.hard_negative_fraction * half as f64).round() as usize;
    let mut plan: Vec<(u8, bool)> = std::iter::repeat_n((1, false), half)
        .chain(std::iter::repeat_n((0, true), hard))
        .chain(std::iter::repeat_n((0, false), half - hard))
        .collect();
    plan.shuffle(&mut split_rng(config.seed, split, PLAN_STREAM));

    plan.par_iter()
        .enumerate()
        .map(|(i, &(label, hard))| {
            let mut rng = split_rng(config.seed, split, i as u64);
            sample_bag(config, pool, &mut rng, label, hard)
        })
        .collect()
}

/// Train bags from the MNIST training pool, test bags from the MNIST test
/// pool; a pure function of the config and the pools.
pub fn generate_dataset(
    config: &DatasetConfig,
    train_pool: &[DigitImage],
    test_pool: &[DigitImage],
) -> Result<(Vec<Bag>, Vec<Bag>)> {
    let train = generate_split(config, train_pool, Split::Train, config.train_count)?;
    let test = generate_split(config, test_pool, Split::Test, config.test_count)?;
    Ok((train, test))
}
