//! Region features: an attribute codebook for the visual part plus the
//! spatial grid encoding of each box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scene::{Color, ObjectSpec, Scene, Shape, Size};
use crate::error::{Error, Result};
use crate::model::{encode_spatial, grid_side, BoundingBox, RegionSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub visual_dim: usize,
    pub spatial_dim: usize,
    pub num_regions: usize,
    /// Standard deviation of the norm of the noise added to each visual
    /// vector; codebook entries have unit norm.
    pub noise_sigma: f64,
    pub codebook_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            visual_dim: 2048,
            spatial_dim: 512,
            num_regions: 15,
            noise_sigma: 0.1,
            codebook_seed: 0,
        }
    }
}

/// Weight of the per-triple component relative to the shared attribute
/// components.
const UNIQUE_WEIGHT: f64 = 1.4;

/// One unit-norm visual vector per (shape, color, size) triple plus a
/// reserved background entry.
///
/// Each entry is `normalize(shape + color + size + 1.4 * unique)` built from
/// independent random directions, so attributes stay linearly decodable
/// while triples sharing two attributes have cosine near 0.4.
#[derive(Clone, Debug)]
pub struct Codebook {
    dim: usize,
    entries: Vec<Vec<f64>>,
    background: Vec<f64>,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(v)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn triple_index(shape: Shape, color: Color, size: Size) -> usize {
    (shape.index() * Color::ALL.len() + color.index()) * Size::ALL.len() + size.index()
}

pub const NUM_TRIPLES: usize = 3 * 8 * 2;

impl Codebook {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| random_direction(&mut rng, dim)).collect() };
        let shapes = draw(Shape::ALL.len());
        let colors = draw(Color::ALL.len());
        let sizes = draw(Size::ALL.len());
        let unique = draw(NUM_TRIPLES);
        let background = draw(1).pop().unwrap();
        let mut entries = vec![Vec::new(); NUM_TRIPLES];
        for &s in Shape::ALL {
            for &c in Color::ALL {
                for &z in Size::ALL {
                    let i = triple_index(s, c, z);
                    let v = (0..dim)
                        .map(|d| {
                            shapes[s.index()][d]
                                + colors[c.index()][d]
                                + sizes[z.index()][d]
                                + UNIQUE_WEIGHT * unique[i][d]
                        })
                        .collect();
                    entries[i] = normalize(v);
                }
            }
        }
        Codebook {
            dim,
            entries,
            background,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, shape: Shape, color: Color, size: Size) -> &[f64] {
        &self.entries[triple_index(shape, color, size)]
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }
}

/// Builds the region set of a scene: one region per object, in scene
/// order, then background regions until there are exactly `num_regions`.
/// Deterministic in `(scene, seed, sigma)`.
pub fn featurize_scene(scene: &Scene, codebook: &Codebook, cfg: &FeatureConfig, seed: u64) -> Result<RegionSet> {
    if codebook.dim() != cfg.visual_dim {
        return Err(Error::Config(format!(
            "codebook width {} but visual_dim {}",
            codebook.dim(),
            cfg.visual_dim
        )));
    }
    let side = grid_side(cfg.spatial_dim)
        .ok_or_else(|| Error::Config(format!("spatial_dim {} is not 2 * side^2", cfg.spatial_dim)))?;
    if scene.objects.len() > cfg.num_regions {
        return Err(Error::Data(format!(
            "scene {} has {} objects but only {} regions",
            scene.id,
            scene.objects.len(),
            cfg.num_regions
        )));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma {}", cfg.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene.id);
    let per_dim = cfg.noise_sigma / (cfg.visual_dim as f64).sqrt();
    let noise = Normal::new(0.0, per_dim).expect("finite sigma");
    let dim = cfg.visual_dim + cfg.spatial_dim;
    let mut values = Vec::with_capacity(cfg.num_regions * dim);
    let mut push = |rng: &mut ChaCha8Rng, base: &[f64], bbox: &BoundingBox| -> Result<()> {
        for &b in base {
            let n = if per_dim > 0.0 { noise.sample(rng) } else { 0.0 };
            values.push((b + n) as f32);
        }
        values.extend(encode_spatial(bbox, side)?);
        Ok(())
    };
    for ObjectSpec {
        shape,
        color,
        size,
        bbox,
    } in &scene.objects
    {
        push(&mut rng, codebook.entry(*shape, *color, *size), bbox)?;
    }
    for _ in scene.objects.len()..cfg.num_regions {
        let w = rng.gen_range(0.05..0.5);
        let h = rng.gen_range(0.05..0.5);
        let x0 = rng.gen_range(0.0..1.0 - w);
        let y0 = rng.gen_range(0.0..1.0 - h);
        let bbox = BoundingBox::new(x0, y0, x0 + w, y0 + h)?;
        push(&mut rng, codebook.background(), &bbox)?;
    }
    RegionSet::new(cfg.num_regions, dim, values)
}
