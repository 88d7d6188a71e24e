//! Scenes of attributed objects with non-overlapping boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BoundingBox;

macro_rules! attribute {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn parse(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s)
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

attribute!(Shape {
    Cube => "cube",
    Sphere => "sphere",
    Cylinder => "cylinder",
});

attribute!(Color {
    Gray => "gray",
    Red => "red",
    Blue => "blue",
    Green => "green",
    Brown => "brown",
    Purple => "purple",
    Cyan => "cyan",
    Yellow => "yellow",
});

attribute!(Size {
    Small => "small",
    Large => "large",
});

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    /// How many times placement failed and the scene was redrawn from a
    /// perturbed sub-seed.
    #[serde(default)]
    pub regenerations: u32,
    /// Seed of the feature noise stream; defaults to `seed`.
    pub feature_seed: u64,
}

pub const MAX_OBJECTS: usize = 10;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const MAX_IOU: f64 = 0.1;
const MAX_REGENERATIONS: u32 = 64;

/// Side length range of a box for each size.
fn side_range(size: Size) -> (f64, f64) {
    match size {
        Size::Small => (0.09, 0.13),
        Size::Large => (0.17, 0.24),
    }
}

/// Random scene with `1..=max_objects` objects. Deterministic in
/// `(seed, id)`: each id draws from its own ChaCha stream.
pub fn generate_scene(seed: u64, id: u64, max_objects: usize) -> Result<Scene> {
    if !(1..=MAX_OBJECTS).contains(&max_objects) {
        return Err(Error::Config(format!(
            "max_objects {max_objects} outside [1, {MAX_OBJECTS}]"
        )));
    }
    for k in 0..=MAX_REGENERATIONS {
        let sub_seed = seed ^ u64::from(k).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        rng.set_stream(id);
        if let Some(objects) = place_objects(&mut rng, max_objects) {
            return Ok(Scene {
                id,
                seed,
                objects,
                regenerations: k,
                feature_seed: seed,
            });
        }
    }
    Err(Error::Data(format!(
        "scene {id}: no placement after {MAX_REGENERATIONS} regenerations"
    )))
}

fn place_objects(rng: &mut ChaCha8Rng, max_objects: usize) -> Option<Vec<ObjectSpec>> {
    let count = rng.gen_range(1..=max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        let size = Size::ALL[rng.gen_range(0..Size::ALL.len())];
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return None;
            }
            let (lo, hi) = side_range(size);
            let w = rng.gen_range(lo..hi);
            let h = rng.gen_range(lo..hi);
            let x0 = rng.gen_range(0.0..1.0 - w);
            let y0 = rng.gen_range(0.0..1.0 - h);
            let bbox = BoundingBox {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            };
            if objects.iter().all(|o| o.bbox.iou(&bbox) < MAX_IOU) {
                objects.push(ObjectSpec {
                    shape,
                    color,
                    size,
                    bbox,
                });
                break;
            }
        }
    }
    Some(objects)
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Data(format!(
                "scene {} has {} objects",
                self.id,
                self.objects.len()
            )));
        }
        for o in &self.objects {
            o.bbox.validate()?;
        }
        Ok(())
    }
}
