//! Seeded synthetic scenes whose labels need both local texture and
//! large-scale layout.
//!
//! Every image is cut into zones by a random straight line. Each zone has a
//! type, visible only as a faint tint of its background. Objects (discs and
//! rectangles) carry the same striped texture everywhere; an object pixel's
//! class is the type of the zone it lies in. Texture separates objects from
//! background; the zone tint around them decides which object class.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::netpbm::{save_image, save_labels};
use crate::error::{Error, Result};
use crate::metrics::ClassMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Tensor,
    pub labels: ClassMap,
}

const STRIPE_DARK: f64 = 0.2;
const STRIPE_LIGHT: f64 = 0.8;

/// Background tint of a zone type.
fn tint(zone_type: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.58, 0.50, 0.42],
        [0.42, 0.50, 0.58],
        [0.50, 0.58, 0.42],
        [0.58, 0.42, 0.50],
        [0.42, 0.58, 0.50],
        [0.50, 0.42, 0.58],
    ];
    PALETTE[(zone_type - 1) % PALETTE.len()]
}

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

struct Stripes {
    shape: Shape,
    period: f64,
    dir: (f64, f64),
    phase: f64,
}

impl Stripes {
    fn value(&self, y: f64, x: f64) -> f64 {
        let t = (y * self.dir.0 + x * self.dir.1) / self.period + self.phase;
        if t.rem_euclid(1.0) < 0.5 {
            STRIPE_DARK
        } else {
            STRIPE_LIGHT
        }
    }
}

/// Scene `index` of the dataset defined by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<SyntheticScene> {
    let (h, w, k) = (spec.height, spec.width, spec.num_classes);
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("scene size {h}×{w} must be positive")));
    }
    if !(2..=7).contains(&k) {
        return Err(Error::Config(format!("num_classes must lie in [2, 7], got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    let mut types: Vec<usize> = (1..k).collect();
    types.shuffle(&mut rng);
    let (zone_a, zone_b) = (types[0], types[types.len() - 1]);
    let angle = rng.gen_range(0.0..PI);
    let (ny, nx) = (angle.sin(), angle.cos());
    let py = h as f64 * rng.gen_range(0.3..0.7);
    let px = w as f64 * rng.gen_range(0.3..0.7);
    let zone_of = |y: f64, x: f64| if (y - py) * ny + (x - px) * nx < 0.0 { zone_a } else { zone_b };

    let side = h.min(w) as f64;
    let n_objects = rng.gen_range(3..=5);
    let mut objects = Vec::with_capacity(n_objects);
    while objects.len() < n_objects {
        let size = side * rng.gen_range(0.15..0.4);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let aspect: f64 = rng.gen_range(0.6..1.6);
        let theta = rng.gen_range(0.0..PI);
        let period = rng.gen_range(3.0..5.0);
        let phase = rng.gen_range(0.0..1.0);
        let disc = rng.gen_bool(0.5);
        // Objects never straddle the zone boundary.
        if ((cy - py) * ny + (cx - px) * nx).abs() < size * aspect.max(1.0 / aspect) * 0.75 {
            continue;
        }
        let shape = if disc {
            Shape::Disc { cy, cx, r: size / 2.0 }
        } else {
            let (hh, hw) = (size * aspect / 2.0, size / aspect / 2.0);
            Shape::Rect { y0: cy - hh, x0: cx - hw, y1: cy + hh, x1: cx + hw }
        };
        objects.push(Stripes {
            shape,
            period,
            dir: (theta.sin(), theta.cos()),
            phase,
        });
    }

    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    let mut labels = vec![0u8; plane];
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let p = r * w + c;
            let noise: f64 = rng.gen_range(-0.04..0.04);
            let rgb = match objects.iter().find(|o| o.shape.contains(y, x)) {
                Some(o) => {
                    labels[p] = zone_of(y, x) as u8;
                    [o.value(y, x) + noise; 3]
                }
                None => tint(zone_of(y, x)).map(|v| v + noise),
            };
            for (ch, v) in rgb.into_iter().enumerate() {
                data[ch * plane + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(SyntheticScene {
        image: Tensor::new(&[3, h, w], data)?,
        labels: ClassMap::new(h, w, labels)?,
    })
}

/// Dataset layout on disk: `train/` and `test/`, each holding `NNNN.ppm`
/// images and `NNNN.pgm` label maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub scene: SceneSpec,
    pub train: usize,
    pub test: usize,
}

pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";

pub fn gen_data(spec: &DataSpec, out: &Path) -> Result<()> {
    let splits = [(TRAIN_DIR, 0, spec.train), (TEST_DIR, spec.train, spec.test)];
    for (dir, first, count) in splits {
        let dir = out.join(dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..count {
            let scene = generate_scene(&spec.scene, (first + i) as u64)?;
            save_image(&dir.join(format!("{i:04}.ppm")), &scene.image)?;
            save_labels(&dir.join(format!("{i:04}.pgm")), &scene.labels)?;
        }
    }
    Ok(())
}
