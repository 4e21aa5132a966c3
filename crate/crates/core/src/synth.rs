//! Procedural LiDAR-like scenes: a ground plane, building walls and vegetation
//! blobs as stuff, and compact non-overlapping objects as things.

use alloc::string::ToString;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{LabelTaxonomy, LabeledPointCloud};
use crate::error::{Error, Result};
use crate::math;

/// Placement attempts per object before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 200;
/// Every thing keeps at least this many points after dropout.
pub const MIN_THING_POINTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThingShape {
    /// Car-like box; `length × width × height`.
    Box,
    /// Person-like upright cylinder of diameter `width`.
    Cylinder,
    /// Thin pole of diameter `width`.
    Pole,
}

/// Size and count distribution of one thing class. Ranges are inclusive
/// `[min, max]` and sampled uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThingRecipe {
    pub shape: ThingShape,
    pub count: [u32; 2],
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    pub points: [u32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub seed: u64,
    /// Scene half-extent in x and y (meters).
    pub range_xy: f64,
    /// One entry per thing class, in taxonomy order.
    pub things: Vec<ThingRecipe>,
    /// Stuff surface density in points per square meter.
    pub stuff_density: f64,
    /// Number of wall segments (second stuff class, if present).
    pub walls: [u32; 2],
    /// Number of vegetation blobs (third and later stuff classes, if present).
    pub vegetation: [u32; 2],
    /// Fraction of sampled points dropped, in `[0, 1)`.
    pub dropout: f64,
    /// Standard deviation of the Gaussian coordinate jitter (meters).
    pub noise_sigma: f64,
    /// Minimum free space between object footprints (meters).
    pub min_gap: f64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            seed: 0,
            range_xy: 12.0,
            things: alloc::vec![
                ThingRecipe {
                    shape: ThingShape::Box,
                    count: [2, 4],
                    length: [3.6, 4.6],
                    width: [1.6, 2.0],
                    height: [1.4, 1.8],
                    points: [250, 450],
                },
                ThingRecipe {
                    shape: ThingShape::Cylinder,
                    count: [2, 4],
                    length: [0.5, 0.7],
                    width: [0.5, 0.7],
                    height: [1.6, 1.9],
                    points: [80, 140],
                },
                ThingRecipe {
                    shape: ThingShape::Pole,
                    count: [1, 3],
                    length: [0.2, 0.3],
                    width: [0.2, 0.3],
                    height: [2.8, 3.4],
                    points: [40, 70],
                },
            ],
            stuff_density: 10.0,
            walls: [1, 2],
            vegetation: [1, 3],
            dropout: 0.05,
            noise_sigma: 0.02,
            min_gap: 1.0,
        }
    }
}

impl SceneRecipe {
    pub fn validate(&self, taxonomy: &LabelTaxonomy) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.range_xy > 0.0) {
            return fail("range_xy must be positive");
        }
        if !(self.stuff_density > 0.0) {
            return fail("stuff_density must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0) || !(self.min_gap >= 0.0) {
            return fail("noise_sigma and min_gap must be non-negative");
        }
        if self.things.len() != taxonomy.n_things() {
            return fail("recipe needs one thing entry per thing class");
        }
        for t in &self.things {
            let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
            if t.count[0] > t.count[1] || t.points[0] > t.points[1] {
                return fail("count and points ranges must be ordered");
            }
            if (t.points[0] as usize) < MIN_THING_POINTS {
                return fail("points per thing must be at least 10");
            }
            if !ordered(t.length) || !ordered(t.width) || !ordered(t.height) {
                return fail("thing sizes must be positive ordered ranges");
            }
        }
        if self.walls[0] > self.walls[1] || self.vegetation[0] > self.vegetation[1] {
            return fail("stuff count ranges must be ordered");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Footprint {
    min: [f64; 2],
    max: [f64; 2],
}

impl Footprint {
    fn overlaps(&self, other: &Footprint, gap: f64) -> bool {
        self.min[0] < other.max[0] + gap
            && other.min[0] < self.max[0] + gap
            && self.min[1] < other.max[1] + gap
            && other.min[1] < self.max[1] + gap
    }
}

/// AABB of a rectangle of `length × width` centered at `c`, rotated by `yaw`.
fn rotated_footprint(c: [f64; 2], length: f64, width: f64, yaw: f64) -> Footprint {
    let (s, co) = (math::sin(yaw).abs(), math::cos(yaw).abs());
    let hx = 0.5 * (length * co + width * s);
    let hy = 0.5 * (length * s + width * co);
    Footprint {
        min: [c[0] - hx, c[1] - hy],
        max: [c[0] + hx, c[1] + hy],
    }
}

struct Placer<'a> {
    taken: Vec<Footprint>,
    range: f64,
    gap: f64,
    taxonomy: &'a LabelTaxonomy,
}

impl Placer<'_> {
    /// Finds a free center for a `length × width` footprint with random yaw.
    fn place(
        &mut self,
        rng: &mut ChaCha8Rng,
        class: u16,
        length: f64,
        width: f64,
    ) -> Result<([f64; 2], f64)> {
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let yaw = rng.random_range(0.0..PI);
            let probe = rotated_footprint([0.0, 0.0], length, width, yaw);
            let (hx, hy) = (probe.max[0], probe.max[1]);
            if hx >= self.range || hy >= self.range {
                continue;
            }
            let cx = rng.random_range(-self.range + hx..self.range - hx);
            let cy = rng.random_range(-self.range + hy..self.range - hy);
            let fp = rotated_footprint([cx, cy], length, width, yaw);
            if self.taken.iter().all(|t| !t.overlaps(&fp, self.gap)) {
                self.taken.push(fp);
                return Ok(([cx, cy], yaw));
            }
        }
        Err(Error::Capacity {
            class: self.taxonomy.class_name(class).unwrap_or("?").to_string(),
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn sample_count(rng: &mut ChaCha8Rng, r: [u32; 2]) -> u32 {
    rng.random_range(r[0]..=r[1])
}

fn rotate(local: [f64; 3], center: [f64; 2], yaw: f64) -> [f64; 3] {
    let (s, c) = (math::sin(yaw), math::cos(yaw));
    [
        center[0] + c * local[0] - s * local[1],
        center[1] + s * local[0] + c * local[1],
        local[2],
    ]
}

/// Uniform surface sample of a thing in its local frame (base at z = 0).
fn sample_thing_surface(rng: &mut ChaCha8Rng, shape: ThingShape, l: f64, w: f64, h: f64) -> [f64; 3] {
    match shape {
        ThingShape::Box => {
            let faces = [l * w, w * h, w * h, l * h, l * h];
            let total: f64 = faces.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while face < faces.len() - 1 && pick >= faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let u = rng.random_range(-0.5..0.5);
            let v = rng.random_range(0.0..1.0);
            match face {
                0 => [u * l, rng.random_range(-0.5..0.5) * w, h],
                1 => [0.5 * l, u * w, v * h],
                2 => [-0.5 * l, u * w, v * h],
                3 => [u * l, 0.5 * w, v * h],
                _ => [u * l, -0.5 * w, v * h],
            }
        }
        ThingShape::Cylinder | ThingShape::Pole => {
            let r = 0.5 * w;
            let side = 2.0 * PI * r * h;
            let top = if shape == ThingShape::Cylinder { PI * r * r } else { 0.0 };
            let a = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..side + top) < side {
                [r * math::cos(a), r * math::sin(a), rng.random_range(0.0..h)]
            } else {
                let rr = r * math::sqrt(rng.random_range(0.0..1.0));
                [rr * math::cos(a), rr * math::sin(a), h]
            }
        }
    }
}

fn class_intensity(taxonomy: &LabelTaxonomy, class: u16) -> f64 {
    const THING: [f64; 4] = [0.7, 0.35, 0.85, 0.55];
    const STUFF: [f64; 4] = [0.15, 0.45, 0.25, 0.6];
    let c = class as usize;
    if c < taxonomy.n_things() {
        THING[c % THING.len()]
    } else {
        STUFF[(c - taxonomy.n_things()) % STUFF.len()]
    }
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    intensity_noise: Normal<f64>,
    dropout: f64,
    taxonomy: &'a LabelTaxonomy,
    cloud: LabeledPointCloud,
}

impl Builder<'_> {
    /// Jitters and drops a sampled point; returns whether it survived.
    fn emit(&mut self, p: [f64; 3], class: u16, instance: u32) -> bool {
        if self.dropout > 0.0 && self.rng.random_range(0.0..1.0) < self.dropout {
            return false;
        }
        let mut q = [0f32; 3];
        for (dst, src) in q.iter_mut().zip(p) {
            *dst = (src + self.noise.sample(&mut self.rng)) as f32;
        }
        let it = class_intensity(self.taxonomy, class) + self.intensity_noise.sample(&mut self.rng);
        self.cloud.positions.push(q);
        self.cloud.intensity.push(it.clamp(0.0, 1.0) as f32);
        self.cloud.semantic.push(class);
        self.cloud.instance.push(instance);
        true
    }
}

/// Generates one scene. The output is a pure function of `(recipe, taxonomy)`.
pub fn synthesize_scene(recipe: &SceneRecipe, taxonomy: &LabelTaxonomy) -> Result<LabeledPointCloud> {
    recipe.validate(taxonomy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let range = recipe.range_xy;
    let mut placer = Placer {
        taken: Vec::new(),
        range,
        gap: recipe.min_gap,
        taxonomy,
    };

    // Layout first so every footprint is fixed before any point is drawn.
    let mut walls = Vec::new();
    if taxonomy.n_stuff() >= 2 {
        for _ in 0..sample_count(&mut rng, recipe.walls) {
            let len = rng.random_range(6.0..10.0f64).min(1.6 * range);
            let height = rng.random_range(2.6..3.4);
            let (c, yaw) = placer.place(&mut rng, taxonomy.stuff_class_id(1), len, 0.3)?;
            walls.push((c, yaw, len, height));
        }
    }
    let mut bushes: Vec<([f64; 2], f64, f64, u16)> = Vec::new();
    if taxonomy.n_stuff() >= 3 {
        for _ in 0..sample_count(&mut rng, recipe.vegetation) {
            let class_off = 2 + rng.random_range(0..taxonomy.n_stuff() - 2);
            let radius = rng.random_range(0.8..1.5);
            let half_height = rng.random_range(0.6..1.1);
            let class = taxonomy.stuff_class_id(class_off);
            let (c, _) = placer.place(&mut rng, class, 2.0 * radius, 2.0 * radius)?;
            bushes.push((c, radius, half_height, class));
        }
    }
    let mut objects = Vec::new();
    for (class, t) in recipe.things.iter().enumerate() {
        for _ in 0..sample_count(&mut rng, t.count) {
            let l = sample_range(&mut rng, t.length);
            let w = sample_range(&mut rng, t.width);
            let h = sample_range(&mut rng, t.height);
            let (c, yaw) = placer.place(&mut rng, class as u16, l, w)?;
            let n = rng.random_range(t.points[0]..=t.points[1]);
            objects.push((class as u16, t.shape, c, yaw, [l, w, h], n));
        }
    }

    let noise = Normal::new(0.0, recipe.noise_sigma.max(0.0)).expect("sigma is finite");
    let mut b = Builder {
        rng,
        noise,
        intensity_noise: Normal::new(0.0, 0.05).expect("static sigma"),
        dropout: recipe.dropout,
        taxonomy,
        cloud: LabeledPointCloud {
            n_thing_classes: taxonomy.n_things() as u16,
            n_stuff_classes: taxonomy.n_stuff() as u16,
            ..Default::default()
        },
    };

    let ground = taxonomy.stuff_class_id(0);
    let n_ground = (recipe.stuff_density * 4.0 * range * range) as usize;
    for _ in 0..n_ground {
        let x = b.rng.random_range(-range..range);
        let y = b.rng.random_range(-range..range);
        b.emit([x, y, 0.0], ground, 0);
    }
    for &(c, yaw, len, height) in &walls {
        let n = (recipe.stuff_density * len * height) as usize;
        let class = taxonomy.stuff_class_id(1);
        for _ in 0..n {
            let u = b.rng.random_range(-0.5..0.5) * len;
            let z = b.rng.random_range(0.0..height);
            b.emit(rotate([u, 0.0, z], c, yaw), class, 0);
        }
    }
    for &(c, radius, half_height, class) in &bushes {
        let area = 4.0 * PI * radius * half_height.max(radius);
        let n = (recipe.stuff_density * area) as usize;
        for _ in 0..n {
            let z = b.rng.random_range(-1.0..1.0f64);
            let a = b.rng.random_range(0.0..2.0 * PI);
            let r = math::sqrt(1.0 - z * z);
            let p = [
                c[0] + radius * r * math::cos(a),
                c[1] + radius * r * math::sin(a),
                half_height * (1.0 + z),
            ];
            b.emit(p, class, 0);
        }
    }
    for (k, &(class, shape, c, yaw, [l, w, h], n)) in objects.iter().enumerate() {
        let instance = k as u32 + 1;
        let mut kept = 0;
        let mut drawn = 0usize;
        let budget = (n as usize).max(MIN_THING_POINTS) * 1000;
        while (drawn < n as usize || kept < MIN_THING_POINTS) && drawn < budget {
            let local = sample_thing_surface(&mut b.rng, shape, l, w, h);
            if b.emit(rotate(local, c, yaw), class, instance) {
                kept += 1;
            }
            drawn += 1;
        }
        if kept < MIN_THING_POINTS {
            return Err(Error::Capacity {
                class: taxonomy.class_name(class).unwrap_or("?").to_string(),
                attempts: drawn,
            });
        }
    }
    b.cloud.validate()?;
    Ok(b.cloud)
}

/// Axis-aligned BEV bounding box `[xmin, ymin, xmax, ymax]` of each instance.
pub fn instance_bev_boxes(cloud: &LabeledPointCloud) -> Vec<(u32, [f64; 4])> {
    let mut out: Vec<(u32, [f64; 4])> = Vec::new();
    for (p, &inst) in cloud.positions.iter().zip(&cloud.instance) {
        if inst == 0 {
            continue;
        }
        let (x, y) = (p[0] as f64, p[1] as f64);
        match out.iter_mut().find(|(i, _)| *i == inst) {
            Some((_, b)) => {
                b[0] = b[0].min(x);
                b[1] = b[1].min(y);
                b[2] = b[2].max(x);
                b[3] = b[3].max(y);
            }
            None => out.push((inst, [x, y, x, y])),
        }
    }
    out.sort_by_key(|(i, _)| *i);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_cloud() {
        let t = LabelTaxonomy::synthetic();
        let r = SceneRecipe {
            seed: 11,
            ..Default::default()
        };
        let a = synthesize_scene(&r, &t).unwrap();
        let b = synthesize_scene(&r, &t).unwrap();
        assert_eq!(a, b);
        let c = synthesize_scene(&SceneRecipe { seed: 12, ..r }, &t).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_things_means_only_stuff() {
        let t = LabelTaxonomy::synthetic();
        let mut r = SceneRecipe::default();
        for th in &mut r.things {
            th.count = [0, 0];
        }
        let c = synthesize_scene(&r, &t).unwrap();
        assert!(c.instance.iter().all(|&i| i == 0));
        assert!(c.semantic.iter().all(|&s| t.is_stuff(s)));
    }

    #[test]
    fn crowded_scene_reports_capacity() {
        let t = LabelTaxonomy::synthetic();
        let mut r = SceneRecipe {
            range_xy: 5.0,
            walls: [0, 0],
            vegetation: [0, 0],
            ..Default::default()
        };
        r.things[0].count = [500, 500];
        r.things[0].length = [4.0, 4.0];
        match synthesize_scene(&r, &t) {
            Err(Error::Capacity { class, .. }) => assert_eq!(class, "car"),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn instances_are_dense_and_populated() {
        let t = LabelTaxonomy::synthetic();
        let c = synthesize_scene(&SceneRecipe::default(), &t).unwrap();
        let inst = c.instances();
        for (k, (id, _)) in inst.iter().enumerate() {
            assert_eq!(*id as usize, k + 1);
            let n = c.instance.iter().filter(|&&i| i == *id).count();
            assert!(n >= MIN_THING_POINTS);
        }
    }
}
