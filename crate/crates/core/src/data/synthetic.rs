//! Procedural multi-view building scenes with exact labels and masks.
//!
//! Each building gets four ground views (one façade each) and an overhead
//! roof plan. Damage replaces a level-dependent fraction of the building's
//! pixels with debris, chosen from a fixed per-view priority field so that
//! higher levels damage a superset of the pixels of lower ones.

use std::fs;
use std::path::Path;

use rand::distr::{Bernoulli, Distribution};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{quantize_image, write_mask, write_rgb};
use super::manifest::{
    DatasetManifest, LoadedSample, Provenance, SampleEntry, ViewData, ViewEntry,
};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::models::{DamageState, ViewRole, NUM_DAMAGE_STATES};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Fraction of building pixels replaced by debris, per damage level.
pub const DAMAGE_FRACTIONS: [f64; NUM_DAMAGE_STATES] = [0.0, 0.12, 0.3, 0.5, 0.75];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub image_size: usize,
    /// Roof plan `[x, y, width, height]` in the overhead view.
    pub footprint: [usize; 4],
    pub wall_height: usize,
    pub roof_texture_seed: u64,
    pub damage_level: u8,
    /// Ground views in which façade damage is visible.
    pub damage_views: Vec<ViewRole>,
    pub roof_damage: bool,
    pub clutter_density: f64,
    /// Per-view `[dx, dy]` offsets, in `ViewRole::ALL` order.
    pub camera_jitter: Vec<[i32; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_buildings: usize,
    pub class_mix: [f64; NUM_DAMAGE_STATES],
    pub directional_fraction: f64,
    pub clutter_density: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_buildings: 100,
            class_mix: [0.2; NUM_DAMAGE_STATES],
            directional_fraction: 0.5,
            clutter_density: 0.5,
            image_size: 64,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_buildings < 5 {
            return Err(Error::invalid(format!(
                "need at least 5 buildings, got {}",
                self.n_buildings
            )));
        }
        let total: f64 = self.class_mix.iter().sum();
        if (total - 1.0).abs() > 1e-6 || self.class_mix.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid(format!(
                "class mix {:?} must be nonnegative and sum to 1",
                self.class_mix
            )));
        }
        if !(0.0..=1.0).contains(&self.directional_fraction)
            || !(0.0..=1.0).contains(&self.clutter_density)
        {
            return Err(Error::invalid(
                "directional fraction and clutter density must lie in [0, 1]",
            ));
        }
        if self.image_size < 32 {
            return Err(Error::invalid(
                "synthetic images must be at least 32 pixels wide",
            ));
        }
        Ok(())
    }
}

/// Label per building: class quotas by largest remainder of `n·mix`, in seeded random order.
pub fn draw_labels(n: usize, mix: &[f64; NUM_DAMAGE_STATES], seed: u64) -> Vec<u8> {
    let exact: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..NUM_DAMAGE_STATES).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    let mut labels: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k as u8, c))
        .collect();
    labels.shuffle(&mut rng_for(seed, "labels"));
    labels
}

/// Draws one building's scene parameters.
pub fn draw_scene(config: &GeneratorConfig, index: usize, label: u8) -> SyntheticSceneSpec {
    let mut rng = rng_for(config.seed, &format!("building.{index}"));
    let s = config.image_size;
    let fw = rng.random_range(s * 2 / 5..=s * 2 / 3);
    let fh = rng.random_range(s * 3 / 8..=s * 3 / 5);
    let fx = (s - fw) / 2;
    let fy = (s - fh) / 2;
    let wall_height = rng.random_range(s * 7 / 32..=s * 5 / 16);
    let directional = label > 0
        && Bernoulli::new(config.directional_fraction)
            .unwrap()
            .sample(&mut rng);
    let (damage_views, roof_damage) = if label == 0 {
        (Vec::new(), false)
    } else if directional {
        let grounds = [
            ViewRole::Ground1,
            ViewRole::Ground2,
            ViewRole::Ground3,
            ViewRole::Ground4,
        ];
        (vec![grounds[rng.random_range(0..4)]], false)
    } else {
        (
            ViewRole::ALL
                .iter()
                .copied()
                .filter(|r| r.is_ground())
                .collect(),
            true,
        )
    };
    let j = (s / 16) as i32;
    let camera_jitter = ViewRole::ALL
        .iter()
        .map(|_| [rng.random_range(-j..=j), rng.random_range(-j / 2..=j / 2)])
        .collect();
    SyntheticSceneSpec {
        seed: rng.random(),
        image_size: s,
        footprint: [fx, fy, fw, fh],
        wall_height,
        roof_texture_seed: rng.random(),
        damage_level: label,
        damage_views,
        roof_damage,
        clutter_density: config.clutter_density,
        camera_jitter,
    }
}

/// One rendered view plus the pixels that received debris.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub role: ViewRole,
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
    pub damage: BinaryMask,
    /// Building pixels before occlusion by clutter.
    pub building: BinaryMask,
}

const WALLS: [[f32; 3]; 5] = [
    [0.86, 0.79, 0.64],
    [0.9, 0.89, 0.86],
    [0.74, 0.73, 0.71],
    [0.9, 0.84, 0.6],
    [0.88, 0.7, 0.6],
];
const ROOFS: [[f32; 3]; 4] = [
    [0.56, 0.2, 0.15],
    [0.37, 0.37, 0.4],
    [0.5, 0.33, 0.22],
    [0.27, 0.3, 0.38],
];
const WINDOW: [f32; 3] = [0.3, 0.38, 0.55];
const GRASS: [f32; 3] = [0.33, 0.48, 0.24];
const TREE: [f32; 3] = [0.13, 0.32, 0.12];
const ROAD: [f32; 3] = [0.47, 0.47, 0.46];

struct Canvas {
    size: usize,
    rgb: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            rgb: vec![[0.0; 3]; size * size],
        }
    }

    fn into_tensor(self) -> Tensor<f32> {
        let plane = self.size * self.size;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c];
            }
        }
        quantize_image(&Tensor::new(vec![3, self.size, self.size], data).expect("canvas shape"))
    }
}

fn jittered(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let d: f32 = rng.random_range(-amount..=amount);
    [base[0] + d, base[1] + d, base[2] + d]
}

fn shade(c: [f32; 3], f: f32) -> [f32; 3] {
    [c[0] * f, c[1] * f, c[2] * f]
}

/// Marks the `fraction` of `region`'s pixels with the highest priority.
fn damage_set(region: &BinaryMask, fraction: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    let (h, w) = region.dims();
    let pixels: Vec<usize> = (0..h * w).filter(|&i| region.data()[i]).collect();
    let mut damage = BinaryMask::filled(h, w, false);
    if pixels.is_empty() {
        return damage;
    }
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for &i in &pixels {
        r0 = r0.min(i / w);
        r1 = r1.max(i / w);
        c0 = c0.min(i % w);
        c1 = c1.max(i % w);
    }
    let blobs: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(r0 as f64..=r1 as f64),
                rng.random_range(c0 as f64..=c1 as f64),
                rng.random_range(3.0..8.0),
            )
        })
        .collect();
    let mut ranked: Vec<(f64, usize)> = pixels
        .iter()
        .map(|&i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let field: f64 = blobs
                .iter()
                .map(|&(br, bc, s)| (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            (field + 0.25 * rng.random::<f64>(), i)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let n = (fraction * pixels.len() as f64).round() as usize;
    for &(_, i) in ranked.iter().take(n) {
        damage.set(i / w, i % w, true);
    }
    damage
}

fn debris(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let u: f32 = rng.random();
    if u < 0.45 {
        jittered(rng, [0.08, 0.07, 0.06], 0.03)
    } else {
        jittered(rng, [0.8, 0.66, 0.44], 0.08)
    }
}

/// Circles of foliage; returns the occluded pixels.
fn draw_trees(
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    count: usize,
    rows: (usize, usize),
) -> BinaryMask {
    let s = canvas.size;
    let mut occ = BinaryMask::filled(s, s, false);
    for _ in 0..count {
        let cr = rng.random_range(rows.0 as f64..rows.1 as f64);
        let cc = rng.random_range(0.0..s as f64);
        let rad = rng.random_range(2.5..s as f64 / 10.0);
        let tone = jittered(rng, TREE, 0.04);
        for r in 0..s {
            for c in 0..s {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                if d2 <= rad * rad {
                    let f = 1.0 - 0.25 * (d2 / (rad * rad)) as f32;
                    canvas.rgb[r * s + c] = shade(tone, f + 0.1 * rng.random::<f32>());
                    occ.set(r, c, true);
                }
            }
        }
    }
    occ
}

fn clutter_count(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> usize {
    let expected = 4.0 * spec.clutter_density;
    let base = expected.floor() as usize;
    base + usize::from(rng.random::<f64>() < expected - base as f64)
}

fn finish(
    role: ViewRole,
    mut canvas: Canvas,
    building: BinaryMask,
    damage_fraction: f64,
    paint: impl Fn(usize, usize, &mut ChaCha8Rng) -> [f32; 3],
    spec: &SyntheticSceneSpec,
    rng: &mut ChaCha8Rng,
    tree_rows: (usize, usize),
) -> RenderedView {
    let s = canvas.size;
    let damage_seed: u64 = rng.random();
    let mut tree_rng = rng_for(rng.random(), "trees");
    let mut debris_rng = rng_for(rng.random(), "debris");
    for r in 0..s {
        for c in 0..s {
            if building.get(r, c) {
                canvas.rgb[r * s + c] = paint(r, c, rng);
            }
        }
    }
    let mut drng = rng_for(damage_seed, "damage");
    let damage = damage_set(&building, damage_fraction, &mut drng);
    for i in 0..s * s {
        if damage.data()[i] {
            canvas.rgb[i] = debris(&mut debris_rng);
        }
    }
    let n_trees = clutter_count(spec, &mut tree_rng);
    let occ = draw_trees(&mut canvas, &mut tree_rng, n_trees, tree_rows);
    let mask = BinaryMask::from_fn(s, s, |r, c| building.get(r, c) && !occ.get(r, c));
    let damage = BinaryMask::from_fn(s, s, |r, c| damage.get(r, c) && !occ.get(r, c));
    RenderedView {
        role,
        image: canvas.into_tensor(),
        mask,
        damage,
        building,
    }
}

fn render_ground(spec: &SyntheticSceneSpec, role: ViewRole) -> RenderedView {
    let s = spec.image_size;
    let mut rng = rng_for(spec.seed, &format!("view.{role}"));
    let [dx, dy] = spec.camera_jitter[role.index()];
    let wall = WALLS[(spec.roof_texture_seed % WALLS.len() as u64) as usize];
    let roof = ROOFS[((spec.roof_texture_seed >> 8) % ROOFS.len() as u64) as usize];
    let light = [1.0, 0.92, 0.84, 0.96][role.index()];

    let horizon = ((s * 11 / 16) as i32 + dy).clamp(0, s as i32 - 1) as usize;
    let mut canvas = Canvas::new(s);
    let sky_top = [0.55, 0.7, 0.93];
    for r in 0..s {
        for c in 0..s {
            canvas.rgb[r * s + c] = if r < horizon {
                let t = r as f32 / horizon as f32;
                [sky_top[0] + 0.2 * t, sky_top[1] + 0.12 * t, 0.95]
            } else {
                jittered(&mut rng, GRASS, 0.05)
            };
        }
    }

    let long_side = matches!(role, ViewRole::Ground1 | ViewRole::Ground3);
    let fw = if long_side {
        spec.footprint[2]
    } else {
        spec.footprint[3]
    };
    let x0 = ((s as i32 - fw as i32) / 2 + dx).max(0) as usize;
    let x1 = (x0 + fw).min(s);
    let base = (horizon + s / 32).min(s);
    let wall_top = base.saturating_sub(spec.wall_height);
    let roof_h = (spec.wall_height / 2).max(3);
    let roof_top = wall_top.saturating_sub(roof_h);
    let width = x1 - x0;

    let building = BinaryMask::from_fn(s, s, |r, c| {
        if c < x0 || c >= x1 || r >= base || r < roof_top {
            return false;
        }
        if r >= wall_top {
            return true;
        }
        let t = r - roof_top;
        let inset = if long_side {
            roof_h - t
        } else {
            (roof_h - t) * width / (2 * roof_h)
        };
        c >= x0 + inset && c + inset < x1
    });

    let window = |r: usize, c: usize| {
        let (lr, lc) = (r.wrapping_sub(wall_top), c - x0);
        r >= wall_top + 2
            && r + 3 < base
            && lr % 6 < 3
            && lc % 7 >= 2
            && lc % 7 < 5
            && lc + 2 < width
    };
    let damage_fraction = if spec.damage_views.contains(&role) {
        DAMAGE_FRACTIONS[spec.damage_level as usize]
    } else {
        0.0
    };
    let paint = move |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        if r < wall_top {
            let stripe = if (r + (spec.roof_texture_seed as usize % 3)) % 3 == 0 {
                0.85
            } else {
                1.0
            };
            shade(jittered(rng, roof, 0.03), stripe * light)
        } else if window(r, c) {
            jittered(rng, WINDOW, 0.02)
        } else {
            shade(jittered(rng, wall, 0.02), light)
        }
    };
    finish(
        role,
        canvas,
        building,
        damage_fraction,
        paint,
        spec,
        &mut rng,
        (horizon.saturating_sub(4), s),
    )
}

fn render_overhead(spec: &SyntheticSceneSpec) -> RenderedView {
    let role = ViewRole::Overhead;
    let s = spec.image_size;
    let mut rng = rng_for(spec.seed, "view.overhead");
    let [dx, dy] = spec.camera_jitter[role.index()];
    let roof = ROOFS[((spec.roof_texture_seed >> 8) % ROOFS.len() as u64) as usize];
    let road_rows = if spec.roof_texture_seed & 1 == 0 {
        0..s / 8
    } else {
        s - s / 8..s
    };

    let mut canvas = Canvas::new(s);
    for r in 0..s {
        for c in 0..s {
            canvas.rgb[r * s + c] = if road_rows.contains(&r) {
                jittered(&mut rng, ROAD, 0.03)
            } else {
                jittered(&mut rng, GRASS, 0.06)
            };
        }
    }
    let [fx, fy, fw, fh] = spec.footprint;
    let x0 = (fx as i32 + dx).clamp(0, (s - fw) as i32) as usize;
    let y0 = (fy as i32 + 2 * dy).clamp(0, (s - fh) as i32) as usize;
    let building = BinaryMask::from_fn(s, s, |r, c| {
        r >= y0 && r < y0 + fh && c >= x0 && c < x0 + fw
    });
    let vertical = spec.roof_texture_seed & 2 == 0;
    let ridge = if vertical { x0 + fw / 2 } else { y0 + fh / 2 };
    let damage_fraction = if spec.roof_damage {
        DAMAGE_FRACTIONS[spec.damage_level as usize]
    } else {
        0.0
    };
    let paint = move |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        let (along, across) = if vertical { (r, c) } else { (c, r) };
        let f = if across == ridge {
            0.7
        } else if along % 4 == 0 {
            0.86
        } else {
            1.0
        };
        shade(jittered(rng, roof, 0.03), f)
    };
    finish(
        role,
        canvas,
        building,
        damage_fraction,
        paint,
        spec,
        &mut rng,
        (0, s),
    )
}

/// Renders all five views of one building, in `ViewRole::ALL` order.
pub fn render_building(spec: &SyntheticSceneSpec) -> Vec<RenderedView> {
    ViewRole::ALL
        .iter()
        .map(|&role| match role {
            ViewRole::Overhead => render_overhead(spec),
            g => render_ground(spec, g),
        })
        .collect()
}

pub fn building_id(index: usize) -> String {
    format!("b{index:04}")
}

/// Renders a building straight into memory (identical to what loading its files yields).
pub fn render_sample(spec: &SyntheticSceneSpec, building_id: &str) -> Result<LoadedSample> {
    Ok(LoadedSample {
        building_id: building_id.to_string(),
        label: DamageState::new(spec.damage_level)?,
        views: render_building(spec)
            .into_iter()
            .map(|v| ViewData {
                role: v.role,
                image: v.image,
                mask: v.mask,
            })
            .collect(),
    })
}

/// Writes images, masks and `manifest.json` under `out_dir`. The returned
/// manifest carries no split assignment yet.
pub fn generate_synthetic_dataset(
    config: &GeneratorConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let labels = draw_labels(config.n_buildings, &config.class_mix, config.seed);
    let mut samples = Vec::with_capacity(config.n_buildings);
    for (i, &label) in labels.iter().enumerate() {
        let id = building_id(i);
        let spec = draw_scene(config, i, label);
        let mut views = Vec::with_capacity(5);
        for dir in ["images", "masks"] {
            let d = out_dir.join(dir).join(&id);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for v in render_building(&spec) {
            let image = format!("images/{id}/{}.png", v.role);
            let mask = format!("masks/{id}/{}.png", v.role);
            write_rgb(&out_dir.join(&image), &v.image)?;
            write_mask(&out_dir.join(&mask), &v.mask)?;
            views.push(ViewEntry {
                role: v.role,
                image,
                mask,
            });
        }
        samples.push(SampleEntry {
            building_id: id,
            label,
            views,
            provenance: Provenance::Synthetic(spec),
        });
    }
    let manifest = DatasetManifest::new(samples);
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// In-memory counterpart of [`generate_synthetic_dataset`].
pub fn generate_in_memory(config: &GeneratorConfig) -> Result<Vec<LoadedSample>> {
    config.validate()?;
    draw_labels(config.n_buildings, &config.class_mix, config.seed)
        .iter()
        .enumerate()
        .map(|(i, &label)| render_sample(&draw_scene(config, i, label), &building_id(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_buildings: n,
            seed: 11,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn uniform_mix_is_balanced() {
        let labels = draw_labels(100, &[0.2; 5], 1);
        for k in 0..5u8 {
            let n = labels.iter().filter(|&&l| l == k).count();
            assert!((n as i64 - 20).abs() <= 10);
        }
    }

    #[test]
    fn views_are_valid_images() {
        let c = config(5);
        for (i, label) in draw_labels(5, &c.class_mix, c.seed).into_iter().enumerate() {
            let views = render_building(&draw_scene(&c, i, label));
            assert_eq!(views.len(), 5);
            for v in &views {
                assert_eq!(v.image.shape(), &[3, 64, 64]);
                assert!(v.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
                assert!(
                    v.mask.count() > 200,
                    "{} has {} building pixels",
                    v.role,
                    v.mask.count()
                );
            }
        }
    }

    #[test]
    fn damage_is_nested_across_levels() {
        let c = config(5);
        let base = draw_scene(&c, 3, 1);
        let mut prev: Option<Vec<RenderedView>> = None;
        for level in 1..5u8 {
            let mut spec = base.clone();
            spec.damage_level = level;
            let views = render_building(&spec);
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&views) {
                    assert!(a
                        .damage
                        .data()
                        .iter()
                        .zip(b.damage.data())
                        .all(|(&x, &y)| !x || y));
                    assert!(b.damage.count() >= a.damage.count());
                }
            }
            prev = Some(views);
        }
    }

    #[test]
    fn directional_damage_in_one_ground_view() {
        let c = GeneratorConfig {
            directional_fraction: 1.0,
            ..config(10)
        };
        for i in 0..10 {
            let spec = draw_scene(&c, i, 3);
            assert_eq!(spec.damage_views.len(), 1);
            let views = render_building(&spec);
            let damaged: Vec<ViewRole> = views
                .iter()
                .filter(|v| v.damage.count() > 0)
                .map(|v| v.role)
                .collect();
            assert_eq!(damaged, spec.damage_views);
        }
    }
}
