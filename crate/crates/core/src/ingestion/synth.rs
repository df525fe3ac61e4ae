//! Synthetic busy-scene generator.
//!
//! Classes are shape/texture combinations drawn from a shared color
//! palette, so color carries no class signal and recognition has to rely
//! on geometry and pattern. Each scene scatters several objects of
//! distinct classes over a dark textured background; later objects may
//! occlude earlier ones and ground-truth masks cover only visible pixels.
//! Everything is deterministic given the corpus seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingestion::{AnnotationRecord, ClassId, LoadedImage, RawDataset};
use crate::util::{rng_stream, BitMask, StreamDomain};

const SHAPE_NAMES: [&str; 8] = [
    "circle", "square", "diamond", "triangle", "plus", "ring", "cross", "crescent",
];
const TEXTURE_NAMES: [&str; 6] = [
    "solid", "hstripes", "vstripes", "checker", "dots", "dstripes",
];

/// Shared object palette. Both texture colors of every object come from
/// here regardless of class.
const PALETTE: [[u8; 3]; 6] = [
    [235, 80, 70],
    [80, 200, 90],
    [85, 120, 240],
    [245, 210, 70],
    [210, 85, 225],
    [80, 220, 220],
];

/// Placement attempts for one object before the scene is abandoned.
const PLACEMENT_TRIES: usize = 30;
/// Scene attempts (fresh sub-seed each) before generation errors out.
const SCENE_TRIES: u64 = 64;
/// Largest tolerated overlap between a new silhouette and pixels already
/// claimed by earlier objects, as a fraction of the new silhouette.
const MAX_OVERLAP: f64 = 0.3;
/// Smallest visible fraction of a silhouette after occlusion.
const MIN_VISIBLE: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub area_min: f64,
    pub area_max: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas_width: 128,
            canvas_height: 128,
            num_classes: 40,
            objects_min: 5,
            objects_max: 10,
            area_min: 0.02,
            area_max: 0.10,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let max_classes = SHAPE_NAMES.len() * TEXTURE_NAMES.len();
        if self.num_classes == 0 || self.num_classes > max_classes {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={max_classes}, got {}",
                self.num_classes
            )));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(Error::Config("bad objects_min..objects_max range".into()));
        }
        if self.objects_max > self.num_classes {
            return Err(Error::Config(format!(
                "objects_max {} exceeds num_classes {}, scenes need distinct classes",
                self.objects_max, self.num_classes
            )));
        }
        if self.canvas_width < 64 || self.canvas_height < 64 {
            return Err(Error::Config("canvas must be at least 64x64".into()));
        }
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max <= 0.25) {
            return Err(Error::Config("bad area_min..area_max range".into()));
        }
        Ok(())
    }

    pub fn class_name(&self, class: ClassId) -> String {
        let idx = (class - 1) as usize;
        format!(
            "{}-{}",
            SHAPE_NAMES[idx % SHAPE_NAMES.len()],
            TEXTURE_NAMES[idx / SHAPE_NAMES.len()]
        )
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Diamond,
    Triangle,
    Plus,
    Ring,
    Cross,
    Crescent,
}

const SHAPES: [Shape; 8] = [
    Shape::Circle,
    Shape::Square,
    Shape::Diamond,
    Shape::Triangle,
    Shape::Plus,
    Shape::Ring,
    Shape::Cross,
    Shape::Crescent,
];

impl Shape {
    /// Point test in shape-local coordinates, unit box [-1, 1]^2.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Shape::Plus => {
                (u.abs() <= 1.0 / 3.0 && v.abs() <= 1.0)
                    || (v.abs() <= 1.0 / 3.0 && u.abs() <= 1.0)
            }
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.55 * 0.55..=1.0).contains(&r2)
            }
            Shape::Cross => {
                let a = (u + v) * std::f64::consts::FRAC_1_SQRT_2;
                let b = (u - v) * std::f64::consts::FRAC_1_SQRT_2;
                (a.abs() <= 1.0 / 3.0 && b.abs() <= 1.0)
                    || (b.abs() <= 1.0 / 3.0 && a.abs() <= 1.0)
            }
            Shape::Crescent => {
                let dx = u - 0.45;
                u * u + v * v <= 1.0 && dx * dx + v * v >= 0.7 * 0.7
            }
        }
    }

    /// Fraction of the unit box the shape covers, probed numerically.
    fn fill_fraction(self) -> f64 {
        use std::sync::OnceLock;
        static TABLE: OnceLock<[f64; 8]> = OnceLock::new();
        let table = TABLE.get_or_init(|| {
            let mut out = [0.0; 8];
            let n = 256;
            for (i, shape) in SHAPES.iter().enumerate() {
                let mut count = 0usize;
                for y in 0..n {
                    for x in 0..n {
                        let u = -1.0 + 2.0 * (x as f64 + 0.5) / n as f64;
                        let v = -1.0 + 2.0 * (y as f64 + 0.5) / n as f64;
                        if shape.contains(u, v) {
                            count += 1;
                        }
                    }
                }
                out[i] = count as f64 / (n * n) as f64;
            }
            out
        });
        table[self as usize]
    }
}

fn class_shape(class: ClassId) -> Shape {
    SHAPES[(class as usize - 1) % SHAPES.len()]
}

fn class_texture(class: ClassId) -> usize {
    (class as usize - 1) / SHAPES.len()
}

/// Texture pattern in absolute pixel coordinates: true selects the
/// primary color. Periods are fixed in pixels so the pattern scale is a
/// class trait, not an object-size artifact.
fn texture_on(texture: usize, px: usize, py: usize) -> bool {
    match texture {
        0 => true,
        1 => (py / 3) % 2 == 0,
        2 => (px / 3) % 2 == 0,
        3 => ((px / 3) + (py / 3)) % 2 == 0,
        4 => px % 5 < 2 && py % 5 < 2,
        _ => ((px + py) / 3) % 2 == 0,
    }
}

pub struct Scene {
    pub rgb: Vec<u8>,
    /// Visible (occlusion-excluded) mask per object, painter order.
    pub annotations: Vec<(ClassId, BitMask)>,
}

struct Placement {
    class: ClassId,
    cx: f64,
    cy: f64,
    scale: f64,
    silhouette: BitMask,
}

fn silhouette(shape: Shape, cx: f64, cy: f64, scale: f64, theta: f64, w: usize, h: usize) -> BitMask {
    let (sin, cos) = theta.sin_cos();
    let reach = scale * std::f64::consts::SQRT_2 + 1.0;
    let x0 = ((cx - reach).floor().max(0.0)) as usize;
    let y0 = ((cy - reach).floor().max(0.0)) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(w);
    let y1 = ((cy + reach).ceil() as usize).min(h);
    let mut mask = BitMask::new(w, h);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / scale;
            let v = (-dx * sin + dy * cos) / scale;
            if shape.contains(u, v) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

fn render_background(rng: &mut impl Rng, w: usize, h: usize) -> Vec<u8> {
    let base: [f64; 3] = [
        rng.gen_range(25.0..75.0),
        rng.gen_range(25.0..75.0),
        rng.gen_range(25.0..75.0),
    ];
    let cell = 16usize;
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let mut grid = vec![0.0f64; gw * gh];
    for g in grid.iter_mut() {
        *g = rng.gen_range(-18.0..18.0);
    }
    let mut rgb = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let g00 = grid[iy * gw + ix];
            let g01 = grid[iy * gw + ix + 1];
            let g10 = grid[(iy + 1) * gw + ix];
            let g11 = grid[(iy + 1) * gw + ix + 1];
            let coarse = g00 * (1.0 - tx) * (1.0 - ty)
                + g01 * tx * (1.0 - ty)
                + g10 * (1.0 - tx) * ty
                + g11 * tx * ty;
            let fine = rng.gen_range(-6.0..6.0);
            let base_idx = (y * w + x) * 3;
            for c in 0..3 {
                rgb[base_idx + c] = (base[c] + coarse + fine).clamp(0.0, 255.0) as u8;
            }
        }
    }
    rgb
}

/// Generates one scene. Placement retries a bounded number of times per
/// object; when a scene cannot be finished (no room, or occlusion eats an
/// earlier object) the whole scene restarts from a fresh sub-seed.
pub fn generate_scene(
    spec: &SceneSpec,
    classes: &[ClassId],
    seed: u64,
    scene_index: u64,
) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.canvas_width, spec.canvas_height);
    'attempt: for attempt in 0..SCENE_TRIES {
        let mut rng = rng_stream(seed, StreamDomain::Scene, scene_index * SCENE_TRIES + attempt);
        let mut occupied = BitMask::new(w, h);
        let mut placements: Vec<Placement> = Vec::with_capacity(classes.len());
        for &class in classes {
            let shape = class_shape(class);
            let area = rng.gen_range(spec.area_min..=spec.area_max);
            let target_px = area * (w * h) as f64;
            let mut scale = 0.5 * (target_px / shape.fill_fraction()).sqrt();
            let max_scale = 0.3 * w.min(h) as f64;
            if scale > max_scale {
                scale = max_scale;
            }
            let theta = rng.gen_range(-0.26..0.26);
            let margin = scale * std::f64::consts::SQRT_2 + 1.0;
            let mut placed = false;
            for _ in 0..PLACEMENT_TRIES {
                let cx = rng.gen_range(margin..w as f64 - margin);
                let cy = rng.gen_range(margin..h as f64 - margin);
                let sil = silhouette(shape, cx, cy, scale, theta, w, h);
                let inter = sil.intersection_count(&occupied).expect("same dims");
                if (inter as f64) <= MAX_OVERLAP * sil.count_ones() as f64 {
                    occupied.union_with(&sil).expect("same dims");
                    placements.push(Placement { class, cx, cy, scale, silhouette: sil });
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }

        // Visible mask of object k excludes every later silhouette.
        let mut masks: Vec<BitMask> = placements.iter().map(|p| p.silhouette.clone()).collect();
        for k in 0..masks.len() {
            for later in &placements[k + 1..] {
                masks[k].subtract(&later.silhouette).expect("same dims");
            }
            let visible = masks[k].count_ones() as f64;
            if visible < MIN_VISIBLE * placements[k].silhouette.count_ones() as f64 {
                continue 'attempt;
            }
        }

        let mut rgb = render_background(&mut rng, w, h);
        for p in &placements {
            let texture = class_texture(p.class);
            let a = rng.gen_range(0..PALETTE.len());
            let b = (a + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
            let reach = p.scale * std::f64::consts::SQRT_2 + 1.0;
            let x0 = ((p.cx - reach).floor().max(0.0)) as usize;
            let y0 = ((p.cy - reach).floor().max(0.0)) as usize;
            let x1 = ((p.cx + reach).ceil() as usize).min(w);
            let y1 = ((p.cy + reach).ceil() as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    if !p.silhouette.get(x, y) {
                        continue;
                    }
                    let color = if texture_on(texture, x, y) { PALETTE[a] } else { PALETTE[b] };
                    let base = (y * w + x) * 3;
                    rgb[base..base + 3].copy_from_slice(&color);
                }
            }
        }

        let annotations = placements
            .iter()
            .zip(masks)
            .map(|(p, m)| (p.class, m))
            .collect();
        return Ok(Scene { rgb, annotations });
    }
    Err(Error::SceneGeneration(format!(
        "scene {scene_index}: no valid arrangement after {SCENE_TRIES} attempts"
    )))
}

/// Generates a full corpus in memory. Every class appears in at least
/// `scenes_per_class` scenes; per-scene class sets are drawn from the
/// remaining quotas so appearances stay balanced.
pub fn generate_corpus(spec: &SceneSpec, scenes_per_class: usize, seed: u64) -> Result<RawDataset> {
    spec.validate()?;
    if scenes_per_class == 0 {
        return Err(Error::Config("scenes_per_class must be positive".into()));
    }
    let classes: Vec<ClassId> = (1..=spec.num_classes as ClassId).collect();
    let mut pool: Vec<ClassId> = classes
        .iter()
        .flat_map(|&c| std::iter::repeat(c).take(scenes_per_class))
        .collect();
    {
        use rand::seq::SliceRandom;
        pool.shuffle(&mut rng_stream(seed, StreamDomain::Shuffle, 0));
    }

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    let mut scene_idx = 0u64;
    while !pool.is_empty() {
        let mut rng = rng_stream(seed, StreamDomain::Shuffle, 1 + scene_idx);
        let k = rng.gen_range(spec.objects_min..=spec.objects_max);
        let mut chosen: Vec<ClassId> = Vec::with_capacity(k);
        let mut i = 0;
        while i < pool.len() && chosen.len() < k {
            if chosen.contains(&pool[i]) {
                i += 1;
            } else {
                chosen.push(pool.remove(i));
            }
        }
        // Endgame: quotas are exhausted for most classes, pad with others
        // so the scene still holds k distinct classes.
        while chosen.len() < k {
            let c = classes[rng.gen_range(0..classes.len())];
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }

        let scene = generate_scene(spec, &chosen, seed, scene_idx)?;
        let image_index = images.len();
        images.push(LoadedImage::new(
            scene_idx + 1,
            format!("images/scene_{scene_idx:05}.png"),
            spec.canvas_width,
            spec.canvas_height,
            scene.rgb,
        )?);
        for (class, mask) in scene.annotations {
            let area_fraction = mask.area_fraction();
            annotations.push(AnnotationRecord {
                id: ann_id,
                image_index,
                class,
                mask,
                area_fraction,
            });
            ann_id += 1;
        }
        scene_idx += 1;
    }

    let categories = classes
        .iter()
        .map(|&c| (c, spec.class_name(c)))
        .collect();
    Ok(RawDataset { images, categories, annotations })
}

/// Writes a corpus to disk: `manifest.json` plus `images/*.png`. Masks
/// are stored as exact rectangle decompositions, so loading the manifest
/// back reproduces every mask bit for bit.
pub fn write_corpus(raw: &RawDataset, dir: &std::path::Path) -> Result<()> {
    use crate::ingestion::manifest::{Manifest, ManifestAnnotation, ManifestCategory, ManifestImage};
    std::fs::create_dir_all(dir.join("images"))?;
    let mut manifest = Manifest {
        images: Vec::with_capacity(raw.images.len()),
        categories: raw
            .categories
            .iter()
            .map(|(&id, name)| ManifestCategory { id, name: clone_name(name) })
            .collect(),
        annotations: Vec::with_capacity(raw.annotations.len()),
    };
    for im in &raw.images {
        crate::ingestion::save_rgb_png(&dir.join(&im.file), im.width, im.height, &im.rgb)?;
        manifest.images.push(ManifestImage {
            id: im.id,
            file: im.file.clone(),
            height: im.height as u32,
            width: im.width as u32,
        });
    }
    for ann in &raw.annotations {
        manifest.annotations.push(ManifestAnnotation {
            id: ann.id,
            image_id: raw.images[ann.image_index].id,
            category_id: ann.class,
            segmentation: Some(crate::ingestion::raster::mask_to_rect_polygons(&ann.mask)),
            bbox: None,
        });
    }
    manifest.write_to(&dir.join("manifest.json"))
}

fn clone_name(name: &str) -> String {
    name.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            canvas_width: 96,
            canvas_height: 96,
            num_classes: 12,
            objects_min: 4,
            objects_max: 6,
            area_min: 0.02,
            area_max: 0.08,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn spec_validation_rejects_bad_ranges() {
        let mut s = SceneSpec::default();
        s.num_classes = 49;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::default();
        s.objects_max = 50;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::default();
        s.area_min = 0.0;
        assert!(s.validate().is_err());
        assert!(SceneSpec::default().validate().is_ok());
    }

    #[test]
    fn fill_fractions_are_sane() {
        let circle = Shape::Circle.fill_fraction();
        assert!((circle - std::f64::consts::PI / 4.0).abs() < 0.01);
        assert!((Shape::Square.fill_fraction() - 1.0).abs() < 1e-9);
        assert!((Shape::Diamond.fill_fraction() - 0.5).abs() < 0.01);
        for shape in SHAPES {
            let f = shape.fill_fraction();
            assert!(f > 0.2 && f <= 1.0, "{shape:?} fill {f}");
        }
    }

    #[test]
    fn scene_is_deterministic_per_seed() {
        let spec = small_spec();
        let classes = [1, 5, 9, 3];
        let a = generate_scene(&spec, &classes, 7, 3).unwrap();
        let b = generate_scene(&spec, &classes, 7, 3).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.annotations.len(), b.annotations.len());
        for (x, y) in a.annotations.iter().zip(&b.annotations) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
        }
        let c = generate_scene(&spec, &classes, 8, 3).unwrap();
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn scene_masks_are_visible_and_sized() {
        let spec = small_spec();
        let scene = generate_scene(&spec, &[2, 4, 6, 8, 10], 11, 0).unwrap();
        assert_eq!(scene.annotations.len(), 5);
        let canvas = (spec.canvas_width * spec.canvas_height) as f64;
        for (class, mask) in &scene.annotations {
            assert!(*class >= 1);
            let frac = mask.count_ones() as f64 / canvas;
            assert!(frac >= 0.005, "class {class} visible fraction {frac}");
            assert!(frac <= 0.15, "class {class} visible fraction {frac}");
        }
    }

    #[test]
    fn occlusion_masks_are_disjoint() {
        let spec = small_spec();
        let scene = generate_scene(&spec, &[1, 2, 3, 4, 5, 6], 42, 9).unwrap();
        for i in 0..scene.annotations.len() {
            for j in i + 1..scene.annotations.len() {
                let inter = scene.annotations[i]
                    .1
                    .intersection_count(&scene.annotations[j].1)
                    .unwrap();
                assert_eq!(inter, 0, "masks {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn corpus_meets_class_quotas() {
        let spec = small_spec();
        let raw = generate_corpus(&spec, 3, 5).unwrap();
        let mut appearances = std::collections::BTreeMap::new();
        for a in &raw.annotations {
            *appearances.entry(a.class).or_insert(0usize) += 1;
        }
        assert_eq!(appearances.len(), spec.num_classes);
        for (&class, &count) in &appearances {
            assert!(count >= 3, "class {class} appears {count} times");
        }
        for im in &raw.images {
            let classes: Vec<ClassId> = raw
                .annotations
                .iter()
                .filter(|a| raw.images[a.image_index].id == im.id)
                .map(|a| a.class)
                .collect();
            let distinct: std::collections::BTreeSet<_> = classes.iter().collect();
            assert_eq!(distinct.len(), classes.len(), "duplicate class in one scene");
            assert!(classes.len() >= spec.objects_min && classes.len() <= spec.objects_max);
        }
    }

    #[test]
    fn corpus_roundtrips_through_manifest() {
        let spec = small_spec();
        let raw = generate_corpus(&spec, 2, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&raw, dir.path()).unwrap();
        let back =
            crate::ingestion::load_annotations(&dir.path().join("manifest.json"), dir.path())
                .unwrap();
        assert_eq!(back.images.len(), raw.images.len());
        assert_eq!(back.annotations.len(), raw.annotations.len());
        for (orig, loaded) in raw.images.iter().zip(&back.images) {
            assert_eq!(orig.rgb, loaded.rgb, "image {} pixels changed", orig.id);
        }
        for (orig, loaded) in raw.annotations.iter().zip(&back.annotations) {
            assert_eq!(orig.id, loaded.id);
            assert_eq!(orig.class, loaded.class);
            assert_eq!(orig.mask, loaded.mask, "annotation {} mask changed", orig.id);
        }
    }
}
