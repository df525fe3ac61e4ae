//! Dataset ingestion: manifest loading, rasterization, filtering, and
//! summary statistics.
//!
//! The pipeline is load -> filter -> assemble. Loading materializes
//! images and per-annotation masks, filtering drops tiny annotations and
//! then under-represented classes (in that order), and assembly merges
//! same-class annotations of one image into a single sample whose mask is
//! their union. Samples, not raw annotations, are what episodes draw.

pub mod manifest;
pub mod raster;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::BitMask;
use crate::{cf, Scalar};

pub use manifest::Manifest;

pub type ClassId = u32;
pub type SampleId = usize;

/// Fully decoded RGB image, 8-bit interleaved rows.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl LoadedImage {
    pub fn new(id: u64, file: String, width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image {id}: buffer length {} does not match {width}x{height} RGB",
                rgb.len()
            )));
        }
        Ok(LoadedImage { id, file, width, height, rgb })
    }

    /// Planar (3, h, w) tensor with channel values in [0, 1].
    pub fn tensor<F: Scalar>(&self) -> Array3<F> {
        let (w, h) = (self.width, self.height);
        let mut out = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * 3;
                for c in 0..3 {
                    out[[c, y, x]] = cf::<F>(self.rgb[base + c] as f64 / 255.0);
                }
            }
        }
        out
    }
}

/// One rasterized annotation record.
#[derive(Debug, Clone)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_index: usize,
    pub class: ClassId,
    pub mask: BitMask,
    pub area_fraction: f64,
}

/// Annotation-level dataset, the unit that loading and filtering operate on.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub images: Vec<LoadedImage>,
    pub categories: BTreeMap<ClassId, String>,
    pub annotations: Vec<AnnotationRecord>,
}

/// Episode-level sample: one image, one class, the union of that class's
/// annotation masks in the image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_index: usize,
    pub class: ClassId,
    pub mask: BitMask,
    pub area_fraction: f64,
}

/// Assembled dataset indexed for episodic sampling.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<LoadedImage>,
    pub categories: BTreeMap<ClassId, String>,
    pub samples: Vec<Sample>,
    pub by_class: BTreeMap<ClassId, Vec<SampleId>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Annotations strictly below this fraction of image area are dropped.
    pub min_area_fraction: f64,
    /// Classes with fewer distinct annotated images than this are dropped
    /// after the area pass. `None` disables the class filter, which is the
    /// right setting for datasets that ship a fixed test split.
    pub min_images_per_class: Option<usize>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_area_fraction: 0.002,
            min_images_per_class: Some(200),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FilterReport {
    pub annotations_dropped_small: usize,
    pub classes_dropped: Vec<ClassId>,
    pub annotations_dropped_with_classes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    /// Image-annotation pairs.
    pub samples: usize,
    pub classes: usize,
    /// Images that carry at least one annotation.
    pub annotated_images: usize,
    /// Mean over classes of the number of distinct annotated images.
    pub images_per_class: f64,
    /// Mean over annotated images of the number of distinct classes.
    pub classes_per_image: f64,
    pub mean_area_fraction: f64,
}

/// Loads a manifest and decodes every referenced image. Image files are
/// resolved relative to `images_root`. Structurally broken manifests are
/// errors; malformed geometry is rejected per record with a warning so
/// one bad polygon cannot sink a dataset.
pub fn load_annotations(manifest_path: &Path, images_root: &Path) -> Result<RawDataset> {
    let manifest = Manifest::from_path(manifest_path)?;
    from_manifest(&manifest, images_root)
}

/// Same as [`load_annotations`] but for an already parsed manifest.
pub fn from_manifest(manifest: &Manifest, images_root: &Path) -> Result<RawDataset> {
    manifest.validate()?;
    let mut images = Vec::with_capacity(manifest.images.len());
    let mut index_of: BTreeMap<u64, usize> = BTreeMap::new();
    for im in &manifest.images {
        let path = images_root.join(&im.file);
        let (w, h, rgb) = load_rgb_png(&path)?;
        if w != im.width as usize || h != im.height as usize {
            return Err(Error::Manifest(format!(
                "image {}: file is {w}x{h} but manifest declares {}x{}",
                im.id, im.width, im.height
            )));
        }
        index_of.insert(im.id, images.len());
        images.push(LoadedImage::new(im.id, im.file.clone(), w, h, rgb)?);
    }
    let categories: BTreeMap<ClassId, String> = manifest
        .categories
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect();

    let mut annotations = Vec::with_capacity(manifest.annotations.len());
    let mut rejected = 0usize;
    for ann in &manifest.annotations {
        let image_index = index_of[&ann.image_id];
        let (w, h) = (images[image_index].width, images[image_index].height);
        let raster = match (&ann.segmentation, &ann.bbox) {
            (Some(rings), _) => raster::rasterize_polygons(rings, w, h),
            (None, Some(bbox)) => raster::rasterize_bbox(*bbox, w, h),
            (None, None) => Err(Error::InvalidArgument("no geometry".into())),
        };
        match raster {
            Ok(mask) if !mask.is_empty() => {
                let area_fraction = mask.area_fraction();
                annotations.push(AnnotationRecord {
                    id: ann.id,
                    image_index,
                    class: ann.category_id,
                    mask,
                    area_fraction,
                });
            }
            Ok(_) => {
                log::warn!("annotation {}: empty raster, dropped", ann.id);
                rejected += 1;
            }
            Err(e) => {
                log::warn!("annotation {}: {e}, rejected", ann.id);
                rejected += 1;
            }
        }
    }
    if rejected > 0 {
        log::info!("rejected {rejected} malformed or empty annotations");
    }
    Ok(RawDataset { images, categories, annotations })
}

/// Applies the area filter first and the class-size filter second, so a
/// class is judged on the images that still carry a usable annotation.
/// The boundary is inclusive on both: an annotation at exactly the area
/// threshold stays, a class with exactly the image minimum stays.
pub fn filter_dataset(raw: RawDataset, cfg: &FilterConfig) -> (RawDataset, FilterReport) {
    let mut report = FilterReport::default();
    let before = raw.annotations.len();
    let mut annotations: Vec<AnnotationRecord> = raw
        .annotations
        .into_iter()
        .filter(|a| a.area_fraction >= cfg.min_area_fraction)
        .collect();
    report.annotations_dropped_small = before - annotations.len();

    if let Some(min_images) = cfg.min_images_per_class {
        let mut images_of: BTreeMap<ClassId, BTreeSet<usize>> = BTreeMap::new();
        for a in &annotations {
            images_of.entry(a.class).or_default().insert(a.image_index);
        }
        let dropped: BTreeSet<ClassId> = images_of
            .iter()
            .filter(|(_, imgs)| imgs.len() < min_images)
            .map(|(&c, _)| c)
            .collect();
        let before = annotations.len();
        annotations.retain(|a| !dropped.contains(&a.class));
        report.annotations_dropped_with_classes = before - annotations.len();
        report.classes_dropped = dropped.iter().copied().collect();
    }

    let kept_classes: BTreeSet<ClassId> = annotations.iter().map(|a| a.class).collect();
    let categories = raw
        .categories
        .into_iter()
        .filter(|(id, _)| kept_classes.contains(id))
        .collect();
    (
        RawDataset { images: raw.images, categories, annotations },
        report,
    )
}

impl Dataset {
    /// Merges same-class annotations per image into union-mask samples.
    pub fn assemble(raw: RawDataset) -> Result<Dataset> {
        if raw.annotations.is_empty() {
            return Err(Error::InvalidArgument("dataset has no annotations".into()));
        }
        let mut merged: BTreeMap<(usize, ClassId), BitMask> = BTreeMap::new();
        for a in &raw.annotations {
            match merged.entry((a.image_index, a.class)) {
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(a.mask.clone());
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    o.get_mut().union_with(&a.mask)?;
                }
            }
        }
        let mut samples = Vec::with_capacity(merged.len());
        let mut by_class: BTreeMap<ClassId, Vec<SampleId>> = BTreeMap::new();
        for ((image_index, class), mask) in merged {
            let area_fraction = mask.area_fraction();
            by_class.entry(class).or_default().push(samples.len());
            samples.push(Sample { image_index, class, mask, area_fraction });
        }
        Ok(Dataset {
            images: raw.images,
            categories: raw.categories,
            samples,
            by_class,
        })
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.by_class.keys().copied().collect()
    }

    pub fn image_tensor<F: Scalar>(&self, image_index: usize) -> Array3<F> {
        self.images[image_index].tensor()
    }

    pub fn sample_mask<F: Scalar>(&self, sample: SampleId) -> Array2<F> {
        self.samples[sample].mask.to_array()
    }

    /// Per-channel mean and standard deviation over the listed images,
    /// computed on [0, 1] values. Population variance; the pixel count is
    /// the whole population, not a draw from one.
    pub fn channel_stats(&self, image_indices: &[usize]) -> Result<crate::encoder::ChannelStats> {
        if image_indices.is_empty() {
            return Err(Error::InvalidArgument(
                "channel stats over an empty image list".into(),
            ));
        }
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut count = 0usize;
        for &idx in image_indices {
            let im = &self.images[idx];
            count += im.width * im.height;
            for px in im.rgb.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        let n = count as f64;
        let mut mean = [0.0f64; 3];
        let mut std = [0.0f64; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n;
            let var = (sum_sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt().max(1e-6);
        }
        Ok(crate::encoder::ChannelStats { mean, std })
    }
}

/// Table-style summary of an annotation-level dataset.
pub fn compute_stats(raw: &RawDataset) -> Result<DatasetStats> {
    if raw.annotations.is_empty() {
        return Err(Error::InvalidArgument("stats over an empty dataset".into()));
    }
    let mut images_of: BTreeMap<ClassId, BTreeSet<usize>> = BTreeMap::new();
    let mut classes_of: BTreeMap<usize, BTreeSet<ClassId>> = BTreeMap::new();
    let mut area_sum = 0.0f64;
    for a in &raw.annotations {
        images_of.entry(a.class).or_default().insert(a.image_index);
        classes_of.entry(a.image_index).or_default().insert(a.class);
        area_sum += a.area_fraction;
    }
    let classes = images_of.len();
    let annotated_images = classes_of.len();
    let images_per_class =
        images_of.values().map(|s| s.len() as f64).sum::<f64>() / classes as f64;
    let classes_per_image =
        classes_of.values().map(|s| s.len() as f64).sum::<f64>() / annotated_images as f64;
    Ok(DatasetStats {
        samples: raw.annotations.len(),
        classes,
        annotated_images,
        images_per_class,
        classes_per_image,
        mean_area_fraction: area_sum / raw.annotations.len() as f64,
    })
}

pub fn load_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw()))
}

pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let buf = image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::Image(format!("{}: bad buffer size", path.display())))?;
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Saves a [0, 1] map as 8-bit grayscale.
pub fn save_gray_png<F: Scalar>(path: &Path, map: &Array2<F>) -> Result<()> {
    let (h, w) = map.dim();
    let mut bytes = Vec::with_capacity(w * h);
    for v in map.iter() {
        let v = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
        bytes.push((v * 255.0).round() as u8);
    }
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Image(format!("{}: bad buffer size", path.display())))?;
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
