//! Dataset ingestion and image I/O.
//!
//! Directory layouts are described by a [`LayoutConfig`]: which subdirectory
//! names hold images and masks, filename globs for each, and the suffix that
//! separates a mask stem from its image stem (ORFD pairs
//! `image_data/X.png` with `gt_image/X_fillcolor.png`). Indexing walks the
//! tree recursively so sequence-per-directory datasets work unchanged.
//!
//! Images are resized (not cropped) to the square model input and normalized
//! per channel; masks are binarized by a luminance threshold and kept at
//! native resolution, which is where the loss and metrics live.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Rgb, RgbImage};
use ndarray::{Array2, Array3, Array4, Axis};
use walkdir::WalkDir;

use crate::config::{LayoutConfig, PreprocessConfig};
use crate::error::{Result, RodError};
use crate::tensor::ops::resize_bilinear;
use crate::tensor::Elem;
use crate::training::SampleSource;

/// Paired image/mask paths for one split, lexicographically ordered by stem.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub samples: Vec<(PathBuf, PathBuf)>,
    pub split: String,
    /// (width, height) of the first indexed image, from its header.
    pub resolution: Option<(u32, u32)>,
}

/// Indexing result: the usable index plus stems that failed to pair.
#[derive(Debug, Clone)]
pub struct IndexOutcome {
    pub index: DatasetIndex,
    pub orphans: Vec<String>,
}

/// Indexes a dataset root. In strict mode any unpaired image or mask fails
/// the call; lenient mode skips them and lists them in the outcome.
pub fn index_dataset(
    root: &Path,
    layout: &LayoutConfig,
    split: &str,
    strict: bool,
) -> Result<IndexOutcome> {
    if !root.is_dir() {
        return Err(RodError::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let image_glob = compile_glob(&layout.image_glob)?;
    let mask_glob = compile_glob(&layout.mask_glob)?;
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| RodError::Data(format!("walking {}: {e}", root.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(parent) = entry.path().parent().and_then(|p| p.file_name()) else {
            continue;
        };
        let Some(fname) = entry.path().file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let stem = match entry.path().file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        if parent == layout.image_dir.as_str() && image_glob.matches(fname) {
            if let Some(prev) = images.insert(stem.clone(), entry.path().to_path_buf()) {
                return Err(RodError::Data(format!(
                    "duplicate image stem {stem:?}: {} and {}",
                    prev.display(),
                    entry.path().display()
                )));
            }
        } else if parent == layout.mask_dir.as_str() && mask_glob.matches(fname) {
            let stem = stem
                .strip_suffix(layout.stem_strip_suffix.as_str())
                .unwrap_or(&stem)
                .to_string();
            if let Some(prev) = masks.insert(stem.clone(), entry.path().to_path_buf()) {
                return Err(RodError::Data(format!(
                    "duplicate mask stem {stem:?}: {} and {}",
                    prev.display(),
                    entry.path().display()
                )));
            }
        }
    }

    let mut samples = Vec::new();
    let mut orphans = Vec::new();
    for (stem, image) in &images {
        match masks.remove(stem) {
            Some(mask) => samples.push((image.clone(), mask)),
            None => orphans.push(format!("image without mask: {stem}")),
        }
    }
    for stem in masks.keys() {
        orphans.push(format!("mask without image: {stem}"));
    }
    if strict && !orphans.is_empty() {
        return Err(RodError::Data(format!(
            "unpaired dataset entries: {}",
            orphans.join("; ")
        )));
    }
    let resolution = samples
        .first()
        .and_then(|(img, _)| image::image_dimensions(img).ok());
    Ok(IndexOutcome {
        index: DatasetIndex {
            samples,
            split: split.to_string(),
            resolution,
        },
        orphans,
    })
}

fn compile_glob(pattern: &str) -> Result<glob::Pattern> {
    glob::Pattern::new(pattern)
        .map_err(|e| RodError::Config(format!("bad glob pattern {pattern:?}: {e}")))
}

/// Binarizes a luminance map: every pixel at or above `threshold` is
/// freespace.
pub fn binarize_mask(luma: &Array2<u8>, threshold: u8) -> Array2<u8> {
    luma.mapv(|v| u8::from(v >= threshold))
}

/// RGB image bytes -> normalized `(3, s, s)` model input.
pub fn preprocess_image<T: Elem>(
    rgb: &RgbImage,
    input_size: usize,
    prep: &PreprocessConfig,
) -> Array3<T> {
    let (w, h) = rgb.dimensions();
    let mut tensor = Array4::<T>::zeros((1, 3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            tensor[[0, c, y as usize, x as usize]] = T::from_f64(px.0[c] as f64 / 255.0);
        }
    }
    let resized = resize_bilinear(&tensor, input_size, input_size);
    let mut out = resized.index_axis_move(Axis(0), 0);
    for c in 0..3 {
        let mean = T::from_f64(prep.image_mean[c]);
        let std = T::from_f64(prep.image_std[c]);
        out.index_axis_mut(Axis(0), c)
            .mapv_inplace(|v| (v - mean) / std);
    }
    out
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| RodError::io(path, e))?
        .decode()
        .map_err(|e| RodError::Data(format!("cannot decode {}: {e}", path.display())))
}

/// Loads one image/mask pair: the image resized and normalized to the model
/// input, the mask binarized at native resolution.
pub fn load_and_preprocess<T: Elem>(
    image_path: &Path,
    mask_path: &Path,
    input_size: usize,
    prep: &PreprocessConfig,
) -> Result<(Array3<T>, Array2<u8>)> {
    let rgb = open_image(image_path)?.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(RodError::Data(format!(
            "empty image {}",
            image_path.display()
        )));
    }
    let image = preprocess_image(&rgb, input_size, prep);
    let mask = load_mask(mask_path, prep.mask_threshold)?;
    Ok((image, mask))
}

/// Loads a mask image and binarizes its luminance.
pub fn load_mask(path: &Path, threshold: u8) -> Result<Array2<u8>> {
    let gray = open_image(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let luma = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32).0[0]
    });
    Ok(binarize_mask(&luma, threshold))
}

/// Disk-backed sample source over a [`DatasetIndex`].
pub struct DiskSamples<T> {
    pub index: DatasetIndex,
    pub input_size: usize,
    pub prep: PreprocessConfig,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Elem> DiskSamples<T> {
    pub fn new(index: DatasetIndex, input_size: usize, prep: PreprocessConfig) -> Self {
        DiskSamples {
            index,
            input_size,
            prep,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Elem> SampleSource<T> for DiskSamples<T> {
    fn len(&self) -> usize {
        self.index.samples.len()
    }

    fn get(&self, i: usize) -> Result<(Array3<T>, Array2<u8>)> {
        let (img, mask) = self
            .index
            .samples
            .get(i)
            .ok_or_else(|| RodError::Data(format!("sample index {i} out of range")))?;
        load_and_preprocess(img, mask, self.input_size, &self.prep)
    }
}

/// Prediction export style.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExportMode {
    /// 8-bit single-channel PNG, 0 or 255.
    Mask,
    /// Source image with freespace tinted green at the given alpha.
    Overlay { alpha: f64 },
}

/// Writes a prediction as a mask or overlay PNG. Bytes are deterministic for
/// fixed inputs.
pub fn export_prediction(
    mask: &Array2<u8>,
    source: Option<&RgbImage>,
    out_path: &Path,
    mode: ExportMode,
) -> Result<()> {
    let (h, w) = mask.dim();
    match mode {
        ExportMode::Mask => {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([mask[[y as usize, x as usize]] * 255])
            });
            img.save(out_path)
                .map_err(|e| RodError::Data(format!("writing {}: {e}", out_path.display())))
        }
        ExportMode::Overlay { alpha } => {
            let src = source.ok_or_else(|| {
                RodError::Config("overlay export needs the source image".into())
            })?;
            if (src.width() as usize, src.height() as usize) != (w, h) {
                return Err(RodError::shape(
                    "overlay export",
                    format!("{}x{}", w, h),
                    format!("{}x{}", src.width(), src.height()),
                ));
            }
            let tint = [0.0, 255.0, 0.0];
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let px = src.get_pixel(x, y).0;
                if mask[[y as usize, x as usize]] == 1 {
                    let blend = |s: u8, t: f64| ((1.0 - alpha) * s as f64 + alpha * t).round() as u8;
                    Rgb([blend(px[0], tint[0]), blend(px[1], tint[1]), blend(px[2], tint[2])])
                } else {
                    Rgb(px)
                }
            });
            img.save(out_path)
                .map_err(|e| RodError::Data(format!("writing {}: {e}", out_path.display())))
        }
    }
}

/// Deterministic synthetic scene: a half-plane of "ground" texture against
/// "sky", with the freespace mask exactly on the ground side. Orientation
/// and split line vary per sample.
pub fn synthetic_half_plane_samples<T: Elem>(
    count: usize,
    size: usize,
    seed: u64,
) -> Vec<(Array3<T>, Array2<u8>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let horizontal = rng.gen_bool(0.5);
            let cut = rng.gen_range(size / 4..3 * size / 4);
            let mask = Array2::from_shape_fn((size, size), |(y, x)| {
                let coord = if horizontal { y } else { x };
                u8::from(coord >= cut)
            });
            let mut image = Array3::<T>::zeros((3, size, size));
            for y in 0..size {
                for x in 0..size {
                    let free = mask[[y, x]] == 1;
                    let noise: f64 = rng.gen_range(-0.1..0.1);
                    // ground is warm, sky is cold
                    let base = if free { [0.6, 0.45, 0.2] } else { [0.3, 0.5, 0.8] };
                    for c in 0..3 {
                        image[[c, y, x]] = T::from_f64((base[c] + noise).clamp(0.0, 1.0) * 2.0 - 1.0);
                    }
                }
            }
            (image, mask)
        })
        .collect()
}

/// Writes a synthetic ORFD-style dataset to disk: `image_data/*.png` plus
/// `gt_image/*_fillcolor.png` under `root`.
pub fn write_synthetic_dataset(root: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let image_dir = root.join("image_data");
    let mask_dir = root.join("gt_image");
    std::fs::create_dir_all(&image_dir).map_err(|e| RodError::io(&image_dir, e))?;
    std::fs::create_dir_all(&mask_dir).map_err(|e| RodError::io(&mask_dir, e))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let horizontal = rng.gen_bool(0.5);
        let cut = rng.gen_range(size / 4..3 * size / 4);
        let img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let coord = if horizontal { y as usize } else { x as usize };
            if coord >= cut {
                Rgb([150, 110, 60])
            } else {
                Rgb([80, 130, 200])
            }
        });
        let mask = GrayImage::from_fn(size as u32, size as u32, |x, y| {
            let coord = if horizontal { y as usize } else { x as usize };
            image::Luma([if coord >= cut { 255 } else { 0 }])
        });
        let img_path = image_dir.join(format!("{i:04}.png"));
        let mask_path = mask_dir.join(format!("{i:04}_fillcolor.png"));
        img.save(&img_path)
            .map_err(|e| RodError::Data(format!("writing {}: {e}", img_path.display())))?;
        mask.save(&mask_path)
            .map_err(|e| RodError::Data(format!("writing {}: {e}", mask_path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> LayoutConfig {
        LayoutConfig::default()
    }

    #[test]
    fn index_pairs_and_sorts_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 3, 16, 1).unwrap();
        let out = index_dataset(dir.path(), &layout(), "train", true).unwrap();
        assert_eq!(out.index.samples.len(), 3);
        assert!(out.orphans.is_empty());
        let stems: Vec<_> = out
            .index
            .samples
            .iter()
            .map(|(i, _)| i.file_stem().unwrap().to_str().unwrap().to_string())
            .collect();
        let mut sorted = stems.clone();
        sorted.sort();
        assert_eq!(stems, sorted);
        assert_eq!(out.index.resolution, Some((16, 16)));
    }

    #[test]
    fn strict_mode_names_the_orphan() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 3, 16, 1).unwrap();
        std::fs::remove_file(dir.path().join("gt_image/0001_fillcolor.png")).unwrap();
        let err = index_dataset(dir.path(), &layout(), "train", true).unwrap_err();
        assert!(err.to_string().contains("0001"), "{err}");
        let lenient = index_dataset(dir.path(), &layout(), "train", false).unwrap();
        assert_eq!(lenient.index.samples.len(), 2);
        assert_eq!(lenient.orphans.len(), 1);
    }

    #[test]
    fn indexing_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 4, 16, 2).unwrap();
        let a = index_dataset(dir.path(), &layout(), "test", true).unwrap();
        let b = index_dataset(dir.path(), &layout(), "test", true).unwrap();
        assert_eq!(a.index.samples, b.index.samples);
    }

    #[test]
    fn orfd_style_nested_sequences_are_found() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(&dir.path().join("training/0000"), 2, 16, 3).unwrap();
        write_synthetic_dataset(&dir.path().join("training/0001"), 2, 16, 4).unwrap();
        let err = index_dataset(dir.path(), &layout(), "train", true).unwrap_err();
        // same stems in both sequences collide -> duplicate stem error
        assert!(err.to_string().contains("duplicate"), "{err}");

        let dir2 = tempfile::tempdir().unwrap();
        write_synthetic_dataset(&dir2.path().join("training/0000"), 2, 16, 3).unwrap();
        let out = index_dataset(dir2.path(), &layout(), "train", true).unwrap();
        assert_eq!(out.index.samples.len(), 2);
    }

    #[test]
    fn white_and_black_masks_binarize_to_constants() {
        let dir = tempfile::tempdir().unwrap();
        let white = GrayImage::from_pixel(4, 4, image::Luma([255]));
        let black = GrayImage::from_pixel(4, 4, image::Luma([0]));
        let wp = dir.path().join("w.png");
        let bp = dir.path().join("b.png");
        white.save(&wp).unwrap();
        black.save(&bp).unwrap();
        assert!(load_mask(&wp, 128).unwrap().iter().all(|&v| v == 1));
        assert!(load_mask(&bp, 128).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn gray_ramp_thresholds_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let ramp = GrayImage::from_fn(16, 16, |x, y| image::Luma([(y * 16 + x) as u8]));
        let p = dir.path().join("ramp.png");
        ramp.save(&p).unwrap();
        let mask = load_mask(&p, 128).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let luma = (y * 16 + x) as u8;
                let want = u8::from(luma >= 128);
                assert_eq!(mask[[y, x]], want, "pixel ({y},{x})");
            }
        }
    }

    proptest! {
        #[test]
        fn binarize_commutes_with_flips(seed in 0u64..500, threshold in 0u8..=255) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let luma = Array2::from_shape_fn((5, 7), |_| rng.gen::<u8>());
            let flipped = luma.slice(ndarray::s![..;-1, ..]).to_owned();
            let a = binarize_mask(&flipped, threshold);
            let b = binarize_mask(&luma, threshold).slice(ndarray::s![..;-1, ..]).to_owned();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn preprocessing_is_idempotent_on_conforming_inputs() {
        // an s x s tensor round-trips through the resize unchanged
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let t = Array4::<f64>::from_shape_simple_fn((1, 3, 8, 8), || rng.gen_range(-1.0..1.0));
        let r = resize_bilinear(&t, 8, 8);
        assert_eq!(t, r);
    }

    #[test]
    fn preprocess_resizes_and_normalizes() {
        let img = RgbImage::from_pixel(10, 6, Rgb([255, 0, 128]));
        let prep = PreprocessConfig::default();
        let t: Array3<f64> = preprocess_image(&img, 8, &prep);
        assert_eq!(t.dim(), (3, 8, 8));
        // constant image stays constant through bilinear resize; check the
        // normalization arithmetic per channel
        assert!((t[[0, 3, 3]] - 1.0).abs() < 1e-12);
        assert!((t[[1, 3, 3]] + 1.0).abs() < 1e-12);
        assert!((t[[2, 3, 3]] - (128.0 / 255.0 - 0.5) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn export_mask_writes_0_and_255() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Array2::from_shape_fn((4, 4), |(y, x)| u8::from((y + x) % 2 == 0));
        let p = dir.path().join("mask.png");
        export_prediction(&mask, None, &p, ExportMode::Mask).unwrap();
        let back = image::open(&p).unwrap().to_luma8();
        for y in 0..4u32 {
            for x in 0..4u32 {
                let want = if (y + x) % 2 == 0 { 255 } else { 0 };
                assert_eq!(back.get_pixel(x, y).0[0], want);
            }
        }
    }

    #[test]
    fn overlay_with_empty_mask_reproduces_the_source_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let src = RgbImage::from_fn(5, 4, |x, y| Rgb([x as u8 * 10, y as u8 * 20, 77]));
        let mask = Array2::<u8>::zeros((4, 5));
        let p = dir.path().join("ov.png");
        export_prediction(&mask, Some(&src), &p, ExportMode::Overlay { alpha: 0.5 }).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert_eq!(back.as_raw(), src.as_raw());
    }

    #[test]
    fn checkerboard_overlay_matches_closed_form_blend() {
        let dir = tempfile::tempdir().unwrap();
        let src = RgbImage::from_fn(4, 4, |x, y| Rgb([(40 * x) as u8, (30 * y) as u8, 200]));
        let mask = Array2::from_shape_fn((4, 4), |(y, x)| u8::from((y + x) % 2 == 0));
        let p = dir.path().join("cb.png");
        let alpha = 0.5;
        export_prediction(&mask, Some(&src), &p, ExportMode::Overlay { alpha }).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        for y in 0..4u32 {
            for x in 0..4u32 {
                let s = src.get_pixel(x, y).0;
                let got = back.get_pixel(x, y).0;
                if mask[[y as usize, x as usize]] == 1 {
                    let want = [
                        ((1.0 - alpha) * s[0] as f64).round() as u8,
                        ((1.0 - alpha) * s[1] as f64 + alpha * 255.0).round() as u8,
                        ((1.0 - alpha) * s[2] as f64).round() as u8,
                    ];
                    assert_eq!(got, want, "blended pixel ({x},{y})");
                } else {
                    assert_eq!(got, s, "untouched pixel ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn synthetic_samples_are_deterministic_and_binary() {
        let a = synthetic_half_plane_samples::<f64>(3, 16, 7);
        let b = synthetic_half_plane_samples::<f64>(3, 16, 7);
        assert_eq!(a.len(), 3);
        for ((ia, ma), (ib, mb)) in a.iter().zip(b.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(ma, mb);
            assert!(ma.iter().all(|&v| v <= 1));
            assert!(ma.iter().any(|&v| v == 1) && ma.iter().any(|&v| v == 0));
        }
    }
}
