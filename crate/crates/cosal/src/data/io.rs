//! Disk format. Layout under a dataset root:
//!
//! ```text
//! root/images/<id>.png        8-bit RGB
//! root/annotations/<id>.json  {id, width, height, instances: [...]}
//! root/masks/<id>_<k>.png     1-bit grayscale instance masks
//! root/gt/<id>.png            cached Y, 1-bit grayscale
//! ```
//!
//! Loading validates every sample and reports violations with the file path
//! and the violated rule, skipping the sample and continuing.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, Instance, Sample};
use crate::error::{CosalError, Result};
use crate::geometry::BBox;
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct AnnotationInstance {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    mask: String,
    cosalient: bool,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    id: String,
    width: u32,
    height: u32,
    instances: Vec<AnnotationInstance>,
}

fn dataset_err(path: &Path, what: impl std::fmt::Display) -> CosalError {
    CosalError::Dataset(format!("{}: {what}", path.display()))
}

/// Writes a binary mask as a 1-bit grayscale PNG (rows padded to bytes,
/// most significant bit first).
pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| dataset_err(path, e))?;
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for i in 0..h {
        for j in 0..w {
            if mask.get(i, j) {
                packed[i * row_bytes + j / 8] |= 0x80 >> (j % 8);
            }
        }
    }
    writer
        .write_image_data(&packed)
        .map_err(|e| dataset_err(path, e))?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| dataset_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| {
        dataset_err(path, "image dimensions overflow")
    })?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| dataset_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(dataset_err(path, "mask must be 1-bit grayscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let row_bytes = w.div_ceil(8);
    let mut bits = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            bits.push(buf[i * row_bytes + j / 8] & (0x80 >> (j % 8)) != 0);
        }
    }
    BinaryMask::from_bits(h, w, bits)
}

/// Writes a `[3, h, w]` tensor in [0, 1] as an 8-bit RGB PNG, `round(255 v)`.
pub fn save_image_png<F: Real>(path: &Path, image: &Tensor<F>) -> Result<()> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(CosalError::shape_mismatch(
            "save_image_png",
            "[3, h, w]",
            image.shape(),
        ));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = image.at3(c, i, j).to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| dataset_err(path, e))
}

/// Loads an RGB PNG into `[3, h, w]` with values `k / 255`.
pub fn load_image_png<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let img = image::open(path).map_err(|e| dataset_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for i in 0..h {
        for j in 0..w {
            let px = img.get_pixel(j as u32, i as u32);
            for c in 0..3 {
                out.set3(c, i, j, real::<F>(px.0[c] as f64 / 255.0));
            }
        }
    }
    Ok(out)
}

/// Writes a `[h, w]` map in [0, 1] as 8-bit grayscale, `round(255 v)`.
pub fn save_gray_png<F: Real>(path: &Path, map: &Tensor<F>) -> Result<()> {
    if map.rank() != 2 {
        return Err(CosalError::shape_mismatch(
            "save_gray_png",
            "[h, w]",
            map.shape(),
        ));
    }
    let (h, w) = (map.dim(0), map.dim(1));
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = map.at2(i, j).to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            buf.put_pixel(j as u32, i as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    buf.save(path).map_err(|e| dataset_err(path, e))
}

/// Loads an 8-bit or 1-bit grayscale PNG into `[h, w]` with values in [0, 1].
pub fn load_gray_png<F: Real>(path: &Path) -> Result<Tensor<F>> {
    if let Ok(mask) = load_mask_png(path) {
        return Ok(mask.to_tensor());
    }
    let img = image::open(path).map_err(|e| dataset_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            out.set2(i, j, real::<F>(img.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0));
        }
    }
    Ok(out)
}

pub fn save_dataset<F: Real>(root: &Path, samples: &[Sample<F>]) -> Result<()> {
    for sub in ["images", "annotations", "masks", "gt"] {
        fs::create_dir_all(root.join(sub))?;
    }
    for s in samples {
        save_image_png(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        let mut instances = Vec::with_capacity(s.instances.len());
        for (k, inst) in s.instances.iter().enumerate() {
            let mask_rel = format!("masks/{}_{k}.png", s.id);
            save_mask_png(&root.join(&mask_rel), &inst.mask)?;
            let b = &inst.bbox;
            instances.push(AnnotationInstance {
                bbox: [
                    b.cx.to_f64().expect("finite"),
                    b.cy.to_f64().expect("finite"),
                    b.w.to_f64().expect("finite"),
                    b.h.to_f64().expect("finite"),
                ],
                mask: mask_rel,
                cosalient: inst.co_salient,
            });
        }
        let ann = AnnotationFile {
            id: s.id.clone(),
            width: s.side() as u32,
            height: s.side() as u32,
            instances,
        };
        let ann_path = root.join("annotations").join(format!("{}.json", s.id));
        let file = File::create(&ann_path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), &ann)
            .map_err(|e| dataset_err(&ann_path, e))?;

        let mut y_mask = BinaryMask::new(s.side(), s.side());
        for inst in s.instances.iter().filter(|i| i.co_salient) {
            inst.mask.or_into(&mut y_mask);
        }
        save_mask_png(&root.join("gt").join(format!("{}.png", s.id)), &y_mask)?;
    }
    Ok(())
}

/// Samples that loaded and validated, plus one diagnostic line per rejected
/// sample.
pub struct LoadReport<F> {
    pub samples: Vec<Sample<F>>,
    pub rejections: Vec<String>,
}

fn load_one<F: Real>(root: &Path, ann_path: &Path) -> Result<Sample<F>> {
    let file = File::open(ann_path)?;
    let ann: AnnotationFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| dataset_err(ann_path, e))?;
    let image_path = root.join("images").join(format!("{}.png", ann.id));
    let image = load_image_png::<F>(&image_path)?;
    if image.shape() != [3, ann.height as usize, ann.width as usize] {
        return Err(dataset_err(
            &image_path,
            format!(
                "image is {}x{}, annotation says {}x{}",
                image.dim(2),
                image.dim(1),
                ann.width,
                ann.height
            ),
        ));
    }
    let mut instances = Vec::with_capacity(ann.instances.len());
    for inst in &ann.instances {
        let mask = load_mask_png(&root.join(&inst.mask))?;
        let [cx, cy, w, h] = inst.bbox;
        instances.push(Instance {
            bbox: BBox::new(real::<F>(cx), real::<F>(cy), real::<F>(w), real::<F>(h)),
            mask,
            co_salient: inst.cosalient,
        });
    }
    let mut sample = Sample {
        id: ann.id,
        image,
        y: Tensor::zeros(&[ann.height as usize, ann.width as usize]),
        instances,
    };
    sample.derive_y();
    sample
        .validate()
        .map_err(|e| dataset_err(ann_path, e))?;
    Ok(sample)
}

/// Loads every annotated sample under `root`, in annotation filename order.
/// Invalid samples become diagnostics instead of aborting the load.
pub fn load_dataset<F: Real>(root: &Path) -> Result<LoadReport<F>> {
    let ann_dir = root.join("annotations");
    let mut paths: Vec<PathBuf> = Vec::new();
    if ann_dir.is_dir() {
        for entry in fs::read_dir(&ann_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                paths.push(path);
            }
        }
    }
    paths.sort();
    let mut report = LoadReport {
        samples: Vec::with_capacity(paths.len()),
        rejections: Vec::new(),
    };
    for path in &paths {
        match load_one(root, path) {
            Ok(sample) => report.samples.push(sample),
            Err(e) => report.rejections.push(e.to_string()),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_generate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_png_roundtrips_odd_widths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = BinaryMask::new(5, 11);
        for (k, i, j) in [(0, 0, 0), (1, 2, 7), (2, 4, 10), (3, 3, 8)] {
            let _ = k;
            m.set(i, j, true);
        }
        save_mask_png(&path, &m).unwrap();
        let back = load_mask_png(&path).unwrap();
        assert_eq!(m.bits(), back.bits());
    }

    #[test]
    fn empty_directory_loads_an_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let report = load_dataset::<f32>(dir.path()).unwrap();
        assert!(report.samples.is_empty());
        assert!(report.rejections.is_empty());
    }

    #[test]
    fn dataset_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample<f32>> =
            synth_generate(3, 64, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset::<f32>(dir.path()).unwrap();
        assert!(loaded.rejections.is_empty(), "{:?}", loaded.rejections);
        assert_eq!(loaded.samples.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.y.data(), b.y.data());
            for (ia, ib) in a.instances.iter().zip(&b.instances) {
                assert_eq!(ia.mask.bits(), ib.mask.bits());
                assert_eq!(ia.co_salient, ib.co_salient);
                assert!((ia.bbox.cx - ib.bbox.cx).abs() < 1e-6);
                assert!((ia.bbox.w - ib.bbox.w).abs() < 1e-6);
            }
        }
        // second save/load keeps everything stable
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &loaded.samples).unwrap();
        let again = load_dataset::<f32>(dir2.path()).unwrap();
        for (a, b) in loaded.samples.iter().zip(&again.samples) {
            assert_eq!(a.image.data(), b.image.data());
        }
    }

    #[test]
    fn leaking_mask_is_rejected_with_the_rule_name() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples: Vec<Sample<f64>> =
            synth_generate(1, 64, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        // shrink the first box so its mask leaks outside
        samples[0].instances[0].bbox.w *= 0.5;
        samples[0].instances[0].bbox.h *= 0.5;
        let root = dir.path();
        for sub in ["images", "annotations", "masks", "gt"] {
            fs::create_dir_all(root.join(sub)).unwrap();
        }
        // write manually (save_dataset does not validate; the loader must)
        save_dataset(root, &samples).unwrap();
        let report = load_dataset::<f64>(root).unwrap();
        assert!(report.samples.is_empty());
        assert_eq!(report.rejections.len(), 1);
        assert!(
            report.rejections[0].contains("mask-inside-box"),
            "{}",
            report.rejections[0]
        );
    }

    #[test]
    fn gray_png_roundtrip_quantizes_to_255ths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let map = Tensor::from_vec(&[2, 2], vec![0.0f64, 0.25, 0.5, 1.0]).unwrap();
        save_gray_png(&path, &map).unwrap();
        let back = load_gray_png::<f64>(&path).unwrap();
        assert_eq!(back.at2(0, 0), 0.0);
        assert_eq!(back.at2(1, 1), 1.0);
        assert!((back.at2(0, 1) - 0.25).abs() < 1.0 / 255.0);
    }
}
