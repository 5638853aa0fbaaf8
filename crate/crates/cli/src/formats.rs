//! On-disk dataset formats: annotation JSON, image files, manifests, and
//! prediction/report files.
//!
//! A dataset directory contains:
//!
//! ```text
//! dir/
//!   manifest.json       split membership + generator spec
//!   annotations.json    images, keypoint annotations, meta
//!   images/*.png        16-bit lossless frames (or images.json when embedded)
//! ```
//!
//! Keypoints are stored as flat `[row, col, visible]` triples in pixel
//! coordinates with full float precision, so annotations round-trip
//! bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use semimultipose_core::engine::{Real, Tensor};
use semimultipose_core::eval::ApReport;
use semimultipose_core::fusion::Prediction;
use semimultipose_core::synth::{DatasetSpec, Scene, SplitSet};
use semimultipose_core::targets::Instance;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: u64,
    pub instance_id: u64,
    /// Flat `[row, col, visible] × K`.
    pub keypoints: Vec<Real>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub num_parts: usize,
    pub skeleton: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub meta: Meta,
}

/// Prediction files mirror the annotation schema with a per-instance score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub image_id: u64,
    pub instance_id: u64,
    pub keypoints: Vec<Real>,
    pub score: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionFile {
    pub annotations: Vec<PredictionEntry>,
    pub meta: Meta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: DatasetSpec,
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
    pub test: Vec<u64>,
    pub images_embedded: bool,
}

const MANIFEST_FORMAT: &str = "semimultipose-dataset-v1";

pub fn default_skeleton(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("part_{i}")).collect()
}

/// Instance -> flat `[row, col, visible]` triples.
pub fn instance_to_flat(inst: &Instance) -> Vec<Real> {
    let mut out = Vec::with_capacity(inst.num_parts() * 3);
    for (kp, &vis) in inst.keypoints.iter().zip(&inst.visibility) {
        out.push(kp[0]);
        out.push(kp[1]);
        out.push(if vis { 1.0 } else { 0.0 });
    }
    out
}

pub fn instance_from_flat(flat: &[Real]) -> Result<Instance> {
    if flat.len() % 3 != 0 || flat.is_empty() {
        return Err(AppError::validation(format!(
            "keypoint list of length {} is not [row,col,visible] triples",
            flat.len()
        )));
    }
    let mut kps = Vec::with_capacity(flat.len() / 3);
    let mut vis = Vec::with_capacity(flat.len() / 3);
    for t in flat.chunks(3) {
        kps.push([t[0], t[1]]);
        vis.push(t[2] != 0.0);
    }
    Instance::with_visibility(kps, vis).map_err(AppError::from_core)
}

fn image_file_name(id: u64) -> String {
    format!("images/scene_{id:04}.png")
}

/// Serializes the annotations of a scene collection. Unlabeled scenes
/// appear in `images` without annotation records.
pub fn annotation_file(scenes: &[&Scene], num_parts: usize) -> AnnotationFile {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for scene in scenes {
        let shape = scene.image.shape();
        images.push(ImageEntry {
            id: scene.id,
            file: image_file_name(scene.id),
            height: shape[0],
            width: shape[1],
        });
        if let Some(instances) = &scene.instances {
            for (i, inst) in instances.iter().enumerate() {
                annotations.push(AnnotationEntry {
                    image_id: scene.id,
                    instance_id: i as u64,
                    keypoints: instance_to_flat(inst),
                });
            }
        }
    }
    AnnotationFile {
        images,
        annotations,
        meta: Meta {
            num_parts,
            skeleton: default_skeleton(num_parts),
        },
    }
}

/// Validates an annotation file and groups instances per image id.
pub fn parse_annotations(file: &AnnotationFile) -> Result<BTreeMap<u64, Vec<Instance>>> {
    let sizes: BTreeMap<u64, (usize, usize)> = file
        .images
        .iter()
        .map(|e| (e.id, (e.height, e.width)))
        .collect();
    let mut out: BTreeMap<u64, Vec<Instance>> = BTreeMap::new();
    for entry in &file.annotations {
        if entry.keypoints.len() != file.meta.num_parts * 3 {
            return Err(AppError::validation(format!(
                "instance {} of image {} has {} keypoint values, meta num_parts {} needs {}",
                entry.instance_id,
                entry.image_id,
                entry.keypoints.len(),
                file.meta.num_parts,
                file.meta.num_parts * 3
            )));
        }
        let (h, w) = *sizes.get(&entry.image_id).ok_or_else(|| {
            AppError::validation(format!(
                "instance {} references unknown image {}",
                entry.instance_id, entry.image_id
            ))
        })?;
        let inst = instance_from_flat(&entry.keypoints)?;
        for (k, kp) in inst.keypoints.iter().enumerate() {
            if inst.visibility[k]
                && !(kp[0] >= 0.0
                    && kp[0] <= (h - 1) as Real
                    && kp[1] >= 0.0
                    && kp[1] <= (w - 1) as Real)
            {
                return Err(AppError::validation(format!(
                    "instance {} of image {}: keypoint {k} at ({}, {}) outside {h}x{w}",
                    entry.instance_id, entry.image_id, kp[0], kp[1]
                )));
            }
        }
        out.entry(entry.image_id).or_default().push(inst);
    }
    Ok(out)
}

fn quantize16(v: Real) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    match c {
        1 => {
            let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
                image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([quantize16(image.data()[y as usize * w + x as usize])])
                });
            buf.save(path)
                .map_err(|e| AppError::runtime(format!("writing {}: {e}", path.display())))?;
        }
        3 => {
            let buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
                image::ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                    let base = (y as usize * w + x as usize) * 3;
                    image::Rgb([
                        quantize16(image.data()[base]),
                        quantize16(image.data()[base + 1]),
                        quantize16(image.data()[base + 2]),
                    ])
                });
            buf.save(path)
                .map_err(|e| AppError::runtime(format!("writing {}: {e}", path.display())))?;
        }
        _ => {
            return Err(AppError::validation(format!(
                "{c}-channel images can only be stored embedded"
            )))
        }
    }
    Ok(())
}

fn read_image(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| AppError::validation(format!("cannot read {}: {e}", path.display())))?;
    let tensor = match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let data: Vec<Real> = buf.pixels().map(|p| p.0[0] as Real / 65535.0).collect();
            Tensor::new(&[h, w, 1], data).map_err(AppError::from_core)?
        }
        image::DynamicImage::ImageRgb16(buf) => {
            let mut data = Vec::with_capacity(h * w * 3);
            for p in buf.pixels() {
                data.extend(p.0.iter().map(|&v| v as Real / 65535.0));
            }
            Tensor::new(&[h, w, 3], data).map_err(AppError::from_core)?
        }
        other => {
            let buf = other.into_luma16();
            let data: Vec<Real> = buf.pixels().map(|p| p.0[0] as Real / 65535.0).collect();
            Tensor::new(&[h, w, 1], data).map_err(AppError::from_core)?
        }
    };
    if tensor.shape()[..2] != [h, w] {
        return Err(AppError::validation(format!(
            "{} is not the declared {h}x{w}",
            path.display()
        )));
    }
    Ok(tensor)
}

#[derive(Serialize, Deserialize)]
struct EmbeddedImages {
    images: BTreeMap<u64, EmbeddedImage>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddedImage {
    shape: Vec<usize>,
    data: Vec<Real>,
}

/// Writes a complete dataset directory.
pub fn write_dataset(dir: &Path, splits: &SplitSet, spec: &DatasetSpec, embed: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let all: Vec<&Scene> = splits
        .labeled
        .iter()
        .chain(&splits.unlabeled)
        .chain(&splits.test)
        .collect();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        spec: spec.clone(),
        labeled: splits.labeled.iter().map(|s| s.id).collect(),
        unlabeled: splits.unlabeled.iter().map(|s| s.id).collect(),
        test: splits.test.iter().map(|s| s.id).collect(),
        images_embedded: embed,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    let annotations = annotation_file(&all, spec.num_parts);
    fs::write(
        dir.join("annotations.json"),
        serde_json::to_vec(&annotations)?,
    )?;
    if embed {
        let embedded = EmbeddedImages {
            images: all
                .iter()
                .map(|s| {
                    (
                        s.id,
                        EmbeddedImage {
                            shape: s.image.shape().to_vec(),
                            data: s.image.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        fs::write(dir.join("images.json"), serde_json::to_vec(&embedded)?)?;
    } else {
        for scene in &all {
            write_image(&dir.join(image_file_name(scene.id)), &scene.image)?;
        }
    }
    Ok(())
}

/// Reads a dataset directory back into splits.
pub fn read_dataset(dir: &Path) -> Result<(SplitSet, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(
        &fs::read(dir.join("manifest.json"))
            .map_err(|e| AppError::validation(format!("no manifest in {}: {e}", dir.display())))?,
    )
    .map_err(|e| AppError::validation(format!("malformed manifest: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(AppError::validation(format!(
            "unsupported dataset format {:?}",
            manifest.format
        )));
    }
    let annotations: AnnotationFile = serde_json::from_slice(
        &fs::read(dir.join("annotations.json"))
            .map_err(|e| AppError::validation(format!("no annotations: {e}")))?,
    )
    .map_err(|e| AppError::validation(format!("malformed annotations: {e}")))?;
    let per_image = parse_annotations(&annotations)?;

    let embedded: Option<EmbeddedImages> = if manifest.images_embedded {
        Some(
            serde_json::from_slice(&fs::read(dir.join("images.json"))?)
                .map_err(|e| AppError::validation(format!("malformed images.json: {e}")))?,
        )
    } else {
        None
    };

    let load_scene = |id: u64, labeled: bool| -> Result<Scene> {
        let entry = annotations
            .images
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| AppError::validation(format!("manifest references image {id}")))?;
        let image = match &embedded {
            Some(embedded) => {
                let e = embedded
                    .images
                    .get(&id)
                    .ok_or_else(|| AppError::validation(format!("no embedded image {id}")))?;
                Tensor::new(&e.shape, e.data.clone()).map_err(AppError::from_core)?
            }
            None => read_image(&dir.join(&entry.file), entry.height, entry.width)?,
        };
        let instances = if labeled {
            Some(per_image.get(&id).cloned().ok_or_else(|| {
                AppError::validation(format!("labeled image {id} has no annotations"))
            })?)
        } else {
            None
        };
        Ok(Scene {
            id,
            image,
            instances,
        })
    };

    let splits = SplitSet {
        labeled: manifest
            .labeled
            .iter()
            .map(|&id| load_scene(id, true))
            .collect::<Result<_>>()?,
        unlabeled: manifest
            .unlabeled
            .iter()
            .map(|&id| load_scene(id, false))
            .collect::<Result<_>>()?,
        test: manifest
            .test
            .iter()
            .map(|&id| load_scene(id, true))
            .collect::<Result<_>>()?,
    };
    Ok((splits, manifest))
}

/// Writes per-frame predictions in the annotation-mirroring format.
pub fn write_predictions(
    path: &Path,
    frames: &[(u64, &Prediction)],
    num_parts: usize,
) -> Result<()> {
    let mut annotations = Vec::new();
    for (image_id, pred) in frames {
        for (i, inst) in pred.instances.iter().enumerate() {
            annotations.push(PredictionEntry {
                image_id: *image_id,
                instance_id: i as u64,
                keypoints: instance_to_flat(inst),
                score: pred.scores[i],
            });
        }
    }
    let file = PredictionFile {
        annotations,
        meta: Meta {
            num_parts,
            skeleton: default_skeleton(num_parts),
        },
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// Reads a prediction file back into per-image predictions.
pub fn read_predictions(path: &Path) -> Result<BTreeMap<u64, Prediction>> {
    let file: PredictionFile = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| AppError::validation(format!("malformed predictions: {e}")))?;
    let mut out: BTreeMap<u64, Prediction> = BTreeMap::new();
    for entry in &file.annotations {
        if entry.keypoints.len() != file.meta.num_parts * 3 {
            return Err(AppError::validation(format!(
                "prediction {} of image {} has wrong keypoint count",
                entry.instance_id, entry.image_id
            )));
        }
        let inst = instance_from_flat(&entry.keypoints)?;
        let slot = out.entry(entry.image_id).or_default();
        slot.instances.push(inst);
        slot.scores.push(entry.score);
    }
    for pred in out.values_mut() {
        let mut order: Vec<usize> = (0..pred.len()).collect();
        order.sort_by(|&a, &b| pred.scores[b].partial_cmp(&pred.scores[a]).unwrap());
        pred.instances = order.iter().map(|&i| pred.instances[i].clone()).collect();
        pred.scores = order.iter().map(|&i| pred.scores[i]).collect();
    }
    Ok(out)
}

pub fn write_report(path: &Path, report: &ApReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use semimultipose_core::synth::{generate_scene, make_splits};

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn annotation_round_trip_is_exact() {
        let spec = DatasetSpec {
            keypoint_jitter: 0.3,
            ..DatasetSpec::default()
        };
        let scenes: Vec<Scene> = (0..3).map(|i| generate_scene(&spec, i).unwrap()).collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let file = annotation_file(&refs, spec.num_parts);
        let json = serde_json::to_vec(&file).unwrap();
        let back: AnnotationFile = serde_json::from_slice(&json).unwrap();
        let per_image = parse_annotations(&back).unwrap();
        for scene in &scenes {
            let round = &per_image[&scene.id];
            assert_eq!(round, scene.instances.as_ref().unwrap());
        }
    }

    #[test]
    fn wrong_keypoint_count_names_instance() {
        let mut file = AnnotationFile {
            images: vec![ImageEntry {
                id: 0,
                file: "x.png".into(),
                height: 64,
                width: 64,
            }],
            annotations: vec![AnnotationEntry {
                image_id: 0,
                instance_id: 7,
                keypoints: vec![1.0, 2.0, 1.0, 3.0, 4.0, 1.0], // 2 keypoints
            }],
            meta: Meta {
                num_parts: 3,
                skeleton: default_skeleton(3),
            },
        };
        let err = parse_annotations(&file).unwrap_err().to_string();
        assert!(err.contains("instance 7"), "{err}");
        // out-of-bounds keypoint also names the instance
        file.annotations[0].keypoints = vec![1.0, 2.0, 1.0, 99.0, 4.0, 1.0, 5.0, 5.0, 1.0];
        let err = parse_annotations(&file).unwrap_err().to_string();
        assert!(err.contains("instance 7"), "{err}");
    }

    #[test]
    fn invisible_keypoints_survive_round_trip() {
        let inst = Instance::with_visibility(
            vec![[1.0, 2.0], [3.0, 4.0]],
            vec![true, false],
        )
        .unwrap();
        let back = instance_from_flat(&instance_to_flat(&inst)).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let spec = DatasetSpec {
            n_labeled: 2,
            labeled_pool: 4,
            n_test: 2,
            n_unlabeled: 1,
            ..DatasetSpec::default()
        };
        let splits = make_splits(&spec).unwrap();
        for embed in [false, true] {
            let dir = tmpdir();
            write_dataset(dir.path(), &splits, &spec, embed).unwrap();
            let (back, manifest) = read_dataset(dir.path()).unwrap();
            assert_eq!(manifest.spec, spec);
            assert_eq!(back.labeled.len(), 2);
            assert_eq!(back.unlabeled.len(), 3);
            assert_eq!(back.test.len(), 2);
            // annotations round-trip exactly; images only when embedded
            for (a, b) in splits.labeled.iter().zip(&back.labeled) {
                assert_eq!(a.instances, b.instances);
                if embed {
                    assert_eq!(a.image.data(), b.image.data());
                } else {
                    let diff = a
                        .image
                        .data()
                        .iter()
                        .zip(b.image.data())
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, Real::max);
                    assert!(diff <= 0.5 / 65535.0 + 1e-9, "16-bit quantization bound");
                }
            }
            assert!(back.unlabeled.iter().all(|s| s.instances.is_none()));
        }
    }

    #[test]
    fn prediction_round_trip() {
        let dir = tmpdir();
        let path = dir.path().join("preds.json");
        let pred = Prediction {
            instances: vec![
                Instance::new(vec![[1.5, 2.5], [3.5, 4.5]]),
                Instance::new(vec![[5.0, 6.0], [7.0, 8.0]]),
            ],
            scores: vec![0.9, 0.4],
        };
        write_predictions(&path, &[(3, &pred)], 2).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back[&3].scores, pred.scores);
        assert_eq!(back[&3].instances, pred.instances);
    }
}
