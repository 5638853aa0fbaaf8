//! Deterministic synthetic multi-instance scenes.
//!
//! Each scene renders a configurable number of K-part chain "animals" as
//! soft blobs over a textured noise background, with the exact keypoint
//! coordinates recorded as annotations (in image pixels). Generation is pure
//! in `(spec, scene_seed)`, so datasets are reproducible and splits can be
//! rebuilt from seeds alone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};
use crate::targets::Instance;

/// Dataset geometry and split sizes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DatasetSpec {
    /// Frames that keep their annotations.
    pub n_labeled: usize,
    /// Dedicated unlabeled frames (generated without ever exposing labels).
    pub n_unlabeled: usize,
    /// Held-out test frames.
    pub n_test: usize,
    /// Size of the annotated pool; the `labeled_pool - n_labeled` frames not
    /// selected become additional unlabeled frames, stripped of annotations.
    pub labeled_pool: usize,
    /// Keypoints per instance.
    pub num_parts: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Body half-length range, in pixels.
    pub min_scale: Real,
    pub max_scale: Real,
    /// 0 keeps instances fully separated; 1 allows arbitrary overlap.
    pub overlap_allowance: Real,
    /// Uniform annotation jitter in pixels (0 = exact annotations).
    pub keypoint_jitter: Real,
    /// Drives scene content.
    pub seed: u64,
    /// Drives the labeled-subset selection (defaults to `seed`).
    pub split_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_labeled: 5,
            n_unlabeled: 0,
            n_test: 16,
            labeled_pool: 45,
            num_parts: 3,
            image_height: 64,
            image_width: 64,
            channels: 1,
            min_instances: 2,
            max_instances: 4,
            min_scale: 6.0,
            max_scale: 9.0,
            overlap_allowance: 0.3,
            keypoint_jitter: 0.0,
            seed: 0,
            split_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_parts == 0 {
            return Err(Error::Invalid("num_parts must be >= 1".into()));
        }
        if self.channels == 0 || self.channels > 3 {
            return Err(Error::Invalid("channels must be 1..=3".into()));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::Invalid("min_instances > max_instances".into()));
        }
        if !(self.min_scale > 0.0) || self.min_scale > self.max_scale {
            return Err(Error::Invalid("bad body scale range".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_allowance) {
            return Err(Error::Invalid("overlap_allowance must be in [0,1]".into()));
        }
        if self.n_labeled > self.labeled_pool {
            return Err(Error::Invalid(format!(
                "n_labeled {} exceeds the labeled pool of {}",
                self.n_labeled, self.labeled_pool
            )));
        }
        let margin = self.placement_margin();
        if self.image_height as Real <= 2.0 * margin || self.image_width as Real <= 2.0 * margin {
            return Err(Error::Invalid(
                "image too small for the body scale range".into(),
            ));
        }
        Ok(())
    }

    fn placement_margin(&self) -> Real {
        self.max_scale + 3.0
    }
}

/// One frame: the rendered image plus annotations when labeled. Unlabeled
/// scenes carry no instance list at all, so labels cannot leak into training.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: u64,
    /// `[H, W, C]` intensities in `[0, 1]`.
    pub image: Tensor,
    pub instances: Option<Vec<Instance>>,
}

impl Scene {
    pub fn labeled(&self) -> bool {
        self.instances.is_some()
    }

    /// Same scene with annotations removed.
    pub fn stripped(mut self) -> Scene {
        self.instances = None;
        self
    }
}

/// The three disjoint splits used for a training run.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Deterministic RNG for a (seed, stream, index) triple.
pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const SCENE_STREAM: u64 = 0x5ce4e;
const SPLIT_STREAM: u64 = 0x59117;
const OVERLAY_STREAM: u64 = 0x07e1;

struct Body {
    center: [Real; 2],
    angle: Real,
    scale: Real,
}

/// Keypoints of a chain template: K points spaced along the body axis, in
/// image pixels.
fn template_keypoints(body: &Body, k: usize) -> Vec<[Real; 2]> {
    let dir = [body.angle.cos(), body.angle.sin()];
    (0..k)
        .map(|i| {
            let t = if k == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as Real / (k - 1) as Real
            };
            [
                body.center[0] + body.scale * t * dir[0],
                body.center[1] + body.scale * t * dir[1],
            ]
        })
        .collect()
}

fn render(bodies: &[Body], spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w, ch) = (spec.image_height, spec.image_width, spec.channels);
    let mut img = vec![0.0 as Real; h * w * ch];
    // textured background: two low-frequency waves plus white noise
    let (f1, f2) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
    let (p1, p2) = (
        rng.gen_range(0.0..core::f64::consts::TAU as Real),
        rng.gen_range(0.0..core::f64::consts::TAU as Real),
    );
    let tau = core::f64::consts::TAU as Real;
    for y in 0..h {
        for x in 0..w {
            let wave = 0.05
                * (tau * f1 * y as Real / h as Real + p1).sin()
                * (tau * f2 * x as Real / w as Real + p2).sin();
            let base = 0.12 + wave + rng.gen_range(0.0..0.05);
            for c in 0..ch {
                img[(y * w + x) * ch + c] = base;
            }
        }
    }
    // soft blobs, brighter towards later parts so parts are tellable apart
    for body in bodies {
        let kps = template_keypoints(body, spec.num_parts);
        for (part, kp) in kps.iter().enumerate() {
            let frac = if spec.num_parts == 1 {
                0.0
            } else {
                part as Real / (spec.num_parts - 1) as Real
            };
            let intensity = 0.55 + 0.4 * frac;
            let radius = body.scale * (0.28 + 0.10 * frac);
            let reach = (3.0 * radius).ceil() as isize;
            let (cy, cx) = (kp[0], kp[1]);
            let y0 = ((cy as isize) - reach).max(0) as usize;
            let y1 = (((cy as isize) + reach) as usize).min(h - 1);
            let x0 = ((cx as isize) - reach).max(0) as usize;
            let x1 = (((cx as isize) + reach) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d2 = (y as Real - cy) * (y as Real - cy)
                        + (x as Real - cx) * (x as Real - cx);
                    let v = intensity * (-d2 / (2.0 * radius * radius)).exp();
                    for c in 0..ch {
                        let px = &mut img[(y * w + x) * ch + c];
                        if v > *px {
                            *px = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, ch], img).expect("bounded intensities")
}

/// Generates one scene, deterministic in `(spec.seed, scene_seed)`.
pub fn generate_scene(spec: &DatasetSpec, scene_seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, SCENE_STREAM, scene_seed);
    let count = rng.gen_range(spec.min_instances..=spec.max_instances);
    let margin = spec.placement_margin();
    let (h, w) = (spec.image_height as Real, spec.image_width as Real);

    let mut bodies: Vec<Body> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _attempt in 0..500 {
            let body = Body {
                center: [
                    rng.gen_range(margin..h - margin),
                    rng.gen_range(margin..w - margin),
                ],
                angle: rng.gen_range(0.0..core::f64::consts::TAU as Real),
                scale: rng.gen_range(spec.min_scale..=spec.max_scale),
            };
            let ok = bodies.iter().all(|other| {
                let dr = body.center[0] - other.center[0];
                let dc = body.center[1] - other.center[1];
                let dist = (dr * dr + dc * dc).sqrt();
                let required = (1.0 - spec.overlap_allowance) * (body.scale + other.scale + 2.0);
                dist >= required
            });
            if ok {
                bodies.push(body);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Invalid(format!(
                "could not place {count} instances of scale {:.1}..{:.1} in a {}x{} image",
                spec.min_scale, spec.max_scale, spec.image_height, spec.image_width
            )));
        }
    }

    let image = render(&bodies, spec, &mut rng);
    let instances = bodies
        .iter()
        .map(|b| {
            let mut kps = template_keypoints(b, spec.num_parts);
            if spec.keypoint_jitter > 0.0 {
                for kp in &mut kps {
                    kp[0] += rng.gen_range(-spec.keypoint_jitter..=spec.keypoint_jitter);
                    kp[1] += rng.gen_range(-spec.keypoint_jitter..=spec.keypoint_jitter);
                }
            }
            Instance::new(kps)
        })
        .collect();
    Ok(Scene {
        id: scene_seed,
        image,
        instances: Some(instances),
    })
}

/// A cut-out instance with keypoints relative to the patch origin.
#[derive(Debug, Clone)]
pub struct Crop {
    pub image: Tensor,
    pub instance: Instance,
}

/// Cuts a padded patch around one instance of a labeled scene.
pub fn crop_instance(scene: &Scene, index: usize, pad: usize) -> Result<Crop> {
    let instances = scene
        .instances
        .as_ref()
        .ok_or_else(|| Error::Invalid("cannot crop an unlabeled scene".into()))?;
    let inst = instances
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("no instance {index}")))?;
    let shape = scene.image.shape();
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (h as Real, 0.0, w as Real, 0.0 as Real);
    for &[r, c] in &inst.keypoints {
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
    }
    let r0 = (rmin as isize - pad as isize).max(0) as usize;
    let c0 = (cmin as isize - pad as isize).max(0) as usize;
    let r1 = ((rmax as usize) + pad).min(h - 1);
    let c1 = ((cmax as usize) + pad).min(w - 1);
    let (ph, pw) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut data = Vec::with_capacity(ph * pw * ch);
    for r in r0..=r1 {
        for c in c0..=c1 {
            for k in 0..ch {
                data.push(scene.image.data()[(r * w + c) * ch + k]);
            }
        }
    }
    let kps = inst
        .keypoints
        .iter()
        .map(|&[r, c]| [r - r0 as Real, c - c0 as Real])
        .collect();
    Ok(Crop {
        image: Tensor::new(&[ph, pw, ch], data)?,
        instance: Instance::with_visibility(kps, inst.visibility.clone())?,
    })
}

/// Pastes `n` crops (sampled without replacement) at random non-clipping
/// positions onto a background, alpha-blending a 2-pixel feathered border.
/// Keypoints translate exactly with their crop.
pub fn overlay_augment(crops: &[Crop], background: &Tensor, n: usize, seed: u64) -> Result<Scene> {
    if n == 0 {
        return Err(Error::Invalid("overlay count must be >= 1".into()));
    }
    if n > crops.len() {
        return Err(Error::Invalid(format!(
            "asked for {n} overlays but only {} crops are available",
            crops.len()
        )));
    }
    let shape = background.shape();
    if shape.len() != 3 {
        return Err(Error::Shape("background must be [H,W,C]".into()));
    }
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    let mut rng = rng_for(seed, OVERLAY_STREAM, 0);

    // sample n distinct crop indices
    let mut order: Vec<usize> = (0..crops.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order.truncate(n);

    let mut img = background.data().to_vec();
    let mut instances = Vec::with_capacity(n);
    for &ci in &order {
        let crop = &crops[ci];
        let cs = crop.image.shape();
        let (cph, cpw) = (cs[0], cs[1]);
        if cs[2] != ch {
            return Err(Error::Shape("crop channel count differs from background".into()));
        }
        if cph > h || cpw > w {
            return Err(Error::Invalid("crop larger than background".into()));
        }
        let top = rng.gen_range(0..=h - cph);
        let left = rng.gen_range(0..=w - cpw);
        for r in 0..cph {
            for c in 0..cpw {
                let edge = r.min(c).min(cph - 1 - r).min(cpw - 1 - c);
                let alpha = ((edge as Real + 1.0) / 3.0).min(1.0);
                for k in 0..ch {
                    let src = crop.image.data()[(r * cpw + c) * ch + k];
                    let dst = &mut img[((top + r) * w + (left + c)) * ch + k];
                    *dst = *dst * (1.0 - alpha) + src * alpha;
                }
            }
        }
        let kps = crop
            .instance
            .keypoints
            .iter()
            .map(|&[r, c]| [r + top as Real, c + left as Real])
            .collect();
        instances.push(Instance::with_visibility(
            kps,
            crop.instance.visibility.clone(),
        )?);
    }
    Ok(Scene {
        id: seed,
        image: Tensor::new(&[h, w, ch], img)?,
        instances: Some(instances),
    })
}

/// Builds the disjoint labeled/unlabeled/test splits.
///
/// Scene ids: `0..labeled_pool` form the annotated pool, the next
/// `n_unlabeled` are dedicated unlabeled frames, the last `n_test` are the
/// test set. A random subset of the pool (driven by `split_seed`) keeps its
/// annotations; the rest are stripped and join the unlabeled set.
pub fn make_splits(spec: &DatasetSpec) -> Result<SplitSet> {
    spec.validate()?;
    let pool: Vec<Scene> = (0..spec.labeled_pool as u64)
        .map(|i| generate_scene(spec, i))
        .collect::<Result<_>>()?;
    let dedicated: Vec<Scene> = (0..spec.n_unlabeled as u64)
        .map(|i| generate_scene(spec, spec.labeled_pool as u64 + i))
        .collect::<Result<_>>()?;
    let first_test = (spec.labeled_pool + spec.n_unlabeled) as u64;
    let test: Vec<Scene> = (0..spec.n_test as u64)
        .map(|i| generate_scene(spec, first_test + i))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = rng_for(spec.split_seed, SPLIT_STREAM, 0);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let keep: Vec<usize> = order[..spec.n_labeled].to_vec();

    let mut labeled = Vec::with_capacity(spec.n_labeled);
    let mut unlabeled = Vec::new();
    for (i, scene) in pool.into_iter().enumerate() {
        if keep.contains(&i) {
            labeled.push(scene);
        } else {
            unlabeled.push(scene.stripped());
        }
    }
    unlabeled.extend(dedicated.into_iter().map(Scene::stripped));
    Ok(SplitSet {
        labeled,
        unlabeled,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let spec = DatasetSpec::default();
        let a = generate_scene(&spec, 3).unwrap();
        let b = generate_scene(&spec, 3).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.instances, b.instances);
        let c = generate_scene(&spec, 4).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn instance_range_respected() {
        let spec = DatasetSpec {
            min_instances: 1,
            max_instances: 1,
            ..DatasetSpec::default()
        };
        let s = generate_scene(&spec, 0).unwrap();
        assert_eq!(s.instances.unwrap().len(), 1);
    }

    #[test]
    fn keypoints_inside_image() {
        let spec = DatasetSpec::default();
        for seed in 0..20 {
            let s = generate_scene(&spec, seed).unwrap();
            for inst in s.instances.unwrap() {
                for [r, c] in inst.keypoints {
                    assert!(r >= 0.0 && r <= spec.image_height as Real - 1.0);
                    assert!(c >= 0.0 && c <= spec.image_width as Real - 1.0);
                }
            }
        }
    }

    #[test]
    fn instance_count_histogram_is_uniform() {
        let spec = DatasetSpec {
            min_instances: 1,
            max_instances: 5,
            image_height: 96,
            image_width: 96,
            overlap_allowance: 0.5,
            ..DatasetSpec::default()
        };
        let n = 1000;
        let mut counts = [0usize; 5];
        for seed in 0..n {
            let s = generate_scene(&spec, seed).unwrap();
            counts[s.instances.unwrap().len() - 1] += 1;
        }
        // binomial 3-sigma bounds around n/5
        let p = 0.2;
        let sigma = (n as Real * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as Real - n as Real * p).abs() <= 3.0 * sigma,
                "histogram {counts:?}"
            );
        }
    }

    #[test]
    fn overlay_translates_keypoints_exactly() {
        let spec = DatasetSpec {
            min_instances: 1,
            max_instances: 1,
            ..DatasetSpec::default()
        };
        let scene = generate_scene(&spec, 1).unwrap();
        let crop = crop_instance(&scene, 0, 2).unwrap();
        let background = Tensor::zeros(&[64, 64, 1]);
        let out = overlay_augment(&[crop.clone()], &background, 1, 9).unwrap();
        let insts = out.instances.unwrap();
        assert_eq!(insts.len(), 1);
        // recover the offset from the first keypoint and check the rest
        let dr = insts[0].keypoints[0][0] - crop.instance.keypoints[0][0];
        let dc = insts[0].keypoints[0][1] - crop.instance.keypoints[0][1];
        assert_eq!(dr.fract(), 0.0);
        assert_eq!(dc.fract(), 0.0);
        for (a, b) in insts[0].keypoints.iter().zip(&crop.instance.keypoints) {
            assert_eq!(a[0] - b[0], dr);
            assert_eq!(a[1] - b[1], dc);
        }
    }

    #[test]
    fn overlay_produces_n_instances() {
        let spec = DatasetSpec {
            min_instances: 1,
            max_instances: 1,
            image_height: 96,
            image_width: 96,
            min_scale: 4.0,
            max_scale: 5.0,
            ..DatasetSpec::default()
        };
        let crops: Vec<Crop> = (0..12)
            .map(|s| crop_instance(&generate_scene(&spec, s).unwrap(), 0, 2).unwrap())
            .collect();
        let background = generate_scene(&spec, 99).unwrap().image;
        let out = overlay_augment(&crops, &background, 10, 1).unwrap();
        assert_eq!(out.instances.unwrap().len(), 10);
        // deterministic under the same seed
        let again = overlay_augment(&crops, &background, 10, 1).unwrap();
        assert_eq!(out.image.data(), again.image.data());
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let spec = DatasetSpec {
            n_labeled: 5,
            n_unlabeled: 0,
            n_test: 8,
            labeled_pool: 45,
            ..DatasetSpec::default()
        };
        let s = make_splits(&spec).unwrap();
        assert_eq!(s.labeled.len(), 5);
        assert_eq!(s.unlabeled.len(), 40);
        assert_eq!(s.test.len(), 8);
        assert!(s.labeled.iter().all(|sc| sc.labeled()));
        assert!(s.unlabeled.iter().all(|sc| !sc.labeled()));
        assert!(s.test.iter().all(|sc| sc.labeled()));
        let mut ids: Vec<u64> = s
            .labeled
            .iter()
            .chain(&s.unlabeled)
            .chain(&s.test)
            .map(|sc| sc.id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 53);
    }

    #[test]
    fn splits_deterministic_in_seed() {
        let spec = DatasetSpec {
            split_seed: 11,
            ..DatasetSpec::default()
        };
        let a = make_splits(&spec).unwrap();
        let b = make_splits(&spec).unwrap();
        let ids = |s: &SplitSet| s.labeled.iter().map(|sc| sc.id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let c = make_splits(&DatasetSpec {
            split_seed: 12,
            ..DatasetSpec::default()
        })
        .unwrap();
        assert_ne!(ids(&a), ids(&c));
    }
}
