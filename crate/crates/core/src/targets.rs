//! Supervision tensors built from keypoint annotations.
//!
//! All coordinates here are `(row, col)` in output-grid units, zero-based.
//! Scaling from image pixels to the grid happens once at data ingestion.
//!
//! Three tensors drive training: the keypoint target map `G` (binary windows
//! around each keypoint), the box target map `U` (binary rasterized pseudo
//! bounding boxes, replicated across parts), and the vector field `P`
//! (per-cell offsets to the nearest keypoint of each part). Pseudo-keypoint
//! targets reuse the same windowing with a per-cell confidence map.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};
use crate::fusion::PseudoLabels;

/// One annotated animal: `K` ordered keypoints plus visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub keypoints: Vec<[Real; 2]>,
    pub visibility: Vec<bool>,
}

impl Instance {
    /// Instance with every keypoint visible.
    pub fn new(keypoints: Vec<[Real; 2]>) -> Self {
        let visibility = vec![true; keypoints.len()];
        Instance {
            keypoints,
            visibility,
        }
    }

    pub fn with_visibility(keypoints: Vec<[Real; 2]>, visibility: Vec<bool>) -> Result<Self> {
        if keypoints.len() != visibility.len() {
            return Err(Error::Invalid(format!(
                "{} keypoints but {} visibility flags",
                keypoints.len(),
                visibility.len()
            )));
        }
        Ok(Instance {
            keypoints,
            visibility,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.keypoints.len()
    }

    /// Coordinates of part `k` if visible.
    pub fn visible(&self, k: usize) -> Option<[Real; 2]> {
        (self.visibility.get(k) == Some(&true)).then(|| self.keypoints[k])
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }
}

/// Axis-aligned pseudo bounding box (minimum enclosing rectangle of an
/// instance's visible keypoints), in grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoBox {
    pub row_min: Real,
    pub col_min: Real,
    pub row_max: Real,
    pub col_max: Real,
}

impl PseudoBox {
    pub fn height(&self) -> Real {
        self.row_max - self.row_min
    }

    pub fn width(&self) -> Real {
        self.col_max - self.col_min
    }

    pub fn area(&self) -> Real {
        self.height() * self.width()
    }

    pub fn diagonal(&self) -> Real {
        (self.height() * self.height() + self.width() * self.width()).sqrt()
    }
}

/// The supervision triple for a batch: `g`/`u` are `[N,H,W,K]` binary maps,
/// `p` is the `[N,H,W,K,2]` vector field.
#[derive(Debug, Clone)]
pub struct TargetMaps {
    pub g: Tensor,
    pub u: Tensor,
    pub p: Tensor,
}

/// Rounds to the nearest integer with ties toward negative infinity.
pub fn round_half_down(x: Real) -> isize {
    (x - 0.5).ceil() as isize
}

fn clamp_cell(c: isize, extent: usize) -> usize {
    c.max(0).min(extent as isize - 1) as usize
}

fn check_parts(instances: &[Instance], k: usize) -> Result<()> {
    for (i, inst) in instances.iter().enumerate() {
        if inst.num_parts() != k {
            return Err(Error::Shape(format!(
                "instance {i} has {} parts, expected {k}",
                inst.num_parts()
            )));
        }
    }
    Ok(())
}

/// `M[i,j] = (i, j)`: zero-based grid coordinates, component order (row, col).
pub fn grid_coordinates(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(i as Real);
            data.push(j as Real);
        }
    }
    Tensor::new(&[h, w, 2], data).expect("valid by construction")
}

fn stamp_window(
    map: &mut [Real],
    mut weights: Option<(&mut [Real], Real)>,
    h: usize,
    w: usize,
    k: usize,
    part: usize,
    center: [Real; 2],
    halfwidth: usize,
) {
    let cr = round_half_down(center[0]);
    let cc = round_half_down(center[1]);
    let hw = halfwidth as isize;
    let r0 = clamp_cell(cr - hw, h);
    let r1 = clamp_cell(cr + hw, h);
    let c0 = clamp_cell(cc - hw, w);
    let c1 = clamp_cell(cc + hw, w);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let idx = (r * w + c) * k + part;
            map[idx] = 1.0;
            if let Some((wm, conf)) = weights.as_mut() {
                if *conf > wm[idx] {
                    wm[idx] = *conf;
                }
            }
        }
    }
}

/// Binary `[H,W,K]` map with a `(2w+1)²` square of ones around every visible
/// keypoint (rounded to the nearest cell, clipped at borders). Overlapping
/// windows merge by OR.
pub fn build_keypoint_target(
    instances: &[Instance],
    h: usize,
    w: usize,
    k: usize,
    window_halfwidth: usize,
) -> Result<Tensor> {
    check_parts(instances, k)?;
    let mut data = vec![0.0; h * w * k];
    for inst in instances {
        for part in 0..k {
            if let Some(kp) = inst.visible(part) {
                stamp_window(&mut data, None, h, w, k, part, kp, window_halfwidth);
            }
        }
    }
    Tensor::new(&[h, w, k], data)
}

/// Tight box over the visible keypoints, expanded by `margin` and clamped to
/// the grid. Errors when nothing is visible.
pub fn pseudo_box(instance: &Instance, margin: Real, h: usize, w: usize) -> Result<PseudoBox> {
    let mut any = false;
    let (mut rmin, mut rmax) = (Real::INFINITY, Real::NEG_INFINITY);
    let (mut cmin, mut cmax) = (Real::INFINITY, Real::NEG_INFINITY);
    for part in 0..instance.num_parts() {
        if let Some([r, c]) = instance.visible(part) {
            any = true;
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            cmin = cmin.min(c);
            cmax = cmax.max(c);
        }
    }
    if !any {
        return Err(Error::Invalid(
            "pseudo_box of an instance with no visible keypoints".into(),
        ));
    }
    let clamp = |v: Real, hi: usize| v.max(0.0).min(hi as Real - 1.0);
    Ok(PseudoBox {
        row_min: clamp(rmin - margin, h),
        col_min: clamp(cmin - margin, w),
        row_max: clamp(rmax + margin, h),
        col_max: clamp(cmax + margin, w),
    })
}

/// Binary `[H,W,K]` map with ones inside every instance's pseudo box,
/// replicated identically across the `K` channels; instances merge by OR.
pub fn build_box_target(
    instances: &[Instance],
    h: usize,
    w: usize,
    k: usize,
    margin: Real,
) -> Result<Tensor> {
    check_parts(instances, k)?;
    let mut data = vec![0.0; h * w * k];
    for inst in instances {
        if inst.visible_count() == 0 {
            continue;
        }
        let b = pseudo_box(inst, margin, h, w)?;
        let r0 = clamp_cell(round_half_down(b.row_min), h);
        let r1 = clamp_cell(round_half_down(b.row_max), h);
        let c0 = clamp_cell(round_half_down(b.col_min), w);
        let c1 = clamp_cell(round_half_down(b.col_max), w);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let base = (r * w + c) * k;
                data[base..base + k].iter_mut().for_each(|v| *v = 1.0);
            }
        }
    }
    Tensor::new(&[h, w, k], data)
}

/// `[H,W,K,2]` field of vectors from each cell to the nearest visible
/// keypoint of each part (Euclidean; ties go to the earlier instance in
/// annotation order). The per-part flags mark parts with at least one
/// visible keypoint anywhere; absent parts stay zero.
pub fn build_vector_field(
    instances: &[Instance],
    h: usize,
    w: usize,
    k: usize,
) -> Result<(Tensor, Vec<bool>)> {
    check_parts(instances, k)?;
    let mut data = vec![0.0; h * w * k * 2];
    let mut present = vec![false; k];
    for part in 0..k {
        let kps: Vec<[Real; 2]> = instances.iter().filter_map(|i| i.visible(part)).collect();
        if kps.is_empty() {
            continue;
        }
        present[part] = true;
        for r in 0..h {
            for c in 0..w {
                let (mut best, mut best_d2) = ([0.0, 0.0], Real::INFINITY);
                for kp in &kps {
                    let dr = kp[0] - r as Real;
                    let dc = kp[1] - c as Real;
                    let d2 = dr * dr + dc * dc;
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best = [dr, dc];
                    }
                }
                let idx = ((r * w + c) * k + part) * 2;
                data[idx] = best[0];
                data[idx + 1] = best[1];
            }
        }
    }
    Ok((Tensor::new(&[h, w, k, 2], data)?, present))
}

/// Target map and confidence-weight map for pseudo keypoints.
///
/// Windows are stamped exactly as in [`build_keypoint_target`]; the weight
/// map carries the confidence of the pseudo keypoint owning each window cell
/// (overlaps keep the maximum). Cells outside every window keep weight 0,
/// which the score-value-weighted focal loss reads as a full-strength
/// negative.
pub fn build_pseudo_target(
    pseudo: &PseudoLabels,
    h: usize,
    w: usize,
    k: usize,
    window_halfwidth: usize,
) -> Result<(Tensor, Tensor)> {
    let mut map = vec![0.0; h * w * k];
    let mut weights = vec![0.0; h * w * k];
    for t in 0..pseudo.len() {
        let v = pseudo.confidences[t];
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!(
                "pseudo confidence {v} outside [0,1]"
            )));
        }
        let part = pseudo.indices[t].2;
        if part >= k {
            return Err(Error::Invalid(format!(
                "pseudo part index {part} out of range for K={k}"
            )));
        }
        let coord = pseudo.coords[t];
        let center = [
            coord[0].max(0.0).min(h as Real - 1.0),
            coord[1].max(0.0).min(w as Real - 1.0),
        ];
        stamp_window(
            &mut map,
            Some((&mut weights, v)),
            h,
            w,
            k,
            part,
            center,
            window_halfwidth,
        );
    }
    Ok((
        Tensor::new(&[h, w, k], map)?,
        Tensor::new(&[h, w, k], weights)?,
    ))
}

/// Builds the full supervision triple for a batch of annotated frames.
pub fn build_targets(
    frames: &[Vec<Instance>],
    h: usize,
    w: usize,
    k: usize,
    window_halfwidth: usize,
    box_margin: Real,
) -> Result<TargetMaps> {
    let n = frames.len();
    if n == 0 {
        return Err(Error::Invalid("empty batch of annotated frames".into()));
    }
    let mut g = Vec::with_capacity(n * h * w * k);
    let mut u = Vec::with_capacity(n * h * w * k);
    let mut p = Vec::with_capacity(n * h * w * k * 2);
    for instances in frames {
        g.extend_from_slice(build_keypoint_target(instances, h, w, k, window_halfwidth)?.data());
        u.extend_from_slice(build_box_target(instances, h, w, k, box_margin)?.data());
        p.extend_from_slice(build_vector_field(instances, h, w, k)?.0.data());
    }
    Ok(TargetMaps {
        g: Tensor::new(&[n, h, w, k], g)?,
        u: Tensor::new(&[n, h, w, k], u)?,
        p: Tensor::new(&[n, h, w, k, 2], p)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kp: [Real; 2]) -> Instance {
        Instance::new(vec![kp])
    }

    #[test]
    fn grid_is_row_col() {
        let m = grid_coordinates(1, 1);
        assert_eq!(m.data(), &[0.0, 0.0]);
        let m = grid_coordinates(4, 5);
        assert_eq!(m.at(&[2, 3, 0]), 2.0);
        assert_eq!(m.at(&[2, 3, 1]), 3.0);
        // sum over a 2x2 grid -> (2, 2)
        let m = grid_coordinates(2, 2);
        let (r, c) = m
            .data()
            .chunks(2)
            .fold((0.0, 0.0), |(r, c), p| (r + p[0], c + p[1]));
        assert_eq!((r, c), (2.0, 2.0));
    }

    #[test]
    fn keypoint_window_3x3() {
        let g = build_keypoint_target(&[single([3.0, 3.0])], 7, 7, 1, 1).unwrap();
        let ones: Vec<_> = (0..7 * 7)
            .filter(|i| g.data()[*i] == 1.0)
            .map(|i| (i / 7, i % 7))
            .collect();
        assert_eq!(ones.len(), 9);
        assert!(ones
            .iter()
            .all(|&(r, c)| (2..=4).contains(&r) && (2..=4).contains(&c)));
    }

    #[test]
    fn keypoint_window_zero_width() {
        let g = build_keypoint_target(&[single([2.4, 1.6])], 5, 5, 1, 0).unwrap();
        assert_eq!(g.data().iter().sum::<Real>(), 1.0);
        assert_eq!(g.at(&[2, 2, 0]), 1.0);
    }

    #[test]
    fn overlapping_windows_merge() {
        // Squares around (1,1) and (2,2) share 4 cells: 9 + 9 - 4 = 14 ones.
        let insts = [single([1.0, 1.0]), single([2.0, 2.0])];
        let g = build_keypoint_target(&insts, 5, 5, 1, 1).unwrap();
        assert_eq!(g.data().iter().sum::<Real>(), 14.0);
    }

    #[test]
    fn rounding_ties_go_down() {
        assert_eq!(round_half_down(2.5), 2);
        assert_eq!(round_half_down(2.4), 2);
        assert_eq!(round_half_down(2.6), 3);
        assert_eq!(round_half_down(-1.5), -2);
    }

    #[test]
    fn pseudo_box_min_max() {
        let inst = Instance::new(vec![[1.0, 1.0], [3.0, 4.0]]);
        let b = pseudo_box(&inst, 0.0, 10, 10).unwrap();
        assert_eq!(
            (b.row_min, b.row_max, b.col_min, b.col_max),
            (1.0, 3.0, 1.0, 4.0)
        );

        let b = pseudo_box(&single([2.0, 2.0]), 0.0, 10, 10).unwrap();
        assert_eq!(b.area(), 0.0);

        let inst = Instance::new(vec![[0.0, 5.0], [4.0, 1.0], [2.0, 3.0]]);
        let b = pseudo_box(&inst, 0.0, 10, 10).unwrap();
        assert_eq!(
            (b.row_min, b.row_max, b.col_min, b.col_max),
            (0.0, 4.0, 1.0, 5.0)
        );
    }

    #[test]
    fn pseudo_box_needs_visible_keypoints() {
        let inst = Instance::with_visibility(vec![[1.0, 1.0]], vec![false]).unwrap();
        assert!(pseudo_box(&inst, 0.0, 5, 5).is_err());
    }

    #[test]
    fn box_target_counts() {
        assert_eq!(
            build_box_target(&[], 5, 5, 2, 0.0)
                .unwrap()
                .data()
                .iter()
                .sum::<Real>(),
            0.0
        );
        // box rows [1,3] x cols [1,4] -> 3*4 = 12 ones per channel
        let inst = Instance::new(vec![[1.0, 1.0], [3.0, 4.0]]);
        let u = build_box_target(&[inst], 5, 5, 2, 0.0).unwrap();
        let per_channel: Real = (0..5 * 5).map(|i| u.data()[i * 2]).sum();
        assert_eq!(per_channel, 12.0);
        assert_eq!(u.data().iter().sum::<Real>(), 24.0);

        // two disjoint boxes: areas add
        let a = Instance::new(vec![[0.0, 0.0], [1.0, 1.0]]);
        let b = Instance::new(vec![[3.0, 3.0], [4.0, 4.0]]);
        let u = build_box_target(&[a, b], 6, 6, 2, 0.0).unwrap();
        let per_channel: Real = (0..6 * 6).map(|i| u.data()[i * 2]).sum();
        assert_eq!(per_channel, 8.0);
    }

    #[test]
    fn vector_field_points_at_keypoints() {
        let (p, present) = build_vector_field(&[single([2.0, 2.0])], 3, 3, 1).unwrap();
        assert_eq!(present, vec![true]);
        assert_eq!(p.at(&[0, 0, 0, 0]), 2.0);
        assert_eq!(p.at(&[0, 0, 0, 1]), 2.0);
        assert_eq!(p.at(&[2, 2, 0, 0]), 0.0);
        assert_eq!(p.at(&[2, 2, 0, 1]), 0.0);
    }

    #[test]
    fn vector_field_tie_takes_earlier_instance() {
        let insts = [single([0.0, 0.0]), single([2.0, 2.0])];
        let (p, _) = build_vector_field(&insts, 3, 3, 1).unwrap();
        // (1,1) is equidistant; earlier instance wins -> vector (-1,-1)
        assert_eq!(p.at(&[1, 1, 0, 0]), -1.0);
        assert_eq!(p.at(&[1, 1, 0, 1]), -1.0);
    }

    #[test]
    fn vector_field_missing_part_flagged() {
        let inst =
            Instance::with_visibility(vec![[1.0, 1.0], [2.0, 2.0]], vec![true, false]).unwrap();
        let (p, present) = build_vector_field(&[inst], 4, 4, 2).unwrap();
        assert_eq!(present, vec![true, false]);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(p.at(&[r, c, 1, 0]), 0.0);
                assert_eq!(p.at(&[r, c, 1, 1]), 0.0);
            }
        }
    }

    #[test]
    fn pseudo_target_matches_keypoint_target_at_full_confidence() {
        let pseudo = PseudoLabels {
            indices: vec![(3, 3, 0)],
            confidences: vec![1.0],
            coords: vec![[3.0, 3.0]],
        };
        let (gt, weights) = build_pseudo_target(&pseudo, 7, 7, 1, 1).unwrap();
        let g = build_keypoint_target(&[single([3.0, 3.0])], 7, 7, 1, 1).unwrap();
        assert_eq!(gt.data(), g.data());
        assert_eq!(weights.data(), g.data());
    }

    #[test]
    fn pseudo_target_overlap_keeps_max_confidence() {
        let pseudo = PseudoLabels {
            indices: vec![(1, 1, 0), (2, 2, 0)],
            confidences: vec![0.3, 0.9],
            coords: vec![[1.0, 1.0], [2.0, 2.0]],
        };
        let (_, weights) = build_pseudo_target(&pseudo, 5, 5, 1, 1).unwrap();
        // overlap cells (rows 1..2 x cols 1..2) carry 0.9
        for &(r, c) in &[(1usize, 1usize), (1, 2), (2, 1), (2, 2)] {
            assert_eq!(weights.at(&[r, c, 0]), 0.9);
        }
        assert_eq!(weights.at(&[0, 0, 0]), 0.3);
        assert_eq!(weights.at(&[3, 3, 0]), 0.9);
        assert_eq!(weights.at(&[4, 4, 0]), 0.0);
    }

    #[test]
    fn pseudo_confidence_out_of_range_rejected() {
        let pseudo = PseudoLabels {
            indices: vec![(0, 0, 0)],
            confidences: vec![1.5],
            coords: vec![[0.0, 0.0]],
        };
        assert!(build_pseudo_target(&pseudo, 3, 3, 1, 1).is_err());
    }
}
