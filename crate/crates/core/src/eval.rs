//! Object Keypoint Similarity and COCO-style average precision.
//!
//! OKS between a prediction and a ground-truth instance is the mean over the
//! ground truth's visible keypoints of `exp(-d² / (2·scale²·σ²·f_k²))`,
//! with `scale²` the pseudo-box area of the ground truth (floored at 1).
//! AP averages 101-point interpolated precision over the OKS thresholds
//! 0.50, 0.55, …, 0.95.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::engine::Real;
use crate::error::{Error, Result};
use crate::fusion::Prediction;
use crate::targets::{pseudo_box, Instance};

/// OKS tolerance parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OksParams {
    /// Annotator-uncertainty variance; larger values are more forgiving.
    pub sigma2: Real,
    /// Optional per-keypoint tolerance factors (default all 1).
    pub per_keypoint: Option<Vec<Real>>,
}

impl OksParams {
    pub fn new(sigma2: Real) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::Invalid(format!("sigma2 {sigma2} must be > 0")));
        }
        Ok(OksParams {
            sigma2,
            per_keypoint: None,
        })
    }

    pub fn with_factors(mut self, factors: Vec<Real>) -> Result<Self> {
        if factors.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Invalid("per-keypoint factors must be > 0".into()));
        }
        self.per_keypoint = Some(factors);
        Ok(self)
    }

    fn factor(&self, k: usize) -> Real {
        self.per_keypoint
            .as_ref()
            .and_then(|f| f.get(k).copied())
            .unwrap_or(1.0)
    }
}

/// The OKS thresholds of the COCO convention.
pub fn oks_thresholds() -> [Real; 10] {
    core::array::from_fn(|i| 0.5 + 0.05 * i as Real)
}

/// Instance scale for OKS: square root of the pseudo-box area, floored at 1.
pub fn instance_scale(gt: &Instance) -> Result<Real> {
    // the box is unclamped here: the scale is a property of the annotation
    let b = pseudo_box(gt, 0.0, usize::MAX, usize::MAX)?;
    Ok(b.area().sqrt().max(1.0))
}

/// Object keypoint similarity in `[0, 1]`; only keypoints visible in the
/// ground truth contribute.
pub fn oks(pred: &Instance, gt: &Instance, params: &OksParams, scale: Real) -> Result<Real> {
    if !(scale > 0.0) {
        return Err(Error::Invalid(format!("scale {scale} must be > 0")));
    }
    if pred.num_parts() != gt.num_parts() {
        return Err(Error::Shape(format!(
            "prediction has {} parts, ground truth {}",
            pred.num_parts(),
            gt.num_parts()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..gt.num_parts() {
        if let Some([gr, gc]) = gt.visible(k) {
            let [pr, pc] = pred.keypoints[k];
            let d2 = (pr - gr) * (pr - gr) + (pc - gc) * (pc - gc);
            let f = params.factor(k);
            total += (-d2 / (2.0 * scale * scale * params.sigma2 * f * f)).exp();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid(
            "oks against an instance with no visible keypoints".into(),
        ));
    }
    Ok(total / count as Real)
}

/// Greedy matching outcome for one frame at one threshold.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index, oks)` pairs.
    pub pairs: Vec<(usize, usize, Real)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// COCO-style greedy matching: predictions in descending score order each
/// take the unmatched ground truth with the highest OKS, if that OKS clears
/// the threshold. OKS ties go to the lowest ground-truth index.
pub fn match_instances(
    preds: &Prediction,
    gts: &[Instance],
    oks_threshold: Real,
    params: &OksParams,
) -> Result<MatchResult> {
    if !preds.is_sorted() {
        return Err(Error::Invalid(
            "predictions must be sorted by descending score".into(),
        ));
    }
    let scales: Vec<Real> = gts.iter().map(instance_scale).collect::<Result<_>>()?;
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for (pi, pred) in preds.instances.iter().enumerate() {
        let mut best: Option<(usize, Real)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let score = oks(pred, gt, params, scales[gi])?;
            if best.map_or(true, |(_, b)| score > b) {
                best = Some((gi, score));
            }
        }
        match best {
            Some((gi, score)) if score >= oks_threshold => {
                taken[gi] = true;
                result.pairs.push((pi, gi, score));
            }
            _ => result.unmatched_preds.push(pi),
        }
    }
    result.unmatched_gts = taken
        .iter()
        .enumerate()
        .filter(|(_, &t)| !t)
        .map(|(i, _)| i)
        .collect();
    Ok(result)
}

/// AP evaluation report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ApReport {
    /// Mean AP over the ten OKS thresholds.
    pub ap: Real,
    /// Per-threshold AP, aligned with [`oks_thresholds`].
    pub per_threshold: Vec<Real>,
    pub n_pred: usize,
    pub n_gt: usize,
}

/// COCO-style AP over a set of frames: per threshold, predictions are
/// matched per frame, pooled, sorted by score (ties broken by frame and
/// in-frame order for determinism), swept into a precision–recall curve,
/// and integrated with 101-point interpolation.
pub fn average_precision(
    frames: &[(Prediction, Vec<Instance>)],
    params: &OksParams,
) -> Result<ApReport> {
    let n_gt: usize = frames.iter().map(|(_, g)| g.len()).sum();
    let n_pred: usize = frames.iter().map(|(p, _)| p.len()).sum();
    if n_gt == 0 {
        return Err(Error::Invalid(
            "average precision is undefined without ground-truth instances".into(),
        ));
    }
    let mut per_threshold = Vec::with_capacity(10);
    for thr in oks_thresholds() {
        let mut dets: Vec<(Real, usize, usize, bool)> = Vec::with_capacity(n_pred);
        for (fi, (preds, gts)) in frames.iter().enumerate() {
            let matched = match_instances(preds, gts, thr, params)?;
            let mut tp = vec![false; preds.len()];
            for &(pi, _, _) in &matched.pairs {
                tp[pi] = true;
            }
            for (pi, &is_tp) in tp.iter().enumerate() {
                dets.push((preds.scores[pi], fi, pi, is_tp));
            }
        }
        dets.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut precisions = Vec::with_capacity(dets.len());
        let mut recalls = Vec::with_capacity(dets.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(_, _, _, is_tp) in &dets {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            precisions.push(tp as Real / (tp + fp) as Real);
            recalls.push(tp as Real / n_gt as Real);
        }
        // running max of precision from the right (interpolated precision)
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            if precisions[i + 1] > precisions[i] {
                precisions[i] = precisions[i + 1];
            }
        }
        let mut ap = 0.0;
        let mut idx = 0usize;
        for s in 0..=100 {
            let r = s as Real / 100.0;
            while idx < recalls.len() && recalls[idx] < r {
                idx += 1;
            }
            if idx < precisions.len() {
                ap += precisions[idx];
            }
        }
        per_threshold.push(ap / 101.0);
    }
    let ap = per_threshold.iter().sum::<Real>() / per_threshold.len() as Real;
    Ok(ApReport {
        ap,
        per_threshold,
        n_pred,
        n_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(kps: &[[Real; 2]]) -> Instance {
        Instance::new(kps.to_vec())
    }

    fn pred(instances: Vec<Instance>, scores: Vec<Real>) -> Prediction {
        Prediction { instances, scores }
    }

    #[test]
    fn oks_perfect_is_one() {
        let gt = inst(&[[1.0, 2.0], [5.0, 4.0]]);
        let params = OksParams::new(1.0).unwrap();
        let s = instance_scale(&gt).unwrap();
        assert_eq!(oks(&gt.clone(), &gt, &params, s).unwrap(), 1.0);
    }

    #[test]
    fn oks_single_keypoint_e_inverse() {
        // d² = 2·scale²·σ² -> OKS = e^{-1}
        let gt = inst(&[[0.0, 0.0]]);
        let params = OksParams::new(1.0).unwrap();
        let scale = 3.0;
        let d = (2.0 * scale * scale).sqrt();
        let p = inst(&[[d, 0.0]]);
        let got = oks(&p, &gt, &params, scale).unwrap();
        assert!((got - (-1.0 as Real).exp()).abs() < 1e-12);
    }

    #[test]
    fn oks_decreases_with_smaller_sigma() {
        let gt = inst(&[[0.0, 0.0]]);
        let p = inst(&[[1.0, 1.0]]);
        let hi = oks(&p, &gt, &OksParams::new(1.0).unwrap(), 2.0).unwrap();
        let lo = oks(&p, &gt, &OksParams::new(0.5).unwrap(), 2.0).unwrap();
        assert!(lo < hi);
    }

    #[test]
    fn oks_translation_invariant() {
        let gt = inst(&[[1.0, 1.0], [3.0, 2.0]]);
        let p = inst(&[[1.5, 0.5], [3.5, 2.5]]);
        let params = OksParams::new(1.0).unwrap();
        let a = oks(&p, &gt, &params, 2.0).unwrap();
        let shift = |i: &Instance| {
            inst(&i
                .keypoints
                .iter()
                .map(|&[r, c]| [r + 10.0, c - 7.0])
                .collect::<Vec<_>>())
        };
        let b = oks(&shift(&p), &shift(&gt), &params, 2.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oks_scale_invariant_with_scaled_scale() {
        let gt = inst(&[[1.0, 1.0], [3.0, 2.0]]);
        let p = inst(&[[1.5, 0.5], [3.5, 2.5]]);
        let params = OksParams::new(1.0).unwrap();
        let a = oks(&p, &gt, &params, 2.0).unwrap();
        let c = 4.0;
        let grow = |i: &Instance| {
            inst(&i
                .keypoints
                .iter()
                .map(|&[r, cc]| [r * c, cc * c])
                .collect::<Vec<_>>())
        };
        let b = oks(&grow(&p), &grow(&gt), &params, 2.0 * c).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn matching_perfect_one_to_one() {
        let gts = vec![inst(&[[1.0, 1.0]]), inst(&[[8.0, 8.0]])];
        let preds = pred(gts.clone(), vec![0.9, 0.8]);
        let params = OksParams::new(1.0).unwrap();
        let m = match_instances(&preds, &gts, 0.5, &params).unwrap();
        assert_eq!(m.pairs.len(), 2);
        assert!(m.unmatched_preds.is_empty());
        assert!(m.unmatched_gts.is_empty());
    }

    #[test]
    fn matching_extra_pred_is_false_positive() {
        let gts = vec![inst(&[[1.0, 1.0]])];
        let preds = pred(
            vec![inst(&[[1.0, 1.0]]), inst(&[[1.2, 1.2]])],
            vec![0.9, 0.8],
        );
        let params = OksParams::new(1.0).unwrap();
        let m = match_instances(&preds, &gts, 0.5, &params).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.unmatched_preds, vec![1]);
    }

    #[test]
    fn matching_requires_sorted_scores() {
        let gts = vec![inst(&[[1.0, 1.0]])];
        let preds = pred(
            vec![inst(&[[1.0, 1.0]]), inst(&[[2.0, 2.0]])],
            vec![0.5, 0.9],
        );
        assert!(match_instances(&preds, &gts, 0.5, &OksParams::new(1.0).unwrap()).is_err());
    }

    #[test]
    fn ap_perfect_predictions() {
        let params = OksParams::new(1.0).unwrap();
        let frames: Vec<(Prediction, Vec<Instance>)> = (0..3)
            .map(|i| {
                let gts = vec![
                    inst(&[[1.0 + i as Real, 1.0]]),
                    inst(&[[10.0, 10.0 + i as Real]]),
                ];
                (pred(gts.clone(), vec![0.9, 0.85]), gts)
            })
            .collect();
        let r = average_precision(&frames, &params).unwrap();
        assert_eq!(r.ap, 1.0);
        assert!(r.per_threshold.iter().all(|&a| a == 1.0));
        assert_eq!(r.n_gt, 6);
    }

    #[test]
    fn ap_zero_without_predictions() {
        let params = OksParams::new(1.0).unwrap();
        let frames = vec![(Prediction::default(), vec![inst(&[[1.0, 1.0]])])];
        let r = average_precision(&frames, &params).unwrap();
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn ap_without_ground_truth_is_error() {
        let params = OksParams::new(1.0).unwrap();
        let frames = vec![(Prediction::default(), vec![])];
        assert!(average_precision(&frames, &params).is_err());
    }

    #[test]
    fn ap_is_monotone_in_threshold() {
        // one precise prediction, one sloppy prediction
        let params = OksParams::new(1.0).unwrap();
        let gts = vec![inst(&[[2.0, 2.0]]), inst(&[[10.0, 10.0]])];
        let preds = pred(
            vec![inst(&[[2.0, 2.0]]), inst(&[[11.1, 11.2]])],
            vec![0.9, 0.8],
        );
        let r = average_precision(&[(preds, gts)], &params).unwrap();
        for pair in r.per_threshold.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }
}
