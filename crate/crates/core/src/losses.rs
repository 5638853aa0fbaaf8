//! Loss terms and training objectives.
//!
//! The heatmap and box branches train with a focal loss on sigmoid
//! probabilities; the vector-field branch trains with a box-masked MSE.
//! Pseudo keypoints enter through a score-value-weighted focal loss whose
//! per-cell weight is the pseudo confidence: positives count proportionally
//! to `v`, negatives to `1 - v`. The semi-supervised objective is
//! `L_a + L_b + L_d + alpha * L_fl + beta * L_fu`.
//!
//! Reductions are means: over all elements for the focal losses, over the
//! masked-in elements for the vector-field loss. This keeps `alpha` and
//! `beta` comparable across grid sizes.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::engine::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::PseudoLabels;
use crate::targets::{build_pseudo_target, TargetMaps};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: Real = 1e-12;

/// Hyperparameters of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    /// Weight of the fusion loss on labeled frames.
    pub alpha: Real,
    /// Weight of the fusion loss on unlabeled frames.
    pub beta: Real,
    /// Positive/negative balance of the focal loss.
    pub kappa: Real,
    /// Focusing exponent of the focal loss.
    pub gamma: Real,
    /// Hard threshold on box confidences for pseudo selection.
    pub delta: Real,
}

impl LossWeights {
    /// The published defaults: alpha 0.01, beta 0.1, kappa 0.25, gamma 2,
    /// delta 0.05.
    pub fn standard() -> Self {
        LossWeights {
            alpha: 0.01,
            beta: 0.1,
            kappa: 0.25,
            gamma: 2.0,
            delta: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Invalid(
                "alpha, beta, gamma must be non-negative".into(),
            ));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Invalid(format!("kappa {} not in (0,1)", self.kappa)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Invalid(format!("delta {} not in (0,1)", self.delta)));
        }
        Ok(())
    }
}

/// Scalar values of every term of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub la: Real,
    pub lb: Real,
    pub ld: Real,
    pub lfl: Real,
    pub lfu: Real,
    pub total: Real,
}

/// The three head outputs for a batch, still on the tape.
#[derive(Clone)]
pub struct BranchVars {
    /// Keypoint heatmap logits `[N,H,W,K]`.
    pub a: Var,
    /// Box heatmap logits `[N,H,W,K]`.
    pub b: Var,
    /// Vector field `[N,H,W,K,2]`.
    pub d: Var,
}

/// An objective with live gradient information.
pub struct Objective {
    pub la: Var,
    pub lb: Var,
    pub ld: Var,
    pub lfl: Option<Var>,
    pub lfu: Option<Var>,
    pub total: Var,
    weights: LossWeights,
}

impl Objective {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let lfl = self.lfl.as_ref().map_or(Ok(0.0), |v| v.scalar_value())?;
        let lfu = self.lfu.as_ref().map_or(Ok(0.0), |v| v.scalar_value())?;
        Ok(LossBreakdown {
            la: self.la.scalar_value()?,
            lb: self.lb.scalar_value()?,
            ld: self.ld.scalar_value()?,
            lfl,
            lfu,
            total: self.total.scalar_value()?,
        })
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }
}

fn check_same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Score-value-weighted focal loss, mean-reduced:
/// `mean( -v·kappa·(1-p)^gamma·log p - (1-v)·(1-kappa)·p^gamma·log(1-p) )`.
///
/// `v` is treated as a constant; gradients flow through `p` only.
pub fn weighted_focal_loss(p: &Var, v: &Tensor, kappa: Real, gamma: Real) -> Result<Var> {
    check_same_shape(&p.shape(), v.shape(), "weighted focal loss")?;
    if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Invalid("focal weights outside [0,1]".into()));
    }
    let tape = p.tape();
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_p = pc.mul_scalar(-1.0)?.add_scalar(1.0)?;
    let pos = one_minus_p
        .pow_scalar(gamma)?
        .mul(&pc.ln()?)?
        .mul_scalar(-kappa)?;
    let neg = pc
        .pow_scalar(gamma)?
        .mul(&one_minus_p.ln()?)?
        .mul_scalar(-(1.0 - kappa))?;
    let vw = tape.constant(v)?;
    let vn = tape.constant(&Tensor::new(
        v.shape(),
        v.data().iter().map(|x| 1.0 - x).collect(),
    )?)?;
    pos.mul(&vw)?.add(&neg.mul(&vn)?)?.mean_all()
}

/// Binary-target focal loss. `y` must contain only 0 and 1; the result is
/// bit-identical to [`weighted_focal_loss`] with `v = y`.
pub fn focal_loss(p: &Var, y: &Tensor, kappa: Real, gamma: Real) -> Result<Var> {
    if y.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Invalid("focal targets must be binary".into()));
    }
    weighted_focal_loss(p, y, kappa, gamma)
}

/// Heatmap-branch loss: focal loss of `sigmoid(A)` against `G`.
pub fn loss_a(a_logits: &Var, g: &Tensor, kappa: Real, gamma: Real) -> Result<Var> {
    focal_loss(&a_logits.sigmoid()?, g, kappa, gamma)
}

/// Box-branch loss: focal loss of `sigmoid(B)` against `U`. The sigmoid is
/// applied for the same reason as in [`loss_a`]: the focal loss needs
/// probabilities.
pub fn loss_b(b_logits: &Var, u: &Tensor, kappa: Real, gamma: Real) -> Result<Var> {
    focal_loss(&b_logits.sigmoid()?, u, kappa, gamma)
}

/// Vector-field loss: MSE between `D` and `P` over box cells only,
/// normalized by the number of masked-in elements. Values of `D` outside
/// the boxes never contribute.
pub fn loss_d(d: &Var, p: &Tensor, u: &Tensor) -> Result<Var> {
    let d_shape = d.shape();
    check_same_shape(&d_shape, p.shape(), "vector-field loss")?;
    if d_shape.last() != Some(&2) {
        return Err(Error::Shape(format!(
            "vector field must end in extent 2, got {d_shape:?}"
        )));
    }
    if u.shape() != &d_shape[..d_shape.len() - 1] {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match field {:?}",
            u.shape(),
            d_shape
        )));
    }
    let tape = d.tape();
    let ones = u.data().iter().filter(|&&x| x == 1.0).count();
    if ones == 0 {
        log::warn!("vector-field loss over an empty mask; returning 0");
        return tape.scalar(0.0);
    }
    // broadcast the mask across the trailing 2-extent
    let mut mask = Vec::with_capacity(u.numel() * 2);
    for &m in u.data() {
        mask.push(m);
        mask.push(m);
    }
    let count = (ones * 2) as Real;
    let diff = d.sub(&tape.constant(p)?)?;
    diff.mul(&diff)?
        .mul(&tape.constant(&Tensor::new(&d_shape, mask)?)?)?
        .sum_all()?
        .mul_scalar(1.0 / count)
}

/// `L_supervised = L_a + L_b + L_d` over a labeled batch.
pub fn supervised_objective(
    outs: &BranchVars,
    targets: &TargetMaps,
    weights: &LossWeights,
) -> Result<Objective> {
    weights.validate()?;
    let la = loss_a(&outs.a, &targets.g, weights.kappa, weights.gamma)?;
    let lb = loss_b(&outs.b, &targets.u, weights.kappa, weights.gamma)?;
    let ld = loss_d(&outs.d, &targets.p, &targets.u)?;
    let total = la.add(&lb)?.add(&ld)?;
    Ok(Objective {
        la,
        lb,
        ld,
        lfl: None,
        lfu: None,
        total,
        weights: *weights,
    })
}

/// Fusion loss for a batch: the score-value-weighted focal loss of
/// `sigmoid(A)` against the pseudo-keypoint target maps.
///
/// `pseudos` holds one entry per frame of the batch. An empty pseudo set
/// degenerates to the pure negative-branch loss over `A`. Gradients flow
/// into `A` only: the rasterization of pseudo coordinates into windows cuts
/// the path back into `D`, and confidences are detached by construction.
pub fn fusion_loss(
    a_logits: &Var,
    pseudos: &[PseudoLabels],
    window_halfwidth: usize,
    kappa: Real,
    gamma: Real,
) -> Result<Var> {
    let shape = a_logits.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "fusion loss expects [N,H,W,K] logits, got {shape:?}"
        )));
    }
    let (n, h, w, k) = (shape[0], shape[1], shape[2], shape[3]);
    if pseudos.len() != n {
        return Err(Error::Shape(format!(
            "{} pseudo-label sets for a batch of {n}",
            pseudos.len()
        )));
    }
    let mut weights = Vec::with_capacity(n * h * w * k);
    for pseudo in pseudos {
        let (_, wmap) = build_pseudo_target(pseudo, h, w, k, window_halfwidth)?;
        weights.extend_from_slice(wmap.data());
    }
    let wmap = Tensor::new(&shape, weights)?;
    weighted_focal_loss(&a_logits.sigmoid()?, &wmap, kappa, gamma)
}

fn combine_total(
    supervised: &Var,
    lfl: Option<&Var>,
    lfu: Option<&Var>,
    alpha: Real,
    beta: Real,
) -> Result<Var> {
    let mut total = supervised.clone();
    if let Some(l) = lfl {
        total = total.add(&l.mul_scalar(alpha)?)?;
    }
    if let Some(l) = lfu {
        total = total.add(&l.mul_scalar(beta)?)?;
    }
    Ok(total)
}

/// The full semi-supervised objective,
/// `L_a + L_b + L_d + alpha*L_fl + beta*L_fu`.
///
/// `L_fl` uses the labeled frames' own branch outputs; `L_fu` is the only
/// term touching unlabeled frames. Pass `None` for stages where a term is
/// inactive; its reported value is then exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn semi_objective(
    outs_labeled: &BranchVars,
    targets: &TargetMaps,
    outs_unlabeled: Option<&BranchVars>,
    pseudo_labeled: Option<&[PseudoLabels]>,
    pseudo_unlabeled: Option<&[PseudoLabels]>,
    weights: &LossWeights,
    window_halfwidth: usize,
) -> Result<Objective> {
    let sup = supervised_objective(outs_labeled, targets, weights)?;
    let lfl = pseudo_labeled
        .map(|ps| {
            fusion_loss(
                &outs_labeled.a,
                ps,
                window_halfwidth,
                weights.kappa,
                weights.gamma,
            )
        })
        .transpose()?;
    let lfu = match (outs_unlabeled, pseudo_unlabeled) {
        (Some(outs), Some(ps)) => Some(fusion_loss(
            &outs.a,
            ps,
            window_halfwidth,
            weights.kappa,
            weights.gamma,
        )?),
        (None, None) => None,
        _ => {
            return Err(Error::Invalid(
                "unlabeled outputs and pseudo labels must be passed together".into(),
            ))
        }
    };
    let total = combine_total(&sup.total, lfl.as_ref(), lfu.as_ref(), weights.alpha, weights.beta)?;
    Ok(Objective {
        la: sup.la,
        lb: sup.lb,
        ld: sup.ld,
        lfl,
        lfu,
        total,
        weights: *weights,
    })
}
