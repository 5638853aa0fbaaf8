//! Fusion of the box branch (where) and the vector-field branch (what).
//!
//! Hard-thresholding the sigmoid of the box heatmap `B` picks grid cells `s`
//! with confidences `v`; reading the vector field `D` at those cells and
//! adding the grid coordinates yields pseudo keypoints `y = (D + M)(s)`.
//! The selection is non-differentiable by design, while `y` stays a
//! differentiable function of `D`. At inference the same ingredients decode
//! whole instances: every surviving anchor cell proposes a full K-part
//! skeleton from `D`, deduplicated by greedy distance suppression.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::engine::{Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::targets::Instance;

/// Pseudo keypoints for one frame: grid indices `s` as `(row, col, part)`,
/// aligned confidences `v` in `[0,1]`, and decoded coordinates `y`.
///
/// `indices` and `confidences` come from a hard threshold and carry no
/// gradient; `coords` are differentiable functions of the vector field when
/// produced through [`decode_coords_var`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabels {
    pub indices: Vec<(usize, usize, usize)>,
    pub confidences: Vec<Real>,
    pub coords: Vec<[Real; 2]>,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A frame's decoded instances, sorted by descending score.
#[derive(Debug, Clone, Default)]
pub struct Prediction {
    pub instances: Vec<Instance>,
    pub scores: Vec<Real>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.scores.windows(2).all(|p| p[0] >= p[1])
    }
}

fn check_bkd_shape(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "{what} must be [H,W,K], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Selects every cell/part with `sigmoid(B) > delta`, scanning in row-major
/// order. Empty selections are valid. The returned `coords` are empty; use
/// [`decode_coords`] or [`extract_pseudo_labels`] to fill them.
pub fn threshold_boxes(b_logits: &Tensor, delta: Real) -> Result<PseudoLabels> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!("threshold delta {delta} not in (0,1)")));
    }
    let (h, w, k) = check_bkd_shape(b_logits.shape(), "box heatmap")?;
    let mut out = PseudoLabels::default();
    let data = b_logits.data();
    for r in 0..h {
        for c in 0..w {
            for part in 0..k {
                let v = sigmoid(data[(r * w + c) * k + part]);
                if v > delta {
                    out.indices.push((r, c, part));
                    out.confidences.push(v);
                }
            }
        }
    }
    Ok(out)
}

/// `y[t] = D[s_t] + M[s_t]` as plain values (the gradient-free path used when
/// extracting training pseudo labels).
pub fn decode_coords(
    d: &Tensor,
    m: &Tensor,
    indices: &[(usize, usize, usize)],
) -> Result<Vec<[Real; 2]>> {
    let shape = d.shape();
    if shape.len() != 4 || shape[3] != 2 {
        return Err(Error::Shape(format!(
            "vector field must be [H,W,K,2], got {shape:?}"
        )));
    }
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    if m.shape() != [h, w, 2] {
        return Err(Error::Shape(format!(
            "grid must be [{h},{w},2], got {:?}",
            m.shape()
        )));
    }
    let mut out = Vec::with_capacity(indices.len());
    for &(r, c, part) in indices {
        if r >= h || c >= w || part >= k {
            return Err(Error::Invalid(format!(
                "index ({r},{c},{part}) out of bounds for [{h},{w},{k}]"
            )));
        }
        let base = ((r * w + c) * k + part) * 2;
        let mb = (r * w + c) * 2;
        out.push([
            d.data()[base] + m.data()[mb],
            d.data()[base + 1] + m.data()[mb + 1],
        ]);
    }
    Ok(out)
}

/// Differentiable variant of [`decode_coords`]: the result is an `[n,2]`
/// variable with unit Jacobian onto the selected cells of `D`.
pub fn decode_coords_var(
    d: &Var,
    m: &Tensor,
    indices: &[(usize, usize, usize)],
) -> Result<Var> {
    let shape = d.shape();
    if shape.len() != 4 || shape[3] != 2 {
        return Err(Error::Shape(format!(
            "vector field must be [H,W,K,2], got {shape:?}"
        )));
    }
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    if indices.is_empty() {
        return Err(Error::Invalid("no pseudo indices to decode".into()));
    }
    let mut lin = Vec::with_capacity(indices.len() * 2);
    let mut m_sel = Vec::with_capacity(indices.len() * 2);
    for &(r, c, part) in indices {
        if r >= h || c >= w || part >= k {
            return Err(Error::Invalid(format!(
                "index ({r},{c},{part}) out of bounds for [{h},{w},{k}]"
            )));
        }
        let base = ((r * w + c) * k + part) * 2;
        lin.push(base);
        lin.push(base + 1);
        let mb = (r * w + c) * 2;
        m_sel.push(m.data()[mb]);
        m_sel.push(m.data()[mb + 1]);
    }
    let picked = d.gather(&lin)?;
    let grid = d.tape().constant(&Tensor::new(&[m_sel.len()], m_sel)?)?;
    picked.add(&grid)?.reshape(&[indices.len(), 2])
}

/// Thresholds `B` and decodes coordinates in one step.
pub fn extract_pseudo_labels(
    b_logits: &Tensor,
    d: &Tensor,
    m: &Tensor,
    delta: Real,
) -> Result<PseudoLabels> {
    let mut pseudo = threshold_boxes(b_logits, delta)?;
    pseudo.coords = decode_coords(d, m, &pseudo.indices)?;
    Ok(pseudo)
}

/// Expectation of grid coordinates under the softmax of a single-part map.
/// Only meaningful for unimodal maps (the single-instance regime); the
/// multi-instance path goes through [`threshold_boxes`] instead.
pub fn soft_argmax(a: &Var) -> Result<(Var, Var)> {
    let shape = a.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "soft_argmax expects [H,W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let sm = a.softmax2d()?;
    let rows = Tensor::from_fn(&[h, w], |i| i[0] as Real)?;
    let cols = Tensor::from_fn(&[h, w], |i| i[1] as Real)?;
    let tape = a.tape();
    let r = sm.mul(&tape.constant(&rows)?)?.sum_all()?;
    let c = sm.mul(&tape.constant(&cols)?)?.sum_all()?;
    Ok((r, c))
}

/// Value-only convenience for [`soft_argmax`].
pub fn soft_argmax_value(a: &Tensor) -> Result<(Real, Real)> {
    let tape = crate::engine::Tape::new();
    let v = tape.constant(a)?;
    let (r, c) = soft_argmax(&v)?;
    Ok((r.scalar_value()?, c.scalar_value()?))
}

/// Knobs for instance decoding.
#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    /// Hard threshold on `sigmoid(B)` for candidate anchor cells.
    pub delta: Real,
    /// Minimum distance between surviving anchors, in grid cells.
    pub nms_radius: Real,
    /// Maximum number of instances returned.
    pub top_n: usize,
}

impl DecodeConfig {
    pub fn new(delta: Real, nms_radius: Real, top_n: usize) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Invalid(format!("delta {delta} not in (0,1)")));
        }
        if !(nms_radius > 0.0) {
            return Err(Error::Invalid(format!("nms_radius {nms_radius} must be > 0")));
        }
        Ok(DecodeConfig {
            delta,
            nms_radius,
            top_n,
        })
    }
}

/// Decodes instances from the box heatmap and vector field of one frame.
///
/// Candidate anchors are cells where any part clears `delta`; each is scored
/// by the mean of `sigmoid(B)` over the K channels. Greedy suppression keeps
/// anchors at least `nms_radius` apart (highest score first, ties broken by
/// lowest linear cell index), and each survivor emits a full skeleton
/// `(i,j) + D[i,j,k]` with the anchor score.
pub fn decode_instances(b_logits: &Tensor, d: &Tensor, cfg: &DecodeConfig) -> Result<Prediction> {
    let (h, w, k) = check_bkd_shape(b_logits.shape(), "box heatmap")?;
    if d.shape() != [h, w, k, 2] {
        return Err(Error::Shape(format!(
            "vector field must be [{h},{w},{k},2], got {:?}",
            d.shape()
        )));
    }
    let bd = b_logits.data();
    // candidate anchors: any part over threshold
    let mut cands: Vec<(Real, usize)> = Vec::new();
    for cell in 0..h * w {
        let mut any = false;
        let mut sum = 0.0;
        for part in 0..k {
            let s = sigmoid(bd[cell * k + part]);
            sum += s;
            any |= s > cfg.delta;
        }
        if any {
            cands.push((sum / k as Real, cell));
        }
    }
    // highest score first; equal scores by lowest linear index
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut kept: Vec<(Real, usize)> = Vec::new();
    let r2 = cfg.nms_radius * cfg.nms_radius;
    for &(score, cell) in &cands {
        if kept.len() >= cfg.top_n {
            break;
        }
        let (ci, cj) = ((cell / w) as Real, (cell % w) as Real);
        let clear = kept.iter().all(|&(_, kc)| {
            let (ki, kj) = ((kc / w) as Real, (kc % w) as Real);
            let (dr, dc) = (ci - ki, cj - kj);
            dr * dr + dc * dc >= r2
        });
        if clear {
            kept.push((score, cell));
        }
    }

    let dd = d.data();
    let mut prediction = Prediction::default();
    for &(score, cell) in &kept {
        let (i, j) = (cell / w, cell % w);
        let mut kps = Vec::with_capacity(k);
        for part in 0..k {
            let base = (cell * k + part) * 2;
            kps.push([i as Real + dd[base], j as Real + dd[base + 1]]);
        }
        prediction.instances.push(Instance::new(kps));
        prediction.scores.push(score);
    }
    Ok(prediction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::targets::{build_box_target, build_vector_field, grid_coordinates};

    #[test]
    fn threshold_empty_when_all_below() {
        let b = Tensor::full(&[3, 3, 2], -5.0).unwrap(); // sigmoid ~ 0.0067
        let s = threshold_boxes(&b, 0.05).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn threshold_picks_single_hot_cell() {
        let mut b = Tensor::full(&[3, 4, 2], -50.0).unwrap();
        // sigmoid(logit) = 0.9  =>  logit = ln(9)
        b.set(&[1, 2, 0], (9.0 as Real).ln());
        let s = threshold_boxes(&b, 0.05).unwrap();
        assert_eq!(s.indices, vec![(1, 2, 0)]);
        assert!((s.confidences[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn threshold_matches_exhaustive_scan() {
        let mut rng = 987654321u64;
        let mut next = || {
            // xorshift, just to fill logits deterministically
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng % 2000) as Real / 100.0 - 10.0
        };
        let b = Tensor::from_fn(&[4, 4, 2], |_| next()).unwrap();
        let s = threshold_boxes(&b, 0.05).unwrap();
        let mut count = 0;
        for r in 0..4 {
            for c in 0..4 {
                for p in 0..2 {
                    if sigmoid(b.at(&[r, c, p])) > 0.05 {
                        assert!(s.indices.contains(&(r, c, p)));
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(count, s.len());
    }

    #[test]
    fn decode_zero_field_returns_grid() {
        let d = Tensor::zeros(&[4, 4, 1, 2]);
        let m = grid_coordinates(4, 4);
        let y = decode_coords(&d, &m, &[(1, 2, 0)]).unwrap();
        assert_eq!(y, vec![[1.0, 2.0]]);
    }

    #[test]
    fn decode_adds_offsets() {
        let mut d = Tensor::zeros(&[4, 4, 1, 2]);
        d.set(&[1, 2, 0, 0], 0.5);
        d.set(&[1, 2, 0, 1], -0.5);
        let m = grid_coordinates(4, 4);
        let y = decode_coords(&d, &m, &[(1, 2, 0)]).unwrap();
        assert_eq!(y, vec![[1.5, 1.5]]);
    }

    #[test]
    fn decode_grad_is_unit_at_selected_cells() {
        let tape = Tape::new();
        let d = tape
            .leaf(&Tensor::zeros(&[3, 3, 2, 2]).with_requires_grad(true))
            .unwrap();
        let m = grid_coordinates(3, 3);
        let y = decode_coords_var(&d, &m, &[(0, 1, 0), (2, 2, 1)]).unwrap();
        let s = y.sum_all().unwrap();
        tape.backward(&s).unwrap();
        let g = tape.grad_of(&d).unwrap();
        assert_eq!(g.data().iter().sum::<Real>(), 4.0);
        assert_eq!(g.at(&[0, 1, 0, 0]), 1.0);
        assert_eq!(g.at(&[0, 1, 0, 1]), 1.0);
        assert_eq!(g.at(&[2, 2, 1, 0]), 1.0);
        assert_eq!(g.at(&[2, 2, 1, 1]), 1.0);
        assert_eq!(g.at(&[1, 1, 0, 0]), 0.0);
    }

    #[test]
    fn decode_out_of_bounds_rejected() {
        let d = Tensor::zeros(&[3, 3, 1, 2]);
        let m = grid_coordinates(3, 3);
        assert!(decode_coords(&d, &m, &[(3, 0, 0)]).is_err());
    }

    #[test]
    fn soft_argmax_uniform_is_center() {
        let a = Tensor::zeros(&[5, 5]);
        let (r, c) = soft_argmax_value(&a).unwrap();
        assert!((r - 2.0).abs() < 1e-12);
        assert!((c - 2.0).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_saturates() {
        let mut a = Tensor::zeros(&[4, 6]);
        a.set(&[1, 3], 50.0);
        let (r, c) = soft_argmax_value(&a).unwrap();
        assert!((r - 1.0).abs() < 1e-10);
        assert!((c - 3.0).abs() < 1e-10);
    }

    #[test]
    fn soft_argmax_two_cell_expectation() {
        // logits {ln 3, 0} -> probs {0.75, 0.25} -> col = 0.25
        let a = Tensor::new(&[1, 2], vec![(3.0 as Real).ln(), 0.0]).unwrap();
        let (r, c) = soft_argmax_value(&a).unwrap();
        assert!((r - 0.0).abs() < 1e-12);
        assert!((c - 0.25).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_stays_in_hull() {
        let a = Tensor::from_fn(&[3, 7], |i| ((i[0] * 31 + i[1] * 17) % 11) as Real - 5.0).unwrap();
        let (r, c) = soft_argmax_value(&a).unwrap();
        assert!((0.0..=2.0).contains(&r));
        assert!((0.0..=6.0).contains(&c));
    }

    #[test]
    fn decode_instances_recovers_planted_scene() {
        // two planted instances on an 8x8 grid, ideal tensors from targets
        let k = 3;
        let a = Instance::new(vec![[1.0, 1.0], [1.0, 2.0], [2.0, 2.0]]);
        let b = Instance::new(vec![[5.0, 5.0], [6.0, 5.0], [6.0, 6.0]]);
        let instances = [a, b];
        let u = build_box_target(&instances, 8, 8, k, 0.0).unwrap();
        let (p, _) = build_vector_field(&instances, 8, 8, k).unwrap();
        let logits = Tensor::from_fn(&[8, 8, k], |i| if u.at(i) == 1.0 { 50.0 } else { -50.0 })
            .unwrap();
        let cfg = DecodeConfig::new(0.05, 3.0, 10).unwrap();
        let pred = decode_instances(&logits, &p, &cfg).unwrap();
        assert_eq!(pred.len(), 2);
        for inst in &instances {
            assert!(pred.instances.iter().any(|pi| {
                pi.keypoints
                    .iter()
                    .zip(&inst.keypoints)
                    .all(|(a, b)| (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9)
            }));
        }
    }

    #[test]
    fn nms_suppresses_nearby_lower_score() {
        let k = 1;
        let mut b = Tensor::full(&[6, 6, k], -50.0).unwrap();
        b.set(&[2, 2, 0], 3.0); // sigmoid ~ 0.95
        b.set(&[2, 3, 0], 1.0); // sigmoid ~ 0.73, 1 cell away
        let d = Tensor::zeros(&[6, 6, k, 2]);
        let cfg = DecodeConfig::new(0.05, 3.0, 10).unwrap();
        let pred = decode_instances(&b, &d, &cfg).unwrap();
        assert_eq!(pred.len(), 1);
        assert_eq!(pred.instances[0].keypoints[0], [2.0, 2.0]);
    }
}
