//! Engine oracles: brute-force convolution, finite-difference gradients,
//! and determinism. Randomness is seeded, so every run checks the same
//! cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semimultipose_core::engine::{grad_check, grad_check_multi, Real, Tape, Tensor};

/// Direct nested-loop cross-correlation, independent of the engine's
/// im2col path.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Vec<Real> {
    let (n, h, w, cin) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (kh, kw, _, cout) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * cout];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += input.at(&[b, iy as usize, ix as usize, ci])
                                    * kernel.at(&[ky, kx, ci, co]);
                            }
                        }
                    }
                    out[((b * ho + oy) * wo + ox) * cout + co] = acc;
                }
            }
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], span: Real) -> Tensor {
    Tensor::new(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-span..span))
            .collect(),
    )
    .unwrap()
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..40 {
        let n = rng.gen_range(1..=2);
        let h = rng.gen_range(3..=8);
        let w = rng.gen_range(3..=8);
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let kh = rng.gen_range(1..=3.min(h));
        let kw = rng.gen_range(1..=3.min(w));
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=1);
        let input = random_tensor(&mut rng, &[n, h, w, cin], 2.0);
        let kernel = random_tensor(&mut rng, &[kh, kw, cin, cout], 2.0);

        let tape = Tape::new();
        let out = tape
            .constant(&input)
            .unwrap()
            .conv2d(&tape.constant(&kernel).unwrap(), stride, padding)
            .unwrap()
            .value();
        let expect = conv_oracle(&input, &kernel, stride, padding);
        assert_eq!(out.numel(), expect.len(), "case {case}");
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_reference_case_5x5x2_by_3x3x2x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = random_tensor(&mut rng, &[1, 5, 5, 2], 1.0);
    let kernel = random_tensor(&mut rng, &[3, 3, 2, 3], 1.0);
    let tape = Tape::new();
    let out = tape
        .constant(&input)
        .unwrap()
        .conv2d(&tape.constant(&kernel).unwrap(), 1, 0)
        .unwrap()
        .value();
    let expect = conv_oracle(&input, &kernel, 1, 0);
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let input = random_tensor(&mut rng, &[1, 5, 5, 2], 1.0);
        let kernel = random_tensor(&mut rng, &[3, 3, 2, 2], 1.0);
        let err = grad_check_multi(
            |_, vars| {
                let y = vars[0].conv2d(&vars[1], 2, 1)?;
                y.mul(&y)?.mean_all()
            },
            &[input, kernel],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "conv grad error {err}");
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    // sigmoid / exp / ln / pow / mul / sub / reductions, away from kinks
    for _ in 0..20 {
        let x = random_tensor(&mut rng, &[3, 4], 1.5);
        let err = grad_check(
            |tape, v| {
                let s = v.sigmoid()?;
                let safe = s.clamp(1e-9, 1.0)?; // positive for ln
                let t = safe.ln()?.mul(&v.exp()?)?;
                let u = t.sub(&v.mul_scalar(0.5)?)?.pow_scalar(2.0)?;
                let m = u.mean(&[1])?.sum(&[0])?;
                m.mul(&tape.scalar(0.25)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "composite grad error {err}");
    }
}

#[test]
fn softmax_and_max_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let x = random_tensor(&mut rng, &[4, 5], 2.0);
        let err = grad_check(
            |tape, v| {
                let sm = v.softmax2d()?;
                let weights = Tensor::from_fn(&[4, 5], |i| (i[0] * 5 + i[1]) as Real).unwrap();
                sm.mul(&tape.constant(&weights)?)?.sum_all()
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "softmax grad error {err}");

        let err = grad_check(|_, v| v.max(&[0]).and_then(|m| m.sum_all()), &x, 1e-6).unwrap();
        assert!(err <= 1e-4, "max grad error {err}");
    }
}

#[test]
fn gather_and_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    for _ in 0..10 {
        let x = random_tensor(&mut rng, &[3, 4], 1.0);
        let b = random_tensor(&mut rng, &[4], 1.0);
        let err = grad_check_multi(
            |_, vars| {
                let s = vars[0].add(&vars[1])?; // broadcast over rows
                let g = s.gather(&[0, 5, 5, 11])?;
                g.mul(&g)?.sum_all()
            },
            &[x, b],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "gather/broadcast grad error {err}");
    }
}

#[test]
fn engine_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let input = random_tensor(&mut rng, &[2, 6, 6, 2], 1.0).with_requires_grad(true);
        let kernel = random_tensor(&mut rng, &[3, 3, 2, 3], 1.0).with_requires_grad(true);
        let tape = Tape::new();
        let (iv, kv) = (tape.leaf(&input).unwrap(), tape.leaf(&kernel).unwrap());
        let y = iv
            .conv2d(&kv, 1, 1)
            .unwrap()
            .sigmoid()
            .unwrap()
            .mean_all()
            .unwrap();
        tape.backward(&y).unwrap();
        (
            y.scalar_value().unwrap(),
            tape.grad_of(&iv).unwrap().data().to_vec(),
            tape.grad_of(&kv).unwrap().data().to_vec(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
