//! Central-difference verification of every backward rule.
//!
//! For each op we build a scalar probe loss, read the tape's gradient, and
//! compare 30 randomly chosen coordinates against (f(x+h) - f(x-h)) / 2h.
//! Probes use random weighted sums rather than plain sums so that errors
//! which cancel under symmetric reductions still show up. Evaluations whose
//! forward pass runs within 1e-6 of a relu kink are discarded and resampled:
//! the subgradient is not the limit of difference quotients there.

use krada_core::rng::{stream, Stream};
use krada_core::tape::{Node, Tape};
use krada_core::tensor::Tensor;

const H_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const COORDS: usize = 30;
const KINK_EPS: f64 = 1e-6;

fn agree(analytic: f64, numeric: f64) -> bool {
    let d = (analytic - numeric).abs();
    d <= 1e-9 || d / analytic.abs().max(numeric.abs()) < TOL
}

/// `f` maps a candidate value of the tensor under test to
/// (loss, d loss / d tensor, hit-a-kink).
fn check_grads(label: &str, base: &[f64], f: &dyn Fn(&[f64]) -> (f64, Vec<f64>, bool)) {
    let (l0, g, kinked) = f(base);
    assert!(l0.is_finite(), "{label}: non-finite loss at the base point");
    assert!(!kinked, "{label}: base point sits on a relu kink");
    assert_eq!(g.len(), base.len());

    let mut rng = stream(0x6AD5, "gradcheck-coords", 0);
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < COORDS {
        attempts += 1;
        assert!(attempts < 40 * COORDS, "{label}: too many kink resamples");
        let i = rng.below(base.len());
        let mut plus = base.to_vec();
        plus[i] += H_STEP;
        let mut minus = base.to_vec();
        minus[i] -= H_STEP;
        let (lp, _, kp) = f(&plus);
        let (lm, _, km) = f(&minus);
        if kp || km {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * H_STEP);
        assert!(
            agree(g[i], numeric),
            "{label}[{i}]: analytic {} vs numeric {}",
            g[i],
            numeric
        );
        done += 1;
    }
}

fn rand_vec(rng: &mut Stream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(lo, hi)).collect()
}

/// Random values pushed away from zero so relu probes start off-kink.
fn rand_vec_offkink(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform_in(0.05, 1.5);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect()
}

fn zero_one_weights(rng: &mut Stream, shape: &[usize], keep: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|_| if rng.uniform() < keep { 1.0 } else { 0.0 })
        .collect();
    if data.iter().all(|&v| v == 0.0) {
        data[0] = 1.0;
    }
    Tensor::from_vec(shape, data).unwrap()
}

/// Probe: backward through `build`, reading the gradient of the single leaf.
fn leaf_probe(
    shape: &[usize],
    build: impl Fn(&mut Tape, Node) -> Node,
) -> impl Fn(&[f64]) -> (f64, Vec<f64>, bool) {
    let shape = shape.to_vec();
    move |data: &[f64]| {
        let x = Tensor::from_vec(&shape, data.to_vec()).unwrap().tracked();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x);
        let loss = build(&mut tape, xn);
        let kinked = tape.has_relu_input_within(KINK_EPS);
        let value = tape.scalar_value(loss).unwrap();
        tape.backward(loss).unwrap();
        (value, tape.grad(xn).unwrap().to_vec(), kinked)
    }
}

#[test]
fn conv_forward_matches_a_naive_reference() {
    // Independent six-loop convolution, written without looking at the op.
    fn reference(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        (n, cin, h, wd): (usize, usize, usize, usize),
        (cout, k): (usize, usize),
        pad: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; n * cout * h * wd];
        for ni in 0..n {
            for co in 0..cout {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = i as i64 + ki as i64 - pad as i64;
                                    let jj = j as i64 + kj as i64 - pad as i64;
                                    if ii < 0 || jj < 0 || ii >= h as i64 || jj >= wd as i64 {
                                        continue;
                                    }
                                    let xv = x[((ni * cin + ci) * h + ii as usize) * wd
                                        + jj as usize];
                                    let wv = w[((co * cin + ci) * k + ki) * k + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((ni * cout + co) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        out
    }

    let mut rng = stream(41, "gradcheck-data", 0);
    for &(k, pad) in &[(3usize, 1usize), (1, 0)] {
        let (n, cin, cout, h, w) = (2, 3, 4, 6, 5);
        let xd = rand_vec(&mut rng, n * cin * h * w, -1.0, 1.0);
        let wd = rand_vec(&mut rng, cout * cin * k * k, -1.0, 1.0);
        let bd = rand_vec(&mut rng, cout, -0.5, 0.5);
        let expect = reference(&xd, &wd, &bd, (n, cin, h, w), (cout, k), pad);

        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(&[n, cin, h, w], xd).unwrap());
        let wt = tape.constant(&Tensor::from_vec(&[cout, cin, k, k], wd).unwrap());
        let bt = tape.constant(&Tensor::from_vec(&[cout], bd).unwrap());
        let y = tape.conv2d(x, wt, bt, pad).unwrap();
        for (a, e) in tape.value(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "k={k}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_gradients_wrt_input_weight_and_bias() {
    let mut rng = stream(42, "gradcheck-data", 0);
    for &(k, pad) in &[(3usize, 1usize), (1, 0)] {
        let (n, cin, cout, h, w) = (2, 3, 4, 5, 4);
        let xd = rand_vec(&mut rng, n * cin * h * w, -1.0, 1.0);
        let wd = rand_vec(&mut rng, cout * cin * k * k, -1.0, 1.0);
        let bd = rand_vec(&mut rng, cout, -0.5, 0.5);
        let coeffs = Tensor::from_vec(
            &[n, cout, h, w],
            rand_vec(&mut rng, n * cout * h * w, -1.0, 1.0),
        )
        .unwrap();

        // d/dx with w, b fixed.
        {
            let (wd, bd, coeffs) = (wd.clone(), bd.clone(), coeffs.clone());
            let probe = leaf_probe(&[n, cin, h, w], move |tape, xn| {
                let wt = tape.constant(&Tensor::from_vec(&[cout, cin, k, k], wd.clone()).unwrap());
                let bt = tape.constant(&Tensor::from_vec(&[cout], bd.clone()).unwrap());
                let y = tape.conv2d(xn, wt, bt, pad).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            });
            check_grads(&format!("conv{k}x{k}/x"), &xd, &probe);
        }
        // d/dw with x, b fixed.
        {
            let (xd, bd, coeffs) = (xd.clone(), bd.clone(), coeffs.clone());
            let probe = leaf_probe(&[cout, cin, k, k], move |tape, wn| {
                let xt = tape.constant(&Tensor::from_vec(&[n, cin, h, w], xd.clone()).unwrap());
                let bt = tape.constant(&Tensor::from_vec(&[cout], bd.clone()).unwrap());
                let y = tape.conv2d(xt, wn, bt, pad).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            });
            check_grads(&format!("conv{k}x{k}/w"), &wd, &probe);
        }
        // d/db with x, w fixed.
        {
            let (xd, wd, coeffs) = (xd.clone(), wd.clone(), coeffs.clone());
            let probe = leaf_probe(&[cout], move |tape, bn| {
                let xt = tape.constant(&Tensor::from_vec(&[n, cin, h, w], xd.clone()).unwrap());
                let wt = tape.constant(&Tensor::from_vec(&[cout, cin, k, k], wd.clone()).unwrap());
                let y = tape.conv2d(xt, wt, bn, pad).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            });
            check_grads(&format!("conv{k}x{k}/b"), &bd, &probe);
        }
    }
}

#[test]
fn relu_gradient_away_from_the_kink() {
    let mut rng = stream(43, "gradcheck-data", 0);
    let shape = [2usize, 3, 4, 4];
    let n: usize = shape.iter().product();
    let xd = rand_vec_offkink(&mut rng, n);
    let coeffs = Tensor::from_vec(&shape, rand_vec(&mut rng, n, -1.0, 1.0)).unwrap();
    let probe = leaf_probe(&shape, move |tape, xn| {
        let y = tape.relu(xn);
        tape.weighted_sum(y, &coeffs).unwrap()
    });
    check_grads("relu", &xd, &probe);
}

#[test]
fn softmax_gradient_over_channels() {
    let mut rng = stream(44, "gradcheck-data", 0);
    let shape = [2usize, 5, 3, 3];
    let n: usize = shape.iter().product();
    let xd = rand_vec(&mut rng, n, -2.0, 2.0);
    let coeffs = Tensor::from_vec(&shape, rand_vec(&mut rng, n, -1.0, 1.0)).unwrap();
    let probe = leaf_probe(&shape, move |tape, xn| {
        let y = tape.softmax_channels(xn).unwrap();
        tape.weighted_sum(y, &coeffs).unwrap()
    });
    check_grads("softmax", &xd, &probe);
}

#[test]
fn cross_entropy_gradient_with_unlabeled_pixels_and_weights() {
    let mut rng = stream(45, "gradcheck-data", 0);
    let (n, c, h, w) = (2usize, 4usize, 3usize, 3usize);
    let xd = rand_vec(&mut rng, n * c * h * w, -2.0, 2.0);

    // One-hot targets with ~20% of pixels left unlabeled.
    let mut target = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for px in 0..h * w {
            if rng.uniform() < 0.8 {
                let cls = rng.below(c);
                target[(ni * c + cls) * h * w + px] = 1.0;
            }
        }
    }
    let target = Tensor::from_vec(&[n, c, h, w], target).unwrap();
    let weights = zero_one_weights(&mut rng, &[n, 1, h, w], 0.7);

    let probe = leaf_probe(&[n, c, h, w], move |tape, xn| {
        tape.masked_cross_entropy(xn, &target, &weights).unwrap()
    });
    check_grads("masked_cross_entropy", &xd, &probe);
}

#[test]
fn bce_gradient_for_plain_and_weighted_means() {
    let mut rng = stream(46, "gradcheck-data", 0);
    let shape = [2usize, 1, 4, 4];
    let n: usize = shape.iter().product();

    for &label in &[0.0, 1.0, 0.3] {
        let xd = rand_vec(&mut rng, n, -3.0, 3.0);
        let probe = leaf_probe(&shape, move |tape, xn| tape.bce_logits(xn, label).unwrap());
        check_grads(&format!("bce(label={label})"), &xd, &probe);
    }

    let xd = rand_vec(&mut rng, n, -3.0, 3.0);
    let weights = zero_one_weights(&mut rng, &shape, 0.6);
    let probe = leaf_probe(&shape, move |tape, xn| {
        tape.bce_logits_weighted(xn, 0.0, &weights).unwrap()
    });
    check_grads("bce_weighted", &xd, &probe);
}

#[test]
fn mask_multiplication_gradient() {
    let mut rng = stream(47, "gradcheck-data", 0);
    let (n, c, h, w) = (2usize, 3usize, 4usize, 4usize);
    let xd = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
    let mask = zero_one_weights(&mut rng, &[n, 1, h, w], 0.5);
    let coeffs = Tensor::from_vec(
        &[n, c, h, w],
        rand_vec(&mut rng, n * c * h * w, -1.0, 1.0),
    )
    .unwrap();
    let probe = leaf_probe(&[n, c, h, w], move |tape, xn| {
        let y = tape.mul_mask(xn, &mask).unwrap();
        tape.weighted_sum(y, &coeffs).unwrap()
    });
    check_grads("mul_mask", &xd, &probe);
}

#[test]
fn affine_combination_gradient() {
    let mut rng = stream(48, "gradcheck-data", 0);
    let shape = [3usize, 2, 2, 2];
    let n: usize = shape.iter().product();
    let xd = rand_vec(&mut rng, n, -1.0, 1.0);
    let coeffs = Tensor::from_vec(&shape, rand_vec(&mut rng, n, -1.0, 1.0)).unwrap();
    let probe = leaf_probe(&shape, move |tape, xn| {
        let s = tape.sum(xn);
        let a = tape.scale(s, 0.7);
        let ws = tape.weighted_sum(xn, &coeffs).unwrap();
        let b = tape.scale(ws, -1.3);
        tape.add(a, b).unwrap()
    });
    check_grads("affine", &xd, &probe);
}

/// The full training objective, differentiated end to end through both
/// convolution stages, the relus, both heads, the mask, and the
/// discriminator — checked against finite differences for the image, an
/// early weight, a head weight, and a discriminator weight.
#[test]
fn full_pipeline_gradient() {
    let mut rng = stream(49, "gradcheck-data", 0);
    let (n, cin, feat, k) = (1usize, 3usize, 4usize, 3usize);
    let (h, w) = (5usize, 5usize);

    let xd = rand_vec(&mut rng, n * cin * h * w, 0.1, 0.9);
    let f1w = rand_vec(&mut rng, feat * cin * 9, -0.4, 0.4);
    let f1b = rand_vec(&mut rng, feat, -0.1, 0.1);
    let f2w = rand_vec(&mut rng, feat * feat * 9, -0.3, 0.3);
    let f2b = rand_vec(&mut rng, feat, -0.1, 0.1);
    let hw_ = rand_vec(&mut rng, (k + 1) * feat, -0.5, 0.5);
    let hb = rand_vec(&mut rng, k + 1, -0.1, 0.1);
    let d1w = rand_vec(&mut rng, 3 * feat, -0.5, 0.5);
    let d1b = rand_vec(&mut rng, 3, 0.05, 0.2); // positive biases keep relus live
    let d2w = rand_vec(&mut rng, 3, -0.5, 0.5);
    let d2b = rand_vec(&mut rng, 1, -0.1, 0.1);

    let mut target = vec![0.0; n * (k + 1) * h * w];
    for px in 0..h * w {
        let cls = rng.below(k + 1);
        target[cls * h * w + px] = 1.0;
    }
    let target = Tensor::from_vec(&[n, k + 1, h, w], target).unwrap();
    let ones = Tensor::filled(&[n, 1, h, w], 1.0);
    let mask = zero_one_weights(&mut rng, &[n, 1, h, w], 0.6);

    // Builds the combined objective with every parameter constant except
    // the one named; returns the loss node and the perturbed leaf.
    let build = |tape: &mut Tape, which: &str, data: &[f64]| -> (Node, Node) {
        let mut leaf = None;
        let mut pick = |tape: &mut Tape, name: &str, shape: &[usize], fixed: &[f64]| {
            if which == name {
                let t = Tensor::from_vec(shape, data.to_vec()).unwrap().tracked();
                let node = tape.leaf(&t);
                leaf = Some(node);
                node
            } else {
                tape.constant(&Tensor::from_vec(shape, fixed.to_vec()).unwrap())
            }
        };
        let xn = pick(tape, "x", &[n, cin, h, w], &xd);
        let f1wn = pick(tape, "f1w", &[feat, cin, 3, 3], &f1w);
        let f1bn = pick(tape, "f1b", &[feat], &f1b);
        let f2wn = pick(tape, "f2w", &[feat, feat, 3, 3], &f2w);
        let f2bn = pick(tape, "f2b", &[feat], &f2b);
        let hwn = pick(tape, "hw", &[k + 1, feat, 1, 1], &hw_);
        let hbn = pick(tape, "hb", &[k + 1], &hb);
        let d1wn = pick(tape, "d1w", &[3, feat, 1, 1], &d1w);
        let d1bn = pick(tape, "d1b", &[3], &d1b);
        let d2wn = pick(tape, "d2w", &[1, 3, 1, 1], &d2w);
        let d2bn = pick(tape, "d2b", &[1], &d2b);
        drop(pick);

        let c1 = tape.conv2d(xn, f1wn, f1bn, 1).unwrap();
        let r1 = tape.relu(c1);
        let c2 = tape.conv2d(r1, f2wn, f2bn, 1).unwrap();
        let feat_node = tape.relu(c2);

        let logits = tape.conv2d(feat_node, hwn, hbn, 0).unwrap();
        let ce = tape.masked_cross_entropy(logits, &target, &ones).unwrap();

        let gated = tape.mul_mask(feat_node, &mask).unwrap();
        let dh = tape.conv2d(gated, d1wn, d1bn, 0).unwrap();
        let dr = tape.relu(dh);
        let dl = tape.conv2d(dr, d2wn, d2bn, 0).unwrap();
        let adv = tape.bce_logits_weighted(dl, 0.0, &mask).unwrap();
        let neg = tape.scale(adv, -1.0);
        let _ = xn;

        (tape.add(ce, neg).unwrap(), leaf.expect("one leaf per build"))
    };

    for (which, base) in [
        ("x", &xd),
        ("f1w", &f1w),
        ("f2b", &f2b),
        ("hw", &hw_),
        ("d1w", &d1w),
        ("d2b", &d2b),
    ] {
        let probe = |data: &[f64]| -> (f64, Vec<f64>, bool) {
            let mut tape = Tape::new();
            let (loss, leaf) = build(&mut tape, which, data);
            let kinked = tape.has_relu_input_within(KINK_EPS);
            let value = tape.scalar_value(loss).unwrap();
            tape.backward(loss).unwrap();
            (value, tape.grad(leaf).unwrap().to_vec(), kinked)
        };
        check_grads(&format!("pipeline/{which}"), base, &probe);
    }
}
