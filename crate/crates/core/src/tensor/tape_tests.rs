use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar probe `Σ wᵢ·yᵢ` with fixed random weights, so every output entry
/// contributes a distinct amount to the checked gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kn, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[kn, oh, ow]);
    for o in 0..kn {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ch in 0..c {
                    for a in 0..kh {
                        for b in 0..kw {
                            let (r, s) = ((i * stride + a) as isize - pad as isize, (j * stride + b) as isize - pad as isize);
                            if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                acc += x.data()[(ch * h + r as usize) * w + s as usize]
                                    * k.data()[((o * c + ch) * kh + a) * kw + b];
                            }
                        }
                    }
                }
                out.data_mut()[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

#[test]
fn matmul_hand_cases() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p), t.value(m));
    let a = t.constant(Tensor::row(vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);
    assert!(t.matmul(a, a).is_err());
}

#[test]
fn matmul_gradient_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let (bc, ac) = (b.clone(), a.clone());
    let ea = grad_check(
        |t, x| {
            let b = t.constant(bc.clone());
            let y = t.matmul(x, b)?;
            probe(t, y, 2)
        },
        &a,
        1e-6,
    )
    .unwrap();
    let eb = grad_check(
        |t, x| {
            let a = t.constant(ac.clone());
            let y = t.matmul(a, x)?;
            probe(t, y, 3)
        },
        &b,
        1e-6,
    )
    .unwrap();
    assert!(ea < 1e-6 && eb < 1e-6, "{ea} {eb}");
}

#[test]
fn conv_identity_kernel() {
    let mut t = Tape::new();
    let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let xv = t.constant(x.clone());
    let k = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = t.conv2d(xv, k, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_ramp_local_sums() {
    let x = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let k = Tensor::full(&[1, 1, 2, 2], 1.0);
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
    let y = t.conv2d(xv, kv, None, 2, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 2, 2]);
    assert_eq!(t.value(y).data(), &[10.0, 18.0, 42.0, 50.0]);
    assert_eq!(t.value(y), &conv_oracle(&x, &k, 2, 0));
}

#[test]
fn conv_matches_loop_oracle_with_padding_and_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (c, h, w, kn, ks, stride, pad) in [(2, 7, 6, 3, 3, 1, 1), (3, 9, 9, 2, 5, 2, 2), (1, 5, 8, 4, 2, 3, 0)] {
        let x = rand_tensor(&mut rng, &[c, h, w]);
        let k = rand_tensor(&mut rng, &[kn, c, ks, ks]);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
        let y = t.conv2d(xv, kv, None, stride, pad).unwrap();
        let want = conv_oracle(&x, &k, stride, pad);
        assert_eq!(t.value(y).shape(), want.shape());
        for (a, b) in t.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_oversized_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 3, 3]));
    let k = t.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(t.conv2d(x, k, None, 1, 0).is_err());
    assert!(t.conv2d(x, k, None, 1, 1).is_ok());
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 6, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let bias = rand_tensor(&mut rng, &[3]);
    let (kc, bc, xc) = (k.clone(), bias.clone(), x.clone());
    let ex = grad_check(
        |t, v| {
            let kv = t.constant(kc.clone());
            let bv = t.constant(bc.clone());
            let y = t.conv2d(v, kv, Some(bv), 2, 1)?;
            Ok(t.sum(y))
        },
        &x,
        1e-6,
    )
    .unwrap();
    let ek = grad_check(
        |t, v| {
            let xv = t.constant(xc.clone());
            let y = t.conv2d(xv, v, None, 1, 1)?;
            probe(t, y, 7)
        },
        &k,
        1e-6,
    )
    .unwrap();
    let eb = grad_check(
        |t, v| {
            let xv = t.constant(xc.clone());
            let kv = t.constant(kc.clone());
            let y = t.conv2d(xv, kv, Some(v), 1, 0)?;
            probe(t, y, 8)
        },
        &bias,
        1e-6,
    )
    .unwrap();
    assert!(ex < 1e-5 && ek < 1e-5 && eb < 1e-5, "{ex} {ek} {eb}");
}

#[test]
fn batched_conv_equals_per_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[3, 2, 5, 5]);
    let k = rand_tensor(&mut rng, &[4, 2, 3, 3]);
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
    let y = t.conv2d(xv, kv, None, 1, 0).unwrap();
    for n in 0..3 {
        let img = Tensor::new(vec![2, 5, 5], x.data()[n * 50..(n + 1) * 50].to_vec()).unwrap();
        let want = conv_oracle(&img, &k, 1, 0);
        assert_eq!(&t.value(y).data()[n * 36..(n + 1) * 36], want.data());
    }
}

#[test]
fn maxpool_single_window_and_floor() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.maxpool2(x).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);
    let odd = t.constant(Tensor::zeros(&[2, 5, 7]));
    let y = t.maxpool2(odd).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 2, 3]);
    let tiny = t.constant(Tensor::zeros(&[1, 1, 4]));
    assert!(t.maxpool2(tiny).is_err());
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[1, 4, 4], 2.0));
    let y = t.maxpool2(x).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 2.0));
    let s = t.sum(y);
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap();
    let mut want = vec![0.0; 16];
    for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        want[r * 4 + c] = 1.0;
    }
    assert_eq!(g.data(), &want[..]);
}

#[test]
fn maxpool_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[1, 6, 6]);
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let y = t.maxpool2(xv).unwrap();
    let s = probe(&mut t, y, 11).unwrap();
    t.backward(s).unwrap();
    let mut w_rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_tensor(&mut w_rng, &[1, 3, 3]);
    let mut want_g = vec![0.0; 36];
    for i in 0..3 {
        for j in 0..3 {
            let mut best = (f64::NEG_INFINITY, 0);
            for a in 0..2 {
                for b in 0..2 {
                    let idx = (2 * i + a) * 6 + 2 * j + b;
                    if x.data()[idx] > best.0 {
                        best = (x.data()[idx], idx);
                    }
                }
            }
            assert_eq!(t.value(y).data()[i * 3 + j], best.0);
            want_g[best.1] += w.data()[i * 3 + j];
        }
    }
    assert_eq!(t.grad(xv).unwrap().data(), &want_g[..]);
}

#[test]
fn activation_fixed_points() {
    assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    assert_eq!(Activation::Tanh.apply(0.0), 0.0);
    assert_eq!(Activation::Relu.apply(-3.0), 0.0);
    assert!(Activation::Sigmoid.apply(-800.0) >= 0.0 && Activation::Sigmoid.apply(800.0) <= 1.0);
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
        for trial in 0..10 {
            // keep relu inputs at least 0.1 away from the kink
            let data = (0..6)
                .map(|_| {
                    let v: f64 = rng.random_range(-2.0..2.0);
                    if kind == Activation::Relu && v.abs() < 0.1 { v.signum() * 0.1 + v } else { v }
                })
                .collect();
            let x = Tensor::new(vec![2, 3], data).unwrap();
            let e = grad_check(
                |t, v| {
                    let y = t.activation(v, kind);
                    probe(t, y, trial)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(e < 1e-7, "{kind:?}: {e}");
        }
    }
}

#[test]
fn elementwise_identities_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let ones = t.constant(Tensor::full(&[3, 4], 1.0));
    let zeros = t.constant(Tensor::zeros(&[3, 4]));
    let m = t.mul(av, ones).unwrap();
    let s = t.add(av, zeros).unwrap();
    assert_eq!(t.value(m), &a);
    assert_eq!(t.value(s), &a);
    let bad = t.constant(Tensor::zeros(&[4, 3]));
    assert!(t.add(av, bad).is_err() && t.mul(av, bad).is_err());

    for (i, op) in ["add", "sub", "mul"].into_iter().enumerate() {
        let bc = b.clone();
        let e = grad_check(
            |t, x| {
                let bv = t.constant(bc.clone());
                let y = match op {
                    "add" => t.add(x, bv)?,
                    "sub" => t.sub(bv, x)?,
                    _ => t.mul(x, bv)?,
                };
                probe(t, y, 20 + i as u64)
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(e < 1e-7, "{op}: {e}");
    }
}

#[test]
fn bias_broadcast_over_leading_axis() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[3, 2]));
    let b = t.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let y = t.add_bias(x, b).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(b).unwrap().data(), &[3.0, 3.0]);
    let wrong = t.constant(Tensor::zeros(&[3]));
    assert!(t.add_bias(x, wrong).is_err());
}

#[test]
fn restructure_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[6, 20]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let tt = t.transpose2d(xv).unwrap();
    assert_eq!(t.value(tt).shape(), &[20, 6]);
    let back = t.transpose2d(tt).unwrap();
    assert_eq!(t.value(back), &x);

    let m = t.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
    let r = t.reshape(m, &[3, 2]).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    assert!(t.reshape(m, &[4, 2]).is_err());

    let rows: Vec<Var> = (0..6).map(|i| t.slice_row(xv, i).unwrap()).collect();
    let cat = t.concat_rows(&rows).unwrap();
    assert_eq!(t.value(cat), &x);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(t.value(*r).data(), &x.data()[i * 20..(i + 1) * 20]);
    }
    assert!(t.slice_row(xv, 6).is_err());
}

#[test]
fn restructure_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let e = grad_check(
        |t, v| {
            let tr = t.transpose2d(v)?;
            let r = t.reshape(tr, &[2, 6])?;
            let a = t.slice_row(r, 1)?;
            let b = t.slice_row(r, 0)?;
            let c = t.concat_rows(&[a, b, a])?;
            probe(t, c, 16)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(e < 1e-7, "{e}");
}

#[test]
fn backward_basic_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let mut t = Tape::new();
    let av = t.leaf(a.clone());
    let s = t.sum(av);
    t.backward(s).unwrap();
    assert_eq!(t.grad(av).unwrap().data(), &[1.0; 6]);

    let sq = t.mul(av, av).unwrap();
    let s2 = t.sum(sq);
    t.backward(s2).unwrap();
    let want: Vec<f64> = a.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(t.grad(av).unwrap().data(), &want[..]);

    assert!(t.backward(sq).is_err());
}

#[test]
fn repeated_use_accumulates_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let w1 = rand_tensor(&mut rng, &[3, 2]);
    let w2 = rand_tensor(&mut rng, &[3, 2]);
    let grad_of = |ws: &[&Tensor]| {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let mut total = None;
        for w in ws {
            let wv = t.constant((*w).clone());
            let y = t.matmul(xv, wv).unwrap();
            let s = t.sum(y);
            total = Some(match total {
                None => s,
                Some(p) => t.add(p, s).unwrap(),
            });
        }
        t.backward(total.unwrap()).unwrap();
        t.grad(xv).unwrap()
    };
    let both = grad_of(&[&w1, &w2]);
    let g1 = grad_of(&[&w1]);
    let g2 = grad_of(&[&w2]);
    for ((b, x), y) in both.data().iter().zip(g1.data()).zip(g2.data()) {
        assert_eq!(*b, x + y);
    }
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&mut rng, &[3, 3]);
    let e = grad_check(
        |t, v| {
            let s = t.mul(v, v)?;
            Ok(t.sum(s))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(e < 1e-9, "{e}");
    let e = grad_check(
        |t, v| {
            let a = t.sigmoid(v);
            let b = t.scale(a, 3.0);
            let c = t.sigmoid(b);
            Ok(t.sum(c))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
    let away = Tensor::new(vec![4], vec![0.5, -0.3, 0.1, -1.2]).unwrap();
    let e = grad_check(
        |t, v| {
            let r = t.relu(v);
            let sq = t.mul(r, r)?;
            Ok(t.sum(sq))
        },
        &away,
        1e-6,
    )
    .unwrap();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn nan_in_differences_reported_as_failure() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let e = grad_check(
        |t, v| {
            let big = t.scale(v, f64::INFINITY);
            Ok(t.sum(big))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(e.is_infinite());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_tensor(&mut rng, &[2, 1, 9, 9]);
    let k = rand_tensor(&mut rng, &[3, 1, 3, 3]);
    let run = || {
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
        let y = t.conv2d(xv, kv, None, 1, 1).unwrap();
        let p = t.maxpool2(y).unwrap();
        let r = t.tanh(p);
        t.value(r).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
