use sefc::numerics::{gradient_check, recurrent_cell_step, Graph, OpKind, RngState, Tensor, Var};
use sefc::Result;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal::<f64>()).collect()).unwrap()
}

/// `sum(y ⊙ r)` with a fixed random weighting `r`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngState::new(seed ^ 0x5eed);
    let r = random(&mut rng, g.shape(y));
    let r = g.constant(r)?;
    let p = g.mul(y, r)?;
    g.sum_all(p)
}

fn dims(rng: &mut RngState, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(16)).collect()
}

fn assert_pass(label: &str, seed: u64, report: sefc::numerics::GradReport) {
    assert!(
        report.pass,
        "{label} seed {seed}: rel err {} at {} (analytic {}, numeric {})",
        report.max_rel_err, report.worst_index, report.analytic, report.numeric
    );
}

#[test]
fn gradcheck_sum_of_squares() {
    let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let sq = g.mul(xv, xv).unwrap();
    let out = g.sum_all(sq).unwrap();
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.get(xv).unwrap().data(), &[2.0, 4.0]);
    let report = gradient_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            g.sum_all(sq)
        },
        &x,
        STEP,
        1e-8,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn gradient_of_sum_is_all_ones() {
    let mut rng = RngState::new(3);
    let x = random(&mut rng, &[3, 5]);
    let mut g = Graph::new();
    let xv = g.input(x).unwrap();
    let out = g.sum_all(xv).unwrap();
    let grads = g.backward(out).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn gradcheck_rejects_bad_inputs() {
    let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
    // non-scalar output
    assert!(gradient_check(|_, x| Ok(x), &x, STEP, TOL).is_err());
    // step outside the allowed window
    assert!(gradient_check(|g, x| g.sum_all(x), &x, 1e-2, TOL).is_err());
    // non-finite objective
    let huge = Tensor::<f64>::from_f64([1], &[1000.0]).unwrap();
    assert!(gradient_check(
        |g, x| {
            let e = g.exp(x)?;
            g.sum_all(e)
        },
        &huge,
        STEP,
        TOL
    )
    .is_err());
}

/// Every differentiable primitive, 100 seeds, random extents in 1..=16.
#[test]
fn primitive_suite_passes_gradient_check() {
    for seed in 0..100u64 {
        let mut rng = RngState::new(seed);

        let shape = dims(&mut rng, 2);
        let x = random(&mut rng, &shape);
        let other = random(&mut rng, &shape);
        let row = random(&mut rng, &shape[1..]);

        for (label, kind) in [
            ("add", 0),
            ("sub", 1),
            ("mul", 2),
            ("add_broadcast", 3),
            ("mul_broadcast", 4),
        ] {
            let (o, r) = (other.clone(), row.clone());
            let rep = gradient_check(
                move |g, x| {
                    let y = match kind {
                        0 => {
                            let c = g.input(o.clone())?;
                            g.add(x, c)?
                        }
                        1 => {
                            let c = g.input(o.clone())?;
                            g.sub(c, x)?
                        }
                        2 => {
                            let c = g.input(o.clone())?;
                            g.mul(x, c)?
                        }
                        3 => {
                            let c = g.input(r.clone())?;
                            let s = g.add(x, c)?;
                            g.mul(s, s)?
                        }
                        _ => {
                            let c = g.input(r.clone())?;
                            g.mul(x, c)?
                        }
                    };
                    weighted_sum(g, y, seed)
                },
                &x,
                STEP,
                TOL,
            )
            .unwrap();
            assert_pass(label, seed, rep);
        }

        // broadcast operand as the differentiated input
        let big = x.clone();
        let rep = gradient_check(
            move |g, r| {
                let b = g.input(big.clone())?;
                let y = g.mul(b, r)?;
                let y = g.add(y, r)?;
                weighted_sum(g, y, seed)
            },
            &row,
            STEP,
            TOL,
        )
        .unwrap();
        assert_pass("broadcast_reduce", seed, rep);

        for (label, f) in [
            ("sigmoid", 0u8),
            ("tanh", 1),
            ("gelu", 2),
            ("exp", 3),
            ("scale", 4),
            ("add_scalar", 5),
            ("transpose", 6),
            ("clamp", 7),
        ] {
            let rep = gradient_check(
                move |g, x| {
                    let y = match f {
                        0 => g.sigmoid(x)?,
                        1 => g.tanh(x)?,
                        2 => g.gelu(x)?,
                        3 => g.exp(x)?,
                        4 => g.scale(x, -1.7)?,
                        5 => g.add_scalar(x, 0.3)?,
                        6 => g.transpose_last(x)?,
                        _ => g.clamp(x, -0.5, 0.5)?,
                    };
                    weighted_sum(g, y, seed)
                },
                &x,
                STEP,
                TOL,
            )
            .unwrap();
            assert_pass(label, seed, rep);
        }

        for axis in 0..2 {
            let rep = gradient_check(
                move |g, x| {
                    let y = g.softmax(x, axis)?;
                    weighted_sum(g, y, seed)
                },
                &x,
                STEP,
                TOL,
            )
            .unwrap();
            assert_pass("softmax", seed, rep);

            if shape[axis] >= 2 {
                let rep = gradient_check(
                    move |g, x| {
                        let y = g.standardize(x, axis, 1e-5)?;
                        weighted_sum(g, y, seed)
                    },
                    &x,
                    STEP,
                    TOL,
                )
                .unwrap();
                assert_pass("standardize", seed, rep);
            }

            let rep = gradient_check(
                move |g, x| {
                    let y = g.mean(x, axis)?;
                    weighted_sum(g, y, seed)
                },
                &x,
                STEP,
                TOL,
            )
            .unwrap();
            assert_pass("mean", seed, rep);

            let o = other.clone();
            let rep = gradient_check(
                move |g, x| {
                    let c = g.input(o.clone())?;
                    let y = g.concat(&[x, c, x], axis)?;
                    let start = g.shape(x)[axis] / 2;
                    let y = g.slice(y, axis, start, g.shape(x)[axis] + 1)?;
                    weighted_sum(g, y, seed)
                },
                &x,
                STEP,
                TOL,
            )
            .unwrap();
            assert_pass("concat_slice", seed, rep);
        }

        if shape[1] >= 2 {
            let d = shape[1];
            let gain = random(&mut rng, &[d]);
            let bias = random(&mut rng, &[d]);
            let (g0, b0) = (gain.clone(), bias.clone());
            let rep = gradient_check(
                move |g, x| {
                    let gv = g.input(g0.clone())?;
                    let bv = g.input(b0.clone())?;
                    let y = g.layer_norm(x, gv, bv, 1e-5)?;
                    weighted_sum(g, y, seed)
                },
                &x,
                STEP,
                TOL,
            )
            .unwrap();
            assert_pass("layer_norm", seed, rep);
            let x0 = x.clone();
            let rep = gradient_check(
                move |g, gain| {
                    let xv = g.input(x0.clone())?;
                    let bv = g.constant(bias.clone())?;
                    let y = g.layer_norm(xv, gain, bv, 1e-5)?;
                    weighted_sum(g, y, seed)
                },
                &gain,
                STEP,
                TOL,
            )
            .unwrap();
            assert_pass("layer_norm_gain", seed, rep);
        }

        // batched matmul, shared and per-batch right operands
        let (b, m, k, n) = (
            1 + rng.below(4),
            1 + rng.below(16),
            1 + rng.below(16),
            1 + rng.below(16),
        );
        let a = random(&mut rng, &[b, m, k]);
        let w = random(&mut rng, &[k, n]);
        let wb = random(&mut rng, &[b, k, n]);
        let (w1, a1) = (w.clone(), a.clone());
        assert_pass(
            "matmul_lhs",
            seed,
            gradient_check(
                move |g, a| {
                    let w = g.input(w1.clone())?;
                    let y = g.matmul(a, w)?;
                    weighted_sum(g, y, seed)
                },
                &a,
                STEP,
                TOL,
            )
            .unwrap(),
        );
        assert_pass(
            "matmul_rhs",
            seed,
            gradient_check(
                move |g, w| {
                    let a = g.input(a1.clone())?;
                    let y = g.matmul(a, w)?;
                    weighted_sum(g, y, seed)
                },
                &w,
                STEP,
                TOL,
            )
            .unwrap(),
        );
        let a2 = a.clone();
        assert_pass(
            "matmul_batched_rhs",
            seed,
            gradient_check(
                move |g, w| {
                    let a = g.input(a2.clone())?;
                    let y = g.matmul(a, w)?;
                    weighted_sum(g, y, seed)
                },
                &wb,
                STEP,
                TOL,
            )
            .unwrap(),
        );

        // permute / reshape on rank 3
        assert_pass(
            "permute_reshape",
            seed,
            gradient_check(
                move |g, a| {
                    let y = g.permute(a, &[2, 0, 1])?;
                    let y = g.reshape(y, &[k * b, m])?;
                    let y = g.tanh(y)?;
                    weighted_sum(g, y, seed)
                },
                &a,
                STEP,
                TOL,
            )
            .unwrap(),
        );

        // gather rows with repeats
        let rows = 1 + rng.below(16);
        let cols = 1 + rng.below(16);
        let table = random(&mut rng, &[rows, cols]);
        let idx: Vec<usize> = (0..1 + rng.below(16)).map(|_| rng.below(rows)).collect();
        assert_pass(
            "gather_rows",
            seed,
            gradient_check(
                move |g, t| {
                    let y = g.gather_rows(t, &idx)?;
                    weighted_sum(g, y, seed)
                },
                &table,
                STEP,
                TOL,
            )
            .unwrap(),
        );

        // recurrent cell, checked through every input
        let (bsz, input, hidden) = (1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8));
        // weights at initialization scale; N(0,1) weights saturate the gates
        let small = |rng: &mut RngState, s: &[usize]| random(rng, s).map(|v| 0.3 * v);
        let xs = random(&mut rng, &[bsz, input]);
        let h0 = random(&mut rng, &[bsz, hidden]).map(f64::tanh);
        let c0 = random(&mut rng, &[bsz, hidden]);
        let w_ih = small(&mut rng, &[input, 4 * hidden]);
        let w_hh = small(&mut rng, &[hidden, 4 * hidden]);
        let bias = small(&mut rng, &[4 * hidden]);
        let all = [xs, h0, c0, w_ih, w_hh, bias];
        for which in 0..all.len() {
            let others = all.clone();
            assert_pass(
                "recurrent_cell_step",
                seed,
                gradient_check(
                    move |g, probe| {
                        let mut vars = Vec::new();
                        for (i, t) in others.iter().enumerate() {
                            vars.push(if i == which { probe } else { g.input(t.clone())? });
                        }
                        let (h, c) = recurrent_cell_step(g, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?;
                        let both = g.concat(&[h, c], 1)?;
                        weighted_sum(g, both, seed)
                    },
                    &all[which],
                    STEP,
                    TOL,
                )
                .unwrap(),
            );
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_and_sigmoid_in_open_interval() {
    let mut rng = RngState::new(11);
    for _ in 0..50 {
        let shape = dims(&mut rng, 2);
        let x = random(&mut rng, &shape).map(|v| v * 20.0);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let s = g.softmax(xv, 1).unwrap();
        let t = g.value(s);
        for r in 0..shape[0] {
            let sum: f64 = t.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        let sg = g.sigmoid(xv).unwrap();
        assert!(g.value(sg).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros([2])).unwrap();
    let s = g.softmax(z, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_identity_on_standardized_input() {
    let mut rng = RngState::new(5);
    let x = random(&mut rng, &[4, 16]).standardize(1, 0.0).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let gain = g.constant(Tensor::ones([16])).unwrap();
    let bias = g.constant(Tensor::zeros([16])).unwrap();
    let y = g.layer_norm(xv, gain, bias, 1e-12).unwrap();
    assert!(g.value(y).max_abs_diff(&x).unwrap() < 1e-6);
}

#[test]
fn recurrent_cell_zero_weights_zero_state() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([2, 3])).unwrap();
    let h = g.constant(Tensor::zeros([2, 4])).unwrap();
    let c = g.constant(Tensor::zeros([2, 4])).unwrap();
    let w_ih = g.constant(Tensor::zeros([3, 16])).unwrap();
    let w_hh = g.constant(Tensor::zeros([4, 16])).unwrap();
    let b = g.constant(Tensor::zeros([16])).unwrap();
    let (h1, c1) = recurrent_cell_step(&mut g, x, h, c, w_ih, w_hh, b).unwrap();
    assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
    assert!(g.value(c1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_name_the_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([4, 5])).unwrap();
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(
        err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"),
        "{err}"
    );
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full([1], 800.0)).unwrap();
    assert!(g.exp(a).is_err());
    assert!(g.constant(Tensor::full([1], f64::NAN)).is_err());
}

#[test]
fn injected_fault_is_detected() {
    let x = Tensor::<f64>::from_f64([3], &[0.1, -0.4, 0.9]).unwrap();
    for kind in [OpKind::Tanh, OpKind::Mul] {
        let f = move |g: &mut Graph<f64>, x: Var| {
            g.inject_fault(kind);
            let t = g.tanh(x)?;
            let y = g.mul(t, x)?;
            g.sum_all(y)
        };
        let rep = gradient_check(f, &x, STEP, TOL).unwrap();
        assert!(!rep.pass, "fault in {kind} went unnoticed");
    }
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([1], &[3.0]).unwrap()).unwrap();
    let y = g.add(x, x).unwrap();
    let y = g.mul(y, x).unwrap(); // 2x²
    let out = g.sum_all(y).unwrap();
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[12.0]);
}
