use proptest::prelude::*;
use sefc::layers::Builder;
use sefc::numerics::{gradient_check, Graph, ParamStore, RngState, Tensor, Var};
use sefc::tscc::{
    cross_correlation, enrich_prototypes, gate_fuse, infuse, kl_divergence, reparameterize, topk_select, AmVae,
    ChannelGate, CrossAttention, Tscc, TsccConfig,
};

fn random(rng: &mut RngState, shape: &[usize], sd: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| sd * rng.normal::<f64>()).collect()).unwrap()
}

fn topk_oracle(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[test]
fn cross_align_shapes_and_normalized_weights() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = RngState::new(1);
    let ca = CrossAttention::new(&mut Builder::new(&mut store, &mut rng, true), "ca", 64, 4).unwrap();
    let mut g = Graph::new();
    let p = g.constant(random(&mut rng, &[32, 64], 1.0)).unwrap();
    let h = g.constant(random(&mut rng, &[2, 7, 64], 1.0)).unwrap();
    let out = ca.forward(&mut g, &store, p, h).unwrap();
    assert_eq!(g.shape(out.joint), &[2, 7, 64]);
    assert_eq!(g.shape(out.weights), &[2, 4, 7, 32]);
    for row in g.value(out.weights).data().chunks(32) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(CrossAttention::new(&mut Builder::new(&mut store, &mut rng, true), "bad", 64, 5).is_err());
}

#[test]
fn single_prototype_rows_equal_its_value_projection() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = RngState::new(2);
    let ca = CrossAttention::new(&mut Builder::new(&mut store, &mut rng, true), "ca", 8, 2).unwrap();
    let proto = random(&mut rng, &[1, 8], 1.0);
    let mut g = Graph::new();
    let p = g.constant(proto).unwrap();
    let h = g.constant(random(&mut rng, &[2, 3, 8], 1.0)).unwrap();
    let out = ca.forward(&mut g, &store, p, h).unwrap();
    let v = ca.value.forward(&mut g, &store, p).unwrap();
    let expected = ca.output.forward(&mut g, &store, v).unwrap();
    let expected = g.value(expected).data().to_vec();
    for row in g.value(out.joint).data().chunks(8) {
        for (a, b) in row.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(g.value(out.weights).data().iter().all(|&w| w == 1.0));
}

#[test]
fn enrich_prototypes_examples() {
    let mut rng = RngState::new(3);
    let l2 = random(&mut rng, &[4, 5], 1.0);
    let joint = random(&mut rng, &[2, 3, 5], 1.0);
    let mut g = Graph::new();
    let p = g.constant(l2.clone()).unwrap();
    let zero = g.constant(Tensor::zeros([2, 3, 5])).unwrap();
    let s0 = enrich_prototypes(&mut g, zero, p).unwrap();
    assert_eq!(g.value(s0), &l2);
    let c = g.constant(Tensor::full([2, 3, 5], 0.75)).unwrap();
    let sc = enrich_prototypes(&mut g, c, p).unwrap();
    for (a, b) in g.value(sc).data().iter().zip(l2.data()) {
        assert!((a - (b + 0.75)).abs() < 1e-15);
    }
    let j = g.constant(joint.clone()).unwrap();
    let s = enrich_prototypes(&mut g, j, p).unwrap();
    for i in 0..4 {
        for d in 0..5 {
            let mut mean = 0.0;
            for b in 0..2 {
                for n in 0..3 {
                    mean += joint.get(&[b, n, d]).unwrap();
                }
            }
            mean /= 6.0;
            let want = l2.get(&[i, d]).unwrap() + mean;
            assert!((g.value(s).get(&[i, d]).unwrap() - want).abs() < 1e-12);
        }
    }
}

#[test]
fn deterministic_decomposition_uses_the_mean() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = RngState::new(4);
    let vae = AmVae::new(&mut Builder::new(&mut store, &mut rng, true), 8, 4, 2, 10.0).unwrap();
    let mut g = Graph::new();
    let j = g.constant(random(&mut rng, &[2, 3, 8], 1.0)).unwrap();
    let d = vae.forward(&mut g, &store, j, None).unwrap();
    assert_eq!(g.value(d.z), g.value(d.mu));
    let mut noise = RngState::new(9);
    let d2 = vae.forward(&mut g, &store, j, Some(&mut noise)).unwrap();
    assert_ne!(g.value(d2.z), g.value(d2.mu));
    assert!(g.value(d2.logvar).data().iter().all(|v| v.abs() <= 10.0));
}

#[test]
fn reparameterization_with_zero_noise_is_the_mean() {
    let mut rng = RngState::new(5);
    let mu = random(&mut rng, &[3, 4], 1.0);
    let mut g = Graph::new();
    let m = g.constant(mu.clone()).unwrap();
    let lv = g.constant(random(&mut rng, &[3, 4], 1.0)).unwrap();
    let e = g.constant(Tensor::zeros([3, 4])).unwrap();
    let z = reparameterize(&mut g, m, lv, e).unwrap();
    assert_eq!(g.value(z), &mu);
}

#[test]
fn kl_of_standard_normal_is_zero() {
    let mut g = Graph::<f64>::new();
    let mu = g.constant(Tensor::zeros([2, 3])).unwrap();
    let lv = g.constant(Tensor::zeros([2, 3])).unwrap();
    let kl = kl_divergence(&mut g, mu, lv).unwrap();
    assert_eq!(g.value(kl).data()[0], 0.0);
}

#[test]
fn correlation_examples_and_brute_force_oracle() {
    let mut rng = RngState::new(6);
    let s = random(&mut rng, &[4, 8], 1.0);
    let mut h = random(&mut rng, &[1, 3, 8], 1.0);
    for d in 0..8 {
        h.set(&[0, 0, d], 2.5 * s.get(&[1, d]).unwrap() + 0.3).unwrap();
        h.set(&[0, 1, d], -s.get(&[2, d]).unwrap()).unwrap();
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone()).unwrap();
    let sv = g.constant(s.clone()).unwrap();
    let m = cross_correlation(&mut g, hv, sv, 1e-5).unwrap();
    let m = g.value(m).clone();
    assert!((m.get(&[0, 0, 1]).unwrap() - 1.0).abs() < 1e-4);
    assert!((m.get(&[0, 1, 2]).unwrap() + 1.0).abs() < 1e-4);

    let stats = |x: &[f64]| {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        (mean, var.sqrt())
    };
    let exact = cross_correlation(&mut g, hv, sv, 0.0).unwrap();
    let exact = g.value(exact).clone();
    for n in 0..3 {
        let hr: Vec<f64> = (0..8).map(|d| h.get(&[0, n, d]).unwrap()).collect();
        let (hm, hs) = stats(&hr);
        for i in 0..4 {
            let sr = s.row(i);
            let (sm, ss) = stats(sr);
            let want: f64 = hr
                .iter()
                .zip(sr)
                .map(|(a, b)| (a - hm) / hs * (b - sm) / ss)
                .sum::<f64>()
                / 8.0;
            assert!((exact.get(&[0, n, i]).unwrap() - want).abs() < 1e-9);
            assert!((m.get(&[0, n, i]).unwrap() - want).abs() < 1e-4);
        }
    }
}

#[test]
fn topk_examples() {
    let row = Tensor::<f64>::from_f64([1, 3], &[0.2, -1.0, 3.5]).unwrap();
    assert_eq!(topk_select(&row, 1).unwrap(), vec![2]);
    let ties = Tensor::<f64>::from_f64([1, 3], &[1.0, 1.0, 0.0]).unwrap();
    assert_eq!(topk_select(&ties, 1).unwrap(), vec![0]);
    assert_eq!(topk_select(&ties, 3).unwrap(), vec![0, 1, 2]);
    assert!(topk_select(&ties, 0).is_err());
    assert!(topk_select(&ties, 4).is_err());
}

#[test]
fn infuse_examples() {
    let mut rng = RngState::new(7);
    let dx = random(&mut rng, &[2, 3, 4], 1.0);
    let s = random(&mut rng, &[5, 4], 1.0);
    let mut g = Graph::new();
    let dv = g.constant(dx.clone()).unwrap();
    let ones = g.constant(Tensor::ones([5, 4])).unwrap();
    let idx: Vec<usize> = (0..6).flat_map(|r| [r % 5, (r + 2) % 5]).collect();
    let same = infuse(&mut g, dv, ones, &idx, 2).unwrap();
    assert_eq!(g.value(same), &dx);

    let sv = g.constant(s.clone()).unwrap();
    let all: Vec<usize> = (0..6).flat_map(|r| (0..5).map(move |i| (i + r) % 5)).collect();
    let full = infuse(&mut g, dv, sv, &all, 5).unwrap();
    let out = infuse(&mut g, dv, sv, &idx, 2).unwrap();
    for r in 0..6 {
        for d in 0..4 {
            let global = (0..5).map(|i| s.get(&[i, d]).unwrap()).sum::<f64>() / 5.0;
            let x = dx.data()[r * 4 + d];
            assert!((g.value(full).data()[r * 4 + d] - x * global).abs() < 1e-12);
            let w = (s.get(&[idx[2 * r], d]).unwrap() + s.get(&[idx[2 * r + 1], d]).unwrap()) / 2.0;
            assert!((g.value(out).data()[r * 4 + d] - x * w).abs() < 1e-12);
        }
    }
    assert!(infuse(&mut g, dv, sv, &[9; 12], 2).is_err());
}

#[test]
fn gate_boundaries() {
    let mut rng = RngState::new(8);
    let h = random(&mut rng, &[2, 3, 4], 1.0);
    let j = random(&mut rng, &[2, 3, 4], 1.0);
    let mut g = Graph::new();
    let hv = g.constant(h.clone()).unwrap();
    let jv = g.constant(j.clone()).unwrap();
    let one = g.constant(Tensor::ones([2, 3, 4])).unwrap();
    let zero = g.constant(Tensor::zeros([2, 3, 4])).unwrap();
    let a = gate_fuse(&mut g, one, hv, jv).unwrap();
    let b = gate_fuse(&mut g, zero, hv, jv).unwrap();
    assert_eq!(g.value(a), &h);
    assert_eq!(g.value(b), &j);
}

#[test]
fn saturated_gate_mlp_selects_h() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = RngState::new(10);
    let gate = ChannelGate::new(&mut Builder::new(&mut store, &mut rng, true), "gate", 4, 8, 6).unwrap();
    let last = gate.mlp.params().last().copied().unwrap();
    for v in store.get_mut(last).tensor.data_mut() {
        *v = 60.0;
    }
    let mut g = Graph::new();
    let h = random(&mut rng, &[1, 2, 4], 0.1);
    let hv = g.constant(h.clone()).unwrap();
    let dx = g.constant(random(&mut rng, &[1, 2, 4], 0.1)).unwrap();
    let j = g.constant(random(&mut rng, &[1, 2, 4], 1.0)).unwrap();
    let out = gate.forward(&mut g, &store, hv, dx, j).unwrap();
    assert_eq!(g.shape(out.output), &[1, 2, 6]);
    for (a, b) in g.value(out.fused).data().iter().zip(h.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn tiny_tscc(seed: u64) -> (ParamStore<f64>, Tscc) {
    let mut store = ParamStore::new();
    let mut rng = RngState::new(seed);
    let cfg = TsccConfig {
        cross_heads: 2,
        k_top: 3,
        ..TsccConfig::for_width(8)
    };
    let t = Tscc::new(&mut Builder::new(&mut store, &mut rng, true), &cfg, 8, 12).unwrap();
    (store, t)
}

#[test]
fn tscc_end_to_end_shapes_and_purity() {
    let (store, t) = tiny_tscc(11);
    let mut rng = RngState::new(12);
    let h = random(&mut rng, &[2, 7, 8], 1.0);
    let p = random(&mut rng, &[5, 8], 1.0);
    let run = || {
        let mut g = Graph::new();
        let hv = g.constant(h.clone()).unwrap();
        let pv = g.constant(p.clone()).unwrap();
        let o = t.forward(&mut g, &store, hv, pv, None).unwrap();
        let (ga, gc) = (o.anomaly.unwrap().output, o.clean.unwrap().output);
        (g.value(ga).clone(), g.value(gc).clone(), g.value(o.fused).clone())
    };
    let (ga, gc, fused) = run();
    assert_eq!(ga.shape(), &[2, 7, 12]);
    assert_eq!(gc.shape(), &[2, 7, 12]);
    assert_eq!(run(), (ga, gc, fused));
}

#[test]
fn tscc_gradient_check() {
    let (store, t) = tiny_tscc(13);
    let mut rng = RngState::new(14);
    let h = random(&mut rng, &[2, 4, 8], 1.0);
    let p = random(&mut rng, &[5, 8], 1.0);
    let r = random(&mut rng, &[2, 4, 12], 1.0);
    let f = |g: &mut Graph<f64>, x: Var| {
        let pv = g.constant(p.clone())?;
        let o = t.forward(g, &store, x, pv, None)?;
        let rv = g.constant(r.clone())?;
        let y = g.mul(o.fused, rv)?;
        g.sum_all(y)
    };
    let rep = gradient_check(f, &h, 1e-5, 1e-4).unwrap();
    assert!(rep.pass, "{rep:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_identity_holds(seed in any::<u64>(), b in 1usize..3, n in 1usize..5) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngState::new(seed);
        let vae = AmVae::new(&mut Builder::new(&mut store, &mut rng, true), 8, 4, 2, 10.0).unwrap();
        let mut g = Graph::new();
        let j = g.constant(random(&mut rng, &[b, n, 8], 2.0)).unwrap();
        let mut noise = rng.derive("noise");
        let d = vae.forward(&mut g, &store, j, Some(&mut noise)).unwrap();
        let sum = g.add(d.clean, d.anomaly).unwrap();
        prop_assert!(g.value(sum).max_abs_diff(g.value(j)).unwrap() <= 1e-12);
    }

    #[test]
    fn topk_matches_sort_oracle(values in prop::collection::vec(-3i32..3, 1..24), k in 1usize..24) {
        let row: Vec<f64> = values.iter().map(|&v| v as f64 * 0.5).collect();
        let k = k.min(row.len());
        let t = Tensor::<f64>::from_f64([1, row.len()], &row).unwrap();
        prop_assert_eq!(topk_select(&t, k).unwrap(), topk_oracle(&row, k));
    }

    #[test]
    fn correlation_is_bounded(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = RngState::new(seed);
        let mut g = Graph::new();
        let h = g.constant(random(&mut rng, &[2, 3, 6], scale)).unwrap();
        let s = g.constant(random(&mut rng, &[4, 6], 1.0)).unwrap();
        let m = cross_correlation(&mut g, h, s, 1e-5).unwrap();
        prop_assert!(g.value(m).data().iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn gate_fusion_is_convex(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let h = random(&mut rng, &[2, 3, 4], 1.0);
        let j = random(&mut rng, &[2, 3, 4], 1.0);
        let mut g = Graph::new();
        let logits = g.constant(random(&mut rng, &[2, 3, 4], 5.0)).unwrap();
        let a = g.sigmoid(logits).unwrap();
        let (hv, jv) = (g.constant(h.clone()).unwrap(), g.constant(j.clone()).unwrap());
        let f = gate_fuse(&mut g, a, hv, jv).unwrap();
        for ((x, y), z) in h.data().iter().zip(j.data()).zip(g.value(f).data()) {
            prop_assert!(*z >= x.min(*y) - 1e-15 && *z <= x.max(*y) + 1e-15);
        }
    }
}
