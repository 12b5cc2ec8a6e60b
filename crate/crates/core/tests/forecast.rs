use proptest::prelude::*;
use sefc::data::NormStats;
use sefc::forecast::{rollout, rollout_raw, Decoder, DecoderMode};
use sefc::layers::Builder;
use sefc::model::{Model, ModelConfig};
use sefc::numerics::{gradient_check, Graph, ParamStore, RngState, Tensor, Var};
use sefc::Error;

fn random(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal::<f64>()).collect()).unwrap()
}

fn decoder(mode: DecoderMode, n: usize, d: usize, tau: usize) -> (ParamStore<f64>, Decoder) {
    let mut store = ParamStore::new();
    let mut rng = RngState::new(1);
    let dec = Decoder::new(&mut Builder::new(&mut store, &mut rng, true), mode, n, d, 2 * d, tau).unwrap();
    (store, dec)
}

#[test]
fn flatten_head_handles_indivisible_horizons() {
    let (store, dec) = decoder(DecoderMode::Flatten, 7, 64, 96);
    assert_eq!(store.tensor(dec.first.weight).shape(), &[7 * 64, 128]);
    let mut rng = RngState::new(2);
    let mut g = Graph::new();
    let y = g.constant(random(&mut rng, &[2, 7, 64])).unwrap();
    let o = dec.forward(&mut g, &store, y).unwrap();
    assert_eq!(g.shape(o), &[2, 96]);
    let wrong = g.constant(random(&mut rng, &[2, 6, 64])).unwrap();
    assert!(dec.forward(&mut g, &store, wrong).is_err());

    let mut s = ParamStore::<f64>::new();
    let mut r = RngState::new(3);
    let per = Decoder::new(
        &mut Builder::new(&mut s, &mut r, true),
        DecoderMode::PerSegment,
        7,
        64,
        8,
        96,
    );
    assert!(per.is_err());
}

#[test]
fn per_segment_head_concatenates_in_order() {
    let (store, dec) = decoder(DecoderMode::PerSegment, 4, 8, 12);
    let mut rng = RngState::new(4);
    let y = random(&mut rng, &[1, 4, 8]);
    let mut g = Graph::new();
    let yv = g.constant(y.clone()).unwrap();
    let o = dec.forward(&mut g, &store, yv).unwrap();
    let o = g.value(o).clone();
    assert_eq!(o.shape(), &[1, 12]);
    for n in 0..4 {
        let row = Tensor::new([1, 8], y.data()[n * 8..(n + 1) * 8].to_vec()).unwrap();
        let rv = g.constant(row).unwrap();
        let h = dec.first.forward(&mut g, &store, rv).unwrap();
        let h = g.gelu(h).unwrap();
        let p = dec.second.forward(&mut g, &store, h).unwrap();
        assert_eq!(g.value(p).data(), &o.data()[n * 3..(n + 1) * 3]);
    }
}

#[test]
fn zero_decoder_outputs_zero() {
    let (mut store, dec) = decoder(DecoderMode::Flatten, 3, 4, 5);
    for id in dec.params() {
        store.get_mut(id).tensor.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let y = g.constant(random(&mut RngState::new(5), &[2, 3, 4])).unwrap();
    let o = dec.forward(&mut g, &store, y).unwrap();
    assert!(g.value(o).data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_gradient_check() {
    let mut rng = RngState::new(6);
    let y = random(&mut rng, &[2, 3, 4]);
    for (mode, tau) in [(DecoderMode::Flatten, 5), (DecoderMode::PerSegment, 6)] {
        let (store, dec) = decoder(mode, 3, 4, tau);
        let r = random(&mut rng, &[2, tau]);
        let f = |g: &mut Graph<f64>, x: Var| {
            let o = dec.forward(g, &store, x)?;
            let rv = g.constant(r.clone())?;
            let p = g.mul(o, rv)?;
            g.sum_all(p)
        };
        let rep = gradient_check(f, &y, 1e-5, 1e-4).unwrap();
        assert!(rep.pass, "{mode:?} {rep:?}");
    }
}

fn trained_tiny() -> Model<f64> {
    let mut m = Model::new(ModelConfig::tiny(), 3).unwrap();
    m.set_trained(true);
    m
}

fn contexts(n: usize, l: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngState::new(seed);
    (0..n).map(|_| (0..l).map(|_| rng.normal::<f64>()).collect()).collect()
}

fn predict_one(m: &Model<f64>, ctx: &[f64]) -> Vec<f64> {
    predict_batch(m, &[ctx.to_vec()]).remove(0)
}

fn predict_batch(m: &Model<f64>, ctx: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat = ctx.concat();
    let out = m
        .predict(&Tensor::new([ctx.len(), ctx[0].len()], flat).unwrap())
        .unwrap();
    out.data().chunks(8).map(<[f64]>::to_vec).collect()
}

#[test]
fn single_step_equals_one_model_call() {
    let m = trained_tiny();
    let ctx = contexts(3, 32, 7);
    assert_eq!(m.forecast_normalized(&ctx, 8).unwrap(), predict_batch(&m, &ctx));
    let one = &ctx[..1];
    assert_eq!(m.forecast_normalized(one, 8).unwrap(), predict_batch(&m, one));
}

fn manual(m: &Model<f64>, ctx: &[Vec<f64>], rounds: usize) -> Vec<Vec<f64>> {
    let mut c = ctx.to_vec();
    let mut out = vec![Vec::new(); ctx.len()];
    for _ in 0..rounds {
        let p = predict_batch(m, &c);
        for ((ci, oi), pi) in c.iter_mut().zip(&mut out).zip(&p) {
            oi.extend_from_slice(pi);
            *ci = [&ci[8..], &pi[..]].concat();
        }
    }
    out
}

#[test]
fn rollout_matches_manual_composition() {
    let m = trained_tiny();
    let ctx = contexts(2, 32, 8);
    let want = manual(&m, &ctx, 3);
    assert_eq!(m.forecast_normalized(&ctx, 24).unwrap(), want);
    let partial = m.forecast_normalized(&ctx, 19).unwrap();
    for (p, w) in partial.iter().zip(&want) {
        assert_eq!(p[..], w[..19]);
    }
}

#[test]
fn raw_forecast_reuses_context_statistics() {
    let m = trained_tiny();
    let raw: Vec<f64> = contexts(1, 32, 9)[0].iter().map(|v| 10.0 + 3.0 * v).collect();
    let out = m.forecast(&[raw.clone()], 20).unwrap();
    let stats = NormStats::from_context(&raw, 1e-5);
    let norm = m.forecast_normalized(&[stats.normalize(&raw)], 20).unwrap();
    assert_eq!(out[0], stats.denormalize(&norm[0]));
    let via_raw = rollout_raw(&raw, 1e-5, 8, 20, |c| Ok(predict_one(&m, c))).unwrap();
    assert_eq!(out[0], via_raw);
}

#[test]
fn forecast_errors() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 3).unwrap();
    assert!(matches!(m.forecast(&contexts(1, 32, 1), 8), Err(Error::Untrained)));
    let m = trained_tiny();
    assert!(m.forecast(&contexts(1, 32, 1), 0).is_err());
    assert!(m.forecast(&contexts(1, 31, 1), 8).is_err());
}

#[test]
fn forecasts_are_repeatable() {
    let m = trained_tiny();
    let ctx = contexts(2, 32, 10);
    assert_eq!(
        m.forecast_normalized(&ctx, 30).unwrap(),
        m.forecast_normalized(&ctx, 30).unwrap()
    );
}

fn toy_step(c: &[f64], tau: usize) -> Vec<f64> {
    let s: f64 = c.iter().sum::<f64>() / c.len() as f64;
    (0..tau)
        .map(|i| 0.9 * s + c[c.len() - 1 - i % c.len()] * 0.1 + i as f64)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn rollout_has_exact_length(tau in 1usize..40, horizon in 1usize..400, l in 1usize..30) {
        let ctx: Vec<f64> = (0..l).map(|i| i as f64).collect();
        let mut lens = Vec::new();
        let out = rollout(&ctx, tau, horizon, |c| {
            lens.push(c.len());
            Ok(toy_step(c, tau))
        }).unwrap();
        prop_assert_eq!(out.len(), horizon);
        prop_assert_eq!(lens.len(), horizon.div_ceil(tau));
        prop_assert!(lens.iter().all(|&n| n == l));
    }

    #[test]
    fn rollout_prefixes_agree(tau in 1usize..12, k in 1usize..6, extra1 in 0usize..30, extra2 in 0usize..30) {
        let ctx: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let a = rollout(&ctx, tau, k * tau + extra1, |c| Ok(toy_step(c, tau))).unwrap();
        let b = rollout(&ctx, tau, k * tau + extra2, |c| Ok(toy_step(c, tau))).unwrap();
        prop_assert_eq!(&a[..k * tau], &b[..k * tau]);
    }
}
