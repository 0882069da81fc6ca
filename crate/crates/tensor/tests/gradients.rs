use kline_tensor::gradcheck::check_gradients;
use kline_tensor::{Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        ps.add("w1", random(&mut rng, &[4, 5]));
        ps.add("b1", random(&mut rng, &[5]));
        ps.add("w2", random(&mut rng, &[5, 5]));
        ps.add("w3", random(&mut rng, &[5, 3]));
        let x = random(&mut rng, &[6, 4]);
        let targets = [0usize, 2, 1, 1, 0, 2];
        let report = check_gradients(&ps, 1e-5, |g, p| {
            let x = g.constant(x.clone());
            let h = g.matmul(x, p[0])?;
            let h = g.add(h, p[1])?;
            let h = g.tanh(h);
            let h = g.matmul(h, p[2])?;
            let h = g.silu(h);
            let logits = g.matmul(h, p[3])?;
            let lp = g.log_softmax(logits);
            let picked = g.pick(lp, &targets)?;
            let m = g.mean(picked);
            Ok(g.neg(m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn layout_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamSet::new();
    ps.add("a", random(&mut rng, &[3, 4]));
    ps.add("table", random(&mut rng, &[5, 4]));
    let w = random(&mut rng, &[3, 8]);
    let report = check_gradients(&ps, 1e-5, |g, p| {
        let left = g.narrow(p[0], 1, 1, 2)?;
        let right = g.transpose(p[0])?;
        let right = g.reshape(right, &[3, 4])?;
        let emb = g.embedding(p[1], &[4, 0, 4])?;
        let cat = g.concat(&[left, right, emb], 1)?;
        let cat = g.narrow(cat, 1, 0, 8)?;
        let w = g.constant(w.clone());
        let y = g.mul(cat, w)?;
        let s = g.softmax(y);
        let d = g.sum_axis(s, 0)?;
        let e = g.exp(d);
        let sq = g.sqrt(e);
        let den = g.add_scalar(sq, 1.0);
        let q = g.div(sq, den)?;
        let l = g.log(q);
        let masked = g.masked_fill(l, &[true, false, false, true, false, false, false, false], 0.0)?;
        Ok(g.sum(masked))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn straight_through_surrogate_matches_finite_differences() {
    // loss(x) = sum((st(x) - t) * x) where st forwards sign(x). The numeric
    // side differentiates the surrogate x + c with c = sign(x0) - x0 frozen
    // at the base point, which is what the estimator claims to compute.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random(&mut rng, &[6]);
    let target = random(&mut rng, &[6]);
    let signs = x0.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });

    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let q = g.constant(signs.clone());
    let st = g.straight_through(x, q).unwrap();
    let t = g.constant(target.clone());
    let d = g.sub(st, t).unwrap();
    let prod = g.mul(d, x).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let analytic = g.grad(x).unwrap();

    let c: Vec<f64> = signs.data().iter().zip(x0.data()).map(|(s, x)| s - x).collect();
    let surrogate = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&c)
            .zip(target.data())
            .map(|((x, c), t)| (x + c - t) * x)
            .sum()
    };
    let h = 1e-5;
    for i in 0..6 {
        let mut p = x0.data().to_vec();
        p[i] += h;
        let plus = surrogate(&p);
        p[i] -= 2.0 * h;
        let minus = surrogate(&p);
        let numeric = (plus - minus) / (2.0 * h);
        let err = kline_tensor::gradcheck::relative_error(analytic.data()[i], numeric);
        assert!(err < 1e-4, "entry {i}: {} vs {numeric}", analytic.data()[i]);
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random(&mut rng, &[8, 8]);
    let x = random(&mut rng, &[4, 8]);
    let run = || {
        let mut g = Graph::new();
        let wv = g.leaf(w.clone());
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, wv).unwrap();
        let h = g.softmax(h);
        let l = g.sum(h);
        let l2 = g.mul(l, l).unwrap();
        g.backward(l2).unwrap();
        g.grad(wv).unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        vals in prop::collection::vec(-50.0f64..50.0, 1..40),
    ) {
        let cols = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r as f64 + 1.0))).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
