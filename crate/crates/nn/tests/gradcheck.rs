use fundus_nn::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, 0.7).unwrap();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
}

/// Compares analytic gradients of every parameter against central differences.
fn check(store: &ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Var) {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    let h = 1e-6;
    for (name, t) in store.iter() {
        let analytic = grads
            .get(name)
            .unwrap_or_else(|| panic!("no grad for {name}"));
        for i in 0..t.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let mut gp = Graph::new();
            let lp = build(&mut gp, &plus);
            let mut gm = Graph::new();
            let lm = build(&mut gm, &minus);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs());
            let err = if scale > 1e-7 {
                (a - numeric).abs() / scale
            } else {
                (a - numeric).abs()
            };
            assert!(err < 1e-4, "{name}[{i}]: analytic {a} vs numeric {numeric}");
        }
    }
}

fn store(entries: &[(&str, &[usize], u64)]) -> ParamStore {
    let mut s = ParamStore::new();
    for &(n, shape, seed) in entries {
        s.insert(n, random(shape, seed));
    }
    s
}

#[test]
fn conv_stack_gradients() {
    let s = store(&[
        ("x", &[2, 2, 6, 6], 1),
        ("w1", &[3, 2, 3, 3], 2),
        ("b1", &[3], 3),
        ("w2", &[2, 3, 4, 4], 4),
        ("b2", &[2], 5),
        ("t", &[2, 2, 3, 3], 6),
    ]);
    check(&s, |g, s| {
        let p = s.bind(true);
        let x = p.var(g, "x");
        let w1 = p.var(g, "w1");
        let b1 = p.var(g, "b1");
        let w2 = p.var(g, "w2");
        let b2 = p.var(g, "b2");
        let t = p.var(g, "t");
        let h = g.conv2d(x, w1, Some(b1), 1, 1);
        let h = g.leaky_relu(h, 0.2);
        let h = g.conv2d(h, w2, Some(b2), 2, 1);
        let h = g.tanh(h);
        g.mean_sq_diff(h, t)
    });
}

#[test]
fn conv_gradients_across_geometries() {
    for (i, &(k, stride, pad, size)) in [
        (3, 2, 1, 7),
        (3, 2, 1, 8),
        (4, 2, 1, 8),
        (5, 1, 2, 5),
        (1, 1, 0, 4),
        (3, 1, 0, 6),
    ]
    .iter()
    .enumerate()
    {
        let seed = 10 * i as u64;
        let s = store(&[
            ("x", &[2, 2, size, size], seed + 1),
            ("w", &[3, 2, k, k], seed + 2),
            ("b", &[3], seed + 3),
        ]);
        let o = (size + 2 * pad - k) / stride + 1;
        let t = random(&[2, 3, o, o], seed + 4);
        check(&s, |g, s| {
            let p = s.bind(true);
            let x = p.var(g, "x");
            let w = p.var(g, "w");
            let b = p.var(g, "b");
            let h = g.conv2d(x, w, Some(b), stride, pad);
            let h = g.tanh(h);
            let t = g.constant(t.clone());
            g.mean_sq_diff(h, t)
        });
    }
}

#[test]
fn pooling_norm_and_upsample_gradients() {
    let s = store(&[("x", &[2, 3, 4, 4], 11), ("t", &[2, 3, 4, 4], 12)]);
    check(&s, |g, s| {
        let p = s.bind(true);
        let x = p.var(g, "x");
        let t = p.var(g, "t");
        let n = g.instance_norm(x);
        let pooled = g.avg_pool(n, 2);
        let up = g.upsample2x(pooled);
        let up3 = g.upsample(pooled, 6);
        let up3 = g.avg_pool(up3, 3);
        let up = g.add(up, up3);
        let s1 = g.sigmoid(up);
        let sq = g.mean_sq_diff(s1, t);
        let gp = g.global_avg_pool(x);
        let gp = g.reshape(gp, &[6]);
        let gp = g.reshape(gp, &[2, 3]);
        let target = Tensor::from_vec(&[2, 3], vec![0.2, 0.5, 0.3, 1.0, 0.0, 0.0]).unwrap();
        let ce = g.softmax_xent(gp, target);
        g.weighted_sum(&[(sq, 1.0), (ce, 0.5)])
    });
}

#[test]
fn concat_broadcast_linear_gradients() {
    let s = store(&[
        ("m", &[2, 2, 3, 3], 21),
        ("code", &[2, 4], 22),
        ("w", &[3, 4], 23),
        ("b", &[3], 24),
        ("wc", &[1, 5, 3, 3], 25),
    ]);
    check(&s, |g, s| {
        let p = s.bind(true);
        let m = p.var(g, "m");
        let code = p.var(g, "code");
        let w = p.var(g, "w");
        let b = p.var(g, "b");
        let wc = p.var(g, "wc");
        let c = g.linear(code, w, Some(b));
        let c = g.relu(c);
        let tiled = g.broadcast_spatial(c, 3, 3);
        let cat = g.concat_channels(m, tiled);
        let y = g.conv2d(cat, wc, None, 1, 1);
        let y = g.scale(y, 0.5);
        let shift = g.constant(Tensor::full(&[2, 1, 3, 3], 0.05));
        let y = g.add(y, shift);
        let t = Tensor::from_vec(
            &[2, 1, 3, 3],
            (0..18).map(|i| (i % 3) as f64 / 2.0).collect(),
        )
        .unwrap();
        let a = g.bce_clamped(y, 1.0);
        let b = g.bce_clamped_with(y, t);
        g.add(a, b)
    });
}

#[test]
fn l1_gradient_away_from_kinks() {
    let s = store(&[("a", &[1, 3, 2, 2], 31)]);
    check(&s, |g, s| {
        let p = s.bind(true);
        let a = p.var(g, "a");
        let b = g.constant(Tensor::full(&[1, 3, 2, 2], 0.0123));
        g.mean_abs_diff(a, b)
    });
}

#[test]
fn clamped_bce_saturates_to_zero_gradient() {
    let mut s = ParamStore::new();
    s.insert("z", Tensor::from_vec(&[2], vec![40.0, -40.0]).unwrap());
    let mut g = Graph::new();
    let z = s.bind(true).var(&mut g, "z");
    let l = g.bce_clamped(z, 1.0);
    // sigmoid(-40) clamps at 1e-7, so that element contributes -ln(1e-7)/2.
    assert!(
        (g.value(l).item() - (-(1e-7f64).ln() / 2.0 - (1.0 - 1e-7f64).ln() / 2.0)).abs() < 1e-9
    );
    let grads = g.backward(l);
    assert_eq!(grads["z"].data(), &[0.0, 0.0]);
}

proptest! {
    #[test]
    fn serialization_round_trips(values in prop::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..5) {
        let n = values.len();
        let rows = if n % split == 0 { split } else { 1 };
        let t = Tensor::from_vec(&[rows, n / rows], values).unwrap();
        let mut m = std::collections::BTreeMap::new();
        m.insert("layer.w".to_string(), t);
        m.insert("other".to_string(), Tensor::scalar(-0.0));
        let mut buf = Vec::new();
        fundus_nn::io::write_tensors(&mut buf, &m).unwrap();
        let back = fundus_nn::io::read_tensors(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, m);
    }
}
