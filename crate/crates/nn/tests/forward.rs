use fundus_nn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct cross-correlation with zero padding.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let (xd, wdat) = (x.data(), w.data());
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * k + ky) * k + kx;
                                acc += xd[xi] * wdat[wi];
                            }
                        }
                    }
                    out.data_mut()[((s * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    for (i, &(k, stride, pad, side)) in [
        (3, 1, 1, 7),
        (5, 1, 2, 8),
        (4, 2, 1, 8),
        (3, 2, 1, 9),
        (1, 1, 0, 5),
        (3, 1, 0, 6),
    ]
    .iter()
    .enumerate()
    {
        let x = random(&[2, 3, side, side + 1], i as u64);
        let w = random(&[4, 3, k, k], 100 + i as u64);
        let b = random(&[4], 200 + i as u64);
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xv, wv, Some(bv), stride, pad);
        let want = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(g.value(y).shape(), want.shape(), "k{k} s{stride} p{pad}");
        for (a, e) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12, "k{k} s{stride} p{pad}: {a} vs {e}");
        }
    }
}

#[test]
fn upsample_repeats_each_pixel() {
    let x = random(&[1, 2, 3, 4], 9);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.upsample2x(xv);
    let yv = g.value(y);
    assert_eq!(yv.shape(), &[1, 2, 6, 8]);
    for c in 0..2 {
        for yy in 0..6 {
            for xx in 0..8 {
                assert_eq!(
                    yv.data()[(c * 6 + yy) * 8 + xx],
                    x.data()[(c * 3 + yy / 2) * 4 + xx / 2]
                );
            }
        }
    }
}
