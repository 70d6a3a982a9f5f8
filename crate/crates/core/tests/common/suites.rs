//! Randomised check suites reused by the focused test files and by the
//! acceptance report. Each entry is `(name, worst error)`.

use lgd_core::losses::{cosine_distill, cross_entropy, membrane_dice, nuclei_mse, CosineMode};
use lgd_core::metrics::{accuracy, cohen_kappa, macro_f1, ConfusionMatrix};
use lgd_core::model::{LgdNet, ModelKind};
use lgd_core::rng::SplitMix64;
use lgd_core::stain::{deconvolve, gaussian_filter, otsu_threshold, StainMatrix};
use lgd_core::tensor::{Graph, PoolKind, Var};

use super::*;

pub const GRAD_INSTANCES: usize = 20;
pub const ORACLE_INSTANCES: usize = 100;

type UnaryCase = (&'static str, fn(&mut Graph, Var) -> Var, fn(f64) -> f64, (f64, f64, f64));

type Check = (&'static str, f64);

fn worst(checks: impl Iterator<Item = f64>) -> f64 {
    checks.fold(0.0, f64::max)
}

fn unary_case(
    rng: &mut SplitMix64,
    gc: &GradCheck,
    data: Vec<f64>,
    engine: impl Fn(&mut Graph, Var) -> Var,
    f: impl Fn(f64) -> f64,
) -> f64 {
    let n = data.len();
    let r = rand_vec(rng, n, -1.0, 1.0);
    gc.run(
        &[(vec![2, n / 2], data)],
        |g, v| {
            let out = engine(g, v[0]);
            project(g, out, &r)
        },
        |x| x[0].iter().zip(&r).map(|(&v, &w)| f(v) * w).sum(),
    )
}

/// Central-difference checks of every differentiable op and loss.
pub fn gradient_suite() -> Vec<Check> {
    let gc = GradCheck::default();
    let mut rng = SplitMix64::new(0x6772_6164);
    let mut out: Vec<Check> = Vec::new();
    let n = GRAD_INSTANCES;

    let unaries: [UnaryCase; 10] = [
        ("relu", |g, x| g.relu(x), |v| v.max(0.0), (-2.0, 2.0, 0.01)),
        ("sigmoid", |g, x| g.sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()), (-3.0, 3.0, 0.0)),
        ("log", |g, x| g.log(x), f64::ln, (0.2, 3.0, 0.0)),
        ("exp", |g, x| g.exp(x), f64::exp, (-2.0, 2.0, 0.0)),
        ("neg", |g, x| g.neg(x), |v| -v, (-2.0, 2.0, 0.0)),
        ("sqrt", |g, x| g.sqrt(x), f64::sqrt, (0.2, 3.0, 0.0)),
        ("square", |g, x| g.square(x), |v| v * v, (-2.0, 2.0, 0.0)),
        ("scale", |g, x| g.scale(x, -1.5), |v| -1.5 * v, (-2.0, 2.0, 0.0)),
        ("add_scalar", |g, x| g.add_scalar(x, 0.7), |v| v + 0.7, (-2.0, 2.0, 0.0)),
        ("clamp_min", |g, x| g.clamp_min(x, 0.25), |v| v.max(0.25), (-2.0, 2.0, 0.0)),
    ];
    for (name, engine, f, (lo, hi, gap)) in unaries {
        let e = worst((0..n).map(|_| {
            let mut data = if gap > 0.0 {
                away_from_zero(&mut rng, 6, lo, hi, gap)
            } else {
                rand_vec(&mut rng, 6, lo, hi)
            };
            if name == "clamp_min" {
                data.iter_mut().for_each(|v| {
                    if (*v - 0.25).abs() < 0.01 {
                        *v += 0.05;
                    }
                });
            }
            unary_case(&mut rng, &gc, data, engine, f)
        }));
        out.push((name, e));
    }

    // broadcasting binaries: [2,3,4] with [3,1]
    let binaries: [(&str, u8); 4] = [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)];
    for (name, kind) in binaries {
        let e = worst((0..n).map(|_| {
            let a = rand_vec(&mut rng, 24, -2.0, 2.0);
            let b = rand_vec(&mut rng, 3, 0.5, 2.0);
            let r = rand_vec(&mut rng, 24, -1.0, 1.0);
            gc.run(
                &[(vec![2, 3, 4], a), (vec![3, 1], b)],
                |g, v| {
                    let o = match kind {
                        0 => g.add(v[0], v[1]),
                        1 => g.sub(v[0], v[1]),
                        2 => g.mul(v[0], v[1]),
                        _ => g.div(v[0], v[1]),
                    }
                    .unwrap();
                    project(g, o, &r)
                },
                |x| {
                    let mut s = 0.0;
                    for i in 0..2 {
                        for j in 0..3 {
                            for k in 0..4 {
                                let idx = (i * 3 + j) * 4 + k;
                                let (p, q) = (x[0][idx], x[1][j]);
                                let v = match kind {
                                    0 => p + q,
                                    1 => p - q,
                                    2 => p * q,
                                    _ => p / q,
                                };
                                s += v * r[idx];
                            }
                        }
                    }
                    s
                },
            )
        }));
        out.push((name, e));
    }

    // reshape then concat along axis 1
    out.push((
        "reshape+concat",
        worst((0..n).map(|_| {
            let a = rand_vec(&mut rng, 12, -1.0, 1.0);
            let b = rand_vec(&mut rng, 6, -1.0, 1.0);
            let r = rand_vec(&mut rng, 18, -1.0, 1.0);
            gc.run(
                &[(vec![12], a), (vec![2, 3], b)],
                |g, v| {
                    let a = g.reshape(v[0], &[2, 2, 3]).unwrap();
                    let b = g.reshape(v[1], &[2, 1, 3]).unwrap();
                    let c = g.concat(&[a, b], 1).unwrap();
                    project(g, c, &r)
                },
                |x| {
                    let mut s = 0.0;
                    for i in 0..2 {
                        for j in 0..3 {
                            for k in 0..3 {
                                let v = if j < 2 { x[0][(i * 2 + j) * 3 + k] } else { x[1][i * 3 + k] };
                                s += v * r[(i * 3 + j) * 3 + k];
                            }
                        }
                    }
                    s
                },
            )
        })),
    ));

    // reductions over axis 1 of [2,3,4]
    for (name, kind) in [("sum", 0u8), ("mean", 1), ("max", 2)] {
        let e = worst((0..n).map(|_| {
            // distinct values, spaced well beyond the step size
            let mut a: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
            rng.shuffle(&mut a);
            let r = rand_vec(&mut rng, 8, -1.0, 1.0);
            gc.run(
                &[(vec![2, 3, 4], a)],
                |g, v| {
                    let o = match kind {
                        0 => g.sum(v[0], &[1]),
                        1 => g.mean(v[0], &[1]),
                        _ => g.max(v[0], &[1]),
                    }
                    .unwrap();
                    project(g, o, &r)
                },
                |x| {
                    let mut s = 0.0;
                    for i in 0..2 {
                        for k in 0..4 {
                            let vals = (0..3).map(|j| x[0][(i * 3 + j) * 4 + k]);
                            let v = match kind {
                                0 => vals.sum(),
                                1 => vals.sum::<f64>() / 3.0,
                                _ => vals.fold(f64::NEG_INFINITY, f64::max),
                            };
                            s += v * r[i * 4 + k];
                        }
                    }
                    s
                },
            )
        }));
        out.push((name, e));
    }

    out.push((
        "softmax",
        worst((0..n).map(|_| {
            let a = rand_vec(&mut rng, 12, -3.0, 3.0);
            let r = rand_vec(&mut rng, 12, -1.0, 1.0);
            gc.run(
                &[(vec![3, 4], a)],
                |g, v| {
                    let o = g.softmax(v[0]).unwrap();
                    project(g, o, &r)
                },
                |x| {
                    (0..3)
                        .map(|i| dot(&softmax_ref(&x[0][i * 4..i * 4 + 4]), &r[i * 4..i * 4 + 4]))
                        .sum()
                },
            )
        })),
    ));

    for (name, stride, pad) in [("conv2d", 1usize, 1usize), ("conv2d_strided", 2, 0)] {
        let e = worst((0..n).map(|_| {
            let x = rand_vec(&mut rng, 2 * 2 * 5 * 5, -1.0, 1.0);
            let w = rand_vec(&mut rng, 3 * 2 * 3 * 3, -1.0, 1.0);
            let b = rand_vec(&mut rng, 3, -1.0, 1.0);
            let (_, os) = conv2d_ref(&x, [2, 2, 5, 5], &w, [3, 2, 3, 3], &b, stride, pad);
            let r = rand_vec(&mut rng, os.iter().product(), -1.0, 1.0);
            gc.run(
                &[(vec![2, 2, 5, 5], x), (vec![3, 2, 3, 3], w), (vec![3], b)],
                |g, v| {
                    let o = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                    project(g, o, &r)
                },
                |x| dot(&conv2d_ref(&x[0], [2, 2, 5, 5], &x[1], [3, 2, 3, 3], &x[2], stride, pad).0, &r),
            )
        }));
        out.push((name, e));
    }

    out.push((
        "dense",
        worst((0..n).map(|_| {
            let x = rand_vec(&mut rng, 12, -1.0, 1.0);
            let w = rand_vec(&mut rng, 8, -1.0, 1.0);
            let b = rand_vec(&mut rng, 2, -1.0, 1.0);
            let r = rand_vec(&mut rng, 6, -1.0, 1.0);
            gc.run(
                &[(vec![3, 4], x), (vec![4, 2], w), (vec![2], b)],
                |g, v| {
                    let o = g.dense(v[0], v[1], v[2]).unwrap();
                    project(g, o, &r)
                },
                |x| dot(&dense_ref(&x[0], &x[1], &x[2], 3, 4, 2), &r),
            )
        })),
    ));

    for (name, kind) in [("max_pool", PoolKind::Max), ("avg_pool", PoolKind::Avg)] {
        let e = worst((0..n).map(|_| {
            let mut x: Vec<f64> = (0..32).map(|i| i as f64 * 0.05 - 0.8).collect();
            rng.shuffle(&mut x);
            let r = rand_vec(&mut rng, 8, -1.0, 1.0);
            gc.run(
                &[(vec![1, 2, 4, 4], x)],
                |g, v| {
                    let o = g.pool2d(v[0], kind).unwrap();
                    project(g, o, &r)
                },
                |x| dot(&pool_ref(&x[0], 2, 4, 4, kind == PoolKind::Max), &r),
            )
        }));
        out.push((name, e));
    }

    out.push(("mlp_3_layer", worst((0..n).map(|_| mlp_case(&mut rng, &gc)))));

    out.push((
        "cross_entropy",
        worst((0..n).map(|_| {
            let l = rand_vec(&mut rng, 12, -3.0, 3.0);
            let labels: Vec<usize> = (0..3).map(|_| rng.range(0, 4) as usize).collect();
            gc.run(
                &[(vec![3, 4], l)],
                |g, v| cross_entropy(g, v[0], &labels).unwrap(),
                |x| cross_entropy_ref(&x[0], &labels, 4),
            )
        })),
    ));

    for (name, mode) in [
        ("cosine_pooled", CosineMode::Pooled),
        ("cosine_per_location", CosineMode::PerLocation),
    ] {
        let e = worst((0..n).map(|_| {
            let a = rand_vec(&mut rng, 2 * 3 * 4, -1.0, 1.0);
            let b = rand_vec(&mut rng, 2 * 3 * 4, -1.0, 1.0);
            // the target side is detached, so only the hallucinated side is checked
            let b = as_f32(&b);
            gc.run(
                &[(vec![2, 3, 2, 2], a)],
                |g, v| {
                    let t = g.constant(tensor(&[2, 3, 2, 2], &b));
                    cosine_distill(g, v[0], t, mode).unwrap()
                },
                |x| match mode {
                    CosineMode::Pooled => cosine_ref(&x[0], &b, 2, 3, 4),
                    CosineMode::PerLocation => cosine_per_location_ref(&x[0], &b, 2, 3, 4),
                },
            )
        }));
        out.push((name, e));
    }

    out.push((
        "nuclei_mse",
        worst((0..n).map(|_| {
            let a = rand_vec(&mut rng, 16, 0.0, 2.0);
            let b = rand_vec(&mut rng, 16, 0.0, 2.0);
            gc.run(
                &[(vec![2, 1, 2, 4], a), (vec![2, 1, 2, 4], b)],
                |g, v| nuclei_mse(g, v[0], v[1]).unwrap(),
                |x| mse_ref(&x[0], &x[1]),
            )
        })),
    ));

    out.push((
        "membrane_dice",
        worst((0..n).map(|_| {
            let m = rand_vec(&mut rng, 16, 0.01, 0.99);
            let t: Vec<f64> = (0..16).map(|_| rng.range(0, 2) as f64).collect();
            gc.run(
                &[(vec![2, 1, 2, 4], m)],
                |g, v| {
                    let t = g.constant(tensor(&[2, 1, 2, 4], &t));
                    membrane_dice(g, v[0], t).unwrap()
                },
                |x| dice_ref(&x[0], &t),
            )
        })),
    ));

    out.push(("fusion", worst((0..3).map(|i| fusion_case(i as u64, &gc)))));
    out
}

/// Three dense layers with relu, scalar cross-entropy loss. Instances with
/// pre-activations near the relu kink are redrawn.
fn mlp_case(rng: &mut SplitMix64, gc: &GradCheck) -> f64 {
    let dims = [4usize, 5, 5, 3];
    loop {
        let x = rand_vec(rng, 2 * dims[0], -1.0, 1.0);
        let mut inputs = vec![(vec![2, dims[0]], x)];
        for l in 0..3 {
            inputs.push((vec![dims[l], dims[l + 1]], rand_vec(rng, dims[l] * dims[l + 1], -1.0, 1.0)));
            inputs.push((vec![dims[l + 1]], rand_vec(rng, dims[l + 1], -0.5, 0.5)));
        }
        let labels = vec![rng.range(0, 3) as usize, rng.range(0, 3) as usize];
        let forward = |x: &[Vec<f64>], margin: &mut f64| -> f64 {
            let mut h = x[0].clone();
            for l in 0..3 {
                h = dense_ref(&h, &x[1 + 2 * l], &x[2 + 2 * l], 2, dims[l], dims[l + 1]);
                if l < 2 {
                    for v in h.iter_mut() {
                        *margin = margin.min(v.abs());
                        *v = v.max(0.0);
                    }
                }
            }
            cross_entropy_ref(&h, &labels, 3)
        };
        let rounded: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| as_f32(d)).collect();
        let mut margin = f64::INFINITY;
        forward(&rounded, &mut margin);
        if margin < 0.05 {
            continue;
        }
        return gc.run(
            &inputs,
            |g, v| {
                let mut h = v[0];
                for l in 0..3 {
                    h = g.dense(h, v[1 + 2 * l], v[2 + 2 * l]).unwrap();
                    if l < 2 {
                        h = g.relu(h);
                    }
                }
                cross_entropy(g, h, &labels).unwrap()
            },
            |x| forward(x, &mut 0.0),
        );
    }
}

/// Gradient of the attention fusion with respect to both feature inputs.
fn fusion_case(seed: u64, gc: &GradCheck) -> f64 {
    let net = LgdNet::new(ModelKind::C, 100 + seed).unwrap();
    let p = |name: &str| -> Vec<f64> {
        net.params().get(name).unwrap().data().iter().map(|&v| f64::from(v)).collect()
    };
    let (w1, b1, w2, b2) = (
        p("fusion.mlp1.weight"),
        p("fusion.mlp1.bias"),
        p("fusion.mlp2.weight"),
        p("fusion.mlp2.bias"),
    );
    let (ws, bs) = (p("fusion.spatial.weight"), p("fusion.spatial.bias"));
    let (c, hw, hidden) = (64usize, 4usize, w1.len() / 128);
    let mut rng = SplitMix64::new(seed);
    let a = rand_vec(&mut rng, c * hw, -1.0, 1.0);
    let b = rand_vec(&mut rng, c * hw, -1.0, 1.0);
    let r = rand_vec(&mut rng, 2 * c * hw, -1.0, 1.0);
    let oracle = |x: &[Vec<f64>]| -> f64 {
        let cat: Vec<f64> = x[0].iter().chain(&x[1]).cloned().collect();
        let cc = 2 * c;
        let avg: Vec<f64> = (0..cc).map(|k| cat[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let mx: Vec<f64> = (0..cc)
            .map(|k| cat[k * hw..(k + 1) * hw].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mlp = |v: &[f64]| -> Vec<f64> {
            let h: Vec<f64> = dense_ref(v, &w1, &b1, 1, cc, hidden).into_iter().map(|z| z.max(0.0)).collect();
            dense_ref(&h, &w2, &b2, 1, hidden, cc)
        };
        let (ca, cm) = (mlp(&avg), mlp(&mx));
        let mut s = 0.0;
        for pos in 0..hw {
            let spatial = bs[0] + (0..cc).map(|k| ws[k] * cat[k * hw + pos]).sum::<f64>();
            for k in 0..cc {
                let att = 1.0 / (1.0 + (-(ca[k] + cm[k]) * spatial).exp());
                s += cat[k * hw + pos] * att * r[k * hw + pos];
            }
        }
        s
    };
    gc.run(
        &[(vec![1, c, 2, 2], a), (vec![1, c, 2, 2], b)],
        |g, v| {
            let f = net.fuse(g, v[0], v[1]).unwrap();
            project(g, f.fused, &r)
        },
        oracle,
    )
}

fn random_labels(rng: &mut SplitMix64, n: usize, k: u64) -> Vec<usize> {
    (0..n).map(|_| rng.range(0, k) as usize).collect()
}

/// Loss and metric values against the oracles; worst absolute error.
pub fn oracle_suite() -> Vec<Check> {
    let mut rng = SplitMix64::new(0x6f72_6163);
    let mut out: Vec<Check> = Vec::new();
    let n = ORACLE_INSTANCES;
    let scalar = |g: &Graph, v: Var| f64::from(g.value(v).item());

    out.push((
        "cross_entropy",
        worst((0..n).map(|_| {
            let l = as_f32(&rand_vec(&mut rng, 16, -4.0, 4.0));
            let labels = random_labels(&mut rng, 4, 4);
            let mut g = Graph::new();
            let v = g.constant(tensor(&[4, 4], &l));
            let ce = cross_entropy(&mut g, v, &labels).unwrap();
            (scalar(&g, ce) - cross_entropy_ref(&l, &labels, 4)).abs()
        })),
    ));
    out.push((
        "cosine",
        worst((0..n).map(|_| {
            let a = as_f32(&rand_vec(&mut rng, 2 * 8 * 4, -1.0, 1.0));
            let b = as_f32(&rand_vec(&mut rng, 2 * 8 * 4, -1.0, 1.0));
            let mut g = Graph::new();
            let va = g.constant(tensor(&[2, 8, 2, 2], &a));
            let vb = g.constant(tensor(&[2, 8, 2, 2], &b));
            let d = cosine_distill(&mut g, va, vb, CosineMode::Pooled).unwrap();
            (scalar(&g, d) - cosine_ref(&a, &b, 2, 8, 4)).abs()
        })),
    ));
    out.push((
        "dice",
        worst((0..n).map(|_| {
            let m = as_f32(&rand_vec(&mut rng, 64, 0.0, 1.0));
            let t: Vec<f64> = (0..64).map(|_| rng.range(0, 2) as f64).collect();
            let mut g = Graph::new();
            let vm = g.constant(tensor(&[1, 1, 8, 8], &m));
            let vt = g.constant(tensor(&[1, 1, 8, 8], &t));
            let d = membrane_dice(&mut g, vm, vt).unwrap();
            (scalar(&g, d) - dice_ref(&m, &t)).abs()
        })),
    ));
    out.push((
        "mse",
        worst((0..n).map(|_| {
            let a = as_f32(&rand_vec(&mut rng, 64, 0.0, 1.0));
            let b = as_f32(&rand_vec(&mut rng, 64, 0.0, 1.0));
            let mut g = Graph::new();
            let va = g.constant(tensor(&[1, 1, 8, 8], &a));
            let vb = g.constant(tensor(&[1, 1, 8, 8], &b));
            let d = nuclei_mse(&mut g, va, vb).unwrap();
            (scalar(&g, d) - mse_ref(&a, &b)).abs()
        })),
    ));

    let mut acc_err = 0.0f64;
    let mut f1_err = 0.0f64;
    let mut kappa_err = 0.0f64;
    let mut done = 0;
    while done < n {
        let len = rng.range(5, 60) as usize;
        let truth = random_labels(&mut rng, len, 4);
        // mostly-correct predictions with random errors
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.next_f64() < 0.6 { t } else { rng.range(0, 4) as usize })
            .collect();
        let cm = ConfusionMatrix::from_predictions(4, &truth, &pred).unwrap();
        let kr = kappa_ref(&truth, &pred, 4);
        if !kr.is_finite() {
            continue;
        }
        acc_err = acc_err.max((accuracy(&cm).unwrap() - accuracy_ref(&truth, &pred)).abs());
        f1_err = f1_err.max((macro_f1(&cm).unwrap() - macro_f1_ref(&truth, &pred, 4)).abs());
        kappa_err = kappa_err.max((cohen_kappa(&cm).unwrap() - kr).abs());
        done += 1;
    }
    out.push(("accuracy", acc_err));
    out.push(("macro_f1", f1_err));
    out.push(("kappa", kappa_err));
    out
}

/// Deconvolution round trip over random concentration triples.
pub fn deconvolution_roundtrip(instances: usize) -> f64 {
    let mut rng = SplitMix64::new(0x6465_636f);
    let m = StainMatrix::hed();
    let concs: Vec<[f64; 3]> = (0..instances)
        .map(|_| [rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)])
        .collect();
    let od: Vec<[f64; 3]> = concs.iter().map(|c| m.mix(*c)).collect();
    deconvolve(&od, &m)
        .iter()
        .zip(&concs)
        .flat_map(|(got, want)| (0..3).map(move |k| (got[k] - want[k]).abs()))
        .fold(0.0, f64::max)
}

/// Number of random histograms on which Otsu disagrees with the exhaustive
/// scan.
pub fn otsu_mismatches(instances: usize) -> usize {
    let mut rng = SplitMix64::new(0x6f74_7375);
    (0..instances)
        .filter(|&i| {
            let mut hist = [0u64; 256];
            match i % 4 {
                // sparse spikes
                0 => {
                    for _ in 0..rng.range(2, 6) {
                        hist[rng.range(0, 256) as usize] += rng.range(1, 500);
                    }
                }
                // bimodal blobs
                1 => {
                    for _ in 0..2000 {
                        let centre = if rng.next_f64() < 0.5 { 60.0 } else { 180.0 };
                        let b = (centre + 25.0 * rng.normal()).clamp(0.0, 255.0) as usize;
                        hist[b] += 1;
                    }
                }
                // uniform-ish noise
                _ => {
                    for h in hist.iter_mut() {
                        *h = rng.range(0, 50);
                    }
                }
            }
            if hist.iter().sum::<u64>() == 0 {
                hist[0] = 1;
            }
            otsu_threshold(&hist).unwrap() != otsu_ref(&hist)
        })
        .count()
}

/// Separable Gaussian filter against the dense 2-D oracle.
pub fn gaussian_separable_error(instances: usize) -> f64 {
    let mut rng = SplitMix64::new(0x6761_7573);
    worst((0..instances).map(|i| {
        let (w, h) = (8 + i % 5, 8 + (i / 5) % 4);
        let sigma = rng.uniform(0.5, 3.0);
        let v = rand_vec(&mut rng, w * h, 0.0, 1.0);
        let got = gaussian_filter(&v, w, h, sigma).unwrap();
        let want = gaussian_dense_ref(&v, w, h, sigma);
        got.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }))
}
