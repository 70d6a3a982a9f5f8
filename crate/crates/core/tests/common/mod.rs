//! Independent 64-bit reference implementations and a finite-difference
//! gradient checker shared by the integration suites.

#![allow(dead_code)]

use lgd_core::rng::SplitMix64;
use lgd_core::tensor::{Graph, Tensor, Var};

pub fn rand_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

pub fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.iter().map(|&v| v as f32).collect()).unwrap()
}

/// Values rounded through f32 so the oracle sees exactly what the engine sees.
pub fn as_f32(data: &[f64]) -> Vec<f64> {
    data.iter().map(|&v| f64::from(v as f32)).collect()
}

/// Values in `[lo, hi]` with magnitude at least `gap`, to stay clear of kinks.
pub fn away_from_zero(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.uniform(lo, hi);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect()
}

/// Max relative error `||analytic - numeric||_inf / max(||numeric||_inf, 1e-6)`
/// between the engine gradient and central differences of the f64 oracle.
pub struct GradCheck {
    pub h: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-3 }
    }
}

impl GradCheck {
    /// `engine` builds a scalar from leaf vars; `oracle` evaluates the same
    /// scalar in f64 from the flattened inputs.
    pub fn run(
        &self,
        inputs: &[(Vec<usize>, Vec<f64>)],
        engine: impl Fn(&mut Graph, &[Var]) -> Var,
        oracle: impl Fn(&[Vec<f64>]) -> f64,
    ) -> f64 {
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = inputs
            .iter()
            .map(|(s, d)| (s.clone(), as_f32(d)))
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|(s, d)| g.leaf(tensor(s, d).with_requires_grad(true)))
            .collect();
        let out = engine(&mut g, &vars);
        assert_eq!(g.value(out).numel(), 1, "engine must produce a scalar");
        g.backward(out).unwrap();

        let mut worst = 0.0f64;
        let mut point: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
        for (i, var) in vars.iter().enumerate() {
            let analytic: Vec<f64> = match g.grad(*var) {
                Some(gr) => gr.iter().map(|&v| f64::from(v)).collect(),
                None => vec![0.0; point[i].len()],
            };
            let mut numeric = vec![0.0; point[i].len()];
            for j in 0..point[i].len() {
                let orig = point[i][j];
                point[i][j] = orig + self.h;
                let plus = oracle(&point);
                point[i][j] = orig - self.h;
                let minus = oracle(&point);
                point[i][j] = orig;
                numeric[j] = (plus - minus) / (2.0 * self.h);
            }
            let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
            let diff = analytic
                .iter()
                .zip(&numeric)
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            worst = worst.max(diff / scale);
        }
        worst
    }
}

/// Engine side of a projection `sum(out ⊙ r)` turning any output into a scalar.
pub fn project(g: &mut Graph, out: Var, r: &[f64]) -> Var {
    let shape = g.shape(out).to_vec();
    let rv = g.constant(tensor(&shape, r));
    let p = g.mul(out, rv).unwrap();
    g.sum(p, &[]).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ----------------------------------------------------------------------
// tensor oracles

/// Direct nested-loop convolution, f64.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [k, _, kh, kw] = ws;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * ho * wo];
    for ni in 0..n {
        for ki in 0..k {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[ki];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let yy = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + yy as usize) * wd + xx as usize;
                                let wi = ((ki * c + ci) * kh + u) * kw + v;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((ni * k + ki) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, [n, k, ho, wo])
}

/// Triple-loop `x[n,d] · w[d,m] + b[m]`.
pub fn dense_ref(x: &[f64], w: &[f64], b: &[f64], n: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            for k in 0..d {
                acc += x[i * d + k] * w[k * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub fn softmax_ref(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn pool_ref(x: &[f64], planes: usize, h: usize, w: usize, max: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..planes {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let taps = [
                    x[p * h * w + 2 * i * w + 2 * j],
                    x[p * h * w + 2 * i * w + 2 * j + 1],
                    x[p * h * w + (2 * i + 1) * w + 2 * j],
                    x[p * h * w + (2 * i + 1) * w + 2 * j + 1],
                ];
                out.push(if max {
                    taps.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    taps.iter().sum::<f64>() / 4.0
                });
            }
        }
    }
    out
}

// ----------------------------------------------------------------------
// loss oracles

pub fn cross_entropy_ref(logits: &[f64], labels: &[usize], c: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax_ref(&logits[i * c..(i + 1) * c]);
        total -= p[y].max(1e-8).ln();
    }
    total / n as f64
}

/// Pooled cosine distance over `[n, c, hw]` features.
pub fn cosine_ref(a: &[f64], b: &[f64], n: usize, c: usize, hw: usize) -> f64 {
    let pool = |x: &[f64], i: usize| -> Vec<f64> {
        (0..c)
            .map(|k| x[(i * c + k) * hw..(i * c + k + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect()
    };
    let mut total = 0.0;
    for i in 0..n {
        let (pa, pb) = (pool(a, i), pool(b, i));
        let na = dot(&pa, &pa).sqrt().max(1e-8);
        let nb = dot(&pb, &pb).sqrt().max(1e-8);
        total += 1.0 - dot(&pa, &pb) / (na * nb);
    }
    total / n as f64
}

/// Cosine per spatial location over `[n, c, hw]` features, averaged.
pub fn cosine_per_location_ref(a: &[f64], b: &[f64], n: usize, c: usize, hw: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..hw {
            let va: Vec<f64> = (0..c).map(|k| a[(i * c + k) * hw + p]).collect();
            let vb: Vec<f64> = (0..c).map(|k| b[(i * c + k) * hw + p]).collect();
            let na = dot(&va, &va).sqrt().max(1e-8);
            let nb = dot(&vb, &vb).sqrt().max(1e-8);
            total += 1.0 - dot(&va, &vb) / (na * nb);
        }
    }
    total / (n * hw) as f64
}

pub fn mse_ref(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn dice_ref(m: &[f64], t: &[f64]) -> f64 {
    let inter: f64 = m.iter().zip(t).map(|(a, b)| a * b).sum();
    let sm: f64 = m.iter().sum();
    let st: f64 = t.iter().sum();
    1.0 - (2.0 * inter + 1.0) / (sm + st + 1.0)
}

// ----------------------------------------------------------------------
// metric oracles, computed from raw label lists

pub fn accuracy_ref(truth: &[usize], pred: &[usize]) -> f64 {
    truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

pub fn macro_f1_ref(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..k {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = truth.iter().filter(|&&t| t == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        sum += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    sum / k as f64
}

pub fn kappa_ref(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    let n = truth.len() as f64;
    let p_o = accuracy_ref(truth, pred);
    let mut p_e = 0.0;
    for c in 0..k {
        let a = truth.iter().filter(|&&t| t == c).count() as f64 / n;
        let b = pred.iter().filter(|&&p| p == c).count() as f64 / n;
        p_e += a * b;
    }
    (p_o - p_e) / (1.0 - p_e)
}

// ----------------------------------------------------------------------
// stain oracles

/// Exhaustive Otsu scan in f64: class 0 is bins `< t`; near-exact ties go to
/// the lowest `t`.
pub fn otsu_ref(hist: &[u64; 256]) -> usize {
    let occupied: Vec<usize> = (0..256).filter(|&b| hist[b] > 0).collect();
    if occupied.len() == 1 {
        return occupied[0];
    }
    let total: f64 = hist.iter().map(|&c| c as f64).sum();
    let mut best_t = 0;
    let mut best = -1.0f64;
    for t in 1..256 {
        let w0: f64 = hist[..t].iter().map(|&c| c as f64).sum();
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0: f64 = hist[..t].iter().enumerate().map(|(b, &c)| b as f64 * c as f64).sum::<f64>() / w0;
        let m1: f64 = hist[t..]
            .iter()
            .enumerate()
            .map(|(b, &c)| (b + t) as f64 * c as f64)
            .sum::<f64>()
            / w1;
        let var = (w0 / total) * (w1 / total) * (m0 - m1) * (m0 - m1);
        if var > best * (1.0 + 1e-12) {
            best = var;
            best_t = t;
        }
    }
    best_t
}

/// Symmetric boundary reflection `d c b a | a b c d`.
pub fn reflect_ref(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Dense (non-separable) 2-D Gaussian convolution with reflect padding.
pub fn gaussian_dense_ref(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            kernel.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = kernel.iter().sum();
    let side = (2 * r + 1) as usize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = kernel[(dy + r) as usize * side + (dx + r) as usize] / total;
                    let yy = reflect_ref(y as isize + dy, h);
                    let xx = reflect_ref(x as isize + dx, w);
                    acc += k * values[yy * w + xx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}
pub mod suites;
