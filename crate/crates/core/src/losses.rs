//! Training objectives and their weighted composition.
//!
//! Every loss is built on a [`Graph`] so its gradient reaches the model;
//! batch reduction is always the mean.

use serde::{Deserialize, Serialize};

use crate::error::{LgdError, Result};
use crate::model::Variant;
use crate::tensor::{Graph, Tensor, Var};

/// Norm clamp inside the cosine distance.
pub const COSINE_EPS: f32 = 1e-8;
/// Additive smoothing of the soft Dice loss.
pub const DICE_EPS: f32 = 1.0;

/// Weights of the distillation and auxiliary terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 10.0,
            lambda_n: 5.0,
            lambda_m: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_n", self.lambda_n),
            ("lambda_m", self.lambda_m),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LgdError::InvalidArgument(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar values of every term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub dist: f64,
    pub nuc: f64,
    pub mem: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `cls + λd·dist + λn·nuc + λm·mem`.
    pub fn compose(cls: f64, dist: f64, nuc: f64, mem: f64, w: &LossWeights) -> Self {
        Self {
            cls,
            dist,
            nuc,
            mem,
            total: cls + w.lambda_d * dist + w.lambda_n * nuc + w.lambda_m * mem,
        }
    }

    /// Component-wise sum, used to average over batches.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.dist += other.dist;
        self.nuc += other.nuc;
        self.mem += other.mem;
        self.total += other.total;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            cls: self.cls * factor,
            dist: self.dist * factor,
            nuc: self.nuc * factor,
            mem: self.mem * factor,
            total: self.total * factor,
        }
    }
}

/// Per-term graph nodes; `None` for terms the variant does not use.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub dist: Option<Var>,
    pub nuc: Option<Var>,
    pub mem: Option<Var>,
}

/// How the cosine distance treats spatial feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CosineMode {
    /// Global average pooling to one vector per sample.
    #[default]
    Pooled,
    /// Cosine per spatial location, averaged.
    PerLocation,
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(LgdError::InvalidShape(format!(
            "cross_entropy expects [N, C] logits for {} labels, got {shape:?}",
            labels.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let mut onehot = vec![0.0f32; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(LgdError::InvalidLabel(y));
        }
        onehot[i * c + y] = 1.0;
    }
    let p = g.softmax(logits)?;
    let logp = g.log(p);
    let target = g.constant(Tensor::new(&[n, c], onehot)?);
    let picked = g.mul(logp, target)?;
    let total = g.sum(picked, &[])?;
    Ok(g.scale(total, -1.0 / n as f32))
}

/// `1 - cos(ẑ, z)` averaged over the batch. `z_real` is detached.
pub fn cosine_distill(g: &mut Graph, z_hat: Var, z_real: Var, mode: CosineMode) -> Result<Var> {
    if g.shape(z_hat) != g.shape(z_real) {
        return Err(LgdError::InvalidShape(format!(
            "cosine_distill shapes differ: {:?} vs {:?}",
            g.shape(z_hat),
            g.shape(z_real)
        )));
    }
    let rank = g.shape(z_hat).len();
    if rank < 2 {
        return Err(LgdError::InvalidShape(
            "cosine_distill expects [N, C, ...] features".into(),
        ));
    }
    let z_real = g.detach(z_real);
    let (a, b) = match mode {
        CosineMode::Pooled if rank > 2 => {
            let axes: Vec<usize> = (2..rank).collect();
            (g.mean(z_hat, &axes)?, g.mean(z_real, &axes)?)
        }
        _ => (z_hat, z_real),
    };
    let ab = g.mul(a, b)?;
    let dot = g.sum(ab, &[1])?;
    let aa = g.square(a);
    let na = g.sum(aa, &[1])?;
    let na = g.sqrt(na);
    let na = g.clamp_min(na, COSINE_EPS);
    let bb = g.square(b);
    let nb = g.sum(bb, &[1])?;
    let nb = g.sqrt(nb);
    let nb = g.clamp_min(nb, COSINE_EPS);
    let denom = g.mul(na, nb)?;
    let cos = g.div(dot, denom)?;
    let mean_cos = g.mean(cos, &[])?;
    let neg = g.neg(mean_cos);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean squared error over every cell and sample.
pub fn nuclei_mse(g: &mut Graph, k_hat: Var, k_gt: Var) -> Result<Var> {
    if g.shape(k_hat) != g.shape(k_gt) {
        return Err(LgdError::InvalidShape(format!(
            "nuclei_mse shapes differ: {:?} vs {:?}",
            g.shape(k_hat),
            g.shape(k_gt)
        )));
    }
    let d = g.sub(k_hat, k_gt)?;
    let sq = g.square(d);
    g.mean(sq, &[])
}

/// Batch-summed soft Dice loss `1 - (2·Σ m·t + ε)/(Σ m + Σ t + ε)`.
pub fn membrane_dice(g: &mut Graph, m_hat: Var, m_gt: Var) -> Result<Var> {
    if g.shape(m_hat) != g.shape(m_gt) {
        return Err(LgdError::InvalidShape(format!(
            "membrane_dice shapes differ: {:?} vs {:?}",
            g.shape(m_hat),
            g.shape(m_gt)
        )));
    }
    let prod = g.mul(m_hat, m_gt)?;
    let inter = g.sum(prod, &[])?;
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let sh = g.sum(m_hat, &[])?;
    let sg = g.sum(m_gt, &[])?;
    let den = g.add(sh, sg)?;
    let den = g.add_scalar(den, DICE_EPS);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio);
    Ok(g.add_scalar(neg, 1.0))
}

/// Weighted composite objective. Terms must be present exactly when the
/// variant enables them.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossTerms,
    weights: &LossWeights,
    variant: Variant,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let checks = [
        ("distillation", variant.distillation(), terms.dist.is_some()),
        ("nuclei", variant.nuclei_aux, terms.nuc.is_some()),
        ("membrane", variant.membrane_aux, terms.mem.is_some()),
    ];
    for (name, enabled, present) in checks {
        if enabled != present {
            let state = if enabled { "enabled but missing" } else { "present but disabled" };
            return Err(LgdError::InconsistentVariant(format!("{name} term {state}")));
        }
    }
    let scalar = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| f64::from(g.value(v).item()));
    let breakdown = LossBreakdown::compose(
        scalar(g, Some(terms.cls)),
        scalar(g, terms.dist),
        scalar(g, terms.nuc),
        scalar(g, terms.mem),
        weights,
    );
    let mut total = terms.cls;
    for (term, lambda) in [
        (terms.dist, weights.lambda_d),
        (terms.nuc, weights.lambda_n),
        (terms.mem, weights.lambda_m),
    ] {
        if let Some(t) = term {
            let weighted = g.scale(t, lambda as f32);
            total = g.add(total, weighted)?;
        }
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, v: Var) -> f64 {
        f64::from(g.value(v).item())
    }

    #[test]
    fn cross_entropy_uniform_is_ln4() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 4]));
        let ce = cross_entropy(&mut g, l, &[0, 2, 3]).unwrap();
        assert!((scalar(&g, ce) - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_is_zero_and_bad_label_errors() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 100.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut g, l, &[2]).unwrap();
        assert!(scalar(&g, ce) < 1e-6);
        assert!(matches!(
            cross_entropy(&mut g, l, &[4]),
            Err(LgdError::InvalidLabel(4))
        ));
    }

    #[test]
    fn cosine_identical_orthogonal_antipodal() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(&[1, 2, 1, 1], vec![0.0, 3.0]).unwrap());
        let c = g.constant(Tensor::new(&[1, 2, 1, 1], vec![-2.0, 0.0]).unwrap());
        let same = cosine_distill(&mut g, a, a, CosineMode::Pooled).unwrap();
        let orth = cosine_distill(&mut g, a, b, CosineMode::Pooled).unwrap();
        let anti = cosine_distill(&mut g, a, c, CosineMode::Pooled).unwrap();
        assert!(scalar(&g, same).abs() < 1e-7);
        assert!((scalar(&g, orth) - 1.0).abs() < 1e-7);
        assert!((scalar(&g, anti) - 2.0).abs() < 1e-7);
    }

    #[test]
    fn cosine_does_not_touch_target_grad() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let b = g.leaf(Tensor::new(&[1, 2], vec![2.0, -1.0]).unwrap().with_requires_grad(true));
        let l = cosine_distill(&mut g, a, b, CosineMode::Pooled).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mse_offset_and_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 1, 2, 2], 1.5));
        let b = g.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let m = nuclei_mse(&mut g, a, b).unwrap();
        assert!((scalar(&g, m) - 0.25).abs() < 1e-7);
        let c = g.constant(Tensor::zeros(&[2, 1, 2, 1]));
        assert!(matches!(
            nuclei_mse(&mut g, a, c),
            Err(LgdError::InvalidShape(_))
        ));
    }

    #[test]
    fn dice_cases() {
        let mut g = Graph::new();
        let gt = g.constant(Tensor::new(&[1, 8], vec![1., 1., 1., 1., 0., 0., 0., 0.]).unwrap());
        let same = membrane_dice(&mut g, gt, gt).unwrap();
        assert!(scalar(&g, same).abs() < 1e-7);
        let inv = g.constant(Tensor::new(&[1, 8], vec![0., 0., 0., 0., 1., 1., 1., 1.]).unwrap());
        let disjoint = membrane_dice(&mut g, inv, gt).unwrap();
        assert!((scalar(&g, disjoint) - (1.0 - 1.0 / 9.0)).abs() < 1e-6);
        let half = g.constant(Tensor::new(&[1, 8], vec![1., 1., 0., 0., 1., 1., 0., 0.]).unwrap());
        let l = membrane_dice(&mut g, half, gt).unwrap();
        // (2·2 + 1)/(4 + 4 + 1)
        assert!((scalar(&g, l) - (1.0 - 5.0 / 9.0)).abs() < 1e-6);
    }

    #[test]
    fn total_loss_arithmetic_and_consistency() {
        let mut g = Graph::new();
        let cls = g.constant(Tensor::scalar(1.0));
        let dist = g.constant(Tensor::scalar(0.5));
        let nuc = g.constant(Tensor::scalar(0.1));
        let mem = g.constant(Tensor::scalar(0.2));
        let terms = LossTerms {
            cls,
            dist: Some(dist),
            nuc: Some(nuc),
            mem: Some(mem),
        };
        let (t, b) = total_loss(&mut g, &terms, &LossWeights::default(), Variant::F).unwrap();
        assert!((b.total - 7.5).abs() < 1e-6);
        assert!((scalar(&g, t) - 7.5).abs() < 1e-5);

        let only_cls = LossTerms {
            cls,
            dist: None,
            nuc: None,
            mem: None,
        };
        let (_, b) = total_loss(&mut g, &only_cls, &LossWeights::default(), Variant::A).unwrap();
        assert_eq!(b.total, b.cls);
        assert!(matches!(
            total_loss(&mut g, &only_cls, &LossWeights::default(), Variant::D),
            Err(LgdError::InconsistentVariant(_))
        ));
        assert!(matches!(
            total_loss(&mut g, &terms, &LossWeights::default(), Variant::C),
            Err(LgdError::InconsistentVariant(_))
        ));
    }
}
