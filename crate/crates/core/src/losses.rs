//! Scalar objectives and their gradients with respect to logits.
//!
//! Every loss is normalized by the number of contributing rows, so weights
//! between terms do not depend on point counts. Per-row arithmetic is carried
//! out in `f64` regardless of the logit type.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::mixing::MixedCloudSample;
use crate::pseudo::PointPseudoLabels;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport<T> {
    pub name: &'static str,
    pub value: f64,
    /// Rows contributing to the value.
    pub count: usize,
    /// Gradient with respect to the first logits argument.
    pub grad: Array2<T>,
    /// Gradient with respect to the second logits argument; `None` when detached.
    pub grad_q: Option<Array2<T>>,
}

impl<T: Real> LossReport<T> {
    fn empty(name: &'static str, cols: usize) -> Self {
        LossReport {
            name,
            value: 0.0,
            count: 0,
            grad: Array2::zeros((0, cols)),
            grad_q: None,
        }
    }
}

fn check_finite<T: Real>(logits: ArrayView2<'_, T>, what: &str) -> Result<()> {
    if let Some((idx, _)) = logits.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite logit at {idx:?}")));
    }
    Ok(())
}

/// Numerically stable log-softmax of one row, in `f64`.
fn log_softmax_row<T: Real>(row: ndarray::ArrayView1<'_, T>, out: &mut Vec<f64>) {
    out.clear();
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    let log_sum = sum.ln() + max;
    out.extend(row.iter().map(|v| v.as_f64() - log_sum));
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_finite(logits, "softmax")?;
    let mut out = Array2::zeros(logits.raw_dim());
    let mut buf = Vec::new();
    for (row, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        log_softmax_row(row, &mut buf);
        for (d, &l) in dst.iter_mut().zip(&buf) {
            *d = T::of(l.exp());
        }
    }
    Ok(out)
}

/// Mean cross-entropy over rows, with optional per-row weights.
pub fn cross_entropy<T: Real>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<LossReport<T>> {
    let (m, c) = logits.dim();
    if labels.len() != m || weights.is_some_and(|w| w.len() != m) {
        return Err(Error::Contract(format!("cross entropy: {m} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("cross entropy: label {bad} outside [0, {c})")));
    }
    check_finite(logits, "cross entropy")?;
    if m == 0 {
        return Ok(LossReport::empty("cross_entropy", c));
    }
    let scale = 1.0 / m as f64;
    let mut grad = Array2::zeros((m, c));
    let mut value = 0.0;
    let mut buf = Vec::new();
    for (i, (row, mut g)) in logits.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        log_softmax_row(row, &mut buf);
        value += -w * buf[labels[i]];
        for (k, gk) in g.iter_mut().enumerate() {
            let onehot = if k == labels[i] { 1.0 } else { 0.0 };
            *gk = T::of(w * scale * (buf[k].exp() - onehot));
        }
    }
    Ok(LossReport {
        name: "cross_entropy",
        value: value * scale,
        count: m,
        grad,
        grad_q: None,
    })
}

/// `KL(softmax(p) || softmax(q))` averaged over the rows flagged valid.
///
/// Invalid rows get zero gradient. The `q` gradient is only produced when
/// `detach_q` is false.
pub fn kl_masked<T: Real>(
    p_logits: ArrayView2<'_, T>,
    q_logits: ArrayView2<'_, T>,
    valid: Option<&[bool]>,
    detach_q: bool,
) -> Result<LossReport<T>> {
    if p_logits.dim() != q_logits.dim() {
        return Err(Error::Contract(format!(
            "KL: shapes {:?} and {:?} differ",
            p_logits.dim(),
            q_logits.dim()
        )));
    }
    let (m, c) = p_logits.dim();
    if valid.is_some_and(|v| v.len() != m) {
        return Err(Error::Contract("KL: validity flags differ in length from rows".into()));
    }
    check_finite(p_logits, "KL p")?;
    check_finite(q_logits, "KL q")?;
    let count = valid.map_or(m, |v| v.iter().filter(|&&b| b).count());
    let mut grad = Array2::zeros((m, c));
    let mut grad_q = (!detach_q).then(|| Array2::zeros((m, c)));
    if count == 0 {
        return Ok(LossReport {
            name: "kl",
            value: 0.0,
            count: 0,
            grad,
            grad_q,
        });
    }
    let scale = 1.0 / count as f64;
    let mut value = 0.0;
    let (mut lp, mut lq) = (Vec::new(), Vec::new());
    for i in 0..m {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        log_softmax_row(p_logits.row(i), &mut lp);
        log_softmax_row(q_logits.row(i), &mut lq);
        let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        value += kl;
        for k in 0..c {
            let p = lp[k].exp();
            grad[[i, k]] = T::of(scale * p * (lp[k] - lq[k] - kl));
            if let Some(gq) = grad_q.as_mut() {
                gq[[i, k]] = T::of(scale * (lq[k].exp() - p));
            }
        }
    }
    Ok(LossReport {
        name: "kl",
        value: value * scale,
        count,
        grad,
        grad_q,
    })
}

pub fn kl_pointwise<T: Real>(
    p_logits: ArrayView2<'_, T>,
    q_logits: ArrayView2<'_, T>,
    detach_q: bool,
) -> Result<LossReport<T>> {
    kl_masked(p_logits, q_logits, None, detach_q)
}

/// 2D mimicry on target images toward the 3D point predictions.
pub fn loss_2d_t<T: Real>(mimicry_at_points: ArrayView2<'_, T>, point_logits_3d: ArrayView2<'_, T>) -> Result<LossReport<T>> {
    let mut r = kl_masked(mimicry_at_points, point_logits_3d, None, true)?;
    r.name = "loss_2d_t";
    Ok(r)
}

/// 2D mimicry on mixed images toward prototype or point targets.
pub fn loss_2d_m<T: Real>(
    mimicry_at_points: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    valid: &[bool],
) -> Result<LossReport<T>> {
    let mut r = kl_masked(mimicry_at_points, targets, Some(valid), true)?;
    r.name = "loss_2d_m";
    Ok(r)
}

pub fn loss_2d_s<T: Real>(logits: ArrayView2<'_, T>, labels: &[usize]) -> Result<LossReport<T>> {
    let mut r = cross_entropy(logits, labels, None)?;
    r.name = "loss_2d_s";
    Ok(r)
}

pub fn loss_3d_t<T: Real>(point_logits: ArrayView2<'_, T>, hybrid: &PointPseudoLabels) -> Result<LossReport<T>> {
    let mut r = cross_entropy(point_logits, &hybrid.labels, None)?;
    r.name = "loss_3d_t";
    Ok(r)
}

pub fn loss_3d_m<T: Real>(mixed_logits: ArrayView2<'_, T>, mixed: &MixedCloudSample) -> Result<LossReport<T>> {
    let mut r = cross_entropy(mixed_logits, &mixed.labels, None)?;
    r.name = "loss_3d_m";
    Ok(r)
}

/// One weighted component of a total objective.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedTerm<T> {
    pub name: &'static str,
    pub weight: f64,
    pub value: f64,
    pub count: usize,
    /// Component gradient already multiplied by `weight`.
    pub grad: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss<T> {
    pub value: f64,
    pub terms: Vec<WeightedTerm<T>>,
}

impl<T: Real> TotalLoss<T> {
    pub fn term(&self, name: &str) -> Option<&WeightedTerm<T>> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Sum of the scaled gradients, for terms defined on the same logits.
    pub fn combined_grad(&self) -> Result<Option<Array2<T>>> {
        let mut acc: Option<Array2<T>> = None;
        for t in &self.terms {
            match acc.as_mut() {
                None => acc = Some(t.grad.clone()),
                Some(a) if a.dim() == t.grad.dim() => *a += &t.grad,
                Some(_) => return Err(Error::Contract(format!("term {} has a different gradient shape", t.name))),
            }
        }
        Ok(acc)
    }
}

fn weighted_total<T: Real>(parts: &[(Option<&LossReport<T>>, f64)]) -> Result<TotalLoss<T>> {
    let mut total = TotalLoss {
        value: 0.0,
        terms: Vec::new(),
    };
    for &(report, weight) in parts {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::Config(format!("loss weight must be non-negative, got {weight}")));
        }
        let Some(r) = report else { continue };
        total.value += weight * r.value;
        total.terms.push(WeightedTerm {
            name: r.name,
            weight,
            value: r.value,
            count: r.count,
            grad: r.grad.mapv(|g| g * T::of(weight)),
        });
    }
    Ok(total)
}

/// `L_2D = L_2D,s + w_t L_2D,t + w_m L_2D,m`; absent terms count as zero.
pub fn total_2d<T: Real>(
    source: &LossReport<T>,
    target: Option<&LossReport<T>>,
    mixed: Option<&LossReport<T>>,
    lambda_t: f64,
    lambda_m: f64,
) -> Result<TotalLoss<T>> {
    weighted_total(&[(Some(source), 1.0), (target, lambda_t), (mixed, lambda_m)])
}

/// `L_3D = L_3D,t + w_m L_3D,m`; an absent mixed term counts as zero.
pub fn total_3d<T: Real>(target: &LossReport<T>, mixed: Option<&LossReport<T>>, lambda_m: f64) -> Result<TotalLoss<T>> {
    weighted_total(&[(Some(target), 1.0), (mixed, lambda_m)])
}
