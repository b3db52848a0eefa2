//! Attention-map transfer objective.
//!
//! An activation tensor of shape `[C, H, W]` is treated as `C` feature planes.
//! Each plane is flattened and l2-normalised, and the attention loss is the
//! mean over planes of the l2 distance between matching student and teacher
//! planes, averaged over the batch. The training objective adds it to the
//! task cross-entropy with weight `1 / beta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Element, Graph, Tensor, Var};

/// Denominator floor for plane normalisation.
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSource {
    Teacher,
    Student,
}

/// Batched activation snapshot `[N, C, H, W]` taken at a tap point.
#[derive(Clone, Debug)]
pub struct AttentionTap<T: Element = f32> {
    planes: Tensor<T>,
    source: TapSource,
}

impl<T: Element> AttentionTap<T> {
    pub fn new(planes: Tensor<T>, source: TapSource) -> Result<Self> {
        if planes.ndim() != 4 {
            return Err(Error::shape("attention_tap", format!("expected [N, C, H, W], got {:?}", planes.shape())));
        }
        let planes = planes.with_requires_grad(source == TapSource::Student);
        Ok(Self { planes, source })
    }

    pub fn teacher(planes: Tensor<T>) -> Result<Self> {
        Self::new(planes, TapSource::Teacher)
    }

    pub fn student(planes: Tensor<T>) -> Result<Self> {
        Self::new(planes, TapSource::Student)
    }

    pub fn planes(&self) -> &Tensor<T> {
        &self.planes
    }

    pub fn into_planes(self) -> Tensor<T> {
        self.planes
    }

    pub fn source(&self) -> TapSource {
        self.source
    }

    pub fn requires_grad(&self) -> bool {
        self.planes.requires_grad()
    }

    /// `(C, H, W)` of one sample.
    pub fn plane_shape(&self) -> (usize, usize, usize) {
        let s = self.planes.shape();
        (s[1], s[2], s[3])
    }
}

fn check_pair<T: Element>(student: &Tensor<T>, teacher: &Tensor<T>, eps: f64) -> Result<()> {
    if student.ndim() != 4 || student.shape() != teacher.shape() {
        return Err(Error::shape(
            "attention_loss",
            format!(
                "student tap {:?} and teacher tap {:?} must share one [N, C, H, W] shape",
                student.shape(),
                teacher.shape()
            ),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("normalisation eps must be positive, got {eps}")));
    }
    if !student.all_finite() {
        return Err(Error::NonFinite("student activations contain NaN or infinity".into()));
    }
    if !teacher.all_finite() {
        return Err(Error::NonFinite("teacher activations contain NaN or infinity".into()));
    }
    Ok(())
}

/// Per-plane quantities kept for the backward pass.
struct PlaneTerms {
    /// `max(||s||, eps)` per plane.
    s_denom: Vec<f64>,
    /// Whether `||s||` exceeded `eps` (normalisation is active).
    s_active: Vec<bool>,
    /// `||s_hat - t_hat||` per plane.
    dist: Vec<f64>,
    /// `s_hat - t_hat`, flattened like the input.
    diff: Vec<f64>,
    /// `s_hat`, flattened like the input.
    s_hat: Vec<f64>,
}

fn plane_terms<T: Element>(student: &[T], teacher: &[T], plane_len: usize, eps: f64) -> PlaneTerms {
    let planes = student.len() / plane_len;
    let mut terms = PlaneTerms {
        s_denom: Vec::with_capacity(planes),
        s_active: Vec::with_capacity(planes),
        dist: Vec::with_capacity(planes),
        diff: vec![0.0; student.len()],
        s_hat: vec![0.0; student.len()],
    };
    for p in 0..planes {
        let range = p * plane_len..(p + 1) * plane_len;
        let s = &student[range.clone()];
        let t = &teacher[range.clone()];
        let s_norm = s.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let t_norm = t.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let sd = s_norm.max(eps);
        let td = t_norm.max(eps);
        let mut d2 = 0.0;
        for (i, (sv, tv)) in s.iter().zip(t).enumerate() {
            let sh = sv.as_f64() / sd;
            let d = sh - tv.as_f64() / td;
            terms.s_hat[range.start + i] = sh;
            terms.diff[range.start + i] = d;
            d2 += d * d;
        }
        terms.s_denom.push(sd);
        terms.s_active.push(s_norm > eps);
        terms.dist.push(d2.sqrt());
    }
    terms
}

/// Attention-transfer loss between two taps, as a plain value.
pub fn attention_loss<T: Element>(student: &AttentionTap<T>, teacher: &AttentionTap<T>, eps: f64) -> Result<f64> {
    let (s, t) = (student.planes(), teacher.planes());
    check_pair(s, t, eps)?;
    let sh = s.shape();
    let terms = plane_terms(s.data(), t.data(), sh[2] * sh[3], eps);
    Ok(terms.dist.iter().sum::<f64>() / terms.dist.len() as f64)
}

struct AttentionLossOp {
    plane_len: usize,
    terms: PlaneTerms,
}

impl<T: Element> CustomOp<T> for AttentionLossOp {
    fn name(&self) -> &'static str {
        "attention_loss"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T], needs_grad: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs_grad[0] {
            return vec![None];
        }
        let planes = self.terms.dist.len();
        let scale = grad_output[0].as_f64() / planes as f64;
        let mut grad = vec![T::zero(); planes * self.plane_len];
        for p in 0..planes {
            let dist = self.terms.dist[p];
            if dist == 0.0 {
                continue;
            }
            let range = p * self.plane_len..(p + 1) * self.plane_len;
            let diff = &self.terms.diff[range.clone()];
            let s_hat = &self.terms.s_hat[range.clone()];
            let denom = self.terms.s_denom[p];
            // g = d / ||d|| is the gradient w.r.t. s_hat
            if self.terms.s_active[p] {
                let proj: f64 = s_hat.iter().zip(diff).map(|(u, d)| u * d).sum::<f64>() / dist;
                for (i, (u, d)) in s_hat.iter().zip(diff).enumerate() {
                    grad[range.start + i] = T::from_f64(scale * (d / dist - u * proj) / denom);
                }
            } else {
                for (i, d) in diff.iter().enumerate() {
                    grad[range.start + i] = T::from_f64(scale * d / dist / denom);
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Records the attention loss on `g`. The teacher tap enters as a constant so
/// no gradient can reach it.
pub fn attention_loss_var<T: Element>(g: &mut Graph<T>, student: Var, teacher: &AttentionTap<T>, eps: f64) -> Result<Var> {
    let s = g.value(student);
    check_pair(s, teacher.planes(), eps)?;
    let sh = s.shape();
    let plane_len = sh[2] * sh[3];
    let terms = plane_terms(s.data(), teacher.planes().data(), plane_len, eps);
    let loss = terms.dist.iter().sum::<f64>() / terms.dist.len() as f64;
    g.custom(&[student], Tensor::scalar(T::from_f64(loss)), Box::new(AttentionLossOp { plane_len, terms }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    MultilabelBinary,
    Multiclass,
}

/// Classification targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Row-major `[N, L]` matrix of 0/1 labels.
    Multilabel { labels: Vec<u8>, num_labels: usize },
    /// One class index per sample.
    Multiclass { classes: Vec<usize>, num_classes: usize },
}

impl Targets {
    pub fn task(&self) -> Task {
        match self {
            Targets::Multilabel { .. } => Task::MultilabelBinary,
            Targets::Multiclass { .. } => Task::Multiclass,
        }
    }

    pub fn batch_len(&self) -> usize {
        match self {
            Targets::Multilabel { labels, num_labels } => labels.len() / (*num_labels).max(1),
            Targets::Multiclass { classes, .. } => classes.len(),
        }
    }

    fn validate(&self, logits_shape: &[usize]) -> Result<()> {
        let (n, k) = match *logits_shape {
            [n, k] => (n, k),
            ref s => return Err(Error::shape("cross_entropy", format!("logits must be [N, K], got {s:?}"))),
        };
        match self {
            Targets::Multilabel { labels, num_labels } => {
                if *num_labels != k || labels.len() != n * k {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("{} labels of width {num_labels} for logits [{n}, {k}]", labels.len()),
                    ));
                }
                if let Some(bad) = labels.iter().find(|&&v| v > 1) {
                    return Err(Error::invalid(format!("multilabel target {bad} outside {{0, 1}}")));
                }
            }
            Targets::Multiclass { classes, num_classes } => {
                if *num_classes != k || classes.len() != n {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("{} class targets over {num_classes} classes for logits [{n}, {k}]", classes.len()),
                    ));
                }
                if let Some(bad) = classes.iter().find(|&&c| c >= k) {
                    return Err(Error::invalid(format!("class index {bad} out of range 0..{k}")));
                }
            }
        }
        Ok(())
    }
}

/// `ln(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct CrossEntropyOp {
    /// d loss / d logits for unit upstream gradient.
    dlogits: Vec<f64>,
}

impl<T: Element> CustomOp<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T], needs_grad: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs_grad[0] {
            return vec![None];
        }
        let up = grad_output[0].as_f64();
        vec![Some(self.dlogits.iter().map(|&d| T::from_f64(d * up)).collect())]
    }
}

fn cross_entropy_terms<T: Element>(logits: &Tensor<T>, targets: &Targets) -> Result<(f64, Vec<f64>)> {
    targets.validate(logits.shape())?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits contain NaN or infinity".into()));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let z = logits.data();
    let mut dz = vec![0.0; z.len()];
    let mut total = 0.0;
    match targets {
        Targets::Multilabel { labels, .. } => {
            let m = (n * k) as f64;
            for (i, (&zi, &yi)) in z.iter().zip(labels).enumerate() {
                let x = zi.as_f64();
                let y = f64::from(yi);
                // y*softplus(-x) + (1-y)*softplus(x)
                total += softplus(x) - x * y;
                dz[i] = (sigmoid(x) - y) / m;
            }
            total /= m;
        }
        Targets::Multiclass { classes, .. } => {
            for (row, &c) in classes.iter().enumerate() {
                let zr: Vec<f64> = z[row * k..(row + 1) * k].iter().map(|v| v.as_f64()).collect();
                let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = zr.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum_exp.ln();
                total += lse - zr[c];
                for j in 0..k {
                    let p = (zr[j] - lse).exp();
                    dz[row * k + j] = (p - if j == c { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            total /= n as f64;
        }
    }
    Ok((total, dz))
}

/// Mean cross-entropy of raw logits, as a plain value.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, targets: &Targets) -> Result<f64> {
    cross_entropy_terms(logits, targets).map(|(l, _)| l)
}

/// Records mean cross-entropy on `g`: binary cross-entropy on sigmoid outputs
/// for multilabel targets, softmax cross-entropy for multiclass targets.
pub fn cross_entropy_var<T: Element>(g: &mut Graph<T>, logits: Var, targets: &Targets) -> Result<Var> {
    let (loss, dlogits) = cross_entropy_terms(g.value(logits), targets)?;
    g.custom(&[logits], Tensor::scalar(T::from_f64(loss)), Box::new(CrossEntropyOp { dlogits }))
}

/// Components of one evaluation of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub at: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Breakdown of a cross-entropy-only step.
    pub fn ce_only(ce: f64) -> Self {
        Self { ce, at: 0.0, beta: f64::INFINITY, total: ce }
    }

    /// `|total - (ce + at / beta)|`.
    pub fn identity_error(&self) -> f64 {
        let at_term = if self.beta.is_infinite() { 0.0 } else { self.at / self.beta };
        (self.total - (self.ce + at_term)).abs()
    }
}

/// `total = CE + at / beta`. Returns the differentiable total together with
/// its logged components.
pub fn total_loss_var<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &Targets,
    student_tap: Var,
    teacher_tap: &AttentionTap<T>,
    beta: f64,
    eps: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be positive and finite, got {beta}")));
    }
    let ce = cross_entropy_var(g, logits, targets)?;
    let at = attention_loss_var(g, student_tap, teacher_tap, eps)?;
    let weighted = g.scale(at, T::from_f64(1.0 / beta))?;
    let total = g.add(ce, weighted)?;
    let ce_v = g.value(ce).item()?.as_f64();
    let at_v = g.value(at).item()?.as_f64();
    let total_v = g.value(total).item()?.as_f64();
    let breakdown = LossBreakdown { ce: ce_v, at: at_v, beta, total: total_v };
    Ok((total, breakdown))
}

/// Value-only version of [`total_loss_var`].
pub fn total_loss<T: Element>(
    logits: &Tensor<T>,
    targets: &Targets,
    student_tap: &AttentionTap<T>,
    teacher_tap: &AttentionTap<T>,
    beta: f64,
    eps: f64,
) -> Result<LossBreakdown> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be positive and finite, got {beta}")));
    }
    let ce = cross_entropy(logits, targets)?;
    let at = attention_loss(student_tap, teacher_tap, eps)?;
    Ok(LossBreakdown { ce, at, beta, total: ce + at / beta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tap(source: TapSource, shape: &[usize], data: &[f64]) -> AttentionTap<f64> {
        AttentionTap::new(Tensor::new(shape, data.to_vec()).unwrap(), source).unwrap()
    }

    #[test]
    fn hand_worked_pair() {
        // teacher planes [1,0],[0,2]; student planes [0,1],[0,4]
        let t = tap(TapSource::Teacher, &[1, 2, 1, 2], &[1., 0., 0., 2.]);
        let s = tap(TapSource::Student, &[1, 2, 1, 2], &[0., 1., 0., 4.]);
        let l = attention_loss(&s, &t, DEFAULT_NORM_EPS).unwrap();
        assert!((l - std::f64::consts::SQRT_2 / 2.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn identity_scaling_and_negation() {
        let data = [0.3, -1.2, 2.0, 0.7, 1.1, 0.4, -0.2, 0.9];
        let t = tap(TapSource::Teacher, &[1, 2, 2, 2], &data);
        let same = tap(TapSource::Student, &[1, 2, 2, 2], &data);
        assert!(attention_loss(&same, &t, DEFAULT_NORM_EPS).unwrap().abs() < 1e-12);
        let scaled: Vec<f64> = data.iter().map(|v| v * 3.7).collect();
        let s = tap(TapSource::Student, &[1, 2, 2, 2], &scaled);
        assert!(attention_loss(&s, &t, DEFAULT_NORM_EPS).unwrap().abs() < 1e-12);
        let neg: Vec<f64> = data.iter().map(|v| -v).collect();
        let s = tap(TapSource::Student, &[1, 2, 2, 2], &neg);
        assert!((attention_loss(&s, &t, DEFAULT_NORM_EPS).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_plane_against_nonzero_plane_contributes_one() {
        let t = tap(TapSource::Teacher, &[1, 1, 1, 2], &[3., 4.]);
        let s = tap(TapSource::Student, &[1, 1, 1, 2], &[0., 0.]);
        assert!((attention_loss(&s, &t, DEFAULT_NORM_EPS).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let t = tap(TapSource::Teacher, &[1, 2, 1, 2], &[1., 0., 0., 2.]);
        let s = tap(TapSource::Student, &[1, 1, 2, 2], &[1., 0., 0., 2.]);
        let msg = attention_loss(&s, &t, DEFAULT_NORM_EPS).unwrap_err().to_string();
        assert!(msg.contains("[1, 1, 2, 2]") && msg.contains("[1, 2, 1, 2]"), "{msg}");
        let bad = tap(TapSource::Student, &[1, 2, 1, 2], &[f64::NAN, 0., 0., 2.]);
        assert!(matches!(attention_loss(&bad, &t, DEFAULT_NORM_EPS), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tap_gradient_flags() {
        let t = tap(TapSource::Teacher, &[1, 1, 1, 1], &[1.]);
        let s = tap(TapSource::Student, &[1, 1, 1, 1], &[1.]);
        assert!(!t.requires_grad());
        assert!(s.requires_grad());
    }

    #[test]
    fn cross_entropy_examples() {
        let z = Tensor::new(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        let mc = Targets::Multiclass { classes: vec![0], num_classes: 2 };
        assert!((cross_entropy(&z, &mc).unwrap() - 2f64.ln()).abs() < 1e-12);

        let z1 = Tensor::new(&[1, 1], vec![0.0f64]).unwrap();
        let ml = Targets::Multilabel { labels: vec![1], num_labels: 1 };
        assert!((cross_entropy(&z1, &ml).unwrap() - 2f64.ln()).abs() < 1e-12);

        let z2 = Tensor::new(&[1, 2], vec![2.0f64, -2.0]).unwrap();
        let ml2 = Targets::Multilabel { labels: vec![1, 0], num_labels: 2 };
        // ln(1 + e^-2), evaluated independently
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((cross_entropy(&z2, &ml2).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let z = Tensor::new(&[1, 2], vec![1000.0f64, -1000.0]).unwrap();
        let ml = Targets::Multilabel { labels: vec![0, 1], num_labels: 2 };
        assert!((cross_entropy(&z, &ml).unwrap() - 1000.0).abs() < 1e-9);
        let mc = Targets::Multiclass { classes: vec![1], num_classes: 2 };
        assert!((cross_entropy(&z, &mc).unwrap() - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let z = Tensor::new(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        assert!(cross_entropy(&z, &Targets::Multiclass { classes: vec![2], num_classes: 2 }).is_err());
        assert!(cross_entropy(&z, &Targets::Multilabel { labels: vec![2, 0], num_labels: 2 }).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let t = tap(TapSource::Teacher, &[1, 2, 1, 2], &[1., 0., 0., 2.]);
        let s = tap(TapSource::Student, &[1, 2, 1, 2], &[0., 1., 0., 4.]);
        let z = Tensor::new(&[1, 2], vec![0.5f64, -0.5]).unwrap();
        let y = Targets::Multiclass { classes: vec![0], num_classes: 2 };
        let b1 = total_loss(&z, &y, &s, &t, 1.0, DEFAULT_NORM_EPS).unwrap();
        let b2 = total_loss(&z, &y, &s, &t, 2.0, DEFAULT_NORM_EPS).unwrap();
        assert_eq!((b1.at / b1.beta) / (b2.at / b2.beta), 2.0);
        let big = total_loss(&z, &y, &s, &t, 1e12, DEFAULT_NORM_EPS).unwrap();
        assert!((big.total - big.ce).abs() < 1e-9);
        assert!(total_loss(&z, &y, &s, &t, 0.0, DEFAULT_NORM_EPS).is_err());
        assert!(total_loss(&z, &y, &s, &t, -1.0, DEFAULT_NORM_EPS).is_err());
    }

    #[test]
    fn teacher_tap_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let s = g.variable(Tensor::new(&[1, 1, 1, 2], vec![0.3, 0.9]).unwrap());
        let t = tap(TapSource::Teacher, &[1, 1, 1, 2], &[1.0, 0.2]);
        let l = attention_loss_var(&mut g, s, &t, DEFAULT_NORM_EPS).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(s).is_some());
        assert_eq!(g.len(), 2, "teacher tap must not be a graph node");
    }
}
