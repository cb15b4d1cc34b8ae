//! Alignment losses and their gradients.
//!
//! - [`fine_loss`] / [`fine_loss_batch`]: soft-target InfoNCE between region
//!   embeddings and per-slot sentence embeddings, `s_ij = <o_i, p_j> / tau`.
//! - [`global_loss`]: sigmoid cross-entropy between the CLS embedding and
//!   every disease-name embedding, `z_c = scale * <g, e_c>`.
//! - [`total_loss`]: the weighted sum of the detection, fine and global terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid, softplus, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub anat: f64,
    pub fine: f64,
    pub global: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            anat: 1.0,
            fine: 1.0,
            global: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(anat: f64, fine: f64, global: f64) -> Result<Self> {
        let w = Self { anat, fine, global };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("anat", self.anat), ("fine", self.fine), ("global", self.global)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            anat: self.anat * s,
            fine: self.fine * s,
            global: self.global * s,
        }
    }
}

/// Row-normalized fine target with the mask of rows that have a positive.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTarget {
    pub target: Mat,
    pub active: Vec<bool>,
}

impl FineTarget {
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Each row with `k >= 1` positives gets `1/k` on them; zero rows are inactive.
pub fn fine_target_from(label_matrix: &[Vec<u8>]) -> FineTarget {
    let n = label_matrix.len();
    let mut target = Mat::zeros(n, n);
    let mut active = vec![false; n];
    for (i, row) in label_matrix.iter().enumerate() {
        let k = row.iter().filter(|&&v| v != 0).count();
        if k == 0 {
            continue;
        }
        active[i] = true;
        let w = 1.0 / k as f64;
        for (j, &v) in row.iter().enumerate() {
            if v != 0 {
                target.set(i, j, w);
            }
        }
    }
    FineTarget { target, active }
}

/// Where the softmax of an anchor row draws its candidates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePool {
    /// Only the `n` sentences of the anchor's own study.
    #[default]
    PerStudy,
    /// Every sentence of every study in the batch.
    CrossStudy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineLoss {
    pub value: f64,
    pub active_rows: usize,
    pub d_regions: Mat,
    pub d_sentences: Mat,
}

/// One study's inputs to [`fine_loss_batch`].
#[derive(Debug, Clone, Copy)]
pub struct FineStudy<'a> {
    pub regions: &'a Mat,
    pub sentences: &'a Mat,
    pub target: &'a FineTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineBatchLoss {
    pub value: f64,
    pub per_study: Vec<FineLoss>,
}

/// Single-study fine loss: mean cross-entropy over the active rows.
pub fn fine_loss(regions: &Mat, sentences: &Mat, target: &FineTarget, tau: f64) -> Result<FineLoss> {
    let mut batch = fine_loss_batch(
        &[FineStudy {
            regions,
            sentences,
            target,
        }],
        tau,
        NegativePool::PerStudy,
    )?;
    Ok(batch.per_study.remove(0))
}

/// `(1/|B|) sum_b (1/T_b) sum_{i active in b} H(y_i, softmax(s_i))`.
///
/// Studies without active rows add nothing but still count in `|B|`.
/// `per_study[b].value` is study `b`'s own row mean; the gradients are those
/// of the batch value.
pub fn fine_loss_batch(studies: &[FineStudy<'_>], tau: f64, pool: NegativePool) -> Result<FineBatchLoss> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    for (b, s) in studies.iter().enumerate() {
        let n = s.target.len();
        if s.regions.rows != n
            || s.sentences.rows != n
            || s.target.target.rows != n
            || s.target.target.cols != n
            || s.regions.cols != s.sentences.cols
        {
            return Err(Error::Shape(format!(
                "study {b}: regions {}x{}, sentences {}x{}, target {}x{}",
                s.regions.rows,
                s.regions.cols,
                s.sentences.rows,
                s.sentences.cols,
                s.target.target.rows,
                s.target.target.cols
            )));
        }
    }
    if let Some(first) = studies.first() {
        if studies.iter().any(|s| s.regions.cols != first.regions.cols) {
            return Err(Error::Shape("studies disagree on embedding width".into()));
        }
    }

    let batch = studies.len().max(1) as f64;
    let mut per_study: Vec<FineLoss> = studies
        .iter()
        .map(|s| FineLoss {
            value: 0.0,
            active_rows: s.target.num_active(),
            d_regions: s.regions.zeros_like(),
            d_sentences: s.sentences.zeros_like(),
        })
        .collect();

    // Candidate list: (study, row) pairs forming each anchor's support.
    let support_of = |b: usize| -> Vec<(usize, usize)> {
        match pool {
            NegativePool::PerStudy => (0..studies[b].target.len()).map(|j| (b, j)).collect(),
            NegativePool::CrossStudy => studies
                .iter()
                .enumerate()
                .flat_map(|(c, s)| (0..s.target.len()).map(move |j| (c, j)))
                .collect(),
        }
    };

    let mut total = 0.0;
    let mut logits = Vec::new();
    for (b, s) in studies.iter().enumerate() {
        let t_b = per_study[b].active_rows;
        if t_b == 0 {
            continue;
        }
        let support = support_of(b);
        let weight = 1.0 / (batch * t_b as f64);
        let mut study_sum = 0.0;
        for i in (0..s.target.len()).filter(|&i| s.target.active[i]) {
            let oi = s.regions.row(i);
            logits.clear();
            logits.extend(
                support
                    .iter()
                    .map(|&(c, j)| dot(oi, studies[c].sentences.row(j)) / tau),
            );
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            let yrow = s.target.target.row(i);
            let mut ce = lse;
            for (k, &(c, j)) in support.iter().enumerate() {
                if c == b {
                    ce -= yrow[j] * logits[k];
                }
            }
            study_sum += ce;

            for (k, &(c, j)) in support.iter().enumerate() {
                let p = (logits[k] - lse).exp();
                let y = if c == b { yrow[j] } else { 0.0 };
                let ds = weight * (p - y) / tau;
                if ds == 0.0 {
                    continue;
                }
                let pj = studies[c].sentences.row(j).to_vec();
                for (g, v) in per_study[b].d_regions.row_mut(i).iter_mut().zip(&pj) {
                    *g += ds * v;
                }
                for (g, v) in per_study[c].d_sentences.row_mut(j).iter_mut().zip(oi) {
                    *g += ds * v;
                }
            }
        }
        per_study[b].value = study_sum / t_b as f64;
        total += study_sum / t_b as f64;
    }
    Ok(FineBatchLoss {
        value: total / batch,
        per_study,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLoss {
    pub value: f64,
    /// Gradient w.r.t. each study's CLS embedding.
    pub d_cls: Vec<Vec<f64>>,
    /// Gradient w.r.t. the disease embeddings (`C x d`).
    pub d_disease: Mat,
    /// Gradient w.r.t. the logit scale itself.
    pub d_scale: f64,
}

/// Mean over studies and classes of the sigmoid cross-entropy, evaluated as
/// `softplus(-z)` for positives and `softplus(z)` for negatives so that it
/// keeps full relative precision for large `|z|`.
pub fn global_loss(cls: &[Vec<f64>], disease: &Mat, labels: &[Vec<u8>], scale: f64) -> Result<GlobalLoss> {
    if cls.len() != labels.len() {
        return Err(Error::Shape(format!("{} CLS embeddings but {} label rows", cls.len(), labels.len())));
    }
    let c = disease.rows;
    for (b, (g, y)) in cls.iter().zip(labels).enumerate() {
        if g.len() != disease.cols || y.len() != c {
            return Err(Error::Shape(format!(
                "study {b}: CLS width {}, labels {}, disease matrix {}x{}",
                g.len(),
                y.len(),
                disease.rows,
                disease.cols
            )));
        }
    }
    let denom = (cls.len() * c).max(1) as f64;
    let mut value = 0.0;
    let mut d_cls = Vec::with_capacity(cls.len());
    let mut d_disease = disease.zeros_like();
    let mut d_scale = 0.0;
    for (g, y) in cls.iter().zip(labels) {
        let mut dg = vec![0.0; g.len()];
        for k in 0..c {
            let e = disease.row(k);
            let cosine = dot(g, e);
            let z = scale * cosine;
            let yk = y[k] as f64;
            value += if y[k] != 0 { softplus(-z) } else { softplus(z) };
            let dz = (sigmoid(z) - yk) / denom;
            d_scale += dz * cosine;
            for (o, v) in dg.iter_mut().zip(e) {
                *o += dz * scale * v;
            }
            for (o, v) in d_disease.row_mut(k).iter_mut().zip(g) {
                *o += dz * scale * v;
            }
        }
        d_cls.push(dg);
    }
    Ok(GlobalLoss {
        value: value / denom,
        d_cls,
        d_disease,
        d_scale,
    })
}

/// One component of [`total_loss`]: its value and its gradient in a shared
/// flat parameter space.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub value: f64,
    pub grad: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn total_loss(anat: LossTerm<'_>, fine: LossTerm<'_>, global: LossTerm<'_>, w: &LossWeights) -> Result<TotalLoss> {
    w.validate()?;
    let terms = [("anat", anat, w.anat), ("fine", fine, w.fine), ("global", global, w.global)];
    let n = anat.grad.len();
    for (name, term, _) in &terms {
        if !term.value.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {}", term.value)));
        }
        if let Some(bad) = term.grad.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} gradient contains {bad}")));
        }
        if term.grad.len() != n {
            return Err(Error::Shape(format!("{name} gradient has length {}, expected {n}", term.grad.len())));
        }
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for (_, term, weight) in terms {
        value += weight * term.value;
        for (g, v) in grad.iter_mut().zip(term.grad) {
            *g += weight * v;
        }
    }
    Ok(TotalLoss { value, grad })
}
