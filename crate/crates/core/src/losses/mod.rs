//! Training objectives and their schedules.
//!
//! Every loss comes in two forms: an `*_on` function that records onto a
//! [`Graph`] so it can be differentiated, and a value-level wrapper over
//! plain tensors. Both run the same recorded operations.

mod schedule;

use serde::{Deserialize, Serialize};

pub use schedule::{alpha_at, tau_hard_at, AlphaMode, AlphaSchedule, TemperatureSchedule};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::numeric::{Graph, Tensor, Var};

/// Floor used when normalizing embeddings before cosine similarity.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// How the per-pair temperature matrix is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacMode {
    /// Same-modality pairs get the hard temperature.
    Mac,
    /// Cross-modality pairs get the hard temperature.
    Reverse,
    /// The normal temperature everywhere; plain InfoNCE.
    Off,
}

impl std::str::FromStr for MacMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac" => Ok(MacMode::Mac),
            "reverse" => Ok(MacMode::Reverse),
            "off" => Ok(MacMode::Off),
            other => Err(Error::config(format!("unknown temperature mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillVariant {
    /// Squared L2 distance between raw hidden states.
    Mse,
    /// Squared L2 distance after L2-normalizing both sides.
    MseNormalized,
    /// `1 − cos` between teacher and student states.
    Cosine,
    /// KL divergence between teacher and student similarity distributions.
    Kl,
}

impl std::str::FromStr for DistillVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(DistillVariant::Mse),
            "mse-normalized" => Ok(DistillVariant::MseNormalized),
            "cosine" => Ok(DistillVariant::Cosine),
            "kl" => Ok(DistillVariant::Kl),
            other => Err(Error::config(format!("unknown distillation variant {other:?}"))),
        }
    }
}

/// Square matrix of query×candidate cosine similarities; row `i`'s positive
/// is column `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let (r, c) = values.dims2()?;
        if r != c {
            return Err(Error::dim("similarity matrix", &[r, c], &[r, r]));
        }
        if let Some(v) = values.data().iter().find(|v| !(v.abs() <= 1.0 + 1e-9)) {
            return Err(Error::NumericDomain(format!(
                "similarity {v} outside [-1, 1]"
            )));
        }
        Ok(Self { values })
    }

    /// Cosine similarities of `queries[i]` against `candidates[j]`.
    pub fn from_embeddings(queries: &Tensor, candidates: &Tensor) -> Result<Self> {
        let mut g = Graph::new();
        let q = g.constant(queries.clone());
        let c = g.constant(candidates.clone());
        let s = cosine_similarity_on(&mut g, q, c)?;
        Self::new(g.value(s).clone())
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Modality of each query's target candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityTags(pub Vec<Modality>);

impl ModalityTags {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_temperature(name: &str, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::contract(format!("{name} must be positive, got {tau}")));
    }
    Ok(())
}

/// L2-normalizes both sides, then `Q · Cᵀ`.
pub fn cosine_similarity_on(g: &mut Graph, queries: Var, candidates: Var) -> Result<Var> {
    let (gq, dq) = g.value(queries).dims2()?;
    let (gc, dc) = g.value(candidates).dims2()?;
    if gq != gc || dq != dc {
        return Err(Error::dim("cosine_similarity", &[gq, dq], &[gc, dc]));
    }
    let qn = g.l2_normalize_rows(queries, NORMALIZE_EPS)?;
    let cn = g.l2_normalize_rows(candidates, NORMALIZE_EPS)?;
    let ct = g.transpose(cn)?;
    g.matmul(qn, ct)
}

/// Mean cross-entropy of each row against its diagonal entry.
fn diagonal_cross_entropy(g: &mut Graph, logits: Var) -> Result<Var> {
    let (rows, _) = g.value(logits).dims2()?;
    let lsm = g.log_softmax_rows(logits)?;
    let targets: Vec<usize> = (0..rows).collect();
    let picked = g.pick(lsm, &targets)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// `out[i][j] = tags[i] == tags[j]`.
pub fn modality_partition(tags: &ModalityTags) -> Vec<Vec<bool>> {
    tags.0
        .iter()
        .map(|a| tags.0.iter().map(|b| a == b).collect())
        .collect()
}

/// Per-pair temperatures for the given mode.
pub fn temperature_matrix(
    tags: &ModalityTags,
    tau_hard: f64,
    tau_norm: f64,
    mode: MacMode,
) -> Result<Tensor> {
    check_temperature("tau_hard", tau_hard)?;
    check_temperature("tau_norm", tau_norm)?;
    let n = tags.len();
    if n == 0 {
        return Err(Error::contract("temperature matrix over an empty batch"));
    }
    let mut data = Vec::with_capacity(n * n);
    for row in modality_partition(tags) {
        data.extend(row.into_iter().map(|same| match (mode, same) {
            (MacMode::Mac, true) | (MacMode::Reverse, false) => tau_hard,
            _ => tau_norm,
        }));
    }
    Tensor::matrix(n, n, data)
}

/// InfoNCE over a similarity matrix: `−mean_i log softmax(S_i/τ)_i`.
pub fn infonce_on(g: &mut Graph, similarity: Var, tau: f64) -> Result<Var> {
    check_temperature("tau", tau)?;
    let shape = g.value(similarity).shape().to_vec();
    let temps = g.constant(Tensor::filled(&shape, tau)?);
    let logits = g.div(similarity, temps)?;
    diagonal_cross_entropy(g, logits)
}

/// Modality-adaptive contrastive loss: the similarity matrix is divided
/// elementwise by the per-pair temperature matrix, then scored with
/// cross-entropy against the diagonal. The positive pair is always
/// same-modality, so in [`MacMode::Mac`] it is scaled by `tau_hard`.
pub fn mac_loss_on(
    g: &mut Graph,
    similarity: Var,
    tags: &ModalityTags,
    tau_hard: f64,
    tau_norm: f64,
    mode: MacMode,
) -> Result<Var> {
    let (rows, cols) = g.value(similarity).dims2()?;
    if rows != cols || rows != tags.len() {
        return Err(Error::dim("mac_loss", &[rows, cols], &[tags.len()]));
    }
    let temps = g.constant(temperature_matrix(tags, tau_hard, tau_norm, mode)?);
    let logits = g.div(similarity, temps)?;
    diagonal_cross_entropy(g, logits)
}

/// Teacher and student [RET] states for one batch, each `[N × d]`.
#[derive(Clone, Copy, Debug)]
pub struct DistillInputs {
    pub teacher_query: Var,
    pub student_query: Var,
    pub teacher_candidate: Var,
    pub student_candidate: Var,
}

pub fn self_distill_on(
    g: &mut Graph,
    inputs: DistillInputs,
    variant: DistillVariant,
    tau: f64,
) -> Result<Var> {
    let DistillInputs {
        teacher_query: tq,
        student_query: sq,
        teacher_candidate: tc,
        student_candidate: sc,
    } = inputs;
    let shape = g.value(tq).shape().to_vec();
    for v in [sq, tc, sc] {
        if g.value(v).shape() != shape.as_slice() {
            return Err(Error::dim("self_distill", &shape, g.value(v).shape()));
        }
    }
    let (n, _) = g.value(tq).dims2()?;
    let inv_n = 1.0 / n as f64;

    let squared_distance = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let d = g.sub(a, b)?;
        let sq = g.mul(d, d)?;
        Ok(g.sum(sq))
    };

    match variant {
        DistillVariant::Mse | DistillVariant::MseNormalized => {
            let (tq, sq, tc, sc) = if variant == DistillVariant::MseNormalized {
                (
                    g.l2_normalize_rows(tq, NORMALIZE_EPS)?,
                    g.l2_normalize_rows(sq, NORMALIZE_EPS)?,
                    g.l2_normalize_rows(tc, NORMALIZE_EPS)?,
                    g.l2_normalize_rows(sc, NORMALIZE_EPS)?,
                )
            } else {
                (tq, sq, tc, sc)
            };
            let dq = squared_distance(g, tq, sq)?;
            let dc = squared_distance(g, tc, sc)?;
            let total = g.add(dq, dc)?;
            Ok(g.scale(total, inv_n))
        }
        DistillVariant::Cosine => {
            let cos_sum = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
                let an = g.l2_normalize_rows(a, NORMALIZE_EPS)?;
                let bn = g.l2_normalize_rows(b, NORMALIZE_EPS)?;
                let prod = g.mul(an, bn)?;
                Ok(g.sum(prod))
            };
            let cq = cos_sum(g, tq, sq)?;
            let cc = cos_sum(g, tc, sc)?;
            let total = g.add(cq, cc)?;
            let scaled = g.scale(total, -inv_n);
            Ok(g.add_scalar(scaled, 2.0))
        }
        DistillVariant::Kl => {
            check_temperature("distillation tau", tau)?;
            let st = cosine_similarity_on(g, tq, tc)?;
            let ss = cosine_similarity_on(g, sq, sc)?;
            let st = g.scale(st, 1.0 / tau);
            let ss = g.scale(ss, 1.0 / tau);
            let pt = g.softmax_rows(st)?;
            let log_pt = g.log_softmax_rows(st)?;
            let log_ps = g.log_softmax_rows(ss)?;
            let diff = g.sub(log_pt, log_ps)?;
            let weighted = g.mul(pt, diff)?;
            let total = g.sum(weighted);
            Ok(g.scale(total, inv_n))
        }
    }
}

/// `α₁·L_contrastive + α₂·L_distill`.
pub fn pretraining_loss_on(
    g: &mut Graph,
    contrastive: Var,
    distill: Var,
    alphas: (f64, f64),
) -> Result<Var> {
    let (a1, a2) = alphas;
    if a1 < 0.0 || a2 < 0.0 {
        return Err(Error::contract(format!("negative loss weights {alphas:?}")));
    }
    let c = g.scale(contrastive, a1);
    let d = g.scale(distill, a2);
    g.add(c, d)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    g.value(v).item()
}

pub fn infonce(similarity: &SimilarityMatrix, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(similarity.values.clone());
    let loss = infonce_on(&mut g, s, tau)?;
    scalar_of(&g, loss)
}

pub fn mac_loss(
    similarity: &SimilarityMatrix,
    tags: &ModalityTags,
    tau_hard: f64,
    tau_norm: f64,
    mode: MacMode,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(similarity.values.clone());
    let loss = mac_loss_on(&mut g, s, tags, tau_hard, tau_norm, mode)?;
    scalar_of(&g, loss)
}

pub fn self_distill(
    teacher_query: &Tensor,
    student_query: &Tensor,
    teacher_candidate: &Tensor,
    student_candidate: &Tensor,
    variant: DistillVariant,
    tau: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let inputs = DistillInputs {
        teacher_query: g.constant(teacher_query.clone()),
        student_query: g.constant(student_query.clone()),
        teacher_candidate: g.constant(teacher_candidate.clone()),
        student_candidate: g.constant(student_candidate.clone()),
    };
    let loss = self_distill_on(&mut g, inputs, variant, tau)?;
    scalar_of(&g, loss)
}

pub fn pretraining_loss(contrastive: f64, distill: f64, alphas: (f64, f64)) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(contrastive));
    let d = g.constant(Tensor::scalar(distill));
    let loss = pretraining_loss_on(&mut g, c, d, alphas)?;
    scalar_of(&g, loss)
}
