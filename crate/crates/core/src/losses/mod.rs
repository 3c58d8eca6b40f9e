//! Global alignment (contrastive, matching, triplet), masked phrase modeling
//! and the combined objective.

mod queue;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flags::flag_enum;
use crate::model::{FusionOutput, Net};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::textproc::MaskedPhrase;

pub use queue::QueueState;

/// Margin of the fusion triplet loss.
pub const DEFAULT_MARGIN: f64 = 0.6;

flag_enum! {
    /// Operand order inside the triplet hinge.
    TripletDirection {
        /// `[neg − pos + δ]₊²`
        Standard => "standard",
        /// `[pos − neg + δ]₊²`
        Printed => "printed",
    } default Standard
}

flag_enum! {
    /// Which phrase positions the masked-phrase classifier predicts.
    MpmPositions {
        Masked => "masked",
        All => "all",
    } default Masked
}

flag_enum! {
    /// How in-batch negatives are drawn for matching.
    NegSampling {
        /// Proportional to `exp(sim/τ)` over non-matching candidates.
        Hard => "hard",
        Uniform => "uniform",
    } default Hard
}

flag_enum! {
    /// Training stage: global terms only, or every term.
    Stage {
        One => "one",
        Two => "two",
    } default Two
}

flag_enum! {
    /// How queued momentum embeddings enter the contrastive targets.
    QueueTargets {
        /// Every queued row is a negative.
        Negatives => "negatives",
        /// Queued rows of the anchor's identity share the target mass with the positive.
        Identity => "identity",
    } default Negatives
}

/// Output of the contrastive loss.
pub struct ItcOutput {
    pub loss: Var,
    /// In-batch cosine similarities of live image (rows) and text (cols) embeddings.
    pub batch_sims: Tensor,
    /// Softmax over image→text candidates, one row per image.
    pub p_i2t: Tensor,
    pub p_t2i: Tensor,
}

fn normalize_rows(t: &Tensor) -> Tensor {
    let norms = t.row_norms();
    let (m, n) = t.dims2();
    let mut data = t.data().to_vec();
    for r in 0..m {
        let s = norms[r].max(1e-12);
        data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(m, n, data).expect("same shape")
}

fn stack(top: &Tensor, rest: Option<Tensor>) -> Tensor {
    match rest {
        None => top.clone(),
        Some(q) => {
            let mut data = top.data().to_vec();
            data.extend_from_slice(q.data());
            Tensor::matrix(top.rows() + q.rows(), top.cols(), data).expect("same width")
        }
    }
}

/// Mean cross-entropy of each row of `logits` against a uniform target over
/// `targets[i]`.
fn soft_ce(g: &mut Graph, logits: Var, targets: &[Vec<usize>]) -> Result<(Var, Tensor)> {
    let b = g.value(logits).rows();
    let probs = crate::numerics::row_softmax(g.value(logits));
    let mut terms = Vec::with_capacity(b);
    for (i, cols) in targets.iter().enumerate() {
        let row = g.row(logits, i)?;
        let mut parts = Vec::with_capacity(cols.len());
        for &j in cols {
            parts.push(g.cross_entropy(row, j)?);
        }
        let sum = g.add_all(&parts)?;
        terms.push(g.scale(sum, 1.0 / cols.len() as f64));
    }
    let total = g.add_all(&terms)?;
    Ok((g.scale(total, 1.0 / b as f64), probs))
}

/// Symmetric contrastive loss of live embeddings against momentum
/// embeddings of the batch plus the queues; enqueues the momentum
/// embeddings afterwards.
///
/// `img`, `txt` are live projections (`B × p`), `mom_img`, `mom_txt` their
/// momentum counterparts. `τ = exp(log_tau)`. With `ids`, every candidate
/// of the anchor's identity is a positive and the target is uniform over them.
#[allow(clippy::too_many_arguments)]
pub fn itc_loss(
    g: &mut Graph,
    img: Var,
    txt: Var,
    mom_img: &Tensor,
    mom_txt: &Tensor,
    queues: &mut QueueState,
    log_tau: Var,
    ids: Option<&[usize]>,
) -> Result<ItcOutput> {
    let shape = g.value(img).shape().to_vec();
    for (what, s) in [("text", g.value(txt).shape()), ("momentum image", mom_img.shape()), ("momentum text", mom_txt.shape())] {
        if s != shape.as_slice() {
            return Err(Error::shape(what, &shape, s));
        }
    }
    let b = shape[0];
    if ids.is_some_and(|ids| ids.len() != b) {
        return Err(Error::Argument(format!("{} ids for a batch of {b}", ids.map_or(0, |i| i.len()))));
    }
    let targets: Vec<Vec<usize>> = match ids {
        None => (0..b).map(|i| vec![i]).collect(),
        Some(ids) => {
            let cand: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).chain(queues.ids().iter().copied()).collect();
            (0..b)
                .map(|i| (0..cand.len()).filter(|&j| j == i || cand[j] == Some(ids[i])).collect())
                .collect()
        }
    };
    let tau = g.scalar(log_tau).exp();
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Contract(format!("temperature must be positive and finite, got {tau}")));
    }
    let img_n = g.row_normalize(img);
    let txt_n = g.row_normalize(txt);
    let batch_sims = crate::numerics::matmul(g.value(img_n), &g.value(txt_n).transpose())?;

    let neg_log_tau = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg_log_tau);
    let cand_txt = g.constant(stack(&normalize_rows(mom_txt), queues.texts()));
    let cand_img = g.constant(stack(&normalize_rows(mom_img), queues.images()));

    let i2t = g.matmul_nt(img_n, cand_txt)?;
    let i2t = g.mul_scalar(i2t, inv_tau)?;
    let (l_i2t, p_i2t) = soft_ce(g, i2t, &targets)?;
    let t2i = g.matmul_nt(txt_n, cand_img)?;
    let t2i = g.mul_scalar(t2i, inv_tau)?;
    let (l_t2i, p_t2i) = soft_ce(g, t2i, &targets)?;
    let sum = g.add(l_i2t, l_t2i)?;
    let loss = g.scale(sum, 0.5);

    queues.enqueue_with_ids(mom_img, mom_txt, ids)?;
    Ok(ItcOutput {
        loss,
        batch_sims,
        p_i2t,
        p_t2i,
    })
}

/// Binary cross-entropy of each matching logit against its label, summed and
/// divided by the number of positive pairs.
pub fn itm_loss(g: &mut Graph, logits: &[Var], labels: &[f64]) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Argument(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count().max(1);
    let mut terms = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        terms.push(g.bce_with_logits(z, y)?);
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / positives as f64))
}

/// One negative text per image and one negative image per text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Negatives {
    /// `text_for_image[i]` is the negative text paired with image `i`.
    pub text_for_image: Vec<usize>,
    pub image_for_text: Vec<usize>,
}

fn draw(scores: impl Iterator<Item = f64>, skip: usize, tau: f64, mode: NegSampling, rng: &mut Rng) -> Result<usize> {
    let scores: Vec<f64> = scores.collect();
    let admissible = |j: usize, s: f64| j != skip && s != f64::NEG_INFINITY && !s.is_nan();
    let weights: Vec<f64> = match mode {
        NegSampling::Uniform => scores
            .iter()
            .enumerate()
            .map(|(j, &s)| if admissible(j, s) { 1.0 } else { 0.0 })
            .collect(),
        NegSampling::Hard => {
            let max = scores
                .iter()
                .enumerate()
                .filter(|&(j, &s)| admissible(j, s))
                .map(|(_, &s)| s)
                .fold(f64::NEG_INFINITY, f64::max);
            scores
                .iter()
                .enumerate()
                .map(|(j, &s)| if admissible(j, s) { ((s - max) / tau).exp() } else { 0.0 })
                .collect()
        }
    };
    if weights.iter().all(|&w| w <= 0.0) {
        return Err(Error::Argument("no admissible negative candidate".into()));
    }
    Ok(rng.categorical(&weights))
}

/// Draws in-batch negatives from the `B × B` image–text similarity matrix.
/// A batch of one has no negatives.
pub fn sample_negatives(sims: &Tensor, tau: f64, mode: NegSampling, rng: &mut Rng) -> Result<Negatives> {
    let (b, c) = sims.dims2();
    if b != c {
        return Err(Error::shape("sample_negatives", sims.shape(), &[b, b]));
    }
    sample_from(b, |i, j| sims.get(i, j), tau, mode, rng)
}

/// As [`sample_negatives`] over any score function; `-inf` excludes a pair.
fn sample_from(
    b: usize,
    sim: impl Fn(usize, usize) -> f64,
    tau: f64,
    mode: NegSampling,
    rng: &mut Rng,
) -> Result<Negatives> {
    if b < 2 {
        log::info!("batch of {b}: matching sees positive pairs only");
        return Ok(Negatives::default());
    }
    let mut out = Negatives::default();
    for i in 0..b {
        out.text_for_image.push(draw((0..b).map(|j| sim(i, j)), i, tau, mode, rng)?);
    }
    for j in 0..b {
        out.image_for_text.push(draw((0..b).map(|i| sim(i, j)), j, tau, mode, rng)?);
    }
    Ok(out)
}

/// Squared hinge on the positive and the two negative matching logits.
pub fn fusion_triplet_loss(
    g: &mut Graph,
    pos: Var,
    neg_img: Var,
    neg_txt: Var,
    delta: f64,
    direction: TripletDirection,
) -> Result<Var> {
    if !(delta >= 0.0) {
        return Err(Error::Argument(format!("triplet margin must be non-negative, got {delta}")));
    }
    let margin = g.constant(Tensor::full(g.value(pos).shape(), delta));
    let hinge = |g: &mut Graph, neg: Var| -> Result<Var> {
        let diff = match direction {
            TripletDirection::Standard => g.sub(neg, pos)?,
            TripletDirection::Printed => g.sub(pos, neg)?,
        };
        let shifted = g.add(diff, margin)?;
        let r = g.relu(shifted);
        Ok(g.square(r))
    };
    let a = hinge(g, neg_img)?;
    let b = hinge(g, neg_txt)?;
    let s = g.add(a, b)?;
    Ok(g.sum(s))
}

/// Cross-entropy of the classifier over fused phrase rows against the
/// original tokens, at the masked position or summed over all positions.
pub fn mpm_loss(g: &mut Graph, net: &Net, fusion: &FusionOutput, masked: &MaskedPhrase, positions: MpmPositions) -> Result<Var> {
    let rows = g.value(fusion.reps).rows();
    if masked.mask_index + 1 >= rows || masked.original.len() + 1 > rows {
        return Err(Error::Argument(format!(
            "mask index {} outside fusion of {} rows",
            masked.mask_index,
            rows
        )));
    }
    match positions {
        MpmPositions::Masked => {
            let row = g.row(fusion.reps, masked.mask_index + 1)?;
            let logits = net.mpm_logits(g, row)?;
            g.cross_entropy(logits, masked.target_id)
        }
        MpmPositions::All => {
            let n = masked.original.len();
            let body = g.slice_rows(fusion.reps, 1, n)?;
            let logits = net.mpm_logits(g, body)?;
            let mut terms = Vec::with_capacity(n);
            for (j, &target) in masked.original.iter().enumerate() {
                let row = g.row(logits, j)?;
                terms.push(g.cross_entropy(row, target)?);
            }
            g.add_all(&terms)
        }
    }
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub itc: f64,
    pub itm: f64,
    pub tri: f64,
    pub biatt_sum: f64,
    pub mpm_sum: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `itc + itm + tri + Σ (biatt + mpm)`; stage one keeps only `itc + itm`.
    pub fn combine(itc: f64, itm: f64, tri: f64, per_phrase: &[(f64, f64)], stage: Stage) -> Self {
        let mut out = Self {
            itc,
            itm,
            ..Self::default()
        };
        if stage == Stage::Two {
            out.tri = tri;
            out.biatt_sum = per_phrase.iter().map(|p| p.0).sum();
            out.mpm_sum = per_phrase.iter().map(|p| p.1).sum();
        }
        out.total = out.itc + out.itm + out.tri + out.biatt_sum + out.mpm_sum;
        out
    }

    pub fn is_finite(&self) -> bool {
        [self.itc, self.itm, self.tri, self.biatt_sum, self.mpm_sum, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One optimizer step of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,lr,itc,itm,tri,biatt,mpm,total";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let l = &r.losses;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.lr, l.itc, l.itm, l.tri, l.biatt_sum, l.mpm_sum, l.total
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests;
