//! Bidirectional attention: forward attention read from the cross-attention
//! matrix, backward attention as the closed-form gradient of the masked-token
//! score, their normalized product, and the phrase-guided pooling loss.

mod heatmap;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionTrace, EncoderOutput, FusionOutput, Net, Params};
use crate::numerics::{matmul, Graph, Tensor, Var};
use crate::textproc::{MaskedPhrase, TokenId};

pub use heatmap::{write_heatmap_csv, write_heatmap_pgm, HeatmapRow};

/// Sum below which the product of forward and backward attention is
/// considered empty and forward attention is used alone.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// Which attention row feeds the forward weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiattRow {
    /// Row 0, the `[CLS]` query.
    Cls,
    /// The masked token's row, shared with the score.
    #[default]
    Mask,
}

impl BiattRow {
    /// Attention row index given the masked token's row.
    pub fn resolve(self, mask_row: usize) -> usize {
        match self {
            BiattRow::Cls => 0,
            BiattRow::Mask => mask_row,
        }
    }
}

impl FromStr for BiattRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(BiattRow::Cls),
            "mask" => Ok(BiattRow::Mask),
            _ => Err(Error::Argument(format!("unknown attention row {s:?} (expected cls or mask)"))),
        }
    }
}

impl fmt::Display for BiattRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiattRow::Cls => "cls",
            BiattRow::Mask => "mask",
        })
    }
}

/// Head-averaged attention vectors over the `L_I + 1` image rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BidirAttWeights {
    pub w_fa: Vec<f64>,
    pub w_ba: Vec<f64>,
    pub w: Vec<f64>,
    pub s_per_head: Vec<f64>,
    /// True when the product vanished and `w` fell back to `w_fa`.
    pub fallback: bool,
}

fn check_row(trace: &AttentionTrace, row: usize) -> Result<()> {
    if row >= trace.text_len() {
        return Err(Error::Argument(format!(
            "attention row {row} out of {} text rows",
            trace.text_len()
        )));
    }
    Ok(())
}

fn check_score_head(trace: &AttentionTrace, ws: &Tensor) -> Result<()> {
    let dh = trace.heads[0].v.cols();
    if ws.shape() != [dh, 1] {
        return Err(Error::shape("score head", ws.shape(), &[dh, 1]));
    }
    Ok(())
}

/// Row `row` of every head's attention matrix.
pub fn forward_attention(trace: Option<&AttentionTrace>, row: usize) -> Result<Vec<Vec<f64>>> {
    let trace = trace.ok_or_else(|| Error::Contract("forward attention needs a captured trace".into()))?;
    check_row(trace, row)?;
    Ok(trace.heads.iter().map(|h| h.a.row_slice(row).to_vec()).collect())
}

/// `s_h = (Â_h V_h) W^s` with `Â_h` row `mask_row` of `A_h`.
pub fn score(trace: &AttentionTrace, mask_row: usize, ws: &Tensor) -> Result<Vec<f64>> {
    check_row(trace, mask_row)?;
    check_score_head(trace, ws)?;
    trace
        .heads
        .iter()
        .map(|h| {
            let a_hat = Tensor::row(h.a.row_slice(mask_row));
            Ok(matmul(&matmul(&a_hat, &h.v)?, ws)?.item())
        })
        .collect()
}

/// `∂s_h/∂Â_{h,j} = Σ_k V_{h,jk} W^s_k`, per head.
pub fn backward_attention(trace: &AttentionTrace, ws: &Tensor) -> Result<Vec<Vec<f64>>> {
    check_score_head(trace, ws)?;
    trace
        .heads
        .iter()
        .map(|h| Ok(matmul(&h.v, ws)?.into_data()))
        .collect()
}

fn head_mean(per_head: &[Vec<f64>], f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::Argument("attention from zero heads".into()))?;
    let mut acc = vec![0.0; first.len()];
    for v in per_head {
        if v.len() != acc.len() {
            return Err(Error::shape("head_mean", &[acc.len()], &[v.len()]));
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += f(x);
        }
    }
    let n = per_head.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `w = norm(mean_h fa ⊙ mean_h ReLU(ba))`, falling back to the mean
/// forward attention when the product has no mass.
pub fn bidirectional_weights(fa: &[Vec<f64>], ba: &[Vec<f64>]) -> Result<BidirAttWeights> {
    let w_fa = head_mean(fa, |x| x)?;
    let w_ba = head_mean(ba, |x| x.max(0.0))?;
    if w_fa.len() != w_ba.len() {
        return Err(Error::shape("bidirectional_weights", &[w_fa.len()], &[w_ba.len()]));
    }
    let raw: Vec<f64> = w_fa.iter().zip(&w_ba).map(|(f, b)| f * b).collect();
    let total: f64 = raw.iter().sum();
    let (w, fallback) = if total < DEGENERATE_MASS {
        (w_fa.clone(), true)
    } else {
        (raw.iter().map(|r| r / total).collect(), false)
    };
    Ok(BidirAttWeights {
        w_fa,
        w_ba,
        w,
        s_per_head: Vec::new(),
        fallback,
    })
}

/// Forward, backward and bidirectional weights of one traced fusion.
pub fn compute_weights(trace: &AttentionTrace, row: BiattRow, mask_row: usize, ws: &Tensor) -> Result<BidirAttWeights> {
    let fa = forward_attention(Some(trace), row.resolve(mask_row))?;
    let ba = backward_attention(trace, ws)?;
    let mut out = bidirectional_weights(&fa, &ba)?;
    out.s_per_head = score(trace, mask_row, ws)?;
    Ok(out)
}

/// Drops the `[CLS]` entry and renormalizes over patches. All-`[CLS]`
/// mass becomes uniform patch weights.
pub fn patch_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.len() < 2 {
        return Err(Error::Argument("weights must cover [CLS] and at least one patch".into()));
    }
    let patches = &w[1..];
    let total: f64 = patches.iter().sum();
    if total < DEGENERATE_MASS {
        log::warn!("no attention mass on image patches; pooling uniformly");
        return Ok(vec![1.0 / patches.len() as f64; patches.len()]);
    }
    Ok(patches.iter().map(|v| v / total).collect())
}

/// `Σ_{j≥1} w_j f^I_j` with `w` renormalized over patch rows.
pub fn weighted_pool(w: &[f64], image: &Tensor) -> Result<Tensor> {
    if w.len() != image.rows() {
        return Err(Error::shape("weighted_pool", &[w.len()], &[image.rows()]));
    }
    let pw = patch_weights(w)?;
    matmul(&Tensor::row(&pw), &image.slice_rows(1, pw.len())?)
}

/// Cosine similarity of two vectors; 0 (with a warning) when either is zero.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity of a zero vector");
        return Ok(0.0);
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Cosine of `a·G_a` and `b·G_b` for row vectors `a`, `b`.
pub fn coarse_similarity(a: &Tensor, b: &Tensor, proj_a: &Tensor, proj_b: &Tensor) -> Result<f64> {
    cosine(&matmul(a, proj_a)?, &matmul(b, proj_b)?)
}

/// Cosine similarity of two row vectors on the graph.
pub fn cosine_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let a = g.row_normalize(a);
    let b = g.row_normalize(b);
    let p = g.mul(a, b)?;
    Ok(g.sum(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiattOptions {
    pub row: BiattRow,
    /// Let the loss reach `W^s` through the weights (trace values stay constant).
    pub score_head_grad: bool,
}

impl Default for BiattOptions {
    fn default() -> Self {
        Self {
            row: BiattRow::Mask,
            score_head_grad: true,
        }
    }
}

pub struct BiattOutput {
    pub loss: Var,
    pub weights: BidirAttWeights,
}

/// `1 − cos(G_I f̃^I, G_P f^P)`.
///
/// `phrase` is the unimodal phrase encoding, `fusion` its traced fusion with
/// the image, `mask_row` the masked token's row in the fusion.
pub fn biatt_loss(
    g: &mut Graph,
    net: &Net,
    image: EncoderOutput,
    phrase: EncoderOutput,
    fusion: &FusionOutput,
    mask_row: usize,
    opts: BiattOptions,
) -> Result<BiattOutput> {
    let trace = fusion
        .trace
        .as_ref()
        .ok_or_else(|| Error::Contract("bidirectional attention needs a traced fusion".into()))?;
    biatt_loss_with_trace(g, net, image, phrase, trace, mask_row, opts)
}

/// As [`biatt_loss`] with the weights taken from an explicit trace.
pub fn biatt_loss_with_trace(
    g: &mut Graph,
    net: &Net,
    image: EncoderOutput,
    phrase: EncoderOutput,
    trace: &AttentionTrace,
    mask_row: usize,
    opts: BiattOptions,
) -> Result<BiattOutput> {
    let ws_var = net.var(net.layout.score_head);
    let ws = g.value(ws_var).clone();
    let weights = compute_weights(trace, opts.row, mask_row, &ws)?;
    let n_img = image.len(g);
    if weights.w.len() != n_img {
        return Err(Error::shape("biatt_loss", &[weights.w.len()], &[n_img]));
    }

    let pooled_weights = if opts.score_head_grad && !weights.fallback {
        pooling_weights_var(g, trace, &weights, ws_var)?
    } else {
        None
    };
    let pooled_weights = match pooled_weights {
        Some(w) => w,
        None => {
            let pw = patch_weights(&weights.w)?;
            g.constant(Tensor::matrix(1, pw.len(), pw)?)
        }
    };
    let patches = g.slice_rows(image.reps, 1, n_img - 1)?;
    let pooled = g.matmul(pooled_weights, patches)?;
    let img_emb = net.project(g, pooled, &net.layout.proj_image)?;
    let phrase_global = phrase.global(g)?;
    let phrase_emb = net.project(g, phrase_global, &net.layout.phrase_projection())?;
    let cos = cosine_var(g, img_emb, phrase_emb)?;
    let one = g.constant(Tensor::scalar(1.0));
    let neg = g.scale(cos, -1.0);
    let loss = g.add(one, neg)?;
    Ok(BiattOutput { loss, weights })
}

/// Bidirectional weights of one image and one phrase with `mask_index`
/// masked, read at the configured cross layer.
pub fn phrase_weights(
    params: &Params,
    image: &Tensor,
    phrase: &[TokenId],
    mask_index: usize,
    row: BiattRow,
) -> Result<BidirAttWeights> {
    if mask_index >= phrase.len() {
        return Err(Error::Argument(format!("mask index {mask_index} outside a phrase of {}", phrase.len())));
    }
    let masked = MaskedPhrase::at(phrase, mask_index);
    let mut g = Graph::inference();
    let net = params.bind(&mut g);
    let img = net.encode_image(&mut g, image)?;
    let memory = net.image_memory(&mut g, img)?;
    let text = net.encode_text(&mut g, &masked.tokens)?;
    let fusion = net.cross_encode(&mut g, text, &memory, Some(params.config.bidiratt_layer))?;
    let trace = fusion
        .trace
        .as_ref()
        .ok_or_else(|| Error::Contract("fusion returned no trace".into()))?;
    let ws = g.value(net.var(net.layout.score_head)).clone();
    compute_weights(trace, row, mask_index + 1, &ws)
}

/// Patch weights as a `1 × L_I` graph value differentiable in `W^s` only.
/// `None` when the product has no mass on patches.
fn pooling_weights_var(g: &mut Graph, trace: &AttentionTrace, weights: &BidirAttWeights, ws: Var) -> Result<Option<Var>> {
    let n = weights.w_fa.len();
    let mut ba_heads = Vec::with_capacity(trace.num_heads());
    for h in &trace.heads {
        let v = g.constant(h.v.clone());
        let ba = g.matmul(v, ws)?;
        ba_heads.push(g.relu(ba));
    }
    let ba_sum = g.add_all(&ba_heads)?;
    let ba_mean = g.scale(ba_sum, 1.0 / trace.num_heads() as f64);
    let fa = g.constant(Tensor::matrix(n, 1, weights.w_fa.clone())?);
    let raw = g.mul(fa, ba_mean)?;
    let raw = g.slice_rows(raw, 1, n - 1)?;
    let total = g.sum(raw);
    if g.scalar(total) < DEGENERATE_MASS {
        return Ok(None);
    }
    let inv = g.recip(total)?;
    let w = g.mul_scalar(raw, inv)?;
    Ok(Some(g.transpose(w)))
}
