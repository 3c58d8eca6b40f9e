use serde::{Deserialize, Serialize};

use crate::bidiratt::{biatt_loss, biatt_loss_with_trace, BiattOptions, BidirAttWeights};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::flags::flag_enum;
use crate::losses::{
    fusion_triplet_loss, itc_loss, itm_loss, mpm_loss, LossBreakdown, MpmPositions, Negatives, QueueState, QueueTargets,
    Stage,
    TripletDirection,
};
use crate::model::{AttentionTrace, MomentumState, Net, Params};
use crate::numerics::{Graph, Tensor, Var};

flag_enum! {
    /// Which phrase encoding the pooled image is aligned with.
    BiattPhrase {
        /// The masked phrase, shared with the masked-phrase classifier.
        Masked => "masked",
        Clean => "clean",
    } default Masked
}

/// Which terms are built and how.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    pub stage: Stage,
    pub margin: f64,
    pub biatt: BiattOptions,
    pub biatt_phrase: BiattPhrase,
    pub mpm_positions: MpmPositions,
    pub triplet_direction: TripletDirection,
    pub queue_targets: QueueTargets,
    pub use_triplet: bool,
    pub use_biatt: bool,
    pub use_mpm: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            stage: Stage::Two,
            margin: crate::losses::DEFAULT_MARGIN,
            biatt: BiattOptions::default(),
            biatt_phrase: BiattPhrase::Masked,
            mpm_positions: MpmPositions::Masked,
            triplet_direction: TripletDirection::Standard,
            queue_targets: QueueTargets::Negatives,
            use_triplet: true,
            use_biatt: true,
            use_mpm: true,
        }
    }
}

/// Momentum-encoder projections of a batch (constants for the live graph).
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumFeatures {
    pub img: Tensor,
    pub txt: Tensor,
}

/// Global image and text projections of a batch, one row per example.
fn global_projections(g: &mut Graph, net: &Net, batch: &Batch) -> Result<(Vec<Var>, Vec<Var>, Var, Var)> {
    let mut images = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    let mut img_cls = Vec::with_capacity(batch.len());
    let mut txt_cls = Vec::with_capacity(batch.len());
    for e in &batch.examples {
        let img = net.encode_image(g, &e.image)?;
        let txt = net.encode_text(g, &e.text)?;
        img_cls.push(img.global(g)?);
        txt_cls.push(txt.global(g)?);
        images.push(img.reps);
        texts.push(txt.reps);
    }
    let ic = g.concat_rows(&img_cls)?;
    let tc = g.concat_rows(&txt_cls)?;
    let ip = net.project(g, ic, &net.layout.proj_image)?;
    let tp = net.project(g, tc, &net.layout.proj_text)?;
    Ok((images, texts, ip, tp))
}

/// Runs the momentum encoders over a batch without recording gradients.
pub fn momentum_features(params: &Params, momentum: &MomentumState, batch: &Batch) -> Result<MomentumFeatures> {
    let mut g = Graph::inference();
    let net = momentum.bind(params, &mut g);
    let (_, _, ip, tp) = global_projections(&mut g, &net, batch)?;
    Ok(MomentumFeatures {
        img: g.value(ip).clone(),
        txt: g.value(tp).clone(),
    })
}

/// Graph handles of every loss term of one batch.
pub struct LossVars {
    pub itc: Var,
    pub itm: Var,
    pub tri: Option<Var>,
    /// Per phrase, in example order.
    pub biatt: Vec<Var>,
    pub mpm: Vec<Var>,
    pub total: Var,
    pub batch_size: usize,
    pub negatives: Negatives,
    pub traces: Vec<AttentionTrace>,
    pub weights: Vec<BidirAttWeights>,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, stage: Stage) -> LossBreakdown {
        let scale = 1.0 / self.batch_size as f64;
        let n = self.biatt.len().max(self.mpm.len());
        let per_phrase: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let b = self.biatt.get(k).map_or(0.0, |&v| g.scalar(v));
                let m = self.mpm.get(k).map_or(0.0, |&v| g.scalar(v));
                (b * scale, m * scale)
            })
            .collect();
        let tri = self.tri.map_or(0.0, |v| g.scalar(v));
        LossBreakdown::combine(g.scalar(self.itc), g.scalar(self.itm), tri, &per_phrase, stage)
    }
}

fn mean(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let s = g.add_all(xs)?;
    Ok(g.scale(s, 1.0 / xs.len() as f64))
}

/// Builds the full objective of one batch on `g`.
///
/// `negatives` receives the in-batch image–text similarities and `τ` and
/// returns the matching negatives. The queues receive the momentum features.
pub fn batch_objective(
    g: &mut Graph,
    net: &Net,
    batch: &Batch,
    momentum: &MomentumFeatures,
    queues: &mut QueueState,
    negatives: impl FnOnce(&Tensor, f64) -> Result<Negatives>,
    opts: &ObjectiveOptions,
) -> Result<LossVars> {
    batch_objective_frozen(g, net, batch, momentum, queues, negatives, opts, None)
}

/// As [`batch_objective`]; the bidirectional weights of phrase `k` (batch
/// order) come from `frozen[k]` instead of the live trace.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective_frozen(
    g: &mut Graph,
    net: &Net,
    batch: &Batch,
    momentum: &MomentumFeatures,
    queues: &mut QueueState,
    negatives: impl FnOnce(&Tensor, f64) -> Result<Negatives>,
    opts: &ObjectiveOptions,
    frozen: Option<&[AttentionTrace]>,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let b = batch.len();
    let (images, texts, ip, tp) = global_projections(g, net, batch)?;
    let ids = batch.identities();
    let ids = (opts.queue_targets == QueueTargets::Identity).then_some(ids.as_slice());
    let itc = itc_loss(g, ip, tp, &momentum.img, &momentum.txt, queues, net.log_tau(), ids)?;
    let tau = g.scalar(net.log_tau()).exp();
    let negs = negatives(&itc.batch_sims, tau)?;
    if !negs.text_for_image.is_empty() && (negs.text_for_image.len() != b || negs.image_for_text.len() != b) {
        return Err(Error::Contract(format!("negatives for {} examples, batch of {b}", negs.text_for_image.len())));
    }

    let mut memories = Vec::with_capacity(b);
    for &img in &images {
        memories.push(net.image_memory(g, crate::model::EncoderOutput { reps: img })?);
    }
    let text_out = |i: usize| crate::model::EncoderOutput { reps: texts[i] };

    let mut logits = Vec::with_capacity(3 * b);
    let mut labels = Vec::with_capacity(3 * b);
    let mut pos = Vec::with_capacity(b);
    for (i, memory) in memories.iter().enumerate().take(b) {
        let f = net.cross_encode(g, text_out(i), memory, None)?;
        let s = net.fine_score(g, &f)?;
        pos.push(s);
        logits.push(s);
        labels.push(1.0);
    }
    // neg_txt[i]: image i with a wrong text; neg_img[i]: text i with a wrong image.
    let mut neg_txt = Vec::new();
    let mut neg_img = Vec::new();
    for i in 0..negs.text_for_image.len() {
        let f = net.cross_encode(g, text_out(negs.text_for_image[i]), &memories[i], None)?;
        neg_txt.push(net.fine_score(g, &f)?);
        let f = net.cross_encode(g, text_out(i), &memories[negs.image_for_text[i]], None)?;
        neg_img.push(net.fine_score(g, &f)?);
    }
    for &s in neg_txt.iter().chain(&neg_img) {
        logits.push(s);
        labels.push(0.0);
    }
    let itm = itm_loss(g, &logits, &labels)?;

    let stage_two = opts.stage == Stage::Two;
    let tri = if stage_two && opts.use_triplet && !neg_txt.is_empty() {
        let mut terms = Vec::with_capacity(b);
        for i in 0..b {
            terms.push(fusion_triplet_loss(g, pos[i], neg_img[i], neg_txt[i], opts.margin, opts.triplet_direction)?);
        }
        Some(mean(g, &terms)?)
    } else {
        None
    };

    let mut biatt = Vec::new();
    let mut mpm = Vec::new();
    let mut traces = Vec::new();
    let mut weights = Vec::new();
    if stage_two && (opts.use_biatt || opts.use_mpm) {
        let layer = net.config.bidiratt_layer;
        for (i, e) in batch.examples.iter().enumerate() {
            for ph in &e.phrases {
                let masked = net.encode_text(g, &ph.masked.tokens)?;
                let fusion = net.cross_encode(g, masked, &memories[i], opts.use_biatt.then_some(layer))?;
                if opts.use_biatt {
                    let phrase_rep = match opts.biatt_phrase {
                        BiattPhrase::Masked => masked,
                        BiattPhrase::Clean => net.encode_text(g, &ph.masked.original)?,
                    };
                    let image = memories[i].image;
                    let mask_row = ph.masked.mask_index + 1;
                    let out = match frozen {
                        Some(list) => {
                            let trace = list.get(biatt.len()).ok_or_else(|| {
                                Error::Contract(format!("{} frozen traces for more phrases", list.len()))
                            })?;
                            biatt_loss_with_trace(g, net, image, phrase_rep, trace, mask_row, opts.biatt)?
                        }
                        None => biatt_loss(g, net, image, phrase_rep, &fusion, mask_row, opts.biatt)?,
                    };
                    biatt.push(out.loss);
                    weights.push(out.weights);
                    traces.extend(fusion.trace.clone());
                }
                if opts.use_mpm {
                    mpm.push(mpm_loss(g, net, &fusion, &ph.masked, opts.mpm_positions)?);
                }
            }
        }
    }

    let mut terms = vec![itc.loss, itm];
    terms.extend(tri);
    for list in [&biatt, &mpm] {
        if !list.is_empty() {
            let s = g.add_all(list)?;
            terms.push(g.scale(s, 1.0 / b as f64));
        }
    }
    let total = g.add_all(&terms)?;
    Ok(LossVars {
        itc: itc.loss,
        itm,
        tri,
        biatt,
        mpm,
        total,
        batch_size: b,
        negatives: negs,
        traces,
        weights,
    })
}
