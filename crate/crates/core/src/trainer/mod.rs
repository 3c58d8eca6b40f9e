//! AdamW, the warmup-cosine schedule and the two-stage training loop.

mod objective;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bidiratt::{BiattOptions, BiattRow, BidirAttWeights};
use crate::data::{make_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    log_csv, sample_negatives, LogRow, LossBreakdown, MpmPositions, NegSampling, QueueState, QueueTargets, Stage,
    TripletDirection,
};
use crate::model::{momentum_update, AttentionTrace, Checkpoint, ModelConfig, MomentumState, Params};
use crate::numerics::{Graph, Rng};
use crate::textproc::{Lexicon, Vocabulary};

pub use objective::{batch_objective, batch_objective_frozen, momentum_features, BiattPhrase, LossVars, MomentumFeatures, ObjectiveOptions};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, OptimState, ADAM_EPS, BETA1, BETA2};

/// Optimization and schedule settings, plus the switches between readings
/// of the method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    /// Share of each stage's steps spent warming up.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Triplet margin δ.
    pub margin: f64,
    /// Momentum-encoder coefficient α.
    pub momentum: f64,
    pub queue_size: usize,
    pub queue_targets: QueueTargets,
    pub k_rerank: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub biatt_row: BiattRow,
    pub biatt_phrase: BiattPhrase,
    pub biatt_score_head_grad: bool,
    pub mpm_positions: MpmPositions,
    pub triplet_direction: TripletDirection,
    pub neg_sampling: NegSampling,
    pub use_triplet: bool,
    pub use_biatt: bool,
    pub use_mpm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 15,
            base_lr: 1e-3,
            warmup_lr: 1e-6,
            warmup_fraction: 0.1,
            batch_size: 8,
            margin: crate::losses::DEFAULT_MARGIN,
            momentum: 0.995,
            queue_size: 256,
            queue_targets: QueueTargets::Negatives,
            k_rerank: 32,
            seed: 0,
            weight_decay: 0.01,
            max_grad_norm: None,
            biatt_row: BiattRow::Mask,
            biatt_phrase: BiattPhrase::Masked,
            biatt_score_head_grad: true,
            mpm_positions: MpmPositions::Masked,
            triplet_direction: TripletDirection::Standard,
            neg_sampling: NegSampling::Hard,
            use_triplet: true,
            use_biatt: true,
            use_mpm: true,
        }
    }
}

impl TrainConfig {
    /// Learning rates of the full-scale recipe, which starts from pretrained weights.
    pub fn full_scale() -> Self {
        Self {
            base_lr: 1e-5,
            ..Self::default()
        }
    }

    /// Global alignment only: contrastive, matching and triplet terms.
    pub fn global_only(mut self) -> Self {
        self.use_biatt = false;
        self.use_mpm = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.k_rerank == 0 {
            return fail("batch_size and k_rerank must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.warmup_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning rates must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1)");
        }
        if !(self.margin >= 0.0) {
            return fail("margin must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return fail("max_grad_norm must be positive");
        }
        Ok(())
    }

    pub fn objective(&self, stage: Stage) -> ObjectiveOptions {
        ObjectiveOptions {
            stage,
            margin: self.margin,
            biatt: BiattOptions {
                row: self.biatt_row,
                score_head_grad: self.biatt_score_head_grad,
            },
            biatt_phrase: self.biatt_phrase,
            mpm_positions: self.mpm_positions,
            triplet_direction: self.triplet_direction,
            queue_targets: self.queue_targets,
            use_triplet: self.use_triplet,
            use_biatt: self.use_biatt,
            use_mpm: self.use_mpm,
        }
    }

    fn stage_epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_epochs,
            Stage::Two => self.stage2_epochs,
        }
    }
}

/// What an observer sees after each optimizer step.
pub struct StepInfo<'a> {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub batch: &'a Batch,
    pub traces: &'a [AttentionTrace],
    pub weights: &'a [BidirAttWeights],
    pub params: &'a Params,
}

/// Everything the loop owns between steps.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: Params,
    pub momentum: MomentumState,
    pub optim: OptimState,
    pub queues: QueueState,
    pub log: Vec<LogRow>,
    batch_rng: Rng,
    neg_rng: Rng,
}

impl Trainer {
    /// Fresh parameters from `seed`; `model.vocab_size` must match `vocab`.
    pub fn new(config: TrainConfig, model: &ModelConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        if model.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} but vocabulary has {} tokens",
                model.vocab_size,
                vocab.len()
            )));
        }
        let mut root = Rng::seed(config.seed);
        let params = Params::init(model, &mut root.fork(1))?;
        let momentum = MomentumState::new(&params, config.momentum)?;
        let optim = OptimState::new(&params.store);
        let queues = QueueState::new(config.queue_size, model.proj_dim);
        Ok(Self {
            params,
            momentum,
            optim,
            queues,
            log: Vec::new(),
            batch_rng: root.fork(2),
            neg_rng: root.fork(3),
            config,
        })
    }

    /// One optimizer step on `batch`.
    pub fn step(
        &mut self,
        batch: &Batch,
        stage: Stage,
        lr: f64,
        observer: &mut dyn FnMut(&StepInfo),
    ) -> Result<LossBreakdown> {
        let step = self.log.len();
        let mom = momentum_features(&self.params, &self.momentum, batch)?;
        let mut g = Graph::train();
        let net = self.params.bind(&mut g);
        let opts = self.config.objective(stage);
        let mode = self.config.neg_sampling;
        let neg_rng = &mut self.neg_rng;
        let vars = batch_objective(
            &mut g,
            &net,
            batch,
            &mom,
            &mut self.queues,
            |sims, tau| sample_negatives(sims, tau, mode, neg_rng),
            &opts,
        )?;
        let losses = vars.breakdown(&g, stage);
        if !losses.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} (stage {stage}): {losses:?}")));
        }
        g.backward(vars.total)?;
        let mut grads: Vec<_> = net.bindings().map(|(_, v)| g.grad(v)).collect();
        if let Some(max) = self.config.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let log_tau = self.params.layout.log_tau;
        adamw_step(
            &mut self.params.store,
            &grads,
            &mut self.optim,
            lr,
            self.config.weight_decay,
            |id| id != log_tau,
        )
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
            e => e,
        })?;
        momentum_update(&self.params, &mut self.momentum)?;
        self.log.push(LogRow { step, lr, losses });
        observer(&StepInfo {
            step,
            stage,
            lr,
            losses,
            batch,
            traces: &vars.traces,
            weights: &vars.weights,
            params: &self.params,
        });
        Ok(losses)
    }

    /// Every epoch's batches of one stage, drawn up front.
    pub fn stage_batches(&mut self, ds: &Dataset, vocab: &Vocabulary, lexicon: &Lexicon, stage: Stage) -> Result<Vec<Batch>> {
        let mut all = Vec::new();
        for _ in 0..self.config.stage_epochs(stage) {
            all.extend(make_batches(ds, &ds.train, self.config.batch_size, vocab, lexicon, &mut self.batch_rng)?);
        }
        Ok(all)
    }

    /// Runs one stage under its own warmup-cosine schedule.
    pub fn run_stage(
        &mut self,
        ds: &Dataset,
        vocab: &Vocabulary,
        lexicon: &Lexicon,
        stage: Stage,
        observer: &mut dyn FnMut(&StepInfo),
    ) -> Result<()> {
        let batches = self.stage_batches(ds, vocab, lexicon, stage)?;
        let total = batches.len();
        let warmup = (self.config.warmup_fraction * total as f64).ceil() as usize;
        for (k, batch) in batches.iter().enumerate() {
            let lr = cosine_lr(k, total, self.config.base_lr, warmup, self.config.warmup_lr);
            self.step(batch, stage, lr, observer)?;
        }
        log::info!("stage {stage}: {total} steps, last total loss {:?}", self.log.last().map(|r| r.losses.total));
        Ok(())
    }

    pub fn checkpoint(&self, vocab: &Vocabulary) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            momentum: Some(self.momentum.clone()),
            vocabulary: Some(vocab.clone()),
        }
    }
}

/// Result of a full two-stage run.
pub struct TrainOutcome {
    pub params: Params,
    pub momentum: MomentumState,
    pub log: Vec<LogRow>,
    /// Checkpoint directories written, one per stage.
    pub checkpoints: Vec<PathBuf>,
}

/// Stage one (contrastive + matching), then stage two (every enabled term).
/// With `out`, writes `stage1/`, `stage2/` checkpoints and `train_log.csv`.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    ds: &Dataset,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    out: Option<&Path>,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), model, vocab)?;
    let mut checkpoints = Vec::new();
    for (stage, name) in [(Stage::One, "stage1"), (Stage::Two, "stage2")] {
        trainer.run_stage(ds, vocab, lexicon, stage, observer)?;
        if let Some(dir) = out {
            let path = dir.join(name);
            trainer.checkpoint(vocab).save(&path)?;
            fs::write(dir.join("train_log.csv"), log_csv(&trainer.log))?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        params: trainer.params,
        momentum: trainer.momentum,
        log: trainer.log,
        checkpoints,
    })
}
