//! Finite-difference verification of every training loss on toy models.
//!
//! Each case builds a small batch, fixes everything the objective treats as
//! constant (negatives, momentum features, queue contents, attention traces
//! behind the bidirectional weights) and compares the autodiff gradient of
//! each term with central differences on sampled parameter coordinates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, prepare_example, Batch, DataConfig};
use crate::error::{Error, Result};
use crate::losses::{Negatives, QueueState, QueueTargets};
use crate::model::{AttentionTrace, ModelConfig, MomentumState, Net, Params};
use crate::numerics::{relative_error, ridders, Derivative, Graph, Rng, Tensor, Var};
use crate::textproc::{Lexicon, Vocabulary};
use crate::trainer::{batch_objective_frozen, momentum_features, LossVars, MomentumFeatures, ObjectiveOptions};

/// Loss terms covered by the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Itc,
    Itm,
    Triplet,
    Biatt,
    Mpm,
    Total,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Itc, Term::Itm, Term::Triplet, Term::Biatt, Term::Mpm, Term::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            Term::Itc => "itc",
            Term::Itm => "itm",
            Term::Triplet => "triplet",
            Term::Biatt => "biatt",
            Term::Mpm => "mpm",
            Term::Total => "total",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Cases run with seeds `seed, seed+1, ...`.
    pub seed: u64,
    pub n_seeds: usize,
    /// Sampled coordinates per parameter tensor and case.
    pub coords_per_tensor: usize,
    /// Initial step of the extrapolated central differences.
    pub step: f64,
    pub tolerance: f64,
    pub batch_size: usize,
    pub objective: ObjectiveOptions,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seeds: 10,
            coords_per_tensor: 2,
            step: 0.05,
            tolerance: 1e-6,
            batch_size: 2,
            // Identity targets cover the soft-target path as well as the one-hot one.
            objective: ObjectiveOptions {
                queue_targets: QueueTargets::Identity,
                ..ObjectiveOptions::default()
            },
        }
    }
}

/// Worst coordinate seen for one term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: Term,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_seed: u64,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates with a nonzero analytic or numeric derivative.
    pub active: usize,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub terms: Vec<TermReport>,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.max_rel_error < self.tolerance && t.active > 0)
    }

    pub fn term(&self, term: Term) -> Option<&TermReport> {
        self.terms.iter().find(|t| t.term == term)
    }
}

/// Initial steps tried in turn: larger ones quiet round-off on flat
/// directions, smaller ones step inside ReLU and hinge kinks.
const STEP_SCALES: [f64; 5] = [1.0, 10.0, 0.1, 0.01, 0.001];

/// The toy architecture used by every case.
pub fn toy_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        n_self_layers: 1,
        n_cross_layers: 2,
        bidiratt_layer: 1,
        proj_dim: 4,
        patch_grid: (2, 3),
        patch_pixels: 3,
        ff_mult: 2,
        vocab_size,
        init_std: 0.4,
        ..ModelConfig::default()
    }
}

/// Everything a case holds fixed.
struct Case {
    params: Params,
    batch: Batch,
    momentum: MomentumFeatures,
    queues: QueueState,
    negatives: Negatives,
    traces: Vec<AttentionTrace>,
    opts: ObjectiveOptions,
}

impl Case {
    fn new(seed: u64, cfg: &SuiteConfig, vocab: &Vocabulary, lexicon: &Lexicon) -> Result<Self> {
        let mut rng = Rng::seed(seed);
        let b = cfg.batch_size;
        if b < 2 {
            return Err(Error::Config("gradient suite needs batches of at least two".into()));
        }
        let ds = generate_dataset(
            &DataConfig {
                n_identities: b,
                images_per_identity: 2,
                test_per_identity: 1,
                patch_side: 1,
                ..DataConfig::default()
            },
            &mut rng.fork(1),
        )?;
        let mut ex_rng = rng.fork(2);
        let examples = ds
            .train
            .iter()
            .map(|&i| prepare_example(&ds, i, vocab, lexicon, &mut ex_rng))
            .collect::<Result<Vec<_>>>()?;
        let model = toy_model(vocab.len());
        // Small random images keep cases cheap; captions and phrases stay real.
        let mut pix = rng.fork(7);
        let n_img = model.num_patches();
        let examples = examples
            .into_iter()
            .map(|mut e| {
                e.image = Tensor::matrix(n_img, model.patch_pixels, (0..n_img * model.patch_pixels).map(|_| pix.uniform()).collect())?;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch { examples };

        let mut params = Params::init(&model, &mut rng.fork(3))?;
        // Move τ off its initial value so its derivative is generic.
        let tau_id = params.layout.log_tau;
        let jitter = 0.3 * rng.normal();
        params.store.get_mut(tau_id).data_mut()[0] += jitter;

        // A drifted momentum copy keeps momentum and live features distinct.
        let mut shadow = params.clone();
        let mut noise = rng.fork(4);
        for id in shadow.store.ids().collect::<Vec<_>>() {
            for v in shadow.store.get_mut(id).data_mut() {
                *v += 0.05 * noise.normal();
            }
        }
        let momentum_state = MomentumState::new(&shadow, 0.5)?;
        let momentum = momentum_features(&params, &momentum_state, &batch)?;

        let mut queues = QueueState::new(2 * b, model.proj_dim);
        let mut q = rng.fork(5);
        let mut rand = |rows: usize| {
            Tensor::matrix(rows, model.proj_dim, (0..rows * model.proj_dim).map(|_| q.normal()).collect())
        };
        let (qi, qt) = (rand(b)?, rand(b)?);
        queues.enqueue_with_ids(&qi, &qt, Some(&batch.identities()))?;

        let mut neg = rng.fork(6);
        let mut other = |i: usize| (i + 1 + neg.below(b - 1)) % b;
        let negatives = Negatives {
            text_for_image: (0..b).map(&mut other).collect(),
            image_for_text: (0..b).map(&mut other).collect(),
        };

        let mut case = Self {
            params,
            batch,
            momentum,
            queues,
            negatives,
            traces: Vec::new(),
            opts: cfg.objective,
        };
        let mut g = Graph::inference();
        let net = case.params.bind(&mut g);
        let (vars, _) = case.build(&mut g, &net, false)?;
        case.traces = vars.traces;
        Ok(case)
    }

    fn build(&self, g: &mut Graph, net: &Net, frozen: bool) -> Result<(LossVars, [Option<Var>; 6])> {
        let mut queues = self.queues.clone();
        let negs = self.negatives.clone();
        let traces = frozen.then_some(self.traces.as_slice());
        let vars =
            batch_objective_frozen(g, net, &self.batch, &self.momentum, &mut queues, |_, _| Ok(negs), &self.opts, traces)?;
        let mut phrase_mean = |list: &[Var]| -> Result<Option<Var>> {
            if list.is_empty() {
                return Ok(None);
            }
            let s = g.add_all(list)?;
            Ok(Some(g.scale(s, 1.0 / vars.batch_size as f64)))
        };
        let biatt = phrase_mean(&vars.biatt)?;
        let mpm = phrase_mean(&vars.mpm)?;
        let roots = [Some(vars.itc), Some(vars.itm), vars.tri, biatt, mpm, Some(vars.total)];
        Ok((vars, roots))
    }

    fn values(&self, params: &Params) -> Result<[f64; 6]> {
        let mut g = Graph::inference();
        let net = params.bind(&mut g);
        let (_, roots) = self.build(&mut g, &net, true)?;
        Ok(roots.map(|v| v.map_or(0.0, |v| g.scalar(v))))
    }
}

/// Runs every case and reports the worst error per term.
pub fn run(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let lexicon = Lexicon::builtin();
    let vocab = Vocabulary::from_lexicon(&lexicon);
    let mut reports: Vec<TermReport> = Term::ALL
        .iter()
        .map(|&term| TermReport {
            term,
            max_rel_error: 0.0,
            worst_param: String::new(),
            worst_seed: cfg.seed,
            analytic: 0.0,
            numeric: 0.0,
            active: 0,
            checked: 0,
        })
        .collect();
    let seeds: Vec<u64> = (0..cfg.n_seeds as u64).map(|i| cfg.seed + i).collect();
    for &seed in &seeds {
        let case = Case::new(seed, cfg, &vocab, &lexicon)?;
        check_case(&case, seed, cfg, &mut reports)?;
    }
    Ok(SuiteReport {
        terms: reports,
        tolerance: cfg.tolerance,
        seeds,
    })
}

fn check_case(case: &Case, seed: u64, cfg: &SuiteConfig, reports: &mut [TermReport]) -> Result<()> {
    // Analytic gradients, one backward pass per term.
    let mut g = Graph::train();
    let net = case.params.bind(&mut g);
    let (_, roots) = case.build(&mut g, &net, true)?;
    let mut analytic = Vec::with_capacity(Term::ALL.len());
    for (term, root) in Term::ALL.into_iter().zip(roots) {
        let Some(root) = root else {
            return Err(Error::Contract(format!("term {term} missing from the objective")));
        };
        g.zero_grad();
        g.backward(root)?;
        let grads: Vec<Tensor> = case
            .params
            .store
            .ids()
            .map(|id| g.grad(net.var(id)))
            .collect();
        analytic.push(grads);
    }

    let mut rng = Rng::seed(seed ^ 0x9e37_79b9);
    let mut probe = case.params.clone();
    for (k, id) in case.params.store.ids().enumerate() {
        let n = case.params.store.get(id).numel();
        let coords = sample_coords(n, cfg.coords_per_tensor, &mut rng);
        for i in coords {
            let orig = probe.store.get(id).data()[i];
            let mut numeric: Vec<Derivative> = Vec::new();
            for h in STEP_SCALES.map(|c| c * cfg.step) {
                let d = ridders(
                    |x| {
                        probe.store.get_mut(id).data_mut()[i] = x;
                        Ok(case.values(&probe)?.to_vec())
                    },
                    orig,
                    h,
                )?;
                if numeric.is_empty() {
                    numeric = d;
                } else {
                    for (best, new) in numeric.iter_mut().zip(d) {
                        if new.error < best.error {
                            *best = new;
                        }
                    }
                }
                // A kink inside the stencil shows up as a poor extrapolation.
                let resolved = numeric.iter().all(|d| d.error <= 0.1 * cfg.tolerance * d.value.abs().max(1e-8));
                if resolved {
                    break;
                }
            }
            probe.store.get_mut(id).data_mut()[i] = orig;
            for (t, report) in reports.iter_mut().enumerate() {
                let numeric = numeric[t].value;
                let a = analytic[t][k].data()[i];
                let err = relative_error(a, numeric);
                report.checked += 1;
                if a != 0.0 || numeric != 0.0 {
                    report.active += 1;
                }
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_param = format!("{}[{i}]", case.params.store.name(id));
                    report.worst_seed = seed;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(())
}

fn sample_coords(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}
