//! End-to-end acceptance checks, one printed line per criterion.
//!
//! Runs without the libtest harness so every verdict reaches stdout. The
//! process fails when a structural criterion (everything except the two
//! learning-outcome checks) fails; the learning outcomes are reported as
//! PASS or FAIL without failing the run unless `LAIP_ACCEPTANCE_STRICT` is set.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use laip::bidiratt::{backward_attention, phrase_weights, BiattRow};
use laip::data::{generate_dataset, DataConfig, Dataset, Region, Slot};
use laip::gradsuite::{self, SuiteConfig, Term};
use laip::model::{ModelConfig, Params};
use laip::numerics::{Graph, Rng, Tensor};
use laip::retrieval::{metrics_from_scores, split_task, EvalReport, Evaluation, Metrics, RetrievalTask, RECALL_KS};
use laip::textproc::{extract_phrases, tokenize, Lexicon, TokenId, Vocabulary};
use laip::losses::Stage;
use laip::trainer::{train, StepInfo, TrainConfig, Trainer};
use laip::Result;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("{tag} [{:>2}] {}: {}", v.id, v.name, v.detail);
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---------------------------------------------------------------- shared setup

fn desk_model(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    }
}

fn image_rows(ds: &Dataset, record: usize) -> Tensor {
    let n = ds.patch_grid.0 * ds.patch_grid.1;
    ds.records[record].image.clone().reshape(&[n, ds.patch_pixels]).unwrap()
}

// ------------------------------------------------------------ closed form (1)

fn closed_form(vocab: &Vocabulary) -> Verdict {
    let start = Instant::now();
    let caption = vocab.encode(&tokenize("a woman with black hair wears a red shirt and blue jeans"));
    let mut worst = 0.0f64;
    let mut traces = 0;
    for seed in 0..100u64 {
        let side = [2, 4, 8][seed as usize % 3];
        let cfg = ModelConfig {
            d: 16,
            heads: 4,
            n_cross_layers: 3,
            bidiratt_layer: 1 + seed as usize % 3,
            proj_dim: 8,
            patch_grid: (side, side),
            patch_pixels: 6,
            vocab_size: vocab.len(),
            init_std: 0.3,
            ..ModelConfig::default()
        };
        let params = Params::init(&cfg, &mut Rng::seed(seed)).unwrap();
        let mut rng = Rng::seed(1000 + seed);
        let pixels = Tensor::matrix(side * side, 6, (0..side * side * 6).map(|_| rng.uniform()).collect()).unwrap();

        let mut g = Graph::train();
        let net = params.bind(&mut g);
        let img = net.encode_image(&mut g, &pixels).unwrap();
        let memory = net.image_memory(&mut g, img).unwrap();
        let text = net.encode_text(&mut g, &caption).unwrap();
        let fusion = net.cross_encode(&mut g, text, &memory, Some(cfg.bidiratt_layer)).unwrap();
        let trace = fusion.trace.clone().unwrap();
        let ws = net.var(net.layout.score_head);
        let closed = backward_attention(&trace, g.value(ws)).unwrap();
        let row = 1 + rng.below(caption.len());
        for (h, a) in fusion.trace_vars.iter().enumerate() {
            let a_hat = g.row(*a, row).unwrap();
            let v = g.constant(trace.heads[h].v.clone());
            let av = g.matmul(a_hat, v).unwrap();
            let s = g.matmul(av, ws).unwrap();
            g.zero_grad();
            g.backward(s).unwrap();
            let auto = g.grad(*a);
            for (j, &c) in closed[h].iter().enumerate() {
                worst = worst.max(rel(c, auto.get(row, j)));
            }
            traces += 1;
        }
    }
    let took = start.elapsed();
    Verdict {
        id: 1,
        name: "closed-form backward attention",
        pass: worst <= 1e-10 && traces == 400 && took < Duration::from_secs(5),
        detail: format!("max rel err {worst:.1e} over 100 traces ({traces} heads), {}", secs(took)),
    }
}

// ------------------------------------------------------------- grad suite (2)

fn finite_differences() -> Verdict {
    let start = Instant::now();
    let cfg = SuiteConfig::default();
    let outcome = gradsuite::run(&cfg);
    let took = start.elapsed();
    match outcome {
        Ok(r) => {
            let worst = r.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
            let covered = Term::ALL.iter().all(|&t| r.term(t).is_some_and(|x| x.active > 0));
            Verdict {
                id: 2,
                name: "finite-difference suite",
                pass: r.passed() && covered && r.seeds.len() >= 10 && took < Duration::from_secs(60),
                detail: format!(
                    "{} terms x {} seeds, worst rel err {worst:.1e} (tol {:.0e}), {}",
                    r.terms.len(),
                    r.seeds.len(),
                    r.tolerance,
                    secs(took)
                ),
            }
        }
        Err(e) => Verdict {
            id: 2,
            name: "finite-difference suite",
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

// ------------------------------------------------- normalization invariants (3)

#[derive(Default)]
struct NormStats {
    attention_rows: usize,
    weight_vectors: usize,
    worst: f64,
    epoch_steps: usize,
}

impl NormStats {
    fn rows(&mut self, a: &Tensor) {
        for r in 0..a.rows() {
            let s: f64 = a.row_slice(r).iter().sum();
            self.worst = self.worst.max((s - 1.0).abs());
            self.attention_rows += 1;
        }
    }

    fn weights(&mut self, w: &[f64]) {
        self.worst = self.worst.max((w.iter().sum::<f64>() - 1.0).abs());
        self.weight_vectors += 1;
    }

    /// Every traced row and weight of the step; on the first epoch of each
    /// stage, also every layer of every caption fusion.
    fn observe(&mut self, info: &StepInfo, steps_per_epoch: usize, stage_start: usize) {
        for t in info.traces {
            for h in &t.heads {
                self.rows(&h.a);
            }
        }
        for w in info.weights {
            self.weights(&w.w);
        }
        if info.step - stage_start >= steps_per_epoch {
            return;
        }
        self.epoch_steps += 1;
        let mut g = Graph::inference();
        let net = info.params.bind(&mut g);
        for ex in &info.batch.examples {
            let img = net.encode_image(&mut g, &ex.image).unwrap();
            let memory = net.image_memory(&mut g, img).unwrap();
            for layer in 1..=info.params.config.n_cross_layers {
                let text = net.encode_text(&mut g, &ex.text).unwrap();
                let fusion = net.cross_encode(&mut g, text, &memory, Some(layer)).unwrap();
                for h in &fusion.trace.unwrap().heads {
                    self.rows(&h.a);
                }
            }
            for p in &ex.phrases {
                let w = phrase_weights(info.params, &ex.image, &p.masked.original, p.masked.mask_index, BiattRow::Mask);
                self.weights(&w.unwrap().w);
            }
        }
    }
}

// ------------------------------------------------------- last-layer gradient (4)

fn last_layer_gradient(vocab: &Vocabulary, ds: &Dataset) -> Verdict {
    let mut model = desk_model(vocab);
    let last = model.n_cross_layers;
    let mut max_last = 0.0f64;
    let mut min_inner = f64::INFINITY;
    let mut cls_alive = true;
    for seed in 0..5u64 {
        model.init_std = 0.1;
        let params = Params::init(&model, &mut Rng::seed(seed)).unwrap();
        for &rec in ds.test.iter().take(4) {
            let caption = vocab.encode(&tokenize(&ds.records[rec].caption));
            let image = image_rows(ds, rec);
            for layer in [last - 1, last] {
                let mut g = Graph::train();
                let net = params.bind(&mut g);
                let img = net.encode_image(&mut g, &image).unwrap();
                let memory = net.image_memory(&mut g, img).unwrap();
                let text = net.encode_text(&mut g, &caption).unwrap();
                let fusion = net.cross_encode(&mut g, text, &memory, Some(layer)).unwrap();
                let score = net.fine_score(&mut g, &fusion).unwrap();
                g.backward(score).unwrap();
                // Token rows: everything but the [CLS] query.
                let mut token_mass = 0.0f64;
                let mut cls_mass = 0.0f64;
                for a in &fusion.trace_vars {
                    let grad = g.grad(*a);
                    cls_mass = cls_mass.max(grad.row_slice(0).iter().fold(0.0, |m, x| m.max(x.abs())));
                    for r in 1..grad.rows() {
                        token_mass = token_mass.max(grad.row_slice(r).iter().fold(0.0, |m, x| m.max(x.abs())));
                    }
                }
                if layer == last {
                    max_last = max_last.max(token_mass);
                    cls_alive &= cls_mass > 0.0;
                } else {
                    min_inner = min_inner.min(token_mass);
                }
            }
        }
    }
    Verdict {
        id: 4,
        name: "last-layer zero gradient",
        pass: max_last == 0.0 && cls_alive && min_inner > 0.0,
        detail: format!(
            "layer {last}: max |d score / d A[token rows]| = {max_last:e}; layer {}: min over cases {min_inner:.1e}",
            last - 1
        ),
    }
}

// ----------------------------------------------------------- metric oracle (5)

/// Brute force: each item's rank is one plus the number of items that beat
/// it (higher score, or equal score and lower id).
fn oracle(scores: &[Vec<f64>], relevant: &[BTreeSet<usize>]) -> (Vec<f64>, f64, usize) {
    let mut hits = vec![0usize; RECALL_KS.len()];
    let mut ap_sum = 0.0;
    let mut counted = 0;
    for (row, rel) in scores.iter().zip(relevant) {
        if rel.is_empty() {
            continue;
        }
        counted += 1;
        let rank_of = |i: usize| {
            1 + (0..row.len())
                .filter(|&j| row[j] > row[i] || (row[j] == row[i] && j < i))
                .count()
        };
        let mut ranks: Vec<usize> = rel.iter().map(|&i| rank_of(i)).collect();
        ranks.sort_unstable();
        for (slot, &k) in RECALL_KS.iter().enumerate() {
            if ranks[0] <= k {
                hits[slot] += 1;
            }
        }
        let mut ap = 0.0;
        for (n, &r) in ranks.iter().enumerate() {
            ap += (n + 1) as f64 / r as f64;
        }
        ap_sum += ap / rel.len() as f64;
    }
    let denom = counted.max(1) as f64;
    (hits.iter().map(|&h| h as f64 / denom).collect(), ap_sum / denom, counted)
}

fn metric_oracle() -> Verdict {
    let mut rng = Rng::seed(5);
    let mut mismatches = 0;
    let mut largest = (0, 0);
    for case in 0..100 {
        let q = 1 + rng.below(50);
        let n = 1 + rng.below(200);
        if q * n > largest.0 * largest.1 {
            largest = (q, n);
        }
        // Coarse levels on every other case force ties.
        let levels = if case % 2 == 0 { Some(1 + rng.below(6)) } else { None };
        let scores: Vec<Vec<f64>> = (0..q)
            .map(|_| {
                (0..n)
                    .map(|_| match levels {
                        Some(l) => rng.below(l) as f64,
                        None => rng.normal(),
                    })
                    .collect()
            })
            .collect();
        let relevant: Vec<BTreeSet<usize>> = (0..q)
            .map(|_| (0..rng.below(n.min(6) + 1)).map(|_| rng.below(n)).collect())
            .collect();
        let flat = Tensor::from_rows(&scores).unwrap();
        let m = metrics_from_scores(&flat, &relevant);
        let (recalls, map, counted) = oracle(&scores, &relevant);
        let same = RECALL_KS.iter().zip(&recalls).all(|(&k, &r)| m.r(k) == r) && m.map_score == map && m.n_queries == counted;
        if !same {
            mismatches += 1;
        }
    }
    Verdict {
        id: 5,
        name: "metric oracle",
        pass: mismatches == 0,
        detail: format!("{mismatches} of 100 score matrices differ (largest {}x{})", largest.0, largest.1),
    }
}

// --------------------------------------------------- two-stage consistency (6)

/// Fine score of every gallery image, each on its own graph.
fn exhaustive_ranking(params: &Params, query: &[TokenId], gallery: &[Tensor]) -> Vec<usize> {
    let scores: Vec<f64> = gallery
        .iter()
        .map(|img| {
            let mut g = Graph::inference();
            let net = params.bind(&mut g);
            let enc = net.encode_image(&mut g, img).unwrap();
            let memory = net.image_memory(&mut g, enc).unwrap();
            let text = net.encode_text(&mut g, query).unwrap();
            let fusion = net.cross_encode(&mut g, text, &memory, None).unwrap();
            let s = net.fine_score(&mut g, &fusion).unwrap();
            g.value(s).item()
        })
        .collect();
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

#[derive(Default)]
struct Consistency {
    runs: usize,
    queries: usize,
    mismatches: usize,
}

impl Consistency {
    fn check(&mut self, params: &Params, task: &RetrievalTask, eval: &Evaluation) {
        self.runs += 1;
        for (q, r) in eval.results.iter().enumerate() {
            self.queries += 1;
            if r.ranking != exhaustive_ranking(params, &task.queries[q], &task.gallery) {
                self.mismatches += 1;
            }
        }
    }
}

// ------------------------------------------- learning and localization (7, 8)

struct Run {
    untrained: Metrics,
    trained: Metrics,
    params: Params,
    elapsed: Duration,
}

fn run_training(
    seed: u64,
    global_only: bool,
    lexicon: &Lexicon,
    vocab: &Vocabulary,
    out: Option<&Path>,
    consistency: &mut Consistency,
    norms: Option<&mut NormStats>,
) -> Result<(Run, Dataset)> {
    let start = Instant::now();
    let ds = generate_dataset(&DataConfig::default(), &mut Rng::seed(seed))?;
    let model = desk_model(vocab);
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if global_only {
        cfg = cfg.global_only();
    }
    let task = split_task(&ds, &ds.test, vocab)?;
    let k = cfg.k_rerank.min(task.gallery.len());
    if k != task.gallery.len() {
        log::warn!("k_rerank {k} below the gallery size; consistency check covers k = |gallery| only");
    }

    let untrained_params = Trainer::new(cfg.clone(), &model, vocab)?.params;
    let untrained = task.evaluate(&untrained_params, task.gallery.len())?;
    consistency.check(&untrained_params, &task, &untrained);

    let steps_per_epoch = ds.train.len().div_ceil(cfg.batch_size);
    let stage_two_start = cfg.stage1_epochs * steps_per_epoch;
    let mut norms = norms;
    let mut observer = |info: &StepInfo| {
        if let Some(n) = norms.as_deref_mut() {
            let start = if info.stage == Stage::One { 0 } else { stage_two_start };
            n.observe(info, steps_per_epoch, start);
        }
    };
    let outcome = train(&cfg, &model, &ds, vocab, lexicon, out, &mut observer)?;
    let trained = task.evaluate(&outcome.params, task.gallery.len())?;
    consistency.check(&outcome.params, &task, &trained);
    if let Some(dir) = out {
        let report = EvalReport::new(&trained.metrics, k, task.gallery.len(), seed);
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report).unwrap())?;
    }
    Ok((
        Run {
            untrained: untrained.metrics,
            trained: trained.metrics,
            params: outcome.params,
            elapsed: start.elapsed(),
        },
        ds,
    ))
}

/// Share of test records whose top-garment phrase peaks inside the top region.
fn localization(params: &Params, ds: &Dataset, lexicon: &Lexicon, vocab: &Vocabulary) -> (usize, usize) {
    let mut inside = 0;
    for &rec in &ds.test {
        let r = &ds.records[rec];
        let garment = r.attribute(Slot::TopType);
        let phrase = extract_phrases(&r.caption, lexicon)
            .into_iter()
            .find(|p| r.phrase_slot(&p.words) == Some(Slot::TopType));
        let Some(phrase) = phrase else { continue };
        let mask = phrase.words.iter().position(|w| w == garment).unwrap_or(phrase.len() - 1);
        let ids = vocab.encode(&phrase.words);
        let w = phrase_weights(params, &image_rows(ds, rec), &ids, mask, BiattRow::Mask).unwrap();
        let best = (1..w.w.len()).max_by(|&a, &b| w.w[a].total_cmp(&w.w[b]).then(b.cmp(&a))).unwrap() - 1;
        if Region::Top.contains(ds.patch_grid, best) {
            inside += 1;
        }
    }
    (inside, ds.test.len())
}

// ----------------------------------------------------------- chunker fixture (9)

fn chunker_fixture(lexicon: &Lexicon) -> Verdict {
    #[derive(serde::Deserialize)]
    struct Case {
        text: String,
        expected_phrases: Vec<String>,
    }
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/chunker_fixture.json");
    let cases: Vec<Case> = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let wrong: Vec<&str> = cases
        .iter()
        .filter(|c| {
            let got: Vec<String> = extract_phrases(&c.text, lexicon).iter().map(|p| p.text()).collect();
            got != c.expected_phrases
        })
        .map(|c| c.text.as_str())
        .collect();
    Verdict {
        id: 9,
        name: "chunker fixture",
        pass: wrong.is_empty() && cases.len() == 20,
        detail: if wrong.is_empty() {
            format!("{} sentences exact", cases.len())
        } else {
            format!("{} of {} differ, first {:?}", wrong.len(), cases.len(), wrong[0])
        },
    }
}

// ------------------------------------------------------------- determinism (10)

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn main() {
    let lexicon = Lexicon::builtin();
    let vocab = Vocabulary::from_lexicon(&lexicon);
    let mut verdicts = Vec::new();
    let emit = |v: Verdict, all: &mut Vec<Verdict>| {
        report(&v);
        all.push(v);
    };

    emit(closed_form(&vocab), &mut verdicts);
    emit(finite_differences(), &mut verdicts);

    let scratch = tempfile::tempdir().unwrap();
    let mut consistency = Consistency::default();
    let mut norms = NormStats::default();
    let mut runs = Vec::new();
    let mut datasets = Vec::new();
    let mut training_time = Duration::ZERO;
    let mut failure = None;
    for seed in 0..3u64 {
        for global_only in [false, true] {
            let out = (seed == 0 && !global_only).then(|| scratch.path().join("a"));
            let n = (seed == 0 && !global_only).then_some(&mut norms);
            match run_training(seed, global_only, &lexicon, &vocab, out.as_deref(), &mut consistency, n) {
                Ok((run, ds)) => {
                    training_time += run.elapsed;
                    println!(
                        "     seed {seed} {:<11} untrained R@1 {:.3}  trained R@1 {:.3} R@5 {:.3} mAP {:.3}  ({})",
                        if global_only { "global-only" } else { "full" },
                        run.untrained.r(1),
                        run.trained.r(1),
                        run.trained.r(5),
                        run.trained.map_score,
                        secs(run.elapsed)
                    );
                    if !global_only {
                        datasets.push(ds);
                    }
                    runs.push((seed, global_only, run));
                }
                Err(e) => failure = Some(format!("seed {seed}: {e}")),
            }
        }
    }

    let verdict3 = Verdict {
        id: 3,
        name: "normalization invariants",
        pass: failure.is_none() && norms.worst <= 1e-9 && norms.attention_rows > 0 && norms.weight_vectors > 0,
        detail: format!(
            "{} attention rows, {} weight vectors, worst |sum - 1| = {:.1e} ({} first-epoch steps across all layers)",
            norms.attention_rows, norms.weight_vectors, norms.worst, norms.epoch_steps
        ),
    };
    emit(verdict3, &mut verdicts);

    let test_ds = generate_dataset(&DataConfig::default(), &mut Rng::seed(0)).unwrap();
    emit(last_layer_gradient(&vocab, &test_ds), &mut verdicts);
    emit(metric_oracle(), &mut verdicts);
    emit(
        Verdict {
            id: 6,
            name: "two-stage consistency",
            pass: failure.is_none() && consistency.mismatches == 0 && consistency.runs == 12,
            detail: format!(
                "{} mismatching queries over {} evaluation runs ({} queries), k = |gallery|",
                consistency.mismatches, consistency.runs, consistency.queries
            ),
        },
        &mut verdicts,
    );

    let full = |s: u64| runs.iter().find(|r| r.0 == s && !r.1).map(|r| &r.2);
    let global = |s: u64| runs.iter().find(|r| r.0 == s && r.1).map(|r| &r.2);
    let seed0 = full(0).map_or(0.0, |r| r.trained.r(1));
    let gains: Vec<f64> = (0..3).filter_map(full).map(|r| r.trained.r(1) - r.untrained.r(1)).collect();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mean_full = mean((0..3).filter_map(full).map(|r| r.trained.r(1)).collect());
    let mean_global = mean((0..3).filter_map(global).map(|r| r.trained.r(1)).collect());
    let min_gain = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let fast = training_time < Duration::from_secs(600);
    emit(
        Verdict {
            id: 7,
            name: "end-to-end learning signal",
            pass: failure.is_none()
                && runs.len() == 6
                && seed0 >= 0.75
                && gains.len() == 3
                && min_gain >= 0.5
                && mean_full >= mean_global
                && fast,
            detail: match &failure {
                Some(f) => format!("training error: {f}"),
                None => format!(
                    "seed 0 R@1 {seed0:.3} (need 0.75); min gain over untrained {min_gain:.3} (need 0.5); \
                     mean R@1 full {mean_full:.3} vs global-only {mean_global:.3}; {}",
                    secs(training_time)
                ),
            },
        },
        &mut verdicts,
    );

    let loc: Vec<(usize, usize)> = (0..3)
        .filter_map(|s| full(s).zip(datasets.get(s as usize)))
        .map(|(r, ds)| localization(&r.params, ds, &lexicon, &vocab))
        .collect();
    let (inside, total) = loc.first().copied().unwrap_or((0, 0));
    let share = inside as f64 / total.max(1) as f64;
    emit(
        Verdict {
            id: 8,
            name: "localization sanity",
            pass: total > 0 && share >= 0.7,
            detail: format!(
                "seed 0: {inside}/{total} top-garment argmaxes inside the top region ({:.0}%, need 70%); all seeds {:?}",
                100.0 * share,
                loc
            ),
        },
        &mut verdicts,
    );

    emit(chunker_fixture(&lexicon), &mut verdicts);

    let det = match run_training(0, false, &lexicon, &vocab, Some(&scratch.path().join("b")), &mut Consistency::default(), None) {
        Ok(_) => {
            let a = files_under(&scratch.path().join("a"));
            let b = files_under(&scratch.path().join("b"));
            let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            Verdict {
                id: 10,
                name: "determinism",
                pass: !a.is_empty() && a.len() == b.len() && differing == 0,
                detail: format!("{} files compared, {differing} differ", a.len()),
            }
        }
        Err(e) => Verdict {
            id: 10,
            name: "determinism",
            pass: false,
            detail: format!("second run failed: {e}"),
        },
    };
    emit(det, &mut verdicts);

    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
    let strict = std::env::var_os("LAIP_ACCEPTANCE_STRICT").is_some();
    let blocking: Vec<usize> = verdicts
        .iter()
        .filter(|v| !v.pass && (strict || !matches!(v.id, 7 | 8)))
        .map(|v| v.id)
        .collect();
    if !blocking.is_empty() {
        eprintln!("failing criteria: {blocking:?}");
        std::process::exit(1);
    }
}
