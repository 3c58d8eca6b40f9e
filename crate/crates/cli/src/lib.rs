//! The `laip` command line: data generation, training, evaluation and
//! diagnostics over the synthetic corpus.

pub mod config;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use laip::bidiratt::{phrase_weights, write_heatmap_csv, write_heatmap_pgm, BiattRow};
use laip::data::{generate_dataset, load_dataset, save_dataset, Dataset};
use laip::gradsuite::{self, SuiteConfig};
use laip::losses::{MpmPositions, NegSampling, QueueTargets, TripletDirection};
use laip::model::Checkpoint;
use laip::numerics::Rng;
use laip::retrieval::{per_query_csv, split_task, EvalReport};
use laip::textproc::{extract_phrases, tokenize, Lexicon, Vocabulary};
use laip::trainer::{train, BiattPhrase};
use laip::{Error, Result};

pub use config::{keys_help, CliConfig};

fn flag<T: FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "laip", version, about = "Text-image local alignment on a synthetic person corpus", after_help = keys_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand; each overrides the config file.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file with `model`, `train` and `data` sections.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Candidates reranked by the fine score.
    #[arg(long, global = true, value_name = "N")]
    k: Option<usize>,
    /// Cross layer whose attention feeds the bidirectional weights (1-based).
    #[arg(long, global = true, value_name = "L")]
    layer: Option<usize>,
    #[arg(long, global = true, value_name = "cls|mask", value_parser = flag::<BiattRow>)]
    biatt_row: Option<BiattRow>,
    #[arg(long, global = true, value_name = "masked|clean", value_parser = flag::<BiattPhrase>)]
    biatt_phrase: Option<BiattPhrase>,
    #[arg(long, global = true, value_name = "masked|all", value_parser = flag::<MpmPositions>)]
    mpm_positions: Option<MpmPositions>,
    #[arg(long, global = true, value_name = "standard|printed", value_parser = flag::<TripletDirection>)]
    triplet_direction: Option<TripletDirection>,
    #[arg(long, global = true, value_name = "hard|uniform", value_parser = flag::<NegSampling>)]
    neg_sampling: Option<NegSampling>,
    #[arg(long, global = true, value_name = "negatives|identity", value_parser = flag::<QueueTargets>)]
    queue_targets: Option<QueueTargets>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset to --out.
    GenData,
    /// Two-stage training; writes checkpoints, the loss log and test metrics to --out.
    Train {
        /// Dataset directory; generated from the config when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Train the contrastive, matching and triplet terms only.
        #[arg(long)]
        global_only: bool,
    },
    /// Two-stage retrieval over the test split; prints the JSON report.
    Eval {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every loss; exits 3 on a breach.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Noun phrases of standard input, one per line.
    Parse,
    /// Bidirectional weights of one phrase over one image as CSV and PGM.
    AttnMap {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Record index in the dataset.
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long)]
        phrase: String,
        /// Word position inside the phrase to mask.
        #[arg(long, default_value_t = 0)]
        mask: usize,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) => 1,
        Error::NonFinite(_) => 3,
        Error::Shape { .. } | Error::Contract(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) => 2,
    }
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match dispatch(&cli, stdin, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn settings(common: &Common) -> Result<CliConfig> {
    let mut cfg = match &common.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(s) = common.seed {
        t.seed = s;
    }
    if let Some(k) = common.k {
        t.k_rerank = k;
    }
    if let Some(l) = common.layer {
        cfg.model.bidiratt_layer = l;
    }
    t.biatt_row = common.biatt_row.unwrap_or(t.biatt_row);
    t.biatt_phrase = common.biatt_phrase.unwrap_or(t.biatt_phrase);
    t.mpm_positions = common.mpm_positions.unwrap_or(t.mpm_positions);
    t.triplet_direction = common.triplet_direction.unwrap_or(t.triplet_direction);
    t.neg_sampling = common.neg_sampling.unwrap_or(t.neg_sampling);
    t.queue_targets = common.queue_targets.unwrap_or(t.queue_targets);
    t.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Argument("--out DIR is required".into()))
}

fn dataset(cfg: &CliConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(d) => load_dataset(d),
        None => generate_dataset(&cfg.data, &mut Rng::seed(cfg.train.seed)),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, Vocabulary)> {
    let ck = Checkpoint::load(dir)?;
    let vocab = ck
        .vocabulary
        .clone()
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("{} carries no vocabulary", dir.display()),
        })?;
    Ok((ck, vocab))
}

fn dispatch(cli: &Cli, stdin: &mut dyn Read, stdout: &mut dyn Write) -> Result<i32> {
    let common = &cli.common;
    let cfg = settings(common)?;
    match &cli.command {
        Command::GenData => {
            let out = out_dir(common)?;
            let ds = dataset(&cfg, None)?;
            save_dataset(&ds, out)?;
            writeln!(stdout, "{} records ({} train, {} test) in {}", ds.records.len(), ds.train.len(), ds.test.len(), out.display())?;
        }
        Command::Train { data, global_only } => {
            let out = out_dir(common)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let lexicon = Lexicon::builtin();
            let vocab = Vocabulary::from_lexicon(&lexicon);
            let mut model = cfg.model.clone();
            model.vocab_size = vocab.len();
            let mut tc = cfg.train.clone();
            if *global_only {
                tc = tc.global_only();
            }
            fs::create_dir_all(out)?;
            write_json(&out.join("config.json"), &CliConfig { model: model.clone(), train: tc.clone(), data: cfg.data.clone() })?;
            let outcome = train(&tc, &model, &ds, &vocab, &lexicon, Some(out), &mut |_| {})?;
            let task = split_task(&ds, &ds.test, &vocab)?;
            let eval = task.evaluate(&outcome.params, tc.k_rerank)?;
            let report = EvalReport::new(&eval.metrics, tc.k_rerank.min(task.gallery.len()), task.gallery.len(), tc.seed);
            write_json(&out.join("metrics.json"), &report)?;
            writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
        }
        Command::Eval { checkpoint, data } => {
            let (ck, vocab) = load_checkpoint(checkpoint)?;
            let ds = dataset(&cfg, data.as_deref())?;
            let task = split_task(&ds, &ds.test, &vocab)?;
            let k = cfg.train.k_rerank;
            let eval = task.evaluate(&ck.params, k)?;
            let report = EvalReport::new(&eval.metrics, k.min(task.gallery.len()), task.gallery.len(), cfg.train.seed);
            if let Some(out) = &common.out {
                fs::create_dir_all(out)?;
                write_json(&out.join("metrics.json"), &report)?;
                fs::write(out.join("per_query.csv"), per_query_csv(&eval))?;
            }
            writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
        }
        Command::Gradcheck { seeds } => {
            let suite = SuiteConfig {
                seed: cfg.train.seed,
                n_seeds: *seeds,
                objective: cfg.train.objective(laip::losses::Stage::Two),
                ..SuiteConfig::default()
            };
            let report = gradsuite::run(&suite)?;
            for t in &report.terms {
                writeln!(stdout, "{:<8} max_rel_error {:.3e} over {} coordinates ({} active)", t.term, t.max_rel_error, t.checked, t.active)?;
            }
            if let Some(out) = &common.out {
                fs::create_dir_all(out)?;
                write_json(&out.join("gradcheck.json"), &report)?;
            }
            if !report.passed() {
                writeln!(stdout, "FAILED: tolerance {:e}", report.tolerance)?;
                return Ok(3);
            }
        }
        Command::Parse => {
            let lexicon = Lexicon::builtin();
            let mut text = String::new();
            stdin.read_to_string(&mut text)?;
            for line in text.lines() {
                for p in extract_phrases(line, &lexicon) {
                    writeln!(stdout, "{}", p.words.join(" "))?;
                }
            }
        }
        Command::AttnMap {
            checkpoint,
            data,
            record,
            phrase,
            mask,
        } => {
            let out = out_dir(common)?;
            let (ck, vocab) = load_checkpoint(checkpoint)?;
            let mut params = ck.params;
            if let Some(l) = common.layer {
                params.config.bidiratt_layer = l;
            }
            let ds = dataset(&cfg, data.as_deref())?;
            let r = ds
                .records
                .get(*record)
                .ok_or_else(|| Error::Argument(format!("record {record} out of {}", ds.records.len())))?;
            let ids = vocab.encode(&tokenize(phrase));
            if *mask >= ids.len() {
                return Err(Error::Argument(format!("mask position {mask} outside a phrase of {} tokens", ids.len())));
            }
            let n = ds.patch_grid.0 * ds.patch_grid.1;
            let image = r.image.clone().reshape(&[n, ds.patch_pixels])?;
            let w = phrase_weights(&params, &image, &ids, *mask, cfg.train.biatt_row)?;
            fs::create_dir_all(out)?;
            write_heatmap_csv(&out.join("attn.csv"), &w, ds.patch_grid)?;
            write_heatmap_pgm(&out.join("attn.pgm"), &w, ds.patch_grid)?;
            let best = (1..w.w.len()).max_by(|&a, &b| w.w[a].total_cmp(&w.w[b])).unwrap_or(1) - 1;
            writeln!(stdout, "argmax patch {best} (row {}, col {})", best / ds.patch_grid.1, best % ds.patch_grid.1)?;
        }
    }
    Ok(0)
}
