//! Subcommand implementations. Each one parses and validates every input
//! before it creates the output directory.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use polar_layout_core::data::{build_vocab, collate, encode, generate_synthetic_corpus, Document, EncodedDoc, Vocab};
use polar_layout_core::model::{encoder_forward, AttentionTrace, BiasMode, Dropout};
use polar_layout_core::tensor::{Tape, Tensor};
use polar_layout_core::training::{
    ablation_jobs, ablation_variants, assemble_table, evaluate_pretraining, init_pretraining, prepare_ner, run_ablation_job,
    run_finetuning, run_pretraining, summarize, EpochMetrics, FinetuneConfig, NerData, Observer, StepMetrics, TrainState,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::cli::{AblateArgs, Cli, Command, FinetuneArgs, GlobalArgs, InspectArgs, PretrainArgs, SynthArgs};
use crate::config::{resolve_seed, sha256_hex, ConfigFile, ResolvedConfig};
use crate::error::{CliError, CliResult, Context};
use crate::jsonl::{documents_to_string, parse_documents};
use crate::manifest::RunManifest;
use crate::store::{
    checkpoint_name, latest_checkpoint, read_bytes, vocab_to_string, write_atomic, Checkpoint, CONFIG_FILE, METRICS_FILE,
    MODEL_FILE, VOCAB_FILE,
};

pub fn run(cli: Cli) -> CliResult<()> {
    let file = ConfigFile::load_or_default(cli.global.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => synth(&cli.global, &file, a),
        Command::Pretrain(a) => pretrain(&cli.global, &file, a),
        Command::Finetune(a) => finetune(&cli.global, &file, a),
        Command::Ablate(a) => ablate(&cli.global, &file, a),
        Command::Inspect(a) => inspect(&cli.global, &file, a),
    }
}

fn pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

macro_rules! row {
    ($($v:expr),* $(,)?) => {
        vec![$($v.to_string()),*]
    };
}

fn csv_text(rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv of utf-8 fields")
}

/// Writes `manifest.header()` followed by `body`.
fn write_artifact(path: &Path, manifest: &RunManifest, body: &str) -> CliResult<PathBuf> {
    write_atomic(path, format!("{}{body}", manifest.header()).as_bytes())?;
    Ok(path.to_path_buf())
}

fn synth(g: &GlobalArgs, file: &ConfigFile, a: &SynthArgs) -> CliResult<()> {
    let seed = resolve_seed(file, g.seed)?;
    if a.n_docs == 0 {
        return Err(CliError::Usage("--n-docs must be positive".into()));
    }
    let corpus = generate_synthetic_corpus(a.kind, a.n_docs, seed)
        .and_then(|c| c.with_eval_fraction(a.eval_fraction))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let key = format!("kind={}\nn_docs={}\neval_fraction={}\n", a.kind, a.n_docs, a.eval_fraction);
    let manifest = RunManifest::new("synth", &sha256_hex(key.as_bytes()), seed, "synthetic", &[], g.threads)?;
    create_out(&g.out)?;
    manifest.start(&g.out)?;
    let mut outputs = Vec::new();
    for (name, docs) in [("corpus.jsonl", &corpus.docs[..]), ("train.jsonl", corpus.train()), ("eval.jsonl", corpus.eval())] {
        let path = g.out.join(name);
        write_atomic(&path, documents_to_string(docs).as_bytes())?;
        outputs.push(path);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    manifest.finish(&g.out, &refs)?;
    println!(
        "wrote {} {} documents ({} train, {} eval) to {}",
        corpus.docs.len(),
        a.kind,
        corpus.train().len(),
        corpus.eval().len(),
        g.out.display()
    );
    Ok(())
}

fn encode_all(docs: &[Document], vocab: &Vocab, cfg: &ResolvedConfig) -> CliResult<Vec<EncodedDoc>> {
    docs.iter().map(|d| encode(d, vocab, &cfg.model)).collect::<Result<_, _>>().context("data")
}

#[derive(Serialize)]
struct MetricsLine {
    step: usize,
    loss: f64,
    mlm_loss: f64,
    lop_loss: f64,
    mlm_accuracy: f64,
    lop_accuracy: f64,
    lr: f64,
    grad_norm: f64,
    wall_ms: u128,
}

/// Appends metric lines and writes checkpoints. The first I/O failure is
/// kept here and aborts training through a core error.
struct RunObserver<'a> {
    dir: &'a Path,
    config: &'a ResolvedConfig,
    vocab: &'a Vocab,
    log: File,
    started: Instant,
    failure: Option<CliError>,
}

impl RunObserver<'_> {
    fn keep(&mut self, r: CliResult<()>) -> polar_layout_core::Result<()> {
        r.map_err(|e| {
            let msg = e.to_string();
            self.failure = Some(e);
            polar_layout_core::Error::Checkpoint(msg)
        })
    }
}

impl Observer for RunObserver<'_> {
    fn on_step(&mut self, m: &StepMetrics) -> polar_layout_core::Result<()> {
        let line = MetricsLine {
            step: m.step,
            loss: m.loss,
            mlm_loss: m.mlm_loss,
            lop_loss: m.lop_loss,
            mlm_accuracy: m.mlm_accuracy,
            lop_accuracy: m.lop_accuracy,
            lr: m.lr,
            grad_norm: m.grad_norm,
            wall_ms: self.started.elapsed().as_millis(),
        };
        let text = format!("{}\n", serde_json::to_string(&line).expect("metrics serialize"));
        let path = self.dir.join(METRICS_FILE);
        let r = self.log.write_all(text.as_bytes()).map_err(|e| CliError::io(&path, e));
        self.keep(r)
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> polar_layout_core::Result<()> {
        let ck = Checkpoint {
            state: state.clone(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        let r = ck.save(&self.dir.join(checkpoint_name(state.step)));
        self.keep(r)
    }
}

/// Keeps the header and the lines of steps up to `step`.
fn truncate_metrics(path: &Path, step: usize) -> CliResult<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let kept: String = text
        .lines()
        .filter(|l| {
            l.starts_with('#')
                || serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v["step"].as_u64())
                    .is_some_and(|s| s as usize <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    write_atomic(path, kept.as_bytes())
}

fn pretrain(g: &GlobalArgs, file: &ConfigFile, a: &PretrainArgs) -> CliResult<()> {
    let docs = parse_documents(&a.corpus)?;
    if docs.is_empty() {
        return Err(CliError::Usage(format!("{}: corpus is empty", a.corpus.display())));
    }
    let (state, config, vocab) = if a.resume {
        let path = latest_checkpoint(&g.out)?
            .ok_or_else(|| CliError::Usage(format!("--resume: no checkpoint in {}", g.out.display())))?;
        let ck = Checkpoint::from_bytes(&read_bytes(&path)?, &path)?;
        let config = ResolvedConfig::resolve(file, ck.vocab.len(), g.seed)?;
        if config != ck.config {
            return Err(CliError::Usage(format!(
                "--resume: configuration differs from the one in {}",
                path.display()
            )));
        }
        (ck.state, ck.config, ck.vocab)
    } else {
        let vocab = build_vocab(&docs, file.min_freq.unwrap_or(1)).context("data")?;
        let config = ResolvedConfig::resolve(file, vocab.len(), g.seed)?;
        let state = init_pretraining(&config.model, &config.pretrain).context("training")?;
        (state, config, vocab)
    };
    let encoded = encode_all(&docs, &vocab, &config)?;
    let manifest = RunManifest::new("pretrain", &config.hash(), config.seed, &config.preset, &[&a.corpus], g.threads)?;

    create_out(&g.out)?;
    manifest.start(&g.out)?;
    let config_path = g.out.join(CONFIG_FILE);
    write_atomic(&config_path, config.to_toml().as_bytes())?;
    let vocab_path = g.out.join(VOCAB_FILE);
    write_atomic(&vocab_path, vocab_to_string(&vocab).as_bytes())?;
    let log_path = g.out.join(METRICS_FILE);
    if a.resume {
        truncate_metrics(&log_path, state.step)?;
    } else {
        write_atomic(&log_path, manifest.header().as_bytes())?;
    }
    let log = OpenOptions::new().append(true).open(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let start_step = state.step;
    let mut obs = RunObserver {
        dir: &g.out,
        config: &config,
        vocab: &vocab,
        log,
        started: Instant::now(),
        failure: None,
    };
    let result = run_pretraining(&encoded, &config.model, &config.pretrain, state, &mut obs);
    if let Some(e) = obs.failure.take() {
        return Err(e);
    }
    let state = result.context("training")?;
    let eval = evaluate_pretraining(&encoded, &state.params, &config.model, &config.pretrain).context("training")?;
    let model_path = g.out.join(MODEL_FILE);
    Checkpoint {
        state,
        config: config.clone(),
        vocab: vocab.clone(),
    }
    .save(&model_path)?;
    let summary = csv_text([
        row!["mlm_loss", eval.mlm_loss],
        row!["lop_loss", eval.lop_loss],
        row!["mlm_accuracy", eval.mlm.accuracy()],
        row!["lop_accuracy", eval.lop.accuracy()],
    ]);
    let summary_path = write_artifact(&g.out.join("pretrain_eval.csv"), &manifest, &summary)?;
    manifest.finish(&g.out, &[&config_path, &vocab_path, &model_path, &summary_path, &log_path])?;
    println!(
        "steps {}..{}: mlm_loss {:.4} lop_loss {:.4} mlm_acc {:.3} lop_acc {:.3}",
        start_step,
        config.pretrain.steps,
        eval.mlm_loss,
        eval.lop_loss,
        eval.mlm.accuracy(),
        eval.lop.accuracy()
    );
    Ok(())
}

/// Vocabulary and configuration from a checkpoint when given, otherwise
/// a fresh vocabulary over `docs` and the configured preset.
fn model_source(
    g: &GlobalArgs,
    file: &ConfigFile,
    checkpoint: Option<&Path>,
    docs: &[Document],
) -> CliResult<(ResolvedConfig, Vocab, Option<Checkpoint>)> {
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let config = ResolvedConfig::resolve_with_model(file, ck.config.model.clone(), &ck.config.preset, g.seed)?;
            if config.model.vocab_size != ck.vocab.len() {
                return Err(CliError::Usage("vocab_size cannot be overridden for a checkpoint".into()));
            }
            let vocab = ck.vocab.clone();
            Ok((config, vocab, Some(ck)))
        }
        None => {
            let vocab = build_vocab(docs, file.min_freq.unwrap_or(1)).context("data")?;
            let config = ResolvedConfig::resolve(file, vocab.len(), g.seed)?;
            Ok((config, vocab, None))
        }
    }
}

fn seed_count(arg: Option<usize>, config: &ResolvedConfig) -> CliResult<usize> {
    match arg.unwrap_or(config.n_seeds) {
        0 => Err(CliError::Usage("--seeds must be positive".into())),
        n => Ok(n),
    }
}

#[derive(Serialize)]
struct SeedReport {
    seed: u64,
    precision: f64,
    recall: f64,
    f1: f64,
    true_positives: usize,
    n_pred: usize,
    n_gold: usize,
}

#[derive(Serialize)]
struct F1Summary {
    run_id: String,
    seeds: Vec<SeedReport>,
    mean_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stdev_f1: Option<f64>,
}

fn finetune(g: &GlobalArgs, file: &ConfigFile, a: &FinetuneArgs) -> CliResult<()> {
    let train = parse_documents(&a.train)?;
    let eval = parse_documents(&a.eval)?;
    let (config, vocab, ck) = model_source(g, file, a.checkpoint.as_deref(), &train)?;
    let n_seeds = seed_count(a.seeds, &config)?;
    let data = prepare_ner(&train, &eval, &vocab, &config.model).context("training")?;
    let pool = pool(g.threads)?;
    let mut inputs: Vec<&Path> = vec![&a.train, &a.eval];
    if let Some(p) = &a.checkpoint {
        if p.is_file() {
            inputs.push(p);
        }
    }
    let manifest = RunManifest::new("finetune", &config.hash(), config.seed, &config.preset, &inputs, g.threads)?;

    create_out(&g.out)?;
    manifest.start(&g.out)?;
    let pretrained = ck.as_ref().map(|c| &c.state.params);
    let outcomes = pool.install(|| {
        (0..n_seeds as u64)
            .into_par_iter()
            .map(|k| {
                let run = FinetuneConfig {
                    seed: config.seed + k,
                    ..config.finetune.clone()
                };
                let mut epochs = Vec::new();
                let o = run_finetuning(&data, &config.model, &run, pretrained, &mut EpochLog(&mut epochs));
                o.map(|o| (run.seed, o.report, epochs))
            })
            .collect::<Result<Vec<_>, _>>()
    });
    let outcomes = outcomes.context("training")?;

    let f1s: Vec<f64> = outcomes.iter().map(|(_, r, _)| r.f1).collect();
    let s = summarize(&f1s);
    let stdev = (n_seeds > 1).then_some(s.stdev);
    let mut rows = vec![row!["seed", "precision", "recall", "f1"]];
    for (seed, r, _) in &outcomes {
        rows.push(row![seed, r.precision, r.recall, r.f1]);
    }
    let mean = |f: fn(&polar_layout_core::data::F1Report) -> f64| summarize(&outcomes.iter().map(|(_, r, _)| f(r)).collect::<Vec<_>>());
    let (p, r) = (mean(|r| r.precision), mean(|r| r.recall));
    rows.push(row!["mean", p.mean, r.mean, s.mean]);
    if n_seeds > 1 {
        rows.push(row!["stdev", p.stdev, r.stdev, s.stdev]);
    }
    let csv_path = write_artifact(&g.out.join("f1_report.csv"), &manifest, &csv_text(rows))?;
    let mut rows = vec![row!["seed", "epoch", "train_loss", "eval_f1"]];
    for (seed, _, epochs) in &outcomes {
        for m in epochs {
            let f1 = m.eval_f1.map(|f| f.to_string()).unwrap_or_default();
            rows.push(row![seed, m.epoch, m.train_loss, f1]);
        }
    }
    let epochs_path = write_artifact(&g.out.join("epochs.csv"), &manifest, &csv_text(rows))?;
    let summary = F1Summary {
        run_id: manifest.run_id.clone(),
        seeds: outcomes
            .iter()
            .map(|(seed, r, _)| SeedReport {
                seed: *seed,
                precision: r.precision,
                recall: r.recall,
                f1: r.f1,
                true_positives: r.true_positives,
                n_pred: r.n_pred,
                n_gold: r.n_gold,
            })
            .collect(),
        mean_f1: s.mean,
        stdev_f1: stdev,
    };
    let json_path = g.out.join("f1_report.json");
    let mut json = serde_json::to_string_pretty(&summary).expect("report serializes");
    json.push('\n');
    write_atomic(&json_path, json.as_bytes())?;
    manifest.finish(&g.out, &[&csv_path, &epochs_path, &json_path])?;
    match stdev {
        Some(sd) => println!("F1 {:.2} ± {:.2} over {n_seeds} seeds", 100.0 * s.mean, 100.0 * sd),
        None => println!("F1 {:.2}", 100.0 * s.mean),
    }
    Ok(())
}

struct EpochLog<'a>(&'a mut Vec<EpochMetrics>);

impl Observer for EpochLog<'_> {
    fn on_epoch(&mut self, m: &EpochMetrics) -> polar_layout_core::Result<()> {
        self.0.push(*m);
        Ok(())
    }
}

fn ablate(g: &GlobalArgs, file: &ConfigFile, a: &AblateArgs) -> CliResult<()> {
    let mut names = Vec::new();
    let mut splits = Vec::new();
    for d in &a.datasets {
        if names.contains(&d.name) {
            return Err(CliError::Usage(format!("dataset {:?} given twice", d.name)));
        }
        names.push(d.name.clone());
        splits.push((parse_documents(&d.train)?, parse_documents(&d.eval)?));
    }
    let all_train: Vec<Document> = splits.iter().flat_map(|(t, _)| t.iter().cloned()).collect();
    let (config, vocab, ck) = model_source(g, file, a.checkpoint.as_deref(), &all_train)?;
    let n_seeds = seed_count(a.seeds, &config)?;
    let datasets: Vec<(String, NerData)> = names
        .iter()
        .zip(&splits)
        .map(|(n, (t, e))| prepare_ner(t, e, &vocab, &config.model).map(|d| (n.clone(), d)))
        .collect::<Result<_, _>>()
        .context("training")?;
    let pool = pool(g.threads)?;
    let mut inputs: Vec<&Path> = a.datasets.iter().flat_map(|d| [d.train.as_path(), d.eval.as_path()]).collect();
    if let Some(p) = &a.checkpoint {
        if p.is_file() {
            inputs.push(p);
        }
    }
    let manifest = RunManifest::new("ablate", &config.hash(), config.seed, &config.preset, &inputs, g.threads)?;

    create_out(&g.out)?;
    manifest.start(&g.out)?;
    let variants = ablation_variants(&config.model, a.bias_sweep);
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| config.seed + k).collect();
    let jobs = ablation_jobs(datasets.len(), variants.len(), &seeds);
    let pretrained = ck.as_ref().map(|c| &c.state.params);
    let results = pool
        .install(|| {
            jobs.par_iter()
                .map(|j| run_ablation_job(j, &datasets, &variants, &config.model, &config.finetune, pretrained))
                .collect::<Result<Vec<_>, _>>()
        })
        .context("training")?;
    let table = assemble_table(&names, &variants, &jobs, &results).context("training")?;
    let text_path = write_artifact(&g.out.join("ablation.txt"), &manifest, &table.render())?;
    let mut rows = vec![std::iter::once("dataset".to_string()).chain(table.columns.iter().cloned()).collect()];
    for r in &table.rows {
        rows.push(std::iter::once(r.name.clone()).chain(r.cells.iter().map(f64::to_string)).collect());
    }
    let csv_path = write_artifact(&g.out.join("ablation.csv"), &manifest, &csv_text(rows))?;
    let mut rows = vec![row!["dataset", "variant", "seed", "f1"]];
    for (j, f1) in jobs.iter().zip(&results) {
        rows.push(row![names[j.dataset], variants[j.variant].label, j.seed, f1]);
    }
    let runs_path = write_artifact(&g.out.join("ablation_runs.csv"), &manifest, &csv_text(rows))?;
    manifest.finish(&g.out, &[&text_path, &csv_path, &runs_path])?;
    print!("{}", table.render());
    Ok(())
}

fn grid(n: usize, value: impl Fn(usize, usize) -> String) -> String {
    csv_text((0..n).map(|i| (0..n).map(|j| value(i, j)).collect()))
}

/// `n×n` block of `head` for the single document in a traced batch.
fn head_block(t: &Tensor, head: usize, n: usize) -> &[f64] {
    &t.data()[head * n * n..(head + 1) * n * n]
}

fn inspect(g: &GlobalArgs, _file: &ConfigFile, a: &InspectArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let docs = parse_documents(&a.document)?;
    let doc = docs.get(a.doc_index).ok_or_else(|| {
        CliError::Usage(format!(
            "--doc-index {} out of range for {} documents",
            a.doc_index,
            docs.len()
        ))
    })?;
    let cfg = &ck.config.model;
    if a.layer >= cfg.n_layers {
        return Err(CliError::Usage(format!("--layer {} out of range for {} layers", a.layer, cfg.n_layers)));
    }
    if a.head >= cfg.n_heads {
        return Err(CliError::Usage(format!("--head {} out of range for {} heads", a.head, cfg.n_heads)));
    }
    let enc = encode(doc, &ck.vocab, cfg).context("data")?;
    let batch = collate(&[&enc], cfg.bias_mode, &cfg.binning, None).context("data")?;
    let mut tape = Tape::new();
    let p = ck.state.params.bind(&mut tape, false);
    let mut trace = AttentionTrace::new();
    encoder_forward(&mut tape, &p, cfg, &batch, &mut Dropout::Off, Some(&mut trace)).context("model")?;
    let mut inputs: Vec<&Path> = vec![&a.document];
    if a.checkpoint.is_file() {
        inputs.push(&a.checkpoint);
    }
    let key = format!("{}\ndoc_index={}\nlayer={}\nhead={}\n", ck.config.hash(), a.doc_index, a.layer, a.head);
    let manifest = RunManifest::new("inspect", &sha256_hex(key.as_bytes()), ck.config.seed, &ck.config.preset, &inputs, g.threads)?;

    create_out(&g.out)?;
    manifest.start(&g.out)?;
    let n = enc.len();
    let t = &trace[a.layer];
    let mut outputs = Vec::new();
    let mut rows = vec![row!["position", "source_index", "text", "x0", "y0", "x1", "y1"]];
    for (i, b) in enc.bboxes.iter().enumerate() {
        let (src, text) = match enc.source_index[i] {
            Some(s) => (s.to_string(), doc.tokens[s].text.as_str()),
            None => (String::new(), ck.vocab.token(enc.token_ids[i]).unwrap_or_default()),
        };
        rows.push(row![i, src, text, b.x0, b.y0, b.x1, b.y1]);
    }
    outputs.push(write_artifact(&g.out.join("tokens.csv"), &manifest, &csv_text(rows))?);
    let dist = grid(n, |i, j| enc.polar.get(i, j).dist_bin.to_string());
    outputs.push(write_artifact(&g.out.join("dist_bins.csv"), &manifest, &dist)?);
    let angle = grid(n, |i, j| enc.polar.get(i, j).angle_bin.to_string());
    outputs.push(write_artifact(&g.out.join("angle_bins.csv"), &manifest, &angle)?);
    let names = match cfg.bias_mode {
        BiasMode::Cartesian => ["bias_dx.csv", "bias_dy.csv"],
        _ => ["bias_dist.csv", "bias_angle.csv"],
    };
    for (name, bias) in names.iter().zip([&t.bias_first, &t.bias_second]) {
        let body = match bias {
            Some(b) => {
                let block = head_block(b, a.head, n);
                grid(n, |i, j| block[i * n + j].to_string())
            }
            None => grid(n, |_, _| "0".to_string()),
        };
        outputs.push(write_artifact(&g.out.join(name), &manifest, &body)?);
    }
    let probs = head_block(&t.probs, a.head, n);
    let attn = grid(n, |i, j| probs[i * n + j].to_string());
    outputs.push(write_artifact(&g.out.join("attention.csv"), &manifest, &attn)?);
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    manifest.finish(&g.out, &refs)?;
    println!("wrote {n}x{n} grids for layer {} head {} to {}", a.layer, a.head, g.out.display());
    Ok(())
}
