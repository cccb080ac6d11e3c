use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ctxcite_core::checkpoint;
use ctxcite_core::corpus::{generate_synthetic_corpus, read_jsonl, write_jsonl};
use ctxcite_core::decoder::{generate, trace_generation, GenerationRecord};
use ctxcite_core::evalkit::{evaluate, export_heatmap, EntailmentOracle, FactContainment, JudgmentTable};
use ctxcite_core::fusion::build_citation_set_with;
use ctxcite_core::trainer::{ablate, probe, train_with_checkpoints, Variant};
use ctxcite_core::{Example, ModelState, Vocab};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::Run;
use crate::{CliError, Command, Common};

pub fn run(command: Command) -> Result<String, CliError> {
    match command {
        Command::Synth {
            common,
            n_examples,
            n_heldout,
            n_docs,
            facts_per_doc,
        } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.corpus.n_examples, n_examples);
            set(&mut cfg.corpus.n_heldout, n_heldout);
            set(&mut cfg.corpus.n_docs, n_docs);
            set(&mut cfg.corpus.facts_per_doc, facts_per_doc);
            cfg.validate()?;
            synth(cfg, &common.out)
        }
        Command::Train {
            common,
            corpus,
            n_steps,
            learning_rate,
            disable_fusion,
            disable_attn,
        } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.train.n_steps, n_steps);
            set(&mut cfg.train.learning_rate, learning_rate);
            cfg.train.disable_fusion |= disable_fusion;
            cfg.train.disable_attn |= disable_attn;
            cfg.validate()?;
            train(cfg, &common.out, &corpus)
        }
        Command::Generate {
            common,
            model,
            corpus,
            limit,
        } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            generate_all(cfg, &common.out, &model, &corpus, limit)
        }
        Command::Eval {
            common,
            corpus,
            generations,
            gold,
            judgments,
            model,
        } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let inputs = EvalInputs {
                generations: generations.as_deref().filter(|_| !gold),
                judgments: judgments.as_deref(),
                model: model.as_deref(),
            };
            eval(cfg, &common.out, &corpus, inputs)
        }
        Command::Ablate {
            common,
            corpus,
            heldout,
            seeds,
            n_steps,
        } => {
            let mut cfg = resolve(&common)?;
            set(&mut cfg.ablation.seeds, seeds);
            set(&mut cfg.train.n_steps, n_steps);
            cfg.validate()?;
            if cfg.ablation.seeds.is_empty() {
                return Err(CliError::Usage("ablation needs at least one seed".into()));
            }
            run_ablation(cfg, &common.out, &corpus, &heldout)
        }
        Command::Heatmap {
            common,
            model,
            corpus,
            example,
        } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            heatmap(cfg, &common.out, &model, &corpus, example)
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::resolve(common.config.as_deref(), &common.sets, common.seed)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_corpus(run: &mut Run, path: &Path, vocab: &Vocab) -> Result<Vec<Example>, CliError> {
    run.input(path)?;
    Ok(read_jsonl(path, vocab)?)
}

/// Loads a checkpoint; its model config replaces the one in the run config.
fn load_model(run: &mut Run, path: &Path) -> Result<ModelState, CliError> {
    run.input(path)?;
    Ok(checkpoint::load(path)?)
}

fn synth(cfg: RunConfig, out: &Path) -> Result<String, CliError> {
    let c = cfg.corpus.clone();
    let vocab = cfg.model.vocab();
    let mut run = Run::start("synth", cfg, out)?;
    let mut all = generate_synthetic_corpus(c.seed, c.n_examples + c.n_heldout, c.n_docs, c.facts_per_doc, &vocab)?;
    let heldout = all.split_off(c.n_examples);
    write_jsonl(run.output("train.jsonl"), &all, &vocab)?;
    if !heldout.is_empty() {
        write_jsonl(run.output("heldout.jsonl"), &heldout, &vocab)?;
    }
    run.finish(json!({ "n_train": all.len(), "n_heldout": heldout.len() }))?;
    Ok(format!(
        "synth: {} train + {} held-out examples, {} documents each, written to {}",
        all.len(),
        heldout.len(),
        c.n_docs,
        out.display()
    ))
}

fn train(cfg: RunConfig, out: &Path, corpus: &Path) -> Result<String, CliError> {
    let tc = cfg.train.clone();
    let model_cfg = cfg.model.clone();
    let mut run = Run::start("train", cfg, out)?;
    let examples = read_corpus(&mut run, corpus, &model_cfg.vocab())?;
    let init = ModelState::init(&model_cfg)?;
    let ckpt_dir = out.join("checkpoints");
    let mut written = Vec::new();
    let (state, log) = train_with_checkpoints(&tc, &examples, init, |step, state| {
        if step == tc.n_steps {
            return Ok(());
        }
        fs::create_dir_all(&ckpt_dir).map_err(|e| ctxcite_core::Error::Io {
            path: ckpt_dir.clone(),
            source: e,
        })?;
        let name = format!("checkpoints/step-{step:06}.ckpt");
        checkpoint::save(&out.join(&name), state)?;
        written.push(name);
        Ok(())
    })?;
    for name in &written {
        run.output(name);
    }
    checkpoint::save(&run.output("model.ckpt"), &state)?;
    let log_path = run.output("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut w = BufWriter::new(file);
    log.write_jsonl(&mut w)?;
    w.flush().map_err(|e| CliError::io(&log_path, e))?;
    let smoothed = log.smoothed_total(50);
    let first = log.records.first().map(|r| r.loss.total).unwrap_or(0.0);
    let last = smoothed.last().copied().unwrap_or(0.0);
    run.finish(json!({
        "n_steps": log.records.len(),
        "first_total_loss": first,
        "final_smoothed_total_loss": last,
        "fingerprint": state.fingerprint(),
        "config_hash": log.config_hash,
    }))?;
    Ok(format!(
        "train: {} steps in {:.1}s, total loss {:.4} -> {:.4} (50-step mean), model {}",
        log.records.len(),
        log.wall_clock_secs,
        first,
        last,
        out.join("model.ckpt").display()
    ))
}

#[derive(Serialize, Deserialize)]
struct GenerationLine {
    example: usize,
    #[serde(flatten)]
    record: GenerationRecord,
}

fn generate_all(cfg: RunConfig, out: &Path, model: &Path, corpus: &Path, limit: Option<usize>) -> Result<String, CliError> {
    let decode = cfg.decode;
    let source = cfg.train.citation_source();
    let mut run = Run::start("generate", cfg, out)?;
    let state = load_model(&mut run, model)?;
    let mut examples = read_corpus(&mut run, corpus, &state.vocab())?;
    if let Some(n) = limit {
        examples.truncate(n);
    }
    let path = run.output("generations.jsonl");
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut n_citations = 0;
    for (i, ex) in examples.iter().enumerate() {
        let set = build_citation_set_with(&state, &ex.documents, source)?;
        let record = generate(&state, ex, &set, &decode)?;
        n_citations += record.response.n_citations();
        let line = serde_json::to_string(&GenerationLine { example: i, record }).map_err(ctxcite_core::Error::from)?;
        writeln!(w, "{line}").map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    run.finish(json!({ "n_examples": examples.len(), "n_citations": n_citations }))?;
    Ok(format!(
        "generate: {} responses with {} citations written to {}",
        examples.len(),
        n_citations,
        path.display()
    ))
}

fn read_generations(path: &Path, n: usize) -> Result<Vec<GenerationRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out: Vec<Option<GenerationRecord>> = vec![None; n];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GenerationLine = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let slot = out
            .get_mut(g.example)
            .ok_or_else(|| CliError::Runtime(format!("generation for example {} but the corpus has {n}", g.example)))?;
        *slot = Some(g.record);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| CliError::Runtime(format!("no generation for example {i}"))))
        .collect()
}

struct EvalInputs<'a> {
    generations: Option<&'a Path>,
    judgments: Option<&'a Path>,
    model: Option<&'a Path>,
}

fn eval(cfg: RunConfig, out: &Path, corpus: &Path, inputs: EvalInputs<'_>) -> Result<String, CliError> {
    let EvalInputs {
        generations,
        judgments,
        model,
    } = inputs;
    let vocab = cfg.model.vocab();
    let source = cfg.train.citation_source();
    let budget = cfg.train.attn_budget;
    let mut run = Run::start("eval", cfg, out)?;
    let examples = read_corpus(&mut run, corpus, &vocab)?;
    let responses = match generations {
        Some(path) => {
            run.input(path)?;
            read_generations(path, examples.len())?.into_iter().map(|r| r.response).collect()
        }
        None => examples.iter().map(|e| e.gold.clone()).collect::<Vec<_>>(),
    };
    let oracle: Box<dyn EntailmentOracle> = match judgments {
        Some(path) => {
            run.input(path)?;
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            Box::new(JudgmentTable::from_json(&text)?)
        }
        None => Box::new(FactContainment::new(vocab.clone())),
    };
    let report = evaluate(&examples, &responses, oracle.as_ref(), &vocab)?;
    ctxcite_core::evalkit::write_report(&run.output("metrics.json"), &report)?;
    let p = report.percent;
    let mut summary = serde_json::to_value(p).map_err(ctxcite_core::Error::from)?;
    let mut line = format!(
        "eval: citation F1 = {:.1} (P = {:.1}, R = {:.1}), correctness = {:.1}, {} examples",
        p.citation_f1, p.citation_precision, p.citation_recall, p.correctness, report.n_examples
    );
    if let Some(path) = model {
        let state = load_model(&mut run, path)?;
        let pr = probe(&state, &examples, source, budget)?;
        let path = run.output("probe.json");
        let value = json!({
            "router_accuracy": pr.router_accuracy(),
            "marker_accuracy": pr.marker_accuracy(),
            "counts": pr,
        });
        fs::write(&path, format!("{value:#}\n")).map_err(|e| CliError::io(&path, e))?;
        summary["teacher_forced"] = value;
        line.push_str(&format!(
            "; teacher-forced router accuracy {:.3}, marker accuracy {:.3}",
            pr.router_accuracy(),
            pr.marker_accuracy()
        ));
    }
    run.finish(summary)?;
    Ok(line)
}

fn run_ablation(cfg: RunConfig, out: &Path, corpus: &Path, heldout: &Path) -> Result<String, CliError> {
    let (tc, model, decode, seeds) = (cfg.train.clone(), cfg.model.clone(), cfg.decode, cfg.ablation.seeds.clone());
    let mut run = Run::start("ablate", cfg, out)?;
    let vocab = model.vocab();
    let train = read_corpus(&mut run, corpus, &vocab)?;
    let held = read_corpus(&mut run, heldout, &vocab)?;
    let report = ablate(&tc, &model, &train, &held, &decode, &seeds)?;
    let path = run.output("ablation.json");
    let text = serde_json::to_string_pretty(&report).map_err(ctxcite_core::Error::from)?;
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    run.finish(serde_json::to_value(&report.summary).map_err(ctxcite_core::Error::from)?)?;
    let cells: Vec<String> = Variant::ALL
        .iter()
        .filter_map(|&v| report.summary_for(v))
        .map(|s| format!("{} F1 = {:.1}", s.variant.name(), s.citation_f1))
        .collect();
    Ok(format!("ablate: median over {} seeds: {}", seeds.len(), cells.join(", ")))
}

fn heatmap(cfg: RunConfig, out: &Path, model: &Path, corpus: &Path, index: usize) -> Result<String, CliError> {
    let decode = cfg.decode;
    let source = cfg.train.citation_source();
    let mut run = Run::start("heatmap", cfg, out)?;
    let state = load_model(&mut run, model)?;
    let vocab = state.vocab();
    let examples = read_corpus(&mut run, corpus, &vocab)?;
    let ex = examples
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("example {index} out of range (corpus has {})", examples.len())))?;
    let set = build_citation_set_with(&state, &ex.documents, source)?;
    let record = generate(&state, ex, &set, &decode)?;
    let trace = trace_generation(&state, ex, &record, &set)?;
    let mut tokens = ctxcite_core::corpus::assemble_prompt(ex, &vocab)?.tokens;
    tokens.extend_from_slice(&record.emitted);
    let csv = run.output("heatmap.csv");
    let files = export_heatmap(&trace, &tokens, record.prompt_len..tokens.len(), &vocab, &csv)?;
    run.output(files.index.file_name().and_then(|n| n.to_str()).unwrap_or("heatmap.index.json"));
    let gen_path = run.output("generation.json");
    let text = serde_json::to_string_pretty(&record).map_err(ctxcite_core::Error::from)?;
    fs::write(&gen_path, text + "\n").map_err(|e| CliError::io(&gen_path, e))?;
    let n = tokens.len() - record.prompt_len;
    run.finish(json!({ "example": index, "response_tokens": n, "text": record.text }))?;
    Ok(format!("heatmap: {n}x{n} grid for example {index} ({}) written to {}", record.text, csv.display()))
}
