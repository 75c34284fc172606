//! Individually invocable, idempotent stages.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::report::RunSummary;
use super::{stamp_key, ExperimentConfig, RunDir};
use crate::adapter::AdapterParams;
use crate::checkpoint::{self, write_atomic};
use crate::dataset::{self, ood, synthetic, InversionPair, SourceTag, Tokenizer};
use crate::error::{Error, Result};
use crate::judge::{Judge, JudgeConfig, JudgeMode};
use crate::metrics::{aggregate, EvalRecord};
use crate::model::{LmParams, LoraParams, TokenId, EOS};
use crate::trainer::{self, decoder_for, pretrain_lm, Prompt, RunOptions, Scheme, TrainConfig};

/// Precision of every pipeline artifact.
type P = f32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    TrainLm,
    Extract,
    TrainAdapter,
    TrainJoint,
    Invert,
    Eval,
    OodGen,
    OodEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainLm => "train-lm",
            Stage::Extract => "extract",
            Stage::TrainAdapter => "train-adapter",
            Stage::TrainJoint => "train-joint",
            Stage::Invert => "invert",
            Stage::Eval => "eval",
            Stage::OodGen => "ood-gen",
            Stage::OodEval => "ood-eval",
        }
    }

    /// Corpus, tokenizer, and models live in the shared directory.
    pub fn is_shared(self) -> bool {
        matches!(self, Stage::Ingest | Stage::TrainLm)
    }

    fn deps(self, cfg: &ExperimentConfig) -> Vec<Stage> {
        let inverter = inverter_stage(cfg);
        match self {
            Stage::Ingest | Stage::OodGen => vec![],
            Stage::TrainLm => vec![Stage::Ingest],
            Stage::Extract => vec![Stage::TrainLm],
            Stage::TrainAdapter => vec![Stage::Extract],
            Stage::TrainJoint => vec![Stage::TrainAdapter],
            Stage::Invert => vec![inverter],
            Stage::Eval => vec![Stage::Invert],
            Stage::OodEval => vec![Stage::OodGen, inverter],
        }
    }
}

fn inverter_stage(cfg: &ExperimentConfig) -> Stage {
    match cfg.train.scheme {
        Scheme::AdapterOnly => Stage::TrainAdapter,
        Scheme::Joint => Stage::TrainJoint,
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn judge_identity(j: &JudgeConfig) -> Value {
    json!({ "mode": j.mode, "model": j.model, "endpoint": j.endpoint })
}

fn train_cfg(cfg: &ExperimentConfig, scheme: Scheme) -> TrainConfig {
    TrainConfig {
        scheme,
        ..cfg.train.clone()
    }
}

impl RunDir {
    fn upstream(&self, stage: Stage) -> Result<String> {
        self.stamp(stage)
            .ok_or_else(|| Error::Contract(format!("stage `{}` has not completed", stage.name())))
    }

    fn key(&self, cfg: &ExperimentConfig, stage: Stage) -> Result<String> {
        let mut parts: Vec<Value> = vec![json!(stage.name())];
        for d in stage.deps(cfg) {
            parts.push(json!(self.upstream(d)?));
        }
        match stage {
            Stage::Ingest => {
                let digests = cfg
                    .corpus
                    .iter()
                    .map(|p| file_digest(p))
                    .collect::<Result<Vec<_>>>()?;
                parts.push(json!({
                    "corpus": cfg.corpus, "digests": digests, "vocab": cfg.vocab_size,
                    "synthetic": if cfg.corpus.is_empty() { Some(cfg.synthetic_articles) } else { None },
                    "seed": cfg.seed,
                }));
            }
            Stage::TrainLm => {
                let mut models = vec![json!(cfg.target), json!(cfg.decoder)];
                for m in std::iter::once(&cfg.target).chain(cfg.decoder.as_ref()) {
                    if let Some(p) = &m.checkpoint {
                        models.push(json!(file_digest(p)?));
                    }
                }
                parts.push(json!({ "models": models, "pretrain": cfg.pretrain, "seed": cfg.seed }));
            }
            Stage::Extract => parts.push(json!({
                "layer": cfg.layer, "n": cfg.n, "bos": cfg.bos,
                "train_size": cfg.train_size, "test_size": cfg.test_size, "seed": cfg.seed,
            })),
            Stage::TrainAdapter => parts.push(json!({
                "adapter": cfg.adapter_config(), "train": train_cfg(cfg, Scheme::AdapterOnly),
            })),
            Stage::TrainJoint => parts.push(json!({ "train": train_cfg(cfg, Scheme::Joint) })),
            Stage::Invert => parts.push(json!({ "scheme": cfg.train.scheme, "max_new": cfg.n })),
            Stage::Eval => parts.push(judge_identity(&cfg.judge)),
            Stage::OodGen => {
                parts.push(json!({ "judge": judge_identity(&cfg.judge), "count": cfg.ood.count }))
            }
            Stage::OodEval => parts.push(json!({
                "judge": judge_identity(&cfg.judge), "max_new": cfg.ood.max_new,
                "layer": cfg.layer, "bos": cfg.bos,
            })),
        }
        Ok(stamp_key(&parts))
    }

    fn pending_path(&self, stage: Stage) -> std::path::PathBuf {
        self.dir
            .join("stamps")
            .join(format!("{}.pending", stage.name()))
    }
}

/// Runs `stage` after its dependencies, skipping any stage whose inputs
/// are unchanged. Errors carry the failing stage's name.
pub fn run_stage(cfg: &ExperimentConfig, run: &RunDir, stage: Stage) -> Result<StageOutcome> {
    cfg.validate()?;
    for d in stage.deps(cfg) {
        run_stage(cfg, run, d)?;
    }
    let key = run.key(cfg, stage).map_err(|e| e.in_stage(stage.name()))?;
    if run.stamp(stage).as_deref() == Some(key.as_str()) {
        log::info!("{}: up to date", stage.name());
        return Ok(StageOutcome::UpToDate);
    }
    log::info!("{}: running", stage.name());
    run.clear_stamp(stage)?;
    execute(cfg, run, stage, &key).map_err(|e| e.in_stage(stage.name()))?;
    run.write_stamp(stage, &key)?;
    Ok(StageOutcome::Ran)
}

/// ingest → train-lm → extract → train (per scheme) → invert → eval.
pub fn run_pipeline(cfg: &ExperimentConfig, run: &RunDir) -> Result<RunSummary> {
    std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
    write_atomic(&run.config_snapshot(), cfg.to_toml().as_bytes())?;
    run_stage(cfg, run, Stage::Eval)?;
    read_json(&run.summary())
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(Error::from)
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn execute(cfg: &ExperimentConfig, run: &RunDir, stage: Stage, key: &str) -> Result<()> {
    match stage {
        Stage::Ingest => ingest(cfg, run),
        Stage::TrainLm => train_lm(cfg, run),
        Stage::Extract => extract(cfg, run),
        Stage::TrainAdapter => train_adapter(cfg, run, key),
        Stage::TrainJoint => train_joint(cfg, run, key),
        Stage::Invert => invert(cfg, run),
        Stage::Eval => eval(cfg, run),
        Stage::OodGen => ood_gen(cfg, run),
        Stage::OodEval => ood_eval(cfg, run),
    }
}

fn ingest(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let docs = if cfg.corpus.is_empty() {
        synthetic::encyclopedia(cfg.seed, cfg.synthetic_articles)
    } else {
        dataset::read_corpus(&cfg.corpus)?
    };
    let tok = Tokenizer::train(docs.iter().map(String::as_str), cfg.vocab_size)?;
    dataset::write_lines(&run.docs(), &docs)?;
    tok.save(&run.tokenizer())?;
    log::info!(
        "ingested {} documents, vocabulary {}",
        docs.len(),
        tok.vocab_size()
    );
    Ok(())
}

fn read_docs(run: &RunDir) -> Result<Vec<String>> {
    let p = run.docs();
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(text.lines().map(String::from).collect())
}

fn token_stream(tok: &Tokenizer, docs: &[String]) -> Vec<TokenId> {
    let mut stream = Vec::new();
    for d in docs {
        stream.extend(tok.encode(d));
        stream.push(EOS);
    }
    stream
}

fn train_lm(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let tok = Tokenizer::load(&run.tokenizer())?;
    let vocab = tok.vocab_size();
    let docs = read_docs(run)?;
    let stream = token_stream(&tok, &docs);
    let mut reports = serde_json::Map::new();
    let mut models = vec![("target", &cfg.target, run.target_lm(), cfg.seed)];
    if let Some(d) = &cfg.decoder {
        models.push(("decoder", d, run.decoder_lm(), cfg.seed.wrapping_add(1)));
    }
    for (role, m, path, seed) in models {
        let spec = m.spec(vocab);
        let lm: LmParams<P> = match &m.checkpoint {
            Some(src) => {
                let lm = checkpoint::load_lm(src)?;
                if lm.spec.vocab_size != vocab {
                    return Err(Error::Config(format!(
                        "{} has vocabulary {}, tokenizer has {vocab}",
                        src.display(),
                        lm.spec.vocab_size
                    )));
                }
                lm
            }
            None => {
                let pc = trainer::PretrainConfig {
                    seed,
                    ..cfg.pretrain.clone()
                };
                let log = run.shared.join(format!("pretrain_{role}.log.jsonl"));
                let (lm, report) = pretrain_lm(&pc, &spec, &stream, Some(&log))?;
                log::info!(
                    "{role}: perplexity {:.2} -> {:.2}",
                    report.initial_perplexity,
                    report.final_perplexity
                );
                reports.insert(role.into(), json!(report));
                lm
            }
        };
        checkpoint::save_lm(&path, &lm)?;
    }
    write_json(&run.shared.join("pretrain_report.json"), &reports)
}

fn load_target(run: &RunDir) -> Result<LmParams<P>> {
    checkpoint::load_lm(&run.target_lm())
}

fn load_decoder(cfg: &ExperimentConfig, run: &RunDir) -> Result<LmParams<P>> {
    if cfg.decoder.is_some() {
        checkpoint::load_lm(&run.decoder_lm())
    } else {
        load_target(run)
    }
}

fn extract(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let tok = Tokenizer::load(&run.tokenizer())?;
    let docs = read_docs(run)?;
    let target = load_target(run)?;
    let mut chunks = dataset::chunk_documents(&tok, &docs, cfg.n);
    let total = chunks.len();
    let test = cfg
        .test_size
        .unwrap_or_else(|| dataset::default_test_size(total));
    if test == 0 {
        return Err(Error::Config(format!(
            "only {total} chunks of {} tokens; no test set",
            cfg.n
        )));
    }
    if let Some(t) = cfg.train_size {
        chunks.truncate((t + test).min(total));
    }
    let pairs = dataset::build_pairs(
        &target,
        &chunks,
        cfg.layer,
        SourceTag::InDistribution,
        cfg.bos,
    )?;
    let (train, test) = dataset::split(pairs, test, cfg.seed)?;
    log::info!(
        "{} train / {} test pairs of {} tokens",
        train.len(),
        test.len(),
        cfg.n
    );
    dataset::save_pairs(&run.data(), "train", &train)?;
    dataset::save_pairs(&run.data(), "test", &test)
}

fn prompt(cfg: &ExperimentConfig, run: &RunDir) -> Result<Prompt> {
    let tok = Tokenizer::load(&run.tokenizer())?;
    Ok(Prompt::encode(&tok, &cfg.train))
}

fn check_fit(
    cfg: &ExperimentConfig,
    decoder: &LmParams<P>,
    prompt: &Prompt,
    generated: usize,
) -> Result<()> {
    let len = cfg.k() + prompt.len() + cfg.n.max(generated);
    if len > decoder.spec.max_seq {
        return Err(Error::Length {
            len,
            max: decoder.spec.max_seq,
        });
    }
    Ok(())
}

fn adapter_file_meta(cfg: &ExperimentConfig, adapter: &AdapterParams<P>) -> Value {
    let mut meta = checkpoint::adapter_meta(&adapter.config);
    meta["layer"] = json!(cfg.layer);
    meta["n"] = json!(cfg.n);
    meta["target"] = json!("lm_target.bin");
    meta["decoder"] = json!(if cfg.decoder.is_some() {
        "lm_decoder.bin"
    } else {
        "lm_target.bin"
    });
    meta
}

/// Starts fresh, or resumes from the saved state when an earlier attempt
/// with the same key was interrupted.
fn train_or_resume(
    cfg: &ExperimentConfig,
    run: &RunDir,
    stage: Stage,
    key: &str,
    tc: &TrainConfig,
    adapter: impl FnOnce() -> Result<AdapterParams<P>>,
) -> Result<(
    AdapterParams<P>,
    Option<LoraParams<P>>,
    trainer::TrainReport,
)> {
    let decoder = load_decoder(cfg, run)?;
    let pairs: Vec<InversionPair<P>> = dataset::load_pairs(&run.data(), "train")?;
    let prompt = prompt(cfg, run)?;
    check_fit(cfg, &decoder, &prompt, cfg.n)?;
    let tag = stage.name().replace('-', "_");
    let state = run.dir.join(format!("{tag}.state"));
    let opts = RunOptions {
        log_path: Some(run.dir.join(format!("{tag}.log.jsonl"))),
        checkpoint_path: Some(state.clone()),
        stop_after: None,
        measure_loss: true,
    };
    let pending = run.pending_path(stage);
    let resumable =
        std::fs::read_to_string(&pending).ok().as_deref() == Some(key) && state.exists();
    write_atomic(&pending, key.as_bytes())?;
    let out = if resumable {
        log::info!("{}: resuming from {}", stage.name(), state.display());
        let (s, r) = trainer::resume(tc, &state, &decoder, &pairs, &prompt, &opts)?;
        (s.adapter, s.lora, r)
    } else {
        let a = adapter()?;
        match tc.scheme {
            Scheme::AdapterOnly => {
                let (a, r) = trainer::train_adapter_only(tc, a, &decoder, &pairs, &prompt, &opts)?;
                (a, None, r)
            }
            Scheme::Joint => {
                let (a, l, r) = trainer::train_joint(tc, a, &decoder, &pairs, &prompt, &opts)?;
                (a, Some(l), r)
            }
        }
    };
    write_json(&run.dir.join(format!("{tag}.report.json")), &out.2)?;
    let _ = std::fs::remove_file(&pending);
    Ok(out)
}

fn train_adapter(cfg: &ExperimentConfig, run: &RunDir, key: &str) -> Result<()> {
    let tc = train_cfg(cfg, Scheme::AdapterOnly);
    let (adapter, _, report) = train_or_resume(cfg, run, Stage::TrainAdapter, key, &tc, || {
        AdapterParams::init(cfg.adapter_config(), cfg.seed)
    })?;
    log::info!("adapter-only: final train loss {:?}", report.final_loss);
    checkpoint::save(
        &run.adapter(),
        &adapter_file_meta(cfg, &adapter),
        &adapter.named(),
    )
}

fn train_joint(cfg: &ExperimentConfig, run: &RunDir, key: &str) -> Result<()> {
    let tc = train_cfg(cfg, Scheme::Joint);
    let (adapter, lora, report) = train_or_resume(cfg, run, Stage::TrainJoint, key, &tc, || {
        checkpoint::load_adapter(&run.adapter())
    })?;
    log::info!("joint: final train loss {:?}", report.final_loss);
    checkpoint::save(
        &run.joint_adapter(),
        &adapter_file_meta(cfg, &adapter),
        &adapter.named(),
    )?;
    checkpoint::save_lora(&run.lora(), &lora.expect("joint training yields LoRA"))
}

fn load_inverter(
    cfg: &ExperimentConfig,
    run: &RunDir,
    decoder: &LmParams<P>,
) -> Result<(AdapterParams<P>, Option<LoraParams<P>>)> {
    match cfg.train.scheme {
        Scheme::AdapterOnly => Ok((checkpoint::load_adapter(&run.adapter())?, None)),
        Scheme::Joint => Ok((
            checkpoint::load_adapter(&run.joint_adapter())?,
            Some(checkpoint::load_lora(&run.lora(), decoder)?),
        )),
    }
}

/// One reconstruction, as stored in `inversions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub id: usize,
    pub reference: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub reference_text: String,
    pub output_text: String,
}

fn invert_pairs(
    cfg: &ExperimentConfig,
    run: &RunDir,
    pairs: &[InversionPair<P>],
    max_new: usize,
) -> Result<Vec<InversionRecord>> {
    let tok = Tokenizer::load(&run.tokenizer())?;
    let decoder = load_decoder(cfg, run)?;
    let (adapter, lora) = load_inverter(cfg, run, &decoder)?;
    let prompt = Prompt::encode(&tok, &cfg.train);
    check_fit(cfg, &decoder, &prompt, max_new)?;
    let dec = decoder_for(&cfg.train, &decoder, lora.as_ref(), adapter.config.k);
    let hs: Vec<_> = pairs.iter().map(|p| &p.h).collect();
    let outputs = trainer::invert(&adapter, &dec, &prompt, &hs, max_new)?;
    Ok(pairs
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(id, (p, out))| InversionRecord {
            id,
            reference_text: tok.decode(&p.tokens),
            output_text: tok.decode(&out),
            reference: p.tokens.clone(),
            output: out,
        })
        .collect())
}

pub(crate) fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub(crate) fn read_jsonl<D: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn invert(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let pairs: Vec<InversionPair<P>> = dataset::load_pairs(&run.data(), "test")?;
    let records = invert_pairs(cfg, run, &pairs, cfg.n)?;
    write_jsonl(&run.inversions(), &records)
}

fn judge(cfg: &ExperimentConfig, run: &RunDir) -> Result<Judge> {
    let mut jc = cfg.judge.clone();
    if jc.transcript.is_none() {
        jc.transcript = Some(run.dir.join("judge_transcript.jsonl"));
    }
    Judge::new(jc)
}

/// Token metrics for every inversion plus judge scores where the judge
/// answered; unanswered dimensions stay absent.
fn score(
    cfg: &ExperimentConfig,
    run: &RunDir,
    inversions: &[InversionRecord],
    kind: &str,
) -> Result<(Vec<EvalRecord>, RunSummary)> {
    let decoder = load_decoder(cfg, run)?;
    let mut records = inversions
        .iter()
        .map(|r| EvalRecord::score(r.id, &r.reference, &r.output, &decoder.tok_emb))
        .collect::<Result<Vec<_>>>()?;
    let judge = judge(cfg, run)?;
    let texts: Vec<(String, String)> = inversions
        .iter()
        .map(|r| (r.reference_text.clone(), r.output_text.clone()))
        .collect();
    let mut failures = 0;
    for (rec, res) in records.iter_mut().zip(judge.score_all(&texts)) {
        match res {
            Ok([s, e, t]) => {
                rec.structure = Some(s.normalized);
                rec.entity = Some(e.normalized);
                rec.topic = Some(t.normalized);
            }
            Err(e) => {
                failures += 1;
                log::warn!("judge failed for record {}: {e}", rec.id);
            }
        }
    }
    let mut notes = Vec::new();
    if failures > 0 {
        notes.push(format!("{failures} records without judge scores"));
    }
    if cfg.judge.mode == JudgeMode::Stub {
        notes.push("judge scores from the offline word-overlap stub".into());
    }
    if kind == "ood" {
        notes.push("raw inverter output scored, no prefix stripping".into());
    }
    let summary = RunSummary {
        kind: kind.into(),
        scheme: cfg.train.scheme,
        layer: cfg.layer,
        n: cfg.n,
        k: cfg.k(),
        f: cfg.adapter.f,
        judge_mode: cfg.judge.mode,
        metrics: aggregate(&records)?,
        notes,
    };
    Ok((records, summary))
}

fn eval(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let inversions: Vec<InversionRecord> = read_jsonl(&run.inversions())?;
    let (records, summary) = score(cfg, run, &inversions, "in_distribution")?;
    write_jsonl(&run.records(), &records)?;
    write_json(&run.summary(), &summary)
}

fn ood_gen(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let dir = run.ood();
    let judge = judge(cfg, run)?;
    let set = ood::generate_ood_set(&judge, cfg.ood.count, Some(&dir.join("raw_response.txt")))?;
    dataset::write_lines(&dir.join("sentences.txt"), &set.sentences)
}

fn ood_eval(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let dir = run.ood();
    let p = dir.join("sentences.txt");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let sentences: Vec<String> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let tok = Tokenizer::load(&run.tokenizer())?;
    let target = load_target(run)?;
    let pairs = ood::ood_pairs(&target, &tok, &sentences, cfg.layer, cfg.bos)?;
    dataset::save_pairs(&dir, "pairs", &pairs)?;
    let inversions = invert_pairs(cfg, run, &pairs, cfg.ood.max_new)?;
    write_jsonl(&dir.join("inversions.jsonl"), &inversions)?;
    let (records, summary) = score(cfg, run, &inversions, "ood")?;
    write_jsonl(&dir.join("records.jsonl"), &records)?;
    write_json(&dir.join("summary.json"), &summary)
}
