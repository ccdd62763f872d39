//! Subcommand implementations. Every command writes only into its output
//! directory and is deterministic given its inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use hvslu::checkpoint::Checkpoint;
use hvslu::codec::Decoded;
use hvslu::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, Split};
use hvslu::eval::{cer, cver, errors_per_concept, relative_reduction, round1};
use hvslu::history::{Extractor, ExtractorKind};
use hvslu::slu::{evaluate_split, prepare_split, HSource, Phase, SignalToConceptModel};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExtractorChoice};
use crate::experiment::{train_extractor, train_phase, Prepared};

pub const HYP_FORMAT: &str = "HVHYP1";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const EXTRACTOR_FILE: &str = "extractor.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write(&out.join("config.txt"), cfg.to_text())
}

fn manifest(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn load_corpus_file(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("cannot load corpus {}", path.display()))
}

fn check_hash(what: &str, stored: &str, corpus: &Corpus) -> Result<()> {
    ensure!(
        stored == corpus.hash(),
        "{what} was built for corpus {stored}, but the given corpus hashes to {}",
        corpus.hash()
    );
    Ok(())
}

/// Writes `out/corpus.jsonl`.
pub fn cmd_gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let corpus = generate_corpus(&cfg.corpus_config())?;
    prepare_out(out, cfg)?;
    let path = out.join(CORPUS_FILE);
    save_corpus(&corpus, &path)?;
    let n = |s| corpus.split(s).count();
    write(
        &out.join("manifest.txt"),
        manifest(&[
            ("command", "gen-corpus".into()),
            ("corpus_hash", corpus.hash()),
            ("turns_train", n(Split::Train).to_string()),
            ("turns_dev", n(Split::Dev).to_string()),
            ("turns_test", n(Split::Test).to_string()),
        ]),
    )?;
    Ok(path)
}

/// Per-concept error counts as written by `score` (`tag<TAB>count` lines).
pub fn read_concept_errors(path: &Path, inventory: &[String]) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut counts = vec![None; inventory.len()];
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (tag, n) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("{}:{}: expected tag<TAB>count", path.display(), i + 1))?;
        let pos = inventory
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| anyhow!("{}:{}: unknown concept {tag:?}", path.display(), i + 1))?;
        counts[pos] = Some(n.parse().with_context(|| format!("{}:{}: bad count", path.display(), i + 1))?);
    }
    counts
        .into_iter()
        .zip(inventory)
        .map(|(c, t)| c.ok_or_else(|| anyhow!("{}: no count for concept {t:?}", path.display())))
        .collect()
}

/// Trains the configured extractor and writes `out/extractor.ckpt` and
/// `out/hvec_log.tsv`. `baseline_errors` (per-concept dev error counts of a
/// baseline decode) is required for the frequent-error variant.
pub fn cmd_train_hvec(
    cfg: &ExperimentConfig,
    corpus_path: &Path,
    out: &Path,
    baseline_errors: Option<&Path>,
) -> Result<PathBuf> {
    let ExtractorChoice::Kind(kind) = cfg.extractor else {
        bail!("train-hvec needs extractor = unsupervised | supervised-freq | supervised-all");
    };
    let corpus = load_corpus_file(corpus_path)?;
    let errors = match (kind, baseline_errors) {
        (ExtractorKind::SupervisedFreq, None) => bail!("supervised-freq needs --baseline-errors"),
        (ExtractorKind::SupervisedFreq, Some(p)) => Some(read_concept_errors(p, &corpus.inventory())?),
        _ => None,
    };
    let freq = errors.as_deref().map(|e| (e, cfg.freq_k));
    let (extractor, log) = train_extractor(&corpus, kind, cfg.extractor_config(), freq)?;
    prepare_out(out, cfg)?;
    let mut ckpt = extractor.to_checkpoint();
    ckpt.set("corpus_hash", corpus.hash());
    let path = out.join(EXTRACTOR_FILE);
    ckpt.save(&path)?;
    let mut tsv = String::from("epoch\ttrain_loss\ttrain_accuracy\theldout_accuracy\n");
    for e in &log {
        let _ = writeln!(
            tsv,
            "{}\t{:.6}\t{:.4}\t{:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.heldout_accuracy
        );
    }
    write(&out.join("hvec_log.tsv"), tsv)?;
    let mut entries = vec![
        ("command", "train-hvec".to_string()),
        ("corpus_hash", corpus.hash()),
        ("extractor", kind.to_string()),
        ("params", extractor.param_count().to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    if let Extractor::Bag(b) = &extractor {
        entries.push(("targets", b.targets.join(",")));
    }
    write(&out.join("manifest.txt"), manifest(&entries))?;
    eprintln!("{kind} extractor: {} parameters", extractor.param_count());
    Ok(path)
}

fn load_extractor(path: &Path, corpus: &Corpus) -> Result<Extractor<f64>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load extractor {}", path.display()))?;
    check_hash("extractor", ckpt.get("corpus_hash")?, corpus)?;
    Ok(Extractor::from_checkpoint(&ckpt)?)
}

fn hsource(extractor: Option<&Path>, corpus: &Corpus, joint: bool) -> Result<HSource<f64>> {
    Ok(match extractor {
        None => HSource::Zero,
        Some(p) => HSource::Extractor {
            extractor: load_extractor(p, corpus)?,
            joint,
        },
    })
}

/// Trains one phase and writes `out/model.ckpt` and `out/train_log.tsv`.
/// `source` is the checkpoint the phase starts from (finetune, transfer_sf).
pub fn cmd_train_slu(
    cfg: &ExperimentConfig,
    corpus_path: &Path,
    out: &Path,
    extractor: Option<&Path>,
    source: Option<&Path>,
) -> Result<PathBuf> {
    let corpus = load_corpus_file(corpus_path)?;
    let phase = cfg.phase;
    let source = source
        .map(|p| Checkpoint::load(p).with_context(|| format!("cannot load checkpoint {}", p.display())))
        .transpose()?;
    if let Some(c) = &source {
        check_hash("source checkpoint", c.get("corpus_hash")?, &corpus)?;
    }
    let extractor = if phase.zero_only() { None } else { extractor };
    let mut h = hsource(extractor, &corpus, cfg.joint)?;
    let data = Prepared::for_phase(&corpus, phase)?;
    let (model, report) = train_phase(&data, &cfg.model_config(), &cfg.train_config(), &mut h, source.as_ref())?;
    if report.skipped > 0 {
        eprintln!(
            "warning: skipped {} infeasible CTC instances over {} epochs",
            report.skipped,
            report.log.len() - 1
        );
    }

    prepare_out(out, cfg)?;
    let mut ckpt = model.to_checkpoint();
    ckpt.set("phase", phase)
        .set("corpus_hash", corpus.hash())
        .set("train_seed", cfg.seed)
        .set("config", cfg.to_text().trim_end().replace('\n', "; "));
    let path = out.join(MODEL_FILE);
    ckpt.save(&path)?;
    if let HSource::Extractor { extractor, joint: true } = &h {
        let mut c = extractor.to_checkpoint();
        c.set("corpus_hash", corpus.hash());
        c.save(&out.join(EXTRACTOR_FILE))?;
    }
    let mut tsv = String::from("epoch\ttrain_loss\ttrain_skipped\tdev_loss\tdev_cer\tdev_cver\n");
    for e in &report.log {
        let tl = e.train_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
        let _ = writeln!(
            tsv,
            "{}\t{tl}\t{}\t{:.6}\t{:.2}\t{:.2}",
            e.epoch, e.train_skipped, e.dev_loss, e.dev_cer, e.dev_cver
        );
    }
    write(&out.join("train_log.tsv"), tsv)?;
    write(
        &out.join("manifest.txt"),
        manifest(&[
            ("command", "train-slu".into()),
            ("corpus_hash", corpus.hash()),
            ("phase", phase.to_string()),
            ("params", model.param_count().to_string()),
            ("seed", cfg.seed.to_string()),
            ("skipped_ctc", report.skipped.to_string()),
        ]),
    )?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HypHeader {
    format: String,
    corpus_hash: String,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HypRecord {
    index: usize,
    text: String,
    concepts: Vec<(String, String)>,
}

/// Hypotheses of one split, in corpus order.
pub struct Hypotheses {
    pub corpus_hash: String,
    pub split: Split,
    pub records: Vec<(usize, Decoded)>,
}

impl Hypotheses {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&HypHeader {
            format: HYP_FORMAT.into(),
            corpus_hash: self.corpus_hash.clone(),
            split: self.split,
        })
        .expect("serializable");
        s.push('\n');
        for (index, d) in &self.records {
            let r = HypRecord {
                index: *index,
                text: d.text.clone(),
                concepts: d.concepts.clone(),
            };
            s.push_str(&serde_json::to_string(&r).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, head) = lines.next().ok_or_else(|| anyhow!("empty hypothesis file"))?;
        let head: HypHeader = serde_json::from_str(head).context("line 1: bad header")?;
        ensure!(head.format == HYP_FORMAT, "line 1: format {:?}, expected {HYP_FORMAT}", head.format);
        let records = lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let r: HypRecord = serde_json::from_str(l).with_context(|| format!("line {}: bad record", i + 1))?;
                Ok((
                    r.index,
                    Decoded {
                        text: r.text,
                        concepts: r.concepts,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            corpus_hash: head.corpus_hash,
            split: head.split,
            records,
        })
    }

    /// The references themselves, as a hypothesis file.
    pub fn from_references(corpus: &Corpus, split: Split) -> Self {
        let records = corpus
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, r)| {
                (
                    i,
                    Decoded {
                        text: r.user_transcript.plain_text(),
                        concepts: r.user_transcript.concept_pairs(),
                    },
                )
            })
            .collect();
        Self {
            corpus_hash: corpus.hash(),
            split,
            records,
        }
    }
}

pub fn hyp_file_name(split: Split) -> String {
    format!("hyp_{split}.jsonl")
}

/// Decodes `split` with the model checkpoint into `out/hyp_<split>.jsonl`.
pub fn cmd_decode(
    cfg: &ExperimentConfig,
    model_path: &Path,
    corpus_path: &Path,
    split: Split,
    extractor: Option<&Path>,
    out: &Path,
) -> Result<PathBuf> {
    let corpus = load_corpus_file(corpus_path)?;
    let ckpt = Checkpoint::load(model_path).with_context(|| format!("cannot load model {}", model_path.display()))?;
    check_hash("model", ckpt.get("corpus_hash")?, &corpus)?;
    let model = SignalToConceptModel::<f64>::from_checkpoint(&ckpt)?;
    let h = hsource(extractor, &corpus, false)?;
    let utts = prepare_split(&corpus, split, &model.alphabet)?;
    let ev = evaluate_split(&model, &utts, &h)?;
    let hyps = Hypotheses {
        corpus_hash: corpus.hash(),
        split,
        records: utts.iter().map(|u| u.index).zip(ev.hypotheses).collect(),
    };
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    if !out.join("config.txt").exists() {
        write(&out.join("config.txt"), cfg.to_text())?;
    }
    let path = out.join(hyp_file_name(split));
    write(&path, hyps.to_jsonl())?;
    Ok(path)
}

/// One row of a result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub name: String,
    pub cer: f64,
    pub cver: f64,
    pub delta_cer: Option<f64>,
    pub delta_cver: Option<f64>,
}

pub struct ScoreReport {
    pub record: ScoreRecord,
    pub concept_errors: Vec<(String, usize)>,
    pub reference_concepts: usize,
}

/// Scores hypotheses against the references of their split.
pub fn score(corpus: &Corpus, hyps: &Hypotheses, name: &str) -> Result<ScoreReport> {
    check_hash("hypothesis file", &hyps.corpus_hash, corpus)?;
    let expected: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == hyps.split)
        .map(|(i, _)| i)
        .collect();
    let got: Vec<usize> = hyps.records.iter().map(|(i, _)| *i).collect();
    ensure!(got == expected, "hypotheses do not cover the {} split in corpus order", hyps.split);
    let refs: Vec<_> = expected.iter().map(|&i| &corpus.records[i].user_transcript).collect();
    let ref_tags: Vec<Vec<String>> = refs.iter().map(|t| t.tags()).collect();
    let hyp_tags: Vec<Vec<String>> = hyps.records.iter().map(|(_, d)| d.tags()).collect();
    let ref_pairs: Vec<_> = refs.iter().map(|t| t.concept_pairs()).collect();
    let hyp_pairs: Vec<_> = hyps.records.iter().map(|(_, d)| d.concepts.clone()).collect();
    let inventory = corpus.inventory();
    let errors = errors_per_concept(&ref_tags, &hyp_tags, &inventory)?;
    Ok(ScoreReport {
        record: ScoreRecord {
            name: name.to_string(),
            cer: cer(&ref_tags, &hyp_tags)?,
            cver: cver(&ref_pairs, &hyp_pairs)?,
            delta_cer: None,
            delta_cver: None,
        },
        concept_errors: inventory.into_iter().zip(errors).collect(),
        reference_concepts: ref_tags.iter().map(Vec::len).sum(),
    })
}

pub fn score_file_name(split: Split) -> String {
    format!("score_{split}.jsonl")
}

/// Scores `out/hyp_<split>.jsonl`-style files; writes the machine record,
/// a plain-text report and per-concept error counts into `out`.
pub fn cmd_score(corpus_path: &Path, hyp_path: &Path, name: &str, out: &Path) -> Result<ScoreReport> {
    let corpus = load_corpus_file(corpus_path)?;
    let text = fs::read_to_string(hyp_path).with_context(|| format!("cannot read {}", hyp_path.display()))?;
    let hyps = Hypotheses::from_jsonl(&text).with_context(|| format!("in {}", hyp_path.display()))?;
    let report = score(&corpus, &hyps, name)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let split = hyps.split;
    write(
        &out.join(score_file_name(split)),
        serde_json::to_string(&report.record)? + "\n",
    )?;
    let mut txt = format!(
        "system {name}\nsplit {split}\nreference concepts {}\nCER {:.2}\nCVER {:.2}\n",
        report.reference_concepts, report.record.cer, report.record.cver
    );
    txt.push_str("\nerrors per concept\n");
    let mut tsv = String::new();
    for (tag, n) in &report.concept_errors {
        let _ = writeln!(txt, "  {tag:<12} {n}");
        let _ = writeln!(tsv, "{tag}\t{n}");
    }
    write(&out.join(format!("score_{split}.txt")), txt)?;
    write(&out.join(format!("concept_errors_{split}.tsv")), tsv)?;
    Ok(report)
}

/// Fills the Δ columns: relative reduction of each row against the first,
/// computed from the one-decimal table cells.
pub fn with_deltas(rows: &[ScoreRecord]) -> Result<Vec<ScoreRecord>> {
    let Some(base) = rows.first() else {
        return Ok(Vec::new());
    };
    let (bc, bv) = (round1(base.cer), round1(base.cver));
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let mut r = r.clone();
            if i == 0 {
                r.delta_cer = None;
                r.delta_cver = None;
            } else {
                r.delta_cer = Some(round1(relative_reduction(bc, round1(r.cer))?));
                r.delta_cver = Some(round1(relative_reduction(bv, round1(r.cver))?));
            }
            Ok(r)
        })
        .collect()
}

pub fn format_table(rows: &[ScoreRecord]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let cell = |d: Option<f64>| d.map_or("-".to_string(), |v| format!("{v:.1}"));
    let mut s = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "system", "CER", "ΔCER", "CVER", "ΔCVER");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>6.1}  {:>6}  {:>6.1}  {:>6}",
            r.name,
            r.cer,
            cell(r.delta_cer),
            r.cver,
            cell(r.delta_cver)
        );
    }
    s
}

/// Table over run directories (first = baseline) from their score records.
pub fn cmd_table(runs: &[PathBuf], split: Split) -> Result<String> {
    ensure!(!runs.is_empty(), "table needs at least one run directory");
    let rows = runs
        .iter()
        .map(|dir| {
            let path = dir.join(score_file_name(split));
            let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str::<ScoreRecord>(text.trim()).with_context(|| format!("bad score record {}", path.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(format_table(&with_deltas(&rows)?))
}

/// Phase names accepted on the command line.
pub fn parse_phase(s: &str) -> Result<Phase> {
    s.parse().map_err(|e: String| anyhow!(e))
}
