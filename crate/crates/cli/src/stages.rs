use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use rayon::prelude::*;
use refrev::aligner::{align_example, Alignment};
use refrev::contrast::{build_contrast_sets, build_inference_prompts};
use refrev::corpus::{parse_corpus, tag_entities, write_corpus, Example, Lexicon, Sentence};
use refrev::corrupt::{derive_seed, rng_from_seed};
use refrev::embed::{load_store, Embedder, HashedEmbedder, Matrix};
use refrev::gate::{
    classify_example, diagnostics, filter_no_admission, filter_unsupported, halluc_ent_masks,
    quality_bucket, token_coverage, MaskRecord, SupportLabel,
};
use refrev::matcher::{DocFrequencyTable, Matcher};
use refrev::metrics::{corpus_report, embed_summary, example_metrics, ExampleMetrics, FaithfulnessReport, SummaryRecord};
use refrev::pipeline::{
    corrupt_reference_sentence, corruptions_by_sentence, read_jsonl, write_jsonl, CorruptionRecord,
    ReferenceIndex,
};
use refrev::prepared::PreparedExample;
use refrev::rescore::{
    candidate_key, fully_extractive_revise, rank_corrected, score_candidate, select_revision, Candidate,
    CandidateScores, SelectionRecord, Strategy,
};
use refrev::Error;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;

pub const ALIGNMENTS: &str = "alignments.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const MASKS: &str = "masks.jsonl";
pub const CORRUPTIONS: &str = "corruptions.jsonl";
pub const REDRESS_TRAIN: &str = "redress_train.jsonl";
pub const REDRESS_INFERENCE: &str = "redress_inference.jsonl";
pub const REDRESS_TRAIN_TSV: &str = "redress_train.seq2seq.tsv";
pub const REDRESS_INFERENCE_TSV: &str = "redress_inference.seq2seq.tsv";
pub const REVISION_TRAIN: &str = "revision_train.jsonl";
pub const REVISION_PROMPTS: &str = "revision_prompts.jsonl";
pub const TAGGED: &str = "corpus.tagged.jsonl";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

pub struct Context {
    pub config: PipelineConfig,
    pub corpus: Vec<Example>,
    pub embedder: Box<dyn Embedder>,
    pub dft: DocFrequencyTable,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing into {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |w| Ok(write_jsonl(w, rows)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn group_by_example<T, F: Fn(&T) -> &str>(rows: Vec<T>, key: F) -> HashMap<String, Vec<T>> {
    let mut out: HashMap<String, Vec<T>> = HashMap::new();
    for r in rows {
        out.entry(key(&r).to_string()).or_default().push(r);
    }
    out
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl Context {
    pub fn load(config: PipelineConfig) -> Result<Self> {
        let path = &config.paths.corpus;
        let mut corpus = parse_corpus(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        corpus.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        let embedder: Box<dyn Embedder> = if config.paths.embeddings.as_os_str().is_empty() {
            Box::new(HashedEmbedder::new(config.paths.hashed_dim)?)
        } else {
            let p = &config.paths.embeddings;
            let store = load_store(open(p)?).with_context(|| format!("reading {}", p.display()))?;
            store.validate_against(&corpus)?;
            Box::new(store)
        };
        let dft = DocFrequencyTable::from_corpus(&corpus);
        Ok(Context {
            config,
            corpus,
            embedder,
            dft,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.config.paths.out_dir.join(name)
    }

    fn matcher(&self) -> Matcher<'_> {
        Matcher::new(&self.config.matching, &self.dft)
    }

    fn prepare(&self) -> Result<Vec<PreparedExample<'_>>> {
        self.corpus
            .par_iter()
            .map(|ex| PreparedExample::new(ex, self.embedder.as_ref(), &self.config.matching))
            .collect::<refrev::Result<Vec<_>>>()
            .map_err(Into::into)
    }

    fn alignments(&self) -> Result<HashMap<String, Vec<Alignment>>> {
        let rows: Vec<Alignment> = read_rows(&self.out(ALIGNMENTS))?;
        Ok(group_by_example(rows, |a| &a.example_id))
    }

    fn labels(&self) -> Result<HashMap<String, Vec<SupportLabel>>> {
        let rows: Vec<SupportLabel> = read_rows(&self.out(LABELS))?;
        Ok(group_by_example(rows, |l| &l.example_id))
    }

    fn require<'m, T>(&self, map: &'m HashMap<String, Vec<T>>, eid: &str, what: &str) -> Result<&'m [T]> {
        map.get(eid).map(Vec::as_slice).ok_or_else(|| {
            Error::Validation {
                example_id: eid.to_string(),
                field: what.to_string(),
                message: format!("no {what} rows; run the producing stage first"),
            }
            .into()
        })
    }

    fn lexicon(&self) -> Result<Option<Lexicon>> {
        let lp = &self.config.paths.lexicon;
        if lp.as_os_str().is_empty() {
            return Ok(None);
        }
        let lexicon = Lexicon::parse_tsv(open(lp)?).with_context(|| format!("reading {}", lp.display()))?;
        Ok(Some(lexicon))
    }

    pub fn tag(&self) -> Result<Value> {
        let lexicon = self
            .lexicon()?
            .ok_or_else(|| Error::InvalidInput("tag needs paths.lexicon".into()))?;
        let tag = |s: &Sentence| tag_entities(s, &lexicon);
        let tagged: Vec<Example> = self
            .corpus
            .par_iter()
            .map(|ex| {
                let mut ex = ex.clone();
                for note in &mut ex.source_notes {
                    note.sentences = note.sentences.iter().map(tag).collect();
                }
                ex.reference = ex.reference.iter().map(tag).collect();
                ex
            })
            .collect();
        let mentions: usize = tagged
            .iter()
            .flat_map(|e| e.source_sentences().chain(e.reference.iter()))
            .map(|s| s.entities.len())
            .sum();
        let out = self.out(TAGGED);
        write_atomic(&out, |w| Ok(write_corpus(w, &tagged)?))?;
        Ok(json!({"command": "tag", "examples": tagged.len(), "mentions": mentions, "outputs": [file_name(&out)]}))
    }

    pub fn align(&self) -> Result<Value> {
        let preps = self.prepare()?;
        let matcher = self.matcher();
        let rows: Vec<Alignment> = preps
            .par_iter()
            .map(|p| align_example(p, &self.config.align, &matcher))
            .collect::<refrev::Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let out = self.out(ALIGNMENTS);
        write_rows(&out, &rows)?;
        Ok(json!({"command": "align", "examples": preps.len(), "alignments": rows.len(), "outputs": [file_name(&out)]}))
    }

    pub fn classify(&self) -> Result<Value> {
        let preps = self.prepare()?;
        let alignments = self.alignments()?;
        let matcher = self.matcher();
        let per_example: Vec<(Vec<SupportLabel>, Vec<MaskRecord>)> = preps
            .par_iter()
            .map(|p| {
                let eid = &p.example.example_id;
                let a = self.require(&alignments, eid, "alignment")?;
                let labels = classify_example(p, a, &matcher, &self.config.gate)?;
                let masks = mask_records(p.example, &labels);
                Ok((labels, masks))
            })
            .collect::<Result<_>>()?;
        let (labels, masks): (Vec<_>, Vec<_>) = per_example.into_iter().unzip();
        let labels: Vec<SupportLabel> = labels.into_iter().flatten().collect();
        let masks: Vec<MaskRecord> = masks.into_iter().flatten().collect();
        let supported = labels.iter().filter(|l| l.supported).count();
        write_rows(&self.out(LABELS), &labels)?;
        write_rows(&self.out(MASKS), &masks)?;
        Ok(json!({
            "command": "classify",
            "sentences": labels.len(),
            "supported": supported,
            "unsupported": labels.len() - supported,
            "outputs": [LABELS, MASKS],
        }))
    }

    pub fn filter(&self, strategy: &str) -> Result<Value> {
        let name = format!("filter_{strategy}.jsonl");
        let out = self.out(&name);
        let (kept, total) = match strategy {
            "no_admission" => {
                let kept: Vec<Example> = self.corpus.iter().filter(|e| filter_no_admission(e)).cloned().collect();
                write_atomic(&out, |w| Ok(write_corpus(w, &kept)?))?;
                (kept.len(), self.corpus.len())
            }
            "unsupported" => {
                let labels = self.labels()?;
                let mut kept = Vec::new();
                for ex in &self.corpus {
                    let l = self.require(&labels, &ex.example_id, "labels")?;
                    if filter_unsupported(ex, l, &self.config.gate).keep {
                        kept.push(ex.clone());
                    }
                }
                write_atomic(&out, |w| Ok(write_corpus(w, &kept)?))?;
                (kept.len(), self.corpus.len())
            }
            "halluc_ents" => {
                let labels = self.labels()?;
                let mut masks = Vec::new();
                for ex in &self.corpus {
                    let l = self.require(&labels, &ex.example_id, "labels")?;
                    masks.extend(mask_records(ex, l));
                }
                write_rows(&out, &masks)?;
                (self.corpus.len(), self.corpus.len())
            }
            "control_buckets" => {
                #[derive(Serialize)]
                struct Bucket<'a> {
                    example_id: &'a str,
                    bucket: usize,
                    token_coverage: f64,
                }
                let rows: Vec<Bucket<'_>> = self
                    .corpus
                    .iter()
                    .map(|ex| Bucket {
                        example_id: &ex.example_id,
                        bucket: quality_bucket(ex, &self.config.gate),
                        token_coverage: token_coverage(ex),
                    })
                    .collect();
                write_rows(&out, &rows)?;
                (self.corpus.len(), self.corpus.len())
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown filter strategy {other:?}; expected no_admission, unsupported, halluc_ents or control_buckets"
                ))
                .into())
            }
        };
        Ok(json!({"command": "filter", "strategy": strategy, "examples": total, "kept": kept, "outputs": [name]}))
    }

    pub fn corrupt(&self) -> Result<Value> {
        let preps = self.prepare()?;
        let matcher = self.matcher();
        let references = ReferenceIndex::build(&preps, self.embedder.dim())?;
        let section = &self.config.corrupt;
        let options = section.options();
        let per_sentence: Vec<_> = preps
            .par_iter()
            .flat_map_iter(|p| (0..p.example.reference.len()).map(move |i| (p, i)))
            .map(|(p, i)| {
                let c = corrupt_reference_sentence(p, i, &references, &matcher, &options, self.config.seed, section.samples)?;
                let keep_redress = !section.filter_no_entities || !p.example.reference[i].entities.is_empty();
                Ok((c, keep_redress))
            })
            .collect::<Result<_>>()?;
        let mut records = Vec::new();
        let mut train = Vec::new();
        let mut inference = Vec::new();
        let mut clamped = 0;
        for (c, keep) in per_sentence {
            clamped += c.records.iter().filter(|r| r.plan.clamped).count();
            records.extend(c.records);
            if keep {
                train.extend(c.train);
                inference.extend(c.inference);
            }
        }
        write_rows(&self.out(CORRUPTIONS), &records)?;
        write_rows(&self.out(REDRESS_TRAIN), &train)?;
        write_rows(&self.out(REDRESS_INFERENCE), &inference)?;
        write_seq2seq(&self.out(REDRESS_TRAIN_TSV), train.iter().map(|r| (r.seq2seq_input(), r.target_text.clone())))?;
        write_seq2seq(&self.out(REDRESS_INFERENCE_TSV), inference.iter().map(|r| (r.seq2seq_input(), None)))?;
        Ok(json!({
            "command": "corrupt",
            "corruptions": records.len(),
            "train_records": train.len(),
            "inference_records": inference.len(),
            "clamped": clamped,
            "outputs": [CORRUPTIONS, REDRESS_TRAIN, REDRESS_INFERENCE, REDRESS_TRAIN_TSV, REDRESS_INFERENCE_TSV],
        }))
    }

    pub fn build_contrast(&self) -> Result<Value> {
        let preps = self.prepare()?;
        let alignments = self.alignments()?;
        let labels = self.labels()?;
        let corruptions: Vec<CorruptionRecord> = read_rows(&self.out(CORRUPTIONS))?;
        let corruptions = group_by_example(corruptions, |c| &c.example_id);
        let empty = Vec::new();
        let rows: Vec<_> = preps
            .par_iter()
            .map(|p| {
                let eid = p.example.example_id.as_str();
                let a = self.require(&alignments, eid, "alignment")?;
                let l = self.require(&labels, eid, "labels")?;
                let by_sentence = corruptions_by_sentence(corruptions.get(eid).unwrap_or(&empty));
                let mut rng = rng_from_seed(derive_seed(self.config.seed, &[eid, "contrast"], 0));
                Ok(build_contrast_sets(p, l, a, &by_sentence, self.embedder.as_ref(), &mut rng)?)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let out = self.out(REVISION_TRAIN);
        write_rows(&out, &rows)?;
        let positives = rows.iter().filter(|r| r.polarity == Some(refrev::contrast::Polarity::Positive)).count();
        Ok(json!({
            "command": "build-contrast",
            "records": rows.len(),
            "positive": positives,
            "negative": rows.len() - positives,
            "outputs": [file_name(&out)],
        }))
    }

    pub fn prompts(&self) -> Result<Value> {
        let preps = self.prepare()?;
        let alignments = self.alignments()?;
        let labels = self.labels()?;
        let rows: Vec<_> = preps
            .par_iter()
            .map(|p| {
                let eid = p.example.example_id.as_str();
                let a = self.require(&alignments, eid, "alignment")?;
                let l = self.require(&labels, eid, "labels")?;
                Ok(build_inference_prompts(p, l, a)?)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let out = self.out(REVISION_PROMPTS);
        write_rows(&out, &rows)?;
        Ok(json!({"command": "prompts", "prompts": rows.len(), "outputs": [file_name(&out)]}))
    }

    pub fn rescore(&self, strategy: Strategy) -> Result<Value> {
        let preps = self.prepare()?;
        let alignments = self.alignments()?;
        let mut config = self.config.rescore;
        config.strategy = strategy;
        let per_example: Vec<(Vec<SelectionRecord>, SummaryRecord)> = if strategy == Strategy::FullyExtractive {
            let labels = self.labels()?;
            preps
                .par_iter()
                .map(|p| {
                    let eid = p.example.example_id.as_str();
                    let l = self.require(&labels, eid, "labels")?;
                    let a = self.require(&alignments, eid, "alignment")?;
                    self.fully_extractive(p, l, a)
                })
                .collect::<Result<_>>()?
        } else {
            let cp = &self.config.paths.candidates;
            if cp.as_os_str().is_empty() {
                return Err(Error::InvalidInput(format!("{strategy} needs paths.candidates")).into());
            }
            let mut candidates: Vec<Candidate> = read_rows(cp)?;
            if let Some(lexicon) = self.lexicon()? {
                for c in candidates.iter_mut().filter(|c| c.entities.is_empty()) {
                    c.entities = tag_entities(&c.to_sentence(&c.ref_sent_id), &lexicon).entities;
                }
            }
            let known: std::collections::HashSet<&str> = self.corpus.iter().map(|e| e.example_id.as_str()).collect();
            if let Some(c) = candidates.iter().find(|c| !known.contains(c.example_id.as_str())) {
                return Err(Error::Validation {
                    example_id: c.example_id.clone(),
                    field: "candidates".into(),
                    message: "candidate for an example not in the corpus".into(),
                }
                .into());
            }
            let candidates = group_by_example(candidates, |c| &c.example_id);
            let empty = Vec::new();
            preps
                .par_iter()
                .map(|p| {
                    let eid = p.example.example_id.as_str();
                    let a = self.require(&alignments, eid, "alignment")?;
                    self.select_candidates(p, a, candidates.get(eid).unwrap_or(&empty), &config)
                })
                .collect::<Result<_>>()?
        };
        let (selections, summaries): (Vec<_>, Vec<_>) = per_example.into_iter().unzip();
        let selections: Vec<SelectionRecord> = selections.into_iter().flatten().collect();
        let sel_name = format!("selections.{strategy}.jsonl");
        let rev_name = format!("revised.{strategy}.jsonl");
        write_rows(&self.out(&sel_name), &selections)?;
        write_rows(&self.out(&rev_name), &summaries)?;
        Ok(json!({
            "command": "rescore",
            "strategy": strategy.as_str(),
            "revised_sentences": selections.len(),
            "outputs": [sel_name, rev_name],
        }))
    }

    fn fully_extractive(
        &self,
        p: &PreparedExample<'_>,
        labels: &[SupportLabel],
        alignments: &[Alignment],
    ) -> Result<(Vec<SelectionRecord>, SummaryRecord)> {
        let eid = &p.example.example_id;
        let sources: Vec<(&str, &Matrix)> = p
            .source
            .iter()
            .zip(&p.source_matrices)
            .map(|(s, m)| (s.sent_id.as_str(), m))
            .collect();
        let mut selections = Vec::new();
        let mut summary = SummaryRecord::from_reference(p.example);
        for (i, r) in p.example.reference.iter().enumerate() {
            if labels.iter().any(|l| l.ref_sent_id == r.sent_id && l.supported) {
                continue;
            }
            let pos = fully_extractive_revise(&p.reference_matrices[i], &sources)
                .map_err(|e| Error::Validation {
                    example_id: eid.clone(),
                    field: "source_notes".into(),
                    message: format!("{}: {e}", r.sent_id),
                })?;
            let chosen = p.source[pos];
            let scores = match alignments.iter().find(|a| a.ref_sent_id == r.sent_id) {
                Some(a) if !a.aligned_src_ids.is_empty() && !chosen.tokens.is_empty() => score_candidate(
                    &chosen.tokens,
                    &p.source_matrices[pos],
                    &p.context_tokens(&a.aligned_src_ids),
                    &p.context_matrix(self.embedder.dim(), &a.aligned_src_ids)?,
                    None,
                )?,
                _ => CandidateScores {
                    bs_precision: 0.0,
                    coverage: 0.0,
                    density: 0.0,
                    entailment: None,
                    len: chosen.tokens.len(),
                },
            };
            selections.push(SelectionRecord {
                example_id: eid.clone(),
                ref_sent_id: r.sent_id.clone(),
                chosen_index: None,
                strategy: Strategy::FullyExtractive,
                scores,
                chosen_src_id: Some(chosen.sent_id.clone()),
            });
            summary.summary[i] = chosen.clone();
        }
        Ok((selections, summary))
    }

    fn select_candidates(
        &self,
        p: &PreparedExample<'_>,
        alignments: &[Alignment],
        candidates: &[Candidate],
        config: &refrev::rescore::RescoreConfig,
    ) -> Result<(Vec<SelectionRecord>, SummaryRecord)> {
        let eid = &p.example.example_id;
        let mut by_ref: BTreeMap<&str, Vec<&Candidate>> = BTreeMap::new();
        for c in candidates {
            by_ref.entry(c.ref_sent_id.as_str()).or_default().push(c);
        }
        let mut selections = Vec::new();
        let mut summary = SummaryRecord::from_reference(p.example);
        for (i, r) in p.example.reference.iter().enumerate() {
            let Some(group) = by_ref.remove(r.sent_id.as_str()) else {
                continue;
            };
            let mut group = group;
            group.sort_by_key(|c| c.candidate_index);
            let invalid = |msg: String| Error::Validation {
                example_id: eid.clone(),
                field: "candidates".into(),
                message: format!("{}: {msg}", r.sent_id),
            };
            let a = alignments
                .iter()
                .find(|a| a.ref_sent_id == r.sent_id)
                .filter(|a| !a.aligned_src_ids.is_empty())
                .ok_or_else(|| invalid("no aligned evidence to score against".into()))?;
            let ctx_tokens = p.context_tokens(&a.aligned_src_ids);
            let ctx_matrix = p.context_matrix(self.embedder.dim(), &a.aligned_src_ids)?;
            let mut scores = Vec::with_capacity(group.len());
            for c in &group {
                if c.tokens.is_empty() {
                    return Err(invalid(format!("candidate {} has no tokens", c.candidate_index)).into());
                }
                let m = self.embedder.embed(&candidate_key(eid, &r.sent_id, c.candidate_index), &c.tokens)?;
                scores.push(score_candidate(&c.tokens, &m, &ctx_tokens, &ctx_matrix, c.entailment)?);
            }
            let chosen = match config.strategy {
                Strategy::RankCorrected => rank_corrected(&scores),
                _ => select_revision(&scores, config),
            }
            .map_err(|e| invalid(e.to_string()))?;
            let c = group[chosen];
            selections.push(SelectionRecord {
                example_id: eid.clone(),
                ref_sent_id: r.sent_id.clone(),
                chosen_index: Some(c.candidate_index),
                strategy: config.strategy,
                scores: scores[chosen],
                chosen_src_id: None,
            });
            summary.summary[i] = c.to_sentence(&r.sent_id);
        }
        if let Some((rid, _)) = by_ref.into_iter().next() {
            return Err(Error::Validation {
                example_id: eid.clone(),
                field: "candidates".into(),
                message: format!("no reference sentence {rid}"),
            }
            .into());
        }
        Ok((selections, summary))
    }

    pub fn metrics(&self) -> Result<Value> {
        let preps = self.prepare()?;
        let sp = &self.config.paths.summaries;
        let summaries: HashMap<String, SummaryRecord> = if sp.as_os_str().is_empty() {
            self.corpus
                .iter()
                .map(|e| (e.example_id.clone(), SummaryRecord::from_reference(e)))
                .collect()
        } else {
            let rows: Vec<SummaryRecord> = read_rows(sp)?;
            let mut map = HashMap::new();
            for r in rows {
                let id = r.example_id.clone();
                if map.insert(id.clone(), r).is_some() {
                    return Err(Error::Validation {
                        example_id: id,
                        field: "summary".into(),
                        message: "duplicate summary".into(),
                    }
                    .into());
                }
            }
            map
        };
        let matcher = self.matcher();
        let rows: Vec<ExampleMetrics> = preps
            .par_iter()
            .map(|p| {
                let eid = &p.example.example_id;
                let s = summaries.get(eid).ok_or_else(|| Error::Validation {
                    example_id: eid.clone(),
                    field: "summary".into(),
                    message: "missing summary".into(),
                })?;
                let matrices = embed_summary(s, p.example, self.embedder.as_ref())?;
                Ok(example_metrics(p, s, &matrices, &self.config.matching, &matcher)?)
            })
            .collect::<Result<_>>()?;
        let report = corpus_report(rows);
        write_json(&self.out(METRICS_JSON), &report)?;
        write_atomic(&self.out(METRICS_CSV), |w| write_metrics_csv(w, &report))?;
        Ok(json!({
            "command": "metrics",
            "examples": report.per_example.len(),
            "hallucination_rate": report.corpus_means.hallucination_rate,
            "far": report.corpus_means.far,
            "outputs": [METRICS_JSON, METRICS_CSV],
        }))
    }

    pub fn diagnostics(&self) -> Result<Value> {
        let labels = self.labels()?;
        let grouped = self
            .corpus
            .iter()
            .map(|e| self.require(&labels, &e.example_id, "labels").map(<[_]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let report = diagnostics(&self.corpus, &grouped, &self.config.gate)?;
        write_json(&self.out(DIAGNOSTICS), &report)?;
        Ok(json!({
            "command": "diagnostics",
            "examples": report.example_count,
            "sentences": report.sentence_count,
            "coverage_halluc_pearson": report.coverage_halluc_pearson,
            "outputs": [DIAGNOSTICS],
        }))
    }

    pub fn all(&self) -> Result<Value> {
        let stages = vec![
            self.align()?,
            self.classify()?,
            self.corrupt()?,
            self.build_contrast()?,
            self.prompts()?,
        ];
        Ok(json!({"command": "all", "stages": stages}))
    }
}

fn mask_records(example: &Example, labels: &[SupportLabel]) -> Vec<MaskRecord> {
    halluc_ent_masks(&example.reference, labels)
        .into_iter()
        .zip(&example.reference)
        .map(|(mask, r)| MaskRecord {
            example_id: example.example_id.clone(),
            ref_sent_id: r.sent_id.clone(),
            mask,
        })
        .collect()
}

fn write_seq2seq(path: &Path, rows: impl Iterator<Item = (String, Option<String>)>) -> Result<()> {
    let rows: Vec<_> = rows.collect();
    write_atomic(path, |w| {
        let mut tsv = csv::WriterBuilder::new().delimiter(b'\t').has_headers(false).from_writer(w);
        for (input, target) in rows {
            match target {
                Some(t) => tsv.write_record([input, t])?,
                None => tsv.write_record([input])?,
            }
        }
        tsv.flush()?;
        Ok(())
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    example_id: &'a str,
    hallucination_rate: Option<f64>,
    entity_precision: Option<f64>,
    bs_precision: Option<f64>,
    bs_recall: Option<f64>,
    bs_f1: Option<f64>,
    far: Option<f64>,
    coverage: Option<f64>,
    density: Option<f64>,
    compression: Option<f64>,
    entailment: Option<f64>,
}

/// Per-example rows followed by a `corpus_mean` row.
fn write_metrics_csv(w: &mut dyn Write, report: &FaithfulnessReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in &report.per_example {
        out.serialize(CsvRow {
            example_id: &r.example_id,
            hallucination_rate: Some(r.hallucination_rate),
            entity_precision: r.entity_precision,
            bs_precision: Some(r.bs_precision),
            bs_recall: Some(r.bs_recall),
            bs_f1: Some(r.bs_f1),
            far: r.far,
            coverage: Some(r.coverage),
            density: Some(r.density),
            compression: Some(r.compression),
            entailment: r.entailment,
        })?;
    }
    let m = &report.corpus_means;
    out.serialize(CsvRow {
        example_id: "corpus_mean",
        hallucination_rate: m.hallucination_rate,
        entity_precision: m.entity_precision,
        bs_precision: m.bs_precision,
        bs_recall: m.bs_recall,
        bs_f1: m.bs_f1,
        far: m.far,
        coverage: m.coverage,
        density: m.density,
        compression: m.compression,
        entailment: m.entailment,
    })?;
    out.flush()?;
    Ok(())
}
