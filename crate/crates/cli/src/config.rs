use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use refrev::aligner::AlignConfig;
use refrev::corrupt::CorruptOptions;
use refrev::gate::GateConfig;
use refrev::matcher::MatchConfig;
use refrev::rescore::RescoreConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Empty selects hashed embeddings.
    pub embeddings: PathBuf,
    pub hashed_dim: usize,
    pub lexicon: PathBuf,
    pub candidates: PathBuf,
    /// Empty evaluates the references themselves.
    pub summaries: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from("data/toy/corpus.jsonl"),
            embeddings: PathBuf::new(),
            hashed_dim: 64,
            lexicon: PathBuf::new(),
            candidates: PathBuf::new(),
            summaries: PathBuf::new(),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptSection {
    /// Corruptions drawn per reference sentence.
    pub samples: usize,
    pub m1: bool,
    pub m2: bool,
    pub deletion: bool,
    pub shuffle: bool,
    /// Skip sentences without entities when emitting corruption-model records.
    pub filter_no_entities: bool,
}

impl Default for CorruptSection {
    fn default() -> Self {
        let o = CorruptOptions::default();
        CorruptSection {
            samples: 5,
            m1: o.m1,
            m2: o.m2,
            deletion: o.deletion,
            shuffle: o.shuffle,
            filter_no_entities: false,
        }
    }
}

impl CorruptSection {
    pub fn options(&self) -> CorruptOptions {
        CorruptOptions {
            m1: self.m1,
            m2: self.m2,
            deletion: self.deletion,
            shuffle: self.shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: Paths,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub align: AlignConfig,
    pub gate: GateConfig,
    pub corrupt: CorruptSection,
    pub rescore: RescoreConfig,
}

impl PipelineConfig {
    /// Reads the optional config file and applies `section.key = value`
    /// overrides on top of it.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .map_err(|e| refrev::Error::InvalidInput(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
        }
        let config: PipelineConfig = Value::Table(table)
            .try_into()
            .map_err(|e| refrev::Error::InvalidInput(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.matching.validate()?;
        self.align.validate()?;
        self.gate.validate()?;
        self.rescore.validate()?;
        if self.paths.hashed_dim < 8 {
            return Err(refrev::Error::InvalidInput("paths.hashed_dim must be >= 8".into()).into());
        }
        if self.corrupt.samples < 2 {
            return Err(refrev::Error::InvalidInput("corrupt.samples must be >= 2".into()).into());
        }
        Ok(())
    }
}

/// TOML scalar when the text parses as one, otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(refrev::Error::InvalidInput(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!(refrev::Error::InvalidInput(format!("override {key:?}: {part} is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
