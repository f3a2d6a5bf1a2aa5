//! Versioned JSON documents, JSON-lines datasets and atomic file writes.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::{PairItem, PairMode, PreferencePairSet};

pub const VERIFICATION_SCHEMA: &str = "preflab.verification.v1";
pub const POLICY_SCHEMA: &str = "preflab.policy.v1";
pub const DATASET_SCHEMA: &str = "preflab.dataset.v1";
pub const RUN_REPORT_SCHEMA: &str = "preflab.run_report.v1";
pub const SUITE_REPORT_SCHEMA: &str = "preflab.suite_report.v1";
pub const FINDINGS_SCHEMA: &str = "preflab.findings.v1";
pub const DATASET_STATS_SCHEMA: &str = "preflab.dataset_stats.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versioned<T> {
    pub schema: String,
    pub data: T,
}

/// Writes `bytes` to a temp file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn to_versioned_json<T: Serialize>(schema: &str, data: &T) -> Result<String> {
    let doc = Versioned {
        schema: schema.to_string(),
        data,
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

pub fn write_versioned<T: Serialize>(path: &Path, schema: &str, data: &T) -> Result<()> {
    write_atomic(path, to_versioned_json(schema, data)?.as_bytes())
}

pub fn parse_versioned<T: DeserializeOwned>(text: &str, schema: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Header {
        schema: String,
    }
    let header: Header = serde_json::from_str(text)?;
    if header.schema != schema {
        return Err(Error::Schema {
            expected: schema.to_string(),
            found: header.schema,
        });
    }
    let doc: Versioned<T> = serde_json::from_str(text)?;
    Ok(doc.data)
}

pub fn read_versioned<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    parse_versioned(&fs::read_to_string(path)?, schema)
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema: String,
    pub prompts: usize,
    pub responses: usize,
    pub mode: PairMode,
    /// Free-form description of how the data was built.
    pub strategy: serde_json::Value,
    pub seed: u64,
    pub tier_ranks: Option<[usize; 5]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    prompt: usize,
    chosen: usize,
    rejected: usize,
    weight: f64,
}

pub fn dataset_to_jsonl(
    set: &PreferencePairSet,
    strategy: serde_json::Value,
    seed: u64,
    tier_ranks: Option<[usize; 5]>,
) -> Result<String> {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        prompts: set.prompts(),
        responses: set.responses(),
        mode: set.mode(),
        strategy,
        seed,
        tier_ranks,
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for it in set.items() {
        let rec = ItemRecord {
            prompt: it.prompt,
            chosen: it.chosen,
            rejected: it.rejected,
            weight: it.weight,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn dataset_from_jsonl(reader: impl BufRead) -> Result<(DatasetHeader, PreferencePairSet)> {
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("dataset file is empty".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.schema != DATASET_SCHEMA {
        return Err(Error::Schema {
            expected: DATASET_SCHEMA.to_string(),
            found: header.schema,
        });
    }
    let mut items = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ItemRecord = serde_json::from_str(&line)?;
        items.push(PairItem {
            prompt: r.prompt,
            chosen: r.chosen,
            rejected: r.rejected,
            weight: r.weight,
        });
    }
    let set = PreferencePairSet::new(header.prompts, header.responses, header.mode, items)?;
    Ok((header, set))
}
