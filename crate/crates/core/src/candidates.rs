//! Scored candidate lists — the common output of every retriever and the
//! input/output of fusion and reranking. Persisted as JSONL, one list per
//! line.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which stage produced a candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Itemcf,
    Gru,
    Text,
    Fused,
    Reranked,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Source::Itemcf => "itemcf",
            Source::Gru => "gru",
            Source::Text => "text",
            Source::Fused => "fused",
            Source::Reranked => "reranked",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itemcf" => Ok(Source::Itemcf),
            "gru" => Ok(Source::Gru),
            "text" => Ok(Source::Text),
            "fused" => Ok(Source::Fused),
            "reranked" => Ok(Source::Reranked),
            other => Err(Error::InvalidArgument(format!(
                "unknown candidate source {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub item_id: String,
    pub score: f64,
}

/// Per-session scored candidates, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub session_id: String,
    pub source: Source,
    pub entries: Vec<CandidateEntry>,
}

impl CandidateList {
    pub fn new(session_id: impl Into<String>, source: Source) -> Self {
        CandidateList {
            session_id: session_id.into(),
            source,
            entries: Vec::new(),
        }
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }

    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.item_id == item_id)
    }

    /// Checks the list invariants: descending scores, no duplicates, no item
    /// from `seen`.
    pub fn validate(&self, seen: &HashSet<&str>) -> Result<()> {
        let mut ids = HashSet::new();
        let mut prev = f64::INFINITY;
        for e in &self.entries {
            if e.score > prev {
                return Err(Error::Invariant(format!(
                    "candidate list {} not sorted by descending score",
                    self.session_id
                )));
            }
            prev = e.score;
            if !ids.insert(e.item_id.as_str()) {
                return Err(Error::Invariant(format!(
                    "duplicate candidate {} in list {}",
                    e.item_id, self.session_id
                )));
            }
            if seen.contains(e.item_id.as_str()) {
                return Err(Error::Invariant(format!(
                    "session item {} leaked into candidates of {}",
                    e.item_id, self.session_id
                )));
            }
        }
        Ok(())
    }
}

pub fn save_jsonl(path: &Path, lists: &[CandidateList]) -> Result<()> {
    let pstr = path.display().to_string();
    let f = std::fs::File::create(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut w = BufWriter::new(f);
    for list in lists {
        let line = serde_json::to_string(list)
            .map_err(|e| Error::Config(format!("serialize candidates: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(pstr.clone(), e))?;
    }
    w.flush().map_err(|e| Error::io(pstr, e))?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<CandidateList>> {
    let pstr = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(pstr.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let list: CandidateList = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: pstr.clone(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push(list);
    }
    Ok(out)
}
