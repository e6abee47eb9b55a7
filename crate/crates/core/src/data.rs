//! Sessions, catalog records, CSV ingestion, prefix augmentation and
//! cross-validation splitting.
//!
//! File formats:
//! - sessions CSV: header `session_id,locale,items,label`; `items` is one
//!   space-separated field; `label` may be empty.
//! - catalog CSV: header
//!   `item_id,locale,title,price,brand,color,size,model,material,author,desc`.
//! - fold assignments: JSON `{ "fold_count": k, "assignment": { id: fold } }`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Catalog record for one item in one locale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub locale: String,
    pub title: String,
    pub price: Option<f64>,
    pub brand: Option<String>,
    pub color: Option<String>,
    pub size: Option<String>,
    pub model: Option<String>,
    pub material: Option<String>,
    pub author: Option<String>,
    pub desc: Option<String>,
}

/// One user session: an ordered click sequence with an optional ground-truth
/// next item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub locale: String,
    pub items: Vec<String>,
    pub label: Option<String>,
}

impl Session {
    pub fn new(
        session_id: impl Into<String>,
        locale: impl Into<String>,
        items: Vec<String>,
        label: Option<String>,
    ) -> Self {
        Session {
            session_id: session_id.into(),
            locale: locale.into(),
            items,
            label,
        }
    }
}

/// Suffix that marks prefix-augmented sessions: `<parent_id>#aug<prefix_len>`.
const AUG_SEP: &str = "#aug";

/// Returns the parent id and prefix length if `session_id` names an augmented
/// child, `None` for original sessions.
pub fn augmented_parent(session_id: &str) -> Option<(&str, usize)> {
    let idx = session_id.rfind(AUG_SEP)?;
    let (parent, rest) = session_id.split_at(idx);
    let digits = &rest[AUG_SEP.len()..];
    if parent.is_empty() || digits.is_empty() {
        return None;
    }
    digits.parse::<usize>().ok().map(|k| (parent, k))
}

pub fn is_augmented(session_id: &str) -> bool {
    augmented_parent(session_id).is_some()
}

/// Immutable item catalog with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: Vec<ItemMeta>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    pub fn from_items(items: Vec<ItemMeta>) -> Result<Self> {
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for m in &items {
            if m.item_id.is_empty() {
                return Err(Error::Invariant("empty item_id in catalog".into()));
            }
            if let Some(p) = m.price {
                if !(p >= 0.0) {
                    return Err(Error::Invariant(format!(
                        "negative price for item {}",
                        m.item_id
                    )));
                }
            }
            if !seen.insert((m.item_id.clone(), m.locale.clone())) {
                return Err(Error::DuplicateKey {
                    path: "<catalog>".into(),
                    key: format!("{}/{}", m.item_id, m.locale),
                });
            }
        }
        // Cross-locale id collisions resolve to the lexicographically smallest
        // locale so lookups stay deterministic.
        let mut by_id: HashMap<String, usize> = HashMap::new();
        for (i, m) in items.iter().enumerate() {
            match by_id.get(&m.item_id) {
                Some(&j) if items[j].locale <= m.locale => {}
                _ => {
                    by_id.insert(m.item_id.clone(), i);
                }
            }
        }
        Ok(Catalog { items, by_id })
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemMeta> {
        self.by_id.get(item_id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.by_id.contains_key(item_id)
    }

    pub fn items(&self) -> &[ItemMeta] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item ids in sorted order; the canonical iteration order for anything
    /// that must be reproducible.
    pub fn sorted_item_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.items.iter().map(|m| m.item_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

fn opt_cell(s: &str) -> Option<String> {
    if s.is_empty() {
        None
    } else {
        Some(s.to_string())
    }
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Loads the catalog CSV. Missing optional cells become `None`; duplicate
/// (item_id, locale) pairs are rejected.
pub fn load_catalog(path: &Path) -> Result<Catalog> {
    let pstr = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Parse {
            path: pstr.clone(),
            line: 0,
            msg: e.to_string(),
        },
    })?;
    let mut items = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: pstr.clone(),
            line: e
                .position()
                .map(|p| p.line())
                .unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record_line(&rec);
        if rec.len() != 11 {
            return Err(Error::Parse {
                path: pstr.clone(),
                line,
                msg: format!("expected 11 columns, got {}", rec.len()),
            });
        }
        let item_id = rec[0].to_string();
        if item_id.is_empty() {
            return Err(Error::Parse {
                path: pstr.clone(),
                line,
                msg: "empty item_id".into(),
            });
        }
        let locale = rec[1].to_string();
        if !seen.insert((item_id.clone(), locale.clone())) {
            return Err(Error::DuplicateKey {
                path: pstr.clone(),
                key: format!("{}/{}", item_id, locale),
            });
        }
        let price = if rec[3].is_empty() {
            None
        } else {
            let p: f64 = rec[3].parse().map_err(|_| Error::Parse {
                path: pstr.clone(),
                line,
                msg: format!("bad price {:?}", &rec[3]),
            })?;
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::Parse {
                    path: pstr.clone(),
                    line,
                    msg: format!("price must be >= 0, got {}", p),
                });
            }
            Some(p)
        };
        items.push(ItemMeta {
            item_id,
            locale,
            title: rec[2].to_string(),
            price,
            brand: opt_cell(&rec[4]),
            color: opt_cell(&rec[5]),
            size: opt_cell(&rec[6]),
            model: opt_cell(&rec[7]),
            material: opt_cell(&rec[8]),
            author: opt_cell(&rec[9]),
            desc: opt_cell(&rec[10]),
        });
    }
    Catalog::from_items(items)
}

/// Loads the sessions CSV. Item order is preserved exactly; the label column
/// may be empty or missing; an empty items field is a parse error.
pub fn load_sessions(path: &Path) -> Result<Vec<Session>> {
    let pstr = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Parse {
                path: pstr.clone(),
                line: 0,
                msg: e.to_string(),
            },
        })?;
    let mut sessions = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: pstr.clone(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record_line(&rec);
        if rec.len() < 3 {
            return Err(Error::Parse {
                path: pstr.clone(),
                line,
                msg: format!("expected at least 3 columns, got {}", rec.len()),
            });
        }
        let items: Vec<String> = rec[2]
            .split_whitespace()
            .map(|s| s.to_string())
            .collect();
        if items.is_empty() {
            return Err(Error::Parse {
                path: pstr.clone(),
                line,
                msg: "empty items field".into(),
            });
        }
        let label = rec.get(3).and_then(|s| opt_cell(s));
        sessions.push(Session {
            session_id: rec[0].to_string(),
            locale: rec[1].to_string(),
            items,
            label,
        });
    }
    Ok(sessions)
}

pub fn save_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    let pstr = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{pstr}: {e}")))?;
    w.write_record(["session_id", "locale", "items", "label"])
        .map_err(|e| Error::Config(format!("{pstr}: {e}")))?;
    for s in sessions {
        w.write_record([
            s.session_id.as_str(),
            s.locale.as_str(),
            &s.items.join(" "),
            s.label.as_deref().unwrap_or(""),
        ])
        .map_err(|e| Error::Config(format!("{pstr}: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(pstr, e))?;
    Ok(())
}

pub fn save_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    let pstr = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{pstr}: {e}")))?;
    w.write_record([
        "item_id", "locale", "title", "price", "brand", "color", "size", "model", "material",
        "author", "desc",
    ])
    .map_err(|e| Error::Config(format!("{pstr}: {e}")))?;
    for m in catalog.items() {
        let price = m.price.map(|p| p.to_string()).unwrap_or_default();
        w.write_record([
            m.item_id.as_str(),
            m.locale.as_str(),
            m.title.as_str(),
            &price,
            m.brand.as_deref().unwrap_or(""),
            m.color.as_deref().unwrap_or(""),
            m.size.as_deref().unwrap_or(""),
            m.model.as_deref().unwrap_or(""),
            m.material.as_deref().unwrap_or(""),
            m.author.as_deref().unwrap_or(""),
            m.desc.as_deref().unwrap_or(""),
        ])
        .map_err(|e| Error::Config(format!("{pstr}: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(pstr, e))?;
    Ok(())
}

/// Expands each session into training pairs: every prefix of length
/// `min_prefix..n` predicts its successor, and the full sequence predicts the
/// session label when one exists. Child ids carry the prefix length.
pub fn augment_prefixes(sessions: &[Session], min_prefix: usize) -> Result<Vec<Session>> {
    if min_prefix < 1 {
        return Err(Error::InvalidArgument("min_prefix must be >= 1".into()));
    }
    let mut out = Vec::new();
    for s in sessions {
        let n = s.items.len();
        for k in min_prefix..n {
            out.push(Session {
                session_id: format!("{}{}{}", s.session_id, AUG_SEP, k),
                locale: s.locale.clone(),
                items: s.items[..k].to_vec(),
                label: Some(s.items[k].clone()),
            });
        }
        if let Some(label) = &s.label {
            if n >= min_prefix {
                out.push(Session {
                    session_id: format!("{}{}{}", s.session_id, AUG_SEP, n),
                    locale: s.locale.clone(),
                    items: s.items.clone(),
                    label: Some(label.clone()),
                });
            }
        }
    }
    Ok(out)
}

/// Assignment of sessions to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_count: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, session_id: &str) -> Option<usize> {
        self.assignment.get(session_id).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pstr = path.display().to_string();
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(pstr.clone(), e))?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize folds: {e}")))?;
        f.write_all(json.as_bytes())
            .map_err(|e| Error::io(pstr, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pstr = path.display().to_string();
        let data = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        serde_json::from_str(&data).map_err(|e| Error::Parse {
            path: pstr,
            line: 0,
            msg: e.to_string(),
        })
    }
}

/// Splits sessions into `k` folds. Only original (non-augmented) sessions are
/// balanced across folds; augmented children inherit their parent's fold.
/// Deterministic for a given seed regardless of input order.
pub fn kfold_split(sessions: &[Session], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument("fold count must be >= 2".into()));
    }
    let mut original_ids: Vec<&str> = sessions
        .iter()
        .filter(|s| !is_augmented(&s.session_id))
        .map(|s| s.session_id.as_str())
        .collect();
    original_ids.sort();
    original_ids.dedup();
    if k > original_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "fold count {} exceeds number of original sessions {}",
            k,
            original_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    original_ids.shuffle(&mut rng);
    let mut assignment: BTreeMap<String, usize> = BTreeMap::new();
    for (i, id) in original_ids.iter().enumerate() {
        assignment.insert(id.to_string(), i % k);
    }
    for s in sessions {
        if let Some((parent, _)) = augmented_parent(&s.session_id) {
            let fold = *assignment.get(parent).ok_or_else(|| {
                Error::Invariant(format!(
                    "augmented session {} has no parent {} in the collection",
                    s.session_id, parent
                ))
            })?;
            assignment.insert(s.session_id.clone(), fold);
        }
    }
    Ok(FoldAssignment {
        fold_count: k,
        assignment,
    })
}
