//! Weighted, asymmetric item-to-item similarity.
//!
//! Every ordered pair of distinct positions (p, q) in a session contributes
//! `w_dist * w_dire * w_pos / (|x|^a * |y|^b)` to `sim(x, y)`, where x is the
//! item at p, y the item at q, and |.| the global occurrence count. Session
//! labels join the sequence as the final position so the last-click boost
//! lands on the true next item.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateEntry, CandidateList, Source};
use crate::data::Session;
use crate::error::{Error, Result};

/// Weights and normalization exponents for pair accumulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairWeightConfig {
    /// Exponent of the position-distance decay 1/((|p-q|+1)^e).
    pub dist_exponent: f64,
    /// Weight of backward pairs (item seen after the target).
    pub dire_backward: f64,
    /// Boost applied when the target sits at the final session position.
    pub pos_last_boost: f64,
    /// Popularity exponent of the anchor item.
    pub pop_exp_x: f64,
    /// Popularity exponent of the target item.
    pub pop_exp_y: f64,
    /// Whether session labels join the sequence as its final position.
    pub include_labels: bool,
    /// Keep at most this many entries per row after accumulation.
    pub row_cap: usize,
}

impl Default for PairWeightConfig {
    fn default() -> Self {
        PairWeightConfig {
            dist_exponent: 2.0,
            dire_backward: 1.0 / 3.0,
            pos_last_boost: 1.8,
            pop_exp_x: 0.8,
            pop_exp_y: 0.15,
            include_labels: true,
            row_cap: 200,
        }
    }
}

impl PairWeightConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dist_exponent", self.dist_exponent),
            ("dire_backward", self.dire_backward),
            ("pos_last_boost", self.pos_last_boost),
            ("pop_exp_x", self.pop_exp_x),
            ("pop_exp_y", self.pop_exp_y),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite")));
            }
        }
        for (name, v) in [("pop_exp_x", self.pop_exp_x), ("pop_exp_y", self.pop_exp_y)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Position-distance weight; symmetric in its arguments.
    pub fn w_dist(&self, pos_x: usize, pos_y: usize) -> f64 {
        let d = pos_x.abs_diff(pos_y) as f64;
        1.0 / (d + 1.0).powf(self.dist_exponent)
    }

    /// Direction weight: forward pairs count fully, backward pairs damped.
    pub fn w_dire(&self, pos_x: usize, pos_y: usize) -> Result<f64> {
        match pos_x.cmp(&pos_y) {
            std::cmp::Ordering::Less => Ok(1.0),
            std::cmp::Ordering::Greater => Ok(self.dire_backward),
            std::cmp::Ordering::Equal => Err(Error::InvalidArgument(
                "w_dire requires distinct positions".into(),
            )),
        }
    }

    /// Positional weight of the target: boosted at the final position.
    pub fn w_pos(&self, pos_y: usize, session_len: usize) -> Result<f64> {
        if pos_y >= session_len {
            return Err(Error::InvalidArgument(format!(
                "pos_y {pos_y} out of range for session length {session_len}"
            )));
        }
        if pos_y == session_len - 1 {
            Ok(self.pos_last_boost)
        } else {
            Ok(1.0)
        }
    }
}

/// Sparse asymmetric item-to-item similarity store plus the popularity counts
/// it was normalized with.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimMatrix {
    pub rows: BTreeMap<String, BTreeMap<String, f64>>,
    pub popularity: BTreeMap<String, u64>,
}

impl SimMatrix {
    pub fn sim(&self, x: &str, y: &str) -> f64 {
        self.rows
            .get(x)
            .and_then(|r| r.get(y))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn popularity_of(&self, item: &str) -> u64 {
        self.popularity.get(item).copied().unwrap_or(0)
    }

    pub fn entry_count(&self) -> usize {
        self.rows.values().map(|r| r.len()).sum()
    }

    /// Writes the matrix as a sorted `x\ty\tscore` TSV and the popularity
    /// counts as `item\tcount`. Scores use the shortest representation that
    /// round-trips bit-exactly.
    pub fn save(&self, sim_path: &Path, pop_path: &Path) -> Result<()> {
        let spath = sim_path.display().to_string();
        let f = std::fs::File::create(sim_path).map_err(|e| Error::io(spath.clone(), e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "x\ty\tscore").map_err(|e| Error::io(spath.clone(), e))?;
        for (x, row) in &self.rows {
            for (y, s) in row {
                writeln!(w, "{x}\t{y}\t{s}").map_err(|e| Error::io(spath.clone(), e))?;
            }
        }
        w.flush().map_err(|e| Error::io(spath, e))?;

        let ppath = pop_path.display().to_string();
        let f = std::fs::File::create(pop_path).map_err(|e| Error::io(ppath.clone(), e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "item\tcount").map_err(|e| Error::io(ppath.clone(), e))?;
        for (item, c) in &self.popularity {
            writeln!(w, "{item}\t{c}").map_err(|e| Error::io(ppath.clone(), e))?;
        }
        w.flush().map_err(|e| Error::io(ppath, e))?;
        Ok(())
    }

    pub fn load(sim_path: &Path, pop_path: &Path) -> Result<Self> {
        let mut matrix = SimMatrix::default();
        let spath = sim_path.display().to_string();
        let f = std::fs::File::open(sim_path)
            .map_err(|_| Error::MissingArtifact(sim_path.to_path_buf()))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(spath.clone(), e))?;
            if i == 0 {
                continue; // header
            }
            let mut parts = line.split('\t');
            let (x, y, s) = match (parts.next(), parts.next(), parts.next()) {
                (Some(x), Some(y), Some(s)) => (x, y, s),
                _ => {
                    return Err(Error::Parse {
                        path: spath.clone(),
                        line: i as u64 + 1,
                        msg: "expected 3 tab-separated columns".into(),
                    })
                }
            };
            let score: f64 = s.parse().map_err(|_| Error::Parse {
                path: spath.clone(),
                line: i as u64 + 1,
                msg: format!("bad score {s:?}"),
            })?;
            matrix
                .rows
                .entry(x.to_string())
                .or_default()
                .insert(y.to_string(), score);
        }
        let ppath = pop_path.display().to_string();
        let f = std::fs::File::open(pop_path)
            .map_err(|_| Error::MissingArtifact(pop_path.to_path_buf()))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(ppath.clone(), e))?;
            if i == 0 {
                continue;
            }
            let mut parts = line.split('\t');
            let (item, c) = match (parts.next(), parts.next()) {
                (Some(item), Some(c)) => (item, c),
                _ => {
                    return Err(Error::Parse {
                        path: ppath.clone(),
                        line: i as u64 + 1,
                        msg: "expected 2 tab-separated columns".into(),
                    })
                }
            };
            let count: u64 = c.parse().map_err(|_| Error::Parse {
                path: ppath.clone(),
                line: i as u64 + 1,
                msg: format!("bad count {c:?}"),
            })?;
            matrix.popularity.insert(item.to_string(), count);
        }
        Ok(matrix)
    }
}

/// Total occurrence count of every item across session item lists and labels.
pub fn popularity_counts(sessions: &[Session]) -> BTreeMap<String, u64> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for s in sessions {
        for item in &s.items {
            *counts.entry(item.clone()).or_insert(0) += 1;
        }
        if let Some(label) = &s.label {
            *counts.entry(label.clone()).or_insert(0) += 1;
        }
    }
    counts
}

fn pairing_sequence<'a>(session: &'a Session, include_labels: bool) -> Vec<&'a str> {
    let mut seq: Vec<&str> = session.items.iter().map(|s| s.as_str()).collect();
    if include_labels {
        if let Some(label) = &session.label {
            seq.push(label.as_str());
        }
    }
    seq
}

/// Builds the similarity matrix by accumulating every ordered pair of
/// distinct positions in every session.
pub fn build_similarity(sessions: &[Session], config: &PairWeightConfig) -> SimMatrix {
    let popularity = popularity_counts(sessions);
    let mut pop_denom: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (item, &c) in &popularity {
        let c = c as f64;
        pop_denom.insert(item, (c.powf(config.pop_exp_x), c.powf(config.pop_exp_y)));
    }

    let mut rows: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for session in sessions {
        let seq = pairing_sequence(session, config.include_labels);
        let len = seq.len();
        if len < 2 {
            continue;
        }
        for p in 0..len {
            let x = seq[p];
            let pop_x = pop_denom[x].0;
            let row = rows.entry(x.to_string()).or_default();
            for q in 0..len {
                if p == q {
                    continue;
                }
                let y = seq[q];
                let w_dist = config.w_dist(p, q);
                let w_dire = if p < q { 1.0 } else { config.dire_backward };
                let w_pos = if q == len - 1 {
                    config.pos_last_boost
                } else {
                    1.0
                };
                let term = w_dist * w_dire * w_pos / (pop_x * pop_denom[y].1);
                *row.entry(y.to_string()).or_insert(0.0) += term;
            }
        }
    }

    for row in rows.values_mut() {
        if row.len() > config.row_cap {
            let mut entries: Vec<(String, f64)> =
                row.iter().map(|(k, v)| (k.clone(), *v)).collect();
            entries.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            entries.truncate(config.row_cap);
            *row = entries.into_iter().collect();
        }
    }

    SimMatrix { rows, popularity }
}

/// Scores candidates for a session by recency-weighted similarity sums.
/// Items already in the session are excluded; ties break by descending
/// popularity then item id.
pub fn retrieve_itemcf(
    session: &Session,
    matrix: &SimMatrix,
    top_k: usize,
) -> Result<CandidateList> {
    if top_k < 1 {
        return Err(Error::InvalidArgument("top_k must be >= 1".into()));
    }
    let seen: HashSet<&str> = session.items.iter().map(|s| s.as_str()).collect();
    let len = session.items.len();
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    for (p, item) in session.items.iter().enumerate() {
        if let Some(row) = matrix.rows.get(item.as_str()) {
            let recency = 1.0 / (len - p) as f64;
            for (cand, sim) in row {
                if seen.contains(cand.as_str()) {
                    continue;
                }
                *scores.entry(cand.as_str()).or_insert(0.0) += sim * recency;
            }
        }
    }
    let mut ranked: Vec<(&str, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| matrix.popularity_of(b.0).cmp(&matrix.popularity_of(a.0)))
            .then_with(|| a.0.cmp(b.0))
    });
    ranked.truncate(top_k);
    Ok(CandidateList {
        session_id: session.session_id.clone(),
        source: Source::Itemcf,
        entries: ranked
            .into_iter()
            .map(|(item_id, score)| CandidateEntry {
                item_id: item_id.to_string(),
                score,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Session;

    fn sess(id: &str, items: &[&str], label: Option<&str>) -> Session {
        Session::new(
            id,
            "UK",
            items.iter().map(|s| s.to_string()).collect(),
            label.map(|s| s.to_string()),
        )
    }

    /// Independent brute-force construction: materializes every
    /// (session, position-pair) term separately before summing.
    pub(crate) fn brute_force_similarity(
        sessions: &[Session],
        config: &PairWeightConfig,
    ) -> SimMatrix {
        let popularity = popularity_counts(sessions);
        let mut terms: Vec<(String, String, f64)> = Vec::new();
        for session in sessions {
            let mut seq: Vec<String> = session.items.clone();
            if config.include_labels {
                if let Some(l) = &session.label {
                    seq.push(l.clone());
                }
            }
            let len = seq.len();
            for p in 0..len {
                for q in 0..len {
                    if p == q {
                        continue;
                    }
                    let x = &seq[p];
                    let y = &seq[q];
                    let w_dist = config.w_dist(p, q);
                    let w_dire = config.w_dire(p, q).unwrap();
                    let w_pos = config.w_pos(q, len).unwrap();
                    let denom = (popularity[x] as f64).powf(config.pop_exp_x)
                        * (popularity[y] as f64).powf(config.pop_exp_y);
                    terms.push((x.clone(), y.clone(), w_dist * w_dire * w_pos / denom));
                }
            }
        }
        let mut rows: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (x, y, t) in terms {
            *rows.entry(x).or_default().entry(y).or_insert(0.0) += t;
        }
        SimMatrix { rows, popularity }
    }

    #[test]
    fn w_dist_hand_values() {
        let cfg = PairWeightConfig::default();
        assert_eq!(cfg.w_dist(0, 1), 0.25);
        assert_eq!(cfg.w_dist(0, 0), 1.0);
        assert_eq!(cfg.w_dist(0, 3), 0.0625);
        // symmetry
        for p in 0..5 {
            for q in 0..5 {
                assert_eq!(cfg.w_dist(p, q), cfg.w_dist(q, p));
            }
        }
    }

    #[test]
    fn w_dire_forward_backward() {
        let cfg = PairWeightConfig::default();
        assert_eq!(cfg.w_dire(0, 2).unwrap(), 1.0);
        assert!((cfg.w_dire(2, 0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(cfg.w_dire(1, 1).is_err());
    }

    #[test]
    fn w_pos_last_boost() {
        let cfg = PairWeightConfig::default();
        assert_eq!(cfg.w_pos(3, 4).unwrap(), 1.8);
        assert_eq!(cfg.w_pos(1, 4).unwrap(), 1.0);
        assert!(cfg.w_pos(4, 4).is_err());
    }

    #[test]
    fn popularity_counts_items_and_labels() {
        let sessions = vec![sess("s1", &["a", "b"], Some("c")), sess("s2", &["a"], Some("c"))];
        let counts = popularity_counts(&sessions);
        assert_eq!(counts["a"], 2);
        assert_eq!(counts["b"], 1);
        assert_eq!(counts["c"], 2);
    }

    #[test]
    fn popularity_single_unlabeled() {
        let counts = popularity_counts(&[sess("s", &["a"], None)]);
        assert_eq!(counts.len(), 1);
        assert_eq!(counts["a"], 1);
    }

    #[test]
    fn worked_example_single_session() {
        let cfg = PairWeightConfig::default();
        let m = build_similarity(&[sess("s", &["a", "b"], None)], &cfg);
        assert!((m.sim("a", "b") - 0.45).abs() < 1e-12);
        assert!((m.sim("b", "a") - 0.25 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn worked_example_two_copies() {
        let cfg = PairWeightConfig::default();
        let sessions = vec![sess("s1", &["a", "b"], None), sess("s2", &["a", "b"], None)];
        let m = build_similarity(&sessions, &cfg);
        let expected = 2.0 * 0.45 / (2f64.powf(0.8) * 2f64.powf(0.15));
        assert!((m.sim("a", "b") - expected).abs() < 1e-12);
        let oracle = brute_force_similarity(&sessions, &cfg);
        assert!((m.sim("a", "b") - oracle.sim("a", "b")).abs() < 1e-12);
    }

    #[test]
    fn empty_sessions_give_empty_matrix() {
        let m = build_similarity(&[], &PairWeightConfig::default());
        assert!(m.rows.is_empty());
    }

    #[test]
    fn labels_join_as_final_position() {
        let cfg = PairWeightConfig::default();
        // [a] with label b pairs exactly like [a, b] without one
        let with_label = build_similarity(&[sess("s", &["a"], Some("b"))], &cfg);
        let inline = build_similarity(&[sess("s", &["a", "b"], None)], &cfg);
        assert_eq!(with_label, inline);
        // and the toggle removes label pairing entirely
        let cfg_off = PairWeightConfig {
            include_labels: false,
            ..Default::default()
        };
        let m = build_similarity(&[sess("s", &["a"], Some("b"))], &cfg_off);
        assert!(m.rows.is_empty());
    }

    #[test]
    fn matches_brute_force_on_random_sessions() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let cfg = PairWeightConfig::default();
        for case in 0..20 {
            let n_items = rng.gen_range(2..=10);
            let n_sessions = rng.gen_range(1..=20);
            let sessions: Vec<Session> = (0..n_sessions)
                .map(|i| {
                    let len = rng.gen_range(1..=6);
                    let items: Vec<&'static str> = (0..len)
                        .map(|_| {
                            ["i0", "i1", "i2", "i3", "i4", "i5", "i6", "i7", "i8", "i9"]
                                [rng.gen_range(0..n_items)]
                        })
                        .collect();
                    let label = if rng.gen_bool(0.5) {
                        Some(
                            ["i0", "i1", "i2", "i3", "i4", "i5", "i6", "i7", "i8", "i9"]
                                [rng.gen_range(0..n_items)],
                        )
                    } else {
                        None
                    };
                    sess(&format!("s{case}_{i}"), &items, label)
                })
                .collect();
            let fast = build_similarity(&sessions, &cfg);
            let oracle = brute_force_similarity(&sessions, &cfg);
            assert_eq!(fast.rows.keys().collect::<Vec<_>>(), oracle.rows.keys().collect::<Vec<_>>());
            for (x, row) in &oracle.rows {
                for (y, s) in row {
                    assert!(
                        (fast.sim(x, y) - s).abs() < 1e-12,
                        "case {case}: sim({x},{y}) {} vs oracle {}",
                        fast.sim(x, y),
                        s
                    );
                }
            }
        }
    }

    #[test]
    fn popularity_monotonicity() {
        // doubling an item's count (extra singleton sessions) shrinks every
        // similarity entry it participates in
        let cfg = PairWeightConfig::default();
        let base = vec![sess("s", &["a", "b"], None)];
        let mut inflated = base.clone();
        inflated.push(sess("x", &["a"], None));
        let m0 = build_similarity(&base, &cfg);
        let m1 = build_similarity(&inflated, &cfg);
        assert!(m1.sim("a", "b") < m0.sim("a", "b"));
        assert!(m1.sim("b", "a") < m0.sim("b", "a"));
    }

    #[test]
    fn row_cap_prunes_after_accumulation() {
        let cfg = PairWeightConfig {
            row_cap: 2,
            ..Default::default()
        };
        let m = build_similarity(&[sess("s", &["a", "b", "c", "d"], None)], &cfg);
        assert!(m.rows["a"].len() <= 2);
        // kept entries are the largest ones
        let full = build_similarity(
            &[sess("s", &["a", "b", "c", "d"], None)],
            &PairWeightConfig::default(),
        );
        let mut all: Vec<(&String, &f64)> = full.rows["a"].iter().collect();
        all.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        for (kept, _) in &m.rows["a"] {
            assert!(all[..2].iter().any(|(id, _)| *id == kept));
        }
    }

    #[test]
    fn retrieve_single_row() {
        let m = build_similarity(&[sess("t", &["a", "b"], None)], &PairWeightConfig::default());
        let q = sess("q", &["a"], None);
        let out = retrieve_itemcf(&q, &m, 10).unwrap();
        assert_eq!(out.entries.len(), 1);
        assert_eq!(out.entries[0].item_id, "b");
        assert!((out.entries[0].score - 0.45).abs() < 1e-12);
    }

    #[test]
    fn retrieve_excludes_seen_items() {
        let m = build_similarity(
            &[sess("t", &["a", "b", "c"], None)],
            &PairWeightConfig::default(),
        );
        let q = sess("q", &["a", "b"], None);
        let out = retrieve_itemcf(&q, &m, 10).unwrap();
        assert!(out.item_ids().all(|id| id != "a" && id != "b"));
    }

    #[test]
    fn retrieve_top_k_argmax() {
        let mut m = SimMatrix::default();
        m.rows.insert(
            "a".into(),
            [("b".to_string(), 0.4), ("c".to_string(), 0.9)]
                .into_iter()
                .collect(),
        );
        let q = sess("q", &["a"], None);
        let out = retrieve_itemcf(&q, &m, 1).unwrap();
        assert_eq!(out.entries.len(), 1);
        assert_eq!(out.entries[0].item_id, "c");
        assert!((out.entries[0].score - 0.9).abs() < 1e-15);
    }

    #[test]
    fn retrieve_unknown_session_items_empty() {
        let m = build_similarity(&[sess("t", &["a", "b"], None)], &PairWeightConfig::default());
        let q = sess("q", &["zzz"], None);
        let out = retrieve_itemcf(&q, &m, 5).unwrap();
        assert!(out.entries.is_empty());
    }

    #[test]
    fn retrieve_recency_weights_sum() {
        // session [a, b]: position weights 1/2 and 1
        let mut m = SimMatrix::default();
        m.rows
            .insert("a".into(), [("c".to_string(), 0.4)].into_iter().collect());
        m.rows
            .insert("b".into(), [("c".to_string(), 0.2)].into_iter().collect());
        let q = sess("q", &["a", "b"], None);
        let out = retrieve_itemcf(&q, &m, 5).unwrap();
        assert!((out.entries[0].score - (0.4 * 0.5 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn retrieve_tiebreak_popularity_then_id() {
        let mut m = SimMatrix::default();
        m.rows.insert(
            "a".into(),
            [
                ("b".to_string(), 0.5),
                ("c".to_string(), 0.5),
                ("d".to_string(), 0.5),
            ]
            .into_iter()
            .collect(),
        );
        m.popularity.insert("c".into(), 10);
        m.popularity.insert("b".into(), 1);
        m.popularity.insert("d".into(), 1);
        let q = sess("q", &["a"], None);
        let out = retrieve_itemcf(&q, &m, 3).unwrap();
        let ids: Vec<&str> = out.item_ids().collect();
        assert_eq!(ids, vec!["c", "b", "d"]);
    }

    #[test]
    fn matrix_tsv_roundtrip_is_bit_exact() {
        let sessions = vec![
            sess("s1", &["a", "b", "c"], Some("d")),
            sess("s2", &["b", "a"], None),
        ];
        let m = build_similarity(&sessions, &PairWeightConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let sim = dir.path().join("sim.tsv");
        let pop = dir.path().join("pop.tsv");
        m.save(&sim, &pop).unwrap();
        let loaded = SimMatrix::load(&sim, &pop).unwrap();
        assert_eq!(loaded, m);
        // saving again produces identical bytes
        let sim2 = dir.path().join("sim2.tsv");
        let pop2 = dir.path().join("pop2.tsv");
        loaded.save(&sim2, &pop2).unwrap();
        assert_eq!(
            std::fs::read(&sim).unwrap(),
            std::fs::read(&sim2).unwrap()
        );
        assert_eq!(
            std::fs::read(&pop).unwrap(),
            std::fs::read(&pop2).unwrap()
        );
    }
}
