//! Crowdsourced join operators for entity resolution, built only from
//! CrowdData steps so they inherit caching and lineage.
//!
//! * [`simple_join`] asks the crowd about every candidate pair.
//! * [`filtered_join`] prunes pairs whose machine similarity is below a
//!   threshold and asks about the rest.
//! * [`transitive_join`] asks about pairs one at a time and skips any pair
//!   whose verdict already follows from earlier answers
//!   (a=b, b=c => a=c; a=b, b!=c => a!=c).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canonical::fingerprint;
use crate::context::CrowdContext;
use crate::crowddata::CrowdData;
use crate::error::{Error, Result};
use crate::presenter::{AnswerSchema, Presenter, PresenterError};

pub const MATCH: &str = "match";
pub const NONMATCH: &str = "nonmatch";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Match,
    Nonmatch,
}

impl Verdict {
    fn from_label(label: &str) -> Self {
        if label == MATCH {
            Verdict::Match
        } else {
            Verdict::Nonmatch
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Crowd,
    Deduced,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTask {
    pub left_id: u64,
    pub right_id: u64,
    pub pair_fingerprint: String,
    pub verdict: Option<Verdict>,
    pub source: PairSource,
}

/// A crowd answer that contradicted what earlier answers implied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inconsistency {
    pub pair: (u64, u64),
    pub crowd: Verdict,
    pub deduced: Verdict,
    /// Older crowd edges discarded to restore a consistent closure.
    pub dropped: Vec<(u64, u64, Verdict)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinOutcome {
    pub pairs: Vec<PairTask>,
    /// Pairs sent to the crowd.
    pub published: usize,
    pub inconsistencies: Vec<Inconsistency>,
}

impl JoinOutcome {
    pub fn matches(&self) -> impl Iterator<Item = &PairTask> {
        self.pairs
            .iter()
            .filter(|p| p.verdict == Some(Verdict::Match))
    }

    pub fn matched_ids(&self) -> BTreeSet<(u64, u64)> {
        self.matches().map(|p| (p.left_id, p.right_id)).collect()
    }

    pub fn verdicts(&self) -> BTreeMap<(u64, u64), Verdict> {
        self.pairs
            .iter()
            .filter_map(|p| Some(((p.left_id, p.right_id), p.verdict?)))
            .collect()
    }
}

/// The object published for a candidate pair.
pub fn pair_object(left: &Value, right: &Value) -> Value {
    json!({ "left": left, "right": right })
}

pub fn pair_fingerprint(left: &Value, right: &Value) -> String {
    fingerprint(&pair_object(left, right))
}

/// Text of a record for similarity purposes: strings as-is, objects as their
/// field values in key order, other values as JSON.
pub fn record_text(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            keys.iter()
                .map(|k| record_text(&map[*k]))
                .collect::<Vec<_>>()
                .join(" ")
        }
        Value::Array(items) => items.iter().map(record_text).collect::<Vec<_>>().join(" "),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Jaccard similarity of lowercase whitespace-delimited token sets.
pub fn token_jaccard(a: &Value, b: &Value) -> f64 {
    let tokens = |v: &Value| -> BTreeSet<String> {
        record_text(v)
            .split_whitespace()
            .map(str::to_lowercase)
            .collect()
    };
    let (ta, tb) = (tokens(a), tokens(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        return 1.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Reads entity records: JSON lines (`.jsonl`/`.json`/other) or CSV with a
/// header row (`.csv`, each row becomes an object of strings).
pub fn load_records(path: &Path) -> Result<Vec<Value>> {
    let input = |e: &dyn std::fmt::Display| Error::Input(format!("{}: {e}", path.display()));
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        let mut reader = csv::Reader::from_path(path).map_err(|e| input(&e))?;
        let headers = reader.headers().map_err(|e| input(&e))?.clone();
        let mut out = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| input(&e))?;
            let obj: serde_json::Map<String, Value> = headers
                .iter()
                .zip(row.iter())
                .map(|(h, v)| (h.to_string(), Value::String(v.to_string())))
                .collect();
            out.push(Value::Object(obj));
        }
        return Ok(out);
    }
    let text = std::fs::read_to_string(path).map_err(|e| input(&e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| input(&format!("line {}: {e}", i + 1))))
        .collect()
}

/// Positive closure (union-find over match edges) plus negative edges
/// between clusters. Holds every crowd edge so it can be rebuilt when a new
/// answer contradicts the closure.
#[derive(Debug, Clone, Default)]
pub struct MatchGraph {
    parent: BTreeMap<u64, u64>,
    negative: Vec<(u64, u64)>,
    crowd_edges: Vec<(u64, u64, Verdict)>,
}

impl MatchGraph {
    pub fn new(nodes: impl IntoIterator<Item = u64>) -> Self {
        Self {
            parent: nodes.into_iter().map(|n| (n, n)).collect(),
            ..Default::default()
        }
    }

    fn find(&self, mut n: u64) -> u64 {
        while let Some(&p) = self.parent.get(&n) {
            if p == n {
                break;
            }
            n = p;
        }
        n
    }

    fn union(&mut self, a: u64, b: u64) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent.insert(hi, lo);
        }
    }

    pub fn deduce(&self, a: u64, b: u64) -> Option<Verdict> {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return Some(Verdict::Match);
        }
        let linked = self.negative.iter().any(|&(x, y)| {
            let (rx, ry) = (self.find(x), self.find(y));
            (rx == ra && ry == rb) || (rx == rb && ry == ra)
        });
        linked.then_some(Verdict::Nonmatch)
    }

    fn apply(&mut self, a: u64, b: u64, v: Verdict) {
        self.parent.entry(a).or_insert(a);
        self.parent.entry(b).or_insert(b);
        match v {
            Verdict::Match => self.union(a, b),
            Verdict::Nonmatch => self.negative.push((a, b)),
        }
    }

    /// Records a crowd verdict. If it contradicts the current closure the
    /// crowd wins: the graph is rebuilt from the newest edge backwards,
    /// keeping each older edge only if it is still consistent.
    pub fn add_crowd_edge(&mut self, a: u64, b: u64, verdict: Verdict) -> Option<Inconsistency> {
        let deduced = self.deduce(a, b);
        self.crowd_edges.push((a, b, verdict));
        match deduced {
            Some(d) if d != verdict => {
                let nodes: Vec<u64> = self.parent.keys().copied().collect();
                let edges = std::mem::take(&mut self.crowd_edges);
                *self = MatchGraph::new(nodes);
                let mut kept = Vec::new();
                let mut dropped = Vec::new();
                for &(x, y, v) in edges.iter().rev() {
                    match self.deduce(x, y) {
                        Some(d) if d != v => dropped.push((x, y, v)),
                        _ => {
                            self.apply(x, y, v);
                            kept.push((x, y, v));
                        }
                    }
                }
                kept.reverse();
                self.crowd_edges = kept;
                Some(Inconsistency {
                    pair: (a, b),
                    crowd: verdict,
                    deduced: d,
                    dropped,
                })
            }
            _ => {
                self.apply(a, b, verdict);
                None
            }
        }
    }

    /// No negative edge joins two nodes of the same positive cluster.
    pub fn is_consistent(&self) -> bool {
        self.negative
            .iter()
            .all(|&(x, y)| self.find(x) != self.find(y))
    }
}

fn check_join_presenter(p: &Presenter) -> Result<()> {
    let ok = match &p.answer_schema {
        AnswerSchema::Labels { labels } => {
            let set: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
            set == BTreeSet::from([MATCH, NONMATCH])
        }
        AnswerSchema::Text => false,
    };
    if ok {
        Ok(())
    } else {
        Err(PresenterError::Invalid(
            "join presenter must offer exactly the labels match/nonmatch".into(),
        )
        .into())
    }
}

struct Candidate {
    left_id: u64,
    right_id: u64,
    object: Value,
    fingerprint: String,
}

fn self_pairs(cd: &CrowdData) -> Vec<Candidate> {
    let rows = cd.rows();
    let mut out = Vec::new();
    for (i, l) in rows.iter().enumerate() {
        for r in &rows[i + 1..] {
            let (a, b) = if l.id < r.id { (l, r) } else { (r, l) };
            out.push(Candidate {
                left_id: a.id,
                right_id: b.id,
                object: pair_object(&a.object, &b.object),
                fingerprint: pair_fingerprint(&a.object, &b.object),
            });
        }
    }
    out
}

/// Publishes `candidates` as one batch and returns the MV verdict of each.
fn crowd_verdicts(
    ctx: &CrowdContext,
    table: &str,
    presenter: &Presenter,
    candidates: &[&Candidate],
) -> Result<Vec<Verdict>> {
    let mut pairs = ctx.crowddata(candidates.iter().map(|c| c.object.clone()), table)?;
    pairs.set_presenter(presenter.clone())?;
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    pairs
        .publish_task()?
        .get_result(true)?
        .quality_control("mv")?;
    let mv = pairs.derived("mv").expect("just computed");
    Ok(pairs
        .rows()
        .iter()
        .map(|r| Verdict::from_label(&mv[&r.id].label))
        .collect())
}

fn pair_table(cd: &CrowdData, other: Option<&CrowdData>) -> String {
    match other {
        Some(o) => format!("{}__{}__pairs", cd.table_name(), o.table_name()),
        None => format!("{}__pairs", cd.table_name()),
    }
}

/// Asks the crowd about every pair: the cross product of two tables, or all
/// unordered pairs of one table when `right` is `None`.
pub fn simple_join(
    ctx: &CrowdContext,
    left: &CrowdData,
    right: Option<&CrowdData>,
    presenter: &Presenter,
) -> Result<JoinOutcome> {
    check_join_presenter(presenter)?;
    let candidates = match right {
        None => self_pairs(left),
        Some(right) => left
            .rows()
            .iter()
            .flat_map(|l| {
                right.rows().iter().map(move |r| Candidate {
                    left_id: l.id,
                    right_id: r.id,
                    object: pair_object(&l.object, &r.object),
                    fingerprint: pair_fingerprint(&l.object, &r.object),
                })
            })
            .collect(),
    };
    let refs: Vec<&Candidate> = candidates.iter().collect();
    let verdicts = crowd_verdicts(ctx, &pair_table(left, right), presenter, &refs)?;
    let pairs = candidates
        .iter()
        .zip(verdicts)
        .map(|(c, v)| PairTask {
            left_id: c.left_id,
            right_id: c.right_id,
            pair_fingerprint: c.fingerprint.clone(),
            verdict: Some(v),
            source: PairSource::Crowd,
        })
        .collect();
    Ok(JoinOutcome {
        pairs,
        published: candidates.len(),
        inconsistencies: Vec::new(),
    })
}

/// Self-join that prunes pairs with `similarity < tau` as non-matches
/// without asking the crowd.
pub fn filtered_join(
    ctx: &CrowdContext,
    cd: &CrowdData,
    similarity: impl Fn(&Value, &Value) -> f64,
    tau: f64,
    presenter: &Presenter,
) -> Result<JoinOutcome> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidThreshold(tau));
    }
    check_join_presenter(presenter)?;
    let by_id: BTreeMap<u64, &Value> = cd.rows().iter().map(|r| (r.id, &r.object)).collect();
    let candidates = self_pairs(cd);
    let keep: Vec<bool> = candidates
        .iter()
        .map(|c| similarity(by_id[&c.left_id], by_id[&c.right_id]) >= tau)
        .collect();
    let to_ask: Vec<&Candidate> = candidates
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(c, _)| c)
        .collect();
    let mut verdicts = crowd_verdicts(ctx, &pair_table(cd, None), presenter, &to_ask)?.into_iter();
    let pairs = candidates
        .iter()
        .zip(&keep)
        .map(|(c, &k)| PairTask {
            left_id: c.left_id,
            right_id: c.right_id,
            pair_fingerprint: c.fingerprint.clone(),
            verdict: Some(if k {
                verdicts.next().expect("one verdict per kept pair")
            } else {
                Verdict::Nonmatch
            }),
            source: if k {
                PairSource::Crowd
            } else {
                PairSource::Pruned
            },
        })
        .collect();
    Ok(JoinOutcome {
        pairs,
        published: to_ask.len(),
        inconsistencies: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum PairOrder {
    /// By (left_id, right_id).
    IdAscending,
    /// Most similar first under token Jaccard, ties by (left_id, right_id).
    #[default]
    SimilarityDescending,
    /// Caller-supplied order; unlisted pairs follow in id order.
    Explicit(Vec<(u64, u64)>),
}

/// Self-join that publishes pairs one at a time in `order`, skipping pairs
/// whose verdict is implied by earlier answers.
pub fn transitive_join(
    ctx: &CrowdContext,
    cd: &CrowdData,
    order: &PairOrder,
    presenter: &Presenter,
) -> Result<JoinOutcome> {
    check_join_presenter(presenter)?;
    let by_id: BTreeMap<u64, &Value> = cd.rows().iter().map(|r| (r.id, &r.object)).collect();
    let mut candidates = self_pairs(cd);
    candidates.sort_by_key(|c| (c.left_id, c.right_id));
    match order {
        PairOrder::IdAscending => {}
        PairOrder::SimilarityDescending => {
            let sim = |c: &Candidate| token_jaccard(by_id[&c.left_id], by_id[&c.right_id]);
            candidates.sort_by(|a, b| {
                sim(b)
                    .total_cmp(&sim(a))
                    .then((a.left_id, a.right_id).cmp(&(b.left_id, b.right_id)))
            });
        }
        PairOrder::Explicit(list) => {
            let rank: BTreeMap<(u64, u64), usize> = list
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| ((a.min(b), a.max(b)), i))
                .collect();
            candidates.sort_by_key(|c| {
                rank.get(&(c.left_id, c.right_id))
                    .copied()
                    .unwrap_or(usize::MAX)
            });
        }
    }

    let mut pairs_table = ctx.crowddata(Vec::new(), &pair_table(cd, None))?;
    pairs_table.set_presenter(presenter.clone())?;
    let mut graph = MatchGraph::new(by_id.keys().copied());
    let mut sources = Vec::with_capacity(candidates.len());
    let mut inconsistencies = Vec::new();
    let mut published = 0;

    for c in &candidates {
        if graph.deduce(c.left_id, c.right_id).is_some() {
            sources.push(PairSource::Deduced);
            continue;
        }
        pairs_table.append(c.object.clone())?;
        pairs_table
            .publish_task()?
            .get_result(true)?
            .quality_control("mv")?;
        let last = pairs_table.rows().last().expect("just appended").id;
        let verdict =
            Verdict::from_label(&pairs_table.derived("mv").expect("just computed")[&last].label);
        published += 1;
        sources.push(PairSource::Crowd);
        if let Some(inc) = graph.add_crowd_edge(c.left_id, c.right_id, verdict) {
            inconsistencies.push(inc);
        }
    }

    // Crowd edges stand as answered; deduced pairs are read off the final
    // closure so they reflect any rebuild.
    let crowd: BTreeMap<(u64, u64), Verdict> = {
        let mv = pairs_table.derived("mv");
        pairs_table
            .rows()
            .iter()
            .filter_map(|r| {
                let c = candidates.iter().find(|c| c.fingerprint == r.fingerprint)?;
                Some((
                    (c.left_id, c.right_id),
                    Verdict::from_label(&mv?[&r.id].label),
                ))
            })
            .collect()
    };
    let pairs = candidates
        .iter()
        .zip(sources)
        .map(|(c, source)| {
            let verdict = match source {
                PairSource::Crowd => crowd.get(&(c.left_id, c.right_id)).copied(),
                _ => Some(
                    graph
                        .deduce(c.left_id, c.right_id)
                        .unwrap_or(Verdict::Nonmatch),
                ),
            };
            PairTask {
                left_id: c.left_id,
                right_id: c.right_id,
                pair_fingerprint: c.fingerprint.clone(),
                verdict,
                source,
            }
        })
        .collect();
    Ok(JoinOutcome {
        pairs,
        published,
        inconsistencies,
    })
}
