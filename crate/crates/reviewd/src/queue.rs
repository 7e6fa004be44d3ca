//! In-memory review state: the candidate queue, the decisions seen so far and
//! one cursor per annotator. Everything here is synchronous; the server wraps
//! it in a mutex and funnels every mutation of the log through one writer.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use wood_core::oodpipe::{assemble_hard_ood, expected_reviews, RankedCandidate, ReviewDecision, Verdict};
use wood_core::{Error, Result};

/// Body of `POST /decision`. A missing timestamp is filled in by the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub sample_id: String,
    pub class_name: String,
    pub verdict: Verdict,
    pub annotator_id: String,
    #[serde(default)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub sample_id: String,
    pub class_name: String,
    pub score: f64,
    pub rank: usize,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub annotator_id: String,
    pub items: Vec<BatchItem>,
    pub done: bool,
    /// The annotator's cursor after this request.
    pub position: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub annotator_id: String,
    pub position: usize,
    pub decisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    /// Queue items with at least one effective non-skip verdict.
    pub decided: usize,
    pub remaining: usize,
    /// Decided items with a `contains_foreground` verdict.
    pub positives: usize,
    pub positive_rate: f64,
    /// Hard-OoD images the current log would produce.
    pub found: usize,
    pub target: usize,
    pub remaining_target: usize,
    /// `None` once every decided item was positive.
    pub estimated_remaining_reviews: Option<f64>,
    pub sessions: Vec<SessionInfo>,
}

/// What the writer should do with a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Append(ReviewDecision),
    Duplicate(ReviewDecision),
    UnknownCandidate,
}

#[derive(Debug, Default, Clone)]
struct Session {
    cursor: usize,
    decisions: usize,
}

#[derive(Debug)]
pub struct ReviewState {
    items: Vec<RankedCandidate>,
    index: HashMap<(String, String), usize>,
    images: HashMap<String, PathBuf>,
    decisions: Vec<ReviewDecision>,
    seen: HashSet<ReviewDecision>,
    /// Per item: annotator -> (timestamp, verdict) of the effective line.
    latest: Vec<HashMap<String, (u64, Verdict)>>,
    sessions: HashMap<String, Session>,
    target: usize,
}

impl ReviewState {
    /// Builds the queue in (class, rank) order, classes in order of first
    /// appearance, and replays an existing log. `target` defaults to the
    /// number of distinct images in the queue.
    pub fn new(mut items: Vec<RankedCandidate>, log: Vec<ReviewDecision>, target: Option<usize>) -> Result<Self> {
        let mut class_order: HashMap<String, usize> = HashMap::new();
        for it in &items {
            let next = class_order.len();
            class_order.entry(it.class_name.clone()).or_insert(next);
        }
        items.sort_by_key(|it| (class_order[&it.class_name], it.rank));

        let mut index = HashMap::new();
        let mut images = HashMap::new();
        for (i, it) in items.iter().enumerate() {
            if index.insert((it.sample_id.clone(), it.class_name.clone()), i).is_some() {
                return Err(Error::Integrity(format!(
                    "candidate `{}` appears twice for class `{}`",
                    it.sample_id, it.class_name
                )));
            }
            if let Some(p) = &it.path {
                images.entry(it.sample_id.clone()).or_insert_with(|| p.clone());
            }
        }
        let distinct: HashSet<&str> = items.iter().map(|it| it.sample_id.as_str()).collect();
        let target = target.unwrap_or(distinct.len());

        let mut state = ReviewState {
            latest: vec![HashMap::new(); items.len()],
            items,
            index,
            images,
            decisions: Vec::new(),
            seen: HashSet::new(),
            sessions: HashMap::new(),
            target,
        };
        for d in log {
            if state.item_of(&d.sample_id, &d.class_name).is_none() {
                return Err(Error::Integrity(format!(
                    "log references unknown candidate `{}` / `{}`",
                    d.sample_id, d.class_name
                )));
            }
            state.record(d);
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[RankedCandidate] {
        &self.items
    }

    pub fn decisions(&self) -> &[ReviewDecision] {
        &self.decisions
    }

    pub fn image_path(&self, sample_id: &str) -> Option<&PathBuf> {
        self.images.get(sample_id)
    }

    pub fn has_sample(&self, sample_id: &str) -> bool {
        self.items.iter().any(|it| it.sample_id == sample_id)
    }

    fn item_of(&self, sample_id: &str, class_name: &str) -> Option<usize> {
        self.index
            .get(&(sample_id.to_string(), class_name.to_string()))
            .copied()
    }

    fn decided(&self, i: usize) -> bool {
        self.latest[i].values().any(|&(_, v)| v != Verdict::Skip)
    }

    fn positive(&self, i: usize) -> bool {
        self.latest[i]
            .values()
            .any(|&(_, v)| v == Verdict::ContainsForeground)
    }

    fn passed_by(&self, i: usize, annotator: &str) -> bool {
        self.decided(i) || self.latest[i].contains_key(annotator)
    }

    /// Next `size` items the annotator has not passed. Advances the cursor
    /// over the decided or skipped prefix.
    pub fn batch(&mut self, annotator: &str, size: usize) -> Batch {
        let mut cursor = self.sessions.get(annotator).map_or(0, |s| s.cursor);
        while cursor < self.items.len() && self.passed_by(cursor, annotator) {
            cursor += 1;
        }
        self.sessions.entry(annotator.to_string()).or_default().cursor = cursor;

        let items: Vec<BatchItem> = (cursor..self.items.len())
            .filter(|&i| !self.passed_by(i, annotator))
            .take(size)
            .map(|i| {
                let it = &self.items[i];
                BatchItem {
                    sample_id: it.sample_id.clone(),
                    class_name: it.class_name.clone(),
                    score: it.score,
                    rank: it.rank,
                    image_url: format!("/image/{}", it.sample_id),
                }
            })
            .collect();
        Batch {
            annotator_id: annotator.to_string(),
            done: items.is_empty(),
            items,
            position: cursor,
            total: self.items.len(),
        }
    }

    /// Decides whether a request becomes a new log line. With an explicit
    /// timestamp a duplicate is an identical line; without one, a request
    /// repeating the annotator's current verdict.
    pub fn prepare(&self, req: &DecisionRequest, now_ms: u64) -> Outcome {
        let Some(i) = self.item_of(&req.sample_id, &req.class_name) else {
            return Outcome::UnknownCandidate;
        };
        let current = self.latest[i].get(&req.annotator_id).copied();
        let decision = |timestamp| ReviewDecision {
            sample_id: req.sample_id.clone(),
            class_name: req.class_name.clone(),
            verdict: req.verdict,
            annotator_id: req.annotator_id.clone(),
            timestamp,
        };
        match (req.timestamp, current) {
            (Some(ts), _) => {
                let d = decision(ts);
                if self.seen.contains(&d) {
                    Outcome::Duplicate(d)
                } else {
                    Outcome::Append(d)
                }
            }
            (None, Some((ts, v))) if v == req.verdict => Outcome::Duplicate(decision(ts)),
            (None, Some((ts, _))) => Outcome::Append(decision(now_ms.max(ts + 1))),
            (None, None) => Outcome::Append(decision(now_ms)),
        }
    }

    /// Applies a decision that has been written to the log.
    pub fn record(&mut self, d: ReviewDecision) {
        let i = self
            .item_of(&d.sample_id, &d.class_name)
            .expect("recorded decision refers to a queue item");
        let slot = self.latest[i].entry(d.annotator_id.clone()).or_insert((d.timestamp, d.verdict));
        if d.timestamp >= slot.0 {
            *slot = (d.timestamp, d.verdict);
        }
        self.sessions.entry(d.annotator_id.clone()).or_default().decisions += 1;
        self.seen.insert(d.clone());
        self.decisions.push(d);
    }

    pub fn progress(&self) -> Progress {
        let total = self.items.len();
        let decided = (0..total).filter(|&i| self.decided(i)).count();
        let positives = (0..total).filter(|&i| self.positive(i)).count();
        let positive_rate = if decided == 0 {
            0.0
        } else {
            positives as f64 / decided as f64
        };
        let found = assemble_hard_ood(&self.items, &self.decisions, 0)
            .map(|v| v.len())
            .unwrap_or(0);
        let remaining_target = self.target.saturating_sub(found);
        let mut sessions: Vec<SessionInfo> = self
            .sessions
            .iter()
            .map(|(a, s)| SessionInfo {
                annotator_id: a.clone(),
                position: s.cursor,
                decisions: s.decisions,
            })
            .collect();
        sessions.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));
        Progress {
            total,
            decided,
            remaining: total - decided,
            positives,
            positive_rate,
            found,
            target: self.target,
            remaining_target,
            estimated_remaining_reviews: expected_reviews(remaining_target as f64, positive_rate).ok(),
            sessions,
        }
    }
}
