//! Hard-OoD collection: score candidates with the in-distribution classifier,
//! prune those scoring below [`PRUNE_THRESHOLD`], stage the survivors for
//! review and assemble the hard-OoD set from the decision log.
//!
//! # Decision log
//!
//! One [`ReviewDecision`] per line, append-only:
//!
//! ```text
//! {"sample_id":"cand-00004","class_name":"square","verdict":"background_only","annotator_id":"ann1","timestamp":1700000000000}
//! ```
//!
//! `timestamp` is milliseconds since the Unix epoch. For every
//! `(sample_id, class_name, annotator_id)` the line with the largest timestamp
//! is the effective verdict; equal timestamps resolve to the later line. A
//! correction is therefore just another line, and an undo is a `skip` line.
//! An image enters the hard-OoD set when at least one effective verdict is
//! `background_only` and none is `contains_foreground`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LineError, LineErrorKind, Result};
use crate::imageio::load_gray;
use crate::manifest::{resolve, ClassList, SampleRecord, Split};
use crate::net::ClassifierState;
use crate::rng::Rng;

/// Candidates scoring strictly below this are pruned; the threshold itself
/// survives.
pub const PRUNE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub sample_id: String,
    pub class_name: String,
    pub score: f64,
    /// 1-based rank within the class, highest score first.
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    BackgroundOnly,
    ContainsForeground,
    Skip,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::BackgroundOnly => "background_only",
            Verdict::ContainsForeground => "contains_foreground",
            Verdict::Skip => "skip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub sample_id: String,
    pub class_name: String,
    pub verdict: Verdict,
    pub annotator_id: String,
    pub timestamp: u64,
}

/// One candidate image with its score for every class.
#[derive(Debug, Clone)]
pub struct ScoredCandidate {
    pub sample_id: String,
    pub path: Option<PathBuf>,
    pub scores: Vec<f64>,
}

/// Ranks pre-computed scores. The result is the global review queue: grouped
/// by class in class-list order, then by rank.
pub fn rank_scores(candidates: &[ScoredCandidate], classes: &ClassList) -> Result<Vec<RankedCandidate>> {
    let mut out = Vec::new();
    for (c, name) in classes.names().iter().enumerate() {
        let mut survivors: Vec<&ScoredCandidate> = Vec::new();
        for cand in candidates {
            if cand.scores.len() != classes.len() {
                return Err(Error::Shape(format!(
                    "candidate `{}` has {} scores for {} classes",
                    cand.sample_id,
                    cand.scores.len(),
                    classes.len()
                )));
            }
            if cand.scores[c] >= PRUNE_THRESHOLD {
                survivors.push(cand);
            }
        }
        survivors.sort_by(|a, b| {
            b.scores[c]
                .total_cmp(&a.scores[c])
                .then_with(|| a.sample_id.cmp(&b.sample_id))
        });
        out.extend(survivors.into_iter().enumerate().map(|(i, cand)| RankedCandidate {
            sample_id: cand.sample_id.clone(),
            class_name: name.clone(),
            score: cand.scores[c],
            rank: i + 1,
            path: cand.path.clone(),
        }));
    }
    Ok(out)
}

/// Scores every candidate image with `state` and ranks the survivors.
/// `manifest_path` anchors relative image paths.
pub fn rank_candidates(
    state: &ClassifierState,
    candidates: &[SampleRecord],
    classes: &ClassList,
    manifest_path: &Path,
) -> Result<Vec<RankedCandidate>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for rec in candidates {
        if rec.split != Split::OodCandidate {
            return Err(Error::InvalidArgument(format!(
                "`{}` has split {}, expected ood_candidate",
                rec.id,
                rec.split.as_str()
            )));
        }
        let path = resolve(manifest_path, &rec.path);
        let image = load_gray(&path)?;
        let fwd = state.forward(&image)?;
        scored.push(ScoredCandidate {
            sample_id: rec.id.clone(),
            path: Some(path),
            scores: fwd.scores,
        });
    }
    rank_scores(&scored, classes)
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return Err(Error::io(path, e)),
    };
    parse_jsonl(&text, &path.display().to_string())
}

pub(crate) fn parse_jsonl<T: DeserializeOwned>(text: &str, file: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) => errors.push(LineError {
                line: i + 1,
                kind: LineErrorKind::Parse,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Lines {
            file: file.to_string(),
            errors,
        })
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_ranked(path: impl AsRef<Path>, ranked: &[RankedCandidate]) -> Result<()> {
    write_jsonl(path.as_ref(), ranked)
}

pub fn load_ranked(path: impl AsRef<Path>) -> Result<Vec<RankedCandidate>> {
    read_jsonl(path.as_ref())
}

/// Reads a decision log. A missing file is an empty log.
pub fn read_decision_log(path: impl AsRef<Path>) -> Result<Vec<ReviewDecision>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_jsonl(path)
}

/// Appends one line to the log. Callers serialize concurrent writers.
pub fn append_decision(path: impl AsRef<Path>, decision: &ReviewDecision) -> Result<()> {
    let path = path.as_ref();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(decision).expect("decision serializes");
    line.push('\n');
    file.write_all(line.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

/// Effective verdict per `(sample_id, class_name, annotator_id)`.
pub fn effective_verdicts(decisions: &[ReviewDecision]) -> BTreeMap<(String, String, String), Verdict> {
    let mut latest: BTreeMap<(String, String, String), (u64, Verdict)> = BTreeMap::new();
    for d in decisions {
        let key = (d.sample_id.clone(), d.class_name.clone(), d.annotator_id.clone());
        match latest.get(&key) {
            Some(&(ts, _)) if ts > d.timestamp => {}
            _ => {
                latest.insert(key, (d.timestamp, d.verdict));
            }
        }
    }
    latest.into_iter().map(|(k, (_, v))| (k, v)).collect()
}

/// Builds the hard-OoD records from the queue and the decision log. Records
/// come out in queue order, each image once.
pub fn assemble_hard_ood(
    ranked: &[RankedCandidate],
    decisions: &[ReviewDecision],
    num_classes: usize,
) -> Result<Vec<SampleRecord>> {
    let known: HashSet<&str> = ranked.iter().map(|r| r.sample_id.as_str()).collect();
    for d in decisions {
        if !known.contains(d.sample_id.as_str()) {
            return Err(Error::Integrity(format!(
                "decision references unknown sample `{}`",
                d.sample_id
            )));
        }
    }
    let mut background = HashSet::new();
    let mut foreground = HashSet::new();
    for ((sample, _, _), verdict) in effective_verdicts(decisions) {
        match verdict {
            Verdict::BackgroundOnly => {
                background.insert(sample);
            }
            Verdict::ContainsForeground => {
                foreground.insert(sample);
            }
            Verdict::Skip => {}
        }
    }
    let mut emitted = HashSet::new();
    let mut out = Vec::new();
    for cand in ranked {
        let id = &cand.sample_id;
        if background.contains(id) && !foreground.contains(id) && emitted.insert(id.clone()) {
            out.push(SampleRecord {
                id: id.clone(),
                path: cand.path.clone().unwrap_or_default(),
                labels: vec![0; num_classes],
                split: Split::OodHard,
                gt_mask_path: None,
            });
        }
    }
    Ok(out)
}

/// Average number of images checked to collect `n` clean ones when a
/// fraction `r` of the pool are positives: `n / (1 - r)`.
pub fn expected_reviews(n: f64, r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "positive rate must lie in [0, 1), got {r}"
        )));
    }
    if n < 0.0 || !n.is_finite() {
        return Err(Error::InvalidArgument(format!("n must be >= 0, got {n}")));
    }
    Ok(n / (1.0 - r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReviewSimulation {
    pub trials: usize,
    pub mean_reviews: f64,
    /// Positive rate of the pool the reviewer draws from.
    pub positive_rate: f64,
    pub expected: f64,
}

impl ReviewSimulation {
    pub fn relative_error(&self) -> f64 {
        (self.mean_reviews - self.expected).abs() / self.expected
    }
}

/// Monte Carlo review burden: in each trial a reviewer draws candidates
/// uniformly from `pool` (true means the image contains a foreground object)
/// until `n` clean ones are found.
pub fn simulate_reviews(pool: &[bool], n: usize, trials: usize, rng: &mut Rng) -> Result<ReviewSimulation> {
    if pool.is_empty() || trials == 0 {
        return Err(Error::InvalidArgument("empty pool or zero trials".into()));
    }
    let positives = pool.iter().filter(|&&p| p).count();
    if positives == pool.len() && n > 0 {
        return Err(Error::InvalidArgument("pool has no clean candidates".into()));
    }
    let r = positives as f64 / pool.len() as f64;
    let mut total = 0u64;
    for _ in 0..trials {
        let mut clean = 0;
        while clean < n {
            total += 1;
            if !pool[rng.random_range(0..pool.len())] {
                clean += 1;
            }
        }
    }
    Ok(ReviewSimulation {
        trials,
        mean_reviews: total as f64 / trials as f64,
        positive_rate: r,
        expected: expected_reviews(n as f64, r)?,
    })
}

/// Per-sample verdicts keyed by class, convenient for reviewers and reports.
pub fn verdicts_by_sample(decisions: &[ReviewDecision]) -> HashMap<String, Vec<(String, Verdict)>> {
    let mut map: HashMap<String, Vec<(String, Verdict)>> = HashMap::new();
    for ((sample, class, _), v) in effective_verdicts(decisions) {
        map.entry(sample).or_default().push((class, v));
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn classes() -> ClassList {
        ClassList::new(["a", "b"]).unwrap()
    }

    fn cand(id: &str, scores: [f64; 2]) -> ScoredCandidate {
        ScoredCandidate {
            sample_id: id.into(),
            path: None,
            scores: scores.to_vec(),
        }
    }

    fn decision(id: &str, class: &str, verdict: Verdict, ts: u64) -> ReviewDecision {
        ReviewDecision {
            sample_id: id.into(),
            class_name: class.into(),
            verdict,
            annotator_id: "ann".into(),
            timestamp: ts,
        }
    }

    #[test]
    fn prunes_and_ranks() {
        let c = [
            cand("w", [0.4, 0.0]),
            cand("x", [0.9, 0.0]),
            cand("y", [0.2, 0.0]),
            cand("z", [0.6, 0.0]),
        ];
        let r = rank_scores(&c, &classes()).unwrap();
        let got: Vec<_> = r.iter().map(|r| (r.sample_id.as_str(), r.rank)).collect();
        assert_eq!(got, vec![("x", 1), ("z", 2)]);
    }

    #[test]
    fn threshold_is_inclusive_and_ties_use_id() {
        let c = [cand("q", [0.5, 0.5]), cand("p", [0.5, 0.49999])];
        let r = rank_scores(&c, &classes()).unwrap();
        let got: Vec<_> = r
            .iter()
            .map(|r| (r.class_name.as_str(), r.sample_id.as_str(), r.rank))
            .collect();
        assert_eq!(got, vec![("a", "p", 1), ("a", "q", 2), ("b", "q", 1)]);
        assert!(rank_scores(&[cand("s", [0.1, 0.3])], &classes()).unwrap().is_empty());
        assert!(rank_scores(&[], &classes()).unwrap().is_empty());
    }

    #[test]
    fn assembly_rules() {
        let ranked = rank_scores(
            &[cand("i1", [0.9, 0.8]), cand("i2", [0.7, 0.1]), cand("i3", [0.6, 0.1])],
            &classes(),
        )
        .unwrap();
        let d = [
            decision("i1", "a", Verdict::BackgroundOnly, 1),
            decision("i2", "a", Verdict::ContainsForeground, 2),
            decision("i3", "a", Verdict::Skip, 3),
        ];
        let hard = assemble_hard_ood(&ranked, &d, 2).unwrap();
        assert_eq!(hard.len(), 1);
        assert_eq!(hard[0].id, "i1");
        assert_eq!(hard[0].split, Split::OodHard);
        assert_eq!(hard[0].labels, vec![0, 0]);

        let mixed = [
            decision("i1", "a", Verdict::BackgroundOnly, 1),
            decision("i1", "b", Verdict::ContainsForeground, 2),
        ];
        assert!(assemble_hard_ood(&ranked, &mixed, 2).unwrap().is_empty());

        let unknown = [decision("nope", "a", Verdict::Skip, 1)];
        assert!(matches!(
            assemble_hard_ood(&ranked, &unknown, 2),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn latest_verdict_wins() {
        let ranked = rank_scores(&[cand("i1", [0.9, 0.1])], &classes()).unwrap();
        let d = [
            decision("i1", "a", Verdict::BackgroundOnly, 10),
            decision("i1", "a", Verdict::Skip, 11),
            decision("i1", "a", Verdict::ContainsForeground, 12),
        ];
        assert!(assemble_hard_ood(&ranked, &d, 2).unwrap().is_empty());
        let d = [
            decision("i1", "a", Verdict::BackgroundOnly, 10),
            decision("i1", "a", Verdict::Skip, 11),
            decision("i1", "a", Verdict::BackgroundOnly, 12),
        ];
        assert_eq!(assemble_hard_ood(&ranked, &d, 2).unwrap().len(), 1);
        // out-of-order timestamps
        let d = [
            decision("i1", "a", Verdict::ContainsForeground, 20),
            decision("i1", "a", Verdict::BackgroundOnly, 5),
        ];
        assert!(assemble_hard_ood(&ranked, &d, 2).unwrap().is_empty());
    }

    #[test]
    fn cost_model() {
        assert_eq!(expected_reviews(100.0, 0.2).unwrap(), 125.0);
        assert_eq!(expected_reviews(37.0, 0.0).unwrap(), 37.0);
        assert_eq!(expected_reviews(0.0, 0.5).unwrap(), 0.0);
        assert!(expected_reviews(10.0, 1.0).is_err());
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        assert!(read_decision_log(&path).unwrap().is_empty());
        let a = decision("i1", "a", Verdict::BackgroundOnly, 1);
        let b = decision("i2", "b", Verdict::Skip, 2);
        append_decision(&path, &a).unwrap();
        append_decision(&path, &b).unwrap();
        assert_eq!(read_decision_log(&path).unwrap(), vec![a, b]);
        fs::write(&path, "{\"sample_id\":1}\n").unwrap();
        assert!(matches!(read_decision_log(&path), Err(Error::Lines { .. })));
    }

    #[test]
    fn simulation_tracks_expectation() {
        let pool: Vec<bool> = (0..50).map(|i| i % 5 == 4).collect();
        let mut rng = stream(1, Stream::Review, 0);
        let sim = simulate_reviews(&pool, 10, 2000, &mut rng).unwrap();
        assert_eq!(sim.expected, 12.5);
        assert!(sim.relative_error() < 0.05, "{sim:?}");
    }
}
