//! Human evaluation of mitigated memes: evaluator assignment, verdict
//! collection, majority decisions with tiebreaks, and aggregate reports.
//!
//! A store directory holds three append-only JSON-lines files:
//! `variants.jsonl` (`{variant_id, split}`), `assignments.jsonl`
//! (`{meme_variant_id, evaluator_id}`) and `verdicts.jsonl`
//! (`{meme_variant_id, evaluator_id, q1, q2, ts}`).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::model::Split;

pub const VERDICTS_PER_MEME: usize = 3;

/// Q1: is the meme hateful?
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Q1 {
    NH,
    H,
}

/// Q2: do image and text make sense together?
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Q2 {
    NC,
    C,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub meme_variant_id: String,
    pub evaluator_id: String,
    pub q1: Q1,
    pub q2: Q2,
    /// Seconds since the Unix epoch.
    pub ts: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("evaluator pool has {size} members, need at least {VERDICTS_PER_MEME}")]
    PoolTooSmall { size: usize },
    #[error("majority needs at least {VERDICTS_PER_MEME} verdicts, got {count}")]
    TooFewVerdicts { count: usize },
    #[error("{evaluator} already judged {variant}")]
    DuplicateVerdict { variant: String, evaluator: String },
    #[error("unknown variant {0}")]
    UnknownVariant(String),
    #[error("{evaluator} is not assigned to {variant}")]
    NotAssigned { variant: String, evaluator: String },
    #[error("{0} does not need a tiebreak")]
    NoTiebreakNeeded(String),
    #[error("no unassigned evaluator left for {0}")]
    NoEvaluatorAvailable(String),
    #[error("{file}:{line}: {reason}")]
    Corrupt { file: String, line: usize, reason: String },
    #[error("store i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision<T> {
    Decided(T),
    NeedsTiebreak,
}

/// Strict majority over binary answers; an exact split needs a tiebreak.
pub fn majority<T: Copy + PartialEq>(answers: &[T]) -> Result<Decision<T>, EvalError> {
    if answers.len() < VERDICTS_PER_MEME {
        return Err(EvalError::TooFewVerdicts { count: answers.len() });
    }
    let first = answers[0];
    let agree = answers.iter().filter(|a| **a == first).count();
    Ok(match (2 * agree).cmp(&answers.len()) {
        std::cmp::Ordering::Greater => Decision::Decided(first),
        std::cmp::Ordering::Equal => Decision::NeedsTiebreak,
        std::cmp::Ordering::Less => Decision::Decided(*answers.iter().find(|a| **a != first).unwrap()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum Status {
    Pending { received: usize, assigned: usize },
    NeedsTiebreak { received: usize },
    /// `shareable` holds when more than half of the individual verdicts
    /// answered both non-hateful and coherent.
    Decided { q1: Q1, q2: Q2, shareable: bool, verdicts: usize },
}

#[derive(Debug, Clone, Default)]
struct VariantState {
    split: Option<Split>,
    assigned: Vec<String>,
    verdicts: Vec<VerdictRecord>,
}

impl VariantState {
    fn status(&self) -> Status {
        let received = self.verdicts.len();
        if received < VERDICTS_PER_MEME || received < self.assigned.len() {
            return Status::Pending {
                received,
                assigned: self.assigned.len(),
            };
        }
        let q1: Vec<Q1> = self.verdicts.iter().map(|v| v.q1).collect();
        let q2: Vec<Q2> = self.verdicts.iter().map(|v| v.q2).collect();
        match (majority(&q1), majority(&q2)) {
            (Ok(Decision::Decided(q1)), Ok(Decision::Decided(q2))) => {
                let joint = self.verdicts.iter().filter(|v| v.q1 == Q1::NH && v.q2 == Q2::C).count();
                Status::Decided {
                    q1,
                    q2,
                    shareable: 2 * joint > received,
                    verdicts: received,
                }
            }
            _ => Status::NeedsTiebreak { received },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VariantLine {
    variant_id: String,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct AssignmentLine {
    meme_variant_id: String,
    evaluator_id: String,
}

/// Single-writer verdict store. Callers serialize mutation (for example
/// behind a mutex); every mutation is appended to disk when backed by a dir.
#[derive(Debug)]
pub struct VerdictStore {
    pool: Vec<String>,
    variants: BTreeMap<String, VariantState>,
    load: HashMap<String, usize>,
    dir: Option<PathBuf>,
}

fn io_err(e: impl std::fmt::Display) -> EvalError {
    EvalError::Io(e.to_string())
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io_err)?).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Corrupt {
            file: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

impl VerdictStore {
    /// In-memory store over an evaluator pool (deduplicated, sorted by id).
    pub fn new(pool: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut pool: Vec<String> = pool.into_iter().map(Into::into).collect();
        pool.sort();
        pool.dedup();
        VerdictStore {
            pool,
            variants: BTreeMap::new(),
            load: HashMap::new(),
            dir: None,
        }
    }

    /// Open (or create) a directory-backed store and replay its files.
    pub fn open(dir: &Path, pool: impl IntoIterator<Item = impl Into<String>>) -> Result<Self, EvalError> {
        std::fs::create_dir_all(dir).map_err(io_err)?;
        let mut store = Self::new(pool);
        for v in read_lines::<VariantLine>(&dir.join("variants.jsonl"))? {
            store.register(&v.variant_id, v.split)?;
        }
        for a in read_lines::<AssignmentLine>(&dir.join("assignments.jsonl"))? {
            store.add_assignment(&a.meme_variant_id, &a.evaluator_id)?;
        }
        for v in read_lines::<VerdictRecord>(&dir.join("verdicts.jsonl"))? {
            store.insert_verdict(v)?;
        }
        store.dir = Some(dir.to_path_buf());
        Ok(store)
    }

    fn append<T: Serialize>(&self, file: &str, item: &T) -> Result<(), EvalError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(file))
            .map_err(io_err)?;
        let mut line = serde_json::to_string(item).map_err(io_err)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(io_err)
    }

    pub fn pool(&self) -> &[String] {
        &self.pool
    }

    pub fn variant_ids(&self) -> impl Iterator<Item = &str> {
        self.variants.keys().map(String::as_str)
    }

    pub fn split_of(&self, variant: &str) -> Option<Split> {
        self.variants.get(variant).and_then(|v| v.split)
    }

    /// Record which split a variant belongs to. Re-registering is a no-op.
    pub fn register(&mut self, variant: &str, split: Split) -> Result<(), EvalError> {
        let state = self.variants.entry(variant.to_string()).or_default();
        if state.split.is_none() {
            state.split = Some(split);
            self.append(
                "variants.jsonl",
                &VariantLine {
                    variant_id: variant.to_string(),
                    split,
                },
            )?;
        }
        Ok(())
    }

    fn state(&self, variant: &str) -> Result<&VariantState, EvalError> {
        self.variants
            .get(variant)
            .filter(|s| s.split.is_some())
            .ok_or_else(|| EvalError::UnknownVariant(variant.to_string()))
    }

    fn add_assignment(&mut self, variant: &str, evaluator: &str) -> Result<(), EvalError> {
        self.state(variant)?;
        let state = self.variants.get_mut(variant).unwrap();
        if !state.assigned.iter().any(|e| e == evaluator) {
            state.assigned.push(evaluator.to_string());
            *self.load.entry(evaluator.to_string()).or_default() += 1;
        }
        Ok(())
    }

    /// Least-loaded pool member not yet on this variant; ties by id.
    fn pick(&self, variant: &str) -> Option<String> {
        let taken = &self.variants[variant].assigned;
        self.pool
            .iter()
            .filter(|e| !taken.contains(e))
            .min_by_key(|e| (self.load.get(*e).copied().unwrap_or(0), (*e).clone()))
            .cloned()
    }

    fn assign_one(&mut self, variant: &str) -> Result<String, EvalError> {
        let evaluator = self
            .pick(variant)
            .ok_or_else(|| EvalError::NoEvaluatorAvailable(variant.to_string()))?;
        self.add_assignment(variant, &evaluator)?;
        self.append(
            "assignments.jsonl",
            &AssignmentLine {
                meme_variant_id: variant.to_string(),
                evaluator_id: evaluator.clone(),
            },
        )?;
        Ok(evaluator)
    }

    /// Bring a variant up to three distinct evaluators, least-loaded first.
    /// Returns the full assignment list.
    pub fn assign(&mut self, variant: &str) -> Result<Vec<String>, EvalError> {
        if self.pool.len() < VERDICTS_PER_MEME {
            return Err(EvalError::PoolTooSmall { size: self.pool.len() });
        }
        self.state(variant)?;
        while self.variants[variant].assigned.len() < VERDICTS_PER_MEME {
            self.assign_one(variant)?;
        }
        Ok(self.variants[variant].assigned.clone())
    }

    /// Register and assign in one step.
    pub fn enqueue(&mut self, variant: &str, split: Split) -> Result<Vec<String>, EvalError> {
        self.register(variant, split)?;
        self.assign(variant)
    }

    /// Invite one more evaluator to a variant beyond the initial three.
    pub fn assign_additional(&mut self, variant: &str) -> Result<String, EvalError> {
        self.state(variant)?;
        self.assign_one(variant)
    }

    /// One extra evaluator for a variant whose answers are split evenly.
    pub fn assign_tiebreak(&mut self, variant: &str) -> Result<String, EvalError> {
        match self.state(variant)?.status() {
            Status::NeedsTiebreak { .. } => self.assign_one(variant),
            _ => Err(EvalError::NoTiebreakNeeded(variant.to_string())),
        }
    }

    fn insert_verdict(&mut self, v: VerdictRecord) -> Result<(), EvalError> {
        let state = self.state(&v.meme_variant_id)?;
        if !state.assigned.contains(&v.evaluator_id) {
            return Err(EvalError::NotAssigned {
                variant: v.meme_variant_id,
                evaluator: v.evaluator_id,
            });
        }
        if state.verdicts.iter().any(|x| x.evaluator_id == v.evaluator_id) {
            return Err(EvalError::DuplicateVerdict {
                variant: v.meme_variant_id,
                evaluator: v.evaluator_id,
            });
        }
        self.variants.get_mut(&v.meme_variant_id).unwrap().verdicts.push(v);
        Ok(())
    }

    /// Accept a verdict from an assigned evaluator. A resulting even split
    /// immediately pulls in exactly one tiebreaker, whose id is returned.
    pub fn submit(&mut self, v: VerdictRecord) -> Result<Option<String>, EvalError> {
        let variant = v.meme_variant_id.clone();
        self.insert_verdict(v.clone())?;
        self.append("verdicts.jsonl", &v)?;
        match self.status(&variant)? {
            Status::NeedsTiebreak { .. } => Ok(Some(self.assign_one(&variant)?)),
            _ => Ok(None),
        }
    }

    pub fn status(&self, variant: &str) -> Result<Status, EvalError> {
        Ok(self.state(variant)?.status())
    }

    pub fn verdicts(&self, variant: &str) -> Result<&[VerdictRecord], EvalError> {
        Ok(&self.state(variant)?.verdicts)
    }

    pub fn assignments(&self, variant: &str) -> Result<&[String], EvalError> {
        Ok(&self.state(variant)?.assigned)
    }

    pub fn load_of(&self, evaluator: &str) -> usize {
        self.load.get(evaluator).copied().unwrap_or(0)
    }

    /// The first variant (by id) assigned to `evaluator` that they have not judged.
    pub fn next_for(&self, evaluator: &str) -> Option<&str> {
        self.variants
            .iter()
            .find(|(_, s)| {
                s.assigned.iter().any(|e| e == evaluator) && !s.verdicts.iter().any(|v| v.evaluator_id == evaluator)
            })
            .map(|(id, _)| id.as_str())
    }

    pub fn aggregate(&self) -> AggregateReport {
        aggregate(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Count {
    pub count: usize,
    pub pct: f64,
}

/// `count / total` as a percentage rounded half-up to one decimal.
pub fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let (c, t) = (count as u128, total as u128);
    let tenths = (2000 * c + t) / (2 * t);
    tenths as f64 / 10.0
}

impl Count {
    fn of(count: usize, total: usize) -> Self {
        Count {
            count,
            pct: percent(count, total),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub total: usize,
    pub q1_non_hateful: Count,
    pub q1_hateful: Count,
    pub q2_coherent: Count,
    pub q2_not_coherent: Count,
    /// Majority of evaluators judged it both non-hateful and coherent.
    pub shareable: Count,
}

#[derive(Default)]
struct Tally {
    total: usize,
    nh: usize,
    c: usize,
    shareable: usize,
}

impl Tally {
    fn add(&mut self, q1: Q1, q2: Q2, shareable: bool) {
        self.total += 1;
        self.nh += (q1 == Q1::NH) as usize;
        self.c += (q2 == Q2::C) as usize;
        self.shareable += shareable as usize;
    }

    fn report(&self) -> SplitReport {
        let t = self.total;
        SplitReport {
            total: t,
            q1_non_hateful: Count::of(self.nh, t),
            q1_hateful: Count::of(t - self.nh, t),
            q2_coherent: Count::of(self.c, t),
            q2_not_coherent: Count::of(t - self.c, t),
            shareable: Count::of(self.shareable, t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub overall: SplitReport,
    pub splits: BTreeMap<Split, SplitReport>,
    pub pending: usize,
    pub needs_tiebreak: usize,
}

/// Counts over decided variants only; every split is present even when empty.
pub fn aggregate(store: &VerdictStore) -> AggregateReport {
    let mut overall = Tally::default();
    let mut per: BTreeMap<Split, Tally> = Split::ALL.iter().map(|s| (*s, Tally::default())).collect();
    let (mut pending, mut needs_tiebreak) = (0, 0);
    for state in store.variants.values() {
        let Some(split) = state.split else { continue };
        match state.status() {
            Status::Decided { q1, q2, shareable, .. } => {
                overall.add(q1, q2, shareable);
                per.get_mut(&split).unwrap().add(q1, q2, shareable);
            }
            Status::Pending { .. } => pending += 1,
            Status::NeedsTiebreak { .. } => needs_tiebreak += 1,
        }
    }
    AggregateReport {
        overall: overall.report(),
        splits: per.into_iter().map(|(s, t)| (s, t.report())).collect(),
        pending,
        needs_tiebreak,
    }
}

impl AggregateReport {
    pub fn to_table(&self) -> String {
        let cell = |c: Count| format!("{} ({:.1}%)", c.count, c.pct);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6}  {:<14} {:<14} {:<14} {:<14} {:<14}",
            "split", "total", "Q1=NH", "Q1=H", "Q2=C", "Q2=NC", "shareable"
        );
        let rows = self
            .splits
            .iter()
            .map(|(s, r)| (s.as_str(), r))
            .chain(std::iter::once(("overall", &self.overall)));
        for (name, r) in rows {
            let _ = writeln!(
                out,
                "{:<16} {:>6}  {:<14} {:<14} {:<14} {:<14} {:<14}",
                name,
                r.total,
                cell(r.q1_non_hateful),
                cell(r.q1_hateful),
                cell(r.q2_coherent),
                cell(r.q2_not_coherent),
                cell(r.shareable)
            );
        }
        let _ = writeln!(out, "pending: {}  needs tiebreak: {}", self.pending, self.needs_tiebreak);
        out
    }
}
