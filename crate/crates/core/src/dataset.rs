//! Interaction logs, examinee partitions and the attribute/group taxonomy.
//!
//! A [`Corpus`] holds every retained examinee's log in file order together
//! with the question table. Partitioning happens at two levels:
//!
//! * examinees are split once into train / valid / test sets
//!   ([`split_examinees`]);
//! * each examinee's log is split into a support set (questions the selector
//!   may administer) and a meta set (held-out targets). In training the split
//!   is regenerated every epoch ([`resplit_support_meta`]); the OOD test
//!   protocol instead forces a label-balanced meta set ([`build_ood_meta`]).
//!
//! Examinees are classified by their correct-response ratio into attributes
//! A (`r <= 0.4`), B (`0.4 < r <= 0.6`) and C (`r > 0.6`); an attribute plus a
//! response label forms one of six [`GroupKey`]s.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    Ratios([f64; 3]),
    #[error("attribute undefined for an empty log")]
    EmptyLog,
    #[error("meta fraction must lie in (0, 1), got {0}")]
    MetaFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One logged response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub examinee: u32,
    pub question: u32,
    /// 1 = correct, 0 = incorrect.
    pub label: u8,
}

impl Interaction {
    pub fn new(examinee: u32, question: u32, label: u8) -> Self {
        Self {
            examinee,
            question,
            label,
        }
    }

    pub fn correct(&self) -> bool {
        self.label == 1
    }

    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionMeta {
    pub id: u32,
    /// Dense concept indices required by the question (nonempty, sorted).
    pub concepts: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub examinees: usize,
    pub questions: usize,
    pub concepts: usize,
    pub interactions: usize,
}

/// Retained logs plus the question table.
///
/// Question ids are dense `0..questions.len()`. Examinee ids are dense at load
/// time but filtering or subsetting leaves gaps, so logs are keyed by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    logs: BTreeMap<u32, Vec<Interaction>>,
    questions: Vec<QuestionMeta>,
    n_concepts: usize,
}

impl Corpus {
    /// Builds a corpus, validating ids and labels. Repeated
    /// (examinee, question) pairs keep their first occurrence.
    pub fn from_parts(
        logs: BTreeMap<u32, Vec<Interaction>>,
        questions: Vec<QuestionMeta>,
        n_concepts: usize,
    ) -> Result<Self, DataError> {
        for (i, q) in questions.iter().enumerate() {
            if q.id as usize != i {
                return Err(DataError::Integrity(format!(
                    "question table slot {i} holds id {}",
                    q.id
                )));
            }
            if q.concepts.is_empty() {
                return Err(DataError::Integrity(format!(
                    "question {i} has no concepts"
                )));
            }
            if let Some(&c) = q.concepts.iter().find(|&&c| c as usize >= n_concepts) {
                return Err(DataError::Integrity(format!(
                    "question {i} references concept {c} but only {n_concepts} exist"
                )));
            }
        }
        let mut deduped = BTreeMap::new();
        for (id, log) in logs {
            let mut seen = BTreeSet::new();
            let mut kept = Vec::with_capacity(log.len());
            for it in log {
                if it.examinee != id {
                    return Err(DataError::Integrity(format!(
                        "interaction for examinee {} filed under {id}",
                        it.examinee
                    )));
                }
                if it.label > 1 {
                    return Err(DataError::Integrity(format!(
                        "examinee {id} question {} has label {}",
                        it.question, it.label
                    )));
                }
                if it.question as usize >= questions.len() {
                    return Err(DataError::Integrity(format!(
                        "examinee {id} answered unknown question {}",
                        it.question
                    )));
                }
                if seen.insert(it.question) {
                    kept.push(it);
                }
            }
            if !kept.is_empty() {
                deduped.insert(id, kept);
            }
        }
        Ok(Self {
            logs: deduped,
            questions,
            n_concepts,
        })
    }

    pub fn counts(&self) -> Counts {
        Counts {
            examinees: self.logs.len(),
            questions: self.questions.len(),
            concepts: self.n_concepts,
            interactions: self.logs.values().map(Vec::len).sum(),
        }
    }

    pub fn n_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn questions(&self) -> &[QuestionMeta] {
        &self.questions
    }

    pub fn log(&self, examinee: u32) -> Option<&[Interaction]> {
        self.logs.get(&examinee).map(Vec::as_slice)
    }

    pub fn examinee_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.logs.keys().copied()
    }

    pub fn logs(&self) -> impl Iterator<Item = (u32, &[Interaction])> + '_ {
        self.logs.iter().map(|(&id, log)| (id, log.as_slice()))
    }

    /// Restricts the corpus to the given examinees; the question table is kept
    /// whole so question ids stay valid across subsets.
    pub fn subset(&self, ids: &[u32]) -> Corpus {
        let logs = ids
            .iter()
            .filter_map(|id| self.logs.get(id).map(|log| (*id, log.clone())))
            .collect();
        Corpus {
            logs,
            questions: self.questions.clone(),
            n_concepts: self.n_concepts,
        }
    }
}

/// Dense index to raw file id, per entity kind. Serialized as `index_map.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexMap {
    pub examinees: Vec<i64>,
    pub questions: Vec<i64>,
    pub concepts: Vec<i64>,
}

const HEADER: [&str; 4] = ["examinee_id", "question_id", "correct", "concept_ids"];

struct RawRow {
    line: u64,
    examinee: i64,
    question: i64,
    label: u8,
    concepts: Vec<i64>,
}

fn parse_int(field: &str, name: &str, line: u64) -> Result<i64, DataError> {
    let field = field.trim();
    if field.is_empty() {
        return Err(DataError::Parse {
            line,
            message: format!("missing {name}"),
        });
    }
    field.parse().map_err(|_| DataError::Parse {
        line,
        message: format!("{name} {field:?} is not an integer"),
    })
}

/// Reads an interaction CSV (`examinee_id,question_id,correct,concept_ids`).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Corpus, IndexMap), DataError> {
    let file = std::fs::File::open(path)?;
    read_corpus(file)
}

pub fn read_corpus<R: Read>(reader: R) -> Result<(Corpus, IndexMap), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != HEADER {
        return Err(DataError::Parse {
            line: 1,
            message: format!(
                "expected header {}, got {}",
                HEADER.join(","),
                names.join(",")
            ),
        });
    }

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(DataError::Parse {
                line,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let examinee = parse_int(&record[0], "examinee_id", line)?;
        let question = parse_int(&record[1], "question_id", line)?;
        let label = match record[2].trim() {
            "0" => 0,
            "1" => 1,
            "" => {
                return Err(DataError::Parse {
                    line,
                    message: "missing correct".into(),
                })
            }
            other => {
                return Err(DataError::Parse {
                    line,
                    message: format!("correct must be 0 or 1, got {other:?}"),
                })
            }
        };
        let concepts = record[3]
            .split(';')
            .map(|c| parse_int(c, "concept id", line))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(RawRow {
            line,
            examinee,
            question,
            label,
            concepts,
        });
    }

    let concept_ids: BTreeSet<i64> = rows
        .iter()
        .flat_map(|r| r.concepts.iter().copied())
        .collect();
    let concept_index: HashMap<i64, u32> = concept_ids
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i as u32))
        .collect();

    let mut map = IndexMap {
        concepts: concept_ids.into_iter().collect(),
        ..IndexMap::default()
    };
    let mut examinee_index: HashMap<i64, u32> = HashMap::new();
    let mut question_index: HashMap<i64, u32> = HashMap::new();
    let mut questions: Vec<QuestionMeta> = Vec::new();
    let mut logs: BTreeMap<u32, Vec<Interaction>> = BTreeMap::new();

    for row in rows {
        let e = *examinee_index.entry(row.examinee).or_insert_with(|| {
            map.examinees.push(row.examinee);
            (map.examinees.len() - 1) as u32
        });
        let mut concepts: Vec<u32> = row.concepts.iter().map(|c| concept_index[c]).collect();
        concepts.sort_unstable();
        concepts.dedup();
        let q = match question_index.get(&row.question) {
            Some(&q) => {
                if questions[q as usize].concepts != concepts {
                    return Err(DataError::Integrity(format!(
                        "line {}: question {} listed with conflicting concepts",
                        row.line, row.question
                    )));
                }
                q
            }
            None => {
                let q = questions.len() as u32;
                question_index.insert(row.question, q);
                map.questions.push(row.question);
                questions.push(QuestionMeta { id: q, concepts });
                q
            }
        };
        logs.entry(e)
            .or_default()
            .push(Interaction::new(e, q, row.label));
    }

    let n_concepts = map.concepts.len();
    Ok((Corpus::from_parts(logs, questions, n_concepts)?, map))
}

/// Renders `corpus` in the input CSV format, with concepts numbered from 1.
/// Questions nobody answered are not represented.
pub fn corpus_csv(corpus: &Corpus) -> String {
    let mut s = HEADER.join(",") + "\n";
    for (_, log) in corpus.logs() {
        for it in log {
            let concepts: Vec<String> = corpus.questions()[it.question as usize]
                .concepts
                .iter()
                .map(|c| (c + 1).to_string())
                .collect();
            s.push_str(&format!(
                "{},{},{},{}\n",
                it.examinee,
                it.question,
                it.label,
                concepts.join(";")
            ));
        }
    }
    s
}

/// Drops examinees with fewer than `min_n` interactions.
pub fn filter_min_interactions(corpus: &Corpus, min_n: usize) -> Corpus {
    Corpus {
        logs: corpus
            .logs
            .iter()
            .filter(|(_, log)| log.len() >= min_n)
            .map(|(&id, log)| (id, log.clone()))
            .collect(),
        questions: corpus.questions.clone(),
        n_concepts: corpus.n_concepts,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamineeSplit {
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

/// Shuffles examinees with a seeded stream and cuts them into
/// `round(r0 * n)`, `round(r1 * n)` and the remainder. Each part is returned
/// sorted.
pub fn split_examinees(
    corpus: &Corpus,
    ratios: [f64; 3],
    seed: u64,
) -> Result<ExamineeSplit, DataError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::Ratios(ratios));
    }
    let mut ids: Vec<u32> = corpus.examinee_ids().collect();
    let n = ids.len();
    ids.shuffle(&mut stream(Stream::ExamineeSplit, &[seed]));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut train = ids[..n_train].to_vec();
    let mut valid = ids[n_train..n_train + n_valid].to_vec();
    let mut test = ids[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(ExamineeSplit { train, valid, test })
}

/// Support/meta partition of one examinee's log. Both halves keep log order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSplit {
    pub examinee: u32,
    pub support: Vec<Interaction>,
    pub meta: Vec<Interaction>,
}

impl EpisodeSplit {
    /// An empty meta set cannot produce an outer loss.
    pub fn usable(&self) -> bool {
        !self.meta.is_empty()
    }

    pub fn len(&self) -> usize {
        self.support.len() + self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_meta_frac(meta_frac: f64) -> Result<(), DataError> {
    if meta_frac > 0.0 && meta_frac < 1.0 {
        Ok(())
    } else {
        Err(DataError::MetaFraction(meta_frac))
    }
}

fn partition(log: &[Interaction], in_meta: &[bool]) -> (Vec<Interaction>, Vec<Interaction>) {
    let mut support = Vec::new();
    let mut meta = Vec::new();
    for (it, &m) in log.iter().zip(in_meta) {
        if m {
            meta.push(*it);
        } else {
            support.push(*it);
        }
    }
    (support, meta)
}

/// Random support/meta split with `|meta| = round(meta_frac * n)` (at least 1
/// when `n >= 2`). The split is a pure function of `(seed, epoch, examinee)`.
/// A single-interaction log yields an all-support split that is not
/// [`usable`](EpisodeSplit::usable).
pub fn resplit_support_meta(
    log: &[Interaction],
    meta_frac: f64,
    seed: u64,
    epoch: u64,
) -> Result<EpisodeSplit, DataError> {
    check_meta_frac(meta_frac)?;
    let first = log.first().ok_or(DataError::EmptyLog)?;
    let n = log.len();
    let n_meta = if n < 2 {
        0
    } else {
        ((meta_frac * n as f64).round() as usize).clamp(1, n - 1)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(
        Stream::SupportMeta,
        &[seed, epoch, u64::from(first.examinee)],
    ));
    let mut in_meta = vec![false; n];
    for &i in &order[..n_meta] {
        in_meta[i] = true;
    }
    let (support, meta) = partition(log, &in_meta);
    Ok(EpisodeSplit {
        examinee: first.examinee,
        support,
        meta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OodSplit {
    Balanced(EpisodeSplit),
    /// The log lacks `pairs` responses of one label.
    Excluded {
        examinee: u32,
        pairs: usize,
        correct: usize,
        incorrect: usize,
    },
}

/// Number of correct/incorrect pairs the OOD meta set holds for a log of
/// length `n`.
pub fn ood_pairs(n: usize, meta_frac: f64) -> usize {
    ((meta_frac * n as f64 / 2.0).round() as usize).max(1)
}

/// Label-balanced meta set: `m` correct plus `m` incorrect responses drawn at
/// random, everything else to support. Examinees with fewer than `m`
/// responses of either label are excluded.
pub fn build_ood_meta(
    log: &[Interaction],
    meta_frac: f64,
    seed: u64,
) -> Result<OodSplit, DataError> {
    check_meta_frac(meta_frac)?;
    let first = log.first().ok_or(DataError::EmptyLog)?;
    let m = ood_pairs(log.len(), meta_frac);
    let mut correct: Vec<usize> = Vec::new();
    let mut incorrect: Vec<usize> = Vec::new();
    for (i, it) in log.iter().enumerate() {
        if it.correct() {
            correct.push(i);
        } else {
            incorrect.push(i);
        }
    }
    if correct.len() < m || incorrect.len() < m {
        return Ok(OodSplit::Excluded {
            examinee: first.examinee,
            pairs: m,
            correct: correct.len(),
            incorrect: incorrect.len(),
        });
    }
    let mut rng = stream(Stream::OodMeta, &[seed, u64::from(first.examinee)]);
    correct.shuffle(&mut rng);
    incorrect.shuffle(&mut rng);
    let mut in_meta = vec![false; log.len()];
    for &i in correct[..m].iter().chain(&incorrect[..m]) {
        in_meta[i] = true;
    }
    let (support, meta) = partition(log, &in_meta);
    Ok(OodSplit::Balanced(EpisodeSplit {
        examinee: first.examinee,
        support,
        meta,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    A,
    B,
    C,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::A, Attribute::B, Attribute::C];

    /// Exact integer form of the interval test on `correct / total`.
    pub fn from_counts(correct: usize, total: usize) -> Result<Self, DataError> {
        if total == 0 {
            return Err(DataError::EmptyLog);
        }
        Ok(if 5 * correct <= 2 * total {
            Attribute::A
        } else if 5 * correct <= 3 * total {
            Attribute::B
        } else {
            Attribute::C
        })
    }

    pub fn from_ratio(r: f64) -> Self {
        if r <= 0.4 {
            Attribute::A
        } else if r <= 0.6 {
            Attribute::B
        } else {
            Attribute::C
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Attribute::A => "A",
            Attribute::B => "B",
            Attribute::C => "C",
        };
        f.write_str(s)
    }
}

/// Attribute of an examinee from the correct ratio of the whole log.
pub fn attribute_of(log: &[Interaction]) -> Result<Attribute, DataError> {
    let correct = log.iter().filter(|it| it.correct()).count();
    Attribute::from_counts(correct, log.len())
}

pub fn correct_ratio(log: &[Interaction]) -> f64 {
    if log.is_empty() {
        return 0.0;
    }
    log.iter().filter(|it| it.correct()).count() as f64 / log.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bias {
    Aligned,
    Conflicting,
    Unbiased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub attribute: Attribute,
    pub label: u8,
}

impl GroupKey {
    pub const COUNT: usize = 6;

    pub fn all() -> impl Iterator<Item = GroupKey> {
        Attribute::ALL
            .into_iter()
            .flat_map(|attribute| [0, 1].map(|label| GroupKey { attribute, label }))
    }

    /// `2 * attribute + label`, so A0, A1, B0, B1, C0, C1.
    pub fn index(self) -> usize {
        2 * self.attribute.index() + self.label as usize
    }

    pub fn from_index(i: usize) -> Self {
        GroupKey {
            attribute: Attribute::ALL[i / 2],
            label: (i % 2) as u8,
        }
    }

    pub fn bias(self) -> Bias {
        match (self.attribute, self.label) {
            (Attribute::B, _) => Bias::Unbiased,
            (Attribute::A, 0) | (Attribute::C, 1) => Bias::Aligned,
            _ => Bias::Conflicting,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.attribute, self.label)
    }
}

pub fn group_key(attribute: Attribute, label: u8) -> GroupKey {
    GroupKey {
        attribute,
        label: label.min(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from_labels(examinee: u32, labels: &[u8]) -> Vec<Interaction> {
        labels
            .iter()
            .enumerate()
            .map(|(q, &l)| Interaction::new(examinee, q as u32, l))
            .collect()
    }

    fn corpus_with_lengths(lengths: &[usize]) -> Corpus {
        let n_q = lengths.iter().copied().max().unwrap_or(0);
        let questions = (0..n_q as u32)
            .map(|id| QuestionMeta {
                id,
                concepts: vec![0],
            })
            .collect();
        let logs = lengths
            .iter()
            .enumerate()
            .map(|(e, &len)| {
                let labels: Vec<u8> = (0..len).map(|i| (i % 2) as u8).collect();
                (e as u32, log_from_labels(e as u32, &labels))
            })
            .collect();
        Corpus::from_parts(logs, questions, 1).unwrap()
    }

    #[test]
    fn load_small_file() {
        let csv = "examinee_id,question_id,correct,concept_ids\n\
                   10,7,1,1;2\n\
                   10,8,0,2\n\
                   11,7,0,1;2\n\
                   11,9,1,3\n";
        let (corpus, map) = read_corpus(csv.as_bytes()).unwrap();
        let c = corpus.counts();
        assert_eq!(c.examinees, 2);
        assert!(c.questions <= 4);
        assert!(c.concepts >= 1);
        assert_eq!(c.interactions, 4);
        assert_eq!(map.examinees, vec![10, 11]);
        assert_eq!(map.questions, vec![7, 8, 9]);
        assert_eq!(map.concepts, vec![1, 2, 3]);
        assert_eq!(corpus.questions()[0].concepts, vec![0, 1]);
        // file order preserved per examinee
        let log = corpus.log(1).unwrap();
        assert_eq!(log[0].question, 0);
        assert_eq!(log[1].question, 2);
    }

    #[test]
    fn label_two_is_a_parse_error_with_line() {
        let csv = "examinee_id,question_id,correct,concept_ids\n1,1,1,1\n1,2,2,1\n";
        match read_corpus(csv.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_values_rejected() {
        let csv = "examinee_id,question_id,correct,concept_ids\n1,,1,1\n";
        assert!(matches!(
            read_corpus(csv.as_bytes()),
            Err(DataError::Parse { line: 2, .. })
        ));
        let csv = "examinee_id,question_id,correct,concept_ids\n1,2,1,\n";
        assert!(matches!(
            read_corpus(csv.as_bytes()),
            Err(DataError::Parse { .. })
        ));
    }

    #[test]
    fn bad_header_rejected() {
        let csv = "student,question,correct,skills\n1,2,1,1\n";
        assert!(matches!(
            read_corpus(csv.as_bytes()),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicates_keep_first_attempt() {
        let csv = "examinee_id,question_id,correct,concept_ids\n1,5,0,1\n1,5,1,1\n1,6,1,1\n";
        let (corpus, _) = read_corpus(csv.as_bytes()).unwrap();
        let log = corpus.log(0).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].label, 0);
    }

    #[test]
    fn unknown_question_is_integrity_error() {
        let logs = BTreeMap::from([(0, vec![Interaction::new(0, 3, 1)])]);
        let questions = vec![QuestionMeta {
            id: 0,
            concepts: vec![0],
        }];
        assert!(matches!(
            Corpus::from_parts(logs, questions, 1),
            Err(DataError::Integrity(_))
        ));
    }

    #[test]
    fn filter_threshold_is_inclusive() {
        let corpus = corpus_with_lengths(&[39, 40]);
        let kept = filter_min_interactions(&corpus, 40);
        assert_eq!(kept.examinee_ids().collect::<Vec<_>>(), vec![1]);
        assert_eq!(kept.counts().interactions, 40);
        assert_eq!(filter_min_interactions(&corpus, 1), corpus);
        let none = filter_min_interactions(&corpus, 100);
        assert_eq!(none.counts().examinees, 0);
    }

    #[test]
    fn examinee_split_sizes() {
        let corpus = corpus_with_lengths(&[3; 10]);
        let s = split_examinees(&corpus, [0.6, 0.2, 0.2], 4).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, split_examinees(&corpus, [0.6, 0.2, 0.2], 4).unwrap());
        let mut all: Vec<u32> = s
            .train
            .iter()
            .chain(&s.valid)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn examinee_split_full_scale_sizes() {
        // 0.6 * 1360 = 816, 0.2 * 1360 = 272, remainder 272
        let corpus = corpus_with_lengths(&vec![1; 1360]);
        let s = split_examinees(&corpus, [0.6, 0.2, 0.2], 0).unwrap();
        assert_eq!(
            (s.train.len(), s.valid.len(), s.test.len()),
            (816, 272, 272)
        );
    }

    #[test]
    fn bad_ratios_rejected() {
        let corpus = corpus_with_lengths(&[3; 4]);
        assert!(matches!(
            split_examinees(&corpus, [0.6, 0.3, 0.2], 0),
            Err(DataError::Ratios(_))
        ));
    }

    #[test]
    fn resplit_sizes_and_determinism() {
        let log = log_from_labels(3, &[1, 0, 1, 1, 0, 1, 0, 1, 1, 1]);
        let s = resplit_support_meta(&log, 0.2, 9, 0).unwrap();
        assert_eq!((s.support.len(), s.meta.len()), (8, 2));
        assert_eq!(s, resplit_support_meta(&log, 0.2, 9, 0).unwrap());
        let single = resplit_support_meta(&log[..1], 0.2, 9, 0).unwrap();
        assert!(!single.usable());
        assert_eq!(single.support.len(), 1);
        let two = resplit_support_meta(&log[..2], 0.2, 9, 0).unwrap();
        assert_eq!(two.meta.len(), 1);
        assert!(resplit_support_meta(&[], 0.2, 0, 0).is_err());
    }

    #[test]
    fn epochs_give_fresh_splits() {
        let corpus = corpus_with_lengths(&[12; 20]);
        let mut differs = false;
        for (_, log) in corpus.logs() {
            let a = resplit_support_meta(log, 0.2, 1, 0).unwrap();
            let b = resplit_support_meta(log, 0.2, 1, 1).unwrap();
            differs |= a.meta != b.meta;
        }
        assert!(differs);
    }

    #[test]
    fn ood_examples() {
        // n=10, 7 correct / 3 incorrect -> one pair
        let log = log_from_labels(0, &[1, 1, 0, 1, 1, 0, 1, 1, 0, 1]);
        match build_ood_meta(&log, 0.2, 0).unwrap() {
            OodSplit::Balanced(s) => {
                assert_eq!(s.meta.len(), 2);
                assert_eq!(s.meta.iter().filter(|i| i.correct()).count(), 1);
                assert_eq!(s.support.len(), 8);
            }
            other => panic!("{other:?}"),
        }
        let all_correct = log_from_labels(0, &[1; 10]);
        assert!(matches!(
            build_ood_meta(&all_correct, 0.2, 0).unwrap(),
            OodSplit::Excluded {
                pairs: 1,
                correct: 10,
                incorrect: 0,
                ..
            }
        ));
        let even: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        match build_ood_meta(&log_from_labels(0, &even), 0.2, 0).unwrap() {
            OodSplit::Balanced(s) => {
                assert_eq!(s.meta.len(), 4);
                assert_eq!(s.meta.iter().filter(|i| i.correct()).count(), 2);
                assert_eq!(s.support.len(), 16);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn attribute_boundaries() {
        assert_eq!(Attribute::from_ratio(0.40), Attribute::A);
        assert_eq!(Attribute::from_ratio(0.60), Attribute::B);
        assert_eq!(Attribute::from_ratio(0.61), Attribute::C);
        assert_eq!(Attribute::from_counts(2, 5).unwrap(), Attribute::A);
        assert_eq!(Attribute::from_counts(3, 5).unwrap(), Attribute::B);
        assert_eq!(Attribute::from_counts(61, 100).unwrap(), Attribute::C);
        assert!(matches!(attribute_of(&[]), Err(DataError::EmptyLog)));
    }

    #[test]
    fn group_tags() {
        assert_eq!(group_key(Attribute::A, 1).bias(), Bias::Conflicting);
        assert_eq!(group_key(Attribute::C, 1).bias(), Bias::Aligned);
        assert_eq!(group_key(Attribute::B, 0).bias(), Bias::Unbiased);
        assert_eq!(group_key(Attribute::A, 0).bias(), Bias::Aligned);
        assert_eq!(group_key(Attribute::C, 0).bias(), Bias::Conflicting);
        let keys: Vec<GroupKey> = GroupKey::all().collect();
        assert_eq!(keys.len(), 6);
        for (i, k) in keys.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(GroupKey::from_index(i), *k);
        }
    }
}
