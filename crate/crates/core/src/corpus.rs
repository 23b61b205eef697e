//! Synthetic attribute corpus with Boolean queries and exact set-semantics answers.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::PAD;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::operators::{OperatorKind, NUM_OPERATORS};

/// Attribute categories; a document takes exactly one value from each.
pub const CATEGORIES: [(&str, &[&str]); 5] = [
    ("color", &["red", "blue", "green", "yellow", "black", "white", "purple", "orange"]),
    ("shape", &["round", "square", "oval", "flat", "long", "curved"]),
    ("material", &["wooden", "metal", "plastic", "glass", "leather", "stone"]),
    ("size", &["tiny", "small", "large", "huge"]),
    ("origin", &["french", "german", "italian", "spanish", "greek", "dutch", "polish", "swiss"]),
];

/// Cue phrases and the operator they signal. Multi-word phrases label every word.
pub const CUE_PHRASES: [(&str, OperatorKind); 8] = [
    ("and", OperatorKind::And),
    ("as well as", OperatorKind::And),
    ("are also", OperatorKind::And),
    ("including", OperatorKind::And),
    ("or", OperatorKind::Or),
    ("not", OperatorKind::Not),
    ("other than", OperatorKind::Not),
    ("excluding", OperatorKind::Not),
];

/// Number of query templates.
pub const NUM_TEMPLATES: usize = 7;

/// Surface form of each template over attribute slots A, B, C.
pub const TEMPLATES: [&str; NUM_TEMPLATES] =
    ["A", "A and B", "A or B", "A not B", "A or B and C", "A and B or C", "A and B not C"];

/// Whitespace vocabulary: padding, cue words, attribute values.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words = vec!["<pad>".to_string()];
        for (phrase, _) in CUE_PHRASES {
            for w in phrase.split(' ') {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        for (_, values) in CATEGORIES {
            words.extend(values.iter().map(|v| v.to_string()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::InvalidArgument(format!("unknown word `{w}`"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter(|&&i| i != PAD).map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Per-token cue labels found by matching [`CUE_PHRASES`], longest phrase first.
pub fn label_cues(words: &[&str]) -> Vec<Option<OperatorKind>> {
    let mut phrases: Vec<(Vec<&str>, OperatorKind)> =
        CUE_PHRASES.iter().map(|(p, op)| (p.split(' ').collect(), *op)).collect();
    phrases.sort_by_key(|(p, _)| std::cmp::Reverse(p.len()));
    let mut out = vec![None; words.len()];
    let mut i = 0;
    while i < words.len() {
        match phrases.iter().find(|(p, _)| words[i..].starts_with(p)) {
            Some((p, op)) => {
                out[i..i + p.len()].iter_mut().for_each(|o| *o = Some(*op));
                i += p.len();
            }
            None => i += 1,
        }
    }
    out
}

/// Operators present in a token sequence according to [`label_cues`].
pub fn operators_of(labels: &[Option<OperatorKind>]) -> [bool; NUM_OPERATORS] {
    let mut ops = [false; NUM_OPERATORS];
    labels.iter().flatten().for_each(|op| ops[op.code()] = true);
    ops
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: usize,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: usize,
    /// 1-based template number.
    pub template: usize,
    pub text: String,
    pub operators: Vec<OperatorKind>,
    pub answer_ids: Vec<usize>,
    pub split: Split,
}

impl Query {
    pub fn gate_labels(&self) -> [bool; NUM_OPERATORS] {
        let mut g = [false; NUM_OPERATORS];
        self.operators.iter().for_each(|op| g[op.code()] = true);
        g
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_documents: usize,
    pub num_queries: usize,
    pub val_queries: usize,
    pub test_queries: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { num_documents: 500, num_queries: 300, val_queries: 40, test_queries: 60 }
    }
}

/// An attribute value as `(category, value)` indices.
pub type Attribute = (usize, usize);

pub fn attribute_word((c, v): Attribute) -> &'static str {
    CATEGORIES[c].1[v]
}

/// Documents as attribute tuples, one value per category.
pub fn sample_documents(n: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    (0..n).map(|_| CATEGORIES.iter().map(|(_, vals)| rng.below(vals.len())).collect()).collect()
}

/// Exact answer set of a template instantiated with `attrs`.
pub fn answer_set(template: usize, attrs: &[Attribute], docs: &[Vec<usize>]) -> BTreeSet<usize> {
    let has = |d: &Vec<usize>, k: usize| d[attrs[k].0] == attrs[k].1;
    docs.iter()
        .enumerate()
        .filter(|(_, d)| match template {
            1 => has(d, 0),
            2 => has(d, 0) && has(d, 1),
            3 => has(d, 0) || has(d, 1),
            4 => has(d, 0) && !has(d, 1),
            5 => has(d, 0) || (has(d, 1) && has(d, 2)),
            6 => (has(d, 0) && has(d, 1)) || has(d, 2),
            7 => has(d, 0) && has(d, 1) && !has(d, 2),
            _ => false,
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn template_slots(template: usize) -> usize {
    match template {
        1 => 1,
        2..=4 => 2,
        _ => 3,
    }
}

pub fn template_operators(template: usize) -> Vec<OperatorKind> {
    use OperatorKind::*;
    match template {
        2 => vec![And],
        3 => vec![Or],
        4 => vec![Not],
        5 | 6 => vec![And, Or],
        7 => vec![And, Not],
        _ => vec![],
    }
}

pub fn render(template: usize, attrs: &[Attribute]) -> String {
    TEMPLATES[template - 1]
        .split(' ')
        .map(|w| match w {
            "A" => attribute_word(attrs[0]),
            "B" => attribute_word(attrs[1]),
            "C" => attribute_word(attrs[2]),
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Attributes from distinct categories.
pub fn sample_attributes(slots: usize, rng: &mut Rng) -> Vec<Attribute> {
    let mut cats: Vec<usize> = (0..CATEGORIES.len()).collect();
    rng.shuffle(&mut cats);
    cats[..slots].iter().map(|&c| (c, rng.below(CATEGORIES[c].1.len()))).collect()
}

const MAX_RETRIES: usize = 100;

/// Samples a satisfiable instance of `template`, or `None` after bounded retries.
pub fn sample_query(template: usize, docs: &[Vec<usize>], rng: &mut Rng) -> Option<(Vec<Attribute>, BTreeSet<usize>)> {
    (0..MAX_RETRIES).find_map(|_| {
        let attrs = sample_attributes(template_slots(template), rng);
        let answers = answer_set(template, &attrs, docs);
        (!answers.is_empty()).then_some((attrs, answers))
    })
}

pub fn render_document(doc: &[usize]) -> String {
    doc.iter().enumerate().map(|(c, &v)| attribute_word((c, v))).collect::<Vec<_>>().join(" ")
}

/// Builds a corpus; templates cycle so every template is equally represented.
pub fn generate_corpus(config: &CorpusConfig, rng: &mut Rng) -> Result<SyntheticCorpus> {
    if config.num_documents < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 documents, got {}", config.num_documents)));
    }
    if config.val_queries + config.test_queries > config.num_queries {
        return Err(Error::InvalidArgument("validation and test splits exceed the query count".into()));
    }
    let docs = sample_documents(config.num_documents, rng);
    let documents = docs.iter().enumerate().map(|(id, d)| Document { id, text: render_document(d) }).collect();
    let mut queries = Vec::with_capacity(config.num_queries);
    let mut attempt = 0;
    while queries.len() < config.num_queries && attempt < config.num_queries * 4 {
        let template = attempt % NUM_TEMPLATES + 1;
        attempt += 1;
        let Some((attrs, answers)) = sample_query(template, &docs, rng) else {
            log::warn!("template {template} unsatisfiable after {MAX_RETRIES} retries; skipped");
            continue;
        };
        queries.push(Query {
            id: queries.len(),
            template,
            text: render(template, &attrs),
            operators: template_operators(template),
            answer_ids: answers.into_iter().collect(),
            split: Split::Train,
        });
    }
    let mut order: Vec<usize> = (0..queries.len()).collect();
    rng.shuffle(&mut order);
    for (rank, &i) in order.iter().enumerate() {
        queries[i].split = if rank < config.val_queries {
            Split::Val
        } else if rank < config.val_queries + config.test_queries {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(SyntheticCorpus { documents, queries })
}

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

impl SyntheticCorpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(DOCUMENTS_FILE), &self.documents)?;
        write_jsonl(&dir.join(QUERIES_FILE), &self.queries)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corpus = Self {
            documents: read_jsonl(&dir.join(DOCUMENTS_FILE))?,
            queries: read_jsonl(&dir.join(QUERIES_FILE))?,
        };
        let n = corpus.documents.len();
        for q in &corpus.queries {
            if q.answer_ids.is_empty() {
                return Err(Error::EmptyAnswerSet);
            }
            if let Some(bad) = q.answer_ids.iter().find(|&&a| a >= n) {
                return Err(Error::InvalidArgument(format!("query {} answers unknown document {bad}", q.id)));
            }
        }
        Ok(corpus)
    }

    pub fn split(&self, split: Split) -> Vec<&Query> {
        self.queries.iter().filter(|q| q.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<Vec<usize>> {
        sample_documents(200, &mut Rng::new(1))
    }

    fn set(docs: &[Vec<usize>], a: Attribute) -> BTreeSet<usize> {
        answer_set(1, &[a], docs)
    }

    #[test]
    fn set_semantics() {
        let d = docs();
        let (a, b, c) = ((0, 1), (1, 2), (2, 0));
        let (sa, sb, sc) = (set(&d, a), set(&d, b), set(&d, c));
        assert_eq!(answer_set(2, &[a, b], &d), &sa & &sb);
        assert_eq!(answer_set(3, &[a, b], &d), &sa | &sb);
        assert_eq!(answer_set(4, &[a, b], &d), &sa - &sb);
        assert_eq!(answer_set(5, &[a, b, c], &d), &sa | &(&sb & &sc));
        assert_eq!(answer_set(6, &[a, b, c], &d), &(&sa & &sb) | &sc);
        assert_eq!(answer_set(7, &[a, b, c], &d), &(&sa & &sb) - &sc);
    }

    #[test]
    fn de_morgan_holds_on_generated_sets() {
        let d = docs();
        let all: BTreeSet<usize> = (0..d.len()).collect();
        for (a, b) in [((0, 1), (1, 2)), ((3, 0), (4, 7))] {
            let not_and = &all - &answer_set(2, &[a, b], &d);
            let or_nots = &(&all - &set(&d, a)) | &(&all - &set(&d, b));
            assert_eq!(not_and, or_nots);
        }
    }

    #[test]
    fn cue_labeling_by_word_matching() {
        let words = ["red", "as", "well", "as", "round", "other", "than", "metal", "or", "tiny"];
        let l = label_cues(&words);
        use OperatorKind::*;
        assert_eq!(l, vec![None, Some(And), Some(And), Some(And), None, Some(Not), Some(Not), None, Some(Or), None]);
        assert_eq!(operators_of(&l), [true, true, true]);
        assert_eq!(label_cues(&["red"]), vec![None]);
    }

    #[test]
    fn generated_corpus_is_consistent() {
        let c = generate_corpus(&CorpusConfig::default(), &mut Rng::new(0)).unwrap();
        let vocab = Vocab::default();
        assert_eq!(c.documents.len(), 500);
        assert_eq!(c.queries.len(), 300);
        assert_eq!(c.split(Split::Val).len(), 40);
        assert_eq!(c.split(Split::Test).len(), 60);
        for q in &c.queries {
            assert!(!q.answer_ids.is_empty());
            let ids = vocab.encode(&q.text).unwrap();
            let words: Vec<&str> = q.text.split(' ').collect();
            let ops = operators_of(&label_cues(&words));
            assert_eq!(ops, q.gate_labels(), "{}", q.text);
            assert_eq!(vocab.decode(&ids), q.text);
        }
        for t in 1..=NUM_TEMPLATES {
            assert!(c.queries.iter().filter(|q| q.template == t).count() >= 40);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = CorpusConfig { num_documents: 30, num_queries: 14, val_queries: 2, test_queries: 2 };
        assert_eq!(generate_corpus(&cfg, &mut Rng::new(3)).unwrap(), generate_corpus(&cfg, &mut Rng::new(3)).unwrap());
        let small = CorpusConfig { num_documents: 9, ..cfg };
        assert!(generate_corpus(&small, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = CorpusConfig { num_documents: 20, num_queries: 14, val_queries: 2, test_queries: 2 };
        let c = generate_corpus(&cfg, &mut Rng::new(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(SyntheticCorpus::load(dir.path()).unwrap(), c);
        let first = std::fs::read_to_string(dir.path().join(QUERIES_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["id", "template", "text", "operators", "answer_ids"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
