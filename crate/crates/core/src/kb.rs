//! Knowledge-base entities, candidate lists, mention/entity priors and the
//! candidate-quality metrics built on them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::text::char_slice;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntityStore {
    entities: Vec<Entity>,
    by_id: HashMap<String, usize>,
    by_title: HashMap<String, usize>,
}

impl EntityStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, e: Entity, line: usize) -> Result<()> {
        if e.title.trim().is_empty() {
            return Err(Error::EmptyTitle { line });
        }
        if self.by_title.contains_key(&e.title) {
            return Err(Error::DuplicateTitle {
                line,
                title: e.title,
            });
        }
        if self.by_id.contains_key(&e.id) {
            return Err(Error::DuplicateId { line, id: e.id });
        }
        let i = self.entities.len();
        self.by_id.insert(e.id.clone(), i);
        self.by_title.insert(e.title.clone(), i);
        self.entities.push(e);
        Ok(())
    }

    pub fn from_entities(entities: impl IntoIterator<Item = Entity>) -> Result<Self> {
        let mut s = Self::new();
        for (i, e) in entities.into_iter().enumerate() {
            s.insert(e, i + 1)?;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.by_id.get(id).map(|&i| &self.entities[i])
    }

    pub fn by_title(&self, title: &str) -> Option<&Entity> {
        self.by_title.get(title).map(|&i| &self.entities[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter()
    }
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, lineno: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
        line: lineno,
        message: e.to_string(),
    })
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads `{id, title, description}` JSON lines. Blank lines are skipped;
/// errors report 1-based line numbers.
pub fn ingest_entities(reader: impl BufRead) -> Result<EntityStore> {
    let mut store = EntityStore::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Entity = parse_line(&line, lineno)?;
        store.insert(e, lineno)?;
    }
    Ok(store)
}

pub fn load_entities(path: &Path) -> Result<EntityStore> {
    ingest_entities(open(path)?)
}

pub fn write_entities(path: &Path, store: &EntityStore) -> Result<()> {
    write_jsonl(path, store.iter())
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable record");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Candidate-map key form: NFC, whitespace runs collapsed to one space,
/// trimmed. Case is preserved.
pub fn normalize_surface(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CandidateMap {
    lists: HashMap<String, Vec<String>>,
}

#[derive(Deserialize, Serialize)]
struct CandidateRecord {
    mention: String,
    candidates: Vec<String>,
}

impl CandidateMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or extends) the list for `surface`, dropping repeated ids.
    pub fn insert(&mut self, surface: &str, ids: impl IntoIterator<Item = String>) {
        let list = self.lists.entry(normalize_surface(surface)).or_default();
        for id in ids {
            if !list.contains(&id) {
                list.push(id);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn list(&self, surface: &str) -> &[String] {
        self.lists
            .get(&normalize_surface(surface))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn candidates_for(&self, surface: &str, k: usize) -> Vec<String> {
        self.list(surface).iter().take(k).cloned().collect()
    }

    /// Reads `{mention, candidates}` JSON lines; every id must exist in
    /// `store`.
    pub fn read(reader: impl BufRead, store: &EntityStore) -> Result<Self> {
        let mut map = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::MalformedRecord {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CandidateRecord = parse_line(&line, lineno)?;
            if let Some(bad) = rec.candidates.iter().find(|id| !store.contains(id)) {
                return Err(Error::UnknownEntity {
                    line: lineno,
                    id: bad.clone(),
                });
            }
            map.insert(&rec.mention, rec.candidates);
        }
        Ok(map)
    }

    pub fn load(path: &Path, store: &EntityStore) -> Result<Self> {
        Self::read(open(path)?, store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut keys: Vec<&String> = self.lists.keys().collect();
        keys.sort();
        let recs: Vec<CandidateRecord> = keys
            .into_iter()
            .map(|k| CandidateRecord {
                mention: k.clone(),
                candidates: self.lists[k].clone(),
            })
            .collect();
        write_jsonl(path, &recs)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub entity_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl AnnotatedDocument {
    pub fn surface(&self, a: &Annotation) -> &str {
        char_slice(&self.text, a.start, a.end)
    }
}

pub fn read_corpus(reader: impl BufRead) -> Result<Vec<AnnotatedDocument>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let d: AnnotatedDocument = parse_line(&line, lineno)?;
        let len = d.text.chars().count();
        if let Some(a) = d.annotations.iter().find(|a| a.start >= a.end || a.end > len) {
            return Err(Error::MalformedRecord {
                line: lineno,
                message: format!("annotation {}..{} outside document of {len} chars", a.start, a.end),
            });
        }
        docs.push(d);
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path) -> Result<Vec<AnnotatedDocument>> {
    read_corpus(open(path)?)
}

pub fn write_corpus(path: &Path, docs: &[AnnotatedDocument]) -> Result<()> {
    write_jsonl(path, docs)
}

/// Fraction of gold annotations whose entity is among the first `k`
/// candidates listed for the annotation's surface form.
pub fn cl_recall(dataset: &[AnnotatedDocument], map: &CandidateMap, k: usize) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    for d in dataset {
        for a in &d.annotations {
            total += 1;
            if map
                .list(d.surface(a))
                .iter()
                .take(k)
                .any(|id| *id == a.entity_id)
            {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(hits as f64 / total as f64)
}

/// Mention/entity co-occurrence counts `c(m, e)` with marginals `c(m)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PriorTable {
    counts: HashMap<String, BTreeMap<String, u64>>,
    totals: HashMap<String, u64>,
}

impl PriorTable {
    pub fn add(&mut self, surface: &str, entity: &str, n: u64) {
        let m = normalize_surface(surface);
        *self
            .counts
            .entry(m.clone())
            .or_default()
            .entry(entity.to_string())
            .or_default() += n;
        *self.totals.entry(m).or_default() += n;
    }

    pub fn count(&self, surface: &str, entity: &str) -> u64 {
        self.counts
            .get(&normalize_surface(surface))
            .and_then(|m| m.get(entity))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, surface: &str) -> u64 {
        self.totals
            .get(&normalize_surface(surface))
            .copied()
            .unwrap_or(0)
    }

    /// `c(m, e) / c(m)`, or `None` when the mention was never seen.
    pub fn prior(&self, surface: &str, entity: &str) -> Option<f64> {
        let t = self.total(surface);
        if t == 0 {
            return None;
        }
        Some(self.count(surface, entity) as f64 / t as f64)
    }

    /// All `(entity, prior)` pairs for a mention, entity ids ascending.
    pub fn distribution(&self, surface: &str) -> Vec<(String, f64)> {
        let t = self.total(surface);
        match self.counts.get(&normalize_surface(surface)) {
            Some(m) if t > 0 => m
                .iter()
                .map(|(e, &c)| (e.clone(), c as f64 / t as f64))
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn mentions(&self) -> impl Iterator<Item = &str> {
        self.totals.keys().map(String::as_str)
    }
}

pub fn compute_prior(corpus: &[AnnotatedDocument]) -> PriorTable {
    let mut t = PriorTable::default();
    for d in corpus {
        for a in &d.annotations {
            t.add(d.surface(a), &a.entity_id, 1);
        }
    }
    t
}

/// Difficulty bracket of a gold entity's prior. Boundaries belong to the
/// higher bracket; an exact 1.0 has its own bracket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bracket {
    One,
    From09To1,
    From08To09,
    From07To08,
    From06To07,
    From05To06,
    From04To05,
    From03To04,
    Below,
}

impl Bracket {
    pub const ALL: [Bracket; 9] = [
        Bracket::One,
        Bracket::From09To1,
        Bracket::From08To09,
        Bracket::From07To08,
        Bracket::From06To07,
        Bracket::From05To06,
        Bracket::From04To05,
        Bracket::From03To04,
        Bracket::Below,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Bracket::One => "1",
            Bracket::From09To1 => "[1 - 0.9]",
            Bracket::From08To09 => "[0.9 - 0.8]",
            Bracket::From07To08 => "[0.8 - 0.7]",
            Bracket::From06To07 => "[0.7 - 0.6]",
            Bracket::From05To06 => "[0.6 - 0.5]",
            Bracket::From04To05 => "[0.5 - 0.4]",
            Bracket::From03To04 => "[0.4 - 0.3]",
            Bracket::Below => "below",
        }
    }
}

impl fmt::Display for Bracket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn difficulty_bracket(prior: Option<f64>) -> Result<Bracket> {
    let Some(p) = prior else {
        return Ok(Bracket::Below);
    };
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange(p));
    }
    Ok(if p == 1.0 {
        Bracket::One
    } else if p >= 0.9 {
        Bracket::From09To1
    } else if p >= 0.8 {
        Bracket::From08To09
    } else if p >= 0.7 {
        Bracket::From07To08
    } else if p >= 0.6 {
        Bracket::From06To07
    } else if p >= 0.5 {
        Bracket::From05To06
    } else if p >= 0.4 {
        Bracket::From04To05
    } else if p >= 0.3 {
        Bracket::From03To04
    } else {
        Bracket::Below
    })
}
