//! Document-level pipelines: disambiguation of a marked mention, and full
//! linking by sliding windows, retrieval, reading, grounding and overlap
//! resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{target_ids, FusionModel, Seq2SeqExample};
use crate::grammar::{ed_target, parse_el, resolve_entity, serialize_el, ElPrediction, LinkedEntity, ParseMode, TargetMode};
use crate::kb::{AnnotatedDocument, Annotation, CandidateMap, Entity, EntityStore};
use crate::retriever::{RetrieverModel, VectorIndex};
use crate::text::{
    build_ed_input, build_el_input, char_slice, chunk_passages, mark_mention, normalize_ws, split,
    truncated_document, Passage, Tokenizer, ED_CONTEXT_BUDGET, ED_ENTITY_BUDGET, STRIDE, WINDOW,
};

/// Upper bound on disambiguation candidates before the reader's own limit.
pub const ED_CANDIDATES: usize = 200;
pub const EL_TOP_K: usize = 100;

/// Where an annotation came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    /// Document character offset of the window.
    pub window_offset: usize,
    pub decoded: String,
}

/// A decoded mention that could not be placed in its window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dropped {
    pub window_offset: usize,
    pub title: String,
    pub mention: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkResult {
    pub doc_id: String,
    pub annotations: Vec<Annotation>,
    #[serde(skip)]
    pub provenance: Vec<Provenance>,
    #[serde(skip)]
    pub dropped: Vec<Dropped>,
}

impl LinkResult {
    /// Annotations are sorted by `(start, end, entity_id)`.
    pub fn new(doc_id: &str, mut annotations: Vec<Annotation>) -> Self {
        annotations.sort();
        LinkResult {
            doc_id: doc_id.to_string(),
            annotations,
            provenance: Vec::new(),
            dropped: Vec::new(),
        }
    }

    pub fn from_document(doc: &AnnotatedDocument) -> Self {
        Self::new(&doc.doc_id, doc.annotations.clone())
    }
}

pub fn read_results(path: &Path) -> Result<Vec<LinkResult>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_results(path: &Path, results: &[LinkResult]) -> Result<()> {
    crate::kb::write_jsonl(path, results)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ReaderMeta {
    mode: String,
    max_decode: usize,
}

/// A fusion model with its vocabulary and decoding settings.
#[derive(Clone, Debug)]
pub struct Reader {
    pub model: FusionModel,
    pub tokenizer: Tokenizer,
    pub mode: TargetMode,
    pub max_decode: usize,
}

impl Reader {
    pub fn new(model: FusionModel, tokenizer: Tokenizer, mode: TargetMode) -> Self {
        let max_decode = model.config().max_target_len;
        Reader {
            model,
            tokenizer,
            mode,
            max_decode,
        }
    }

    /// Candidate limit: the model's own bound.
    pub fn max_candidates(&self) -> usize {
        self.model.config().max_candidates
    }

    fn segment_ids(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = self.tokenizer.ids(tokens);
        ids.truncate(self.model.config().max_segment_len);
        ids
    }

    /// Greedy decode over the fused inputs, detokenized with single spaces.
    pub fn read(&self, inputs: &[Vec<String>]) -> Result<String> {
        let ids: Vec<Vec<usize>> = inputs.iter().map(|t| self.segment_ids(t)).collect();
        let fused = self.model.encode_candidates(&ids)?;
        let out = self.model.greedy_decode(&fused, self.max_decode);
        Ok(self.tokenizer.decode(&out))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        self.tokenizer.write_vocab(&dir.join("vocab.txt"))?;
        let meta = ReaderMeta {
            mode: self.mode.to_string(),
            max_decode: self.max_decode,
        };
        let p = dir.join("reader.json");
        fs::write(&p, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = FusionModel::load(dir)?;
        let tokenizer = Tokenizer::read_vocab(&dir.join("vocab.txt"))?;
        let p = dir.join("reader.json");
        let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: ReaderMeta = serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
        Ok(Reader {
            model,
            tokenizer,
            mode: meta.mode.parse()?,
            max_decode: meta.max_decode,
        })
    }
}

fn lookup<'a>(store: &'a EntityStore, ids: &[String]) -> Vec<&'a Entity> {
    ids.iter().filter_map(|id| store.get(id)).collect()
}

/// Ordered candidate entities for a surface, capped at the reader's limit.
pub fn ed_candidates(surface: &str, store: &EntityStore, map: &CandidateMap, limit: usize) -> Result<Vec<Entity>> {
    let ids = map.candidates_for(surface, ED_CANDIDATES.min(limit));
    let cands: Vec<Entity> = lookup(store, &ids).into_iter().cloned().collect();
    if cands.is_empty() {
        return Err(Error::NoCandidates {
            surface: surface.to_string(),
        });
    }
    Ok(cands)
}

fn ed_inputs(context: &[String], cands: &[Entity]) -> Vec<Vec<String>> {
    cands
        .iter()
        .map(|e| build_ed_input(context, e, ED_ENTITY_BUDGET))
        .collect()
}

/// Links the mention at character span `[start, end)` of `doc`.
pub fn disambiguate(
    doc: &str,
    span: (usize, usize),
    store: &EntityStore,
    map: &CandidateMap,
    reader: &Reader,
) -> Result<Option<String>> {
    let context = mark_mention(doc, span.0, span.1, ED_CONTEXT_BUDGET)?;
    let surface = char_slice(doc, span.0, span.1);
    let cands = ed_candidates(surface, store, map, reader.max_candidates())?;
    if cands.len() == 1 && reader.mode == TargetMode::Index {
        return Ok(Some(cands[0].id.clone()));
    }
    let decoded = reader.read(&ed_inputs(&context, &cands))?;
    Ok(resolve_entity(&decoded, &cands, reader.mode).map(|e| e.id.clone()))
}

/// Training pairs for disambiguation. The gold entity is always among the
/// candidates: if the list misses it, it replaces the last entry.
pub fn ed_examples(
    docs: &[AnnotatedDocument],
    store: &EntityStore,
    map: &CandidateMap,
    reader_tok: &Tokenizer,
    mode: TargetMode,
    limit: usize,
    max_segment_len: usize,
) -> Result<Vec<Seq2SeqExample>> {
    let mut out = Vec::new();
    for doc in docs {
        for a in &doc.annotations {
            let Some(gold) = store.get(&a.entity_id) else { continue };
            let surface = doc.surface(a);
            let mut cands: Vec<Entity> = lookup(store, &map.candidates_for(surface, ED_CANDIDATES.min(limit)))
                .into_iter()
                .cloned()
                .collect();
            let gi = match cands.iter().position(|e| e.id == gold.id) {
                Some(i) => i,
                None => {
                    if cands.len() >= limit {
                        cands.pop();
                    }
                    cands.push(gold.clone());
                    cands.len() - 1
                }
            };
            let context = mark_mention(&doc.text, a.start, a.end, ED_CONTEXT_BUDGET)?;
            let inputs = ed_inputs(&context, &cands)
                .iter()
                .map(|t| {
                    let mut ids = reader_tok.ids(t);
                    ids.truncate(max_segment_len);
                    ids
                })
                .collect();
            out.push(Seq2SeqExample {
                inputs,
                target: target_ids(reader_tok, &ed_target(&cands, gi, mode)),
            });
        }
    }
    Ok(out)
}

/// All non-overlapping left-to-right occurrences of `mention` in the
/// passage, matched on whole tokens. Returns passage-local character spans.
pub fn ground_mentions(p: &Passage, mention: &str) -> Vec<(usize, usize)> {
    let needle: Vec<String> = split(mention).into_iter().map(|t| t.text).collect();
    let mut out = Vec::new();
    if needle.is_empty() {
        return out;
    }
    let n = needle.len();
    let mut i = 0;
    while i + n <= p.tokens.len() {
        if p.tokens[i..i + n].iter().zip(&needle).all(|(t, w)| t.text == *w) {
            out.push((p.tokens[i].start, p.tokens[i + n - 1].end));
            i += n;
        } else {
            i += 1;
        }
    }
    out
}

/// Removes exact duplicates, then keeps spans greedily by length (longest
/// first, earlier start first). A span survives only if it does not overlap
/// a kept span; every entity on a surviving span is kept.
pub fn resolve_overlaps(annotations: &[Annotation]) -> Vec<Annotation> {
    let mut by_span: BTreeMap<(usize, usize), BTreeSet<String>> = BTreeMap::new();
    for a in annotations {
        by_span.entry((a.start, a.end)).or_default().insert(a.entity_id.clone());
    }
    let mut spans: Vec<(usize, usize)> = by_span.keys().copied().collect();
    spans.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for s in spans {
        if kept.iter().all(|k| s.1 <= k.0 || k.1 <= s.0) {
            kept.push(s);
        }
    }
    kept.sort();
    kept.into_iter()
        .flat_map(|s| {
            by_span[&s].iter().map(move |id| Annotation {
                start: s.0,
                end: s.1,
                entity_id: id.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub window: usize,
    pub stride: usize,
    pub k: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            window: WINDOW,
            stride: STRIDE,
            k: EL_TOP_K,
        }
    }
}

struct WindowOutput {
    annotations: Vec<(Annotation, Provenance)>,
    dropped: Vec<Dropped>,
}

fn el_inputs(doc_trunc: &[String], p: &Passage, cands: &[&Entity]) -> Result<Vec<Vec<String>>> {
    let words = p.words();
    cands
        .iter()
        .map(|e| build_el_input(doc_trunc, &words, e, ED_ENTITY_BUDGET))
        .collect()
}

fn link_window(
    p: &Passage,
    doc_trunc: &[String],
    store: &EntityStore,
    retriever: &RetrieverModel,
    index: &VectorIndex,
    reader: &Reader,
    k: usize,
) -> Result<WindowOutput> {
    let hits = index.top_k(&retriever.encode_passage(p), k.min(reader.max_candidates()))?;
    let ids: Vec<String> = hits.into_iter().map(|h| h.0).collect();
    let cands: Vec<Entity> = lookup(store, &ids).into_iter().cloned().collect();
    let refs: Vec<&Entity> = cands.iter().collect();
    let decoded = reader.read(&el_inputs(doc_trunc, p, &refs)?)?;
    let pred = parse_el(&decoded, ParseMode::Lenient)?;
    let mut out = WindowOutput {
        annotations: Vec::new(),
        dropped: Vec::new(),
    };
    for le in pred.entities() {
        let Some(e) = resolve_entity(&le.title, &cands, reader.mode) else {
            log::debug!("{}@{}: {:?} is not a candidate", p.doc_id, p.char_offset, le.title);
            out.dropped.extend(le.mentions.iter().map(|m| Dropped {
                window_offset: p.char_offset,
                title: le.title.clone(),
                mention: m.clone(),
                reason: "title not among candidates".into(),
            }));
            continue;
        };
        for m in &le.mentions {
            let spans = ground_mentions(p, m);
            if spans.is_empty() {
                log::debug!("{}@{}: mention {m:?} not found", p.doc_id, p.char_offset);
                out.dropped.push(Dropped {
                    window_offset: p.char_offset,
                    title: le.title.clone(),
                    mention: m.clone(),
                    reason: "mention not in window".into(),
                });
            }
            for (s, t) in spans {
                let (start, end) = p.to_document_span(s, t);
                out.annotations.push((
                    Annotation {
                        start,
                        end,
                        entity_id: e.id.clone(),
                    },
                    Provenance {
                        window_offset: p.char_offset,
                        decoded: decoded.clone(),
                    },
                ));
            }
        }
    }
    Ok(out)
}

/// Links a whole document. Windows are read independently (in parallel on
/// the current rayon pool) and merged in window order before overlap
/// resolution.
pub fn link_document(
    doc_id: &str,
    text: &str,
    store: &EntityStore,
    retriever: &RetrieverModel,
    index: &VectorIndex,
    reader: &Reader,
    cfg: &LinkConfig,
) -> Result<LinkResult> {
    let toks = split(text);
    if toks.is_empty() {
        return Err(Error::EmptyInput);
    }
    let doc_trunc = truncated_document(&toks);
    let topic = doc_trunc.join(" ");
    let passages = chunk_passages(doc_id, text, &toks, &topic, cfg.window, cfg.stride)?;
    let outputs: Vec<Result<WindowOutput>> = passages
        .par_iter()
        .map(|p| link_window(p, &doc_trunc, store, retriever, index, reader, cfg.k))
        .collect();
    let mut all = Vec::new();
    let mut provenance: BTreeMap<Annotation, Provenance> = BTreeMap::new();
    let mut dropped = Vec::new();
    for o in outputs {
        let o = o?;
        for (a, prov) in o.annotations {
            provenance.entry(a.clone()).or_insert(prov);
            all.push(a);
        }
        dropped.extend(o.dropped);
    }
    let annotations = resolve_overlaps(&all);
    let provenance = annotations.iter().map(|a| provenance[a].clone()).collect();
    Ok(LinkResult {
        doc_id: doc_id.to_string(),
        annotations,
        provenance,
        dropped,
    })
}

/// Gold prediction for one window: entities ordered by their first mention,
/// each with its distinct mention surfaces. Mentions containing a comma
/// cannot be written in the output grammar and are left out.
pub fn window_target(doc: &AnnotatedDocument, p: &Passage, store: &EntityStore) -> ElPrediction {
    let end = p.char_offset + p.text.chars().count();
    let mut anns: Vec<&Annotation> = doc
        .annotations
        .iter()
        .filter(|a| a.start >= p.char_offset && a.end <= end)
        .collect();
    anns.sort();
    let mut ents: Vec<LinkedEntity> = Vec::new();
    for a in anns {
        let Some(e) = store.get(&a.entity_id) else { continue };
        let m = normalize_ws(doc.surface(a));
        if m.contains(',') || m.is_empty() {
            continue;
        }
        match ents.iter_mut().find(|x| x.title == e.title) {
            Some(x) => {
                if !x.mentions.contains(&m) {
                    x.mentions.push(m);
                }
            }
            None => ents.push(LinkedEntity {
                title: e.title.clone(),
                mentions: vec![m],
            }),
        }
    }
    ElPrediction::new(ents).unwrap_or_default()
}

/// Training pairs for the linking reader, one per window. Candidates are the
/// retriever's top hits with any missing gold entity swapped in for the
/// lowest-ranked non-gold hits.
pub fn el_examples(
    docs: &[AnnotatedDocument],
    store: &EntityStore,
    retriever: &RetrieverModel,
    index: &VectorIndex,
    reader_tok: &Tokenizer,
    cfg: &LinkConfig,
    limit: usize,
    max_segment_len: usize,
) -> Result<Vec<Seq2SeqExample>> {
    let mut out = Vec::new();
    let k = cfg.k.min(limit);
    for doc in docs {
        let toks = split(&doc.text);
        if toks.is_empty() {
            continue;
        }
        let doc_trunc = truncated_document(&toks);
        let topic = doc_trunc.join(" ");
        for p in chunk_passages(&doc.doc_id, &doc.text, &toks, &topic, cfg.window, cfg.stride)? {
            let target = window_target(doc, &p, store);
            let gold: Vec<&Entity> = target
                .entities()
                .iter()
                .filter_map(|le| store.by_title(&le.title))
                .collect();
            let mut ids: Vec<String> = index
                .top_k(&retriever.encode_passage(&p), k)?
                .into_iter()
                .map(|h| h.0)
                .collect();
            for g in gold.iter().take(k) {
                if ids.contains(&g.id) {
                    continue;
                }
                if ids.len() >= k {
                    let drop = ids
                        .iter()
                        .rposition(|id| !gold.iter().any(|g| &g.id == id))
                        .expect("fewer gold entities than slots");
                    ids.remove(drop);
                }
                ids.push(g.id.clone());
            }
            let cands = lookup(store, &ids);
            let inputs = el_inputs(&doc_trunc, &p, &cands)?
                .iter()
                .map(|t| {
                    let mut v = reader_tok.ids(t);
                    v.truncate(max_segment_len);
                    v
                })
                .collect();
            out.push(Seq2SeqExample {
                inputs,
                target: target_ids(reader_tok, &serialize_el(&target)),
            });
        }
    }
    Ok(out)
}
