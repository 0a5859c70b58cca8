//! Bi-encoder entity retrieval.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::fusion::CurvePoint;
use crate::kb::{AnnotatedDocument, Entity, EntityStore};
use crate::nn::{
    embedding_table, finite_difference_check, linear_schedule, load_params, read_matrix, save_params,
    write_matrix, Adam, EncoderStack, GradCheckReport,
};
use crate::tensor::{dot, Matrix};
use crate::text::{
    build_retrieval_entity_text, build_retrieval_passage_text, chunk_passages, split, truncated_document,
    Passage, Tokenizer, RETRIEVAL_DESC_BUDGET, UNK,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub desc_budget: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            d_model: 64,
            layers: 2,
            heads: 2,
            ff_width: 128,
            desc_budget: RETRIEVAL_DESC_BUDGET,
        }
    }
}

/// Dot-product score. No normalisation.
pub fn score(e: &[f64], p: &[f64]) -> Result<f64> {
    if e.len() != p.len() {
        return Err(Error::DimensionMismatch {
            left: e.len(),
            right: p.len(),
        });
    }
    Ok(dot(e, p))
}

/// Multi-label NCE from raw scores: the mean over positives of the negative
/// log-probability of that positive against the negatives alone.
pub fn nce_from_scores(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let total: f64 = positives
        .iter()
        .map(|&sp| {
            let m = negatives.iter().fold(sp, |a, &b| a.max(b));
            let z: f64 = (sp - m).exp() + negatives.iter().map(|&s| (s - m).exp()).sum::<f64>();
            m + z.ln() - sp
        })
        .sum();
    Ok(total / positives.len() as f64)
}

#[derive(Clone, Debug)]
pub struct RetrieverModel {
    config: RetrieverConfig,
    tokenizer: Tokenizer,
    params: ParamSet,
    entity_enc: EncoderStack,
    passage_enc: EncoderStack,
}

impl RetrieverModel {
    pub fn new(config: RetrieverConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.heads == 0 || config.d_model % config.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                config.d_model, config.heads
            )));
        }
        if !tokenizer.contains(UNK) {
            return Err(Error::MissingUnk);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d_model, tokenizer.len());
        let mut ps = ParamSet::new();
        let e_embed = ps.add("entity.embed", embedding_table(&mut rng, v, d));
        let entity_enc = EncoderStack::new(&mut ps, &mut rng, "entity", e_embed, d, config.heads, config.ff_width, config.layers);
        let p_embed = ps.add("passage.embed", embedding_table(&mut rng, v, d));
        let passage_enc =
            EncoderStack::new(&mut ps, &mut rng, "passage", p_embed, d, config.heads, config.ff_width, config.layers);
        Ok(RetrieverModel {
            config,
            tokenizer,
            params: ps,
            entity_enc,
            passage_enc,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    pub fn config(&self) -> &RetrieverConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn entity_ids(&self, e: &Entity) -> Vec<usize> {
        self.tokenizer
            .ids(&build_retrieval_entity_text(e, self.config.desc_budget))
    }

    pub fn passage_ids(&self, p: &Passage) -> Vec<usize> {
        self.tokenizer.ids(&build_retrieval_passage_text(p))
    }

    fn pooled(g: &mut Graph, enc: &EncoderStack, ids: &[usize]) -> Var {
        let h = enc.apply(g, ids);
        g.mean_rows(h)
    }

    fn embed_ids(&self, enc: &EncoderStack, ids: &[usize]) -> Vec<f64> {
        let mut g = Graph::new(&self.params);
        let v = Self::pooled(&mut g, enc, ids);
        g.value(v).data().to_vec()
    }

    pub fn encode_entity(&self, e: &Entity) -> Vec<f64> {
        self.embed_ids(&self.entity_enc, &self.entity_ids(e))
    }

    pub fn encode_passage(&self, p: &Passage) -> Vec<f64> {
        self.embed_ids(&self.passage_enc, &self.passage_ids(p))
    }

    fn nce_graph(&self, g: &mut Graph, passage: &[usize], pos: &[Vec<usize>], neg: &[Vec<usize>]) -> Var {
        let p = Self::pooled(g, &self.passage_enc, passage);
        let stack = |g: &mut Graph, seqs: &[Vec<usize>]| -> Var {
            let rows: Vec<Var> = seqs.iter().map(|s| Self::pooled(g, &self.entity_enc, s)).collect();
            g.concat_rows(&rows)
        };
        let pe = stack(g, pos);
        let ps = g.matmul_bt(p, pe);
        let ns = if neg.is_empty() {
            None
        } else {
            let ne = stack(g, neg);
            Some(g.matmul_bt(p, ne))
        };
        let rows: Vec<Var> = (0..pos.len())
            .map(|i| {
                let s = g.slice_cols(ps, i, 1);
                match ns {
                    Some(ns) => g.concat_cols(&[s, ns]),
                    None => s,
                }
            })
            .collect();
        let logits = g.concat_rows(&rows);
        g.cross_entropy(logits, &vec![0; pos.len()])
    }

    fn check_nce(positives: &[&Entity], negatives: &[&Entity]) -> Result<()> {
        if positives.is_empty() {
            return Err(Error::EmptyPositives);
        }
        let pos: HashSet<&str> = positives.iter().map(|e| e.id.as_str()).collect();
        if let Some(e) = negatives.iter().find(|e| pos.contains(e.id.as_str())) {
            return Err(Error::Config(format!("entity {} is both positive and negative", e.id)));
        }
        Ok(())
    }

    fn nce_inputs(&self, positives: &[&Entity], negatives: &[&Entity]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        (
            positives.iter().map(|e| self.entity_ids(e)).collect(),
            negatives.iter().map(|e| self.entity_ids(e)).collect(),
        )
    }

    pub fn nce_loss(&self, passage: &Passage, positives: &[&Entity], negatives: &[&Entity]) -> Result<f64> {
        Self::check_nce(positives, negatives)?;
        let (pos, neg) = self.nce_inputs(positives, negatives);
        Ok(self.nce_with(&self.params, &self.passage_ids(passage), &pos, &neg))
    }

    fn nce_with(&self, params: &ParamSet, passage: &[usize], pos: &[Vec<usize>], neg: &[Vec<usize>]) -> f64 {
        let mut g = Graph::new(params);
        let l = self.nce_graph(&mut g, passage, pos, neg);
        g.scalar(l)
    }

    fn nce_backward_ids(&self, passage: &[usize], pos: &[Vec<usize>], neg: &[Vec<usize>]) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let l = self.nce_graph(&mut g, passage, pos, neg);
        let grads = g.backward(l);
        if let Some(bad) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient {
                param: self.params.name(bad).to_string(),
            });
        }
        Ok((g.scalar(l), grads))
    }

    pub fn nce_backward(&self, passage: &Passage, positives: &[&Entity], negatives: &[&Entity]) -> Result<(f64, Gradients)> {
        Self::check_nce(positives, negatives)?;
        let (pos, neg) = self.nce_inputs(positives, negatives);
        self.nce_backward_ids(&self.passage_ids(passage), &pos, &neg)
    }

    pub fn grad_check(
        &self,
        passage: &Passage,
        positives: &[&Entity],
        negatives: &[&Entity],
        eps: f64,
        per_param: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let (_, grads) = self.nce_backward(passage, positives, negatives)?;
        let (pos, neg) = self.nce_inputs(positives, negatives);
        let pids = self.passage_ids(passage);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(finite_difference_check(
            &self.params,
            &grads,
            |p| self.nce_with(p, &pids, &pos, &neg),
            eps,
            per_param,
            &mut rng,
        ))
    }

    /// NCE training with a mix of uniformly sampled and hard negatives. Hard
    /// negatives come from an entity index that is rebuilt every
    /// `refresh_every` steps.
    pub fn train(
        &mut self,
        store: &EntityStore,
        data: &[RetrievalExample],
        cfg: &RetrieverTrainConfig,
    ) -> Result<Vec<CurvePoint>> {
        let data: Vec<&RetrievalExample> = data.iter().filter(|ex| !ex.gold.is_empty()).collect();
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for ex in &data {
            if let Some(id) = ex.gold.iter().find(|id| !store.contains(id)) {
                return Err(Error::UnknownEntity { line: 0, id: id.clone() });
            }
        }
        let entity_ids: Vec<Vec<usize>> = store.iter().map(|e| self.entity_ids(e)).collect();
        let position = |id: &str| store.iter().position(|e| e.id == id).expect("checked above");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(&self.params);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut index: Option<VectorIndex> = None;
        let mut curve = Vec::with_capacity(cfg.steps);
        let batch = cfg.batch.max(1);
        for step in 1..=cfg.steps {
            if cfg.hard_fraction > 0.0 && (index.is_none() || (cfg.refresh_every > 0 && (step - 1) % cfg.refresh_every == 0)) {
                index = Some(VectorIndex::build(self, store));
            }
            let mut jobs = Vec::with_capacity(batch);
            while jobs.len() < batch {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let ex = data[order[cursor]];
                cursor += 1;
                let gold: HashSet<String> = ex.gold.iter().cloned().collect();
                let n = cfg.negatives.min(store.len() - gold.len());
                let negs = match &index {
                    Some(ix) => {
                        let q = self.encode_passage(&ex.passage);
                        mine_negatives(ix, &q, &gold, n, cfg.hard_fraction, &mut rng)?
                    }
                    None => sample_negatives(store, &gold, &[], n, &mut rng),
                };
                let pids = self.passage_ids(&ex.passage);
                let pos: Vec<Vec<usize>> = ex.gold.iter().map(|id| entity_ids[position(id)].clone()).collect();
                let neg: Vec<Vec<usize>> = negs.iter().map(|id| entity_ids[position(id)].clone()).collect();
                jobs.push((pids, pos, neg));
            }
            let results: Vec<Result<(f64, Gradients)>> = jobs
                .par_iter()
                .map(|(p, pos, neg)| self.nce_backward_ids(p, pos, neg))
                .collect();
            let mut total = Gradients::zeros_like(&self.params);
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                total.add_assign(&g);
            }
            loss /= batch as f64;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { step });
            }
            total.scale(1.0 / batch as f64);
            let lr = linear_schedule(step, cfg.steps, cfg.peak_lr, cfg.warmup);
            adam.step(&mut self.params, &total, lr);
            curve.push(CurvePoint { step, loss, lr });
        }
        Ok(curve)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.json");
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        fs::write(&p, cfg).map_err(|e| Error::io(&p, e))?;
        self.tokenizer.write_vocab(&dir.join("vocab.txt"))?;
        save_params(dir, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("config.json");
        let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: RetrieverConfig =
            serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
        let tokenizer = Tokenizer::read_vocab(&dir.join("vocab.txt"))?;
        let mut m = RetrieverModel::new(config, tokenizer, 0)?;
        load_params(dir, &mut m.params)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: f64,
    pub negatives: usize,
    pub hard_fraction: f64,
    pub refresh_every: usize,
    pub seed: u64,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        RetrieverTrainConfig {
            steps: 1000,
            batch: 8,
            peak_lr: 1e-4,
            warmup: 0.01,
            negatives: 32,
            hard_fraction: 0.1,
            refresh_every: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ranked<'a> {
    score: f64,
    id: &'a str,
}

impl Eq for Ranked<'_> {}

impl Ord for Ranked<'_> {
    // "greater" means ranked earlier: higher score, then smaller id
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Entity embeddings keyed by id, one row per entity in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    ids: Vec<String>,
    embeddings: Matrix,
}

impl VectorIndex {
    /// Encodes every entity of the store; rows are computed in parallel and
    /// kept in store order.
    pub fn build(model: &RetrieverModel, store: &EntityStore) -> Self {
        let rows: Vec<Vec<f64>> = store.entities().par_iter().map(|e| model.encode_entity(e)).collect();
        let d = model.dim();
        VectorIndex {
            ids: store.iter().map(|e| e.id.clone()).collect(),
            embeddings: Matrix::from_vec(rows.len(), d, rows.concat()),
        }
    }

    pub fn from_parts(ids: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(Error::DimensionMismatch {
                left: ids.len(),
                right: embeddings.rows(),
            });
        }
        Ok(VectorIndex { ids, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: query.len(),
            });
        }
        Ok((0..self.len()).map(|i| dot(self.embeddings.row(i), query)).collect())
    }

    /// The `k` best entities by descending score, ties by ascending id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        let scores = self.scores(query)?;
        // min-heap of the best k seen so far
        let mut heap: BinaryHeap<std::cmp::Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
        for (id, &score) in self.ids.iter().zip(&scores) {
            let r = Ranked { score, id };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(r));
            } else if let Some(worst) = heap.peek() {
                if r > worst.0 {
                    heap.pop();
                    heap.push(std::cmp::Reverse(r));
                }
            }
        }
        let mut out: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        Ok(out.into_iter().map(|r| (r.id.to_string(), r.score)).collect())
    }

    /// Writes the embedding dump to `path` and the row ids, one per line, to
    /// `path` with an `.ids` suffix appended.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        write_matrix(&mut w, &self.embeddings)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))?;
        let ids_path = ids_sidecar(path);
        let mut s = self.ids.join("\n");
        s.push('\n');
        fs::write(&ids_path, s).map_err(|e| Error::io(&ids_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let embeddings = read_matrix(&mut BufReader::new(f))?;
        let ids_path = ids_sidecar(path);
        let f = fs::File::open(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&ids_path, e))?;
        Self::from_parts(ids, embeddings)
    }
}

fn ids_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    s.into()
}

/// Reference search: encodes the whole store and fully sorts it.
pub fn brute_force_top_k(model: &RetrieverModel, store: &EntityStore, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let mut all = Vec::with_capacity(store.len());
    for e in store.iter() {
        all.push((e.id.clone(), score(&model.encode_entity(e), query)?));
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

/// Top-k entities for a passage.
pub fn top_k(model: &RetrieverModel, store: &EntityStore, p: &Passage, k: usize) -> Result<Vec<(String, f64)>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    VectorIndex::build(model, store).top_k(&model.encode_passage(p), k)
}

fn sample_negatives(
    store: &EntityStore,
    gold: &HashSet<String>,
    taken: &[String],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<String> {
    let taken: HashSet<&str> = taken.iter().map(String::as_str).collect();
    let mut picked: Vec<String> = store
        .iter()
        .filter(|e| !gold.contains(&e.id) && !taken.contains(e.id.as_str()))
        .map(|e| e.id.clone())
        .choose_multiple(rng, n);
    picked.shuffle(rng);
    picked
}

/// `ceil(hard_fraction * n)` top-scoring non-gold entities followed by
/// uniformly sampled non-gold entities, `n` in total and all distinct.
pub fn mine_negatives(
    index: &VectorIndex,
    query: &[f64],
    gold: &HashSet<String>,
    n: usize,
    hard_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&hard_fraction) {
        return Err(Error::OutOfRange(hard_fraction));
    }
    let non_gold = index.ids().iter().filter(|id| !gold.contains(*id)).count();
    if n > non_gold {
        return Err(Error::InsufficientEntities {
            needed: n,
            available: non_gold,
        });
    }
    let hard_n = ((hard_fraction * n as f64).ceil() as usize).min(n);
    let mut out: Vec<String> = index
        .top_k(query, (hard_n + gold.len()).min(index.len()))?
        .into_iter()
        .map(|(id, _)| id)
        .filter(|id| !gold.contains(id))
        .take(hard_n)
        .collect();
    let mut pool: Vec<&String> = index
        .ids()
        .iter()
        .filter(|id| !gold.contains(*id) && !out.contains(id))
        .collect();
    pool.shuffle(rng);
    out.extend(pool.into_iter().take(n - out.len()).cloned());
    Ok(out)
}

/// A passage with the ids of the entities annotated inside it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalExample {
    pub passage: Passage,
    pub gold: Vec<String>,
}

/// Chunks every document into passages and attaches the gold entities whose
/// mentions lie fully inside each passage.
pub fn passage_examples(docs: &[AnnotatedDocument], window: usize, stride: usize) -> Result<Vec<RetrievalExample>> {
    let mut out = Vec::new();
    for doc in docs {
        let toks = split(&doc.text);
        if toks.is_empty() {
            continue;
        }
        let topic = truncated_document(&toks).join(" ");
        for p in chunk_passages(&doc.doc_id, &doc.text, &toks, &topic, window, stride)? {
            let end = p.char_offset + p.text.chars().count();
            let mut gold: Vec<String> = doc
                .annotations
                .iter()
                .filter(|a| a.start >= p.char_offset && a.end <= end)
                .map(|a| a.entity_id.clone())
                .collect();
            gold.sort();
            gold.dedup();
            out.push(RetrievalExample { passage: p, gold });
        }
    }
    Ok(out)
}

/// Fraction of gold entities, over all passages, found in the passage's
/// top-k.
pub fn recall_at_k(model: &RetrieverModel, index: &VectorIndex, data: &[RetrievalExample], k: usize) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in data {
        if ex.gold.is_empty() {
            continue;
        }
        let found: HashSet<String> = index
            .top_k(&model.encode_passage(&ex.passage), k)?
            .into_iter()
            .map(|r| r.0)
            .collect();
        hit += ex.gold.iter().filter(|g| found.contains(*g)).count();
        total += ex.gold.len();
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(hit as f64 / total as f64)
}
