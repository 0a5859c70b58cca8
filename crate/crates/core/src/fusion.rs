//! Fusion-in-decoder reader.
//!
//! Each candidate input is encoded on its own, with positions restarting at
//! 0, and the encoder outputs are concatenated into one memory that the
//! decoder cross-attends over. Nothing in the decoder sees which segment a
//! memory row came from, so the decoded sequence does not depend on the
//! order of the candidates.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::nn::{
    embedding_table, fan_in_uniform, finite_difference_check, linear_schedule, load_params, save_params,
    sinusoid, Adam, DecoderLayer, EncoderStack, GradCheckReport, LayerNormParams,
};
use crate::tensor::Matrix;
use crate::text::{Tokenizer, EOS_ID, PAD_ID};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_candidates: usize,
    pub max_segment_len: usize,
    pub max_target_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ff_width: 128,
            max_candidates: 16,
            max_segment_len: 512,
            max_target_len: 64,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.encoder_layers,
            self.decoder_layers,
            self.heads,
            self.ff_width,
            self.max_candidates,
            self.max_segment_len,
            self.max_target_len,
            self.vocab_size,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Concatenated per-candidate encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedRepresentation {
    pub memory: Matrix,
    pub segments: Vec<Range<usize>>,
}

impl FusedRepresentation {
    pub fn segment(&self, i: usize) -> Matrix {
        let r = &self.segments[i];
        let d = self.memory.cols();
        Matrix::from_vec(r.len(), d, self.memory.data()[r.start * d..r.end * d].to_vec())
    }
}

/// Trie over token-id sequences; every complete path ends with an
/// end-of-sequence edge.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrefixTrie {
    nodes: Vec<BTreeMap<usize, usize>>,
}

impl PrefixTrie {
    pub fn new() -> Self {
        PrefixTrie {
            nodes: vec![BTreeMap::new()],
        }
    }

    pub fn insert(&mut self, seq: &[usize]) {
        let mut node = 0;
        for &tok in seq.iter().chain(std::iter::once(&EOS_ID)) {
            node = match self.nodes[node].get(&tok) {
                Some(&n) => n,
                None => {
                    self.nodes.push(BTreeMap::new());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].insert(tok, n);
                    n
                }
            };
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    /// Allowed next tokens after `prefix`, ascending; `None` if `prefix` is
    /// not in the trie.
    pub fn allowed(&self, prefix: &[usize]) -> Option<Vec<usize>> {
        let n = self.walk(prefix)?;
        Some(self.nodes[n].keys().copied().collect())
    }

    pub fn is_terminal(&self, prefix: &[usize]) -> bool {
        self.walk(prefix)
            .is_some_and(|n| self.nodes[n].contains_key(&EOS_ID))
    }

    /// Whether `seq` (without end-of-sequence) is a complete member.
    pub fn contains(&self, seq: &[usize]) -> bool {
        self.is_terminal(seq)
    }

    fn walk(&self, prefix: &[usize]) -> Option<usize> {
        let mut node = 0;
        for t in prefix {
            node = *self.nodes[node].get(t)?;
        }
        Some(node)
    }
}

pub fn build_trie<S: AsRef<str>>(titles: &[S], tokenizer: &Tokenizer) -> PrefixTrie {
    let mut t = PrefixTrie::new();
    for title in titles {
        t.insert(&tokenizer.encode(title.as_ref()));
    }
    t
}

/// One training pair: candidate inputs and the target ids, ending with
/// end-of-sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqExample {
    pub inputs: Vec<Vec<usize>>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: f64,
    pub seed: u64,
    /// Calls the evaluation hook every this many steps (0 disables it).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 8,
            peak_lr: 1e-4,
            warmup: 0.01,
            seed: 0,
            eval_every: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("step,loss,lr\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    config: ModelConfig,
    params: ParamSet,
    embed: ParamId,
    encoder: EncoderStack,
    decoder: Vec<DecoderLayer>,
    dec_ln: LayerNormParams,
    lm_head: ParamId,
    lm_bias: ParamId,
}

impl FusionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, ff, v) = (config.d_model, config.heads, config.ff_width, config.vocab_size);
        let mut ps = ParamSet::new();
        let embed = ps.add("embed", embedding_table(&mut rng, v, d));
        let encoder = EncoderStack::new(&mut ps, &mut rng, "encoder", embed, d, h, ff, config.encoder_layers);
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut ps, &mut rng, &format!("decoder.layer{i}"), d, h, ff))
            .collect();
        let dec_ln = LayerNormParams::new(&mut ps, "decoder.ln_f", d);
        // small output projection so the initial distribution is near uniform
        let lm_head = ps.add("lm_head", fan_in_uniform(&mut rng, d, v, d * d));
        let lm_bias = ps.add("lm_bias", Matrix::zeros(1, v));
        Ok(FusionModel {
            config,
            params: ps,
            embed,
            encoder,
            decoder,
            dec_ln,
            lm_head,
            lm_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_inputs(&self, inputs: &[Vec<usize>]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        if inputs.len() > self.config.max_candidates {
            return Err(Error::TooManyCandidates {
                got: inputs.len(),
                max: self.config.max_candidates,
            });
        }
        for s in inputs {
            if s.is_empty() || s.len() > self.config.max_segment_len {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: self.config.max_segment_len,
                });
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Config(format!("token id {bad} outside vocabulary")));
            }
        }
        Ok(())
    }

    fn encode_in(&self, g: &mut Graph, inputs: &[Vec<usize>]) -> Var {
        let segs: Vec<Var> = inputs.iter().map(|s| self.encoder.apply(g, s)).collect();
        if segs.len() == 1 {
            segs[0]
        } else {
            g.concat_rows(&segs)
        }
    }

    /// Encodes each candidate independently and concatenates the outputs in
    /// input order.
    pub fn encode_candidates(&self, inputs: &[Vec<usize>]) -> Result<FusedRepresentation> {
        self.check_inputs(inputs)?;
        let mut rows = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for s in inputs {
            let mut g = Graph::new(&self.params);
            let v = self.encoder.apply(&mut g, s);
            rows.extend_from_slice(g.value(v).data());
            segments.push(off..off + s.len());
            off += s.len();
        }
        Ok(FusedRepresentation {
            memory: Matrix::from_vec(off, self.config.d_model, rows),
            segments,
        })
    }

    fn memory_kv(&self, g: &mut Graph, mem: Var) -> Vec<(Var, Var)> {
        self.decoder
            .iter()
            .map(|l| l.cross_attn.keys_values(g, mem))
            .collect()
    }

    /// Logits for every position of the decoder input `prefix`.
    fn decoder_logits(&self, g: &mut Graph, kvs: &[(Var, Var)], prefix: &[usize]) -> Var {
        let table = g.param(self.embed);
        let y = g.embed(table, prefix);
        let pos = g.constant(sinusoid(prefix.len(), self.config.d_model));
        let mut y = g.add(y, pos);
        for (layer, kv) in self.decoder.iter().zip(kvs) {
            y = layer.apply(g, y, *kv);
        }
        let y = self.dec_ln.apply(g, y);
        let w = g.param(self.lm_head);
        let b = g.param(self.lm_bias);
        let logits = g.matmul(y, w);
        g.add_row(logits, b)
    }

    fn argmax(row: &[f64], allowed: Option<&[usize]>) -> usize {
        // lowest id wins ties
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        let mut consider = |i: usize| {
            if best == usize::MAX || row[i] > best_v {
                best = i;
                best_v = row[i];
            }
        };
        match allowed {
            Some(a) => a.iter().for_each(|&i| consider(i)),
            None => (0..row.len()).for_each(&mut consider),
        }
        best
    }

    /// Autoregressive argmax decoding. Returns the generated ids (without
    /// end-of-sequence) and the logits of every step.
    pub fn greedy_decode_with_logits(&self, fused: &FusedRepresentation, max_len: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
        self.decode_impl(fused, max_len, None)
            .expect("unconstrained decoding cannot dead-end")
    }

    pub fn greedy_decode(&self, fused: &FusedRepresentation, max_len: usize) -> Vec<usize> {
        self.greedy_decode_with_logits(fused, max_len).0
    }

    /// Greedy decoding restricted, at every step, to continuations allowed by
    /// `trie`. The result is always a complete member of the trie; `max_len`
    /// only stops decoding at a node where the trie permits stopping.
    pub fn constrained_decode(&self, fused: &FusedRepresentation, trie: &PrefixTrie, max_len: usize) -> Result<Vec<usize>> {
        if trie.is_empty() {
            return Err(Error::EmptyTrie);
        }
        self.decode_impl(fused, max_len, Some(trie)).map(|r| r.0)
    }

    fn decode_impl(
        &self,
        fused: &FusedRepresentation,
        max_len: usize,
        trie: Option<&PrefixTrie>,
    ) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let mut out = Vec::new();
        let mut logits_log = Vec::new();
        if max_len == 0 && trie.is_none() {
            return Ok((out, logits_log));
        }
        let mut g = Graph::new(&self.params);
        let mem = g.constant(fused.memory.clone());
        let kvs = self.memory_kv(&mut g, mem);
        let mut prefix = vec![PAD_ID];
        loop {
            let allowed = match trie {
                Some(t) => {
                    let a = t.allowed(&out).unwrap_or_default();
                    if a.is_empty() {
                        return Err(Error::DeadEnd { depth: out.len() });
                    }
                    if out.len() >= max_len && a.contains(&EOS_ID) {
                        break;
                    }
                    Some(a)
                }
                None => {
                    if out.len() >= max_len {
                        break;
                    }
                    None
                }
            };
            let logits = self.decoder_logits(&mut g, &kvs, &prefix);
            let lv = g.value(logits);
            let last = lv.row(lv.rows() - 1).to_vec();
            let next = Self::argmax(&last, allowed.as_deref());
            logits_log.push(last);
            if next == EOS_ID {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok((out, logits_log))
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if target.len() > self.config.max_target_len {
            return Err(Error::TargetTooLong {
                len: target.len(),
                max: self.config.max_target_len,
            });
        }
        Ok(())
    }

    fn loss_graph<'a>(&self, g: &mut Graph<'a>, inputs: &[Vec<usize>], target: &[usize]) -> Var {
        let mem = self.encode_in(g, inputs);
        let kvs = self.memory_kv(g, mem);
        let mut dec_in = Vec::with_capacity(target.len());
        dec_in.push(PAD_ID);
        dec_in.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.decoder_logits(g, &kvs, &dec_in);
        g.cross_entropy(logits, target)
    }

    /// Mean token cross-entropy of `target` given the candidate inputs.
    pub fn teacher_forced_loss(&self, inputs: &[Vec<usize>], target: &[usize]) -> Result<f64> {
        self.check_inputs(inputs)?;
        self.check_target(target)?;
        Ok(Self::loss_with(self, &self.params, inputs, target))
    }

    fn loss_with(&self, params: &ParamSet, inputs: &[Vec<usize>], target: &[usize]) -> f64 {
        let mut g = Graph::new(params);
        let l = self.loss_graph(&mut g, inputs, target);
        g.scalar(l)
    }

    /// Loss and reverse-mode gradients for every parameter.
    pub fn backward(&self, inputs: &[Vec<usize>], target: &[usize]) -> Result<(f64, Gradients)> {
        self.check_inputs(inputs)?;
        self.check_target(target)?;
        let mut g = Graph::new(&self.params);
        let l = self.loss_graph(&mut g, inputs, target);
        let grads = g.backward(l);
        if let Some(bad) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient {
                param: self.params.name(bad).to_string(),
            });
        }
        Ok((g.scalar(l), grads))
    }

    /// Maximum relative error between [`FusionModel::backward`] and central
    /// finite differences on up to `per_param` coordinates per tensor.
    pub fn grad_check(
        &self,
        inputs: &[Vec<usize>],
        target: &[usize],
        eps: f64,
        per_param: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let (_, grads) = self.backward(inputs, target)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(finite_difference_check(
            &self.params,
            &grads,
            |p| self.loss_with(p, inputs, target),
            eps,
            per_param,
            &mut rng,
        ))
    }

    /// Adam with linear warm-up/decay. Each step averages the gradients of
    /// one batch; batches walk a seeded shuffle of the data, reshuffled every
    /// epoch. Per-example gradients may be computed in parallel but are
    /// summed in batch order.
    pub fn train(
        &mut self,
        data: &[Seq2SeqExample],
        cfg: &TrainConfig,
        mut on_eval: impl FnMut(usize, &FusionModel),
    ) -> Result<Vec<CurvePoint>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for ex in data {
            self.check_inputs(&ex.inputs)?;
            self.check_target(&ex.target)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(&self.params);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut curve = Vec::with_capacity(cfg.steps);
        let batch = cfg.batch.max(1);
        for step in 1..=cfg.steps {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let results: Vec<Result<(f64, Gradients)>> = idx
                .par_iter()
                .map(|&i| self.backward(&data[i].inputs, &data[i].target))
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
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                on_eval(step, self);
            }
        }
        Ok(curve)
    }

    /// Fraction of examples whose greedy decode reproduces the target.
    pub fn exact_match(&self, data: &[Seq2SeqExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let hits: Vec<bool> = data
            .par_iter()
            .map(|ex| -> Result<bool> {
                let fused = self.encode_candidates(&ex.inputs)?;
                let out = self.greedy_decode(&fused, self.config.max_target_len);
                Ok(out.len() + 1 == ex.target.len() && ex.target.starts_with(&out))
            })
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let p = dir.join("config.json");
        fs::write(&p, cfg).map_err(|e| Error::io(&p, e))?;
        save_params(dir, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("config.json");
        let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: ModelConfig =
            serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
        let mut m = FusionModel::new(config, 0)?;
        load_params(dir, &mut m.params)?;
        Ok(m)
    }
}

/// Target ids for a decoder string: its tokens followed by end-of-sequence.
pub fn target_ids(tokenizer: &Tokenizer, text: &str) -> Vec<usize> {
    let mut ids = tokenizer.encode(text);
    ids.push(EOS_ID);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(vocab: usize, d: usize, seed: u64) -> FusionModel {
        let mut c = ModelConfig::new(vocab);
        c.d_model = d;
        c.ff_width = 2 * d;
        FusionModel::new(c, seed).unwrap()
    }

    fn random_inputs(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| {
                let len = rng.gen_range(3..9);
                (0..len).map(|_| rng.gen_range(3..vocab)).collect()
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(10);
        c.heads = 3;
        assert!(FusionModel::new(c.clone(), 0).is_err());
        c.heads = 2;
        c.d_model = 0;
        assert!(FusionModel::new(c, 0).is_err());
    }

    #[test]
    fn fused_segments_follow_input_order() {
        let m = tiny(30, 16, 1);
        let a = vec![5, 6, 7];
        let b = vec![8, 9, 10, 11];
        let ab = m.encode_candidates(&[a.clone(), b.clone()]).unwrap();
        let ba = m.encode_candidates(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(ab.segments, vec![0..3, 3..7]);
        assert_eq!(ab.segment(0), ba.segment(1));
        assert_eq!(ab.segment(1), ba.segment(0));
        let single = m.encode_candidates(&[a.clone()]).unwrap();
        assert_eq!(single.memory, ab.segment(0));
    }

    #[test]
    fn candidate_limits() {
        let mut c = ModelConfig::new(30);
        c.max_candidates = 2;
        c.max_segment_len = 4;
        let m = FusionModel::new(c, 0).unwrap();
        assert!(matches!(m.encode_candidates(&[]), Err(Error::EmptyCandidates)));
        assert!(matches!(
            m.encode_candidates(&[vec![3], vec![3], vec![3]]),
            Err(Error::TooManyCandidates { got: 3, max: 2 })
        ));
        assert!(matches!(
            m.encode_candidates(&[vec![3; 5]]),
            Err(Error::SequenceTooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn greedy_zero_length() {
        let m = tiny(30, 16, 2);
        let f = m.encode_candidates(&[vec![4, 5]]).unwrap();
        assert!(m.greedy_decode(&f, 0).is_empty());
    }

    #[test]
    fn trie_shapes() {
        let mut t = PrefixTrie::new();
        t.insert(&[5]);
        t.insert(&[5, 6]);
        assert_eq!(t.allowed(&[]).unwrap(), [5]);
        assert_eq!(t.allowed(&[5]).unwrap(), [EOS_ID, 6]);
        assert!(t.is_terminal(&[5]));
        assert!(t.contains(&[5, 6]));
        assert!(!t.contains(&[6]));
        assert_eq!(t.allowed(&[7]), None);
    }

    #[test]
    fn trie_over_titles_shares_prefixes() {
        let tok = Tokenizer::build(["Jack Charlton Bobby Suzanne Athletic F.C."], 1).unwrap();
        let titles = ["Charlton Athletic F.C.", "Jack Charlton", "Bobby Charlton", "Suzanne Charlton"];
        let t = build_trie(&titles, &tok);
        assert_eq!(t.allowed(&[]).unwrap().len(), 4);
        for title in titles {
            assert!(t.contains(&tok.encode(title)));
        }
        let single = build_trie(&["Jack Charlton"], &tok);
        assert_eq!(single.allowed(&[]).unwrap(), [tok.id("Jack")]);
    }

    #[test]
    fn single_title_trie_forces_the_title() {
        let tok = Tokenizer::build(["Jack Charlton Bobby"], 1).unwrap();
        let trie = build_trie(&["Jack Charlton"], &tok);
        for seed in 0..5 {
            let m = tiny(tok.len(), 16, seed);
            let f = m.encode_candidates(&[vec![3, 4, 5]]).unwrap();
            assert_eq!(m.constrained_decode(&f, &trie, 10).unwrap(), tok.encode("Jack Charlton"));
        }
    }

    #[test]
    fn uniform_logits_pick_lowest_id() {
        // zero output layer: every logit equal, so argmax falls back to the
        // smallest allowed id at each step
        let tok = Tokenizer::build(["a b"], 1).unwrap();
        let mut m = tiny(tok.len(), 16, 3);
        let head = m.params.find("lm_head").unwrap();
        m.params.get_mut(head).scale_assign(0.0);
        let trie = build_trie(&["a a", "a b"], &tok);
        let f = m.encode_candidates(&[vec![3, 4]]).unwrap();
        let out = m.constrained_decode(&f, &trie, 10).unwrap();
        let (a, b) = (tok.id("a"), tok.id("b"));
        let want = if a < b { vec![a, a] } else { vec![a, b] };
        assert_eq!(out, want);
        // unconstrained, <pad> (id 0) wins every tie ahead of end-of-sequence
        assert_eq!(m.greedy_decode(&f, 3), vec![PAD_ID; 3]);
    }

    #[test]
    fn empty_trie_is_an_error() {
        let m = tiny(10, 16, 0);
        let f = m.encode_candidates(&[vec![3]]).unwrap();
        assert!(matches!(m.constrained_decode(&f, &PrefixTrie::new(), 5), Err(Error::EmptyTrie)));
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (vocab, seed) in [(50, 0), (200, 1), (1000, 2)] {
            let m = tiny(vocab, 64, seed);
            let inputs = random_inputs(&mut rng, 3, vocab);
            let target: Vec<usize> = (0..6).map(|_| rng.gen_range(3..vocab)).collect();
            let l = m.teacher_forced_loss(&inputs, &target).unwrap();
            let ln_v = (vocab as f64).ln();
            assert!((l - ln_v).abs() < 0.1 * ln_v, "vocab {vocab}: loss {l}, ln V {ln_v}");
        }
    }

    #[test]
    fn target_errors() {
        let m = tiny(10, 16, 0);
        assert!(matches!(m.teacher_forced_loss(&[vec![3]], &[]), Err(Error::EmptyTarget)));
        let long = vec![3; 65];
        assert!(matches!(m.teacher_forced_loss(&[vec![3]], &long), Err(Error::TargetTooLong { .. })));
    }

    #[test]
    fn gradients_match_finite_differences_at_d8() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = tiny(20, 8, 5);
        let inputs = random_inputs(&mut rng, 2, 20);
        let target = vec![4, 9, 12, EOS_ID];
        let r = m.grad_check(&inputs, &target, 1e-4, 100, 5).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn unused_vocab_rows_get_zero_gradient() {
        let m = tiny(20, 8, 6);
        let (_, g) = m.backward(&[vec![3, 4, 5]], &[6, EOS_ID]).unwrap();
        let e = g.get(m.embed);
        // id 19 appears nowhere in inputs or decoder inputs
        assert!(e.row(19).iter().all(|&v| v == 0.0));
        assert!(e.row(3).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_steps_leave_the_model_unchanged() {
        let mut m = tiny(20, 8, 7);
        let before = m.params.clone();
        let data = [Seq2SeqExample {
            inputs: vec![vec![3, 4]],
            target: vec![5, EOS_ID],
        }];
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let curve = m.train(&data, &cfg, |_, _| {}).unwrap();
        assert!(curve.is_empty());
        assert_eq!(m.params.iter().map(|p| p.2.clone()).collect::<Vec<_>>(),
                   before.iter().map(|p| p.2.clone()).collect::<Vec<_>>());
        assert!(matches!(m.train(&[], &cfg, |_, _| {}), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_reduces_loss_and_fires_the_hook() {
        let mut m = tiny(20, 16, 8);
        let data: Vec<Seq2SeqExample> = (0..4)
            .map(|i| Seq2SeqExample {
                inputs: vec![vec![3 + i, 10, 11], vec![12, 3 + i]],
                target: vec![14 + i, EOS_ID],
            })
            .collect();
        let cfg = TrainConfig {
            steps: 60,
            batch: 2,
            peak_lr: 3e-3,
            warmup: 0.05,
            seed: 1,
            eval_every: 20,
        };
        let mut hooks = Vec::new();
        let curve = m.train(&data, &cfg, |s, _| hooks.push(s)).unwrap();
        assert_eq!(hooks, [20, 40, 60]);
        let first: f64 = curve[..5].iter().map(|p| p.loss).sum::<f64>() / 5.0;
        let last: f64 = curve[55..].iter().map(|p| p.loss).sum::<f64>() / 5.0;
        assert!(last < first * 0.5, "{first} -> {last}");
        assert_eq!(curve.last().unwrap().lr, 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(20, 8, 9);
        m.save(dir.path()).unwrap();
        let back = FusionModel::load(dir.path()).unwrap();
        assert_eq!(back.config(), m.config());
        for ((_, n, a), (_, _, b)) in m.params().iter().zip(back.params().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, (*x as f32) as f64, "{n}");
            }
        }
    }
}
