//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! with the measured value and the tolerance it is held to.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusionlink::cli::{gradcheck_errors, GradcheckArgs};
use fusionlink::eval::micro_prf;
use fusionlink::fusion::{build_trie, FusionModel, ModelConfig, TrainConfig};
use fusionlink::grammar::{parse_el, serialize_el, ElPrediction, LinkedEntity, ParseMode, TargetMode};
use fusionlink::kb::{write_corpus, write_entities, Annotation, Entity, EntityStore};
use fusionlink::linker::{ed_examples, resolve_overlaps, LinkResult};
use fusionlink::nn::linear_schedule;
use fusionlink::retriever::{brute_force_top_k, nce_from_scores, RetrieverConfig, RetrieverModel, VectorIndex};
use fusionlink::synthetic::{charlton_fixture, people_corpus, people_kb, vocabulary_corpus};
use fusionlink::text::{chunk_passages, split, Tokenizer};

// Gradient check.
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
// Order invariance.
const LOGIT_TOL: f64 = 1e-4;
// Overfit.
const OVERFIT_MIN_EM: f64 = 0.95;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
// NCE oracle.
const NCE_TOL: f64 = 1e-6;
const NCE_UNIFORM_TOL: f64 = 1e-9;
// End to end.
const E2E_MIN_F1: f64 = 0.8;
const E2E_BUDGET: Duration = Duration::from_secs(1200);

/// Written to the raw stderr handle so the line shows even when the test
/// harness captures output.
fn verdict(n: usize, name: &str, ok: bool, detail: String) {
    let line = format!("criterion {n:>2} {name:<22} {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

#[test]
fn c01_gradient_correctness() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in [1, 2, 3] {
        let args = GradcheckArgs {
            d_model: 8,
            candidates: 2,
            vocab_size: 40,
            seed,
            eps: 1e-4,
            per_param: 100,
            tolerance: GRAD_TOL,
        };
        let (reader, retriever) = gradcheck_errors(&args).unwrap();
        worst = worst.max(reader).max(retriever);
    }
    let took = t0.elapsed();
    let ok = worst < GRAD_TOL && took < GRAD_BUDGET;
    verdict(1, "gradient check", ok, format!("max rel err {worst:.2e} (< {GRAD_TOL:e}), {took:.1?} (< {GRAD_BUDGET:?})"));
    assert!(ok);
}

#[test]
fn c02_fusion_order_invariance() {
    let perms: Vec<Vec<usize>> = (0..4).permutations(4).collect();
    assert_eq!(perms.len(), 24);
    let mut worst: f64 = 0.0;
    let mut all_same = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let model = FusionModel::new(ModelConfig::new(60), seed).unwrap();
        let inputs: Vec<Vec<usize>> = (0..4)
            .map(|_| (0..rng.gen_range(4..12)).map(|_| rng.gen_range(3..60)).collect())
            .collect();
        let base = model.encode_candidates(&inputs).unwrap();
        let (ref_out, ref_logits) = model.greedy_decode_with_logits(&base, 8);
        for p in &perms {
            let permuted: Vec<Vec<usize>> = p.iter().map(|&i| inputs[i].clone()).collect();
            let fused = model.encode_candidates(&permuted).unwrap();
            let (out, logits) = model.greedy_decode_with_logits(&fused, 8);
            all_same &= out == ref_out && logits.len() == ref_logits.len();
            for (a, b) in logits.iter().zip(&ref_logits) {
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    let ok = all_same && worst <= LOGIT_TOL;
    verdict(2, "order invariance", ok, format!("outputs identical: {all_same}, max logit diff {worst:.2e} (<= {LOGIT_TOL:e})"));
    assert!(ok);
}

#[test]
fn c03_overfit_sanity() {
    let t0 = Instant::now();
    let (store, map, docs) = charlton_fixture(50, 3);
    let tok = Tokenizer::build(vocabulary_corpus(&store, &docs), 1).unwrap();
    let cfg = ModelConfig::new(tok.len());
    let data = ed_examples(&docs, &store, &map, &tok, TargetMode::Title, cfg.max_candidates, cfg.max_segment_len).unwrap();
    assert_eq!(data.len(), 50);
    let mut model = FusionModel::new(cfg, 0).unwrap();
    let train = TrainConfig {
        steps: 2000,
        batch: 4,
        peak_lr: 1e-4,
        warmup: 0.01,
        seed: 0,
        eval_every: 0,
    };
    assert!(train.steps <= OVERFIT_MAX_STEPS);
    model.train(&data, &train, |_, _| {}).unwrap();
    let em = model.exact_match(&data).unwrap();
    let took = t0.elapsed();
    let ok = em >= OVERFIT_MIN_EM && took < OVERFIT_BUDGET;
    verdict(
        3,
        "overfit sanity",
        ok,
        format!("exact match {em:.3} (>= {OVERFIT_MIN_EM}) after {} steps, {took:.1?} (< {OVERFIT_BUDGET:?})", train.steps),
    );
    assert!(ok);
}

fn random_kb(n: usize, seed: u64) -> EntityStore {
    const SYL: [&str; 12] = ["ka", "lo", "mi", "ren", "tas", "vu", "zo", "pel", "dri", "nor", "qua", "sel"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| -> String { (0..rng.gen_range(2..4)).map(|_| SYL[rng.gen_range(0..SYL.len())]).collect() };
    let ents = (0..n).map(|i| Entity {
        id: format!("K{i:04}"),
        title: format!("{} {} {i}", word(&mut rng), word(&mut rng)),
        description: (0..6).map(|_| word(&mut rng)).collect::<Vec<_>>().join(" "),
    });
    EntityStore::from_entities(ents).unwrap()
}

#[test]
fn c04_retrieval_equivalence() {
    let store = random_kb(1000, 4);
    let tok = Tokenizer::build(vocabulary_corpus(&store, &[]), 1).unwrap();
    let cfg = RetrieverConfig {
        d_model: 16,
        ff_width: 32,
        ..RetrieverConfig::default()
    };
    let model = RetrieverModel::new(cfg, tok, 4).unwrap();
    let index = VectorIndex::build(&model, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut mismatches = 0;
    for q in 0..100 {
        let e = &store.entities()[rng.gen_range(0..store.len())];
        let text = format!("{} {}", e.description, store.entities()[rng.gen_range(0..store.len())].title);
        let toks = split(&text);
        let p = chunk_passages(&format!("q{q}"), &text, &toks, &e.title, 20, 10).unwrap().remove(0);
        let query = model.encode_passage(&p);
        let fast: HashSet<String> = index.top_k(&query, 100).unwrap().into_iter().map(|r| r.0).collect();
        let slow: HashSet<String> = brute_force_top_k(&model, &store, &query, 100).unwrap().into_iter().map(|r| r.0).collect();
        if fast != slow || fast.len() != 100 {
            mismatches += 1;
        }
    }
    let ok = mismatches == 0;
    verdict(4, "retrieval equivalence", ok, format!("{mismatches} of 100 queries differ (exact set equality required)"));
    assert!(ok);
}

#[test]
fn c05_nce_value_oracle() {
    // scalar arithmetic: -ln(e^2 / (e^2 + e^0 + e^1))
    let e = std::f64::consts::E;
    let hand = -((e * e) / (e * e + 1.0 + e)).ln();
    let got = nce_from_scores(&[2.0], &[0.0, 1.0]).unwrap();

    // the model-level loss against the same formula on its own scores
    let store = fusionlink::synthetic::charlton_kb();
    let tok = Tokenizer::build(vocabulary_corpus(&store, &[]), 1).unwrap();
    let cfg = RetrieverConfig {
        d_model: 16,
        ff_width: 32,
        ..RetrieverConfig::default()
    };
    let model = RetrieverModel::new(cfg, tok, 5).unwrap();
    let text = "Jack Charlton managed the Republic of Ireland";
    let toks = split(text);
    let p = chunk_passages("d", text, &toks, text, 20, 10).unwrap().remove(0);
    let es: Vec<&Entity> = store.iter().collect();
    let q = model.encode_passage(&p);
    let s: Vec<f64> = es.iter().map(|x| fusionlink::tensor::dot(&model.encode_entity(x), &q)).collect();
    let model_loss = model.nce_loss(&p, &es[1..2], &[es[0], es[2]]).unwrap();
    let sp = s[1];
    let scalar = -(sp.exp() / (sp.exp() + s[0].exp() + s[2].exp())).ln();

    // uniform scores: a negative with the same text as the positive
    let twin = Entity {
        id: "twin".into(),
        ..es[1].clone()
    };
    let uniform = model.nce_loss(&p, &es[1..2], &[&twin]).unwrap();

    let d1 = (got - hand).abs();
    let d2 = (model_loss - scalar).abs();
    let d3 = (uniform - 2f64.ln()).abs();
    let ok = d1 <= NCE_TOL && d2 <= NCE_TOL && d3 <= NCE_UNIFORM_TOL;
    verdict(
        5,
        "nce value oracle",
        ok,
        format!("hand case {got:.7} vs {hand:.7}, model {d2:.1e} (<= {NCE_TOL:e}), uniform {d3:.1e} (<= {NCE_UNIFORM_TOL:e})"),
    );
    assert!(ok);
}

fn random_prediction(rng: &mut ChaCha8Rng) -> ElPrediction {
    const ALPHA: &[char] = &['a', 'B', 'c', 'é', '.', '-', '\'', 'Z', '9', ' ', '<', '>', '_', '(', ')', '&'];
    let text = |rng: &mut ChaCha8Rng, comma: bool| -> String {
        loop {
            let s: String = (0..rng.gen_range(1..12))
                .map(|_| {
                    if comma && rng.gen_bool(0.05) {
                        ','
                    } else {
                        ALPHA[rng.gen_range(0..ALPHA.len())]
                    }
                })
                .collect();
            let s = s.trim().to_string();
            if !s.is_empty() && !s.contains("<extra_id_") {
                return s;
            }
        }
    };
    let n = rng.gen_range(0..5);
    let mut ents: Vec<LinkedEntity> = Vec::new();
    while ents.len() < n {
        let title = text(rng, true);
        if ents.iter().any(|e| e.title == title) {
            continue;
        }
        let mentions = (0..rng.gen_range(1..4)).map(|_| text(rng, false)).collect();
        ents.push(LinkedEntity { title, mentions });
    }
    ElPrediction::new(ents).unwrap()
}

#[test]
fn c06_grammar_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    for _ in 0..10_000 {
        let x = random_prediction(&mut rng);
        if parse_el(&serialize_el(&x), ParseMode::Strict).ok().as_ref() != Some(&x) {
            failures += 1;
        }
    }
    let mut aborts = 0;
    for _ in 0..10_000 {
        let bytes: Vec<u8> = (0..rng.gen_range(0..80)).map(|_| rng.gen()).collect();
        let mut s = String::from_utf8_lossy(&bytes).into_owned();
        if rng.gen_bool(0.5) {
            s.push_str([" <extra_id_4> ", " <extra_id_5> ", ", "][rng.gen_range(0..3)]);
        }
        let r = std::panic::catch_unwind(|| {
            let lenient_ok = parse_el(&s, ParseMode::Lenient).is_ok();
            let _ = parse_el(&s, ParseMode::Strict);
            lenient_ok
        });
        if !matches!(r, Ok(true)) {
            aborts += 1;
        }
    }
    let ok = failures == 0 && aborts == 0;
    verdict(6, "grammar round trip", ok, format!("{failures} round-trip failures, {aborts} parser aborts (0 allowed)"));
    assert!(ok);
}

#[test]
fn c07_trie_validity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    const WORDS: [&str; 30] = [
        "north", "river", "stone", "hall", "green", "lake", "iron", "bridge", "castle", "field", "port", "saint", "mill",
        "grove", "hill", "ford", "oak", "vale", "cross", "well", "marsh", "cliff", "bay", "dale", "moor", "wood", "gate",
        "brook", "ridge", "haven",
    ];
    let mut titles: Vec<String> = Vec::new();
    while titles.len() < 100 {
        let t = (0..rng.gen_range(1..5)).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ");
        if !titles.contains(&t) {
            titles.push(t);
        }
    }
    let tok = Tokenizer::build(&titles, 1).unwrap();
    let trie = build_trie(&titles, &tok);
    let title_set: HashSet<&str> = titles.iter().map(String::as_str).collect();
    let mut cfg = ModelConfig::new(tok.len());
    cfg.d_model = 16;
    cfg.ff_width = 32;
    let mut bad = 0;
    for m in 0..50u64 {
        let model = FusionModel::new(cfg.clone(), 700 + m).unwrap();
        for _ in 0..20 {
            let inputs: Vec<Vec<usize>> = (0..rng.gen_range(1..4))
                .map(|_| (0..rng.gen_range(2..10)).map(|_| rng.gen_range(3..tok.len())).collect())
                .collect();
            let fused = model.encode_candidates(&inputs).unwrap();
            let max_len = rng.gen_range(1..8);
            match model.constrained_decode(&fused, &trie, max_len) {
                Ok(ids) if title_set.contains(tok.decode(&ids).as_str()) => {}
                _ => bad += 1,
            }
        }
    }
    let ok = bad == 0;
    verdict(7, "trie validity", ok, format!("{bad} of 1000 decodes outside the 100 titles (0 allowed)"));
    assert!(ok);
}

fn ann(s: usize, e: usize, id: &str) -> Annotation {
    Annotation {
        start: s,
        end: e,
        entity_id: id.into(),
    }
}

#[test]
fn c08_metric_oracle() {
    let kb = EntityStore::from_entities(["A", "B", "C"].map(|id| Entity {
        id: id.into(),
        title: id.into(),
        description: String::new(),
    }))
    .unwrap();
    let pred = [LinkResult::new("d", vec![ann(0, 8, "A"), ann(10, 14, "B")])];
    let gold = [LinkResult::new("d", vec![ann(0, 8, "A"), ann(20, 24, "C")])];
    let m = micro_prf(&pred, &gold, &kb).unwrap();
    // an out-of-KB gold annotation is dropped before counting
    let gold_ext = [LinkResult::new("d", vec![ann(0, 8, "A"), ann(20, 24, "C"), ann(30, 34, "NIL")])];
    let m2 = micro_prf(&pred, &gold_ext, &kb).unwrap();
    let ok = (m.tp, m.fp, m.fn_) == (1, 1, 1)
        && m.precision == 0.5
        && m.recall == 0.5
        && m.f1 == 0.5
        && m2 == m;
    verdict(8, "metric oracle", ok, format!("P={} R={} F1={} (exactly 0.5), InKB filter unchanged: {}", m.precision, m.recall, m.f1, m2 == m));
    assert!(ok);
}

#[test]
fn c09_overlap_oracle() {
    let longest = resolve_overlaps(&[ann(0, 8, "A"), ann(0, 13, "B")]) == [ann(0, 13, "B")];
    let both = resolve_overlaps(&[ann(4, 9, "X"), ann(4, 9, "Y")]) == [ann(4, 9, "X"), ann(4, 9, "Y")];
    let tie = resolve_overlaps(&[ann(6, 11, "C"), ann(3, 12, "B"), ann(2, 11, "A")]) == [ann(2, 11, "A")];
    let ok = longest && both && tie;
    verdict(9, "overlap oracle", ok, format!("longest kept {longest}, same-span entities kept {both}, tie to earlier start {tie}"));
    assert!(ok);
}

#[test]
fn c11_schedule_oracle() {
    // T = 10, warm-up 1% rounds up to one step: 1e-4 · [1, 8/9, 7/9, …, 1/9, 0]
    let peak = 1e-4;
    let want: Vec<f64> = std::iter::once(peak)
        .chain((2..=10).map(|s| peak * ((10 - s) as f64 / 9.0)))
        .collect();
    let got: Vec<f64> = (1..=10).map(|s| linear_schedule(s, 10, peak, 0.01)).collect();
    let ok = got == want && got[9] == 0.0 && got[1] == peak * (8.0 / 9.0);
    verdict(11, "schedule oracle", ok, format!("trace {got:?}"));
    assert!(ok);
}

struct Pipeline {
    dir: PathBuf,
    f1: f64,
    took: Duration,
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fusionlink")
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "fusionlink {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Trains a retriever and a linking reader on a 20-document corpus over a
/// 200-entity KB through the command line, then links and scores the same
/// corpus.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let t0 = Instant::now();
        let dir = std::env::temp_dir().join(format!("fusionlink-acceptance-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let store = people_kb(200, 10);
        let docs = people_corpus(&store, 20, 5, 10);
        write_entities(&dir.join("kb.jsonl"), &store).unwrap();
        write_corpus(&dir.join("gold.jsonl"), &docs).unwrap();
        let d = dir.as_path();
        cli(&["ingest", "--entities", &p(d, "kb.jsonl"), "--corpus", &p(d, "gold.jsonl"), "--out", &p(d, "data")]);
        fs::write(
            dir.join("run.cfg"),
            format!(
                "seed = 10\nwindow = 20\nstride = 10\n\n[train-retriever]\nsteps = 300\nbatch = 4\nlr = 2e-3\nwarmup = 0.05\nd-model = 32\nff-width = 64\nnegatives = 32\nrefresh-every = 50\n\n\
                 [train-reader]\ntask = el\nsteps = 1500\nbatch = 4\nlr = 1e-3\nwarmup = 0.05\nn-cand = 8\nk = 8\n\n[link]\nk = 8\n"
            ),
        )
        .unwrap();
        let cfg = p(d, "run.cfg");
        let common = ["--config", cfg.as_str()];
        let vocab = p(d, "data/vocab.txt");
        let kb = p(d, "data/entities.jsonl");
        let gold = p(d, "data/corpus.jsonl");
        let retr = p(d, "retriever");
        let index = p(d, "entities.bin");
        let reader = p(d, "reader");
        let mut a = vec!["train-retriever", "--entities", &kb, "--corpus", &gold, "--vocab", &vocab, "--out", &retr];
        a.extend(common);
        println!("{}", cli(&a));
        cli(&["build-index", "--retriever", &retr, "--entities", &kb, "--out", &index]);
        let mut a = vec![
            "train-reader", "--entities", &kb, "--corpus", &gold, "--vocab", &vocab, "--retriever", &retr, "--index", &index,
            "--out", &reader,
        ];
        a.extend(common);
        println!("{}", cli(&a));
        let mut a = vec![
            "link", "--retriever", &retr, "--index", &index, "--reader", &reader, "--entities", &kb, "--in", &gold, "--out",
        ];
        let pred = p(d, "pred.jsonl");
        a.push(&pred);
        a.extend(common);
        cli(&a);
        let report = p(d, "report.json");
        cli(&["evaluate", "--pred", &pred, "--gold", &gold, "--entities", &kb, "--report", &report]);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        Pipeline {
            f1: json["value"].as_f64().unwrap(),
            dir,
            took: t0.elapsed(),
        }
    })
}

#[test]
fn c10_end_to_end_smoke() {
    let pl = pipeline();
    let ok = pl.f1 >= E2E_MIN_F1 && pl.took < E2E_BUDGET;
    verdict(10, "end-to-end smoke", ok, format!("InKB micro F1 {:.4} (>= {E2E_MIN_F1}), {:.1?} (< {E2E_BUDGET:?})", pl.f1, pl.took));
    assert!(ok);
}

#[test]
fn c12_thread_determinism() {
    let pl = pipeline();
    let d = pl.dir.as_path();
    let cfg = p(d, "run.cfg");
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = p(d, &format!("pred-t{threads}.jsonl"));
        cli(&[
            "link", "--config", &cfg, "--threads", threads, "--retriever", &p(d, "retriever"), "--index", &p(d, "entities.bin"),
            "--reader", &p(d, "reader"), "--entities", &p(d, "data/entities.jsonl"), "--in", &p(d, "data/corpus.jsonl"),
            "--out", &out,
        ]);
        outputs.push(fs::read(&out).unwrap());
    }
    let ok = outputs[0] == outputs[1] && !outputs[0].is_empty();
    verdict(12, "thread determinism", ok, format!("--threads 1 vs 4 byte-identical: {ok} ({} bytes)", outputs[0].len()));
    assert!(ok);
}
