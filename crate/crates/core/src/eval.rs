//! Accuracy, InKB micro precision/recall/F1 and difficulty-bracket reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kb::{difficulty_bracket, AnnotatedDocument, Annotation, Bracket, EntityStore, PriorTable};
use crate::linker::LinkResult;

pub fn ed_accuracy<G: AsRef<str>, P: AsRef<str>>(pairs: &[(G, Option<P>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let correct = pairs
        .iter()
        .filter(|(g, p)| p.as_ref().is_some_and(|p| p.as_ref() == g.as_ref()))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MicroPRF {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MicroPRF {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MicroPRF {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Exact `(start, end, entity)` matching, pooled over documents. Gold
/// annotations whose entity is not in `in_kb` are removed before counting.
pub fn micro_prf(pred: &[LinkResult], gold: &[LinkResult], in_kb: &EntityStore) -> Result<MicroPRF> {
    let index = |docs: &[LinkResult]| -> HashMap<String, HashSet<Annotation>> {
        let mut m: HashMap<String, HashSet<Annotation>> = HashMap::new();
        for d in docs {
            m.entry(d.doc_id.clone())
                .or_default()
                .extend(d.annotations.iter().cloned());
        }
        m
    };
    let p = index(pred);
    let mut g = index(gold);
    if let Some(id) = p.keys().find(|k| !g.contains_key(*k)) {
        return Err(Error::DocMismatch { doc_id: id.clone() });
    }
    if let Some(id) = g.keys().find(|k| !p.contains_key(*k)) {
        return Err(Error::DocMismatch { doc_id: id.clone() });
    }
    for anns in g.values_mut() {
        anns.retain(|a| in_kb.contains(&a.entity_id));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (doc, pa) in &p {
        let ga = &g[doc];
        let hits = pa.intersection(ga).count();
        tp += hits;
        fp += pa.len() - hits;
        fn_ += ga.len() - hits;
    }
    Ok(MicroPRF::from_counts(tp, fp, fn_))
}

/// One disambiguation decision, with the surface form needed to look up its
/// prior.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdRecord {
    pub surface: String,
    pub gold: String,
    pub predicted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BracketRow {
    pub bracket: &'static str,
    pub count: usize,
    pub correct: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Accuracy per difficulty bracket of the gold entity's prior. All nine
/// brackets are always reported; empty ones carry no accuracy.
pub fn bracket_report(records: &[EdRecord], prior: &PriorTable) -> Vec<BracketRow> {
    let mut acc: BTreeMap<Bracket, (usize, usize)> = BTreeMap::new();
    for r in records {
        let b = difficulty_bracket(prior.prior(&r.surface, &r.gold)).unwrap_or(Bracket::Below);
        let slot = acc.entry(b).or_default();
        slot.0 += 1;
        if r.predicted.as_deref() == Some(r.gold.as_str()) {
            slot.1 += 1;
        }
    }
    Bracket::ALL
        .iter()
        .map(|&b| {
            let (count, correct) = acc.get(&b).copied().unwrap_or((0, 0));
            BracketRow {
                bracket: b.label(),
                count,
                correct,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
            }
        })
        .collect()
}

/// Pairs every gold mention with the prediction on the same span, if any.
/// Gold mentions without a prediction count as errors.
pub fn ed_records(pred: &[LinkResult], gold: &[AnnotatedDocument]) -> Result<Vec<EdRecord>> {
    let by_doc: HashMap<&str, &LinkResult> = pred.iter().map(|r| (r.doc_id.as_str(), r)).collect();
    if let Some(r) = pred.iter().find(|r| !gold.iter().any(|g| g.doc_id == r.doc_id)) {
        return Err(Error::DocMismatch {
            doc_id: r.doc_id.clone(),
        });
    }
    let mut out = Vec::new();
    for doc in gold {
        let spans: HashMap<(usize, usize), &str> = by_doc
            .get(doc.doc_id.as_str())
            .map(|r| {
                r.annotations
                    .iter()
                    .map(|a| ((a.start, a.end), a.entity_id.as_str()))
                    .collect()
            })
            .unwrap_or_default();
        for a in &doc.annotations {
            out.push(EdRecord {
                surface: doc.surface(a).to_string(),
                gold: a.entity_id.clone(),
                predicted: spans.get(&(a.start, a.end)).map(|s| s.to_string()),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub counts: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub brackets: Vec<BracketRow>,
}

impl Report {
    pub fn from_prf(dataset: &str, prf: &MicroPRF) -> Self {
        let counts = [
            ("tp", prf.tp as f64),
            ("fp", prf.fp as f64),
            ("fn", prf.fn_ as f64),
            ("precision", prf.precision),
            ("recall", prf.recall),
            ("f1", prf.f1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Report {
            dataset: dataset.to_string(),
            metric: "inkb_micro_f1".into(),
            value: prf.f1,
            counts,
            brackets: Vec::new(),
        }
    }

    pub fn from_ed(dataset: &str, records: &[EdRecord], prior: &PriorTable) -> Result<Self> {
        let pairs: Vec<(&str, Option<&str>)> = records
            .iter()
            .map(|r| (r.gold.as_str(), r.predicted.as_deref()))
            .collect();
        let acc = ed_accuracy(&pairs)?;
        let correct = records
            .iter()
            .filter(|r| r.predicted.as_deref() == Some(r.gold.as_str()))
            .count();
        let counts = [("total", records.len() as f64), ("correct", correct as f64)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Ok(Report {
            dataset: dataset.to_string(),
            metric: "ed_accuracy".into(),
            value: acc,
            counts,
            brackets: bracket_report(records, prior),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset  {}", self.dataset);
        let _ = writeln!(s, "{:<10} {:.4}", self.metric, self.value);
        for (k, v) in &self.counts {
            if v.fract() == 0.0 {
                let _ = writeln!(s, "  {k:<10} {v}");
            } else {
                let _ = writeln!(s, "  {k:<10} {v:.4}");
            }
        }
        if !self.brackets.is_empty() {
            let _ = writeln!(s, "{:<12} {:>6} {:>8}", "bracket", "count", "accuracy");
            for b in &self.brackets {
                let acc = b.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
                let _ = writeln!(s, "{:<12} {:>6} {:>8}", b.bracket, b.count, acc);
            }
        }
        s
    }
}
