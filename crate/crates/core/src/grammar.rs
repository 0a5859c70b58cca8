//! Decoder target strings: the entity/mention grammar of the linking reader
//! and entity resolution for the disambiguation reader.
//!
//! Canonical form of a linking prediction:
//!
//! ```text
//! e1 <extra_id_4> m11, m12 <extra_id_5> e2 <extra_id_4> m21
//! ```
//!
//! An empty prediction is the empty string.

use crate::error::{Error, Result};
use crate::kb::Entity;
use crate::text::{normalize_ws, ENTITY_SEP, MENTIONS};

const MARKERS: [&str; 6] = [
    "<extra_id_0>",
    "<extra_id_1>",
    "<extra_id_2>",
    "<extra_id_3>",
    "<extra_id_4>",
    "<extra_id_5>",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkedEntity {
    pub title: String,
    pub mentions: Vec<String>,
}

/// Ordered `(title, mentions)` pairs. Titles are distinct; mention lists are
/// non-empty.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ElPrediction {
    entities: Vec<LinkedEntity>,
}

fn has_marker(s: &str) -> bool {
    MARKERS.iter().any(|m| s.contains(m))
}

impl ElPrediction {
    /// Validates a prediction. Titles and mentions must be non-empty, free of
    /// surrounding whitespace and of marker tokens; mentions may not contain
    /// commas.
    pub fn new(entities: Vec<LinkedEntity>) -> Result<Self> {
        for (i, e) in entities.iter().enumerate() {
            if e.title.is_empty() || e.title.trim() != e.title || has_marker(&e.title) {
                return Err(Error::InvalidPrediction(format!("bad title {:?}", e.title)));
            }
            if e.mentions.is_empty() {
                return Err(Error::InvalidPrediction(format!("{:?} has no mentions", e.title)));
            }
            for m in &e.mentions {
                if m.is_empty() || m.trim() != m || m.contains(',') || has_marker(m) {
                    return Err(Error::InvalidPrediction(format!("bad mention {m:?}")));
                }
            }
            if entities[..i].iter().any(|o| o.title == e.title) {
                return Err(Error::InvalidPrediction(format!("duplicate title {:?}", e.title)));
            }
        }
        Ok(ElPrediction { entities })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entities(&self) -> &[LinkedEntity] {
        &self.entities
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }
}

pub fn serialize_el(pred: &ElPrediction) -> String {
    pred.entities
        .iter()
        .map(|e| format!("{} {MENTIONS} {}", e.title, e.mentions.join(", ")))
        .collect::<Vec<_>>()
        .join(&format!(" {ENTITY_SEP} "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseMode {
    /// Fail on the first bad segment.
    Strict,
    /// Drop bad segments.
    Lenient,
}

fn parse_segment(seg: &str, index: usize) -> Result<LinkedEntity> {
    let Some((title, rest)) = seg.split_once(MENTIONS) else {
        return Err(Error::MalformedSegment(index));
    };
    let title = title.trim();
    if title.is_empty() || rest.contains(MENTIONS) || has_marker(title) || has_marker(rest) {
        return Err(Error::MalformedSegment(index));
    }
    let mentions: Vec<String> = rest
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(str::to_string)
        .collect();
    if mentions.is_empty() {
        return Err(Error::EmptyMentionList(index));
    }
    Ok(LinkedEntity {
        title: title.to_string(),
        mentions,
    })
}

/// Inverse of [`serialize_el`]. Mentions are split on commas with or without
/// a following space and trimmed.
pub fn parse_el(s: &str, mode: ParseMode) -> Result<ElPrediction> {
    if s.trim().is_empty() {
        return Ok(ElPrediction::empty());
    }
    let mut entities: Vec<LinkedEntity> = Vec::new();
    for (i, seg) in s.split(ENTITY_SEP).enumerate() {
        let parsed = parse_segment(seg, i).and_then(|e| {
            if entities.iter().any(|o| o.title == e.title) {
                Err(Error::DuplicateEntity(i))
            } else {
                Ok(e)
            }
        });
        match (parsed, mode) {
            (Ok(e), _) => entities.push(e),
            (Err(e), ParseMode::Strict) => return Err(e),
            (Err(e), ParseMode::Lenient) => log::debug!("dropping segment: {e}"),
        }
    }
    Ok(ElPrediction { entities })
}

/// How the disambiguation reader names its answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TargetMode {
    /// The entity title.
    #[default]
    Title,
    /// The 0-based position in the ordered candidate list, in decimal.
    Index,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "title" => Ok(TargetMode::Title),
            "index" => Ok(TargetMode::Index),
            other => Err(Error::Config(format!("unknown target mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetMode::Title => "title",
            TargetMode::Index => "index",
        })
    }
}

/// Decoder target for the gold candidate.
pub fn ed_target(candidates: &[Entity], gold: usize, mode: TargetMode) -> String {
    match mode {
        TargetMode::Title => candidates[gold].title.clone(),
        TargetMode::Index => gold.to_string(),
    }
}

/// Maps a decoded string back onto the candidate list. Title matching
/// compares [`normalize_ws`] forms; index matching parses a decimal
/// position.
pub fn resolve_entity<'a>(
    decoded: &str,
    candidates: &'a [Entity],
    mode: TargetMode,
) -> Option<&'a Entity> {
    match mode {
        TargetMode::Title => {
            let d = normalize_ws(decoded);
            candidates.iter().find(|e| normalize_ws(&e.title) == d)
        }
        TargetMode::Index => {
            let d = normalize_ws(decoded);
            if d.is_empty() || !d.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            d.parse::<usize>().ok().and_then(|i| candidates.get(i))
        }
    }
}
