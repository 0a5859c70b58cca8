//! Word-level tokenization with character offsets, the special-token
//! registry, mention markup, sliding-window passages and the input layouts
//! consumed by the reader and the retriever.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kb::Entity;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const MENTION_START: &str = "<s1>";
pub const MENTION_END: &str = "<e1>";
pub const DOC: &str = "<extra_id_0>";
pub const PASSAGE: &str = "<extra_id_1>";
pub const TITLE: &str = "<extra_id_2>";
pub const DESCRIPTION: &str = "<extra_id_3>";
pub const MENTIONS: &str = "<extra_id_4>";
pub const ENTITY_SEP: &str = "<extra_id_5>";
pub const CLS: &str = "[CLS]";
pub const ENT: &str = "[ENT]";
pub const SEP: &str = "[SEP]";

/// Every special token, in vocabulary order. Ids `0..SPECIAL_TOKENS.len()`
/// are reserved for these.
pub const SPECIAL_TOKENS: [&str; 14] = [
    PAD,
    EOS,
    UNK,
    MENTION_START,
    MENTION_END,
    DOC,
    PASSAGE,
    TITLE,
    DESCRIPTION,
    MENTIONS,
    ENTITY_SEP,
    CLS,
    ENT,
    SEP,
];

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

pub const ED_CONTEXT_BUDGET: usize = 250;
pub const ED_ENTITY_BUDGET: usize = 140;
pub const RETRIEVAL_DESC_BUDGET: usize = 128;
pub const DOC_TRUNC_BUDGET: usize = 20;
pub const WINDOW: usize = 20;
pub const STRIDE: usize = 10;

pub fn is_special(tok: &str) -> bool {
    SPECIAL_TOKENS.contains(&tok)
}

/// A surface token with its character span (end exclusive) in the source
/// text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits text into words (maximal alphanumeric runs), single punctuation
/// characters and atomic special tokens. Offsets count Unicode scalar values.
pub fn split(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '<' || c == '[' {
            for sp in SPECIAL_TOKENS {
                let n = sp.chars().count();
                if i + n <= chars.len() && chars[i..i + n].iter().copied().eq(sp.chars()) {
                    out.push(Token {
                        text: sp.to_string(),
                        start: i,
                        end: i + n,
                    });
                    i += n;
                    continue 'outer;
                }
            }
        }
        if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(Token {
                text: chars[start..i].iter().collect(),
                start,
                end: i,
            });
        } else {
            out.push(Token {
                text: c.to_string(),
                start: i,
                end: i + 1,
            });
            i += 1;
        }
    }
    out
}

/// Surface strings of `split(text)`.
pub fn words(text: &str) -> Vec<String> {
    split(text).into_iter().map(|t| t.text).collect()
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(t.as_ref());
    }
    s
}

/// Canonical comparison form: trimmed, whitespace runs collapsed, and any
/// whitespace touching a non-alphanumeric character removed. Two strings that
/// tokenize to the same word sequence always share this form.
pub fn normalize_ws(s: &str) -> String {
    let chars: Vec<char> = s.trim().chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            let mut j = i;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            let prev = chars[i - 1];
            let next = chars[j];
            if prev.is_alphanumeric() && next.is_alphanumeric() {
                out.push(' ');
            }
            i = j;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

/// Character-indexed substring.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut idx = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b0 = idx.nth(start).unwrap_or(text.len());
    let b1 = if end > start {
        idx.nth(end - start - 1).unwrap_or(text.len())
    } else {
        b0
    };
    &text[b0..b1]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary from a text corpus. Words seen at least
    /// `min_count` times are kept, ordered by descending frequency then
    /// lexicographically, after the special tokens.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for line in corpus {
            for t in split(line.as_ref()) {
                any = true;
                if !is_special(&t.text) {
                    *counts.entry(t.text).or_default() += 1;
                }
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        vocab.extend(words.into_iter().map(|(w, _)| w));
        Ok(Self::from_vocab_unchecked(vocab))
    }

    fn from_vocab_unchecked(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Tokenizer { vocab, index }
    }

    /// Vocabulary from an explicit token list; the special tokens must come
    /// first, in registry order.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIAL_TOKENS.len()
            || vocab.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            if !vocab.iter().any(|t| t == UNK) {
                return Err(Error::MissingUnk);
            }
            return Err(Error::Config(
                "vocabulary must start with the special tokens in registry order".into(),
            ));
        }
        let t = Self::from_vocab_unchecked(vocab);
        if t.index.len() != t.vocab.len() {
            return Err(Error::Config("vocabulary contains duplicate tokens".into()));
        }
        Ok(t)
    }

    /// Adds tokens that are not yet present (e.g. candidate index digits).
    pub fn with_extra_tokens<I, S>(mut self, extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        for t in extra {
            let t = t.into();
            if !self.index.contains_key(&t) {
                self.index.insert(t.clone(), self.vocab.len());
                self.vocab.push(t);
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.index.contains_key(tok)
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.vocab.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn ids<S: AsRef<str>>(&self, toks: &[S]) -> Vec<usize> {
        toks.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split(text).iter().map(|t| self.id(&t.text)).collect()
    }

    /// Token strings for ids, stopping at the first end-of-sequence and
    /// skipping padding.
    pub fn tokens_of(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS_ID)
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        detokenize(&self.tokens_of(ids))
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// One token per line; the line number is the id.
    pub fn write_vocab(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.vocab {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_vocab(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_vocab(s.lines().map(str::to_string).collect())
    }
}

/// A window of document tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Passage {
    pub doc_id: String,
    /// Token range `[token_start, token_end)` within the document.
    pub token_start: usize,
    pub token_end: usize,
    /// Tokens with passage-local character offsets.
    pub tokens: Vec<Token>,
    /// Source text from the first token's start to the last token's end.
    pub text: String,
    /// Document character offset of the first token.
    pub char_offset: usize,
    pub topic: String,
}

impl Passage {
    pub fn words(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    pub fn to_document_span(&self, start: usize, end: usize) -> (usize, usize) {
        (start + self.char_offset, end + self.char_offset)
    }
}

/// Wraps the mention at character span `[start, end)` in `<s1> … <e1>` and
/// trims the surrounding context to at most `budget` tokens in total, taking
/// an even share from each side and giving any unused share to the other.
pub fn mark_mention(doc: &str, start: usize, end: usize, budget: usize) -> Result<Vec<String>> {
    let len = doc.chars().count();
    if start >= end || end > len {
        return Err(Error::SpanOutOfBounds { start, end, len });
    }
    let toks = split(doc);
    let first = toks.iter().position(|t| t.start == start);
    let last = toks.iter().position(|t| t.end == end);
    let (first, last) = match (first, last) {
        (Some(f), Some(l)) if f <= l => (f, l + 1),
        _ => return Err(Error::SpanSplitsToken { start, end }),
    };
    let left = &toks[..first];
    let mut mention: Vec<String> = toks[first..last].iter().map(|t| t.text.clone()).collect();
    let right = &toks[last..];

    let budget = budget.max(2);
    mention.truncate(budget - 2);
    let avail = budget - 2 - mention.len();
    let mut lq = avail / 2;
    let mut rq = avail - lq;
    if left.len() < lq {
        rq += lq - left.len();
        lq = left.len();
    }
    if right.len() < rq {
        lq = left.len().min(lq + rq - right.len());
        rq = right.len();
    }

    let mut out = Vec::with_capacity(lq + mention.len() + 2 + rq);
    out.extend(left[left.len() - lq..].iter().map(|t| t.text.clone()));
    out.push(MENTION_START.to_string());
    out.extend(mention);
    out.push(MENTION_END.to_string());
    out.extend(right[..rq].iter().map(|t| t.text.clone()));
    Ok(out)
}

/// Sliding windows of `window` tokens starting every `stride` tokens. The
/// passage text is the exact document substring it spans.
pub fn chunk_passages(
    doc_id: &str,
    doc: &str,
    tokens: &[Token],
    topic: &str,
    window: usize,
    stride: usize,
) -> Result<Vec<Passage>> {
    if stride == 0 || window == 0 || stride > window {
        return Err(Error::InvalidWindow { window, stride });
    }
    let mut out = Vec::new();
    for ts in (0..tokens.len()).step_by(stride) {
        let te = (ts + window).min(tokens.len());
        let off = tokens[ts].start;
        let text = char_slice(doc, off, tokens[te - 1].end).to_string();
        out.push(Passage {
            doc_id: doc_id.to_string(),
            token_start: ts,
            token_end: te,
            tokens: tokens[ts..te]
                .iter()
                .map(|t| Token {
                    text: t.text.clone(),
                    start: t.start - off,
                    end: t.end - off,
                })
                .collect(),
            text,
            char_offset: off,
            topic: topic.to_string(),
        });
    }
    Ok(out)
}

/// `[<extra_id_2>, title…, <extra_id_3>, description…]` cut to `budget`
/// tokens, removing description before title and never the markers.
fn entity_part(e: &Entity, budget: usize) -> Vec<String> {
    let budget = budget.max(2);
    let mut title = words(&e.title);
    title.truncate(budget - 2);
    let mut desc = words(&e.description);
    desc.truncate(budget - 2 - title.len());
    let mut out = Vec::with_capacity(title.len() + desc.len() + 2);
    out.push(TITLE.to_string());
    out.extend(title);
    out.push(DESCRIPTION.to_string());
    out.extend(desc);
    out
}

/// `context <extra_id_2> title <extra_id_3> description`
pub fn build_ed_input(context: &[String], e: &Entity, entity_budget: usize) -> Vec<String> {
    let mut out = context.to_vec();
    out.extend(entity_part(e, entity_budget));
    out
}

/// `<extra_id_0> D <extra_id_1> p <extra_id_2> title <extra_id_3> description`
pub fn build_el_input(
    doc_trunc: &[String],
    passage: &[String],
    e: &Entity,
    entity_budget: usize,
) -> Result<Vec<String>> {
    if doc_trunc.len() > DOC_TRUNC_BUDGET {
        return Err(Error::DocBudgetExceeded {
            len: doc_trunc.len(),
            budget: DOC_TRUNC_BUDGET,
        });
    }
    let mut out = Vec::with_capacity(doc_trunc.len() + passage.len() + 16);
    out.push(DOC.to_string());
    out.extend_from_slice(doc_trunc);
    out.push(PASSAGE.to_string());
    out.extend_from_slice(passage);
    out.extend(entity_part(e, entity_budget));
    Ok(out)
}

/// `[CLS] title [ENT] description [SEP]`
pub fn build_retrieval_entity_text(e: &Entity, desc_budget: usize) -> Vec<String> {
    let mut out = vec![CLS.to_string()];
    out.extend(words(&e.title));
    out.push(ENT.to_string());
    out.extend(words(&e.description).into_iter().take(desc_budget));
    out.push(SEP.to_string());
    out
}

/// `[CLS] p [SEP] t [SEP]`
pub fn build_retrieval_passage_text(p: &Passage) -> Vec<String> {
    let mut out = vec![CLS.to_string()];
    out.extend(p.tokens.iter().map(|t| t.text.clone()));
    out.push(SEP.to_string());
    out.extend(words(&p.topic));
    out.push(SEP.to_string());
    out
}

/// First `DOC_TRUNC_BUDGET` tokens of a document, used both as the reader's
/// document segment and as the retriever's passage topic.
pub fn truncated_document(tokens: &[Token]) -> Vec<String> {
    tokens
        .iter()
        .take(DOC_TRUNC_BUDGET)
        .map(|t| t.text.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const FIG1: &str = "DUBLIN 1996-12-07 Jack Charlton's relationship with the people of Ireland was cemented on Saturday when the Englishman was officially declared one of their own. That is why this is so emotional a night for me , Charlton said";

    fn ent(title: &str, desc: &str) -> Entity {
        Entity {
            id: title.to_lowercase().replace(' ', "_"),
            title: title.into(),
            description: desc.into(),
        }
    }

    fn count(seq: &[String], tok: &str) -> usize {
        seq.iter().filter(|t| *t == tok).count()
    }

    #[test]
    fn split_keeps_offsets_and_special_tokens() {
        let toks = split("a <s1>Bob's</e1> [CLS]x");
        let texts: Vec<_> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["a", "<s1>", "Bob", "'", "s", "<", "/", "e1", ">", "[CLS]", "x"]);
        assert_eq!((toks[1].start, toks[1].end), (2, 6));
        assert_eq!((toks[2].start, toks[2].end), (6, 9));
    }

    #[test]
    fn vocab_frequency_threshold() {
        let t = Tokenizer::build(["a b a"], 2).unwrap();
        assert!(t.contains("a"));
        assert!(!t.contains("b"));
        assert_eq!(t.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_always_has_special_tokens_first() {
        let t = Tokenizer::build(["x"], 1).unwrap();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(t.id(s), i);
        }
        for m in ["<s1>", "<e1>", "<extra_id_0>", "<extra_id_5>"] {
            assert!(t.contains(m));
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Tokenizer::build(Vec::<&str>::new(), 1), Err(Error::EmptyCorpus)));
        assert!(matches!(Tokenizer::build(["   "], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn charlton_is_a_single_in_vocab_token() {
        let t = Tokenizer::build([FIG1], 1).unwrap();
        let ids = t.encode("Charlton");
        assert_eq!(ids.len(), 1);
        assert_ne!(ids[0], UNK_ID);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let t = Tokenizer::build([FIG1], 1).unwrap();
        t.write_vocab(&p).unwrap();
        assert_eq!(Tokenizer::read_vocab(&p).unwrap(), t);
    }

    #[test]
    fn vocab_without_specials_is_rejected() {
        assert!(matches!(
            Tokenizer::from_vocab(vec!["a".into()]),
            Err(Error::MissingUnk)
        ));
    }

    #[test]
    fn fig1_mention_markup() {
        let start = FIG1.rfind("Charlton").unwrap();
        let seq = mark_mention(FIG1, start, start + 8, 250).unwrap();
        let tail: Vec<&str> = seq[seq.len() - 8..].iter().map(String::as_str).collect();
        assert_eq!(tail, ["night", "for", "me", ",", "<s1>", "Charlton", "<e1>", "said"]);
        // under budget: nothing trimmed
        assert_eq!(seq.len(), split(FIG1).len() + 2);
    }

    #[test]
    fn mention_at_start_spends_budget_on_the_right() {
        let doc = (0..50).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let seq = mark_mention(&doc, 0, 2, 10).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(&seq[..3], ["<s1>", "w0", "<e1>"]);
        assert_eq!(seq[9], "w7");
    }

    #[test]
    fn truncation_is_symmetric_in_the_middle() {
        let doc = (0..50).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let start = doc.find("w25").unwrap();
        let seq = mark_mention(&doc, start, start + 3, 11).unwrap();
        assert_eq!(seq, ["w21", "w22", "w23", "w24", "<s1>", "w25", "<e1>", "w26", "w27", "w28", "w29"]);
    }

    #[test]
    fn bad_spans() {
        assert!(matches!(mark_mention("ab cd", 3, 9, 250), Err(Error::SpanOutOfBounds { .. })));
        assert!(matches!(mark_mention("ab cd", 2, 2, 250), Err(Error::SpanOutOfBounds { .. })));
        assert!(matches!(mark_mention("ab cd", 1, 5, 250), Err(Error::SpanSplitsToken { .. })));
    }

    fn doc_of(n: usize) -> (String, Vec<Token>) {
        let doc = (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let toks = split(&doc);
        (doc, toks)
    }

    #[test]
    fn chunk_forty_tokens() {
        let (doc, toks) = doc_of(40);
        let ps = chunk_passages("d", &doc, &toks, "", 20, 10).unwrap();
        let starts: Vec<_> = ps.iter().map(|p| p.token_start).collect();
        assert_eq!(starts, [0, 10, 20, 30]);
        assert_eq!(ps[3].tokens.len(), 10);
    }

    #[test]
    fn chunk_short_and_tiled() {
        let (doc, toks) = doc_of(5);
        let ps = chunk_passages("d", &doc, &toks, "", 20, 10).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].tokens.len(), 5);
        let (doc, toks) = doc_of(40);
        let ps = chunk_passages("d", &doc, &toks, "", 20, 20).unwrap();
        assert_eq!(ps.iter().map(|p| (p.token_start, p.token_end)).collect::<Vec<_>>(), [(0, 20), (20, 40)]);
    }

    #[test]
    fn chunk_rejects_bad_windows() {
        let (doc, toks) = doc_of(5);
        assert!(chunk_passages("d", &doc, &toks, "", 10, 20).is_err());
        assert!(chunk_passages("d", &doc, &toks, "", 10, 0).is_err());
    }

    #[test]
    fn passage_offsets_map_back_to_document() {
        let (doc, toks) = doc_of(33);
        for p in chunk_passages("d", &doc, &toks, "", 20, 10).unwrap() {
            for (local, global) in p.tokens.iter().zip(&toks[p.token_start..p.token_end]) {
                assert_eq!(p.to_document_span(local.start, local.end), (global.start, global.end));
                assert_eq!(char_slice(&p.text, local.start, local.end), global.text);
            }
        }
    }

    #[test]
    fn ed_input_layout() {
        let ctx = mark_mention(FIG1, FIG1.rfind("Charlton").unwrap(), FIG1.rfind("Charlton").unwrap() + 8, 250).unwrap();
        let e = ent("Jack Charlton", "English footballer and manager of Ireland");
        let seq = build_ed_input(&ctx, &e, 140);
        assert_eq!(count(&seq, TITLE), 1);
        assert_eq!(count(&seq, DESCRIPTION), 1);
        let t = seq.iter().position(|s| s == TITLE).unwrap();
        assert_eq!(&seq[t + 1..t + 3], ["Jack", "Charlton"]);
        assert_eq!(seq[t + 3], DESCRIPTION);

        let empty = build_ed_input(&ctx, &ent("Jack Charlton", ""), 140);
        assert_eq!(empty.last().unwrap(), DESCRIPTION);

        let long = (0..500).map(|i| format!("d{i}")).collect::<Vec<_>>().join(" ");
        let seq = build_ed_input(&ctx, &ent("Jack Charlton", &long), 140);
        assert_eq!(seq.len() - ctx.len(), 140);
    }

    #[test]
    fn el_input_layout() {
        let d = words("DUBLIN 1996-12-07 Jack Charlton's relationship with the people of Ireland was cemented");
        assert!(d.len() <= 20);
        let p = words("That is why this is so emotional a night for me , Charlton said .");
        let e = ent("Jack Charlton", "English footballer");
        let seq = build_el_input(&d, &p, &e, 140).unwrap();
        let pos: Vec<usize> = [DOC, PASSAGE, TITLE, DESCRIPTION]
            .iter()
            .map(|m| seq.iter().position(|s| s == m).unwrap())
            .collect();
        assert_eq!(pos[0], 0);
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(&seq[1..pos[1]], &d[..]);
        assert_eq!(&seq[pos[1] + 1..pos[2]], &p[..]);

        let seq = build_el_input(&d, &p, &ent("X", ""), 140).unwrap();
        assert_eq!(seq.last().unwrap(), DESCRIPTION);

        let seq = build_el_input(&d, &d, &e, 140).unwrap();
        assert_eq!(count(&seq, DOC), 1);

        let long: Vec<String> = (0..21).map(|i| i.to_string()).collect();
        assert!(matches!(build_el_input(&long, &p, &e, 140), Err(Error::DocBudgetExceeded { .. })));
    }

    #[test]
    fn retrieval_layouts() {
        let e = ent("Jack Charlton", "English footballer");
        assert_eq!(
            build_retrieval_entity_text(&e, 128),
            ["[CLS]", "Jack", "Charlton", "[ENT]", "English", "footballer", "[SEP]"]
        );
        assert_eq!(
            build_retrieval_entity_text(&ent("Jack Charlton", ""), 128),
            ["[CLS]", "Jack", "Charlton", "[ENT]", "[SEP]"]
        );
        let long = (0..200).map(|i| format!("d{i}")).collect::<Vec<_>>().join(" ");
        let seq = build_retrieval_entity_text(&ent("A", &long), 128);
        assert_eq!(seq.len(), 128 + 4);

        let text = "That is why this is so emotional a night for me , Charlton said .";
        let toks = split(text);
        let ps = chunk_passages("d", text, &toks, "DUBLIN 1996-12-07 Jack Charlton's", 20, 10).unwrap();
        let seq = build_retrieval_passage_text(&ps[0]);
        assert_eq!(seq[0], CLS);
        assert_eq!(count(&seq, SEP), 2);
        assert_eq!(seq.last().unwrap(), SEP);

        let ps = chunk_passages("d", "word", &split("word"), "", 20, 10).unwrap();
        assert_eq!(build_retrieval_passage_text(&ps[0]), ["[CLS]", "word", "[SEP]", "[SEP]"]);
    }

    #[test]
    fn normalization_table() {
        assert_eq!(normalize_ws("  Jack   Charlton "), "Jack Charlton");
        assert_eq!(normalize_ws("Charlton Athletic F . C ."), "Charlton Athletic F.C.");
        assert_eq!(normalize_ws("Charlton Athletic F.C."), "Charlton Athletic F.C.");
        assert_eq!(normalize_ws("a\t\nb"), "a b");
        assert_eq!(normalize_ws(""), "");
    }

    proptest! {
        #[test]
        fn detokenize_restores_text_up_to_whitespace(s in "[a-zA-Z0-9 ,.'!?\\-]{0,60}") {
            let toks = words(&s);
            prop_assert_eq!(normalize_ws(&detokenize(&toks)), normalize_ws(&s));
            prop_assert_eq!(words(&detokenize(&toks)), toks);
        }

        #[test]
        fn every_token_is_covered(n in 1usize..80, window in 1usize..30, stride_frac in 0.0f64..1.0) {
            let stride = ((window as f64 * stride_frac) as usize).clamp(1, window);
            let (doc, toks) = doc_of(n);
            let ps = chunk_passages("d", &doc, &toks, "", window, stride).unwrap();
            let mut cover = vec![0usize; n];
            for p in &ps {
                for i in p.token_start..p.token_end { cover[i] += 1; }
            }
            prop_assert!(cover.iter().all(|&c| c >= 1));
            if window % stride == 0 {
                // interior tokens, away from both edges, are seen window/stride times
                let k = window / stride;
                for (i, &c) in cover.iter().enumerate() {
                    if i >= window - stride && i + window <= n {
                        prop_assert_eq!(c, k);
                    }
                }
            }
        }

        #[test]
        fn markup_keeps_markers_within_budget(n in 1usize..60, pos in 0usize..60, budget in 3usize..40) {
            let pos = pos % n;
            let (doc, toks) = doc_of(n);
            let seq = mark_mention(&doc, toks[pos].start, toks[pos].end, budget).unwrap();
            prop_assert!(seq.len() <= budget);
            prop_assert_eq!(count(&seq, MENTION_START), 1);
            prop_assert_eq!(count(&seq, MENTION_END), 1);
        }
    }
}
