//! Dataset ingestion for the `sentence####[(targets, opinions, 'POL'), ...]`
//! line format, plus the word-level vocabulary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive word-index interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn single(i: usize) -> Self {
        Span { start: i, end: i }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEU")]
    Neu,
    #[serde(rename = "NEG")]
    Neg,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Pos, Polarity::Neu, Polarity::Neg];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neu => "NEU",
            Polarity::Neg => "NEG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "POS" => Some(Polarity::Pos),
            "NEU" => Some(Polarity::Neu),
            "NEG" => Some(Polarity::Neg),
            _ => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub target: Span,
    pub opinion: Span,
    pub polarity: Polarity,
}

impl Triplet {
    pub fn new(target: Span, opinion: Span, polarity: Polarity) -> Self {
        Triplet {
            target,
            opinion,
            polarity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub triplets: Vec<Triplet>,
}

impl AnnotatedSentence {
    pub fn unannotated(text: &str) -> Self {
        AnnotatedSentence {
            tokens: text.split_whitespace().map(str::to_owned).collect(),
            triplets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Serializes back to the dataset line format.
    pub fn to_line(&self) -> String {
        let list = |s: &Span| {
            let idx: Vec<String> = s.indices().map(|i| i.to_string()).collect();
            format!("[{}]", idx.join(", "))
        };
        let tuples: Vec<String> = self
            .triplets
            .iter()
            .map(|t| {
                format!(
                    "({}, {}, '{}')",
                    list(&t.target),
                    list(&t.opinion),
                    t.polarity
                )
            })
            .collect();
        format!("{}####[{}]", self.text(), tuples.join(", "))
    }
}

/// Parses one dataset line; errors are reported as line 1.
pub fn parse_line(line: &str) -> Result<AnnotatedSentence> {
    parse_line_at(line, 1)
}

/// Parses one dataset line, naming `line_no` in any error.
pub fn parse_line_at(line: &str, line_no: usize) -> Result<AnnotatedSentence> {
    let err = |cause: String| Error::Parse {
        line: line_no,
        cause,
    };
    let line = line.trim_end_matches(['\r', '\n']);
    let (text, annotation) = line
        .rsplit_once("####")
        .ok_or_else(|| err("missing `####` separator".into()))?;
    let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
    let raw = AnnotationParser::new(annotation.trim())
        .parse()
        .map_err(&err)?;

    let mut triplets = Vec::with_capacity(raw.len());
    let mut seen = HashSet::new();
    for (targets, opinions, pol) in raw {
        let target = to_span(&targets, tokens.len()).map_err(|c| err(format!("target {c}")))?;
        let opinion = to_span(&opinions, tokens.len()).map_err(|c| err(format!("opinion {c}")))?;
        let polarity =
            Polarity::parse(&pol).ok_or_else(|| err(format!("unknown polarity tag '{pol}'")))?;
        if target.overlaps(&opinion) {
            return Err(err(format!("target {target} overlaps opinion {opinion}")));
        }
        let t = Triplet::new(target, opinion, polarity);
        if !seen.insert(t) {
            return Err(err(format!(
                "duplicate triplet ({target}, {opinion}, {polarity})"
            )));
        }
        triplets.push(t);
    }
    Ok(AnnotatedSentence { tokens, triplets })
}

fn to_span(idx: &[usize], len: usize) -> std::result::Result<Span, String> {
    let (&first, &last) = match (idx.first(), idx.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err("index list is empty".into()),
    };
    if let Some(w) = idx.windows(2).find(|w| w[1] != w[0] + 1) {
        return Err(format!("indices not contiguous ({} then {})", w[0], w[1]));
    }
    if last >= len {
        return Err(format!("index {last} out of range for {len} tokens"));
    }
    Ok(Span::new(first, last))
}

type RawTuple = (Vec<usize>, Vec<usize>, String);

struct AnnotationParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> AnnotationParser<'a> {
    fn new(s: &'a str) -> Self {
        AnnotationParser {
            s: s.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> std::result::Result<(), String> {
        match self.peek() {
            Some(x) if x == c => {
                self.pos += 1;
                Ok(())
            }
            Some(x) => Err(format!(
                "expected '{}' at column {}, found '{}'",
                c as char, self.pos, x as char
            )),
            None => Err(format!("expected '{}', found end of line", c as char)),
        }
    }

    fn parse(mut self) -> std::result::Result<Vec<RawTuple>, String> {
        self.expect(b'[')?;
        let mut out = Vec::new();
        if self.peek() == Some(b']') {
            self.pos += 1;
        } else {
            loop {
                out.push(self.tuple()?);
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b']') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(format!("malformed tuple separator at column {}", self.pos)),
                }
            }
        }
        if self.peek().is_some() {
            return Err(format!("trailing characters at column {}", self.pos));
        }
        Ok(out)
    }

    fn tuple(&mut self) -> std::result::Result<RawTuple, String> {
        self.expect(b'(')?;
        let t = self.index_list()?;
        self.expect(b',')?;
        let o = self.index_list()?;
        self.expect(b',')?;
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(format!("expected quoted polarity at column {}", self.pos)),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.s.len() {
            return Err("unterminated polarity string".into());
        }
        let pol = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        self.expect(b')')?;
        Ok((t, o, pol))
    }

    fn index_list(&mut self) -> std::result::Result<Vec<usize>, String> {
        self.expect(b'[')?;
        let mut out = Vec::new();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(format!("expected index at column {start}"));
            }
            let n = std::str::from_utf8(&self.s[start..self.pos])
                .ok()
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| format!("index too large at column {start}"))?;
            out.push(n);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b']') => {
                    self.pos += 1;
                    return Ok(out);
                }
                _ => return Err(format!("malformed index list at column {}", self.pos)),
            }
        }
    }
}

/// Sentence and per-polarity triplet counts of one split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    pub pos: usize,
    pub neu: usize,
    pub neg: usize,
}

impl SplitStats {
    pub fn of(sentences: &[AnnotatedSentence]) -> Self {
        let mut s = SplitStats {
            sentences: sentences.len(),
            ..Default::default()
        };
        for t in sentences.iter().flat_map(|s| &s.triplets) {
            match t.polarity {
                Polarity::Pos => s.pos += 1,
                Polarity::Neu => s.neu += 1,
                Polarity::Neg => s.neg += 1,
            }
        }
        s
    }

    pub fn triplets(&self) -> usize {
        self.pos + self.neu + self.neg
    }
}

/// Published sentence / POS / NEU / NEG counts of the four benchmark
/// datasets, keyed by (dataset directory, split).
pub const REFERENCE_STATS: [(&str, &str, SplitStats); 12] = {
    const fn s(sentences: usize, pos: usize, neu: usize, neg: usize) -> SplitStats {
        SplitStats {
            sentences,
            pos,
            neu,
            neg,
        }
    }
    [
        ("14res", "train", s(1266, 1692, 166, 480)),
        ("14res", "dev", s(310, 404, 54, 119)),
        ("14res", "test", s(492, 773, 66, 155)),
        ("14lap", "train", s(906, 817, 126, 517)),
        ("14lap", "dev", s(219, 169, 36, 141)),
        ("14lap", "test", s(328, 364, 63, 116)),
        ("15res", "train", s(605, 783, 25, 205)),
        ("15res", "dev", s(148, 185, 11, 53)),
        ("15res", "test", s(322, 317, 25, 143)),
        ("16res", "train", s(857, 1015, 50, 329)),
        ("16res", "dev", s(210, 252, 11, 76)),
        ("16res", "test", s(326, 407, 29, 78)),
    ]
};

/// Parses a whole split. Blank lines are skipped; any malformed line aborts
/// with its 1-based line number.
pub fn parse_split(content: &str) -> Result<(Vec<AnnotatedSentence>, SplitStats)> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line_at(line, i + 1)?);
    }
    let stats = SplitStats::of(&out);
    Ok((out, stats))
}

pub fn load_split(path: impl AsRef<Path>) -> Result<(Vec<AnnotatedSentence>, SplitStats)> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&content)
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const TARGET_BEGIN: &str = "[T-B]";
pub const TARGET_END: &str = "[T-E]";
pub const OPINION_BEGIN: &str = "[O-B]";
pub const OPINION_END: &str = "[O-E]";

pub const RESERVED: [&str; 8] = [
    PAD,
    UNK,
    CLS,
    SEP,
    TARGET_BEGIN,
    TARGET_END,
    OPINION_BEGIN,
    OPINION_END,
];

/// Dense word ↔ id map. Ids `0..8` are the reserved tokens in [`RESERVED`]
/// order; words follow in lexicographic order. Words are stored lowercased,
/// so they can never collide with the upper-case reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;
    pub const TARGET_BEGIN_ID: usize = 4;
    pub const TARGET_END_ID: usize = 5;
    pub const OPINION_BEGIN_ID: usize = 6;
    pub const OPINION_END_ID: usize = 7;

    /// Rebuilds a vocabulary from its id-ordered token list (checkpoint load).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Checkpoint("vocabulary lacks reserved prefix".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn id(&self, word: &str) -> usize {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Lowercased word vocabulary over `sentences`, keeping words seen at least
/// `min_freq` times (values below 1 are treated as 1).
pub fn build_vocab(sentences: &[AnnotatedSentence], min_freq: usize) -> Vocabulary {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for w in sentences.iter().flat_map(|s| &s.tokens) {
        *counts.entry(w.to_lowercase()).or_default() += 1;
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .map(|(w, _)| w),
    );
    Vocabulary::from_tokens(tokens).expect("reserved prefix and unique words")
}

pub fn encode_tokens(sentence: &AnnotatedSentence, vocab: &Vocabulary) -> Vec<usize> {
    sentence.tokens.iter().map(|w| vocab.id(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_triplets() {
        let s = parse_line(
            "Great food but the service was dreadful !####[([1], [0], 'POS'), ([4], [6], 'NEG')]",
        )
        .unwrap();
        assert_eq!(s.tokens.len(), 8);
        assert_eq!(
            s.triplets,
            vec![
                Triplet::new(Span::single(1), Span::single(0), Polarity::Pos),
                Triplet::new(Span::single(4), Span::single(6), Polarity::Neg),
            ]
        );
    }

    #[test]
    fn parses_empty_annotation() {
        let s = parse_line("ok .####[]").unwrap();
        assert_eq!(s.tokens, vec!["ok", "."]);
        assert!(s.triplets.is_empty());
    }

    #[test]
    fn parses_multiword_target() {
        let s = parse_line("battery life is long####[([0, 1], [3], 'POS')]").unwrap();
        assert_eq!(s.triplets[0].target, Span::new(0, 1));
        assert_eq!(s.triplets[0].opinion, Span::single(3));
    }

    #[test]
    fn accepts_double_quotes() {
        let s = parse_line("a b####[([0], [1], \"NEU\")]").unwrap();
        assert_eq!(s.triplets[0].polarity, Polarity::Neu);
    }

    fn cause(line: &str) -> String {
        match parse_line_at(line, 7).unwrap_err() {
            Error::Parse { line, cause } => {
                assert_eq!(line, 7);
                cause
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn parse_errors() {
        assert!(cause("no separator here").contains("separator"));
        assert!(cause("a b c d####[([0, 2], [3], 'POS')]").contains("contiguous"));
        assert!(cause("a b####[([0], [5], 'POS')]").contains("out of range"));
        assert!(cause("a b####[([0], [1], 'GOOD')]").contains("polarity"));
        assert!(cause("a b####[([0], [1], 'POS') ([1], [0], 'POS')]").contains("separator"));
        assert!(cause("a b####[([0], [0], 'POS')]").contains("overlaps"));
        assert!(cause("a b####[([0], [1], 'POS'), ([0], [1], 'POS')]").contains("duplicate"));
        assert!(cause("a b####[([], [1], 'POS')]").contains("empty"));
        assert!(cause("a b####[([0], [1], 'POS')").contains("separator"));
        assert!(cause("a b####[").contains("end of line"));
    }

    #[test]
    fn split_stats_and_line_numbers() {
        let content =
            "a b####[([0], [1], 'POS')]\n\nc d e####[([0], [2], 'NEG'), ([1], [2], 'NEG')]\n";
        let (sents, stats) = parse_split(content).unwrap();
        assert_eq!(sents.len(), 2);
        assert_eq!(
            stats,
            SplitStats {
                sentences: 2,
                pos: 1,
                neu: 0,
                neg: 2
            }
        );
        let bad = "a b####[]\nbroken\n";
        assert!(matches!(
            parse_split(bad),
            Err(Error::Parse { line: 2, .. })
        ));
        assert_eq!(parse_split("").unwrap().1, SplitStats::default());
    }

    #[test]
    fn reference_table_is_complete() {
        let total: usize = REFERENCE_STATS.iter().map(|(_, _, s)| s.sentences).sum();
        assert_eq!(total, 5989);
        let lap_test = REFERENCE_STATS
            .iter()
            .find(|(d, s, _)| *d == "14lap" && *s == "test")
            .unwrap()
            .2;
        assert_eq!(
            (lap_test.sentences, lap_test.pos, lap_test.neu, lap_test.neg),
            (328, 364, 63, 116)
        );
    }

    #[test]
    fn vocab_min_freq() {
        let v = build_vocab(&[AnnotatedSentence::unannotated("a a b")], 2);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.token(i), Some(*r));
        }
        let v = build_vocab(&[AnnotatedSentence::unannotated("Good good")], 2);
        assert!(v.contains("good"));
    }

    #[test]
    fn encode_maps_unknown_and_case() {
        let train = AnnotatedSentence::unannotated("Great food but the service was dreadful !");
        let v = build_vocab(std::slice::from_ref(&train), 1);
        let ids = encode_tokens(&train, &v);
        assert_eq!(ids.len(), 8);
        assert!(ids
            .iter()
            .all(|&i| i != Vocabulary::UNK_ID && i >= RESERVED.len()));
        let other = AnnotatedSentence::unannotated("great pizza");
        let ids2 = encode_tokens(&other, &v);
        assert_eq!(ids2[0], ids[0]);
        assert_eq!(ids2[1], Vocabulary::UNK_ID);
    }

    #[test]
    fn reserved_never_collide_with_words() {
        let v = build_vocab(&[AnnotatedSentence::unannotated("[CLS] [sep] x")], 1);
        assert_ne!(v.id("[CLS]"), Vocabulary::CLS_ID);
        assert_eq!(v.len(), RESERVED.len() + 3);
    }

    fn arb_sentence() -> impl Strategy<Value = AnnotatedSentence> {
        (2usize..12)
            .prop_flat_map(|n| {
                let words = proptest::collection::vec("[a-z]{1,6}|[!.,]", n);
                let trip = (0..n, 1usize..3, 0..n, 1usize..3, 0usize..3);
                (words, proptest::collection::vec(trip, 0..4))
            })
            .prop_map(|(tokens, raw)| {
                let n = tokens.len();
                let mut triplets = Vec::new();
                for (ts, tl, os, ol, p) in raw {
                    let t = Span::new(ts, (ts + tl - 1).min(n - 1));
                    let o = Span::new(os, (os + ol - 1).min(n - 1));
                    let trip = Triplet::new(t, o, Polarity::ALL[p]);
                    if !t.overlaps(&o) && !triplets.contains(&trip) {
                        triplets.push(trip);
                    }
                }
                AnnotatedSentence { tokens, triplets }
            })
    }

    proptest! {
        #[test]
        fn line_round_trip(s in arb_sentence()) {
            prop_assert_eq!(parse_line(&s.to_line()).unwrap(), s);
        }

        #[test]
        fn parse_never_panics(text in "[a-z ]{0,20}", ann in "[\\[\\]\\(\\), '0-9A-Z]{0,40}") {
            let _ = parse_line(&format!("{text}####{ann}"));
        }

        #[test]
        fn stats_sum_over_sentences(ss in proptest::collection::vec(arb_sentence(), 0..8)) {
            let stats = SplitStats::of(&ss);
            let total: usize = ss.iter().map(|s| s.triplets.len()).sum();
            prop_assert_eq!(stats.triplets(), total);
            prop_assert_eq!(stats.sentences, ss.len());
        }
    }
}
