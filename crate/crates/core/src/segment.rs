//! Word tokenization and the document → paragraph → sentence → word hierarchy.
//!
//! A word unit is a maximal run of non-whitespace characters; punctuation stays
//! attached (`"Illinois."` is one unit). Offsets are UTF-8 byte offsets into the
//! document text, so `&text[unit.start..unit.end] == unit.surface`.
//!
//! Paragraphs are separated by blank lines (a gap containing two or more
//! newlines). Sentences end after a unit whose last character is one of
//! `. ! ? :` or at a paragraph boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("cannot decompose a {from:?} segment into {to:?} segments")]
    InvalidLevelTransition { from: Level, to: Level },
    #[error("segment span {start}..{end} is outside the document ({n} units)")]
    SpanOutOfBounds { start: usize, end: usize, n: usize },
}

/// Character range in the document text, half-open, UTF-8 byte offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordUnit {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

/// Question, target label and optional evidence attached to a document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocMeta {
    pub question: String,
    pub answer: Answer,
    pub evidence: Vec<Span>,
}

#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub units: Vec<WordUnit>,
    pub meta: DocMeta,
    /// `breaks[i]` is true when a paragraph boundary separates unit `i` from unit `i + 1`.
    paragraph_breaks: Vec<bool>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, meta: DocMeta) -> Self {
        let text = text.into();
        let units = tokenize(&text);
        let paragraph_breaks = units
            .windows(2)
            .map(|w| is_paragraph_gap(&text[w[0].end..w[1].start]))
            .collect();
        Document {
            id: id.into(),
            text,
            units,
            meta,
            paragraph_breaks,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// True when a blank line separates unit `i` from unit `i + 1`.
    pub fn paragraph_break_after(&self, i: usize) -> bool {
        self.paragraph_breaks.get(i).copied().unwrap_or(false)
    }

    fn sentence_break_after(&self, i: usize) -> bool {
        if self.paragraph_break_after(i) {
            return true;
        }
        matches!(
            self.units[i].surface.chars().last(),
            Some('.' | '!' | '?' | ':')
        )
    }

    /// Indices of units overlapping any evidence span.
    pub fn evidence_units(&self) -> Vec<usize> {
        self.units
            .iter()
            .filter(|u| {
                self.meta
                    .evidence
                    .iter()
                    .any(|s| s.start < u.end && u.start < s.end)
            })
            .map(|u| u.index)
            .collect()
    }

    /// Reassemble the original text from units and the gaps between them.
    pub fn reconstruct(&self) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut cursor = 0;
        for u in &self.units {
            out.push_str(&self.text[cursor..u.start]);
            out.push_str(&u.surface);
            cursor = u.end;
        }
        out.push_str(&self.text[cursor..]);
        out
    }
}

fn is_paragraph_gap(gap: &str) -> bool {
    gap.bytes().filter(|&b| b == b'\n').count() >= 2
}

pub fn tokenize(text: &str) -> Vec<WordUnit> {
    let mut units = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                units.push(unit(units.len(), s, i, text));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        units.push(unit(units.len(), s, text.len(), text));
    }
    units
}

fn unit(index: usize, start: usize, end: usize, text: &str) -> WordUnit {
    WordUnit {
        index,
        start,
        end,
        surface: text[start..end].to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Document,
    Paragraph,
    Sentence,
    Word,
}

impl Level {
    /// The next finer level, if any.
    pub fn child(self) -> Option<Level> {
        match self {
            Level::Document => Some(Level::Paragraph),
            Level::Paragraph => Some(Level::Sentence),
            Level::Sentence => Some(Level::Word),
            Level::Word => None,
        }
    }
}

/// A node of the segment tree covering units `start..end` (exclusive end).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub level: Level,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<Segment>,
}

impl Segment {
    pub fn leaf(level: Level, start: usize, end: usize) -> Self {
        Segment {
            level,
            start,
            end,
            children: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn root(doc: &Document) -> Self {
        Segment::leaf(Level::Document, 0, doc.len())
    }
}

/// Split `parent` into segments one level finer.
pub fn decompose(
    doc: &Document,
    parent: &Segment,
    target_level: Level,
) -> Result<Vec<Segment>, SegmentError> {
    if parent.level.child() != Some(target_level) {
        return Err(SegmentError::InvalidLevelTransition {
            from: parent.level,
            to: target_level,
        });
    }
    if parent.start > parent.end || parent.end > doc.len() {
        return Err(SegmentError::SpanOutOfBounds {
            start: parent.start,
            end: parent.end,
            n: doc.len(),
        });
    }
    let cut_after = |i: usize| match target_level {
        Level::Paragraph => doc.paragraph_break_after(i),
        Level::Sentence => doc.sentence_break_after(i),
        Level::Word => true,
        Level::Document => unreachable!("document is never a child level"),
    };
    let mut out = Vec::new();
    let mut start = parent.start;
    for i in parent.start..parent.end {
        if i + 1 == parent.end || cut_after(i) {
            out.push(Segment::leaf(target_level, start, i + 1));
            start = i + 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTree {
    pub root: Segment,
    pub n_units: usize,
}

impl SegmentTree {
    /// All segments at `level`, in document order.
    pub fn segments_at(&self, level: Level) -> Vec<&Segment> {
        fn walk<'a>(s: &'a Segment, level: Level, out: &mut Vec<&'a Segment>) {
            if s.level == level {
                out.push(s);
            } else {
                for c in &s.children {
                    walk(c, level, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, level, &mut out);
        out
    }
}

pub fn build_tree(doc: &Document, deepest_level: Level) -> SegmentTree {
    fn grow(doc: &Document, seg: &mut Segment, deepest: Level) {
        let Some(next) = seg.level.child().filter(|&l| l <= deepest) else {
            return;
        };
        let mut children = decompose(doc, seg, next).expect("child level is always valid");
        for c in &mut children {
            grow(doc, c, deepest);
        }
        seg.children = children;
    }
    let mut root = Segment::root(doc);
    grow(doc, &mut root, deepest_level);
    SegmentTree {
        root,
        n_units: doc.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Document {
        Document::new(
            "d",
            text,
            DocMeta {
                question: String::new(),
                answer: Answer::Yes,
                evidence: vec![],
            },
        )
    }

    fn spans(segs: &[Segment]) -> Vec<(usize, usize)> {
        segs.iter().map(|s| (s.start, s.end)).collect()
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" \n\t ").is_empty());
    }

    #[test]
    fn tokenize_keeps_punctuation_attached() {
        let units = tokenize("Governing Law.");
        let got: Vec<_> = units
            .iter()
            .map(|u| (u.start, u.end, u.surface.as_str()))
            .collect();
        assert_eq!(got, vec![(0, 9, "Governing"), (10, 14, "Law.")]);
    }

    #[test]
    fn tokenize_mixed_whitespace_reconstructs() {
        let text = "alpha\tbeta  gamma";
        let d = doc(text);
        assert_eq!(d.len(), 3);
        assert_eq!(d.reconstruct(), text);
    }

    #[test]
    fn multibyte_offsets_slice_cleanly() {
        let text = "naïve café → ok";
        for u in tokenize(text) {
            assert_eq!(&text[u.start..u.end], u.surface);
        }
    }

    #[test]
    fn paragraphs_split_on_blank_lines() {
        let d = doc("A b.\n\nC d.");
        let paras = decompose(&d, &Segment::root(&d), Level::Paragraph).unwrap();
        assert_eq!(spans(&paras), vec![(0, 2), (2, 4)]);
    }

    #[test]
    fn single_newline_is_not_a_paragraph() {
        let d = doc("A b\nC d");
        let paras = decompose(&d, &Segment::root(&d), Level::Paragraph).unwrap();
        assert_eq!(paras.len(), 1);
    }

    #[test]
    fn blank_line_with_spaces_counts() {
        let d = doc("A b\n   \n C d");
        let paras = decompose(&d, &Segment::root(&d), Level::Paragraph).unwrap();
        assert_eq!(paras.len(), 2);
    }

    #[test]
    fn sentences_split_on_terminators() {
        let d = doc("Yes. No? Maybe");
        let para = Segment::leaf(Level::Paragraph, 0, d.len());
        let sents = decompose(&d, &para, Level::Sentence).unwrap();
        assert_eq!(spans(&sents), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn colon_and_bang_end_sentences() {
        let d = doc("Note: this holds! Then more");
        let para = Segment::leaf(Level::Paragraph, 0, d.len());
        let sents = decompose(&d, &para, Level::Sentence).unwrap();
        assert_eq!(spans(&sents), vec![(0, 1), (1, 3), (3, 5)]);
    }

    #[test]
    fn words_are_identity_decomposition() {
        let d = doc("one two three. four five.");
        let sent = Segment::leaf(Level::Sentence, 0, 3);
        let words = decompose(&d, &sent, Level::Word).unwrap();
        assert_eq!(words.len(), 3);
        assert!(words.iter().all(|w| w.width() == 1));
    }

    #[test]
    fn invalid_transition_is_rejected() {
        let d = doc("a b c");
        let err = decompose(&d, &Segment::root(&d), Level::Sentence).unwrap_err();
        assert_eq!(
            err,
            SegmentError::InvalidLevelTransition {
                from: Level::Document,
                to: Level::Sentence
            }
        );
    }

    #[test]
    fn one_word_tree_is_a_chain() {
        let d = doc("hello");
        let tree = build_tree(&d, Level::Word);
        let p = &tree.root.children;
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].level, Level::Paragraph);
        assert_eq!(p[0].children.len(), 1);
        assert_eq!(p[0].children[0].level, Level::Sentence);
        assert_eq!(p[0].children[0].children.len(), 1);
        assert_eq!(p[0].children[0].children[0].level, Level::Word);
    }

    #[test]
    fn deepest_level_bounds_the_tree() {
        let d = doc("A b. C.\n\nD e.\n\nF g h.");
        let tree = build_tree(&d, Level::Sentence);
        assert_eq!(tree.segments_at(Level::Paragraph).len(), 3);
        assert_eq!(tree.segments_at(Level::Sentence).len(), 4);
        assert!(tree.segments_at(Level::Word).is_empty());
    }

    #[test]
    fn evidence_units_overlap() {
        let mut d = doc("The governing law is Illinois.");
        d.meta.evidence = vec![Span { start: 4, end: 17 }, Span { start: 21, end: 30 }];
        assert_eq!(d.evidence_units(), vec![1, 2, 4]);
    }
}
