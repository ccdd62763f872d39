//! Output symbol inventory and conversions between tagged transcripts,
//! symbol id sequences, concept/value pairs and bags of concepts.
//!
//! # Tagged transcript syntax
//!
//! A tagged transcript is one line of whitespace-separated tokens:
//!
//! ```text
//! transcript := token (" " token)*
//! token      := word | open | close
//! open       := "<" name ">"        name: [a-z0-9_-]+
//! close      := "</>"
//! word       := grapheme+           no '<', '>' or whitespace
//! ```
//!
//! Spans are non-nested and every open is closed. The plain transcript is
//! the words joined by single spaces. A span's value is its words joined by
//! single spaces (possibly empty).
//!
//! # Symbol ids
//!
//! `0` blank, `1` space, then one id per grapheme, then (slu mode) one open
//! id per concept, then the single close id. An asr alphabet is therefore an
//! exact id prefix of every slu alphabet built on the same graphemes.
//!
//! Markers do not carry spaces: the open id sits right before the first
//! character of the value and the close id right after its last character,
//! and one space id separates consecutive words.

use std::fmt;

use thiserror::Error;

pub const BLANK_ID: usize = 0;
pub const SPACE_ID: usize = 1;
const FIRST_GRAPHEME_ID: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unknown concept tag {0:?}")]
    UnknownTag(String),
    #[error("character {0:?} is not in the alphabet")]
    UnknownChar(char),
    #[error("unbalanced tags at token {position}: {reason}")]
    Unbalanced { position: usize, reason: &'static str },
    #[error("malformed tag token {0:?}")]
    MalformedTag(String),
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphabetMode {
    Asr,
    Slu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Symbol<'a> {
    Blank,
    Space,
    Char(char),
    Open(&'a str),
    Close,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputAlphabet {
    graphemes: Vec<char>,
    concepts: Vec<String>,
    mode: AlphabetMode,
}

fn valid_tag_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

impl OutputAlphabet {
    /// Graphemes, space and blank only.
    pub fn asr(graphemes: &[char]) -> Result<Self, CodecError> {
        let mut seen = std::collections::HashSet::new();
        for &c in graphemes {
            if c.is_whitespace() || matches!(c, '<' | '>' | '|' | ',') {
                return Err(CodecError::InvalidAlphabet(format!("reserved grapheme {c:?}")));
            }
            if !seen.insert(c) {
                return Err(CodecError::InvalidAlphabet(format!("duplicate grapheme {c:?}")));
            }
        }
        if graphemes.is_empty() {
            return Err(CodecError::InvalidAlphabet("no graphemes".into()));
        }
        Ok(Self {
            graphemes: graphemes.to_vec(),
            concepts: Vec::new(),
            mode: AlphabetMode::Asr,
        })
    }

    /// Full slot-filling inventory: the asr symbols, one open symbol per
    /// concept and a single close symbol.
    pub fn slu(graphemes: &[char], concepts: &[String]) -> Result<Self, CodecError> {
        let mut a = Self::asr(graphemes)?;
        let mut seen = std::collections::HashSet::new();
        for c in concepts {
            if !valid_tag_name(c) {
                return Err(CodecError::InvalidAlphabet(format!("bad concept name {c:?}")));
            }
            if !seen.insert(c) {
                return Err(CodecError::InvalidAlphabet(format!("duplicate concept {c:?}")));
            }
        }
        a.concepts = concepts.to_vec();
        a.mode = AlphabetMode::Slu;
        Ok(a)
    }

    /// The asr alphabet on the same graphemes.
    pub fn to_asr(&self) -> Self {
        Self {
            graphemes: self.graphemes.clone(),
            concepts: Vec::new(),
            mode: AlphabetMode::Asr,
        }
    }

    pub fn mode(&self) -> AlphabetMode {
        self.mode
    }

    pub fn graphemes(&self) -> &[char] {
        &self.graphemes
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        FIRST_GRAPHEME_ID
            + self.graphemes.len()
            + match self.mode {
                AlphabetMode::Asr => 0,
                AlphabetMode::Slu => self.concepts.len() + 1,
            }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank_id(&self) -> usize {
        BLANK_ID
    }

    pub fn space_id(&self) -> usize {
        SPACE_ID
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.graphemes.iter().position(|&g| g == c).map(|i| FIRST_GRAPHEME_ID + i)
    }

    pub fn open_id(&self, tag: &str) -> Option<usize> {
        match self.mode {
            AlphabetMode::Asr => None,
            AlphabetMode::Slu => self
                .concepts
                .iter()
                .position(|c| c == tag)
                .map(|i| FIRST_GRAPHEME_ID + self.graphemes.len() + i),
        }
    }

    pub fn close_id(&self) -> Option<usize> {
        match self.mode {
            AlphabetMode::Asr => None,
            AlphabetMode::Slu => Some(self.len() - 1),
        }
    }

    pub fn symbol(&self, id: usize) -> Option<Symbol<'_>> {
        let g = self.graphemes.len();
        match id {
            BLANK_ID => Some(Symbol::Blank),
            SPACE_ID => Some(Symbol::Space),
            _ if id < FIRST_GRAPHEME_ID + g => Some(Symbol::Char(self.graphemes[id - FIRST_GRAPHEME_ID])),
            _ if id >= self.len() => None,
            _ if Some(id) == self.close_id() => Some(Symbol::Close),
            _ => Some(Symbol::Open(&self.concepts[id - FIRST_GRAPHEME_ID - g])),
        }
    }

    /// True when every id of `self` denotes the same symbol in `other`.
    pub fn is_prefix_of(&self, other: &OutputAlphabet) -> bool {
        self.len() <= other.len() && (0..self.len()).all(|id| self.symbol(id) == other.symbol(id))
    }

    /// One-line serialization: `mode|graphemes|concept,concept,…`.
    pub fn listing(&self) -> String {
        let mode = match self.mode {
            AlphabetMode::Asr => "asr",
            AlphabetMode::Slu => "slu",
        };
        format!("{mode}|{}|{}", self.graphemes.iter().collect::<String>(), self.concepts.join(","))
    }

    pub fn from_listing(s: &str) -> Result<Self, CodecError> {
        let parts: Vec<&str> = s.splitn(3, '|').collect();
        let [mode, graphemes, concepts] = parts[..] else {
            return Err(CodecError::InvalidAlphabet(format!("bad listing {s:?}")));
        };
        let graphemes: Vec<char> = graphemes.chars().collect();
        match mode {
            "asr" if concepts.is_empty() => Self::asr(&graphemes),
            "slu" => {
                let concepts: Vec<String> = if concepts.is_empty() {
                    Vec::new()
                } else {
                    concepts.split(',').map(str::to_string).collect()
                };
                Self::slu(&graphemes, &concepts)
            }
            _ => Err(CodecError::InvalidAlphabet(format!("bad listing {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Word(String),
    Open(String),
    Close,
}

/// A concept mention: tag, value and its char range in the plain transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptSpan {
    pub tag: String,
    pub value: String,
    pub span: std::ops::Range<usize>,
}

/// Parsed, well-formed tagged transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedTranscript {
    tokens: Vec<Token>,
}

impl TaggedTranscript {
    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let mut tokens = Vec::new();
        let mut open = false;
        for (position, tok) in text.split_whitespace().enumerate() {
            let token = if tok == "</>" {
                if !open {
                    return Err(CodecError::Unbalanced {
                        position,
                        reason: "close without open",
                    });
                }
                open = false;
                Token::Close
            } else if let Some(name) = tok.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
                if !valid_tag_name(name) {
                    return Err(CodecError::MalformedTag(tok.to_string()));
                }
                if open {
                    return Err(CodecError::Unbalanced {
                        position,
                        reason: "nested open",
                    });
                }
                open = true;
                Token::Open(name.to_string())
            } else if tok.contains(['<', '>']) {
                return Err(CodecError::MalformedTag(tok.to_string()));
            } else {
                Token::Word(tok.to_string())
            };
            tokens.push(token);
        }
        if open {
            return Err(CodecError::Unbalanced {
                position: tokens.len(),
                reason: "unclosed open",
            });
        }
        Ok(Self { tokens })
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self, CodecError> {
        Self::parse(&Self { tokens }.to_string())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().filter_map(|t| match t {
            Token::Word(w) => Some(w.as_str()),
            _ => None,
        })
    }

    /// Words joined by single spaces.
    pub fn plain_text(&self) -> String {
        self.words().collect::<Vec<_>>().join(" ")
    }

    pub fn concepts(&self) -> Vec<ConceptSpan> {
        let mut out = Vec::new();
        let mut pos = 0usize;
        let mut first_word = true;
        let mut current: Option<(String, Vec<&str>, Option<usize>, usize)> = None;
        for t in &self.tokens {
            match t {
                Token::Word(w) => {
                    if !first_word {
                        pos += 1;
                    }
                    first_word = false;
                    let len = w.chars().count();
                    if let Some((_, words, start, end)) = current.as_mut() {
                        words.push(w);
                        start.get_or_insert(pos);
                        *end = pos + len;
                    }
                    pos += len;
                }
                Token::Open(tag) => {
                    let anchor = if first_word { 0 } else { pos + 1 };
                    current = Some((tag.clone(), Vec::new(), None, anchor));
                }
                Token::Close => {
                    if let Some((tag, words, start, end)) = current.take() {
                        let start = start.unwrap_or(end);
                        out.push(ConceptSpan {
                            tag,
                            value: words.join(" "),
                            span: start..end.max(start),
                        });
                    }
                }
            }
        }
        out
    }

    /// `(tag, value)` pairs in order.
    pub fn concept_pairs(&self) -> Vec<(String, String)> {
        self.concepts().into_iter().map(|c| (c.tag, c.value)).collect()
    }

    /// Tags in order (with repeats).
    pub fn tags(&self) -> Vec<String> {
        self.concepts().into_iter().map(|c| c.tag).collect()
    }
}

impl fmt::Display for TaggedTranscript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match t {
                Token::Word(w) => f.write_str(w)?,
                Token::Open(tag) => write!(f, "<{tag}>")?,
                Token::Close => f.write_str("</>")?,
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for TaggedTranscript {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Symbol ids of a tagged transcript. In asr mode markers are dropped and
/// only the plain transcript is encoded.
pub fn encode_transcript(alphabet: &OutputAlphabet, transcript: &TaggedTranscript) -> Result<Vec<usize>, CodecError> {
    let mut ids = Vec::new();
    let mut pending_open = None;
    let mut any_word = false;
    let asr = alphabet.mode() == AlphabetMode::Asr;
    for t in transcript.tokens() {
        match t {
            Token::Word(w) => {
                if any_word {
                    ids.push(SPACE_ID);
                }
                any_word = true;
                ids.extend(pending_open.take());
                for c in w.chars() {
                    ids.push(alphabet.char_id(c).ok_or(CodecError::UnknownChar(c))?);
                }
            }
            Token::Open(tag) if !asr => {
                pending_open = Some(alphabet.open_id(tag).ok_or_else(|| CodecError::UnknownTag(tag.clone()))?);
            }
            Token::Close if !asr => {
                ids.extend(pending_open.take());
                ids.push(alphabet.close_id().expect("slu alphabet has a close id"));
            }
            Token::Open(_) | Token::Close => {}
        }
    }
    Ok(ids)
}

/// Parses and encodes in one step.
pub fn encode_text(alphabet: &OutputAlphabet, tagged_text: &str) -> Result<Vec<usize>, CodecError> {
    encode_transcript(alphabet, &TaggedTranscript::parse(tagged_text)?)
}

/// Result of decoding a (possibly malformed) symbol sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub concepts: Vec<(String, String)>,
}

impl Decoded {
    pub fn tags(&self) -> Vec<String> {
        self.concepts.iter().map(|(t, _)| t.clone()).collect()
    }
}

fn squeeze(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Total inverse of [`encode_transcript`].
///
/// Blanks and ids outside the alphabet are ignored. An open marker without a
/// close extends to the next open marker or the end; a close marker outside
/// any span is dropped. Text and values are whitespace-trimmed with internal
/// runs reduced to single spaces.
pub fn decode_symbols(alphabet: &OutputAlphabet, ids: &[usize]) -> Decoded {
    let mut text = String::new();
    let mut concepts = Vec::new();
    let mut current: Option<(String, String)> = None;
    let finish = |cur: &mut Option<(String, String)>, out: &mut Vec<(String, String)>| {
        if let Some((tag, value)) = cur.take() {
            out.push((tag, squeeze(&value)));
        }
    };
    for &id in ids {
        match alphabet.symbol(id) {
            None | Some(Symbol::Blank) => {}
            Some(Symbol::Space) => {
                text.push(' ');
                if let Some((_, v)) = current.as_mut() {
                    v.push(' ');
                }
            }
            Some(Symbol::Char(c)) => {
                text.push(c);
                if let Some((_, v)) = current.as_mut() {
                    v.push(c);
                }
            }
            Some(Symbol::Open(tag)) => {
                finish(&mut current, &mut concepts);
                current = Some((tag.to_string(), String::new()));
                // Keep words on either side of a marker apart.
                text.push(' ');
            }
            Some(Symbol::Close) => {
                finish(&mut current, &mut concepts);
                text.push(' ');
            }
        }
    }
    finish(&mut current, &mut concepts);
    Decoded {
        text: squeeze(&text),
        concepts,
    }
}

/// Binary presence vector over a concept inventory.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BagOfConcepts {
    pub bits: Vec<bool>,
}

impl BagOfConcepts {
    pub fn empty(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Restriction to the given inventory positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            bits: positions.iter().map(|&i| self.bits[i]).collect(),
        }
    }

    pub fn as_targets<S: crate::Scalar>(&self) -> Vec<S> {
        self.bits.iter().map(|&b| if b { S::one() } else { S::zero() }).collect()
    }
}

/// Bag over `inventory` of the tags in `tags`; repeats collapse to one bit.
pub fn bag_of_concepts<T: AsRef<str>>(tags: &[T], inventory: &[String]) -> Result<BagOfConcepts, CodecError> {
    let mut bag = BagOfConcepts::empty(inventory.len());
    for tag in tags {
        let tag = tag.as_ref();
        let i = inventory
            .iter()
            .position(|c| c == tag)
            .ok_or_else(|| CodecError::UnknownTag(tag.to_string()))?;
        bag.bits[i] = true;
    }
    Ok(bag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alpha() -> OutputAlphabet {
        let g: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
        OutputAlphabet::slu(&g, &["date".to_string(), "city".to_string()]).unwrap()
    }

    #[test]
    fn layout() {
        let a = alpha();
        assert_eq!(a.len(), 2 + 26 + 2 + 1);
        assert_eq!(a.char_id('a'), Some(2));
        assert_eq!(a.open_id("date"), Some(28));
        assert_eq!(a.open_id("city"), Some(29));
        assert_eq!(a.close_id(), Some(30));
        assert_eq!(a.symbol(30), Some(Symbol::Close));
        assert_eq!(a.symbol(31), None);
        assert!(a.to_asr().is_prefix_of(&a));
        assert!(!a.is_prefix_of(&a.to_asr()));
    }

    #[test]
    fn listing_round_trip() {
        let a = alpha();
        assert_eq!(OutputAlphabet::from_listing(&a.listing()).unwrap(), a);
        let asr = a.to_asr();
        assert_eq!(OutputAlphabet::from_listing(&asr.listing()).unwrap(), asr);
    }

    #[test]
    fn span_offsets() {
        let t = TaggedTranscript::parse("on <date> may first </> in <city> paris </>").unwrap();
        let c = t.concepts();
        assert_eq!(t.plain_text(), "on may first in paris");
        assert_eq!(c[0].span, 3..12);
        assert_eq!(&t.plain_text()[c[0].span.clone()], "may first");
        assert_eq!(&t.plain_text()[c[1].span.clone()], "paris");
    }
}
