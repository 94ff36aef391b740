//! Token vocabulary for the synthetic arithmetic task, text rendering, the
//! answer grammar and the transitional-word lexicon.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

pub const BOS: Token = Token(0);
pub const SEP: Token = Token(1);
pub const EOS: Token = Token(2);
/// Ends one reasoning segment.
pub const STEP: Token = Token(3);

const SPECIALS: [&str; 4] = ["<bos>", "<sep>", "<eos>", "<step>"];
const SYMBOLS: [&str; 10] = ["+", "-", "*", "=", ";", "(", ")", ":", ",", "."];
const WORDS: [&str; 7] = ["start", "add", "sub", "mul", "mod", "Answer", "So"];
// Emittable so generated text can carry them; the lexicon file decides what counts.
const TRANSITIONAL: [&str; 6] = ["However", "Wait", "But", "Alternatively", "Actually", "Hmm"];

pub struct Vocab {
    pieces: Vec<&'static str>,
    by_piece: HashMap<&'static str, Token>,
    by_lower: HashMap<String, Token>,
}

static STANDARD: Lazy<Vocab> = Lazy::new(Vocab::build);

impl Vocab {
    fn build() -> Self {
        let digits = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
        let pieces: Vec<&'static str> = SPECIALS
            .iter()
            .chain(digits.iter())
            .chain(SYMBOLS.iter())
            .chain(WORDS.iter())
            .chain(TRANSITIONAL.iter())
            .copied()
            .collect();
        let by_piece = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (*p, Token(i as u32)))
            .collect();
        let by_lower = pieces
            .iter()
            .enumerate()
            .filter(|(_, p)| p.chars().all(|c| c.is_ascii_alphabetic()))
            .map(|(i, p)| (p.to_ascii_lowercase(), Token(i as u32)))
            .collect();
        Self {
            pieces,
            by_piece,
            by_lower,
        }
    }

    /// The fixed vocabulary used by the corpus, policy and evaluation.
    pub fn standard() -> &'static Vocab {
        &STANDARD
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, token: Token) -> &'static str {
        self.pieces[token.idx()]
    }

    pub fn token(&self, piece: &str) -> Result<Token> {
        self.by_piece
            .get(piece)
            .copied()
            .ok_or_else(|| Error::UnknownToken(piece.to_string()))
    }

    pub fn digit(&self, value: u32) -> Token {
        debug_assert!(value < 10);
        Token(SPECIALS.len() as u32 + value)
    }

    pub fn digit_value(&self, token: Token) -> Option<u32> {
        let first = SPECIALS.len() as u32;
        (first..first + 10).contains(&token.0).then(|| token.0 - first)
    }

    pub fn is_special(&self, token: Token) -> bool {
        token.idx() < SPECIALS.len()
    }

    /// Tokens that may appear in generated text other than BOS/SEP/EOS.
    pub fn content_tokens(&self) -> Vec<Token> {
        (0..self.len() as u32)
            .map(Token)
            .filter(|&t| t != BOS && t != SEP && t != EOS)
            .collect()
    }

    /// Splits text into tokens. Whitespace separates but is not a token;
    /// digits are one token each; words match exactly, then case-insensitively.
    pub fn encode(&self, text: &str) -> Result<Vec<Token>> {
        let mut out = Vec::new();
        let mut chars = text.char_indices().peekable();
        while let Some(&(start, c)) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
            } else if c == '<' {
                let end = text[start..]
                    .find('>')
                    .map(|e| start + e + 1)
                    .ok_or_else(|| Error::UnknownToken(text[start..].to_string()))?;
                out.push(self.token(&text[start..end])?);
                while chars.peek().is_some_and(|&(i, _)| i < end) {
                    chars.next();
                }
            } else if c.is_ascii_alphabetic() {
                let mut end = start;
                while let Some(&(i, ch)) = chars.peek() {
                    if !ch.is_ascii_alphabetic() {
                        break;
                    }
                    end = i + ch.len_utf8();
                    chars.next();
                }
                let word = &text[start..end];
                let tok = self
                    .by_piece
                    .get(word)
                    .or_else(|| self.by_lower.get(&word.to_ascii_lowercase()))
                    .copied()
                    .ok_or_else(|| Error::UnknownToken(word.to_string()))?;
                out.push(tok);
            } else {
                let piece = &text[start..start + c.len_utf8()];
                out.push(self.token(piece)?);
                chars.next();
            }
        }
        Ok(out)
    }

    /// Renders tokens as text. `encode(decode(t)) == t` for every sequence.
    pub fn decode(&self, tokens: &[Token]) -> String {
        let mut out = String::new();
        let mut prev: Option<Token> = None;
        for &tok in tokens {
            if let Some(p) = prev {
                if self.needs_space(p, tok) {
                    out.push(' ');
                }
            }
            out.push_str(self.piece(tok));
            prev = Some(tok);
        }
        out
    }

    fn needs_space(&self, prev: Token, next: Token) -> bool {
        let tight = |t: Token| {
            self.digit_value(t).is_some() || matches!(self.piece(t), "+" | "-" | "*" | "=")
        };
        let (p, n) = (self.piece(prev), self.piece(next));
        let word = |s: &str| s.chars().all(|c| c.is_ascii_alphabetic());
        if tight(prev) && tight(next) {
            return false;
        }
        // Adjacent words must stay separable.
        if word(p) && word(n) {
            return true;
        }
        !(matches!(n, ";" | ")" | "," | ".") || p == "(")
    }
}

/// Query framing fed to the policy: `<bos> query <sep>`.
pub fn prompt(query: &[Token]) -> Vec<Token> {
    let mut p = Vec::with_capacity(query.len() + 2);
    p.push(BOS);
    p.extend_from_slice(query);
    p.push(SEP);
    p
}

/// The `Answer : <digits>` format required of every completion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerGrammar {
    pub marker: Token,
    pub separator: Token,
    pub terminator: Token,
}

impl Default for AnswerGrammar {
    fn default() -> Self {
        let v = Vocab::standard();
        Self {
            marker: v.token("Answer").expect("standard vocab"),
            separator: v.token(":").expect("standard vocab"),
            terminator: EOS,
        }
    }
}

impl AnswerGrammar {
    /// Full answer span for a value: `Answer : <value>`.
    pub fn render(&self, value: &[Token]) -> Vec<Token> {
        let mut out = vec![self.marker, self.separator];
        out.extend_from_slice(value);
        out
    }

    /// Returns the value of the last `Answer :` marker, provided only the
    /// terminator (or nothing) follows its digits.
    pub fn extract(&self, tokens: &[Token]) -> Option<Vec<Token>> {
        let vocab = Vocab::standard();
        let at = tokens.iter().rposition(|&t| t == self.marker)?;
        let rest = &tokens[at + 1..];
        if rest.first() != Some(&self.separator) {
            return None;
        }
        let rest = &rest[1..];
        let n_digits = rest
            .iter()
            .take_while(|&&t| vocab.digit_value(t).is_some())
            .count();
        if n_digits == 0 {
            return None;
        }
        match &rest[n_digits..] {
            [] => Some(rest[..n_digits].to_vec()),
            [t] if *t == self.terminator => Some(rest[..n_digits].to_vec()),
            _ => None,
        }
    }

    /// Index where the answer span begins, when an answer is extractable.
    pub fn answer_start(&self, tokens: &[Token]) -> Option<usize> {
        self.extract(tokens)?;
        tokens.iter().rposition(|&t| t == self.marker)
    }

    pub fn extract_text(&self, text: &str) -> Option<Vec<Token>> {
        Vocab::standard()
            .encode(text)
            .ok()
            .and_then(|t| self.extract(&t))
    }
}

/// Canonical form of an answer value used for comparison and clustering:
/// the integer it spells, without leading zeros.
pub fn canonical_answer(value: &[Token]) -> String {
    let vocab = Vocab::standard();
    let digits: String = value
        .iter()
        .filter_map(|&t| vocab.digit_value(t))
        .map(|d| char::from_digit(d, 10).unwrap())
        .collect();
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() && !digits.is_empty() {
        "0".to_string()
    } else {
        trimmed.to_string()
    }
}

/// Case-insensitive set of whole words signalling hesitation in a trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    words: BTreeSet<String>,
}

const DEFAULT_LEXICON: &str = include_str!("../data/transitional_words.txt");

impl Default for Lexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is non-empty")
    }
}

impl Lexicon {
    /// One word per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let words: BTreeSet<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self::from_words(words)
    }

    pub fn from_words<I, W>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = W>,
        W: AsRef<str>,
    {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::InvalidArgument("lexicon must not be empty".into()));
        }
        Ok(Self { words })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl fmt::Display for Lexicon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<&str> = self.words.iter().map(String::as_str).collect();
        write!(f, "{}", words.join(","))
    }
}

/// Whole-word, case-insensitive count of lexicon entries in `text`.
pub fn count_transitional_words(text: &str, lexicon: &Lexicon) -> usize {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty() && lexicon.contains(w))
        .count()
}

/// Token form of [`count_transitional_words`].
pub fn count_transitional_tokens(tokens: &[Token], lexicon: &Lexicon) -> usize {
    let vocab = Vocab::standard();
    tokens
        .iter()
        .filter(|&&t| lexicon.contains(vocab.piece(t)))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_the_task_surface_forms() {
        let v = Vocab::standard();
        for text in ["start 3; add 4 (mod 10)", "3+4=7", "Answer : 7"] {
            let toks = v.encode(text).unwrap();
            assert_eq!(v.decode(&toks), text);
        }
        assert_eq!(v.encode("start 3;add 4(mod 10)").unwrap().len(), 10);
    }

    #[test]
    fn unknown_words_are_rejected() {
        assert!(matches!(
            Vocab::standard().encode("divide 3"),
            Err(Error::UnknownToken(w)) if w == "divide"
        ));
    }

    #[test]
    fn special_tokens_roundtrip() {
        let v = Vocab::standard();
        let toks = v.encode("3+1=4 <step> Answer : 4 <eos>").unwrap();
        assert_eq!(toks[5], STEP);
        assert_eq!(*toks.last().unwrap(), EOS);
        assert_eq!(v.encode(&v.decode(&toks)).unwrap(), toks);
    }

    #[test]
    fn extraction_takes_last_marker() {
        let g = AnswerGrammar::default();
        let v = Vocab::standard();
        let got = g.extract(&v.encode("3+4=7 <step> Answer : 7").unwrap());
        assert_eq!(canonical_answer(&got.unwrap()), "7");
        assert!(g.extract(&v.encode("3+4=7 <step> 7 <eos>").unwrap()).is_none());
        let two = v.encode("Answer : 2 <step> Answer : 5 <eos>").unwrap();
        assert_eq!(canonical_answer(&g.extract(&two).unwrap()), "5");
        // trailing junk after the digits breaks the format
        assert!(g.extract(&v.encode("Answer : 5 +").unwrap()).is_none());
        assert!(g.extract(&v.encode("Answer 5").unwrap()).is_none());
    }

    #[test]
    fn canonical_strips_leading_zeros() {
        let v = Vocab::standard();
        assert_eq!(canonical_answer(&v.encode("007").unwrap()), "7");
        assert_eq!(canonical_answer(&v.encode("00").unwrap()), "0");
    }

    #[test]
    fn transitional_counts() {
        let lex = Lexicon::default();
        assert_eq!(count_transitional_words("", &lex), 0);
        assert_eq!(count_transitional_words("However, wait. However.", &lex), 3);
        assert_eq!(count_transitional_words("3+4=7 Answer : 7", &lex), 0);
        // whole words only
        assert_eq!(count_transitional_words("waiting buttress", &lex), 0);
    }

    #[test]
    fn default_lexicon_covers_examples() {
        let lex = Lexicon::default();
        assert!(lex.contains("However") && lex.contains("WAIT"));
        assert!(Lexicon::parse("# only a comment\n").is_err());
    }
}
