//! Metadata-to-text templates and a word-level tokenizer.
//!
//! Templates are literal strings with `{field}` placeholders, e.g.
//! `"a song of {genre}, belongs to {tag}, whose style is {style}"`. When a
//! record lacks a field, [`TemplateSpec::render_available`] drops every
//! comma-separated clause mentioning it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::error::{MuserError, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
const RESERVED_NAMES: [&str; NUM_RESERVED] = ["[PAD]", "[SOS]", "[EOS]", "[UNK]"];

pub const DEFAULT_TEMPLATE: &str = "a song of {genre}, belongs to {tag}, whose style is {style}";
pub const DEFAULT_MAX_LEN: usize = 32;

/// The four template variants compared in the template ablation, in order:
/// no template, two phrase templates, and the default.
pub fn ablation_templates() -> Vec<TemplateSpec> {
    vec![
        TemplateSpec::concat(&["genre", "tag", "style"]),
        TemplateSpec::new("tags for the {genre} music is {tag}").expect("valid"),
        TemplateSpec::new("the {genre} music is characterized by {tag}").expect("valid"),
        TemplateSpec::new(DEFAULT_TEMPLATE).expect("valid"),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Field(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TemplateKind {
    Pattern,
    /// Raw field values joined by single spaces.
    Concat,
}

/// A parsed text template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpec {
    source: String,
    kind: TemplateKind,
    pieces: Vec<Piece>,
    required: Vec<String>,
}

impl fmt::Display for TemplateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TemplateKind::Pattern => f.write_str(&self.source),
            TemplateKind::Concat => f.write_str("No template"),
        }
    }
}

fn parse_pieces(template: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut chars = template.char_indices();
    while let Some((pos, ch)) = chars.next() {
        match ch {
            '{' => {
                let mut name = String::new();
                let mut closed = false;
                for (_, c) in chars.by_ref() {
                    match c {
                        '}' => {
                            closed = true;
                            break;
                        }
                        '{' => {
                            return Err(MuserError::Template(format!(
                                "nested `{{` in placeholder starting at byte {pos}"
                            )))
                        }
                        c => name.push(c),
                    }
                }
                if !closed {
                    return Err(MuserError::Template(format!(
                        "unclosed `{{` at byte {pos}"
                    )));
                }
                let name = name.trim().to_string();
                if name.is_empty() {
                    return Err(MuserError::Template(format!(
                        "empty placeholder at byte {pos}"
                    )));
                }
                if !literal.is_empty() {
                    pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Field(name));
            }
            '}' => {
                return Err(MuserError::Template(format!(
                    "unmatched `}}` at byte {pos}"
                )))
            }
            c => literal.push(c),
        }
    }
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    Ok(pieces)
}

fn required_of(pieces: &[Piece]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    pieces
        .iter()
        .filter_map(|p| match p {
            Piece::Field(n) if seen.insert(n.clone()) => Some(n.clone()),
            _ => None,
        })
        .collect()
}

fn substitute(pieces: &[Piece], fields: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::new();
    for p in pieces {
        match p {
            Piece::Literal(s) => out.push_str(s),
            Piece::Field(n) => out.push_str(
                fields
                    .get(n)
                    .ok_or_else(|| MuserError::MissingField(n.clone()))?,
            ),
        }
    }
    Ok(out)
}

impl TemplateSpec {
    /// Parses `{field}` placeholders. Unbalanced braces are rejected.
    pub fn new(template: &str) -> Result<Self> {
        let pieces = parse_pieces(template)?;
        let required = required_of(&pieces);
        Ok(TemplateSpec {
            source: template.to_string(),
            kind: TemplateKind::Pattern,
            pieces,
            required,
        })
    }

    /// The "no template" variant: field values joined by spaces.
    pub fn concat(fields: &[&str]) -> Self {
        let source = fields
            .iter()
            .map(|f| format!("{{{f}}}"))
            .collect::<Vec<_>>()
            .join(" ");
        let pieces = parse_pieces(&source).expect("generated template is balanced");
        TemplateSpec {
            required: required_of(&pieces),
            source,
            kind: TemplateKind::Concat,
            pieces,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn required_fields(&self) -> &[String] {
        &self.required
    }

    pub fn is_concat(&self) -> bool {
        self.kind == TemplateKind::Concat
    }

    /// Replaces every placeholder verbatim; a missing field is an error.
    pub fn render(&self, fields: &BTreeMap<String, String>) -> Result<String> {
        substitute(&self.pieces, fields)
    }

    /// Renders with whatever fields are present. Clauses (comma-separated
    /// segments) that mention a missing field are dropped; for the concat
    /// variant missing values are skipped.
    pub fn render_available(&self, fields: &BTreeMap<String, String>) -> Result<String> {
        if self.kind == TemplateKind::Concat {
            return Ok(self
                .required
                .iter()
                .filter_map(|f| fields.get(f).map(String::as_str))
                .collect::<Vec<_>>()
                .join(" "));
        }
        if self.required.iter().all(|f| fields.contains_key(f)) {
            return self.render(fields);
        }
        let mut kept = Vec::new();
        for clause in self.source.split(',') {
            let pieces = parse_pieces(clause)?;
            match substitute(&pieces, fields) {
                Ok(s) => kept.push(s),
                Err(MuserError::MissingField(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if kept.is_empty() {
            return Err(MuserError::Template(format!(
                "no clause of `{}` can be rendered from fields {:?}",
                self.source,
                fields.keys().collect::<Vec<_>>()
            )));
        }
        Ok(kept.join(",").trim().to_string())
    }
}

/// Strict [`TemplateSpec::render`] as a free function.
pub fn render_template(spec: &TemplateSpec, fields: &BTreeMap<String, String>) -> Result<String> {
    spec.render(fields)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rendering {
    Strict,
    DropMissingClauses,
}

/// One rendered prompt per class, in order.
pub fn class_prompts(
    spec: &TemplateSpec,
    classes: &[BTreeMap<String, String>],
    rendering: Rendering,
) -> Result<Vec<String>> {
    classes
        .iter()
        .enumerate()
        .map(|(i, fields)| {
            let r = match rendering {
                Rendering::Strict => spec.render(fields),
                Rendering::DropMissingClauses => spec.render_available(fields),
            };
            r.map_err(|e| MuserError::Template(format!("class {i}: {e}")))
        })
        .collect()
}

/// Lowercases, maps whitespace to spaces and strips everything outside
/// `[a-z0-9 -]`, then splits on spaces.
pub fn normalize_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c.to_ascii_lowercase() })
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || *c == ' ' || *c == '-')
        .collect();
    cleaned.split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect()
}

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from non-reserved words listed in id order (id 4 first).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || RESERVED_NAMES.contains(&w.as_str()) || w.contains(char::is_whitespace)
            {
                return Err(MuserError::format(format!("invalid vocabulary word `{w}`")));
            }
            if index.insert(w.clone(), i + NUM_RESERVED).is_some() {
                return Err(MuserError::format(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Vocab { words, index })
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.words.len() + NUM_RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < NUM_RESERVED {
            Some(RESERVED_NAMES[id])
        } else {
            self.words.get(id - NUM_RESERVED).map(String::as_str)
        }
    }

    /// Keeps at most `max_total` ids (reserved included), dropping the rarest.
    pub fn truncated(mut self, max_total: usize) -> Self {
        let keep = max_total.saturating_sub(NUM_RESERVED);
        if self.words.len() > keep {
            self.words.truncate(keep);
            self.index.retain(|_, id| *id < max_total);
        }
        self
    }
}

/// Counts normalized words and assigns ids by descending frequency, then
/// lexicographically. Words below `min_count` are left out.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(MuserError::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in normalize_words(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_words(ranked.into_iter().map(|(w, _)| w).collect())
}

/// `[SOS] tokens… [EOS] [PAD]…`, exactly `max_len` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    max_len: usize,
}

impl TokenSequence {
    /// Validates the bracket/padding layout.
    pub fn from_ids(ids: Vec<usize>, max_len: usize) -> Result<Self> {
        let bad = |msg: &str| Err(MuserError::invalid(format!("token sequence {msg}")));
        if ids.len() > max_len {
            return bad("longer than max_len");
        }
        if ids.first() != Some(&SOS) {
            return bad("must start with [SOS]");
        }
        let eos: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == EOS)
            .map(|(i, _)| i)
            .collect();
        if eos.len() != 1 {
            return bad("needs exactly one [EOS]");
        }
        let last_non_pad = ids.iter().rposition(|&t| t != PAD).unwrap_or(0);
        if eos[0] != last_non_pad {
            return bad("must end with [EOS] before padding");
        }
        if ids[1..eos[0]].iter().any(|&t| t == PAD || t == SOS) {
            return bad("has [PAD]/[SOS] inside the text span");
        }
        Ok(TokenSequence { ids, max_len })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn eos_position(&self) -> usize {
        self.ids.iter().position(|&t| t == EOS).expect("validated")
    }

    /// Ids up to and including `[EOS]`.
    pub fn unpadded(&self) -> &[usize] {
        &self.ids[..=self.eos_position()]
    }

    /// Same tokens with extra trailing `[PAD]`s.
    pub fn with_padding(&self, extra: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.extend(std::iter::repeat_n(PAD, extra));
        TokenSequence {
            max_len: self.max_len.max(ids.len()),
            ids,
        }
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(MuserError::invalid(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(SOS);
    ids.extend(
        normalize_words(text)
            .iter()
            .take(max_len - 2)
            .map(|w| vocab.id(w).unwrap_or(UNK)),
    );
    ids.push(EOS);
    ids.resize(max_len, PAD);
    Ok(TokenSequence { ids, max_len })
}

/// Inverse of [`tokenize`] for in-vocabulary words; special tokens are skipped
/// except `[UNK]`.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    seq.unpadded()
        .iter()
        .filter(|&&t| t != SOS && t != EOS)
        .map(|&t| vocab.token(t).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}
