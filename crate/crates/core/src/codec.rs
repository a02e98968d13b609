//! Unified token space and the page/prompt codecs.
//!
//! A single vocabulary holds control tokens, task tokens, printable ASCII
//! characters and three families of location tokens: per-axis `<x_i>` /
//! `<y_i>` and the shared `<loc_i>` set. Three layouts interleave text with
//! box corners:
//!
//! | scheme    | one line                                             |
//! |-----------|------------------------------------------------------|
//! | Original  | `<x_a><y_b> text <x_c><y_d>`                         |
//! | Segmented | `text </text> <x_a><y_b><x_c><y_d> </location>`      |
//! | Unified   | `<loc_a><loc_b> text <loc_c><loc_d>`                 |
//!
//! Pages are wrapped in `<bos> ... <eos>`. Decoding never fails; malformed
//! model output is salvaged element by element and the damage is reported in
//! [`Diagnostics`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{dequantize, quantize, BBox, QuantBox, QuantGrid};
use crate::Error;

pub type TokenId = u32;

const VOCAB_VERSION: u32 = 1;
const FIRST_CHAR: u8 = b' ';
const LAST_CHAR: u8 = b'~';

const CONTROL: [&str; 6] = ["<pad>", "<bos>", "<eos>", "</text>", "</location>", "<nl>"];

/// The four prompt-selectable tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(rename = "ocr")]
    OcrOnly,
    #[serde(rename = "ocr_layout")]
    OcrLayout,
    ReadAt,
    FindIt,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::OcrOnly, TaskKind::OcrLayout, TaskKind::ReadAt, TaskKind::FindIt];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::OcrOnly => "ocr",
            TaskKind::OcrLayout => "ocr_layout",
            TaskKind::ReadAt => "read_at",
            TaskKind::FindIt => "find_it",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn token(self) -> &'static str {
        match self {
            TaskKind::OcrOnly => "<ocr>",
            TaskKind::OcrLayout => "<ocr_layout>",
            TaskKind::ReadAt => "<read_at>",
            TaskKind::FindIt => "<find_it>",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// A task together with its argument.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskPrompt {
    OcrOnly,
    OcrLayout,
    ReadAt(QuantBox),
    FindIt(String),
}

impl TaskPrompt {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskPrompt::OcrOnly => TaskKind::OcrOnly,
            TaskPrompt::OcrLayout => TaskKind::OcrLayout,
            TaskPrompt::ReadAt(_) => TaskKind::ReadAt,
            TaskPrompt::FindIt(_) => TaskKind::FindIt,
        }
    }
}

/// Interleaving rule for text and location tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingScheme {
    #[default]
    Original,
    Segmented,
    Unified,
}

impl EncodingScheme {
    pub const ALL: [EncodingScheme; 3] =
        [EncodingScheme::Original, EncodingScheme::Segmented, EncodingScheme::Unified];

    pub fn name(self) -> &'static str {
        match self {
            EncodingScheme::Original => "original",
            EncodingScheme::Segmented => "segmented",
            EncodingScheme::Unified => "unified",
        }
    }
}

impl FromStr for EncodingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EncodingScheme::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoding scheme {s:?}")))
    }
}

/// One text line and its pixel box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineElement {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl LineElement {
    pub fn new(text: impl Into<String>, bbox: BBox) -> Self {
        LineElement { text: text.into(), bbox }
    }
}

/// Sorts lines top-to-bottom, ties broken left-to-right.
pub fn sort_reading_order(lines: &mut [LineElement]) {
    lines.sort_by(|a, b| {
        a.bbox
            .y1
            .total_cmp(&b.bbox.y1)
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    EndText,
    EndLocation,
    Newline,
    Task(TaskKind),
    Char(char),
    X(u32),
    Y(u32),
    Loc(u32),
}

impl TokenKind {
    pub fn is_location(self) -> bool {
        matches!(self, TokenKind::X(_) | TokenKind::Y(_) | TokenKind::Loc(_))
    }
}

/// Immutable id <-> token mapping for one quantization grid.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    grid: QuantGrid,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    char_base: u32,
    x_base: u32,
    y_base: u32,
    loc_base: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    grid: QuantGrid,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(grid: QuantGrid) -> Self {
        let mut tokens: Vec<String> = CONTROL.iter().map(|s| s.to_string()).collect();
        tokens.extend(TaskKind::ALL.iter().map(|t| t.token().to_string()));
        let char_base = tokens.len() as u32;
        tokens.extend((FIRST_CHAR..=LAST_CHAR).map(|c| (c as char).to_string()));
        let x_base = tokens.len() as u32;
        tokens.extend((0..grid.n_x).map(|i| format!("<x_{i}>")));
        let y_base = tokens.len() as u32;
        tokens.extend((0..grid.n_y).map(|i| format!("<y_{i}>")));
        let loc_base = tokens.len() as u32;
        tokens.extend((0..grid.max_cells()).map(|i| format!("<loc_{i}>")));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { grid, tokens, index, char_base, x_base, y_base, loc_base }
    }

    pub fn grid(&self) -> &QuantGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> TokenId {
        0
    }
    pub fn bos(&self) -> TokenId {
        1
    }
    pub fn eos(&self) -> TokenId {
        2
    }
    pub fn end_text(&self) -> TokenId {
        3
    }
    pub fn end_location(&self) -> TokenId {
        4
    }
    pub fn newline(&self) -> TokenId {
        5
    }

    pub fn task(&self, t: TaskKind) -> TokenId {
        CONTROL.len() as TokenId + t as TokenId
    }

    pub fn x(&self, i: u32) -> TokenId {
        debug_assert!(i < self.grid.n_x);
        self.x_base + i
    }

    pub fn y(&self, i: u32) -> TokenId {
        debug_assert!(i < self.grid.n_y);
        self.y_base + i
    }

    pub fn loc(&self, i: u32) -> TokenId {
        debug_assert!(i < self.grid.max_cells());
        self.loc_base + i
    }

    /// Id ranges of the x, y and unified location families.
    pub fn x_range(&self) -> std::ops::Range<TokenId> {
        self.x_base..self.y_base
    }
    pub fn y_range(&self) -> std::ops::Range<TokenId> {
        self.y_base..self.loc_base
    }
    pub fn loc_range(&self) -> std::ops::Range<TokenId> {
        self.loc_base..self.tokens.len() as TokenId
    }

    pub fn char_id(&self, c: char) -> Option<TokenId> {
        let b = u32::from(c);
        (u32::from(FIRST_CHAR)..=u32::from(LAST_CHAR))
            .contains(&b)
            .then(|| self.char_base + b - u32::from(FIRST_CHAR))
    }

    pub fn supports(&self, c: char) -> bool {
        self.char_id(c).is_some()
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        let n_ctrl = CONTROL.len() as u32;
        let k = match id {
            0 => TokenKind::Pad,
            1 => TokenKind::Bos,
            2 => TokenKind::Eos,
            3 => TokenKind::EndText,
            4 => TokenKind::EndLocation,
            5 => TokenKind::Newline,
            i if i < self.char_base => TokenKind::Task(TaskKind::ALL[(i - n_ctrl) as usize]),
            i if i < self.x_base => {
                TokenKind::Char(char::from(FIRST_CHAR + (i - self.char_base) as u8))
            }
            i if i < self.y_base => TokenKind::X(i - self.x_base),
            i if i < self.loc_base => TokenKind::Y(i - self.y_base),
            i if (i as usize) < self.tokens.len() => TokenKind::Loc(i - self.loc_base),
            _ => return None,
        };
        Some(k)
    }

    pub fn is_location(&self, id: TokenId) -> bool {
        id >= self.x_base && (id as usize) < self.tokens.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Text tokens for `s`; fails listing every unsupported character.
    pub fn encode_text(&self, s: &str) -> Result<Vec<TokenId>, Error> {
        let mut bad: Vec<char> = s.chars().filter(|c| !self.supports(*c)).collect();
        if !bad.is_empty() {
            bad.sort_unstable();
            bad.dedup();
            return Err(Error::UnknownChars { chars: bad });
        }
        Ok(s.chars().filter_map(|c| self.char_id(c)).collect())
    }

    /// Human-readable rendering: characters verbatim, everything else by name.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            match self.kind(id) {
                Some(TokenKind::Char(c)) => out.push(c),
                Some(_) => out.push_str(&self.tokens[id as usize]),
                None => out.push_str(&format!("<unk_{id}>")),
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile { version: VOCAB_VERSION, grid: self.grid, tokens: self.tokens.clone() };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    /// Parses a vocabulary file, checking it matches what the grid implies.
    pub fn from_json(s: &str) -> Result<Self, Error> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.version != VOCAB_VERSION {
            return Err(Error::Vocabulary(format!("unsupported version {}", file.version)));
        }
        let v = Vocabulary::new(file.grid);
        if v.tokens != file.tokens {
            return Err(Error::Vocabulary("token list does not match grid".into()));
        }
        Ok(v)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_element(i: usize, e: &LineElement, grid: &QuantGrid) -> Result<QuantBox, Error> {
    e.bbox.validate()?;
    if !grid.fits(&e.bbox) {
        return Err(Error::BoxOutsideGrid { index: i, bbox: e.bbox });
    }
    if e.text.trim().is_empty() {
        return Err(Error::EmptyText { index: i });
    }
    Ok(quantize(&e.bbox, grid))
}

fn push_corners(out: &mut Vec<TokenId>, vocab: &Vocabulary, scheme: EncodingScheme, a: u32, b: u32) {
    match scheme {
        EncodingScheme::Unified => out.extend([vocab.loc(a), vocab.loc(b)]),
        _ => out.extend([vocab.x(a), vocab.y(b)]),
    }
}

fn push_box(out: &mut Vec<TokenId>, vocab: &Vocabulary, scheme: EncodingScheme, q: &QuantBox) {
    push_corners(out, vocab, scheme, q.ix1, q.iy1);
    push_corners(out, vocab, scheme, q.ix2, q.iy2);
}

fn encode_body(
    out: &mut Vec<TokenId>,
    elements: &[LineElement],
    vocab: &Vocabulary,
    scheme: EncodingScheme,
) -> Result<(), Error> {
    for (i, e) in elements.iter().enumerate() {
        let q = check_element(i, e, vocab.grid())?;
        let text = vocab.encode_text(&e.text)?;
        match scheme {
            EncodingScheme::Original | EncodingScheme::Unified => {
                push_corners(out, vocab, scheme, q.ix1, q.iy1);
                out.extend(text);
                push_corners(out, vocab, scheme, q.ix2, q.iy2);
            }
            EncodingScheme::Segmented => {
                out.extend(text);
                out.push(vocab.end_text());
                push_box(out, vocab, scheme, &q);
                out.push(vocab.end_location());
            }
        }
    }
    Ok(())
}

/// Encodes an ordered page as `<bos> element* <eos>`.
pub fn encode_page(
    elements: &[LineElement],
    vocab: &Vocabulary,
    scheme: EncodingScheme,
) -> Result<Vec<TokenId>, Error> {
    let mut out = vec![vocab.bos()];
    encode_body(&mut out, elements, vocab, scheme)?;
    out.push(vocab.eos());
    Ok(out)
}

/// Prompt tokens; region prompts always use per-axis tokens.
pub fn encode_prompt(prompt: &TaskPrompt, vocab: &Vocabulary) -> Result<Vec<TokenId>, Error> {
    let mut out = vec![vocab.task(prompt.kind())];
    match prompt {
        TaskPrompt::OcrOnly | TaskPrompt::OcrLayout => {}
        TaskPrompt::ReadAt(q) => {
            if !q.is_valid_for(vocab.grid()) {
                return Err(Error::InvalidRegion(q.to_array()));
            }
            push_box(&mut out, vocab, EncodingScheme::Original, q);
        }
        TaskPrompt::FindIt(s) => {
            if s.trim().is_empty() {
                return Err(Error::EmptyQuery);
            }
            out.extend(vocab.encode_text(s)?);
        }
    }
    Ok(out)
}

fn encode_lines_text(lines: &[&LineElement], vocab: &Vocabulary) -> Result<Vec<TokenId>, Error> {
    let mut out = vec![vocab.bos()];
    for (i, e) in lines.iter().enumerate() {
        if i > 0 {
            out.push(vocab.newline());
        }
        out.extend(vocab.encode_text(&e.text)?);
    }
    out.push(vocab.eos());
    Ok(out)
}

/// True when `query` is a contiguous run of whole words of `text`.
pub fn contains_word_span(text: &str, query: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    let q: Vec<&str> = query.split_whitespace().collect();
    !q.is_empty() && words.windows(q.len()).any(|w| w == q.as_slice())
}

/// Indices of the lines a region prompt selects (box center inside the region).
pub fn lines_in_region(elements: &[LineElement], region: &QuantBox, grid: &QuantGrid) -> Vec<usize> {
    let area = dequantize(region, grid);
    elements
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            let (cx, cy) = e.bbox.center();
            area.contains_point(cx, cy)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Indices of lines containing `query` as a whole-word span.
pub fn lines_matching(elements: &[LineElement], query: &str) -> Vec<usize> {
    elements
        .iter()
        .enumerate()
        .filter(|(_, e)| contains_word_span(&e.text, query))
        .map(|(i, _)| i)
        .collect()
}

/// Training target for `prompt` on an ordered page.
pub fn expected_target(
    prompt: &TaskPrompt,
    elements: &[LineElement],
    vocab: &Vocabulary,
    scheme: EncodingScheme,
) -> Result<Vec<TokenId>, Error> {
    match prompt {
        TaskPrompt::OcrOnly => {
            let all: Vec<&LineElement> = elements.iter().collect();
            encode_lines_text(&all, vocab)
        }
        TaskPrompt::OcrLayout => encode_page(elements, vocab, scheme),
        TaskPrompt::ReadAt(q) => {
            if !q.is_valid_for(vocab.grid()) {
                return Err(Error::InvalidRegion(q.to_array()));
            }
            let picked: Vec<&LineElement> = lines_in_region(elements, q, vocab.grid())
                .into_iter()
                .map(|i| &elements[i])
                .collect();
            encode_lines_text(&picked, vocab)
        }
        TaskPrompt::FindIt(query) => {
            if query.trim().is_empty() {
                return Err(Error::EmptyQuery);
            }
            let hits = lines_matching(elements, query);
            if hits.len() != 1 {
                return Err(Error::AmbiguousQuery { query: query.clone(), count: hits.len() });
            }
            let e = &elements[hits[0]];
            let q = check_element(hits[0], e, vocab.grid())?;
            let mut out = vec![vocab.bos()];
            push_box(&mut out, vocab, scheme, &q);
            out.push(vocab.eos());
            Ok(out)
        }
    }
}

/// Structural problems found while decoding model output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Elements started but not completed, including empty-text ones.
    pub incomplete_elements: usize,
    /// Tokens that did not contribute to any returned element.
    pub dropped_tokens: usize,
    /// Boxes whose corners had to be swapped into order.
    pub repaired_boxes: usize,
    /// No `<eos>` was found.
    pub missing_eos: bool,
}

impl Diagnostics {
    pub fn is_clean(&self) -> bool {
        *self == Diagnostics::default()
    }

    pub fn merge(&mut self, other: &Diagnostics) {
        self.incomplete_elements += other.incomplete_elements;
        self.dropped_tokens += other.dropped_tokens;
        self.repaired_boxes += other.repaired_boxes;
        self.missing_eos |= other.missing_eos;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPage {
    pub elements: Vec<LineElement>,
    pub quant_boxes: Vec<QuantBox>,
    pub diagnostics: Diagnostics,
}

/// Strips `<bos>`/`<eos>` framing; returns the body and sets `missing_eos`.
fn body<'a>(tokens: &'a [TokenId], vocab: &Vocabulary, diag: &mut Diagnostics) -> &'a [TokenId] {
    let start = usize::from(tokens.first() == Some(&vocab.bos()));
    let rest = &tokens[start..];
    match rest.iter().position(|&t| t == vocab.eos()) {
        Some(end) => {
            diag.dropped_tokens += rest.len() - end - 1;
            &rest[..end]
        }
        None => {
            diag.missing_eos = true;
            rest
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    X,
    Y,
    Loc,
}

fn coord(kind: Option<TokenKind>) -> Option<(Axis, u32)> {
    match kind? {
        TokenKind::X(i) => Some((Axis::X, i)),
        TokenKind::Y(i) => Some((Axis::Y, i)),
        TokenKind::Loc(i) => Some((Axis::Loc, i)),
        _ => None,
    }
}

struct Parser<'a> {
    toks: &'a [TokenId],
    pos: usize,
    vocab: &'a Vocabulary,
    pair: [Axis; 2],
}

impl<'a> Parser<'a> {
    fn peek_kind(&self, off: usize) -> Option<TokenKind> {
        self.toks.get(self.pos + off).and_then(|&t| self.vocab.kind(t))
    }

    /// Reads a corner pair at the cursor without consuming on failure.
    fn corner(&mut self) -> Option<(u32, u32)> {
        let a = coord(self.peek_kind(0))?;
        let b = coord(self.peek_kind(1))?;
        if a.0 == self.pair[0] && b.0 == self.pair[1] {
            self.pos += 2;
            Some((a.1, b.1))
        } else {
            None
        }
    }
}

fn ordered_box(a: (u32, u32), b: (u32, u32), grid: &QuantGrid) -> Option<(QuantBox, bool)> {
    let (mut ix1, mut iy1, mut ix2, mut iy2) = (a.0, a.1, b.0, b.1);
    let mut repaired = false;
    if ix1 > ix2 {
        std::mem::swap(&mut ix1, &mut ix2);
        repaired = true;
    }
    if iy1 > iy2 {
        std::mem::swap(&mut iy1, &mut iy2);
        repaired = true;
    }
    let q = QuantBox { ix1, iy1, ix2, iy2 };
    // Unified indices can exceed the shorter axis of a non-square grid.
    q.is_valid_for(grid).then_some((q, repaired))
}

struct Collector<'a> {
    grid: &'a QuantGrid,
    elements: Vec<LineElement>,
    quant_boxes: Vec<QuantBox>,
    diag: Diagnostics,
}

impl Collector<'_> {
    /// Keeps a finished element, or counts every token it used as dropped.
    fn settle(&mut self, text: String, corners: Option<((u32, u32), (u32, u32))>, used: usize, stray: usize) {
        let boxed = corners.and_then(|(a, b)| ordered_box(a, b, self.grid));
        match boxed {
            Some((q, repaired)) if !text.trim().is_empty() => {
                self.diag.repaired_boxes += usize::from(repaired);
                self.diag.dropped_tokens += stray;
                self.elements.push(LineElement { text, bbox: dequantize(&q, self.grid) });
                self.quant_boxes.push(q);
            }
            _ => {
                self.diag.incomplete_elements += 1;
                self.diag.dropped_tokens += used;
            }
        }
    }
}

/// Recovers line elements from an arbitrary token sequence.
///
/// Complete elements are kept in order; an element missing its closing
/// coordinates (or with blank text) is discarded and counted, stray tokens
/// are skipped, and inverted corners are swapped.
pub fn decode_page(tokens: &[TokenId], vocab: &Vocabulary, scheme: EncodingScheme) -> DecodedPage {
    let mut out = Collector {
        grid: vocab.grid(),
        elements: Vec::new(),
        quant_boxes: Vec::new(),
        diag: Diagnostics::default(),
    };
    let toks = body(tokens, vocab, &mut out.diag);
    let pair = match scheme {
        EncodingScheme::Unified => [Axis::Loc, Axis::Loc],
        _ => [Axis::X, Axis::Y],
    };
    let mut p = Parser { toks, pos: 0, vocab, pair };

    match scheme {
        EncodingScheme::Original | EncodingScheme::Unified => {
            while p.pos < toks.len() {
                let start = p.pos;
                let Some(first) = p.corner() else {
                    out.diag.dropped_tokens += 1;
                    p.pos += 1;
                    continue;
                };
                let mut text = String::new();
                let mut stray = 0;
                let mut second = None;
                while p.pos < toks.len() {
                    if let Some(c) = p.corner() {
                        second = Some(c);
                        break;
                    }
                    match p.peek_kind(0) {
                        Some(TokenKind::Char(c)) => text.push(c),
                        _ => stray += 1,
                    }
                    p.pos += 1;
                }
                out.settle(text, second.map(|s| (first, s)), p.pos - start, stray);
            }
        }
        EncodingScheme::Segmented => {
            while p.pos < toks.len() {
                let start = p.pos;
                let mut text = String::new();
                let mut stray = 0;
                let mut ended = false;
                while p.pos < toks.len() {
                    let kind = p.peek_kind(0);
                    p.pos += 1;
                    match kind {
                        Some(TokenKind::Char(c)) => text.push(c),
                        Some(TokenKind::EndText) => {
                            ended = true;
                            break;
                        }
                        _ => stray += 1,
                    }
                }
                if !ended && text.is_empty() {
                    out.diag.dropped_tokens += p.pos - start;
                    break;
                }
                let mut corners = None;
                if ended {
                    if let Some(a) = p.corner() {
                        if let Some(b) = p.corner() {
                            if p.peek_kind(0) == Some(TokenKind::EndLocation) {
                                p.pos += 1;
                                corners = Some((a, b));
                            }
                        }
                    }
                }
                out.settle(text, corners, p.pos - start, stray);
            }
        }
    }

    DecodedPage { elements: out.elements, quant_boxes: out.quant_boxes, diagnostics: out.diag }
}

/// Decodes a text-only target into lines split at `<nl>`.
pub fn decode_text(tokens: &[TokenId], vocab: &Vocabulary) -> (Vec<String>, Diagnostics) {
    let mut diag = Diagnostics::default();
    let toks = body(tokens, vocab, &mut diag);
    let mut lines = vec![String::new()];
    for &t in toks {
        match vocab.kind(t) {
            Some(TokenKind::Char(c)) => lines.last_mut().expect("non-empty").push(c),
            Some(TokenKind::Newline) => lines.push(String::new()),
            _ => diag.dropped_tokens += 1,
        }
    }
    if lines.len() == 1 && lines[0].is_empty() {
        lines.clear();
    }
    (lines, diag)
}

/// Decodes a localization answer: the first complete box in the sequence.
pub fn decode_box(
    tokens: &[TokenId],
    vocab: &Vocabulary,
    scheme: EncodingScheme,
) -> (Option<QuantBox>, Diagnostics) {
    let mut diag = Diagnostics::default();
    let toks = body(tokens, vocab, &mut diag);
    let pair = match scheme {
        EncodingScheme::Unified => [Axis::Loc, Axis::Loc],
        _ => [Axis::X, Axis::Y],
    };
    let mut p = Parser { toks, pos: 0, vocab, pair };
    let mut found = None;
    while p.pos < toks.len() {
        let at = p.pos;
        if let Some(a) = p.corner() {
            if let Some(b) = p.corner() {
                if let Some((q, repaired)) = ordered_box(a, b, vocab.grid()) {
                    diag.repaired_boxes += usize::from(repaired);
                    diag.dropped_tokens += at + toks.len() - p.pos;
                    found = Some(q);
                    break;
                }
            }
            p.pos = at;
        }
        p.pos += 1;
    }
    if found.is_none() {
        diag.incomplete_elements += 1;
        diag.dropped_tokens += toks.len();
    }
    (found, diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(QuantGrid::new(10, 320, 160).unwrap())
    }

    fn ab_page() -> Vec<LineElement> {
        vec![LineElement::new("AB", BBox::new(10., 20., 55., 35.).unwrap())]
    }

    fn render(v: &Vocabulary, ids: &[TokenId]) -> String {
        v.render(ids)
    }

    #[test]
    fn vocabulary_is_a_bijection() {
        let v = vocab();
        for id in 0..v.len() as TokenId {
            let s = v.token(id).unwrap();
            assert_eq!(v.id(s), Some(id), "{s}");
            assert!(v.kind(id).is_some());
        }
        assert_eq!(v.kind(v.len() as TokenId), None);
        assert_eq!(v.x_range().len(), 32);
        assert_eq!(v.y_range().len(), 16);
        assert_eq!(v.loc_range().len(), 32);
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back.hash(), v.hash());
        let other = Vocabulary::new(QuantGrid::new(5, 320, 160).unwrap());
        assert_ne!(other.hash(), v.hash());
    }

    #[test]
    fn tampered_vocabulary_file_rejected() {
        let j = vocab().to_json().replace("<x_3>", "<x_three>");
        assert!(Vocabulary::from_json(&j).is_err());
    }

    #[test]
    fn encode_original() {
        let v = vocab();
        let t = encode_page(&ab_page(), &v, EncodingScheme::Original).unwrap();
        assert_eq!(render(&v, &t), "<bos><x_1><y_2>AB<x_5><y_3><eos>");
    }

    #[test]
    fn encode_segmented() {
        let v = vocab();
        let t = encode_page(&ab_page(), &v, EncodingScheme::Segmented).unwrap();
        assert_eq!(render(&v, &t), "<bos>AB</text><x_1><y_2><x_5><y_3></location><eos>");
    }

    #[test]
    fn encode_unified() {
        let v = vocab();
        let t = encode_page(&ab_page(), &v, EncodingScheme::Unified).unwrap();
        assert_eq!(render(&v, &t), "<bos><loc_1><loc_2>AB<loc_5><loc_3><eos>");
    }

    #[test]
    fn encode_rejects_box_outside_grid_with_index() {
        let v = vocab();
        let mut page = ab_page();
        page.push(LineElement::new("far", BBox::new(300., 0., 330., 10.).unwrap()));
        match encode_page(&page, &v, EncodingScheme::Original) {
            Err(Error::BoxOutsideGrid { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_rejects_unknown_characters() {
        let v = vocab();
        let page = vec![LineElement::new("naïve", BBox::new(0., 0., 10., 10.).unwrap())];
        match encode_page(&page, &v, EncodingScheme::Original) {
            Err(Error::UnknownChars { chars }) => assert_eq!(chars, vec!['ï']),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decode_missing_closing_corner() {
        let v = vocab();
        let toks = vec![v.bos(), v.x(1), v.y(2), v.char_id('A').unwrap(), v.char_id('B').unwrap(), v.eos()];
        let d = decode_page(&toks, &v, EncodingScheme::Original);
        assert!(d.elements.is_empty());
        assert_eq!(d.diagnostics.incomplete_elements, 1);
        assert_eq!(d.diagnostics.dropped_tokens, 4);
    }

    #[test]
    fn decode_swaps_inverted_corners() {
        let v = vocab();
        let toks = vec![v.bos(), v.x(5), v.y(3), v.char_id('A').unwrap(), v.x(1), v.y(2), v.eos()];
        let d = decode_page(&toks, &v, EncodingScheme::Original);
        assert_eq!(d.quant_boxes, vec![QuantBox::from([1, 2, 5, 3])]);
        assert_eq!(d.elements[0].text, "A");
        assert_eq!(d.diagnostics.repaired_boxes, 1);
        assert_eq!(d.diagnostics.incomplete_elements, 0);
    }

    #[test]
    fn decode_keeps_complete_prefix() {
        let v = vocab();
        let page = vec![
            LineElement::new("one", BBox::new(0., 0., 30., 10.).unwrap()),
            LineElement::new("two", BBox::new(0., 20., 30., 30.).unwrap()),
        ];
        let mut toks = encode_page(&page, &v, EncodingScheme::Segmented).unwrap();
        toks.truncate(toks.len() - 3);
        let d = decode_page(&toks, &v, EncodingScheme::Segmented);
        assert_eq!(d.elements, page[..1].to_vec());
        assert_eq!(d.diagnostics.incomplete_elements, 1);
        assert!(d.diagnostics.missing_eos);
    }

    #[test]
    fn token_count_formula() {
        let v = vocab();
        let page = vec![
            LineElement::new("hello", BBox::new(0., 0., 50., 14.).unwrap()),
            LineElement::new("a b", BBox::new(10., 20., 40., 34.).unwrap()),
        ];
        let chars = 5 + 3;
        for s in EncodingScheme::ALL {
            let n = encode_page(&page, &v, s).unwrap().len();
            let extra = if s == EncodingScheme::Segmented { 4 } else { 0 };
            assert_eq!(n, chars + 4 * 2 + 2 + extra, "{s:?}");
        }
    }

    #[test]
    fn prompts() {
        let v = vocab();
        let f = encode_prompt(&TaskPrompt::FindIt("tel".into()), &v).unwrap();
        assert_eq!(render(&v, &f), "<find_it>tel");
        let r = encode_prompt(&TaskPrompt::ReadAt(QuantBox::from([1, 2, 5, 3])), &v).unwrap();
        assert_eq!(render(&v, &r), "<read_at><x_1><y_2><x_5><y_3>");
        assert_eq!(render(&v, &encode_prompt(&TaskPrompt::OcrOnly, &v).unwrap()), "<ocr>");
        assert_eq!(render(&v, &encode_prompt(&TaskPrompt::OcrLayout, &v).unwrap()), "<ocr_layout>");
        assert!(matches!(
            encode_prompt(&TaskPrompt::FindIt("t€l£".into()), &v),
            Err(Error::UnknownChars { chars }) if chars == vec!['£', '€']
        ));
        assert!(matches!(encode_prompt(&TaskPrompt::FindIt(" ".into()), &v), Err(Error::EmptyQuery)));
        assert!(encode_prompt(&TaskPrompt::ReadAt(QuantBox::from([5, 0, 1, 0])), &v).is_err());
    }

    fn two_lines() -> Vec<LineElement> {
        vec![
            LineElement::new("AB", BBox::new(10., 10., 60., 24.).unwrap()),
            LineElement::new("CD", BBox::new(10., 40., 60., 54.).unwrap()),
        ]
    }

    #[test]
    fn targets() {
        let v = vocab();
        let page = two_lines();
        let s = EncodingScheme::Original;
        let t = expected_target(&TaskPrompt::OcrOnly, &page, &v, s).unwrap();
        assert_eq!(render(&v, &t), "<bos>AB<nl>CD<eos>");
        let t = expected_target(&TaskPrompt::OcrLayout, &page, &v, s).unwrap();
        assert_eq!(t, encode_page(&page, &v, s).unwrap());
        let region = QuantBox::from([0, 3, 7, 5]);
        let t = expected_target(&TaskPrompt::ReadAt(region), &page, &v, s).unwrap();
        assert_eq!(render(&v, &t), "<bos>CD<eos>");
        let t = expected_target(&TaskPrompt::FindIt("CD".into()), &page, &v, s).unwrap();
        assert_eq!(render(&v, &t), "<bos><x_1><y_4><x_5><y_5><eos>");
        let t = expected_target(&TaskPrompt::FindIt("CD".into()), &page, &v, EncodingScheme::Unified).unwrap();
        assert_eq!(render(&v, &t), "<bos><loc_1><loc_4><loc_5><loc_5><eos>");
    }

    #[test]
    fn find_it_requires_a_unique_match() {
        let v = vocab();
        let mut page = two_lines();
        page.push(LineElement::new("CD", BBox::new(10., 70., 60., 84.).unwrap()));
        let s = EncodingScheme::Original;
        assert!(matches!(
            expected_target(&TaskPrompt::FindIt("CD".into()), &page, &v, s),
            Err(Error::AmbiguousQuery { count: 2, .. })
        ));
        assert!(matches!(
            expected_target(&TaskPrompt::FindIt("XY".into()), &page, &v, s),
            Err(Error::AmbiguousQuery { count: 0, .. })
        ));
        // Word granularity: "C" is not a whole word of "CD".
        assert!(expected_target(&TaskPrompt::FindIt("C".into()), &page, &v, s).is_err());
    }

    #[test]
    fn text_and_box_decoding() {
        let v = vocab();
        let page = two_lines();
        let t = expected_target(&TaskPrompt::OcrOnly, &page, &v, EncodingScheme::Original).unwrap();
        let (lines, d) = decode_text(&t, &v);
        assert_eq!(lines, vec!["AB", "CD"]);
        assert!(d.is_clean());
        assert_eq!(decode_text(&[v.bos(), v.eos()], &v).0, Vec::<String>::new());
        for s in EncodingScheme::ALL {
            let t = expected_target(&TaskPrompt::FindIt("AB".into()), &page, &v, s).unwrap();
            let (q, d) = decode_box(&t, &v, s);
            assert_eq!(q, Some(QuantBox::from([1, 1, 5, 2])));
            assert!(d.is_clean(), "{s:?} {d:?}");
        }
        let (q, d) = decode_box(&[v.bos(), v.x(1), v.eos()], &v, EncodingScheme::Original);
        assert_eq!(q, None);
        assert_eq!(d.incomplete_elements, 1);
    }

    fn arb_page() -> impl Strategy<Value = Vec<LineElement>> {
        let line = ("[a-zA-Z0-9 .,:$]{0,12}[a-z]", 0u32..32, 0u32..16, 0u32..32, 0u32..16);
        prop::collection::vec(line, 0..6).prop_map(|ls| {
            ls.into_iter()
                .map(|(text, a, b, c, d)| {
                    let q = QuantBox { ix1: a.min(c), iy1: b.min(d), ix2: a.max(c), iy2: b.max(d) };
                    LineElement::new(text, dequantize(&q, &QuantGrid::new(10, 320, 160).unwrap()))
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn round_trip_every_scheme(page in arb_page()) {
            let v = vocab();
            for s in EncodingScheme::ALL {
                let toks = encode_page(&page, &v, s).unwrap();
                let d = decode_page(&toks, &v, s);
                prop_assert!(d.diagnostics.is_clean());
                prop_assert_eq!(&d.elements, &page);
            }
        }

        #[test]
        fn decode_never_panics(ids in prop::collection::vec(0u32..200, 0..80)) {
            let v = vocab();
            for s in EncodingScheme::ALL {
                let d = decode_page(&ids, &v, s);
                prop_assert_eq!(d.elements.len(), d.quant_boxes.len());
                prop_assert!(d.quant_boxes.iter().all(|q| q.is_valid_for(v.grid())));
                let _ = decode_box(&ids, &v, s);
            }
            let _ = decode_text(&ids, &v);
        }
    }
}
