//! Byte-level vocabulary and full-sentence sequence packing.
//!
//! Token ids 0..=255 are raw bytes. Four specials follow: `<s>` starts every
//! packed sequence, `</s>` ends a paragraph (and delimits packed examples),
//! `</d>` ends a document, and a pad id fills the tail of short sequences.

use std::io::{Read, Write};
use std::ops::Range;

use log::warn;

use crate::error::{Error, Result};

pub type TokenId = u16;

pub const BOS: TokenId = 256;
pub const EOP: TokenId = 257;
pub const EOD: TokenId = 258;
pub const PAD: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(id: TokenId) -> bool {
    id >= BOS
}

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`encode`]; special ids are skipped and invalid UTF-8 is replaced.
pub fn decode(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|id| !is_special(**id))
        .map(|id| *id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Human-readable rendering with specials spelled out.
pub fn render(ids: &[TokenId]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &id in ids {
        let special = match id {
            BOS => "<s>",
            EOP => "</s>",
            EOD => "</d>",
            PAD => "<pad>",
            _ => {
                bytes.push(id as u8);
                continue;
            }
        };
        flush(&mut bytes, &mut out);
        out.push_str(special);
    }
    flush(&mut bytes, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Document,
    Padding,
}

/// Half-open `[start, end)` region of a packed sequence (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DocSpan {
    pub start: usize,
    pub end: usize,
    pub kind: RegionKind,
}

impl DocSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<TokenId>,
    pub doc_spans: Vec<DocSpan>,
}

impl PackedSequence {
    /// Wraps raw ids as a single-document sequence with no padding.
    pub fn single(ids: Vec<TokenId>) -> Self {
        let n = ids.len();
        PackedSequence {
            ids,
            doc_spans: vec![DocSpan {
                start: 0,
                end: n,
                kind: RegionKind::Document,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_pad(&self, index: usize) -> bool {
        self.ids[index] == PAD
    }

    pub fn non_pad_len(&self) -> usize {
        self.ids.iter().filter(|id| **id != PAD).count()
    }

    /// The region containing 0-based `index`.
    pub fn region_of(&self, index: usize) -> Option<&DocSpan> {
        self.doc_spans.iter().find(|s| s.range().contains(&index))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.first() != Some(&BOS) {
            return Err(Error::contract("packed sequence must start with <s>"));
        }
        let mut cursor = 0;
        for span in &self.doc_spans {
            if span.start != cursor || span.end <= span.start {
                return Err(Error::contract(format!(
                    "doc spans do not tile: {span:?} at {cursor}"
                )));
            }
            cursor = span.end;
        }
        if cursor != self.ids.len() {
            return Err(Error::contract("doc spans do not cover the sequence"));
        }
        for (i, id) in self.ids.iter().enumerate() {
            if *id == EOD && !self.doc_spans.iter().any(|s| s.end == i + 1) {
                return Err(Error::contract(format!("</d> at {i} is not a region edge")));
            }
        }
        Ok(())
    }
}

/// A paragraph longer than a sequence could hold, split at byte granularity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitWarning {
    pub document: usize,
    pub paragraph: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default)]
pub struct CorpusPacking {
    pub sequences: Vec<PackedSequence>,
    pub warnings: Vec<SplitWarning>,
}

/// Parses the corpus text format: documents separated by blank lines,
/// paragraphs by single newlines.
pub fn parse_corpus(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

struct SequenceBuilder {
    n: usize,
    ids: Vec<TokenId>,
    spans: Vec<DocSpan>,
    open: usize,
    done: Vec<PackedSequence>,
}

impl SequenceBuilder {
    fn new(n: usize) -> Self {
        SequenceBuilder {
            n,
            ids: vec![BOS],
            spans: Vec::new(),
            open: 0,
            done: Vec::new(),
        }
    }

    fn space(&self) -> usize {
        self.n - self.ids.len()
    }

    fn has_content(&self) -> bool {
        self.ids.len() > 1
    }

    fn close_region(&mut self) {
        if self.open < self.ids.len() {
            self.spans.push(DocSpan {
                start: self.open,
                end: self.ids.len(),
                kind: RegionKind::Document,
            });
            self.open = self.ids.len();
        }
    }

    fn flush(&mut self) {
        if !self.has_content() {
            return;
        }
        self.close_region();
        let len = self.ids.len();
        if len < self.n {
            self.spans.push(DocSpan {
                start: len,
                end: self.n,
                kind: RegionKind::Padding,
            });
            self.ids.resize(self.n, PAD);
        }
        let ids = std::mem::replace(&mut self.ids, vec![BOS]);
        let doc_spans = std::mem::take(&mut self.spans);
        self.open = 0;
        self.done.push(PackedSequence { ids, doc_spans });
    }

    /// Appends tokens that may be split across sequences; closes a region
    /// after every `</d>`.
    fn append_splitting(&mut self, mut tokens: &[TokenId]) {
        while !tokens.is_empty() {
            if self.space() == 0 {
                self.flush();
            }
            let take = self.space().min(tokens.len());
            for &t in &tokens[..take] {
                self.ids.push(t);
                if t == EOD {
                    self.close_region();
                }
            }
            tokens = &tokens[take..];
        }
    }

    /// Places a unit whole, starting a fresh sequence if it does not fit.
    fn place(&mut self, unit: &[TokenId]) {
        if unit.len() > self.space() && self.has_content() {
            self.flush();
        }
        self.append_splitting(unit);
    }
}

/// Packs documents (lists of paragraphs) into length-`n` sequences.
///
/// Paragraphs are kept whole when they fit; each is followed by `</s>` and the
/// last paragraph of a document additionally by `</d>`. Every sequence starts
/// with `<s>`; sequences that cannot take the next paragraph are padded.
pub fn pack_corpus<S: AsRef<str>>(documents: &[Vec<S>], n: usize) -> Result<CorpusPacking> {
    if n < 8 {
        return Err(Error::dim(format!(
            "sequence length {n} is below the minimum of 8"
        )));
    }
    let mut builder = SequenceBuilder::new(n);
    let mut warnings = Vec::new();
    for (d, doc) in documents.iter().enumerate() {
        let count = doc.len();
        for (p, para) in doc.iter().enumerate() {
            let mut unit = encode(para.as_ref());
            if unit.len() > n - 2 {
                warn!(
                    "document {d} paragraph {p}: {} bytes exceed {} and will be split",
                    unit.len(),
                    n - 2
                );
                warnings.push(SplitWarning {
                    document: d,
                    paragraph: p,
                    bytes: unit.len(),
                });
            }
            unit.push(EOP);
            if p + 1 == count {
                unit.push(EOD);
            }
            builder.place(&unit);
        }
    }
    builder.flush();
    Ok(CorpusPacking {
        sequences: builder.done,
        warnings,
    })
}

/// Where one packed example landed inside its sequence (0-based ranges).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExampleSlot {
    pub example: usize,
    pub input: Range<usize>,
    pub target: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedExamples {
    pub sequence: PackedSequence,
    pub slots: Vec<ExampleSlot>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RejectedExample {
    pub example: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ExamplePacking {
    pub sequences: Vec<PackedExamples>,
    pub rejected: Vec<RejectedExample>,
}

/// Packs `(input, target)` examples into length-`n` sequences.
///
/// Each example occupies `input ++ target ++ </s>` and never straddles two
/// sequences; examples whose input and target exceed `n - 2` tokens are
/// rejected and reported.
pub fn pack_examples(
    examples: &[(Vec<TokenId>, Vec<TokenId>)],
    n: usize,
) -> Result<ExamplePacking> {
    if n < 8 {
        return Err(Error::dim(format!(
            "sequence length {n} is below the minimum of 8"
        )));
    }
    let mut out = ExamplePacking::default();
    let mut builder = SequenceBuilder::new(n);
    let mut slots = Vec::new();
    for (i, (input, target)) in examples.iter().enumerate() {
        let len = input.len() + target.len();
        if len > n - 2 {
            warn!("example {i}: {len} tokens exceed {}; rejected", n - 2);
            out.rejected.push(RejectedExample { example: i, len });
            continue;
        }
        if len + 1 > builder.space() {
            builder.flush();
            out.sequences.push(PackedExamples {
                sequence: builder.done.pop().expect("flushed sequence"),
                slots: std::mem::take(&mut slots),
            });
        }
        let start = builder.ids.len();
        builder.ids.extend_from_slice(input);
        builder.ids.extend_from_slice(target);
        builder.ids.push(EOP);
        builder.close_region();
        slots.push(ExampleSlot {
            example: i,
            input: start..start + input.len(),
            target: start + input.len()..start + len,
        });
    }
    if builder.has_content() {
        builder.flush();
        out.sequences.push(PackedExamples {
            sequence: builder.done.pop().expect("flushed sequence"),
            slots,
        });
    }
    Ok(out)
}

const PACK_MAGIC: &[u8; 4] = b"SCLM";
pub const PACK_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Integrity("file ends mid-record".into())
    } else {
        Error::Io(e)
    }
}

/// Writes sequences in the binary packed format.
pub fn write_packed(w: &mut impl Write, n: usize, sequences: &[PackedSequence]) -> Result<()> {
    w.write_all(PACK_MAGIC)?;
    w.write_all(&PACK_VERSION.to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    for seq in sequences {
        if seq.len() != n {
            return Err(Error::dim(format!(
                "sequence of length {} in a length-{n} file",
                seq.len()
            )));
        }
        for id in &seq.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.write_all(&(seq.doc_spans.len() as u32).to_le_bytes())?;
        for s in &seq.doc_spans {
            w.write_all(&(s.start as u32).to_le_bytes())?;
            w.write_all(&(s.end as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads the binary packed format. Regions holding only pad ids come back
/// as [`RegionKind::Padding`].
pub fn read_packed(r: &mut impl Read) -> Result<(usize, Vec<PackedSequence>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != PACK_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != PACK_VERSION {
        return Err(Error::Version {
            found: version,
            expected: PACK_VERSION,
        });
    }
    let n = read_u32(r)? as usize;
    let mut sequences = Vec::new();
    let mut buf = vec![0u8; 2 * n];
    loop {
        // EOF exactly at a record boundary ends the stream.
        let got = read_fully(r, &mut buf)?;
        if got == 0 {
            break;
        }
        if got < buf.len() {
            return Err(Error::Integrity("file ends mid-sequence".into()));
        }
        let ids: Vec<TokenId> = buf
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let count = read_u32(r)? as usize;
        let mut doc_spans = Vec::with_capacity(count);
        for _ in 0..count {
            let start = read_u32(r)? as usize;
            let end = read_u32(r)? as usize;
            if start >= end || end > n {
                return Err(Error::Integrity(format!("bad region [{start},{end})")));
            }
            let kind = if ids[start..end].iter().all(|id| *id == PAD) {
                RegionKind::Padding
            } else {
                RegionKind::Document
            };
            doc_spans.push(DocSpan { start, end, kind });
        }
        sequences.push(PackedSequence { ids, doc_spans });
    }
    Ok((n, sequences))
}

fn read_fully(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}
