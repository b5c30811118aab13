//! Streaming line-oriented N-Triples / N-Quads reader.
//!
//! Grammar scope is deliberately narrow: one statement per line, terminated
//! by `.`. IRIs yield their content without angle brackets, literals are
//! kept verbatim (quotes, language tag, datatype suffix), blank nodes yield
//! the `_:label` token. `.gz` inputs are decompressed on the fly.
//!
//! Chunks are counted in statements, never split a statement, and carry
//! dense ordinals across the whole run.

use crate::error::{Error, Result};
use crate::term::{Statement, Term};
use flate2::read::MultiGzDecoder;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

pub const DEFAULT_CHUNK_SIZE: usize = 100_000;

/// A run of raw statement lines from one file, not yet parsed.
/// Blank and comment lines are already dropped.
#[derive(Clone, Debug)]
pub struct RawChunk {
    /// Statement lines concatenated into one buffer, each terminated by
    /// `\n`; one allocation per chunk instead of one per line.
    pub text: String,
    /// Source file plus the line number of the first statement line.
    pub source: String,
    pub first_line: u64,
    /// Line number (1-based, in the source file) of each statement line.
    pub line_numbers: Vec<u64>,
    pub ordinal: u64,
}

impl RawChunk {
    /// Number of statement lines in this chunk.
    pub fn len(&self) -> usize {
        self.line_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.line_numbers.is_empty()
    }

    /// Parse every line of this chunk into a [`Chunk`].
    pub fn parse(&self, skip_bad: bool) -> Result<Chunk> {
        let mut statements = Vec::with_capacity(self.len());
        let mut skipped = 0u64;
        for (line, &lineno) in self.text.split_terminator('\n').zip(&self.line_numbers) {
            match parse_statement(line) {
                Ok(Some(stmt)) => statements.push(stmt),
                Ok(None) => {}
                Err(msg) => {
                    if skip_bad {
                        skipped += 1;
                    } else {
                        return Err(Error::Parse {
                            path: self.source.clone(),
                            line: lineno,
                            msg,
                        });
                    }
                }
            }
        }
        Ok(Chunk {
            statements,
            source_label: format!("{}:{}", self.source, self.first_line),
            ordinal: self.ordinal,
            skipped,
        })
    }
}

/// A parsed chunk: at most `chunk_size` statements, in input order.
#[derive(Clone, Debug)]
pub struct Chunk {
    pub statements: Vec<Statement>,
    pub source_label: String,
    pub ordinal: u64,
    /// Malformed lines skipped under `--skip-bad`.
    pub skipped: u64,
}

/// Parse one line. Returns `Ok(None)` for blank and comment lines.
pub fn parse_statement(line: &str) -> std::result::Result<Option<Statement>, String> {
    if is_skippable(line) {
        return Ok(None);
    }
    let bytes = line.as_bytes();
    let mut pos = 0usize;
    let mut terms: Vec<Term> = Vec::with_capacity(4);
    let mut terminated = false;

    while pos < bytes.len() {
        match bytes[pos] {
            b' ' | b'\t' => pos += 1,
            b'<' => {
                let end = find_byte(bytes, pos + 1, b'>')
                    .ok_or_else(|| "unterminated IRI, missing '>'".to_string())?;
                let iri = &line[pos + 1..end];
                terms.push(mk_term(iri)?);
                pos = end + 1;
            }
            b'"' => {
                let (term_end, _) = scan_literal(bytes, pos)?;
                terms.push(mk_term(&line[pos..term_end])?);
                pos = term_end;
            }
            b'_' => {
                if pos + 1 >= bytes.len() || bytes[pos + 1] != b':' {
                    return Err("'_' not followed by ':' in blank node".into());
                }
                let mut end = pos + 2;
                while end < bytes.len() && !bytes[end].is_ascii_whitespace() && bytes[end] != b'.'
                {
                    end += 1;
                }
                if end == pos + 2 {
                    return Err("empty blank node label".into());
                }
                terms.push(mk_term(&line[pos..end])?);
                pos = end;
            }
            b'.' => {
                // Statement terminator; only whitespace may follow.
                if line[pos + 1..].bytes().any(|b| !b.is_ascii_whitespace()) {
                    return Err("content after terminating '.'".into());
                }
                terminated = true;
                pos = bytes.len();
            }
            other => {
                return Err(format!("unexpected character {:?}", other as char));
            }
        }
    }

    if !terminated {
        return Err("missing terminating '.'".into());
    }
    match terms.len() {
        3 | 4 => Ok(Some(Statement::new(terms).map_err(|e| e.to_string())?)),
        n => Err(format!("expected 3 or 4 terms, found {n}")),
    }
}

fn mk_term(s: &str) -> std::result::Result<Term, String> {
    Term::new(s).map_err(|e| e.to_string())
}

fn find_byte(bytes: &[u8], from: usize, needle: u8) -> Option<usize> {
    bytes[from..].iter().position(|&b| b == needle).map(|i| from + i)
}

/// Scan a literal starting at the opening quote. Returns the end offset one
/// past the whole token (closing quote plus any `@lang` / `^^<iri>` suffix).
fn scan_literal(bytes: &[u8], start: usize) -> std::result::Result<(usize, ()), String> {
    let mut pos = start + 1;
    loop {
        match bytes.get(pos) {
            None => return Err("unterminated literal".into()),
            Some(b'\\') => {
                if pos + 1 >= bytes.len() {
                    return Err("dangling escape in literal".into());
                }
                pos += 2;
            }
            Some(b'"') => {
                pos += 1;
                break;
            }
            Some(_) => pos += 1,
        }
    }
    // Optional suffix.
    match bytes.get(pos) {
        Some(b'@') => {
            let mut end = pos + 1;
            while end < bytes.len()
                && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'-')
            {
                end += 1;
            }
            if end == pos + 1 {
                return Err("empty language tag".into());
            }
            Ok((end, ()))
        }
        Some(b'^') => {
            if bytes.get(pos + 1) != Some(&b'^') || bytes.get(pos + 2) != Some(&b'<') {
                return Err("malformed datatype suffix, expected ^^<iri>".into());
            }
            let end = find_byte(bytes, pos + 3, b'>')
                .ok_or_else(|| "unterminated datatype IRI".to_string())?;
            Ok((end + 1, ()))
        }
        _ => Ok((pos, ())),
    }
}

/// Blank lines and `#` comments are skipped, not errors.
pub fn is_skippable(line: &str) -> bool {
    let trimmed = line.trim_start();
    trimmed.is_empty() || trimmed.starts_with('#')
}

enum LineSource {
    Plain(BufReader<File>),
    Gzip(BufReader<MultiGzDecoder<BufReader<File>>>),
}

impl LineSource {
    fn open(path: &Path) -> Result<LineSource> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if path.extension().is_some_and(|e| e == "gz") {
            Ok(LineSource::Gzip(BufReader::new(MultiGzDecoder::new(
                BufReader::new(file),
            ))))
        } else {
            Ok(LineSource::Plain(BufReader::new(file)))
        }
    }

    fn read_line(&mut self, buf: &mut String) -> std::io::Result<usize> {
        match self {
            LineSource::Plain(r) => r.read_line(buf),
            LineSource::Gzip(r) => r.read_line(buf),
        }
    }
}

/// Streams [`RawChunk`]s of exactly `chunk_size` statement lines (the last
/// chunk per file may be smaller) over a list of files, decompressing `.gz`
/// on the fly. Tracks plain (decompressed) bytes read.
pub struct RawChunkStream {
    paths: Vec<PathBuf>,
    next_path: usize,
    current: Option<(LineSource, String, u64)>, // source, display path, line no
    chunk_size: usize,
    next_ordinal: u64,
    bytes_read: u64,
}

impl RawChunkStream {
    pub fn new(paths: &[PathBuf], chunk_size: usize) -> Result<RawChunkStream> {
        if chunk_size == 0 {
            return Err(Error::Config("chunk size must be >= 1".into()));
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::io(
                    p.display().to_string(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                ));
            }
        }
        Ok(RawChunkStream {
            paths: paths.to_vec(),
            next_path: 0,
            current: None,
            chunk_size,
            next_ordinal: 0,
            bytes_read: 0,
        })
    }

    /// Total decompressed bytes consumed so far.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }

    pub fn chunks_emitted(&self) -> u64 {
        self.next_ordinal
    }

    fn next_chunk(&mut self) -> Result<Option<RawChunk>> {
        loop {
            if self.current.is_none() {
                if self.next_path >= self.paths.len() {
                    return Ok(None);
                }
                let path = &self.paths[self.next_path];
                self.next_path += 1;
                let src = LineSource::open(path)?;
                self.current = Some((src, path.display().to_string(), 0));
            }

            let (src, display, lineno) = self.current.as_mut().unwrap();
            let mut text = String::new();
            let mut line_numbers = Vec::new();
            let mut first_line = 0u64;
            let mut buf = String::new();
            loop {
                if line_numbers.len() == self.chunk_size {
                    break;
                }
                buf.clear();
                let n = src
                    .read_line(&mut buf)
                    .map_err(|e| Error::io(display.clone(), e))?;
                if n == 0 {
                    break; // EOF
                }
                self.bytes_read += n as u64;
                *lineno += 1;
                while buf.ends_with('\n') || buf.ends_with('\r') {
                    buf.pop();
                }
                if is_skippable(&buf) {
                    continue;
                }
                if first_line == 0 {
                    first_line = *lineno;
                }
                text.push_str(&buf);
                text.push('\n');
                line_numbers.push(*lineno);
            }

            if line_numbers.is_empty() {
                // File exhausted; move on.
                self.current = None;
                continue;
            }
            let chunk = RawChunk {
                text,
                source: display.clone(),
                first_line,
                line_numbers,
                ordinal: self.next_ordinal,
            };
            self.next_ordinal += 1;
            // A short chunk means the file is done.
            if chunk.len() < self.chunk_size {
                self.current = None;
            }
            return Ok(Some(chunk));
        }
    }
}

impl Iterator for RawChunkStream {
    type Item = Result<RawChunk>;

    fn next(&mut self) -> Option<Result<RawChunk>> {
        self.next_chunk().transpose()
    }
}

/// Parsed-chunk stream over a list of files.
pub fn stream_chunks(
    paths: &[PathBuf],
    chunk_size: usize,
    skip_bad: bool,
) -> Result<impl Iterator<Item = Result<Chunk>>> {
    let raw = RawChunkStream::new(paths, chunk_size)?;
    Ok(raw.map(move |r| r.and_then(|rc| rc.parse(skip_bad))))
}

/// Convenience: read every statement of the given files into memory.
pub fn read_all(paths: &[PathBuf], skip_bad: bool) -> Result<Vec<Statement>> {
    let mut out = Vec::new();
    for chunk in stream_chunks(paths, DEFAULT_CHUNK_SIZE, skip_bad)? {
        out.extend(chunk?.statements);
    }
    Ok(out)
}
