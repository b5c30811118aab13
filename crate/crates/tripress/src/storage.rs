//! On-disk formats: per-place dictionary journals, encoded statement
//! streams, the run manifest, and dictionary loading for update mode.
//!
//! Dictionaries are TSV text (`<decimal id> TAB <term> LF`), append-only in
//! id-assignment order, so a file is both the journal and the final shard.
//! Encoded files are binary: a 13-byte header (magic `RDE1`, u32 version,
//! u32 place count, u8 arity mode) followed by little-endian u64 id tuples.
//! Mixed-arity runs write one arity byte per statement to a `.arity`
//! sidecar; pure-triple or pure-quad runs record the arity in the header
//! instead. The `MANIFEST` file is written last and marks the run valid.

use crate::error::{Error, Result};
use crate::term::{EncodedStatement, Term, TermId, TermMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"RDE1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 13;
const ARITY_MODE_OFFSET: u64 = 12;

pub const MANIFEST_NAME: &str = "MANIFEST";
pub const REPORT_NAME: &str = "report.json";

/// Arity discipline of an encoded file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArityMode {
    /// Per-statement arity lives in the `.arity` sidecar.
    Mixed,
    Triples,
    Quads,
}

impl ArityMode {
    fn to_byte(self) -> u8 {
        match self {
            ArityMode::Mixed => 0,
            ArityMode::Triples => 3,
            ArityMode::Quads => 4,
        }
    }

    fn from_byte(b: u8) -> Result<ArityMode> {
        match b {
            0 => Ok(ArityMode::Mixed),
            3 => Ok(ArityMode::Triples),
            4 => Ok(ArityMode::Quads),
            other => Err(Error::Config(format!("bad arity mode byte {other}"))),
        }
    }
}

pub fn dict_file_name(place: usize) -> String {
    format!("dict-{place}.tsv")
}

pub fn data_file_name(place: usize) -> String {
    format!("data-{place}.bin")
}

pub fn arity_file_name(place: usize) -> String {
    format!("data-{place}.arity")
}

/// Byte sink that is either a buffered file or an in-memory buffer flushed
/// to disk at finalize (`--in-memory`).
enum Sink {
    File { writer: BufWriter<File>, path: PathBuf },
    Mem { buf: Vec<u8>, path: PathBuf },
}

impl Sink {
    fn create(path: PathBuf, in_memory: bool) -> Result<Sink> {
        if in_memory {
            Ok(Sink::Mem { buf: Vec::new(), path })
        } else {
            let file = File::create(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Ok(Sink::File { writer: BufWriter::new(file), path })
        }
    }

    fn write_all(&mut self, bytes: &[u8]) -> Result<()> {
        match self {
            Sink::File { writer, path } => writer
                .write_all(bytes)
                .map_err(|e| Error::io(path.display().to_string(), e)),
            Sink::Mem { buf, .. } => {
                buf.extend_from_slice(bytes);
                Ok(())
            }
        }
    }

    /// Flush to disk, optionally patching one byte at `patch`.
    fn finalize(self, patch: Option<(u64, u8)>) -> Result<()> {
        match self {
            Sink::File { mut writer, path } => {
                writer
                    .flush()
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                drop(writer);
                if let Some((offset, byte)) = patch {
                    let mut f = OpenOptions::new()
                        .write(true)
                        .open(&path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    f.seek(SeekFrom::Start(offset))
                        .and_then(|_| f.write_all(&[byte]))
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                }
                Ok(())
            }
            Sink::Mem { mut buf, path } => {
                if let Some((offset, byte)) = patch {
                    buf[offset as usize] = byte;
                }
                std::fs::write(&path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
            }
        }
    }
}

/// Append-only writer for one place's dictionary shard.
pub struct DictWriter {
    sink: Sink,
    bytes: u64,
}

impl DictWriter {
    pub fn create(dir: &Path, place: usize, in_memory: bool) -> Result<DictWriter> {
        let sink = Sink::create(dir.join(dict_file_name(place)), in_memory)?;
        Ok(DictWriter { sink, bytes: 0 })
    }

    /// One record: decimal id, TAB, term bytes, LF.
    pub fn append_mapping(&mut self, id: TermId, term: &Term) -> Result<()> {
        let line = format!("{}\t{}\n", id.value(), term.as_str());
        self.bytes += line.len() as u64;
        self.sink.write_all(line.as_bytes())
    }

    /// Copy pre-existing entries verbatim (update mode seeds the output
    /// shard with the loaded dictionary so the run output is self-contained).
    pub fn append_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.bytes += bytes.len() as u64;
        self.sink.write_all(bytes)
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes
    }

    pub fn finalize(self) -> Result<u64> {
        let bytes = self.bytes;
        self.sink.finalize(None)?;
        Ok(bytes)
    }
}

/// Writer for one place's encoded statement stream. Arity bytes are kept in
/// memory; `finalize` patches the header mode and emits the sidecar when the
/// run turned out mixed-arity.
pub struct EncodedWriter {
    sink: Sink,
    dir: PathBuf,
    place: usize,
    in_memory: bool,
    arities: Vec<u8>,
    body_bytes: u64,
}

impl EncodedWriter {
    pub fn create(
        dir: &Path,
        place: usize,
        place_count: usize,
        in_memory: bool,
    ) -> Result<EncodedWriter> {
        let mut sink = Sink::create(dir.join(data_file_name(place)), in_memory)?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        header.extend_from_slice(&(place_count as u32).to_le_bytes());
        header.push(ArityMode::Triples.to_byte()); // patched at finalize
        sink.write_all(&header)?;
        Ok(EncodedWriter {
            sink,
            dir: dir.to_path_buf(),
            place,
            in_memory,
            arities: Vec::new(),
            body_bytes: 0,
        })
    }

    pub fn write_encoded(&mut self, stmt: &EncodedStatement) -> Result<()> {
        self.arities.push(stmt.arity() as u8);
        for id in &stmt.ids {
            self.sink.write_all(&id.value().to_le_bytes())?;
        }
        self.body_bytes += 8 * stmt.arity() as u64;
        Ok(())
    }

    /// Arities seen so far; the orchestrator pools these across places to
    /// pick the global arity mode.
    pub fn arities(&self) -> &[u8] {
        &self.arities
    }

    /// Patch the header with the final mode; for mixed runs also write the
    /// sidecar. Returns (data bytes, sidecar bytes).
    pub fn finalize(self, mode: ArityMode) -> Result<(u64, u64)> {
        match mode {
            ArityMode::Triples => {
                if self.arities.iter().any(|&a| a != 3) {
                    return Err(Error::Consistency(
                        "quad written to pure-triple encoded file".into(),
                    ));
                }
            }
            ArityMode::Quads => {
                if self.arities.iter().any(|&a| a != 4) {
                    return Err(Error::Consistency(
                        "triple written to pure-quad encoded file".into(),
                    ));
                }
            }
            ArityMode::Mixed => {}
        }
        let data_bytes = HEADER_LEN + self.body_bytes;
        self.sink
            .finalize(Some((ARITY_MODE_OFFSET, mode.to_byte())))?;
        let mut sidecar_bytes = 0;
        if mode == ArityMode::Mixed {
            let mut sidecar =
                Sink::create(self.dir.join(arity_file_name(self.place)), self.in_memory)?;
            sidecar.write_all(&self.arities)?;
            sidecar_bytes = self.arities.len() as u64;
            sidecar.finalize(None)?;
        }
        Ok((data_bytes, sidecar_bytes))
    }
}

/// Parsed header of an encoded file.
#[derive(Clone, Copy, Debug)]
pub struct EncodedHeader {
    pub place_count: usize,
    pub mode: ArityMode,
}

/// Read one place's encoded file (plus sidecar when mixed) back into id
/// tuples.
pub fn read_encoded_file(dir: &Path, place: usize) -> Result<(EncodedHeader, Vec<EncodedStatement>)> {
    let path = dir.join(data_file_name(place));
    let display = path.display().to_string();
    let corrupt = |msg: String| Error::Corrupt { path: display.clone(), msg };

    let mut bytes = Vec::new();
    File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(display.clone(), e))?;
    if bytes.len() < HEADER_LEN as usize {
        return Err(corrupt("file shorter than header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let place_count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mode = ArityMode::from_byte(bytes[12])?;
    let body = &bytes[HEADER_LEN as usize..];
    if body.len() % 8 != 0 {
        return Err(corrupt("body is not a whole number of ids".into()));
    }
    let ids: Vec<u64> = body
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let arities: Vec<u8> = match mode {
        ArityMode::Triples => vec![3; ids.len() / 3],
        ArityMode::Quads => {
            if ids.len() % 4 != 0 {
                return Err(corrupt("quad body not a multiple of 4 ids".into()));
            }
            vec![4; ids.len() / 4]
        }
        ArityMode::Mixed => {
            let sidecar = dir.join(arity_file_name(place));
            let mut a = Vec::new();
            File::open(&sidecar)
                .and_then(|mut f| f.read_to_end(&mut a))
                .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
            a
        }
    };
    if mode == ArityMode::Triples && ids.len() % 3 != 0 {
        return Err(corrupt("triple body not a multiple of 3 ids".into()));
    }
    let expected: u64 = arities.iter().map(|&a| a as u64).sum();
    if expected != ids.len() as u64 {
        return Err(corrupt(format!(
            "arity sidecar expects {expected} ids, body has {}",
            ids.len()
        )));
    }

    let mut stmts = Vec::with_capacity(arities.len());
    let mut pos = 0usize;
    for &a in &arities {
        let tuple = ids[pos..pos + a as usize].iter().map(|&v| TermId(v)).collect();
        stmts.push(EncodedStatement { ids: tuple });
        pos += a as usize;
    }
    Ok((EncodedHeader { place_count, mode }, stmts))
}

/// Load one place's dictionary shard, validating the residue law, id
/// uniqueness, and journal (strictly increasing) order.
pub fn load_dictionary(
    path: &Path,
    expected_place: usize,
    place_count: usize,
) -> Result<(TermMap<TermId>, Option<u64>)> {
    let display = path.display().to_string();
    let corrupt = |line: u64, msg: String| Error::Corrupt {
        path: display.clone(),
        msg: format!("line {line}: {msg}"),
    };
    let file = File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let reader = BufReader::new(file);
    let mut map = TermMap::default();
    let mut max_id: Option<u64> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx as u64 + 1;
        let line = line.map_err(|e| Error::io(display.clone(), e))?;
        if line.is_empty() {
            continue;
        }
        let (id_str, term_str) = line
            .split_once('\t')
            .ok_or_else(|| corrupt(lineno, "missing TAB separator".into()))?;
        let id: u64 = id_str
            .parse()
            .map_err(|_| corrupt(lineno, format!("bad id {id_str:?}")))?;
        if id < place_count as u64 {
            return Err(corrupt(lineno, format!("reserved id {id} in dictionary")));
        }
        if id % place_count as u64 != expected_place as u64 {
            return Err(corrupt(
                lineno,
                format!(
                    "id {id} violates residue law for place {expected_place} (mod {place_count})"
                ),
            ));
        }
        if let Some(prev) = max_id {
            if id <= prev {
                return Err(corrupt(
                    lineno,
                    format!("id {id} not strictly increasing after {prev}"),
                ));
            }
        }
        let term = Term::new(term_str).map_err(|e| corrupt(lineno, e.to_string()))?;
        if map.insert(term, TermId(id)).is_some() {
            return Err(corrupt(lineno, format!("duplicate term {term_str:?}")));
        }
        max_id = Some(id);
    }
    Ok((map, max_id))
}

/// ratio = plain input bytes / (encoded bytes + dictionary bytes).
pub fn compute_compression_ratio(
    input_bytes_plain: u64,
    encoded_bytes: u64,
    dict_bytes: u64,
) -> Result<f64> {
    let denom = encoded_bytes + dict_bytes;
    if denom == 0 {
        return Err(Error::Config("empty output, ratio undefined".into()));
    }
    Ok(input_bytes_plain as f64 / denom as f64)
}

/// The manifest is the commit marker: absent or partial means the run's
/// outputs are invalid.
pub fn write_manifest(dir: &Path, place_count: usize, files: &[(String, u64)]) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let mut out = String::new();
    out.push_str("RDE1\n");
    out.push_str(&format!("places {place_count}\n"));
    for (name, bytes) in files {
        out.push_str(&format!("file {name} {bytes}\n"));
    }
    std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(dir: &Path) -> Result<(usize, Vec<(String, u64)>)> {
    let path = dir.join(MANIFEST_NAME);
    let display = path.display().to_string();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(display.clone(), e))?;
    let mut lines = text.lines();
    if lines.next() != Some("RDE1") {
        return Err(Error::Corrupt { path: display, msg: "bad manifest magic".into() });
    }
    let places_line = lines
        .next()
        .ok_or_else(|| Error::Corrupt { path: display.clone(), msg: "missing places line".into() })?;
    let place_count: usize = places_line
        .strip_prefix("places ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Corrupt { path: display.clone(), msg: "bad places line".into() })?;
    let mut files = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let rest = line.strip_prefix("file ").ok_or_else(|| Error::Corrupt {
            path: display.clone(),
            msg: format!("bad manifest line {line:?}"),
        })?;
        let (name, bytes) = rest.rsplit_once(' ').ok_or_else(|| Error::Corrupt {
            path: display.clone(),
            msg: format!("bad manifest line {line:?}"),
        })?;
        let bytes: u64 = bytes.parse().map_err(|_| Error::Corrupt {
            path: display.clone(),
            msg: format!("bad byte count in {line:?}"),
        })?;
        files.push((name.to_string(), bytes));
    }
    Ok((place_count, files))
}
