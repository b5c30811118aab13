//! Drives a whole run: place setup, chunk assignment and loop structure,
//! phase barriers, incremental update, and the transactional mode.
//!
//! One worker thread per place. Each loop iteration covers up to
//! `P * chunks_per_loop` chunks and runs four phases, globally
//! synchronized: (1) parse + filter/collect, (2) all-to-all term push,
//! (3) encode owned terms + pull ids back, (4) merge mappings, compress
//! statements, write output. Place-local buffers are reused across
//! iterations, bounding memory by the per-iteration chunk volume.
//!
//! Determinism: chunk assignment is round-robin by ordinal (optionally
//! shuffled with a fixed seed), and every place consumes incoming groups
//! in origin order 0..P-1, so two runs with identical config produce
//! byte-identical dictionaries and encoded files.

use crate::error::{Error, Result};
use crate::metrics::{self, LoadReport, MetricCounters};
use crate::parser::{Chunk, RawChunk, RawChunkStream};
use crate::place::PlaceState;
use crate::storage::{
    self, ArityMode, DictWriter, EncodedWriter, MANIFEST_NAME, REPORT_NAME,
};
use crate::term::Statement;
use crate::transport::{InProcessTransport, TcpTransport, Transport};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{Receiver, SyncSender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

/// Message-exchange backend selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    InProcess,
    /// Real TCP sockets over loopback, all places in this process.
    TcpLoopback,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub place_count: usize,
    pub chunk_size: usize,
    pub chunks_per_loop: usize,
    pub input_paths: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub backend: Backend,
    /// Buffer outputs in memory, writing files only at the end.
    pub in_memory: bool,
    /// Gzip-compress output files (adds a `.gz` suffix).
    pub gzip_output: bool,
    /// Randomize chunk-to-place assignment deterministically.
    pub shuffle_seed: Option<u64>,
    pub skip_bad: bool,
    /// Record a per-place counter snapshot after every loop iteration.
    pub metrics_per_loop: bool,
}

impl RunConfig {
    pub fn new(
        place_count: usize,
        input_paths: Vec<PathBuf>,
        output_dir: PathBuf,
    ) -> RunConfig {
        RunConfig {
            place_count,
            chunk_size: crate::parser::DEFAULT_CHUNK_SIZE,
            chunks_per_loop: 1,
            input_paths,
            output_dir,
            backend: Backend::InProcess,
            in_memory: false,
            gzip_output: false,
            shuffle_seed: None,
            skip_bad: false,
            metrics_per_loop: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.place_count == 0 {
            return Err(Error::Config("--places must be >= 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("--chunk-size must be >= 1".into()));
        }
        if self.chunks_per_loop == 0 {
            return Err(Error::Config("--chunks-per-loop must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub places: usize,
    pub chunk_size: usize,
    pub chunks_per_loop: usize,
    pub mode: String,
    pub backend: String,
    pub inputs: Vec<String>,
    pub in_memory: bool,
    pub gzip_output: bool,
    pub shuffle_seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub statements: u64,
    pub skipped_lines: u64,
    pub chunks: u64,
    pub loop_iterations: u64,
    /// New mappings created during this run (= misses summed over places).
    pub distinct_new_terms: u64,
    /// Total entries across all dictionary shards after the run.
    pub dictionary_entries: u64,
    pub input_plain_bytes: u64,
    /// Plain (pre-gzip) output sizes.
    pub encoded_bytes: u64,
    pub dict_bytes: u64,
    pub compression_ratio: Option<f64>,
    pub runtime_secs: f64,
    pub rate_mb_per_sec: f64,
    pub statements_per_sec: f64,
    pub per_place: Vec<MetricCounters>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_loop: Option<Vec<Vec<MetricCounters>>>,
    pub load: LoadReport,
    pub files: Vec<FileEntry>,
}

/// Latency record for one transactional batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchStat {
    pub statements: u64,
    pub secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TxnReport {
    pub batches: Vec<BatchStat>,
}

/// Barrier that can be poisoned so a failing place unblocks its peers.
struct PhaseBarrier {
    parties: usize,
    state: Mutex<BarrierState>,
    cond: Condvar,
}

#[derive(Default)]
struct BarrierState {
    waiting: usize,
    generation: u64,
    poisoned: Option<String>,
}

impl PhaseBarrier {
    fn new(parties: usize) -> PhaseBarrier {
        PhaseBarrier {
            parties,
            state: Mutex::new(BarrierState::default()),
            cond: Condvar::new(),
        }
    }

    fn wait(&self) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        if let Some(reason) = &st.poisoned {
            return Err(Error::Aborted(reason.clone()));
        }
        st.waiting += 1;
        if st.waiting == self.parties {
            st.waiting = 0;
            st.generation += 1;
            self.cond.notify_all();
            return Ok(());
        }
        let gen = st.generation;
        loop {
            st = self.cond.wait(st).unwrap();
            if let Some(reason) = &st.poisoned {
                return Err(Error::Aborted(reason.clone()));
            }
            if st.generation != gen {
                return Ok(());
            }
        }
    }

    fn poison(&self, reason: &str) {
        let mut st = self.state.lock().unwrap();
        if st.poisoned.is_none() {
            st.poisoned = Some(reason.to_string());
        }
        self.cond.notify_all();
    }
}

/// Work unit handed to a place for one loop iteration.
enum ChunkInput {
    Raw(RawChunk),
    Parsed(Chunk),
}

enum WorkerCmd {
    Iteration { ordinal: u64, chunks: Vec<ChunkInput> },
    Finish,
}

struct WorkerOut {
    metrics: MetricCounters,
    per_loop: Vec<MetricCounters>,
    dict_entries: u64,
    skipped: u64,
    dict_writer: DictWriter,
    data_writer: EncodedWriter,
}

struct Worker {
    state: PlaceState,
    transport: Arc<dyn Transport>,
    barrier: Arc<PhaseBarrier>,
    dict_writer: DictWriter,
    data_writer: EncodedWriter,
    skip_bad: bool,
    metrics_per_loop: bool,
    per_loop: Vec<MetricCounters>,
    skipped: u64,
    /// Place 0 reports iteration completion times here.
    done_tx: Option<std::sync::mpsc::Sender<u64>>,
}

impl Worker {
    fn run_iteration(&mut self, ordinal: u64, chunks: Vec<ChunkInput>) -> Result<()> {
        let place = self.state.place_index;
        self.state.begin_iteration();

        // Phase 1: parse + filter/collect.
        let t = Instant::now();
        for input in chunks {
            let chunk = match input {
                ChunkInput::Raw(raw) => raw.parse(self.skip_bad)?,
                ChunkInput::Parsed(c) => c,
            };
            self.skipped += chunk.skipped;
            self.state.filter_and_collect(&chunk);
        }
        self.state.metrics.phase_secs[0] += t.elapsed().as_secs_f64();
        self.barrier.wait()?;

        // Phase 2: all-to-all push of unique term groups.
        let t = Instant::now();
        for msg in self.state.outgoing_messages(ordinal) {
            self.transport.send_terms(msg)?;
        }
        self.state.metrics.phase_secs[1] += t.elapsed().as_secs_f64();

        // Phase 3: encode incoming groups in origin order, stream new
        // mappings to the dictionary journal, send ids back.
        let t = Instant::now();
        let incoming = self.transport.recv_terms(place, ordinal)?;
        for msg in &incoming {
            self.state.metrics.received_bytes += msg.payload_bytes();
            let reply = self.state.encode_owned_terms(msg)?;
            for (id, term) in self.state.drain_journal() {
                self.dict_writer.append_mapping(id, &term)?;
            }
            self.transport.send_ids(reply)?;
        }
        self.state.metrics.phase_secs[2] += t.elapsed().as_secs_f64();

        // Phase 4: pull ids, merge, compress, write out.
        let t = Instant::now();
        let replies = self.transport.recv_ids(place, ordinal)?;
        for reply in &replies {
            self.state.store_pulled_ids(reply)?;
        }
        let table = self.state.merge_mappings()?;
        let encoded = self.state.compress_statements(&table)?;
        for stmt in &encoded {
            self.data_writer.write_encoded(stmt)?;
        }
        drop(table);
        self.state.metrics.phase_secs[3] += t.elapsed().as_secs_f64();

        self.barrier.wait()?;
        if let Some(tx) = &self.done_tx {
            let _ = tx.send(ordinal);
        }
        if self.metrics_per_loop {
            self.per_loop.push(self.state.metrics.clone());
        }
        Ok(())
    }

    fn run(mut self, cmds: Receiver<WorkerCmd>) -> Result<WorkerOut> {
        loop {
            let cmd = match cmds.recv() {
                Ok(cmd) => cmd,
                // Orchestrator hung up early; unwind quietly.
                Err(_) => return Err(Error::Aborted("orchestrator stopped".into())),
            };
            match cmd {
                WorkerCmd::Iteration { ordinal, chunks } => {
                    if let Err(e) = self.run_iteration(ordinal, chunks) {
                        self.barrier.poison(&e.to_string());
                        self.transport.abort(&e.to_string());
                        return Err(e);
                    }
                }
                WorkerCmd::Finish => break,
            }
        }
        Ok(WorkerOut {
            metrics: self.state.metrics.clone(),
            per_loop: std::mem::take(&mut self.per_loop),
            dict_entries: self.state.dict.len() as u64,
            skipped: self.skipped,
            dict_writer: self.dict_writer,
            data_writer: self.data_writer,
        })
    }
}

fn make_transport(backend: Backend, places: usize) -> Result<Arc<dyn Transport>> {
    Ok(match backend {
        Backend::InProcess => InProcessTransport::new(places)?,
        Backend::TcpLoopback => TcpTransport::bind_loopback(places)?,
    })
}

/// Shared machinery behind the fresh / update / transactional entry points.
struct Engine {
    config: RunConfig,
    cmd_txs: Vec<SyncSender<WorkerCmd>>,
    handles: Vec<std::thread::JoinHandle<Result<WorkerOut>>>,
    done_rx: Receiver<u64>,
    next_ordinal: u64,
    mode: &'static str,
}

impl Engine {
    fn start(
        config: &RunConfig,
        existing_dict_dir: Option<&Path>,
        mode: &'static str,
    ) -> Result<Engine> {
        config.validate()?;
        let places = config.place_count;
        std::fs::create_dir_all(&config.output_dir)
            .map_err(|e| Error::io(config.output_dir.display().to_string(), e))?;
        // A stale manifest must not validate a partial re-run.
        let manifest = config.output_dir.join(MANIFEST_NAME);
        if manifest.exists() {
            std::fs::remove_file(&manifest)
                .map_err(|e| Error::io(manifest.display().to_string(), e))?;
        }

        let transport = make_transport(config.backend, places)?;
        let barrier = Arc::new(PhaseBarrier::new(places));
        let (done_tx, done_rx) = std::sync::mpsc::channel();

        let mut cmd_txs = Vec::with_capacity(places);
        let mut handles = Vec::with_capacity(places);
        for place in 0..places {
            let mut dict_writer =
                DictWriter::create(&config.output_dir, place, config.in_memory)?;
            let state = match existing_dict_dir {
                None => PlaceState::new(place, places)?,
                Some(dir) => {
                    let path = dir.join(storage::dict_file_name(place));
                    if !path.exists() {
                        return Err(Error::Config(format!(
                            "dictionary shard {} missing; place-count mismatch?",
                            path.display()
                        )));
                    }
                    let (dict, max_id) = storage::load_dictionary(&path, place, places)?;
                    // Seed the output shard so the run directory is
                    // self-contained.
                    let raw = std::fs::read(&path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    dict_writer.append_raw(&raw)?;
                    PlaceState::with_dictionary(place, places, dict, max_id)?
                }
            };
            let data_writer =
                EncodedWriter::create(&config.output_dir, place, places, config.in_memory)?;
            let worker = Worker {
                state,
                transport: Arc::clone(&transport),
                barrier: Arc::clone(&barrier),
                dict_writer,
                data_writer,
                skip_bad: config.skip_bad,
                metrics_per_loop: config.metrics_per_loop,
                per_loop: Vec::new(),
                skipped: 0,
                done_tx: (place == 0).then(|| done_tx.clone()),
            };
            // Bound of 1: at most one iteration queued ahead per place.
            let (tx, rx) = std::sync::mpsc::sync_channel(1);
            cmd_txs.push(tx);
            handles.push(
                std::thread::Builder::new()
                    .name(format!("place-{place}"))
                    .spawn(move || worker.run(rx))
                    .map_err(|e| Error::Config(format!("cannot spawn worker: {e}")))?,
            );
        }
        drop(done_tx);
        Ok(Engine {
            config: config.clone(),
            cmd_txs,
            handles,
            done_rx,
            next_ordinal: 0,
            mode,
        })
    }

    /// Dispatch one loop iteration. `chunks[i]` goes to place
    /// `order[i] mod P` where `order` is identity or a seeded shuffle.
    fn dispatch_iteration(&mut self, chunks: Vec<ChunkInput>) -> Result<u64> {
        let places = self.config.place_count;
        let mut per_place: Vec<Vec<ChunkInput>> = (0..places).map(|_| Vec::new()).collect();
        let mut slots: Vec<usize> = (0..chunks.len()).collect();
        if let Some(seed) = self.config.shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.next_ordinal);
            slots.shuffle(&mut rng);
        }
        for (chunk, slot) in chunks.into_iter().zip(slots) {
            per_place[slot % places].push(chunk);
        }
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        for (place, batch) in per_place.into_iter().enumerate() {
            if self.cmd_txs[place]
                .send(WorkerCmd::Iteration { ordinal, chunks: batch })
                .is_err()
            {
                // Worker died; surface its error through finish().
                return Err(Error::Aborted("a place failed".into()));
            }
        }
        Ok(ordinal)
    }

    /// Wait until place 0 confirms the given iteration completed.
    fn wait_iteration(&self, ordinal: u64) -> Result<()> {
        loop {
            match self.done_rx.recv() {
                Ok(done) if done >= ordinal => return Ok(()),
                Ok(_) => continue,
                Err(_) => return Err(Error::Aborted("a place failed".into())),
            }
        }
    }

    /// Stop workers and discard their output without committing the run:
    /// no files are finalized and no report or manifest is written. Returns
    /// the most specific worker error, if any, so callers can surface the
    /// root cause instead of a generic abort.
    fn abort(self) -> Option<Error> {
        for tx in &self.cmd_txs {
            let _ = tx.send(WorkerCmd::Finish);
        }
        drop(self.cmd_txs);
        let mut first_error: Option<Error> = None;
        for handle in self.handles {
            match handle.join() {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => {
                    let aborted = matches!(e, Error::Aborted(_));
                    if first_error.is_none()
                        || (!aborted && matches!(first_error, Some(Error::Aborted(_))))
                    {
                        first_error = Some(e);
                    }
                }
                Err(_) => {
                    first_error
                        .get_or_insert_with(|| Error::Aborted("worker panicked".into()));
                }
            }
        }
        first_error
    }

    /// Stop workers, collect results, finalize files, write report and
    /// manifest.
    fn finish(
        self,
        input_plain_bytes: u64,
        chunks: u64,
        started: Instant,
        txn: Option<TxnReport>,
    ) -> Result<RunReport> {
        for tx in &self.cmd_txs {
            let _ = tx.send(WorkerCmd::Finish);
        }
        drop(self.cmd_txs);
        let mut outs = Vec::with_capacity(self.handles.len());
        let mut first_error: Option<Error> = None;
        for handle in self.handles {
            match handle.join() {
                Ok(Ok(out)) => outs.push(out),
                Ok(Err(e)) => {
                    let aborted = matches!(e, Error::Aborted(_));
                    if first_error.is_none()
                        || (!aborted && matches!(first_error, Some(Error::Aborted(_))))
                    {
                        first_error = Some(e);
                    }
                }
                Err(_) => {
                    first_error
                        .get_or_insert_with(|| Error::Aborted("worker panicked".into()));
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }

        // Global arity mode: mixed only if the run actually mixed arities.
        let mut saw3 = false;
        let mut saw4 = false;
        for out in &outs {
            saw3 |= out.data_writer.arities().iter().any(|&a| a == 3);
            saw4 |= out.data_writer.arities().iter().any(|&a| a == 4);
        }
        let arity_mode = match (saw3, saw4) {
            (true, true) => ArityMode::Mixed,
            (false, true) => ArityMode::Quads,
            _ => ArityMode::Triples,
        };

        let places = self.config.place_count;
        let mut files = Vec::new();
        let mut encoded_bytes = 0u64;
        let mut dict_bytes = 0u64;
        let mut per_place = Vec::with_capacity(places);
        let mut per_loop: Vec<Vec<MetricCounters>> = Vec::new();
        let mut dictionary_entries = 0u64;
        let mut skipped_lines = 0u64;
        for (place, out) in outs.into_iter().enumerate() {
            per_place.push(out.metrics);
            dictionary_entries += out.dict_entries;
            skipped_lines += out.skipped;
            if self.config.metrics_per_loop {
                for (i, snap) in out.per_loop.into_iter().enumerate() {
                    if per_loop.len() <= i {
                        per_loop.push(Vec::new());
                    }
                    per_loop[i].push(snap);
                }
            }
            let dict_len = out.dict_writer.finalize()?;
            dict_bytes += dict_len;
            files.push(FileEntry { name: storage::dict_file_name(place), bytes: dict_len });
            let (data_len, arity_len) = out.data_writer.finalize(arity_mode)?;
            encoded_bytes += data_len + arity_len;
            files.push(FileEntry { name: storage::data_file_name(place), bytes: data_len });
            if arity_mode == ArityMode::Mixed {
                files.push(FileEntry {
                    name: storage::arity_file_name(place),
                    bytes: arity_len,
                });
            }
        }

        if self.config.gzip_output {
            for entry in &mut files {
                let plain = self.config.output_dir.join(&entry.name);
                let gz = gzip_file(&plain)?;
                entry.name.push_str(".gz");
                entry.bytes = gz;
            }
        }

        let statements: u64 = per_place.iter().map(|m| m.statements).sum();
        let runtime_secs = started.elapsed().as_secs_f64();
        let report = RunReport {
            config: ConfigEcho {
                places,
                chunk_size: self.config.chunk_size,
                chunks_per_loop: self.config.chunks_per_loop,
                mode: self.mode.to_string(),
                backend: match self.config.backend {
                    Backend::InProcess => "in-process".into(),
                    Backend::TcpLoopback => "tcp-loopback".into(),
                },
                inputs: self
                    .config
                    .input_paths
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect(),
                in_memory: self.config.in_memory,
                gzip_output: self.config.gzip_output,
                shuffle_seed: self.config.shuffle_seed,
            },
            statements,
            skipped_lines,
            chunks,
            loop_iterations: self.next_ordinal,
            distinct_new_terms: per_place.iter().map(|m| m.misses).sum(),
            dictionary_entries,
            input_plain_bytes,
            encoded_bytes,
            dict_bytes,
            compression_ratio: storage::compute_compression_ratio(
                input_plain_bytes,
                encoded_bytes,
                dict_bytes,
            )
            .ok(),
            runtime_secs,
            rate_mb_per_sec: if runtime_secs > 0.0 {
                input_plain_bytes as f64 / 1_000_000.0 / runtime_secs
            } else {
                0.0
            },
            statements_per_sec: if runtime_secs > 0.0 {
                statements as f64 / runtime_secs
            } else {
                0.0
            },
            per_place,
            per_loop: self.config.metrics_per_loop.then_some(per_loop),
            load: LoadReport::default(),
            files,
        };
        let mut report = report;
        report.load = metrics::aggregate(&report.per_place);

        let report_path = self.config.output_dir.join(REPORT_NAME);
        let json = serde_json::to_string_pretty(&ReportFile {
            report: &report,
            txn: txn.as_ref(),
        })
        .expect("report serializes");
        std::fs::write(&report_path, json)
            .map_err(|e| Error::io(report_path.display().to_string(), e))?;

        let manifest_files: Vec<(String, u64)> = report
            .files
            .iter()
            .map(|f| (f.name.clone(), f.bytes))
            .collect();
        storage::write_manifest(&self.config.output_dir, places, &manifest_files)?;
        Ok(report)
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a RunReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    txn: Option<&'a TxnReport>,
}

fn gzip_file(plain: &Path) -> Result<u64> {
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;
    let display = plain.display().to_string();
    let data = std::fs::read(plain).map_err(|e| Error::io(display.clone(), e))?;
    let gz_path = PathBuf::from(format!("{}.gz", plain.display()));
    let file = std::fs::File::create(&gz_path)
        .map_err(|e| Error::io(gz_path.display().to_string(), e))?;
    let mut enc = GzEncoder::new(file, Compression::default());
    enc.write_all(&data)
        .and_then(|_| enc.finish().map(|_| ()))
        .map_err(|e| Error::io(gz_path.display().to_string(), e))?;
    std::fs::remove_file(plain).map_err(|e| Error::io(display, e))?;
    std::fs::metadata(&gz_path)
        .map(|m| m.len())
        .map_err(|e| Error::io(gz_path.display().to_string(), e))
}

fn drive_stream(engine: &mut Engine, config: &RunConfig) -> Result<(u64, u64)> {
    let mut stream = RawChunkStream::new(&config.input_paths, config.chunk_size)?;
    let per_iteration = config.place_count * config.chunks_per_loop;
    let mut dispatch_error = None;
    'outer: loop {
        let mut batch: Vec<ChunkInput> = Vec::with_capacity(per_iteration);
        for _ in 0..per_iteration {
            match stream.next() {
                Some(Ok(chunk)) => batch.push(ChunkInput::Raw(chunk)),
                Some(Err(e)) => {
                    dispatch_error = Some(e);
                    break 'outer;
                }
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        if let Err(e) = engine.dispatch_iteration(batch) {
            dispatch_error = Some(e);
            break;
        }
    }
    match dispatch_error {
        // Reader/dispatch errors win over the induced worker aborts.
        Some(e) => Err(e),
        None => Ok((stream.bytes_read(), stream.chunks_emitted())),
    }
}

/// Encode from fresh, empty dictionaries.
pub fn run_encoding(config: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    let mut engine = Engine::start(config, None, "fresh")?;
    match drive_stream(&mut engine, config) {
        Ok((bytes, chunks)) => engine.finish(bytes, chunks, started, None),
        Err(e) => Err(abort_root_cause(engine, e)),
    }
}

/// On a failed run, tear the engine down without committing and pick the
/// most informative error: a concrete worker error beats the generic
/// "a place failed" abort that dispatch reports when a worker dies.
fn abort_root_cause(engine: Engine, driver_error: Error) -> Error {
    match engine.abort() {
        Some(worker_err)
            if matches!(driver_error, Error::Aborted(_))
                && !matches!(worker_err, Error::Aborted(_)) =>
        {
            worker_err
        }
        _ => driver_error,
    }
}

/// Encode new data against previously persisted dictionaries; shared terms
/// keep their ids.
pub fn run_update(config: &RunConfig, existing_dict_dir: &Path) -> Result<RunReport> {
    let started = Instant::now();
    check_dict_dir(existing_dict_dir, config.place_count)?;
    let mut engine = Engine::start(config, Some(existing_dict_dir), "update")?;
    match drive_stream(&mut engine, config) {
        Ok((bytes, chunks)) => engine.finish(bytes, chunks, started, None),
        Err(e) => Err(abort_root_cause(engine, e)),
    }
}

fn check_dict_dir(dir: &Path, places: usize) -> Result<()> {
    // Every shard 0..P must exist and no shard P.. may exist; anything else
    // means the dictionaries were built with a different place count.
    for place in 0..places {
        if !dir.join(storage::dict_file_name(place)).exists() {
            return Err(Error::Config(format!(
                "dictionary dir {} has no shard for place {place} (of {places})",
                dir.display()
            )));
        }
    }
    if dir.join(storage::dict_file_name(places)).exists() {
        return Err(Error::Config(format!(
            "dictionary dir {} has more shards than --places {places}",
            dir.display()
        )));
    }
    Ok(())
}

/// Encode a stream of small batches against loaded dictionaries, one
/// miniature loop iteration per batch, recording per-batch wall time.
pub fn run_transactional(
    config: &RunConfig,
    existing_dict_dir: &Path,
    batches: Vec<Vec<Statement>>,
) -> Result<(RunReport, TxnReport)> {
    let started = Instant::now();
    check_dict_dir(existing_dict_dir, config.place_count)?;
    let mut engine = Engine::start(config, Some(existing_dict_dir), "transactional")?;
    let mut stats = Vec::with_capacity(batches.len());
    let mut failure = None;
    for (i, batch) in batches.into_iter().enumerate() {
        let statements = batch.len() as u64;
        let chunks = split_batch(batch, config.chunk_size, i as u64);
        let t = Instant::now();
        let dispatched = engine
            .dispatch_iteration(chunks)
            .and_then(|ord| engine.wait_iteration(ord));
        if let Err(e) = dispatched {
            failure = Some(e);
            break;
        }
        stats.push(BatchStat { statements, secs: t.elapsed().as_secs_f64() });
    }
    let txn = TxnReport { batches: stats };
    match failure {
        Some(e) => Err(abort_root_cause(engine, e)),
        None => {
            let iterations = engine.next_ordinal;
            let report = engine.finish(0, iterations, started, Some(txn.clone()))?;
            Ok((report, txn))
        }
    }
}

fn split_batch(batch: Vec<Statement>, chunk_size: usize, batch_ordinal: u64) -> Vec<ChunkInput> {
    let mut chunks = Vec::new();
    let mut current = Vec::with_capacity(chunk_size.min(batch.len()));
    for stmt in batch {
        current.push(stmt);
        if current.len() == chunk_size {
            chunks.push(mk_parsed(std::mem::take(&mut current), batch_ordinal, chunks.len()));
        }
    }
    if !current.is_empty() || chunks.is_empty() {
        chunks.push(mk_parsed(current, batch_ordinal, chunks.len()));
    }
    chunks
}

fn mk_parsed(statements: Vec<Statement>, batch_ordinal: u64, idx: usize) -> ChunkInput {
    ChunkInput::Parsed(Chunk {
        statements,
        source_label: format!("txn-batch-{batch_ordinal}"),
        ordinal: idx as u64,
        skipped: 0,
    })
}

/// Pool every dictionary shard of a finished run into one id -> term map.
pub fn pooled_dictionary(
    dir: &Path,
) -> Result<(usize, HashMap<crate::term::TermId, crate::term::Term>)> {
    let (places, _) = storage::read_manifest(dir)?;
    let mut pooled = HashMap::new();
    for place in 0..places {
        let path = dir.join(storage::dict_file_name(place));
        let (map, _) = storage::load_dictionary(&path, place, places)?;
        for (term, id) in map {
            pooled.insert(id, term);
        }
    }
    Ok((places, pooled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::Term;

    fn write_dataset(dir: &Path, n: usize, distinct: usize) -> PathBuf {
        let path = dir.join("d.nt");
        let mut body = String::new();
        for i in 0..n {
            body.push_str(&format!(
                "<http://s/{}> <http://p/{}> <http://o/{}> .\n",
                i % distinct,
                i % 7,
                (i * 13) % distinct
            ));
        }
        std::fs::write(&path, body).unwrap();
        path
    }

    fn base_config(input: PathBuf, out: PathBuf, places: usize) -> RunConfig {
        let mut c = RunConfig::new(places, vec![input], out);
        c.chunk_size = 100;
        c
    }

    #[test]
    fn loop_count_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_dataset(dir.path(), 800, 50);
        // 8 chunks of 100, P=4, c=1 -> 2 iterations.
        let cfg = base_config(input.clone(), dir.path().join("o1"), 4);
        let report = run_encoding(&cfg).unwrap();
        assert_eq!(report.chunks, 8);
        assert_eq!(report.loop_iterations, 2);
        assert_eq!(report.statements, 800);

        // c=10 clamps to available chunks -> 1 iteration.
        let mut cfg = base_config(input, dir.path().join("o2"), 4);
        cfg.chunks_per_loop = 10;
        let report = run_encoding(&cfg).unwrap();
        assert_eq!(report.loop_iterations, 1);
    }

    #[test]
    fn totals_match_input() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_dataset(dir.path(), 500, 40);
        let cfg = base_config(input.clone(), dir.path().join("out"), 3);
        let report = run_encoding(&cfg).unwrap();
        assert_eq!(report.statements, 500);
        // Fresh run: sum of misses = distinct terms.
        let all = crate::parser::read_all(&[input], false).unwrap();
        let distinct: std::collections::HashSet<&Term> =
            all.iter().flat_map(|s| s.terms()).collect();
        assert_eq!(report.distinct_new_terms, distinct.len() as u64);
        assert_eq!(report.dictionary_entries, distinct.len() as u64);
        assert!(dir.path().join("out").join(MANIFEST_NAME).exists());
        assert!(dir.path().join("out").join(REPORT_NAME).exists());
    }

    #[test]
    fn determinism_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_dataset(dir.path(), 300, 30);
        for out in ["a", "b"] {
            let mut cfg = base_config(input.clone(), dir.path().join(out), 4);
            cfg.shuffle_seed = Some(7);
            run_encoding(&cfg).unwrap();
        }
        for place in 0..4 {
            for name in [storage::dict_file_name(place), storage::data_file_name(place)] {
                let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
                let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
                assert_eq!(a, b, "{name} differs between runs");
            }
        }
    }

    #[test]
    fn parse_error_aborts_without_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nt");
        std::fs::write(&path, "<a> <b> <c> .\nnot a statement\n").unwrap();
        let cfg = base_config(path, dir.path().join("out"), 2);
        let err = run_encoding(&cfg).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err}");
        assert!(!dir.path().join("out").join(MANIFEST_NAME).exists());
    }

    #[test]
    fn missing_input_aborts_without_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(dir.path().join("no-such.nt"), dir.path().join("out"), 2);
        let err = run_encoding(&cfg).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "got {err}");
        assert!(!dir.path().join("out").join(MANIFEST_NAME).exists());
        assert!(!dir.path().join("out").join(REPORT_NAME).exists());
    }

    #[test]
    fn update_empty_input_keeps_dictionaries() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_dataset(dir.path(), 200, 20);
        let cfg = base_config(input, dir.path().join("base"), 2);
        let base = run_encoding(&cfg).unwrap();

        let empty = dir.path().join("empty.nt");
        std::fs::write(&empty, "").unwrap();
        let cfg2 = base_config(empty, dir.path().join("upd"), 2);
        let upd = run_update(&cfg2, &dir.path().join("base")).unwrap();
        assert_eq!(upd.statements, 0);
        assert_eq!(upd.distinct_new_terms, 0);
        assert_eq!(upd.dictionary_entries, base.dictionary_entries);
        // Output shards carry the loaded entries forward unchanged.
        for p in 0..2 {
            let a = std::fs::read(dir.path().join("base").join(storage::dict_file_name(p)))
                .unwrap();
            let b = std::fs::read(dir.path().join("upd").join(storage::dict_file_name(p)))
                .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn update_place_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_dataset(dir.path(), 100, 10);
        let cfg = base_config(input.clone(), dir.path().join("base"), 2);
        run_encoding(&cfg).unwrap();
        let cfg2 = base_config(input, dir.path().join("upd"), 4);
        assert!(matches!(
            run_update(&cfg2, &dir.path().join("base")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transactional_batches_record_latency() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_dataset(dir.path(), 300, 30);
        let cfg = base_config(input.clone(), dir.path().join("base"), 2);
        run_encoding(&cfg).unwrap();

        let all = crate::parser::read_all(&[input], false).unwrap();
        let batches: Vec<Vec<Statement>> =
            vec![all[0..50].to_vec(), vec![], all[50..100].to_vec()];
        let cfg2 = base_config(dir.path().join("unused.nt"), dir.path().join("txn"), 2);
        let mut cfg2 = cfg2;
        cfg2.input_paths = vec![];
        let (report, txn) = run_transactional(&cfg2, &dir.path().join("base"), batches).unwrap();
        assert_eq!(txn.batches.len(), 3);
        assert_eq!(txn.batches[1].statements, 0);
        assert!(txn.batches.iter().all(|b| b.secs >= 0.0));
        // All terms were already in the base dictionaries.
        assert_eq!(report.distinct_new_terms, 0);
    }

    #[test]
    fn tcp_backend_matches_in_process() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_dataset(dir.path(), 400, 60);
        let mut a = base_config(input.clone(), dir.path().join("ip"), 3);
        a.backend = Backend::InProcess;
        run_encoding(&a).unwrap();
        let mut b = base_config(input, dir.path().join("tcp"), 3);
        b.backend = Backend::TcpLoopback;
        run_encoding(&b).unwrap();
        for place in 0..3 {
            for name in [storage::dict_file_name(place), storage::data_file_name(place)] {
                let x = std::fs::read(dir.path().join("ip").join(&name)).unwrap();
                let y = std::fs::read(dir.path().join("tcp").join(&name)).unwrap();
                assert_eq!(x, y, "{name} differs between backends");
            }
        }
    }

    #[test]
    fn gzip_output_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let input = write_dataset(dir.path(), 100, 10);
        let mut cfg = base_config(input, dir.path().join("out"), 2);
        cfg.gzip_output = true;
        let report = run_encoding(&cfg).unwrap();
        assert!(report.files.iter().all(|f| f.name.ends_with(".gz")));
        assert!(dir.path().join("out").join("dict-0.tsv.gz").exists());
        assert!(!dir.path().join("out").join("dict-0.tsv").exists());
    }
}
