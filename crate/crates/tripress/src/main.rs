//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (I/O, parse,
//! corruption), 3 internal consistency violation.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use tripress::error::{Error, Result};
use tripress::gen::{self, GenArity, GenConfig};
use tripress::metrics;
use tripress::oracle;
use tripress::orchestrator::{self, Backend, RunConfig, RunReport};
use tripress::parser;
use tripress::storage;

#[derive(Parser)]
#[command(
    name = "tripress",
    version,
    about = "Distributed dictionary encoding for RDF statement datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct EncodeArgs {
    /// Number of places (parallel dictionary partitions).
    #[arg(long, env = "TRIPRESS_PLACES", default_value_t = 1)]
    places: usize,
    /// Statements per chunk.
    #[arg(long, default_value_t = parser::DEFAULT_CHUNK_SIZE)]
    chunk_size: usize,
    /// Chunks each place processes per loop iteration.
    #[arg(long, default_value_t = 1)]
    chunks_per_loop: usize,
    /// Input files (.nt/.nq, optionally .gz).
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output directory for dictionaries, encoded data, and the report.
    #[arg(long = "out")]
    out: PathBuf,
    /// Host file: one address per line. Switches to the TCP backend.
    #[arg(long)]
    hosts: Option<PathBuf>,
    /// Gzip-compress output files.
    #[arg(long)]
    gzip_output: bool,
    /// Buffer outputs in memory, write files only at the end.
    #[arg(long)]
    in_memory: bool,
    /// Randomize chunk-to-place assignment with this seed.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Skip malformed lines instead of aborting.
    #[arg(long)]
    skip_bad: bool,
    /// Record per-place counters after every loop iteration.
    #[arg(long)]
    metrics_per_loop: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArityArg {
    Triples,
    Quads,
    Mixed,
}

#[derive(Subcommand)]
enum Command {
    /// Encode datasets from fresh, empty dictionaries.
    Encode(EncodeArgs),
    /// Encode new data on top of existing dictionaries, preserving ids.
    Update {
        /// Directory holding the dictionaries of a previous run.
        #[arg(long)]
        dict: PathBuf,
        #[command(flatten)]
        args: EncodeArgs,
    },
    /// Replay the input as small batches against existing dictionaries,
    /// reporting per-batch latency.
    Txn {
        #[arg(long)]
        dict: PathBuf,
        /// Statements per batch.
        #[arg(long)]
        batch_size: usize,
        /// Number of batches to replay (input permitting).
        #[arg(long)]
        batches: usize,
        #[command(flatten)]
        args: EncodeArgs,
    },
    /// Decode a finished run back to N-Triples/N-Quads on stdout.
    Decode {
        /// Run directory (with MANIFEST).
        dir: PathBuf,
        /// Write to this file instead of stdout.
        #[arg(long = "out")]
        out: Option<PathBuf>,
    },
    /// Check a finished run's global consistency invariants.
    Verify {
        /// Run directory (with MANIFEST).
        dir: PathBuf,
    },
    /// Generate a deterministic synthetic dataset with Zipf-skewed terms.
    Gen {
        #[arg(long)]
        statements: u64,
        #[arg(long)]
        distinct_terms: u64,
        /// Zipf exponent (0 = uniform).
        #[arg(long, default_value_t = 1.0)]
        zipf: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ArityArg::Triples)]
        arity: ArityArg,
        #[arg(long, default_value_t = 32)]
        mean_term_len: usize,
        #[arg(long = "out")]
        out: PathBuf,
    },
    /// Print the report of a finished run in human-readable form.
    Stats {
        /// Run directory (with report.json).
        dir: PathBuf,
    },
    /// Encode the same input at several place counts and print a
    /// runtime-vs-places table.
    Bench {
        /// Comma-separated place counts, e.g. 1,2,4,8.
        #[arg(long, value_delimiter = ',')]
        places_list: Vec<usize>,
        #[command(flatten)]
        args: EncodeArgs,
    },
    /// Sequential single-dictionary baseline encoder (oracle).
    OracleEncode {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long = "out")]
        out: PathBuf,
    },
}

fn backend_from_hosts(hosts: &Option<PathBuf>) -> Result<Backend> {
    let Some(path) = hosts else {
        return Ok(Backend::InProcess);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let host = line.split(':').next().unwrap_or(line);
        if !matches!(host, "localhost" | "127.0.0.1" | "::1") {
            return Err(Error::Config(format!(
                "host {host:?} is not loopback; this build runs all places \
                 on one machine (use loopback entries to exercise TCP)"
            )));
        }
    }
    Ok(Backend::TcpLoopback)
}

fn run_config(args: &EncodeArgs) -> Result<RunConfig> {
    Ok(RunConfig {
        place_count: args.places,
        chunk_size: args.chunk_size,
        chunks_per_loop: args.chunks_per_loop,
        input_paths: args.inputs.clone(),
        output_dir: args.out.clone(),
        backend: backend_from_hosts(&args.hosts)?,
        in_memory: args.in_memory,
        gzip_output: args.gzip_output,
        shuffle_seed: args.shuffle_seed,
        skip_bad: args.skip_bad,
        metrics_per_loop: args.metrics_per_loop,
    })
}

fn print_report(report: &RunReport) {
    println!(
        "{} statements in {:.3}s ({:.1} MB/s, {:.0} stmts/s)",
        report.statements,
        report.runtime_secs,
        report.rate_mb_per_sec,
        report.statements_per_sec
    );
    println!(
        "places {} | loops {} | chunks {} | new terms {} | dict entries {}",
        report.config.places,
        report.loop_iterations,
        report.chunks,
        report.distinct_new_terms,
        report.dictionary_entries
    );
    match report.compression_ratio {
        Some(r) => println!(
            "input {} B -> encoded {} B + dict {} B (ratio {:.2})",
            report.input_plain_bytes, report.encoded_bytes, report.dict_bytes, r
        ),
        None => println!("input {} B, empty output", report.input_plain_bytes),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Encode(args) => {
            let report = orchestrator::run_encoding(&run_config(&args)?)?;
            print_report(&report);
        }
        Command::Update { dict, args } => {
            let report = orchestrator::run_update(&run_config(&args)?, &dict)?;
            print_report(&report);
        }
        Command::Txn { dict, batch_size, batches, args } => {
            if batch_size == 0 || batches == 0 {
                return Err(Error::Config(
                    "--batch-size and --batches must be >= 1".into(),
                ));
            }
            let all = parser::read_all(&args.inputs, args.skip_bad)?;
            let batch_vec: Vec<Vec<_>> = all
                .chunks(batch_size)
                .take(batches)
                .map(|c| c.to_vec())
                .collect();
            let (report, txn) =
                orchestrator::run_transactional(&run_config(&args)?, &dict, batch_vec)?;
            println!("batch  statements  seconds");
            for (i, b) in txn.batches.iter().enumerate() {
                println!("{i:>5}  {:>10}  {:.6}", b.statements, b.secs);
            }
            print_report(&report);
        }
        Command::Decode { dir, out } => {
            let places = oracle::decode_run(&dir)?;
            let mut text = String::new();
            for stmts in places {
                for s in stmts {
                    text.push_str(&s.serialize());
                    text.push('\n');
                }
            }
            match out {
                Some(path) => std::fs::write(&path, text)
                    .map_err(|e| Error::io(path.display().to_string(), e))?,
                None => print!("{text}"),
            }
        }
        Command::Verify { dir } => {
            let report = oracle::check_consistency(&dir)?;
            println!(
                "{} places, {} dictionary entries, {} encoded statements",
                report.places, report.dictionary_entries, report.encoded_statements
            );
            if report.is_consistent() {
                println!("consistent: no violations");
            } else {
                for v in &report.violations {
                    eprintln!("violation: {v}");
                }
                return Err(Error::Consistency(format!(
                    "{} violation(s) found",
                    report.violations.len()
                )));
            }
        }
        Command::Gen {
            statements,
            distinct_terms,
            zipf,
            seed,
            arity,
            mean_term_len,
            out,
        } => {
            let cfg = GenConfig {
                statements,
                distinct_terms,
                zipf_exponent: zipf,
                seed,
                arity: match arity {
                    ArityArg::Triples => GenArity::Triples,
                    ArityArg::Quads => GenArity::Quads,
                    ArityArg::Mixed => GenArity::Mixed,
                },
                mean_term_len,
            };
            let sc = gen::generate(&cfg, &out)?;
            println!(
                "wrote {} statements ({} B, {} distinct terms) to {}",
                sc.statements,
                sc.plain_bytes,
                sc.distinct_terms,
                out.display()
            );
        }
        Command::Stats { dir } => {
            let path = dir.join(storage::REPORT_NAME);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let report: RunReport = serde_json::from_str(&text).map_err(|e| {
                Error::Corrupt { path: path.display().to_string(), msg: e.to_string() }
            })?;
            print_report(&report);
            println!();
            print!("{}", metrics::format_table(&report.load));
        }
        Command::Bench { places_list, args } => {
            if places_list.is_empty() {
                return Err(Error::Config("--places-list must not be empty".into()));
            }
            println!("places  seconds     MB/s  stmts/s");
            for places in places_list {
                let mut cfg = run_config(&args)?;
                cfg.place_count = places;
                cfg.output_dir = args.out.join(format!("p{places}"));
                let report = orchestrator::run_encoding(&cfg)?;
                println!(
                    "{places:>6}  {:>7.3}  {:>7.1}  {:>7.0}",
                    report.runtime_secs, report.rate_mb_per_sec, report.statements_per_sec
                );
            }
        }
        Command::OracleEncode { inputs, out } => {
            let all = parser::read_all(&inputs, false)?;
            let enc = oracle::sequential_encode(&all);
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            let mut entries: Vec<(&u64, String)> = enc
                .dictionary
                .iter()
                .map(|(t, id)| (id, t.as_str().to_string()))
                .collect();
            entries.sort();
            let dict: String = entries
                .iter()
                .map(|(id, t)| format!("{id}\t{t}\n"))
                .collect();
            let dict_path = out.join("oracle-dict.tsv");
            std::fs::write(&dict_path, dict)
                .map_err(|e| Error::io(dict_path.display().to_string(), e))?;
            let ids: String = enc
                .ids
                .iter()
                .map(|tuple| {
                    tuple
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(" ")
                        + "\n"
                })
                .collect();
            let ids_path = out.join("oracle-ids.txt");
            std::fs::write(&ids_path, ids)
                .map_err(|e| Error::io(ids_path.display().to_string(), e))?;
            println!(
                "{} statements, {} distinct terms",
                enc.ids.len(),
                enc.dictionary.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 by default; usage problems are exit 1 here.
            let is_usage = !matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
