mod crash;
mod input;
mod report;

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tuplecompact::datagen::{random_script, Corpus};
use tuplecompact::lsm::{Dataset, EngineConfig, EngineError, FaultInjector, Key};
use tuplecompact::query::{execute, plan, QuerySpec};
use tuplecompact::Doc;

#[derive(Parser)]
#[command(name = "tcdb", version, about = "LSM document store with schema inference and record compaction")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Directory holding datasets, one subdirectory each.
    #[arg(long, global = true, default_value = "tcdb-data")]
    data_dir: PathBuf,
    /// Partition count (create only).
    #[arg(long, global = true)]
    partitions: Option<usize>,
    /// Page compression codec, or `off` (create only).
    #[arg(long, global = true)]
    compression: Option<String>,
    /// Field-access consolidation at the scan.
    #[arg(long, global = true, value_enum, default_value_t = OnOff::On)]
    pushdown: OnOff,
    /// In-memory component budget before a flush.
    #[arg(long, global = true)]
    memtable_bytes: Option<usize>,
    /// Merge policy: largest merged component in bytes.
    #[arg(long, global = true)]
    merge_max_bytes: Option<u64>,
    /// Merge policy: component count that triggers a merge.
    #[arg(long, global = true)]
    merge_tolerable_count: Option<usize>,
    /// Seed for generators and randomized crash points.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct Feed {
    /// Dataset name.
    dataset: String,
    /// NDJSON input; `-` or omitted reads stdin.
    input: Option<PathBuf>,
    /// Report malformed lines and continue instead of stopping.
    #[arg(long)]
    skip_malformed: bool,
    /// Flush the in-memory component when done.
    #[arg(long)]
    flush: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Create a dataset.
    Create {
        dataset: String,
        #[arg(long, default_value = "id")]
        primary_key: String,
        /// Store records with inline field names, without inference.
        #[arg(long)]
        no_compactor: bool,
        /// Reject inserts of existing keys.
        #[arg(long)]
        strict_insert: bool,
    },
    /// Insert documents through the write path.
    Ingest(Feed),
    /// Bulk-load documents into one component per partition.
    Load {
        dataset: String,
        input: Option<PathBuf>,
        #[arg(long)]
        skip_malformed: bool,
    },
    /// Delete keys: each line is a key value or a document holding one.
    Delete(Feed),
    /// Insert or replace documents.
    Upsert(Feed),
    /// Run a query description and print result rows as NDJSON.
    Query {
        dataset: String,
        plan: PathBuf,
        /// Print execution counters to stderr.
        #[arg(long)]
        stats: bool,
    },
    /// Storage sizes of the live records under four encodings.
    Stats {
        dataset: String,
        /// NDJSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Replay an operation script in child processes killed at crash points.
    CrashTest {
        /// NDJSON operation script, as written by `gen script`.
        script: PathBuf,
        /// Crash points as site-hit numbers, comma separated.
        #[arg(long, value_delimiter = ',')]
        at: Vec<u64>,
        /// Number of random crash points.
        #[arg(long, default_value_t = 0)]
        random: usize,
        /// Keep the per-point dataset directories.
        #[arg(long)]
        keep: bool,
    },
    #[command(hide = true)]
    CrashChild {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        hit: u64,
    },
    /// Generate synthetic NDJSON.
    Gen {
        #[command(subcommand)]
        what: Gen,
    },
}

#[derive(Subcommand)]
enum Gen {
    /// Documents from a corpus: tweets, publications, sensors or random.
    Docs {
        corpus: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// An insert/upsert/delete/flush/merge script.
    Script {
        #[arg(long, default_value_t = 500)]
        ops: usize,
        #[arg(long, default_value_t = 100)]
        keys: i64,
        #[arg(long, default_value_t = 0.02)]
        flush_p: f64,
        #[arg(long, default_value_t = 0.01)]
        merge_p: f64,
    },
}

impl Global {
    fn dataset_dir(&self, name: &str) -> Result<PathBuf> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            bail!("invalid dataset name {name:?}");
        }
        Ok(self.data_dir.join(name))
    }

    fn tune(&self, cfg: &mut EngineConfig) {
        if let Some(v) = self.memtable_bytes {
            cfg.memtable_bytes = v;
        }
        if let Some(v) = self.merge_max_bytes {
            cfg.merge_max_bytes = v;
        }
        if let Some(v) = self.merge_tolerable_count {
            cfg.merge_tolerable_count = v;
        }
    }

    fn creation_config(&self, name: &str) -> EngineConfig {
        let mut cfg = EngineConfig {
            name: name.to_owned(),
            ..EngineConfig::default()
        };
        if let Some(p) = self.partitions {
            cfg.partitions = p;
        }
        if let Some(c) = &self.compression {
            cfg.compression = (c != "off").then(|| c.clone());
        }
        self.tune(&mut cfg);
        cfg
    }

    fn open(&self, name: &str) -> Result<Dataset> {
        let dir = self.dataset_dir(name)?;
        let stored = Dataset::read_config(&dir)?;
        if self.partitions.is_some_and(|p| p != stored.partitions) {
            bail!("dataset {name} has {} partitions; --partitions applies at creation", stored.partitions);
        }
        if let Some(c) = &self.compression {
            if (c != "off").then(|| c.clone()) != stored.compression {
                bail!("dataset {name} was created with compression {:?}; --compression applies at creation", stored.compression);
            }
        }
        Ok(Dataset::open_with(&dir, Arc::new(FaultInjector::disarmed()), |c| self.tune(c))?)
    }
}

fn feed(g: &Global, f: &Feed, mut apply: impl FnMut(&Dataset, Doc) -> Result<()>) -> Result<()> {
    let ds = g.open(&f.dataset)?;
    let mut n = 0u64;
    let mut rejected = 0u64;
    let malformed = input::for_each_doc(f.input.as_deref(), f.skip_malformed, |line, doc| {
        match apply(&ds, doc) {
            Ok(()) => {
                n += 1;
                Ok(())
            }
            Err(e) if f.skip_malformed && is_record_error(&e) => {
                eprintln!("line {line}: {e:#}; skipped");
                rejected += 1;
                Ok(())
            }
            Err(e) => Err(e.context(format!("line {line}"))),
        }
    })?;
    if f.flush {
        ds.flush()?;
    }
    eprintln!("{n} applied, {} skipped", malformed + rejected);
    Ok(())
}

/// Errors caused by one input document rather than the dataset.
fn is_record_error(e: &anyhow::Error) -> bool {
    match e.downcast_ref::<EngineError>() {
        Some(EngineError::Key(_) | EngineError::Duplicate(_) | EngineError::Record(_)) => true,
        Some(_) => false,
        None => true,
    }
}

fn key_of(ds: &Dataset, doc: &Doc) -> Result<Key> {
    match doc {
        Doc::Object(_) => Ok(ds.key_of(doc)?),
        scalar => Key::from_doc(scalar).with_context(|| format!("{} cannot be a key", scalar.to_json())),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::Create {
            dataset,
            primary_key,
            no_compactor,
            strict_insert,
        } => {
            let mut cfg = g.creation_config(dataset);
            cfg.primary_key = primary_key.clone();
            cfg.compactor = !no_compactor;
            cfg.strict_insert = *strict_insert;
            Dataset::create(&g.dataset_dir(dataset)?, cfg)?;
        }
        Command::Ingest(f) => feed(g, f, |ds, doc| Ok(ds.insert(doc)?))?,
        Command::Upsert(f) => feed(g, f, |ds, doc| Ok(ds.upsert(doc)?))?,
        Command::Delete(f) => feed(g, f, |ds, doc| Ok(ds.delete(key_of(ds, &doc)?)?))?,
        Command::Load {
            dataset,
            input,
            skip_malformed,
        } => {
            let ds = g.open(dataset)?;
            let mut docs = Vec::new();
            let skipped = input::for_each_doc(input.as_deref(), *skip_malformed, |_, doc| {
                docs.push(doc);
                Ok(())
            })?;
            let n = docs.len();
            ds.load(docs)?;
            eprintln!("{n} loaded, {skipped} skipped");
        }
        Command::Query { dataset, plan: file, stats } => {
            let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let spec = QuerySpec::from_json(&text)?;
            let ds = g.open(dataset)?;
            let plan = plan(&spec, &ds.config().name, g.pushdown == OnOff::On)?;
            let out = execute(&plan, &ds.snapshot())?;
            let mut w = BufWriter::new(io::stdout().lock());
            for row in &out.rows {
                writeln!(w, "{}", row.to_json())?;
            }
            w.flush()?;
            if *stats {
                eprintln!("{}", serde_json::to_string(&out.stats)?);
            }
        }
        Command::Stats { dataset, json } => {
            let ds = g.open(dataset)?;
            let r = tuplecompact::stats::report(&ds)?;
            let mut w = BufWriter::new(io::stdout().lock());
            if *json {
                report::ndjson(&mut w, &r)?;
            } else {
                report::table(&mut w, &r)?;
            }
            w.flush()?;
        }
        Command::CrashTest { script, at, random, keep } => {
            return crash::run(g, script, at, *random, *keep);
        }
        Command::CrashChild { dir, script, hit } => crash::child(dir, script, *hit)?,
        Command::Gen { what } => {
            let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
            let mut w = BufWriter::new(io::stdout().lock());
            match what {
                Gen::Docs { corpus, count } => {
                    let Some(corpus) = Corpus::from_name(corpus) else {
                        bail!("unknown corpus {corpus:?}; expected tweets, publications, sensors or random");
                    };
                    for id in 0..*count {
                        writeln!(w, "{}", corpus.generate(&mut rng, id as i64).to_json())?;
                    }
                }
                Gen::Script {
                    ops,
                    keys,
                    flush_p,
                    merge_p,
                } => {
                    for op in random_script(&mut rng, *ops, *keys, *flush_p, *merge_p) {
                        writeln!(w, "{}", serde_json::to_string(&op)?)?;
                    }
                }
            }
            w.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub(crate) fn read_script(path: &Path) -> Result<Vec<tuplecompact::datagen::Op>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}
