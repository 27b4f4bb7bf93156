//! Crash simulation: each crash point runs the script in a child process
//! that aborts at the armed crash-site hit; the parent then recovers the
//! dataset and compares it with the state the acknowledged operations
//! imply.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::sync::Arc;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tuplecompact::datagen::Op;
use tuplecompact::lsm::{Dataset, EngineConfig, FaultInjector, FaultMode, Key};
use tuplecompact::Doc;

use crate::{read_script, Global};

const SIGABRT: i32 = 6;
const DEFAULT_POINTS: usize = 10;

type State = BTreeMap<Key, Doc>;

fn model(ops: &[Op], pk: &str) -> Result<State> {
    let mut map = State::new();
    for op in ops {
        match op {
            Op::Insert { doc } | Op::Upsert { doc } => {
                let key = doc.get(pk).and_then(Key::from_doc).with_context(|| format!("script document without {pk}"))?;
                map.insert(key, doc.clone());
            }
            Op::Delete { key } => {
                map.remove(&Key::int(*key));
            }
            Op::Flush | Op::Merge => {}
        }
    }
    Ok(map)
}

fn apply(ds: &Dataset, op: &Op) -> Result<(), tuplecompact::lsm::EngineError> {
    match op {
        Op::Insert { doc } => ds.insert(doc.clone()),
        Op::Upsert { doc } => ds.upsert(doc.clone()),
        Op::Delete { key } => ds.delete(Key::int(*key)),
        Op::Flush => ds.flush(),
        Op::Merge => ds.merge_all(),
    }
}

fn state(ds: &Dataset) -> Result<State> {
    Ok(ds.scan()?.into_iter().collect())
}

/// Entry point of the child process.
pub fn child(dir: &Path, script: &Path, hit: u64) -> Result<()> {
    let ops = read_script(script)?;
    let ds = Dataset::open_with(dir, Arc::new(FaultInjector::armed(hit, FaultMode::Abort)), |_| {})?;
    for (i, op) in ops.iter().enumerate() {
        apply(&ds, op).with_context(|| format!("operation {}", i + 1))?;
        println!("acked {}", i + 1);
    }
    Ok(())
}

enum Outcome {
    Pass(String),
    Fail(String),
    Environment(String),
}

struct Harness {
    exe: PathBuf,
    script: PathBuf,
    cfg: EngineConfig,
    ops: Vec<Op>,
}

impl Harness {
    fn point(&self, dir: &Path, hit: u64) -> Outcome {
        if let Err(e) = Dataset::create(dir, self.cfg.clone()) {
            return Outcome::Environment(format!("cannot create dataset: {e}"));
        }
        let out = Command::new(&self.exe)
            .arg("crash-child")
            .arg("--dir")
            .arg(dir)
            .arg("--script")
            .arg(&self.script)
            .arg("--hit")
            .arg(hit.to_string())
            .stdin(Stdio::null())
            .output();
        let out = match out {
            Ok(o) => o,
            Err(e) => return Outcome::Environment(format!("cannot start child: {e}")),
        };
        let stdout = String::from_utf8_lossy(&out.stdout);
        let stderr = String::from_utf8_lossy(&out.stderr);
        let acked = stdout
            .lines()
            .filter_map(|l| l.strip_prefix("acked ")?.parse::<usize>().ok())
            .last()
            .unwrap_or(0);
        let site = stderr
            .lines()
            .find_map(|l| l.strip_prefix("crash site: "))
            .unwrap_or("none")
            .to_owned();
        let crashed = out.status.signal() == Some(SIGABRT);
        if !crashed && !out.status.success() {
            return Outcome::Environment(format!("child failed ({}): {}", out.status, stderr.trim()));
        }
        let detail = format!("site {site:<22} acked {acked:>5}/{}", self.ops.len());
        let recovered = match Dataset::open(dir).and_then(|ds| ds.scan()) {
            Ok(rows) => rows.into_iter().collect::<State>(),
            Err(e) => return Outcome::Fail(format!("{detail}: recovery failed: {e}")),
        };
        let pk = &self.cfg.primary_key;
        let (Ok(before), Ok(after)) = (model(&self.ops[..acked], pk), model(&self.ops[..(acked + 1).min(self.ops.len())], pk)) else {
            return Outcome::Environment("script documents lack keys".into());
        };
        if recovered != before && recovered != after {
            return Outcome::Fail(format!(
                "{detail}: recovered {} records, expected {} (or {} with the in-flight operation)",
                recovered.len(),
                before.len(),
                after.len()
            ));
        }
        match Dataset::open(dir).map_err(anyhow::Error::from).and_then(|ds| state(&ds)) {
            Ok(again) if again == recovered => Outcome::Pass(detail),
            Ok(_) => Outcome::Fail(format!("{detail}: second recovery differs from the first")),
            Err(e) => Outcome::Fail(format!("{detail}: second recovery failed: {e}")),
        }
    }
}

pub fn run(g: &Global, script: &Path, at: &[u64], random: usize, keep: bool) -> Result<ExitCode> {
    let env_failure = |msg: String| {
        eprintln!("environment error: {msg}");
        Ok(ExitCode::from(2))
    };
    let ops = read_script(script)?;
    let mut cfg = g.creation_config("crash");
    if g.partitions.is_none() {
        cfg.partitions = 2;
    }
    let base = g.data_dir.join(format!("crash-test-{}", std::process::id()));
    if let Err(e) = fs::create_dir_all(&base) {
        return env_failure(format!("cannot create {}: {e}", base.display()));
    }
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => return env_failure(format!("cannot locate own executable: {e}")),
    };
    let script = fs::canonicalize(script).with_context(|| format!("resolving {}", script.display()))?;

    // Reference run without crashes; it also counts the crash-site hits.
    let probe = Arc::new(FaultInjector::disarmed());
    let reference_dir = base.join("reference");
    let reference = (|| -> Result<State> {
        Dataset::create(&reference_dir, cfg.clone())?;
        let ds = Dataset::open_with(&reference_dir, probe.clone(), |_| {})?;
        for op in &ops {
            apply(&ds, op)?;
        }
        state(&ds)
    })();
    let expected = model(&ops, &cfg.primary_key)?;
    let mut failures = 0;
    match reference {
        Ok(s) if s == expected => println!("reference run: {} operations, {} records: PASS", ops.len(), s.len()),
        Ok(s) => {
            println!("reference run: {} records, model has {}: FAIL", s.len(), expected.len());
            failures += 1;
        }
        Err(e) => {
            println!("reference run: {e:#}: FAIL");
            failures += 1;
        }
    }
    let total = probe.hits();

    let mut points: Vec<u64> = at.to_vec();
    let random = if at.is_empty() && random == 0 { DEFAULT_POINTS } else { random };
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    if total > 0 {
        points.extend((0..random).map(|_| rng.gen_range(1..=total)));
    }
    if points.is_empty() {
        println!("no crash sites reached by the script: PASS");
    }

    let harness = Harness { exe, script, cfg, ops };
    let mut env_errors = 0;
    for (i, hit) in points.iter().enumerate() {
        let dir = base.join(format!("point-{i}"));
        match harness.point(&dir, *hit) {
            Outcome::Pass(d) => println!("crash point hit {hit:>6} {d}: PASS"),
            Outcome::Fail(d) => {
                println!("crash point hit {hit:>6} {d}: FAIL");
                failures += 1;
            }
            Outcome::Environment(d) => {
                eprintln!("crash point hit {hit:>6}: environment error: {d}");
                env_errors += 1;
            }
        }
        if !keep {
            let _ = fs::remove_dir_all(&dir);
        }
    }
    if !keep {
        let _ = fs::remove_dir_all(&base);
    }
    println!(
        "{} crash points, {} failed, {} environment errors, {total} crash-site hits in the script",
        points.len(),
        failures,
        env_errors
    );
    Ok(if failures > 0 {
        ExitCode::FAILURE
    } else if env_errors > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}
