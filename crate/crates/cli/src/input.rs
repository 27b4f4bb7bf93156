use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};
use tuplecompact::Doc;

/// Calls `f` with the 1-based line number and document of every non-blank
/// NDJSON line. Malformed lines stop the run unless `skip_malformed`, in
/// which case they are reported and counted.
pub fn for_each_doc(path: Option<&Path>, skip_malformed: bool, mut f: impl FnMut(usize, Doc) -> Result<()>) -> Result<u64> {
    let reader: Box<dyn BufRead> = match path {
        None => Box::new(io::stdin().lock()),
        Some(p) if p == Path::new("-") => Box::new(io::stdin().lock()),
        Some(p) => Box::new(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?)),
    };
    let mut skipped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("reading line {}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        match Doc::from_json(&line) {
            Ok(doc) => f(i + 1, doc)?,
            Err(e) if skip_malformed => {
                eprintln!("line {}: malformed JSON: {e}; skipped", i + 1);
                skipped += 1;
            }
            Err(e) => bail!("line {}: malformed JSON: {e}", i + 1),
        }
    }
    Ok(skipped)
}
