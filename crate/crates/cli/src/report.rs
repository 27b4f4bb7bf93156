use std::io::Write;

use anyhow::Result;
use serde_json::json;
use tuplecompact::stats::{Sizes, StorageReport};

const CAVEAT: &str = "open = uncompacted vector-based records with inline field names, an in-crate stand-in for a self-describing format";

fn ratio(s: &Sizes) -> String {
    if s.inferred == 0 {
        "-".into()
    } else {
        format!("{:.2}", s.ratio())
    }
}

pub fn table(w: &mut impl Write, r: &StorageReport) -> Result<()> {
    writeln!(
        w,
        "{:<4} {:<28} {:>9} {:>12} {:>12} {:>12} {:>12} {:>12} {:>7}",
        "part", "source", "records", "disk", "open", "inferred", "open+lz4", "inferred+lz4", "ratio"
    )?;
    for s in &r.sources {
        let z = &s.sizes;
        writeln!(
            w,
            "{:<4} {:<28} {:>9} {:>12} {:>12} {:>12} {:>12} {:>12} {:>7}",
            s.partition, s.source, s.records, s.disk_bytes, z.open, z.inferred, z.open_compressed, z.inferred_compressed, ratio(z)
        )?;
    }
    let z = &r.total;
    writeln!(
        w,
        "{:<4} {:<28} {:>9} {:>12} {:>12} {:>12} {:>12} {:>12} {:>7}",
        "all", "total", r.records, r.disk_bytes, z.open, z.inferred, z.open_compressed, z.inferred_compressed, ratio(z)
    )?;
    writeln!(w, "schema nodes: {}  dictionary entries: {}", r.schema_nodes, r.dictionary_len)?;
    writeln!(w, "note: {CAVEAT}")?;
    Ok(())
}

pub fn ndjson(w: &mut impl Write, r: &StorageReport) -> Result<()> {
    for s in &r.sources {
        let mut line = serde_json::to_value(s)?;
        line["type"] = json!("source");
        writeln!(w, "{line}")?;
    }
    let total = json!({
        "type": "total",
        "records": r.records,
        "disk_bytes": r.disk_bytes,
        "schema_nodes": r.schema_nodes,
        "dictionary_len": r.dictionary_len,
        "sizes": r.total,
        "open_to_inferred": r.total.ratio(),
        "note": CAVEAT,
    });
    writeln!(w, "{total}")?;
    Ok(())
}
