#[path = "../../core/tests/common/reference.rs"]
mod reference;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use tuplecompact::lsm::Dataset;
use tuplecompact::query::QuerySpec;
use tuplecompact::schema::{Kind, TypeNode};
use tuplecompact::Doc;

const EMPLOYEES: [&str; 4] = [
    r#"{"id":0,"name":"Ann","age":26}"#,
    r#"{"id":1,"name":"Bob","age":27}"#,
    r#"{"id":2,"name":"Alex"}"#,
    r#"{"id":3,"name":"Bill","age":"old"}"#,
];

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Env {
        Env { dir: TempDir::new().unwrap() }
    }

    fn data(&self) -> std::path::PathBuf {
        self.dir.path().join("data")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tcdb"))
            .arg("--data-dir")
            .arg(self.data())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stderr),
            String::from_utf8_lossy(&out.stdout)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn file(&self, name: &str, text: &str) -> String {
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_owned()
    }

    fn dataset(&self, name: &str) -> Dataset {
        Dataset::open(&self.data().join(name)).unwrap()
    }
}

fn rows(text: &str) -> Vec<Doc> {
    text.lines().map(|l| Doc::from_json(l).unwrap()).collect()
}

fn has_int_string_union(node: &TypeNode<String>) -> bool {
    let age = node.field(&"age".to_owned()).unwrap();
    let kinds: Vec<_> = age.branches().iter().filter_map(|b| b.kind()).collect();
    matches!(age, TypeNode::Union { .. }) && kinds.contains(&Kind::Int64) && kinds.contains(&Kind::String)
}

#[test]
fn load_builds_a_single_component() {
    let env = Env::new();
    let input = env.file("employees.ndjson", &EMPLOYEES.join("\n"));
    env.ok(&["--partitions", "1", "create", "emp"]);
    env.ok(&["load", "emp", &input]);
    let ds = env.dataset("emp");
    assert_eq!(ds.components(0).len(), 1);
    assert!(has_int_string_union(&ds.schema(0).named_tree()));
    let out = env.run(&["load", "emp", &input]);
    assert!(!out.status.success());
}

fn memtable_bytes(docs: &[&str]) -> usize {
    let dir = TempDir::new().unwrap();
    let ds = Dataset::create(
        dir.path(),
        tuplecompact::lsm::EngineConfig {
            partitions: 1,
            auto_merge: false,
            ..Default::default()
        },
    )
    .unwrap();
    for d in docs {
        ds.insert(Doc::from_json(d).unwrap()).unwrap();
    }
    ds.stats()[0].memtable_bytes
}

#[test]
fn memtable_budget_flushes_growing_schemas() {
    let budget = memtable_bytes(&EMPLOYEES[..2]).min(memtable_bytes(&EMPLOYEES[2..]));
    assert!(memtable_bytes(&EMPLOYEES[..1]) < budget && memtable_bytes(&EMPLOYEES[2..3]) < budget);
    let env = Env::new();
    let input = env.file("employees.ndjson", &EMPLOYEES.join("\n"));
    let budget = budget.to_string();
    env.ok(&["--partitions", "1", "--merge-tolerable-count", "10", "create", "emp"]);
    env.ok(&["--memtable-bytes", &budget, "ingest", "emp", &input]);
    let ds = env.dataset("emp");
    let comps = ds.components(0);
    assert_eq!(comps.len(), 2);
    let s0 = comps[0].schema.as_ref().unwrap();
    let s1 = comps[1].schema.as_ref().unwrap();
    assert!(s1.dictionary().starts_with(s0.dictionary()));
    let s0_age = s0.named_tree().field(&"age".to_owned()).cloned().unwrap();
    assert!(matches!(s0_age, TypeNode::Scalar { kind: Kind::Int64, .. }));
    assert!(has_int_string_union(&s1.named_tree()));
    assert_eq!(s1.root().counter(), 4);
}

#[test]
fn empty_ingest_creates_nothing() {
    let env = Env::new();
    let input = env.file("empty.ndjson", "");
    env.ok(&["create", "e"]);
    env.ok(&["ingest", "e", &input, "--flush"]);
    let ds = env.dataset("e");
    assert!((0..ds.partitions()).all(|p| ds.components(p).is_empty()));
    let stats = env.ok(&["stats", "e", "--json"]);
    let total = Doc::from_json(stats.lines().last().unwrap()).unwrap();
    assert_eq!(total.get("records"), Some(&Doc::Int(0)));
    let sizes = total.get("sizes").unwrap();
    for k in ["open", "inferred", "open_compressed", "inferred_compressed"] {
        assert_eq!(sizes.get(k), Some(&Doc::Int(0)), "{k}");
    }
}

#[test]
fn malformed_lines_are_reported_by_number() {
    let env = Env::new();
    let input = env.file("bad.ndjson", "{\"id\":1}\n\n{\"id\":2,\n{\"name\":\"no key\"}\n{\"id\":3}\n");
    env.ok(&["create", "d"]);
    let out = env.run(&["ingest", "d", &input]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    let out = env.run(&["ingest", "d", &input, "--skip-malformed"]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("line 4"), "{err}");
    assert!(err.contains("2 applied, 2 skipped"), "{err}");
}

#[test]
fn deletes_and_upserts() {
    let env = Env::new();
    let input = env.file("employees.ndjson", &EMPLOYEES.join("\n"));
    env.ok(&["create", "emp"]);
    env.ok(&["ingest", "emp", &input, "--flush"]);
    let keys = env.file("keys.ndjson", "3\n{\"id\":2}\n");
    env.ok(&["delete", "emp", &keys]);
    let up = env.file("up.ndjson", r#"{"id":0,"name":"Ann","age":"old"}"#);
    env.ok(&["upsert", "emp", &up]);
    let q = env.file("q.json", r#"{"select":[{"expr":"*","as":"r"}],"order_by":[{"key":"r"}]}"#);
    let got = rows(&env.ok(&["query", "emp", &q]));
    let want = rows(concat!(
        r#"{"r":{"id":0,"name":"Ann","age":"old"}}"#,
        "\n",
        r#"{"r":{"id":1,"name":"Bob","age":27}}"#
    ));
    assert_eq!(got, want);
}

fn corpus(env: &Env, name: &str, corpus: &str, count: usize) -> Vec<Doc> {
    let data = env.ok(&["--seed", "9", "gen", "docs", corpus, "--count", &count.to_string()]);
    let input = env.file(&format!("{name}.ndjson"), &data);
    env.ok(&["--partitions", "3", "create", name]);
    env.ok(&["--memtable-bytes", "200000", "ingest", name, &input]);
    rows(&data)
}

#[test]
fn queries_match_reference() {
    let env = Env::new();
    let tweets = corpus(&env, "tw", "tweets", 600);
    let sensors = corpus(&env, "se", "sensors", 60);
    let cases = [
        ("tw", &tweets, r#"{"aggregates":[{"fn":"count","as":"n"}]}"#),
        (
            "tw",
            &tweets,
            r#"{"group_by":[{"expr":"user.name","as":"name"}],
                "aggregates":[{"fn":"avg","arg":{"length":"text"},"as":"avg_len"}],
                "order_by":[{"key":"avg_len","desc":true}],"limit":10}"#,
        ),
        (
            "se",
            &sensors,
            r#"{"unnest":{"path":"readings","as":"r"},
                "group_by":[{"expr":"sensor_id","as":"sid"}],
                "aggregates":[{"fn":"min","arg":"r.temp","as":"lo"},{"fn":"max","arg":"r.temp","as":"hi"}]}"#,
        ),
    ];
    for (ds, docs, text) in cases {
        let q = env.file("q.json", text);
        let want = reference::run(&QuerySpec::from_json(text).unwrap(), docs);
        for pushdown in ["on", "off"] {
            let got = rows(&env.ok(&["--pushdown", pushdown, "query", ds, &q]));
            assert!(reference::rows_match(&got, &want), "{text}\n{got:?}\n{want:?}");
        }
    }
    let count = env.ok(&["query", "tw", &env.file("c.json", r#"{"aggregates":[{"fn":"count","as":"n"}]}"#)]);
    assert_eq!(count.trim(), r#"{"n":600}"#);
}

#[test]
fn query_errors_exit_nonzero() {
    let env = Env::new();
    env.ok(&["create", "d"]);
    for bad in [
        r#"{"dataset":"other","aggregates":[{"fn":"count","as":"n"}]}"#,
        r#"{"aggregates":[{"fn":"sum","as":"s"}]}"#,
        "not json",
    ] {
        let q = env.file("bad.json", bad);
        assert!(!env.run(&["query", "d", &q]).status.success(), "{bad}");
    }
    assert!(!env.run(&["query", "missing", &env.file("q.json", "{}")]).status.success());
}

#[test]
fn stats_show_compaction_savings() {
    let env = Env::new();
    corpus(&env, "se", "sensors", 40);
    let ds = env.dataset("se");
    ds.flush().unwrap();
    drop(ds);
    let table = env.ok(&["stats", "se"]);
    assert!(table.contains("stand-in"), "{table}");
    let json = env.ok(&["stats", "se", "--json"]);
    let total = Doc::from_json(json.lines().last().unwrap()).unwrap();
    let sizes = total.get("sizes").unwrap();
    let open = sizes.get("open").and_then(Doc::as_i64).unwrap();
    let inferred = sizes.get("inferred").and_then(Doc::as_i64).unwrap();
    assert!(inferred < open, "{inferred} vs {open}");
    assert_eq!(total.get("records"), Some(&Doc::Int(40)));
}

fn crash_test(env: &Env, script: &str, extra: &[&str]) -> (Output, String) {
    let mut args = vec!["crash-test", script];
    args.extend_from_slice(extra);
    let out = env.run(&args);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    (out, text)
}

#[test]
fn crash_test_passes_random_points() {
    let env = Env::new();
    let script = env.ok(&["--seed", "3", "gen", "script", "--ops", "200", "--keys", "30", "--flush-p", "0.05", "--merge-p", "0.03"]);
    let script = env.file("s.ndjson", &script);
    let (out, text) = crash_test(&env, &script, &["--random", "12", "--merge-tolerable-count", "3"]);
    assert!(out.status.success(), "{text}\n{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(text.lines().filter(|l| l.starts_with("crash point") && l.ends_with("PASS")).count(), 12, "{text}");
}

#[test]
fn crash_between_write_and_validity_passes() {
    let env = Env::new();
    let ops: Vec<String> = (0..4)
        .map(|i| format!(r#"{{"op":"insert","doc":{{"id":{i},"v":{i}}}}}"#))
        .chain(["{\"op\":\"flush\"}".to_owned()])
        .collect();
    let script = env.file("s.ndjson", &ops.join("\n"));
    let (_, text) = crash_test(&env, &script, &["--at", "1"]);
    let hits: u64 = text
        .lines()
        .last()
        .and_then(|l| l.split(", ").last()?.split(' ').next()?.parse().ok())
        .unwrap();
    let all: Vec<String> = (1..=hits).map(|h| h.to_string()).collect();
    let (out, text) = crash_test(&env, &script, &["--partitions", "1", "--at", &all.join(",")]);
    assert!(out.status.success(), "{text}");
    let line = text.lines().find(|l| l.contains("FlushBeforeValid")).expect("flush crash site covered");
    assert!(line.ends_with("PASS"), "{line}");
}

#[test]
fn crash_test_with_empty_script_passes() {
    let env = Env::new();
    let script = env.file("empty.ndjson", "");
    let (out, text) = crash_test(&env, &script, &[]);
    assert!(out.status.success());
    assert!(text.contains("PASS"));
}

#[test]
fn crash_test_reports_environment_errors_separately() {
    let env = Env::new();
    let script = env.file("s.ndjson", "{\"op\":\"flush\"}\n");
    let blocker = env.dir.path().join("blocked");
    fs::write(&blocker, "not a directory").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tcdb"))
        .args(["--data-dir", blocker.to_str().unwrap(), "crash-test", &script])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("environment error"));
    assert!(Path::new(&blocker).is_file());
}
