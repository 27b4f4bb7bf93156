mod common;

use common::queries::*;
use common::reference;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use tuplecompact::datagen::{publication, random_script, sensor, shape_doc, tweet, SENSOR_READINGS};
use tuplecompact::lsm::{Dataset, EngineConfig, Key};
use tuplecompact::query::{execute, execute_with_registry, plan, Exchange, QueryError, QueryOutput, QuerySpec, SchemaRegistry};
use tuplecompact::Doc;

fn dataset(partitions: usize) -> (TempDir, Dataset) {
    let dir = TempDir::new().unwrap();
    let cfg = EngineConfig {
        name: "ds".into(),
        partitions,
        memtable_bytes: 64 << 20,
        auto_merge: false,
        ..EngineConfig::default()
    };
    let ds = Dataset::create(&dir.path().join("ds"), cfg).unwrap();
    (dir, ds)
}

/// Half the records flushed into components, a quarter more flushed
/// separately, the rest left in the memtable.
fn staged(partitions: usize, docs: &[Doc]) -> (TempDir, Dataset) {
    let (dir, ds) = dataset(partitions);
    for (i, d) in docs.iter().enumerate() {
        ds.insert(d.clone()).unwrap();
        if i + 1 == docs.len() / 2 || i + 1 == docs.len() * 3 / 4 {
            ds.flush().unwrap();
        }
    }
    (dir, ds)
}

fn run(ds: &Dataset, text: &str, pushdown: bool) -> QueryOutput {
    let spec = QuerySpec::from_json(text).unwrap();
    execute(&plan(&spec, "ds", pushdown).unwrap(), &ds.snapshot()).unwrap()
}

fn expected(ds: &Dataset, text: &str) -> Vec<Doc> {
    let docs: Vec<Doc> = ds.scan().unwrap().into_iter().map(|(_, d)| d).collect();
    reference::run(&QuerySpec::from_json(text).unwrap(), &docs)
}

fn check(ds: &Dataset, text: &str) {
    let want = expected(ds, text);
    for pushdown in [true, false] {
        let got = run(ds, text, pushdown);
        assert!(
            reference::rows_match(&got.rows, &want),
            "pushdown {pushdown} query {text}\n got {:?}\nwant {:?}",
            got.rows,
            want
        );
    }
}

fn json(text: &str) -> Doc {
    Doc::from_json(text).unwrap()
}

#[test]
fn count_runs_without_exchange() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let docs: Vec<Doc> = (0..300).map(|i| tweet(&mut rng, i)).collect();
    let (_d, ds) = staged(4, &docs);
    let spec = QuerySpec::from_json(TWEETS_COUNT).unwrap();
    let p = plan(&spec, "ds", true).unwrap();
    assert_eq!(p.exchange, Exchange::Local);
    assert!(p.pushed_paths.is_empty());
    let out = execute(&p, &ds.snapshot()).unwrap();
    assert_eq!(out.stats.broadcasts, 0);
    assert_eq!(out.rows, vec![json(r#"{"n":300}"#)]);
    assert_eq!(out.stats.tag_scans, 0);
}

#[test]
fn grouping_broadcasts_schemas_once_per_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let docs: Vec<Doc> = (0..300).map(|i| tweet(&mut rng, i)).collect();
    for partitions in [1, 3, 4] {
        let (_d, ds) = staged(partitions, &docs);
        let spec = QuerySpec::from_json(TWEETS_JOBS_HASHTAG).unwrap();
        let p = plan(&spec, "ds", true).unwrap();
        assert_eq!(p.exchange, Exchange::HashPartition);
        let out = execute(&p, &ds.snapshot()).unwrap();
        assert_eq!(out.stats.broadcasts, partitions);
    }
}

#[test]
fn empty_global_aggregate_yields_one_row() {
    let (_d, ds) = dataset(3);
    let out = run(&ds, r#"{"aggregates":[{"fn":"count","as":"n"},{"fn":"sum","arg":"x","as":"s"}]}"#, true);
    assert_eq!(out.rows, vec![json(r#"{"n":0,"s":null}"#)]);
    let grouped = run(&ds, r#"{"group_by":[{"expr":"x","as":"x"}],"aggregates":[{"fn":"count","as":"n"}]}"#, true);
    assert!(grouped.rows.is_empty());
}

#[test]
fn heterogeneous_partitions_resolve_through_registry() {
    let (_d, ds) = dataset(2);
    let names = ["Ann", "Bob", "Cat", "Dan"];
    let (mut p0, mut p1) = (0, 0);
    let mut id = 0i64;
    while p0 < 20 || p1 < 20 {
        let name = names[id as usize % names.len()];
        let doc = match Key::int(id).partition(2) {
            0 if p0 < 20 => {
                p0 += 1;
                json(&format!(r#"{{"id":{id},"name":"{name}","age":{}}}"#, 20 + id % 40))
            }
            1 if p1 < 20 => {
                p1 += 1;
                json(&format!(r#"{{"id":{id},"name":"{name}","salary":{}}}"#, 1000 * (id % 7)))
            }
            _ => {
                id += 1;
                continue;
            }
        };
        ds.insert(doc).unwrap();
        id += 1;
    }
    ds.flush().unwrap();
    let s0 = ds.schema(0);
    let s1 = ds.schema(1);
    assert!(s0.dictionary().iter().any(|n| n == "age") && !s0.dictionary().iter().any(|n| n == "salary"));
    assert!(s1.dictionary().iter().any(|n| n == "salary") && !s1.dictionary().iter().any(|n| n == "age"));

    let text = r#"{"group_by":[{"expr":"name","as":"name"}],
        "aggregates":[{"fn":"max","arg":"age","as":"age"},{"fn":"sum","arg":"salary","as":"salary"},{"fn":"count","as":"n"}]}"#;
    check(&ds, text);
    let out = run(&ds, text, false);
    assert_eq!(out.stats.broadcasts, 2);
    assert_eq!(out.rows.len(), 4);
    for row in &out.rows {
        assert!(row.get("age").is_some_and(|a| a.as_i64().is_some()));
        assert!(row.get("salary").is_some_and(|a| a.as_i64().is_some()));
    }

    let spec = QuerySpec::from_json(text).unwrap();
    let err = execute_with_registry(&plan(&spec, "ds", false).unwrap(), &ds.snapshot(), &SchemaRegistry::new()).unwrap_err();
    assert!(matches!(err, QueryError::RegistryMiss { .. }), "{err}");
}

#[test]
fn results_do_not_depend_on_partition_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let docs: Vec<Doc> = (0..800).map(|i| tweet(&mut rng, i)).collect();
    let queries = [TWEETS_COUNT, TWEETS_TOP_USERS_BY_LENGTH, TWEETS_JOBS_HASHTAG, TWEETS_BY_COUNTRY];
    let mut baseline: Vec<Option<Vec<Doc>>> = vec![None; queries.len()];
    for partitions in [1, 2, 4, 8] {
        let (_d, ds) = staged(partitions, &docs);
        for (q, text) in queries.iter().enumerate() {
            check(&ds, text);
            for pushdown in [true, false] {
                let rows = run(&ds, text, pushdown).rows;
                match &baseline[q] {
                    None => baseline[q] = Some(rows),
                    Some(b) => assert_eq!(&rows, b, "query {q} partitions {partitions}"),
                }
            }
        }
    }
}

#[test]
fn sensor_queries_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let docs: Vec<Doc> = (0..120).map(|i| sensor(&mut rng, i * 7)).collect();
    let (_d, ds) = staged(3, &docs);
    for text in [SENSORS_COUNT_READINGS, SENSORS_MAX_TEMP, SENSORS_TOP_AVG] {
        check(&ds, text);
    }
    let out = run(&ds, SENSORS_COUNT_READINGS, true);
    assert_eq!(out.rows, vec![Doc::from_json(&format!(r#"{{"n":{}}}"#, 120 * SENSOR_READINGS)).unwrap()]);
}

#[test]
fn publication_queries_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let docs: Vec<Doc> = (0..300).map(|i| publication(&mut rng, i)).collect();
    let (_d, ds) = staged(2, &docs);
    check(&ds, PUBLICATIONS_WITH_ARRAY_SUBJECTS);
    check(
        &ds,
        r#"{"unnest":{"path":"static_data.fullrecord_metadata.addresses.address_name","as":"a"},
            "group_by":[{"expr":"a.address_spec.country","as":"country"}],
            "aggregates":[{"fn":"count","as":"n"}]}"#,
    );
}

#[test]
fn heterogeneous_shapes_match_reference() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (_d, ds) = dataset(3);
        for op in random_script(&mut rng, 400, 120, 0.02, 0.005) {
            common::apply(&ds, &op).unwrap();
        }
        for text in SHAPES {
            check(&ds, text);
        }
    }
}

#[test]
fn unnest_keeps_items_off_the_path() {
    let (_d, ds) = dataset(1);
    ds.insert(common::dependents_doc()).unwrap();
    ds.flush().unwrap();
    let text = r#"{"unnest":{"path":"dependents","as":"d"},"select":[{"expr":"d.age","as":"age"}]}"#;
    check(&ds, text);
    let out = run(&ds, text, true);
    assert_eq!(out.rows, vec![json("{}"), json(r#"{"age":6}"#), json(r#"{"age":10}"#)]);
}

#[test]
fn pushdown_reads_each_record_once() {
    let (_d, ds) = dataset(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..200i64 {
        let mut doc = shape_doc(&mut rng, i);
        if let Doc::Object(m) = &mut doc {
            m.insert("age".into(), Doc::Int(1 + i % 50));
            m.insert("salary".into(), Doc::Int(100 * i));
        }
        ds.insert(doc).unwrap();
        if i == 120 {
            ds.flush().unwrap();
        }
    }
    let text = r#"{"where":{"gt":["age",{"lit":0}]},
        "group_by":[{"expr":"name","as":"name"}],
        "aggregates":[{"fn":"sum","arg":"salary","as":"total"}]}"#;
    check(&ds, text);
    let on = run(&ds, text, true);
    let off = run(&ds, text, false);
    assert_eq!(on.stats.records_scanned, 200);
    assert_eq!(on.stats.tag_scans, 200);
    assert_eq!(off.stats.tag_scans, 600);

    let spec = QuerySpec::from_json(SENSORS_TOP_AVG).unwrap();
    let p = plan(&spec, "ds", true).unwrap();
    let pushed: Vec<String> = p.pushed_paths.iter().map(ToString::to_string).collect();
    assert_eq!(pushed, ["sensor_id", "readings[*].timestamp", "readings[*].temp"]);
}

#[test]
fn three_valued_filters() {
    let (_d, ds) = dataset(2);
    for d in [r#"{"id":1,"age":30}"#, r#"{"id":2,"age":null}"#, r#"{"id":3}"#, r#"{"id":4,"age":"x"}"#, r#"{"id":5,"age":31}"#] {
        ds.insert(json(d)).unwrap();
    }
    let ids = |text: &str| -> Vec<Doc> {
        check(&ds, text);
        run(&ds, text, true).rows
    };
    let sel = |pred: &str| format!(r#"{{"where":{pred},"select":[{{"expr":"id","as":"id"}}]}}"#);
    assert_eq!(ids(&sel(r#"{"not":{"eq":["age",{"lit":30}]}}"#)), vec![json(r#"{"id":5}"#)]);
    assert_eq!(ids(&sel(r#"{"exists":"age"}"#)).len(), 4);
    assert_eq!(ids(&sel(r#"{"or":[{"eq":["age",{"lit":30}]},{"not":{"exists":"age"}}]}"#)).len(), 2);
}

#[test]
fn plan_errors() {
    let spec = |t: &str| QuerySpec::from_json(t).unwrap();
    assert!(matches!(
        plan(&spec(r#"{"dataset":"other","aggregates":[{"fn":"count","as":"n"}]}"#), "ds", true),
        Err(QueryError::UnknownDataset(_))
    ));
    for bad in [
        r#"{"aggregates":[{"fn":"sum","as":"s"}]}"#,
        r#"{"aggregates":[{"fn":"avg","arg":{"lower":"name"},"as":"s"}]}"#,
        r#"{"aggregates":[{"fn":"count","as":"n"}],"order_by":[{"key":"m"}]}"#,
        r#"{"select":[{"expr":"a","as":"x"},{"expr":"b","as":"x"}]}"#,
        r#"{}"#,
    ] {
        assert!(matches!(plan(&spec(bad), "ds", true), Err(QueryError::Plan(_))), "{bad}");
    }
    assert!(QuerySpec::from_json(r#"{"selct":[]}"#).is_err());
}
