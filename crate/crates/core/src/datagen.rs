//! Seeded synthetic corpora: random documents for format properties,
//! tweet-, publication- and sensor-shaped records, and LSM op scripts.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::doc::Doc;

const NAME_POOL: &[&str] = &[
    "id", "name", "age", "tags", "value", "x", "", "nested", "items", "ts", "kind", "a", "b", "c",
    "description", "ünïcode", "with space", "k_9",
];

fn random_string<R: Rng>(rng: &mut R, max: usize) -> String {
    let len = rng.gen_range(0..=max);
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0 => char::from_u32(rng.gen_range(0x80..0x800)).unwrap_or('?'),
            1 => char::from_u32(rng.gen_range(0x1F300..0x1F600)).unwrap_or('?'),
            _ => rng.gen_range(b' '..=b'~') as char,
        })
        .collect()
}

fn field_name<R: Rng>(rng: &mut R) -> String {
    if rng.gen_bool(0.8) {
        (*NAME_POOL.choose(rng).unwrap()).to_owned()
    } else {
        let s = random_string(rng, 64);
        // Keep names within 64 bytes even with multi-byte characters.
        let mut end = s.len().min(64);
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        s[..end].to_owned()
    }
}

fn random_scalar<R: Rng>(rng: &mut R) -> Doc {
    match rng.gen_range(0..6) {
        0 => Doc::String(random_string(rng, 40)),
        1 => Doc::Int(match rng.gen_range(0..3) {
            0 => rng.gen_range(-10..10),
            1 => rng.gen(),
            _ => *[i64::MIN, i64::MAX, 0].choose(rng).unwrap(),
        }),
        2 => Doc::Double(match rng.gen_range(0..3) {
            0 => rng.gen_range(-1e6..1e6),
            1 => *[0.0, -0.0, f64::MAX, f64::MIN_POSITIVE, 1.5].choose(rng).unwrap(),
            _ => rng.gen::<f64>(),
        }),
        3 => Doc::Bool(rng.gen()),
        4 => Doc::Null,
        _ => Doc::String(String::new()),
    }
}

fn random_value<R: Rng>(rng: &mut R, depth_left: usize) -> Doc {
    if depth_left == 0 || rng.gen_bool(0.6) {
        return random_scalar(rng);
    }
    if rng.gen_bool(0.5) {
        random_object(rng, depth_left)
    } else {
        let n = rng.gen_range(0..5);
        Doc::Array((0..n).map(|_| random_value(rng, depth_left - 1)).collect())
    }
}

fn random_object<R: Rng>(rng: &mut R, depth_left: usize) -> Doc {
    let n = rng.gen_range(0..6);
    let mut map = IndexMap::new();
    for _ in 0..n {
        let name = field_name(rng);
        let value = random_value(rng, depth_left - 1);
        map.insert(name, value);
    }
    Doc::Object(map)
}

/// A random object document whose nesting depth is at most `max_depth`
/// (>= 1).
pub fn random_doc<R: Rng>(rng: &mut R, max_depth: usize) -> Doc {
    random_object(rng, max_depth.max(1))
}

fn obj(pairs: Vec<(&str, Doc)>) -> Doc {
    Doc::Object(pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect())
}

fn word<R: Rng>(rng: &mut R, words: &[&str]) -> String {
    (*words.choose(rng).unwrap()).to_owned()
}

const HASHTAGS: &[&str] = &["jobs", "Jobs", "rust", "news", "music", "sports", "travel", "food", "tech", "art"];
const WORDS: &[&str] = &["the", "a", "new", "great", "day", "today", "check", "out", "this", "amazing", "hiring", "now"];
const LANGS: &[&str] = &["en", "es", "fr", "de", "ja"];

/// Tweet-shaped record: string-dominated, nested user and entities objects,
/// hashtags as an array of `{text, indices}` objects, and some optional
/// fields.
pub fn tweet<R: Rng>(rng: &mut R, id: i64) -> Doc {
    let user_id = rng.gen_range(0..500i64);
    let n_words = rng.gen_range(3..25);
    let text: Vec<String> = (0..n_words).map(|_| word(rng, WORDS)).collect();
    let text = text.join(" ");
    let hashtags: Vec<Doc> = (0..rng.gen_range(0..4))
        .map(|_| {
            let start = rng.gen_range(0..100i64);
            obj(vec![
                ("text", Doc::String(word(rng, HASHTAGS))),
                ("indices", Doc::Array(vec![Doc::Int(start), Doc::Int(start + 5)])),
            ])
        })
        .collect();
    let mut fields = vec![
        ("id", Doc::Int(id)),
        ("created_at", Doc::String(format!("2019-0{}-{:02}T12:00:00Z", rng.gen_range(1..10), rng.gen_range(1..29)))),
        ("text", Doc::String(text)),
        ("lang", Doc::String(word(rng, LANGS))),
        ("retweet_count", Doc::Int(rng.gen_range(0..1000))),
        ("favorited", Doc::Bool(rng.gen())),
        (
            "user",
            obj(vec![
                ("id", Doc::Int(user_id)),
                ("name", Doc::String(format!("user{user_id}"))),
                ("screen_name", Doc::String(format!("@u{user_id}"))),
                ("followers_count", Doc::Int(rng.gen_range(0..100_000))),
                ("verified", Doc::Bool(user_id % 17 == 0)),
            ]),
        ),
        (
            "entities",
            obj(vec![
                ("hashtags", Doc::Array(hashtags)),
                ("urls", Doc::Array(Vec::new())),
            ]),
        ),
    ];
    if rng.gen_bool(0.2) {
        fields.push((
            "place",
            obj(vec![
                ("country", Doc::String(word(rng, &["US", "CA", "MX", "FR"]))),
                ("full_name", Doc::String("Somewhere".into())),
            ]),
        ));
    }
    if rng.gen_bool(0.1) {
        fields.push(("coordinates", Doc::Null));
    }
    obj(fields)
}

const COUNTRIES: &[&str] = &["USA", "China", "Germany", "France", "Japan", "UK", "Canada", "Brazil"];
const SUBJECTS: &[&str] = &["Physics", "Chemistry", "Computer Science", "Biology", "Mathematics", "Medicine"];

/// Publication-shaped record. Several nested fields are either a single
/// object or an array of objects, so inferred schemas carry unions.
pub fn publication<R: Rng>(rng: &mut R, id: i64) -> Doc {
    let subject = |rng: &mut R| {
        obj(vec![
            ("ascatype", Doc::String(word(rng, &["extended", "traditional"]))),
            ("value", Doc::String(word(rng, SUBJECTS))),
        ])
    };
    let n_subjects = rng.gen_range(1..4);
    let subjects = if n_subjects == 1 {
        subject(rng)
    } else {
        Doc::Array((0..n_subjects).map(|_| subject(rng)).collect())
    };
    let address = |rng: &mut R, i: i64| {
        obj(vec![(
            "address_spec",
            obj(vec![
                ("addr_no", Doc::Int(i)),
                ("country", Doc::String(word(rng, COUNTRIES))),
                ("city", Doc::String(format!("City{}", rng.gen_range(0..50)))),
            ]),
        )])
    };
    let n_addr = rng.gen_range(1..5);
    let addresses = if n_addr == 1 {
        address(rng, 1)
    } else {
        Doc::Array((1..=n_addr).map(|i| address(rng, i)).collect())
    };
    let n_authors = rng.gen_range(1..6);
    let authors: Vec<Doc> = (0..n_authors)
        .map(|i| {
            obj(vec![
                ("seq_no", Doc::Int(i + 1)),
                ("full_name", Doc::String(format!("Author {}", rng.gen_range(0..1000)))),
                ("role", Doc::String("author".into())),
            ])
        })
        .collect();
    obj(vec![
        ("id", Doc::Int(id)),
        ("uid", Doc::String(format!("WOS:{id:012}"))),
        (
            "static_data",
            obj(vec![
                (
                    "summary",
                    obj(vec![
                        ("pub_info", obj(vec![
                            ("pubyear", Doc::Int(rng.gen_range(1980..2017))),
                            ("pubtype", Doc::String(word(rng, &["Journal", "Book", "Conference"]))),
                        ])),
                        ("titles", Doc::String(format!("On {} {}", word(rng, WORDS), word(rng, SUBJECTS)))),
                        ("names", if n_authors == 1 { authors[0].clone() } else { Doc::Array(authors) }),
                    ]),
                ),
                (
                    "fullrecord_metadata",
                    obj(vec![
                        ("category_info", obj(vec![("subjects", obj(vec![("subject", subjects)]))])),
                        ("addresses", obj(vec![("count", Doc::Int(n_addr)), ("address_name", addresses)])),
                        ("abstract", Doc::String((0..rng.gen_range(10..40)).map(|_| word(rng, WORDS)).collect::<Vec<_>>().join(" "))),
                    ]),
                ),
            ]),
        ),
    ])
}

/// Number of readings per sensor record; with the other fields a record
/// holds 248 scalars.
pub const SENSOR_READINGS: usize = 100;

const HEALTH_FIELDS: &[&str] = &[
    "battery_level", "battery_voltage", "cpu_temperature", "cpu_load", "memory_free", "memory_used",
    "signal_strength", "signal_noise", "uptime_seconds", "restart_count", "packets_sent",
    "packets_dropped", "firmware_build", "error_count", "warning_count", "disk_free", "disk_used",
    "fan_speed", "enclosure_humidity", "enclosure_temperature", "solar_input", "charge_current",
    "clock_drift", "last_calibration", "ambient_light", "air_pressure", "wind_speed",
    "wind_direction", "dew_point", "noise_level", "vibration_x", "vibration_y", "vibration_z",
    "tilt_angle", "gps_accuracy", "satellites", "link_quality", "retry_count", "queue_depth",
    "sample_rate", "power_draw", "board_temperature", "watchdog_resets",
];

/// Sensor-shaped record: mostly numeric, an array of `{temp, timestamp}`
/// reading objects and a health-status object.
pub fn sensor<R: Rng>(rng: &mut R, id: i64) -> Doc {
    let sensor_id = id % 1000;
    let report_time = 1_556_496_000_000 + id * 60_000;
    let base = rng.gen_range(-10.0..35.0);
    let readings: Vec<Doc> = (0..SENSOR_READINGS as i64)
        .map(|i| {
            obj(vec![
                ("temp", Doc::Double(base + rng.gen_range(-2.0..2.0))),
                ("timestamp", Doc::Int(report_time - (SENSOR_READINGS as i64 - i) * 600)),
            ])
        })
        .collect();
    let health: Vec<(&str, Doc)> = HEALTH_FIELDS
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let v = if i % 3 == 0 { Doc::Int(rng.gen_range(0..1_000_000)) } else { Doc::Double(rng.gen_range(0.0..100.0)) };
            (name, v)
        })
        .collect();
    obj(vec![
        ("id", Doc::Int(id)),
        ("sensor_id", Doc::Int(sensor_id)),
        ("report_time", Doc::Int(report_time)),
        ("location", obj(vec![("lat", Doc::Double(rng.gen_range(-90.0..90.0))), ("lon", Doc::Double(rng.gen_range(-180.0..180.0)))])),
        ("health", obj(health)),
        ("readings", Doc::Array(readings)),
    ])
}

/// Which synthetic corpus to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corpus {
    Tweets,
    Publications,
    Sensors,
    Random,
}

impl Corpus {
    pub fn from_name(name: &str) -> Option<Corpus> {
        match name {
            "tweets" | "tweet" | "twitter" => Some(Corpus::Tweets),
            "publications" | "publication" | "wos" => Some(Corpus::Publications),
            "sensors" | "sensor" => Some(Corpus::Sensors),
            "random" => Some(Corpus::Random),
            _ => None,
        }
    }

    /// Record `id` of this corpus; random documents get an `id` field so
    /// they can be stored.
    pub fn generate<R: Rng>(self, rng: &mut R, id: i64) -> Doc {
        match self {
            Corpus::Tweets => tweet(rng, id),
            Corpus::Publications => publication(rng, id),
            Corpus::Sensors => sensor(rng, id),
            Corpus::Random => {
                let mut doc = random_object(rng, 6);
                if let Doc::Object(map) = &mut doc {
                    map.shift_remove("id");
                    map.insert_before(0, "id".to_owned(), Doc::Int(id));
                }
                doc
            }
        }
    }
}

/// One step of an LSM workload script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Insert { doc: Doc },
    Upsert { doc: Doc },
    Delete { key: i64 },
    Flush,
    Merge,
}

/// Small heterogeneous record for `key`: fields come and go and change type
/// so that schemas gain and lose unions as the script runs.
pub fn shape_doc<R: Rng>(rng: &mut R, key: i64) -> Doc {
    let mut fields = vec![("id", Doc::Int(key))];
    if rng.gen_bool(0.8) {
        fields.push(("name", Doc::String(format!("n{}", rng.gen_range(0..20)))));
    }
    if rng.gen_bool(0.6) {
        let age = if rng.gen_bool(0.8) { Doc::Int(rng.gen_range(0..90)) } else { Doc::String("old".into()) };
        fields.push(("age", age));
    }
    if rng.gen_bool(0.3) {
        let n = rng.gen_range(0..4);
        let items = (0..n)
            .map(|_| if rng.gen_bool(0.7) { Doc::Int(rng.gen_range(0..5)) } else { Doc::Array(vec![Doc::Bool(rng.gen())]) })
            .collect();
        fields.push(("tags", Doc::Array(items)));
    }
    if rng.gen_bool(0.3) {
        let addr = if rng.gen_bool(0.7) {
            obj(vec![("city", Doc::String("Irvine".into())), ("zip", Doc::Int(rng.gen_range(90000..99999)))])
        } else {
            Doc::Null
        };
        fields.push(("address", addr));
    }
    if rng.gen_bool(0.1) {
        fields.push(("score", Doc::Double(rng.gen_range(0.0..1.0))));
    }
    obj(fields)
}

/// A random script over keys `0..key_space`. `flush_p`/`merge_p`
/// give the probability of a forced flush or full merge after each step.
pub fn random_script<R: Rng>(rng: &mut R, ops: usize, key_space: i64, flush_p: f64, merge_p: f64) -> Vec<Op> {
    let mut out = Vec::with_capacity(ops);
    for _ in 0..ops {
        let key = rng.gen_range(0..key_space);
        let roll: f64 = rng.gen();
        let op = if roll < flush_p {
            Op::Flush
        } else if roll < flush_p + merge_p {
            Op::Merge
        } else {
            match rng.gen_range(0..10) {
                0..=3 => Op::Insert { doc: shape_doc(rng, key) },
                4..=7 => Op::Upsert { doc: shape_doc(rng, key) },
                _ => Op::Delete { key },
            }
        };
        out.push(op);
    }
    out
}
