//! Query descriptions over the synthetic corpora.

pub const TWEETS_COUNT: &str = r#"{"aggregates":[{"fn":"count","as":"n"}]}"#;

pub const TWEETS_TOP_USERS_BY_LENGTH: &str = r#"{
    "group_by":[{"expr":"user.name","as":"name"}],
    "aggregates":[{"fn":"avg","arg":{"length":"text"},"as":"avg_len"},{"fn":"count","as":"n"}],
    "order_by":[{"key":"avg_len","desc":true}],
    "limit":10}"#;

pub const TWEETS_JOBS_HASHTAG: &str = r#"{
    "where":{"some":{"in":"entities.hashtags","as":"h","satisfies":{"eq":[{"lower":"h.text"},{"lit":"jobs"}]}}},
    "group_by":[{"expr":"user.name","as":"name"}],
    "aggregates":[{"fn":"count","as":"n"}],
    "order_by":[{"key":"n","desc":true}],
    "limit":10}"#;

pub const TWEETS_BY_COUNTRY: &str = r#"{
    "where":{"and":[{"exists":"place"},{"ne":["lang",{"lit":"ja"}]}]},
    "group_by":[{"expr":"place.country","as":"country"},{"expr":"lang","as":"lang"}],
    "aggregates":[{"fn":"sum","arg":"retweet_count","as":"retweets"},{"fn":"max","arg":"user.followers_count","as":"top"}]}"#;

pub const SENSORS_COUNT_READINGS: &str = r#"{
    "unnest":{"path":"readings","as":"r"},
    "aggregates":[{"fn":"count","as":"n"}]}"#;

pub const SENSORS_MAX_TEMP: &str = r#"{
    "unnest":{"path":"readings","as":"r"},
    "group_by":[{"expr":"sensor_id","as":"sid"}],
    "aggregates":[{"fn":"max","arg":"r.temp","as":"max_temp"}]}"#;

pub const SENSORS_TOP_AVG: &str = r#"{
    "unnest":{"path":"readings","as":"r"},
    "where":{"gt":["r.timestamp",{"lit":1556496000000}]},
    "group_by":[{"expr":"sensor_id","as":"sid"}],
    "aggregates":[{"fn":"avg","arg":"r.temp","as":"avg_temp"}],
    "order_by":[{"key":"avg_temp","desc":true}],
    "limit":10}"#;

pub const PUBLICATIONS_WITH_ARRAY_SUBJECTS: &str = r#"{
    "where":{"exists":"static_data.fullrecord_metadata.category_info.subjects.subject[0]"},
    "aggregates":[{"fn":"count","as":"n"}]}"#;

pub const SHAPES: &[&str] = &[
    r#"{"aggregates":[{"fn":"count","as":"n"},{"fn":"count","arg":"age","as":"with_age"},{"fn":"sum","arg":"score","as":"score"}]}"#,
    r#"{"group_by":[{"expr":"age","as":"age"}],"aggregates":[{"fn":"count","as":"n"},{"fn":"min","arg":"name","as":"first"}]}"#,
    r#"{"where":{"not":{"eq":["address.city",{"lit":"Irvine"}]}},"select":[{"expr":"id","as":"id"},{"expr":"address","as":"a"}]}"#,
    r#"{"unnest":{"path":"tags","as":"t"},"group_by":[{"expr":"t","as":"tag"}],"aggregates":[{"fn":"count","as":"n"}]}"#,
    r#"{"where":{"or":[{"lt":["age",{"lit":30}]},{"eq":["age",{"lit":"old"}]}]},"select":[{"expr":"*","as":"rec"}],"order_by":[{"key":"rec"}],"limit":25}"#,
    r#"{"where":{"some":{"in":"tags","as":"t","satisfies":{"ge":["t",{"lit":3}]}}},"group_by":[{"expr":"name","as":"name"}],"aggregates":[{"fn":"avg","arg":"age","as":"age"},{"fn":"max","arg":{"length":"tags"},"as":"tags"}]}"#,
];
