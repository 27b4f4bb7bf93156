//! Parallel query execution over partition snapshots.
//!
//! A query is a small structured plan: scan, optional unnest, filter,
//! then either grouped aggregation, global aggregation or projection,
//! followed by order-by and limit. One executor runs per partition.
//! Grouped plans repartition rows by group key through bounded channels;
//! such plans first publish every partition's schemas in a
//! [`SchemaRegistry`] so that any executor can resolve records it did not
//! scan.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use crate::doc::{navigate, Doc, PathExpr, PathStep};
use crate::lsm::{PartitionSnapshot, SourceId};
use crate::record::{decode, get_values, project, tag_scans, DeclaredFields, RecordError, VbRecord};
use crate::schema::SchemaStore;

const BATCH: usize = 256;
const CHANNEL_BATCHES: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("plan error: {0}")]
    Plan(String),
    #[error("dataset {0:?} does not exist")]
    UnknownDataset(String),
    #[error("no schema registered for partition {partition} source {origin:?}")]
    RegistryMiss { partition: usize, origin: SourceId },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("executor panicked")]
    Executor,
}

fn plan_err<T>(msg: impl Into<String>) -> Result<T, QueryError> {
    Err(QueryError::Plan(msg.into()))
}

// ---------------------------------------------------------------------------
// Query description

/// Expression: a bare string is a path; objects select a function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprSpec {
    Path(String),
    Op(ExprOp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExprOp {
    Path(String),
    Lit(Doc),
    Lower(Box<ExprSpec>),
    Length(Box<ExprSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredSpec {
    Eq(ExprSpec, ExprSpec),
    Ne(ExprSpec, ExprSpec),
    Lt(ExprSpec, ExprSpec),
    Le(ExprSpec, ExprSpec),
    Gt(ExprSpec, ExprSpec),
    Ge(ExprSpec, ExprSpec),
    And(Vec<PredSpec>),
    Or(Vec<PredSpec>),
    Not(Box<PredSpec>),
    /// True when the value is not MISSING.
    Exists(ExprSpec),
    /// True when some item of the `in` array satisfies the body.
    Some {
        #[serde(rename = "in")]
        within: ExprSpec,
        #[serde(rename = "as")]
        var: String,
        satisfies: Box<PredSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnnestSpec {
    pub path: String,
    #[serde(rename = "as")]
    pub var: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedExpr {
    pub expr: ExprSpec,
    #[serde(rename = "as")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggSpec {
    #[serde(rename = "fn")]
    pub func: AggFn,
    /// Omitted for `count(*)`.
    #[serde(default)]
    pub arg: Option<ExprSpec>,
    #[serde(rename = "as")]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderKey {
    pub key: String,
    #[serde(default)]
    pub desc: bool,
}

/// Structured query description, usually read from JSON.
///
/// Paths are relative to the scanned record unless their first step names
/// a variable bound by `unnest` or `some`, in which case they are relative
/// to that item. The string `"*"` selects the whole record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub unnest: Option<UnnestSpec>,
    #[serde(default, rename = "where")]
    pub filter: Option<PredSpec>,
    #[serde(default)]
    pub group_by: Vec<NamedExpr>,
    #[serde(default)]
    pub aggregates: Vec<AggSpec>,
    #[serde(default)]
    pub select: Vec<NamedExpr>,
    #[serde(default)]
    pub order_by: Vec<OrderKey>,
    #[serde(default)]
    pub limit: Option<usize>,
}

impl QuerySpec {
    pub fn from_json(text: &str) -> Result<QuerySpec, QueryError> {
        serde_json::from_str(text).map_err(|e| QueryError::Plan(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Compiled plan

/// Connector between operator groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Exchange {
    Local,
    /// Rows are routed to executor `hash(group key) % P`.
    HashPartition,
}

impl Exchange {
    pub fn is_local(self) -> bool {
        self == Exchange::Local
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    /// Index into `Plan::record_paths`.
    Rec(usize),
    Whole,
    /// Bound variable `slot` (0 is the unnest variable), then `sub`.
    Var { slot: usize, sub: Vec<PathStep> },
    Lit(Doc),
    Lower(Box<Expr>),
    Length(Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
enum Pred {
    Cmp(CmpOp, Expr, Expr),
    And(Vec<Pred>),
    Or(Vec<Pred>),
    Not(Box<Pred>),
    Exists(Expr),
    Some { within: Expr, slot: usize, body: Box<Pred> },
}

#[derive(Debug, Clone)]
struct Unnest {
    /// Index into `record_paths` of the unnested array.
    source: usize,
    /// With pushdown, items reduced to this one sub-path.
    scalar_sub: Option<Vec<PathStep>>,
}

/// A compiled, executable plan.
#[derive(Debug, Clone)]
pub struct Plan {
    pub dataset: Option<String>,
    pub pushdown: bool,
    /// Paths extracted in one pass at the scan when pushdown is on. Empty
    /// when pushdown is off or the query reads no fields.
    pub pushed_paths: Vec<PathExpr>,
    /// Whether the scan decodes whole records.
    pub reads_whole_record: bool,
    pub exchange: Exchange,
    record_paths: Vec<PathExpr>,
    unnest: Option<Unnest>,
    filter: Option<Pred>,
    group_keys: Vec<(String, Expr)>,
    aggs: Vec<(String, AggFn, Option<Expr>)>,
    select: Vec<(String, Expr)>,
    order_by: Vec<(usize, bool)>,
    limit: Option<usize>,
    columns: Vec<String>,
}

impl Plan {
    /// Names of the output columns, in order.
    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// Distinct record-level paths the query reads.
    pub fn record_paths(&self) -> &[PathExpr] {
        &self.record_paths
    }

    pub fn has_nonlocal_exchange(&self) -> bool {
        !self.exchange.is_local()
    }
}

struct Binder {
    record_paths: Vec<PathExpr>,
    whole: bool,
    /// Variable name, source path steps (record-relative), per slot.
    vars: Vec<(String, Vec<PathStep>)>,
    scope: Vec<usize>,
    /// Full record-relative paths reached through variables.
    var_paths: Vec<PathExpr>,
    /// Distinct sub-paths used on the unnest variable.
    unnest_subs: Vec<Vec<PathStep>>,
}

impl Binder {
    fn record_path(&mut self, path: PathExpr) -> usize {
        if let Some(i) = self.record_paths.iter().position(|p| *p == path) {
            return i;
        }
        self.record_paths.push(path);
        self.record_paths.len() - 1
    }

    fn path(&mut self, text: &str) -> Result<Expr, QueryError> {
        if text == "*" {
            self.whole = true;
            return Ok(Expr::Whole);
        }
        let path = PathExpr::parse(text).map_err(|e| QueryError::Plan(format!("bad path {text:?}: {e}")))?;
        if let Some(PathStep::Field(first)) = path.steps().first() {
            if let Some(&slot) = self.scope.iter().rev().find(|&&s| self.vars[s].0 == *first) {
                let sub = path.steps()[1..].to_vec();
                let mut full = self.vars[slot].1.clone();
                full.push(PathStep::Wildcard);
                full.extend(sub.iter().cloned());
                self.var_paths.push(PathExpr::new(full).expect("non-empty"));
                if slot == 0 && !self.unnest_subs.contains(&sub) {
                    self.unnest_subs.push(sub.clone());
                }
                return Ok(Expr::Var { slot, sub });
            }
        }
        Ok(Expr::Rec(self.record_path(path)))
    }

    fn expr(&mut self, spec: &ExprSpec) -> Result<Expr, QueryError> {
        Ok(match spec {
            ExprSpec::Path(p) | ExprSpec::Op(ExprOp::Path(p)) => self.path(p)?,
            ExprSpec::Op(ExprOp::Lit(d)) => Expr::Lit(d.clone()),
            ExprSpec::Op(ExprOp::Lower(e)) => Expr::Lower(Box::new(self.expr(e)?)),
            ExprSpec::Op(ExprOp::Length(e)) => Expr::Length(Box::new(self.expr(e)?)),
        })
    }

    /// Record-relative steps of an expression that names a path, for use
    /// as the source of a variable.
    fn source_steps(&self, e: &Expr) -> Option<Vec<PathStep>> {
        match e {
            Expr::Rec(i) => Some(self.record_paths[*i].steps().to_vec()),
            Expr::Var { slot, sub } => {
                let mut steps = self.vars[*slot].1.clone();
                steps.push(PathStep::Wildcard);
                steps.extend(sub.iter().cloned());
                Some(steps)
            }
            _ => None,
        }
    }

    fn pred(&mut self, spec: &PredSpec) -> Result<Pred, QueryError> {
        let cmp = |b: &mut Binder, op, l: &ExprSpec, r: &ExprSpec| -> Result<Pred, QueryError> {
            Ok(Pred::Cmp(op, b.expr(l)?, b.expr(r)?))
        };
        Ok(match spec {
            PredSpec::Eq(l, r) => cmp(self, CmpOp::Eq, l, r)?,
            PredSpec::Ne(l, r) => cmp(self, CmpOp::Ne, l, r)?,
            PredSpec::Lt(l, r) => cmp(self, CmpOp::Lt, l, r)?,
            PredSpec::Le(l, r) => cmp(self, CmpOp::Le, l, r)?,
            PredSpec::Gt(l, r) => cmp(self, CmpOp::Gt, l, r)?,
            PredSpec::Ge(l, r) => cmp(self, CmpOp::Ge, l, r)?,
            PredSpec::And(ps) => Pred::And(ps.iter().map(|p| self.pred(p)).collect::<Result<_, _>>()?),
            PredSpec::Or(ps) => Pred::Or(ps.iter().map(|p| self.pred(p)).collect::<Result<_, _>>()?),
            PredSpec::Not(p) => Pred::Not(Box::new(self.pred(p)?)),
            PredSpec::Exists(e) => Pred::Exists(self.expr(e)?),
            PredSpec::Some { within, var, satisfies } => {
                let within = self.expr(within)?;
                let Some(steps) = self.source_steps(&within) else {
                    return plan_err(format!("some {var:?}: the collection must be a path"));
                };
                self.vars.push((var.clone(), steps));
                let slot = self.vars.len() - 1;
                self.scope.push(slot);
                let body = self.pred(satisfies)?;
                self.scope.pop();
                Pred::Some {
                    within,
                    slot,
                    body: Box::new(body),
                }
            }
        })
    }
}

fn produces_string(e: &Expr) -> bool {
    matches!(e, Expr::Lower(_) | Expr::Lit(Doc::String(_)))
}

/// Compiles a query description. `dataset` is the name of the dataset
/// being queried; a description naming another dataset is rejected.
pub fn plan(spec: &QuerySpec, dataset: &str, pushdown: bool) -> Result<Plan, QueryError> {
    if let Some(name) = &spec.dataset {
        if name != dataset {
            return Err(QueryError::UnknownDataset(name.clone()));
        }
    }
    let mut b = Binder {
        record_paths: Vec::new(),
        whole: false,
        vars: Vec::new(),
        scope: Vec::new(),
        var_paths: Vec::new(),
        unnest_subs: Vec::new(),
    };
    let mut unnest = None;
    if let Some(u) = &spec.unnest {
        let path = PathExpr::parse(&u.path).map_err(|e| QueryError::Plan(format!("bad unnest path: {e}")))?;
        if path.has_wildcard() {
            return plan_err("unnest path cannot contain [*]");
        }
        let source = b.record_path(path.clone());
        b.vars.push((u.var.clone(), path.steps().to_vec()));
        b.scope.push(0);
        unnest = Some(Unnest {
            source,
            scalar_sub: None,
        });
    }
    let filter = spec.filter.as_ref().map(|p| b.pred(p)).transpose()?;

    let mut columns = Vec::new();
    let mut add_column = |name: &str| -> Result<(), QueryError> {
        if columns.iter().any(|c| c == name) {
            return plan_err(format!("duplicate output column {name:?}"));
        }
        columns.push(name.to_owned());
        Ok(())
    };
    let mut group_keys = Vec::new();
    for g in &spec.group_by {
        add_column(&g.name)?;
        group_keys.push((g.name.clone(), b.expr(&g.expr)?));
    }
    let mut aggs = Vec::new();
    for a in &spec.aggregates {
        add_column(&a.name)?;
        let arg = a.arg.as_ref().map(|e| b.expr(e)).transpose()?;
        match (a.func, &arg) {
            (AggFn::Count, _) => {}
            (f, None) => return plan_err(format!("{f:?} needs an argument")),
            (AggFn::Sum | AggFn::Avg, Some(e)) if produces_string(e) => {
                return plan_err(format!("{:?} over a string expression", a.func));
            }
            _ => {}
        }
        aggs.push((a.name.clone(), a.func, arg));
    }
    let mut select = Vec::new();
    if !spec.select.is_empty() && (!group_keys.is_empty() || !aggs.is_empty()) {
        return plan_err("select cannot be combined with group_by or aggregates");
    }
    for s in &spec.select {
        add_column(&s.name)?;
        select.push((s.name.clone(), b.expr(&s.expr)?));
    }
    if columns.is_empty() {
        return plan_err("query returns no columns");
    }
    let mut order_by = Vec::new();
    for k in &spec.order_by {
        let Some(i) = columns.iter().position(|c| *c == k.key) else {
            return plan_err(format!("order_by key {:?} is not an output column", k.key));
        };
        order_by.push((i, k.desc));
    }

    let exchange = if group_keys.is_empty() {
        Exchange::Local
    } else {
        Exchange::HashPartition
    };

    let mut pushed_paths = Vec::new();
    if pushdown && !b.whole {
        if let Some(u) = &mut unnest {
            if let [sub] = b.unnest_subs.as_slice() {
                if !sub.is_empty() {
                    u.scalar_sub = Some(sub.clone());
                }
            }
        }
        let unnest_source = unnest.as_ref().map(|u| u.source);
        for (i, p) in b.record_paths.iter().enumerate() {
            // An unnested array read only through its variable is covered by
            // the variable's wildcard paths.
            if Some(i) == unnest_source && !b.var_paths.iter().any(|v| v.steps().starts_with(p.steps())) {
                pushed_paths.push(p.join(&[PathStep::Wildcard]));
                continue;
            }
            if Some(i) != unnest_source && !pushed_paths.contains(p) {
                pushed_paths.push(p.clone());
            }
        }
        for v in &b.var_paths {
            if !pushed_paths.contains(v) {
                pushed_paths.push(v.clone());
            }
        }
    }
    if !pushdown || b.whole {
        if let Some(u) = &mut unnest {
            u.scalar_sub = None;
        }
    }
    let (group_keys, aggs, select, filter) = if unnest.as_ref().is_some_and(|u| u.scalar_sub.is_some()) {
        let sub = unnest.as_ref().unwrap().scalar_sub.clone().unwrap();
        let rw = |e: Expr| rewrite_scalar(e, &sub);
        (
            group_keys.into_iter().map(|(n, e)| (n, rw(e))).collect(),
            aggs.into_iter().map(|(n, f, e)| (n, f, e.map(rw))).collect(),
            select.into_iter().map(|(n, e)| (n, rw(e))).collect(),
            filter.map(|p| rewrite_pred(p, &sub)),
        )
    } else {
        (group_keys, aggs, select, filter)
    };

    Ok(Plan {
        dataset: spec.dataset.clone(),
        pushdown,
        pushed_paths,
        reads_whole_record: b.whole,
        exchange,
        record_paths: b.record_paths,
        unnest,
        filter,
        group_keys,
        aggs,
        select,
        order_by,
        limit: spec.limit,
        columns,
    })
}

fn rewrite_scalar(e: Expr, sub: &[PathStep]) -> Expr {
    match e {
        Expr::Var { slot: 0, sub: s } if s == sub => Expr::Var { slot: 0, sub: Vec::new() },
        Expr::Lower(x) => Expr::Lower(Box::new(rewrite_scalar(*x, sub))),
        Expr::Length(x) => Expr::Length(Box::new(rewrite_scalar(*x, sub))),
        e => e,
    }
}

fn rewrite_pred(p: Pred, sub: &[PathStep]) -> Pred {
    match p {
        Pred::Cmp(op, l, r) => Pred::Cmp(op, rewrite_scalar(l, sub), rewrite_scalar(r, sub)),
        Pred::And(ps) => Pred::And(ps.into_iter().map(|p| rewrite_pred(p, sub)).collect()),
        Pred::Or(ps) => Pred::Or(ps.into_iter().map(|p| rewrite_pred(p, sub)).collect()),
        Pred::Not(p) => Pred::Not(Box::new(rewrite_pred(*p, sub))),
        Pred::Exists(e) => Pred::Exists(rewrite_scalar(e, sub)),
        Pred::Some { within, slot, body } => Pred::Some {
            within: rewrite_scalar(within, sub),
            slot,
            body: Box::new(rewrite_pred(*body, sub)),
        },
    }
}

// ---------------------------------------------------------------------------
// Values

fn rank(d: &Doc) -> u8 {
    match d {
        Doc::Null => 0,
        Doc::Bool(_) => 1,
        Doc::Int(_) | Doc::Double(_) => 2,
        Doc::String(_) => 3,
        Doc::Array(_) => 4,
        Doc::Object(_) => 5,
    }
}

/// Total order over documents: null < booleans < numbers < strings <
/// arrays < objects. Integers and doubles compare numerically; an integer
/// sorts before an equal double.
pub fn cmp_docs(a: &Doc, b: &Doc) -> Ordering {
    match (a, b) {
        (Doc::Bool(x), Doc::Bool(y)) => x.cmp(y),
        (Doc::Int(x), Doc::Int(y)) => x.cmp(y),
        (Doc::Double(x), Doc::Double(y)) => x.total_cmp(y),
        (Doc::Int(x), Doc::Double(y)) => (*x as f64).partial_cmp(y).unwrap_or(Ordering::Equal).then(Ordering::Less),
        (Doc::Double(x), Doc::Int(y)) => x.partial_cmp(&(*y as f64)).unwrap_or(Ordering::Equal).then(Ordering::Greater),
        (Doc::String(x), Doc::String(y)) => x.cmp(y),
        (Doc::Array(x), Doc::Array(y)) => {
            for (l, r) in x.iter().zip(y) {
                let c = cmp_docs(l, r);
                if c != Ordering::Equal {
                    return c;
                }
            }
            x.len().cmp(&y.len())
        }
        (Doc::Object(x), Doc::Object(y)) => {
            for ((lk, lv), (rk, rv)) in x.iter().zip(y) {
                let c = lk.cmp(rk).then_with(|| cmp_docs(lv, rv));
                if c != Ordering::Equal {
                    return c;
                }
            }
            x.len().cmp(&y.len())
        }
        _ => rank(a).cmp(&rank(b)),
    }
}

/// MISSING sorts before every value.
pub fn cmp_values(a: &Option<Doc>, b: &Option<Doc>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => cmp_docs(x, y),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tri {
    True,
    False,
    Unknown,
}

fn compare(op: CmpOp, l: &Option<Doc>, r: &Option<Doc>) -> Tri {
    let (Some(l), Some(r)) = (l, r) else { return Tri::Unknown };
    if matches!(l, Doc::Null) || matches!(r, Doc::Null) || rank(l) != rank(r) {
        return Tri::Unknown;
    }
    let ord = match (l, r) {
        (Doc::Int(x), Doc::Double(y)) => (*x as f64).partial_cmp(y).unwrap_or(Ordering::Equal),
        (Doc::Double(x), Doc::Int(y)) => x.partial_cmp(&(*y as f64)).unwrap_or(Ordering::Equal),
        (Doc::Double(x), Doc::Double(y)) => x.partial_cmp(y).unwrap_or(Ordering::Equal),
        _ => cmp_docs(l, r),
    };
    let holds = match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
    };
    if holds {
        Tri::True
    } else {
        Tri::False
    }
}

// ---------------------------------------------------------------------------
// Aggregation

/// Exact floating-point sum (Shewchuk's partials), so that totals do not
/// depend on the order rows arrive in.
#[derive(Debug, Clone, Default)]
struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(mut n) = p.len().checked_sub(1) else { return 0.0 };
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            n -= 1;
            let x = hi;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

#[derive(Debug, Clone)]
enum Acc {
    Count(u64),
    Sum { ints: i128, doubles: ExactSum, any_double: bool, n: u64 },
    Min(Option<Doc>),
    Max(Option<Doc>),
}

impl Acc {
    fn new(f: AggFn) -> Acc {
        match f {
            AggFn::Count => Acc::Count(0),
            AggFn::Sum | AggFn::Avg => Acc::Sum {
                ints: 0,
                doubles: ExactSum::default(),
                any_double: false,
                n: 0,
            },
            AggFn::Min => Acc::Min(None),
            AggFn::Max => Acc::Max(None),
        }
    }

    /// `star` marks `count(*)`, which counts rows rather than values.
    fn add(&mut self, value: Option<&Doc>, star: bool) {
        match self {
            Acc::Count(c) => {
                if star || value.is_some_and(|v| !matches!(v, Doc::Null)) {
                    *c += 1;
                }
            }
            Acc::Sum { ints, doubles, any_double, n } => match value {
                Some(Doc::Int(v)) => {
                    *ints += *v as i128;
                    *n += 1;
                }
                Some(Doc::Double(v)) => {
                    doubles.add(*v);
                    *any_double = true;
                    *n += 1;
                }
                _ => {}
            },
            Acc::Min(_) | Acc::Max(_) => {
                let Some(v) = value.filter(|v| !matches!(v, Doc::Null)) else { return };
                let want = if matches!(self, Acc::Min(_)) { Ordering::Less } else { Ordering::Greater };
                let (Acc::Min(cur) | Acc::Max(cur)) = self else { unreachable!() };
                if cur.as_ref().map_or(true, |c| cmp_docs(v, c) == want) {
                    *cur = Some(v.clone());
                }
            }
        }
    }

    fn merge(&mut self, other: &Acc) {
        match (self, other) {
            (Acc::Count(a), Acc::Count(b)) => *a += b,
            (
                Acc::Sum { ints, doubles, any_double, n },
                Acc::Sum {
                    ints: i2,
                    doubles: d2,
                    any_double: a2,
                    n: n2,
                },
            ) => {
                *ints += i2;
                doubles.merge(d2);
                *any_double |= a2;
                *n += n2;
            }
            (me @ (Acc::Min(_) | Acc::Max(_)), Acc::Min(Some(v)) | Acc::Max(Some(v))) => me.add(Some(v), false),
            _ => {}
        }
    }

    fn finish(&self, f: AggFn) -> Doc {
        match self {
            Acc::Count(c) => Doc::Int(*c as i64),
            Acc::Sum { ints, doubles, any_double, n } => {
                if *n == 0 {
                    return Doc::Null;
                }
                let total = || {
                    let mut s = doubles.clone();
                    s.add(*ints as f64);
                    s.value()
                };
                match f {
                    AggFn::Avg => Doc::Double(total() / *n as f64),
                    _ if !*any_double => match i64::try_from(*ints) {
                        Ok(v) => Doc::Int(v),
                        Err(_) => Doc::Double(*ints as f64),
                    },
                    _ => Doc::Double(total()),
                }
            }
            Acc::Min(v) | Acc::Max(v) => v.clone().unwrap_or(Doc::Null),
        }
    }
}

// ---------------------------------------------------------------------------
// Registry

/// Schema snapshots of every partition's components, keyed by partition
/// and source. Immutable once execution starts.
#[derive(Default)]
pub struct SchemaRegistry {
    entries: HashMap<(usize, SourceId), Option<Arc<SchemaStore>>>,
    declared: HashMap<usize, DeclaredFields>,
    broadcasts: usize,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publishes one partition's schemas to all executors.
    pub fn broadcast(&mut self, snap: &PartitionSnapshot) {
        for (source, schema) in snap.schemas() {
            self.entries.insert((snap.partition, source), schema);
        }
        self.declared.insert(snap.partition, snap.declared.clone());
        self.broadcasts += 1;
    }

    pub fn broadcasts(&self) -> usize {
        self.broadcasts
    }

    /// Schema for records from `source` of `partition`; `Ok(None)` for
    /// uncompacted sources.
    pub fn lookup(&self, partition: usize, source: SourceId) -> Result<(Option<&SchemaStore>, &DeclaredFields), QueryError> {
        match (self.entries.get(&(partition, source)), self.declared.get(&partition)) {
            (Some(s), Some(d)) => Ok((s.as_deref(), d)),
            _ => Err(QueryError::RegistryMiss { partition, origin: source }),
        }
    }
}

// ---------------------------------------------------------------------------
// Execution

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct QueryStats {
    pub partitions: usize,
    pub broadcasts: usize,
    pub records_scanned: u64,
    /// Tag-vector passes made by all executors.
    pub tag_scans: u64,
    pub rows_exchanged: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub columns: Vec<String>,
    pub rows: Vec<Doc>,
    pub stats: QueryStats,
}

/// Record as it flows between executors: the scanning partition and source
/// identify the schema needed to read `rec`.
#[derive(Debug, Clone)]
pub struct TaggedRecord {
    pub partition: usize,
    pub source: SourceId,
    /// Carried only when downstream operators still read record fields.
    pub rec: Option<Arc<VbRecord>>,
    pub key: Vec<Option<Doc>>,
    /// Aggregate arguments already evaluated upstream, when possible.
    pub args: Option<Vec<Option<Doc>>>,
    /// Unnest item bound to this row.
    pub item: Option<Option<Doc>>,
}

/// Field access for one record: a consolidated projection, or per-path
/// passes over the record when pushdown is off.
enum View<'r> {
    Pruned(Doc),
    Lazy {
        rec: &'r VbRecord,
        schema: Option<&'r SchemaStore>,
        declared: &'r DeclaredFields,
        cache: RefCell<HashMap<usize, Option<Doc>>>,
    },
}

struct Ctx<'p, 'r> {
    plan: &'p Plan,
    view: &'r View<'r>,
    vars: RefCell<Vec<Option<Doc>>>,
}

impl Ctx<'_, '_> {
    fn record(&self, i: usize) -> Result<Option<Doc>, QueryError> {
        let path = &self.plan.record_paths[i];
        match self.view {
            View::Pruned(doc) => Ok(navigate(doc, path.steps())),
            View::Lazy {
                rec,
                schema,
                declared,
                cache,
            } => {
                if let Some(v) = cache.borrow().get(&i) {
                    return Ok(v.clone());
                }
                let v = get_values(rec, *schema, declared, std::slice::from_ref(path))?.pop().flatten();
                cache.borrow_mut().insert(i, v.clone());
                Ok(v)
            }
        }
    }

    fn whole(&self) -> Result<Option<Doc>, QueryError> {
        match self.view {
            View::Pruned(doc) => Ok(Some(doc.clone())),
            View::Lazy { rec, schema, declared, .. } => Ok(Some(decode(rec, *schema, declared)?)),
        }
    }

    fn eval(&self, e: &Expr) -> Result<Option<Doc>, QueryError> {
        Ok(match e {
            Expr::Rec(i) => self.record(*i)?,
            Expr::Whole => self.whole()?,
            Expr::Var { slot, sub } => {
                let vars = self.vars.borrow();
                match vars.get(*slot).and_then(Option::as_ref) {
                    Some(v) if sub.is_empty() => Some(v.clone()),
                    Some(v) => navigate(v, sub),
                    None => None,
                }
            }
            Expr::Lit(d) => Some(d.clone()),
            Expr::Lower(x) => match self.eval(x)? {
                Some(Doc::String(s)) => Some(Doc::String(s.to_lowercase())),
                _ => None,
            },
            Expr::Length(x) => match self.eval(x)? {
                Some(Doc::String(s)) => Some(Doc::Int(s.chars().count() as i64)),
                Some(Doc::Array(a)) => Some(Doc::Int(a.len() as i64)),
                _ => None,
            },
        })
    }

    fn test(&self, p: &Pred) -> Result<Tri, QueryError> {
        Ok(match p {
            Pred::Cmp(op, l, r) => compare(*op, &self.eval(l)?, &self.eval(r)?),
            Pred::And(ps) => {
                let mut out = Tri::True;
                for p in ps {
                    match self.test(p)? {
                        Tri::False => return Ok(Tri::False),
                        Tri::Unknown => out = Tri::Unknown,
                        Tri::True => {}
                    }
                }
                out
            }
            Pred::Or(ps) => {
                let mut out = Tri::False;
                for p in ps {
                    match self.test(p)? {
                        Tri::True => return Ok(Tri::True),
                        Tri::Unknown => out = Tri::Unknown,
                        Tri::False => {}
                    }
                }
                out
            }
            Pred::Not(p) => match self.test(p)? {
                Tri::True => Tri::False,
                Tri::False => Tri::True,
                Tri::Unknown => Tri::Unknown,
            },
            Pred::Exists(e) => {
                if self.eval(e)?.is_some() {
                    Tri::True
                } else {
                    Tri::False
                }
            }
            Pred::Some { within, slot, body } => {
                let Some(Doc::Array(items)) = self.eval(within)? else { return Ok(Tri::Unknown) };
                let mut out = Tri::False;
                {
                    let mut vars = self.vars.borrow_mut();
                    if vars.len() <= *slot {
                        vars.resize(*slot + 1, None);
                    }
                }
                for item in items {
                    self.vars.borrow_mut()[*slot] = Some(item);
                    match self.test(body)? {
                        Tri::True => {
                            out = Tri::True;
                            break;
                        }
                        Tri::Unknown => out = Tri::Unknown,
                        Tri::False => {}
                    }
                }
                self.vars.borrow_mut()[*slot] = None;
                out
            }
        })
    }
}

type Groups = BTreeMap<String, (Vec<Option<Doc>>, Vec<Acc>)>;

fn group_id(key: &[Option<Doc>]) -> String {
    let parts: Vec<String> = key
        .iter()
        .map(|v| v.as_ref().map_or_else(|| "!".to_owned(), Doc::to_json))
        .collect();
    parts.join("\u{0}")
}

fn new_accs(plan: &Plan) -> Vec<Acc> {
    plan.aggs.iter().map(|(_, f, _)| Acc::new(*f)).collect()
}

fn accumulate(groups: &mut Groups, plan: &Plan, key: Vec<Option<Doc>>, args: &[Option<Doc>]) {
    let entry = groups.entry(group_id(&key)).or_insert_with(|| (key, new_accs(plan)));
    for ((acc, (_, _, arg)), v) in entry.1.iter_mut().zip(&plan.aggs).zip(args) {
        acc.add(v.as_ref(), arg.is_none());
    }
}

enum Partial {
    Rows(Vec<Doc>),
    Global(Vec<Acc>),
    Sent,
}

struct Producer<'a> {
    plan: &'a Plan,
    snap: &'a PartitionSnapshot,
    registry: Option<&'a SchemaRegistry>,
    outputs: Option<Vec<Sender<Vec<TaggedRecord>>>>,
}

impl Producer<'_> {
    fn run(self) -> Result<(Partial, u64, u64, u64), QueryError> {
        let start = tag_scans();
        let plan = self.plan;
        let local: HashMap<SourceId, Option<Arc<SchemaStore>>> = self.snap.schemas().into_iter().collect();
        let mut rows = Vec::new();
        let mut global = new_accs(plan);
        let mut buffers: Vec<Vec<TaggedRecord>> = vec![Vec::new(); self.outputs.as_ref().map_or(0, Vec::len)];
        let mut scanned = 0u64;
        let mut exchanged = 0u64;
        let live = self.snap.live();
        for r in &live {
            scanned += 1;
            let (schema, declared) = match self.registry {
                Some(reg) => reg.lookup(self.snap.partition, r.source)?,
                None => (local[&r.source].as_deref(), &self.snap.declared),
            };
            let view = if plan.reads_whole_record && plan.pushdown {
                View::Pruned(decode(r.rec, schema, declared)?)
            } else if plan.pushdown {
                if plan.pushed_paths.is_empty() {
                    View::Pruned(Doc::object())
                } else {
                    View::Pruned(project(r.rec, schema, declared, &plan.pushed_paths)?)
                }
            } else {
                View::Lazy {
                    rec: r.rec,
                    schema,
                    declared,
                    cache: RefCell::new(HashMap::new()),
                }
            };
            let ctx = Ctx {
                plan,
                view: &view,
                vars: RefCell::new(Vec::new()),
            };
            let items: Vec<Option<Option<Doc>>> = match &plan.unnest {
                None => vec![None],
                Some(u) => match ctx.record(u.source)? {
                    Some(Doc::Array(items)) => match &u.scalar_sub {
                        Some(sub) => items.iter().map(|it| Some(navigate(it, sub))).collect(),
                        None => items.into_iter().map(|it| Some(Some(it))).collect(),
                    },
                    _ => Vec::new(),
                },
            };
            for item in items {
                if let Some(item) = &item {
                    *ctx.vars.borrow_mut() = vec![item.clone()];
                }
                if let Some(f) = &plan.filter {
                    if ctx.test(f)? != Tri::True {
                        continue;
                    }
                }
                if let Some(outputs) = &self.outputs {
                    let key = plan.group_keys.iter().map(|(_, e)| ctx.eval(e)).collect::<Result<Vec<_>, _>>()?;
                    let (args, rec) = if plan.pushdown {
                        let args = plan
                            .aggs
                            .iter()
                            .map(|(_, _, e)| e.as_ref().map_or(Ok(None), |e| ctx.eval(e)))
                            .collect::<Result<Vec<_>, _>>()?;
                        (Some(args), None)
                    } else {
                        (None, Some(Arc::new(r.rec.clone())))
                    };
                    let dest = (xxhash_rust::xxh3::xxh3_64(group_id(&key).as_bytes()) % outputs.len() as u64) as usize;
                    buffers[dest].push(TaggedRecord {
                        partition: self.snap.partition,
                        source: r.source,
                        rec,
                        key,
                        args,
                        item,
                    });
                    exchanged += 1;
                    if buffers[dest].len() >= BATCH {
                        let batch = std::mem::take(&mut buffers[dest]);
                        outputs[dest].send(batch).map_err(|_| QueryError::Executor)?;
                    }
                } else if !plan.aggs.is_empty() {
                    for (acc, (_, _, arg)) in global.iter_mut().zip(&plan.aggs) {
                        let v = arg.as_ref().map_or(Ok(None), |e| ctx.eval(e))?;
                        acc.add(v.as_ref(), arg.is_none());
                    }
                } else {
                    let mut row = indexmap::IndexMap::new();
                    for (name, e) in &plan.select {
                        if let Some(v) = ctx.eval(e)? {
                            row.insert(name.clone(), v);
                        }
                    }
                    rows.push(Doc::Object(row));
                }
            }
        }
        if let Some(outputs) = &self.outputs {
            for (dest, batch) in buffers.into_iter().enumerate() {
                if !batch.is_empty() {
                    outputs[dest].send(batch).map_err(|_| QueryError::Executor)?;
                }
            }
        }
        let scans = tag_scans() - start;
        let partial = if self.outputs.is_some() {
            Partial::Sent
        } else if !plan.aggs.is_empty() {
            Partial::Global(global)
        } else {
            Partial::Rows(rows)
        };
        Ok((partial, scanned, exchanged, scans))
    }
}

/// Final grouping stage: reads repartitioned rows and aggregates them,
/// resolving any remaining field accesses through the registry.
fn consume(plan: &Plan, input: Receiver<Vec<TaggedRecord>>, registry: &SchemaRegistry) -> Result<(Groups, u64), QueryError> {
    let start = tag_scans();
    let mut groups = Groups::new();
    for batch in input {
        for t in batch {
            let args = match t.args {
                Some(args) => args,
                None => {
                    let rec = t.rec.as_ref().expect("records travel when arguments are not pre-evaluated");
                    let (schema, declared) = registry.lookup(t.partition, t.source)?;
                    let view = View::Lazy {
                        rec,
                        schema,
                        declared,
                        cache: RefCell::new(HashMap::new()),
                    };
                    let ctx = Ctx {
                        plan,
                        view: &view,
                        vars: RefCell::new(t.item.clone().into_iter().collect()),
                    };
                    plan.aggs
                        .iter()
                        .map(|(_, _, e)| e.as_ref().map_or(Ok(None), |e| ctx.eval(e)))
                        .collect::<Result<Vec<_>, _>>()?
                }
            };
            accumulate(&mut groups, plan, t.key, &args);
        }
    }
    Ok((groups, tag_scans() - start))
}

fn finish_rows(plan: &Plan, mut rows: Vec<Doc>) -> Vec<Doc> {
    let col = |row: &Doc, i: usize| row.get(&plan.columns[i]).cloned();
    rows.sort_by(|a, b| {
        for &(i, desc) in &plan.order_by {
            let c = cmp_values(&col(a, i), &col(b, i));
            let c = if desc { c.reverse() } else { c };
            if c != Ordering::Equal {
                return c;
            }
        }
        for i in 0..plan.columns.len() {
            let c = cmp_values(&col(a, i), &col(b, i));
            if c != Ordering::Equal {
                return c;
            }
        }
        Ordering::Equal
    });
    if let Some(k) = plan.limit {
        rows.truncate(k);
    }
    rows
}

fn group_row(plan: &Plan, key: Vec<Option<Doc>>, accs: &[Acc]) -> Doc {
    let mut row = indexmap::IndexMap::new();
    for ((name, _), v) in plan.group_keys.iter().zip(key) {
        if let Some(v) = v {
            row.insert(name.clone(), v);
        }
    }
    for ((name, f, _), acc) in plan.aggs.iter().zip(accs) {
        row.insert(name.clone(), acc.finish(*f));
    }
    Doc::Object(row)
}

/// Runs `plan` over `snapshots`, one executor per partition. When the plan
/// repartitions rows, every partition's schemas are broadcast into a fresh
/// registry first.
pub fn execute(plan: &Plan, snapshots: &[PartitionSnapshot]) -> Result<QueryOutput, QueryError> {
    let mut registry = SchemaRegistry::new();
    if plan.has_nonlocal_exchange() {
        for snap in snapshots {
            registry.broadcast(snap);
        }
    }
    execute_with_registry(plan, snapshots, &registry)
}

/// Like [`execute`] but with a caller-provided registry. Records whose
/// schema is not registered fail with [`QueryError::RegistryMiss`].
pub fn execute_with_registry(
    plan: &Plan,
    snapshots: &[PartitionSnapshot],
    registry: &SchemaRegistry,
) -> Result<QueryOutput, QueryError> {
    let p = snapshots.len();
    let mut stats = QueryStats {
        partitions: p,
        broadcasts: registry.broadcasts(),
        ..QueryStats::default()
    };
    let shuffled = plan.has_nonlocal_exchange();
    let (senders, receivers): (Vec<_>, Vec<_>) = if shuffled {
        (0..p).map(|_| bounded::<Vec<TaggedRecord>>(CHANNEL_BATCHES)).unzip()
    } else {
        (Vec::new(), Vec::new())
    };
    let reg = shuffled.then_some(registry);

    let (partials, consumed) = std::thread::scope(|s| {
        let consumers: Vec<_> = receivers
            .into_iter()
            .map(|rx| s.spawn(move || consume(plan, rx, registry)))
            .collect();
        let producers: Vec<_> = snapshots
            .iter()
            .map(|snap| {
                let outputs = shuffled.then(|| senders.clone());
                s.spawn(move || {
                    Producer {
                        plan,
                        snap,
                        registry: reg,
                        outputs,
                    }
                    .run()
                })
            })
            .collect();
        drop(senders);
        let partials: Vec<_> = producers.into_iter().map(|h| h.join()).collect();
        let consumed: Vec<_> = consumers.into_iter().map(|h| h.join()).collect();
        (partials, consumed)
    });

    let mut rows = Vec::new();
    let mut global: Option<Vec<Acc>> = None;
    let mut first_err = None;
    for r in partials {
        match r.map_err(|_| QueryError::Executor).and_then(|r| r) {
            Ok((partial, scanned, exchanged, scans)) => {
                stats.records_scanned += scanned;
                stats.rows_exchanged += exchanged;
                stats.tag_scans += scans;
                match partial {
                    Partial::Rows(r) => rows.extend(r),
                    Partial::Global(accs) => match &mut global {
                        None => global = Some(accs),
                        Some(g) => g.iter_mut().zip(&accs).for_each(|(a, b)| a.merge(b)),
                    },
                    Partial::Sent => {}
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let mut groups = Groups::new();
    for r in consumed {
        match r.map_err(|_| QueryError::Executor).and_then(|r| r) {
            Ok((g, scans)) => {
                stats.tag_scans += scans;
                groups.extend(g);
            }
            Err(e) => {
                // A consumer failure makes producers fail to send; report
                // the consumer's cause.
                first_err = Some(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if shuffled {
        rows = groups.into_values().map(|(k, accs)| group_row(plan, k, &accs)).collect();
    } else if !plan.aggs.is_empty() {
        let accs = global.unwrap_or_else(|| new_accs(plan));
        rows = vec![group_row(plan, Vec::new(), &accs)];
    }
    Ok(QueryOutput {
        columns: plan.columns.clone(),
        rows: finish_rows(plan, rows),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_is_order_independent() {
        let xs = [1e16, 1.0, -1e16, 0.1, 0.2, 0.3, 1e-3, 7.25];
        let mut a = ExactSum::default();
        xs.iter().for_each(|&x| a.add(x));
        let mut b = ExactSum::default();
        xs.iter().rev().for_each(|&x| b.add(x));
        assert_eq!(a.value(), b.value());
        assert_eq!(a.value(), 8.851);
    }

    #[test]
    fn doc_order() {
        let docs = [
            Doc::Null,
            Doc::Bool(false),
            Doc::Int(1),
            Doc::Double(1.0),
            Doc::Double(1.5),
            Doc::String("a".into()),
            Doc::Array(vec![]),
            Doc::object(),
        ];
        for w in docs.windows(2) {
            assert_eq!(cmp_docs(&w[0], &w[1]), Ordering::Less, "{:?} < {:?}", w[0], w[1]);
        }
    }
}
