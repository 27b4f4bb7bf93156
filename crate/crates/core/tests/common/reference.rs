//! Straightforward evaluator for query descriptions over decoded documents.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use indexmap::IndexMap;
use tuplecompact::query::{AggFn, ExprOp, ExprSpec, PredSpec, QuerySpec};
use tuplecompact::{Doc, PathExpr, PathStep};

type Env = Vec<(String, Doc)>;

fn walk(doc: &Doc, steps: &[PathStep]) -> Option<Doc> {
    let mut cur = doc.clone();
    for (i, step) in steps.iter().enumerate() {
        cur = match (step, cur) {
            (PathStep::Field(f), Doc::Object(m)) => m.get(f)?.clone(),
            (PathStep::Index(n), Doc::Array(items)) => items.get(*n)?.clone(),
            (PathStep::Wildcard, Doc::Array(items)) => {
                return Some(Doc::Array(items.iter().filter_map(|d| walk(d, &steps[i + 1..])).collect()));
            }
            _ => return None,
        };
    }
    Some(cur)
}

fn path_value(text: &str, rec: &Doc, env: &Env) -> Option<Doc> {
    if text == "*" {
        return Some(rec.clone());
    }
    let path = PathExpr::parse(text).unwrap();
    let steps = path.steps();
    if let Some(PathStep::Field(first)) = steps.first() {
        if let Some((_, v)) = env.iter().rev().find(|(n, _)| n == first) {
            return walk(v, &steps[1..]);
        }
    }
    walk(rec, steps)
}

fn eval(e: &ExprSpec, rec: &Doc, env: &Env) -> Option<Doc> {
    match e {
        ExprSpec::Path(p) | ExprSpec::Op(ExprOp::Path(p)) => path_value(p, rec, env),
        ExprSpec::Op(ExprOp::Lit(d)) => Some(d.clone()),
        ExprSpec::Op(ExprOp::Lower(x)) => match eval(x, rec, env)? {
            Doc::String(s) => Some(Doc::String(s.to_lowercase())),
            _ => None,
        },
        ExprSpec::Op(ExprOp::Length(x)) => match eval(x, rec, env)? {
            Doc::String(s) => Some(Doc::Int(s.chars().count() as i64)),
            Doc::Array(a) => Some(Doc::Int(a.len() as i64)),
            _ => None,
        },
    }
}

fn class(d: &Doc) -> u8 {
    match d {
        Doc::Null => 0,
        Doc::Bool(_) => 1,
        Doc::Int(_) | Doc::Double(_) => 2,
        Doc::String(_) => 3,
        Doc::Array(_) => 4,
        Doc::Object(_) => 5,
    }
}

fn num(d: &Doc) -> f64 {
    match d {
        Doc::Int(v) => *v as f64,
        Doc::Double(v) => *v,
        _ => unreachable!(),
    }
}

pub fn order(a: &Doc, b: &Doc) -> Ordering {
    if class(a) != class(b) {
        return class(a).cmp(&class(b));
    }
    match (a, b) {
        (Doc::Int(x), Doc::Int(y)) => x.cmp(y),
        (Doc::Double(x), Doc::Double(y)) => x.total_cmp(y),
        (Doc::Int(_), Doc::Double(_)) => num(a).partial_cmp(&num(b)).unwrap().then(Ordering::Less),
        (Doc::Double(_), Doc::Int(_)) => num(a).partial_cmp(&num(b)).unwrap().then(Ordering::Greater),
        (Doc::Bool(x), Doc::Bool(y)) => x.cmp(y),
        (Doc::String(x), Doc::String(y)) => x.cmp(y),
        (Doc::Array(x), Doc::Array(y)) => x
            .iter()
            .zip(y)
            .map(|(l, r)| order(l, r))
            .find(|o| o.is_ne())
            .unwrap_or(x.len().cmp(&y.len())),
        (Doc::Object(x), Doc::Object(y)) => x
            .iter()
            .zip(y)
            .map(|((lk, lv), (rk, rv))| lk.cmp(rk).then_with(|| order(lv, rv)))
            .find(|o| o.is_ne())
            .unwrap_or(x.len().cmp(&y.len())),
        _ => Ordering::Equal,
    }
}

fn order_opt(a: Option<&Doc>, b: Option<&Doc>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => order(x, y),
        (x, y) => x.is_some().cmp(&y.is_some()),
    }
}

/// `Some(bool)` for true/false, `None` for unknown.
fn test(p: &PredSpec, rec: &Doc, env: &mut Env) -> Option<bool> {
    let cmp = |l: &ExprSpec, r: &ExprSpec, env: &Env, f: fn(Ordering) -> bool| -> Option<bool> {
        let (l, r) = (eval(l, rec, env)?, eval(r, rec, env)?);
        if matches!(l, Doc::Null) || matches!(r, Doc::Null) || class(&l) != class(&r) {
            return None;
        }
        let o = if class(&l) == 2 { num(&l).partial_cmp(&num(&r)).unwrap() } else { order(&l, &r) };
        Some(f(o))
    };
    match p {
        PredSpec::Eq(l, r) => cmp(l, r, env, |o| o.is_eq()),
        PredSpec::Ne(l, r) => cmp(l, r, env, |o| o.is_ne()),
        PredSpec::Lt(l, r) => cmp(l, r, env, |o| o.is_lt()),
        PredSpec::Le(l, r) => cmp(l, r, env, |o| o.is_le()),
        PredSpec::Gt(l, r) => cmp(l, r, env, |o| o.is_gt()),
        PredSpec::Ge(l, r) => cmp(l, r, env, |o| o.is_ge()),
        PredSpec::And(ps) => {
            let rs: Vec<_> = ps.iter().map(|p| test(p, rec, env)).collect();
            if rs.contains(&Some(false)) {
                Some(false)
            } else if rs.iter().all(|r| *r == Some(true)) {
                Some(true)
            } else {
                None
            }
        }
        PredSpec::Or(ps) => {
            let rs: Vec<_> = ps.iter().map(|p| test(p, rec, env)).collect();
            if rs.contains(&Some(true)) {
                Some(true)
            } else if rs.iter().all(|r| *r == Some(false)) {
                Some(false)
            } else {
                None
            }
        }
        PredSpec::Not(p) => test(p, rec, env).map(|b| !b),
        PredSpec::Exists(e) => Some(eval(e, rec, env).is_some()),
        PredSpec::Some { within, var, satisfies } => {
            let Some(Doc::Array(items)) = eval(within, rec, env) else { return None };
            let mut rs = Vec::new();
            for item in items {
                env.push((var.clone(), item));
                rs.push(test(satisfies, rec, env));
                env.pop();
            }
            if rs.contains(&Some(true)) {
                Some(true)
            } else if rs.iter().all(|r| *r == Some(false)) {
                Some(false)
            } else {
                None
            }
        }
    }
}

fn aggregate(f: AggFn, star: bool, values: &[Option<Doc>]) -> Doc {
    let present: Vec<&Doc> = values.iter().flatten().filter(|d| !matches!(d, Doc::Null)).collect();
    match f {
        AggFn::Count if star => Doc::Int(values.len() as i64),
        AggFn::Count => Doc::Int(present.len() as i64),
        AggFn::Sum | AggFn::Avg => {
            let nums: Vec<&Doc> = present.into_iter().filter(|d| class(d) == 2).collect();
            if nums.is_empty() {
                return Doc::Null;
            }
            if f == AggFn::Avg {
                return Doc::Double(nums.iter().map(|d| num(d)).sum::<f64>() / nums.len() as f64);
            }
            if nums.iter().all(|d| matches!(d, Doc::Int(_))) {
                let s: i128 = nums.iter().map(|d| d.as_i64().unwrap() as i128).sum();
                i64::try_from(s).map(Doc::Int).unwrap_or(Doc::Double(s as f64))
            } else {
                Doc::Double(nums.iter().map(|d| num(d)).sum())
            }
        }
        AggFn::Min => present.into_iter().min_by(|a, b| order(a, b)).cloned().unwrap_or(Doc::Null),
        AggFn::Max => present.into_iter().max_by(|a, b| order(a, b)).cloned().unwrap_or(Doc::Null),
    }
}

/// Evaluates `spec` over `records`.
pub fn run(spec: &QuerySpec, records: &[Doc]) -> Vec<Doc> {
    let mut bound: Vec<(Doc, Env)> = Vec::new();
    for rec in records {
        match &spec.unnest {
            None => bound.push((rec.clone(), Vec::new())),
            Some(u) => {
                if let Some(Doc::Array(items)) = path_value(&u.path, rec, &Vec::new()) {
                    for item in items {
                        bound.push((rec.clone(), vec![(u.var.clone(), item)]));
                    }
                }
            }
        }
    }
    bound.retain_mut(|(rec, env)| spec.filter.as_ref().map_or(true, |p| test(p, rec, env) == Some(true)));

    let mut columns: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    if !spec.group_by.is_empty() || !spec.aggregates.is_empty() {
        columns.extend(spec.group_by.iter().map(|g| g.name.clone()));
        columns.extend(spec.aggregates.iter().map(|a| a.name.clone()));
        let mut groups: BTreeMap<String, (Vec<Option<Doc>>, Vec<&(Doc, Env)>)> = BTreeMap::new();
        for b in &bound {
            let key: Vec<Option<Doc>> = spec.group_by.iter().map(|g| eval(&g.expr, &b.0, &b.1)).collect();
            let id = serde_json::to_string(&key).unwrap()
                + &key.iter().map(|k| if k.is_none() { 'm' } else { 'v' }).collect::<String>();
            groups.entry(id).or_insert_with(|| (key, Vec::new())).1.push(b);
        }
        if spec.group_by.is_empty() && groups.is_empty() {
            groups.insert(String::new(), (Vec::new(), Vec::new()));
        }
        for (key, members) in groups.into_values() {
            let mut row = IndexMap::new();
            for (g, k) in spec.group_by.iter().zip(key) {
                if let Some(k) = k {
                    row.insert(g.name.clone(), k);
                }
            }
            for a in &spec.aggregates {
                let values: Vec<Option<Doc>> = members
                    .iter()
                    .map(|(rec, env)| a.arg.as_ref().and_then(|e| eval(e, rec, env)))
                    .collect();
                row.insert(a.name.clone(), aggregate(a.func, a.arg.is_none(), &values));
            }
            rows.push(Doc::Object(row));
        }
    } else {
        columns.extend(spec.select.iter().map(|s| s.name.clone()));
        for (rec, env) in &bound {
            let mut row = IndexMap::new();
            for s in &spec.select {
                if let Some(v) = eval(&s.expr, rec, env) {
                    row.insert(s.name.clone(), v);
                }
            }
            rows.push(Doc::Object(row));
        }
    }
    rows.sort_by(|a, b| {
        let keyed = spec.order_by.iter().map(|k| {
            let o = order_opt(a.get(&k.key), b.get(&k.key));
            if k.desc {
                o.reverse()
            } else {
                o
            }
        });
        let rest = columns.iter().map(|c| order_opt(a.get(c), b.get(c)));
        keyed.chain(rest).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    });
    if let Some(n) = spec.limit {
        rows.truncate(n);
    }
    rows
}

fn close(a: &Doc, b: &Doc) -> bool {
    match (a, b) {
        (Doc::Double(x), Doc::Double(y)) => x == y || (x - y).abs() <= 1e-9 * x.abs().max(y.abs()),
        (Doc::Array(x), Doc::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(l, r)| close(l, r)),
        (Doc::Object(x), Doc::Object(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|((lk, lv), (rk, rv))| lk == rk && close(lv, rv))
        }
        _ => a == b,
    }
}

/// Row lists equal up to floating-point rounding in aggregates.
pub fn rows_match(a: &[Doc], b: &[Doc]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(x, y))
}
