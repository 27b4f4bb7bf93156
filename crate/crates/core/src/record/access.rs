use indexmap::IndexMap;

use super::codec::{build_subtree, name_str, scalar_doc, TreeBuilder};
use super::cursor::{Cursor, Event, Nest};
use super::{DeclaredFields, RecordError, VbRecord};
use crate::doc::{navigate, Doc, PathExpr, PathStep};
use crate::schema::SchemaStore;

/// Evaluates several paths against one record in a single pass over its tag
/// vector. `None` marks a MISSING result.
///
/// Only the subtrees some path can reach are materialized; everything else
/// is skipped as the cursor moves past it.
pub fn get_values(
    rec: &VbRecord,
    schema: Option<&SchemaStore>,
    declared: &DeclaredFields,
    paths: &[PathExpr],
) -> Result<Vec<Option<Doc>>, RecordError> {
    if paths.is_empty() {
        return Ok(Vec::new());
    }
    let pruned = project(rec, schema, declared, paths)?;
    Ok(paths.iter().map(|p| navigate(&pruned, p.steps())).collect())
}

/// The record reduced to the parts `paths` can reach, read in one pass.
/// Navigating any of `paths` over the result gives the same value as over
/// the full document. Array items off every path become nulls so that
/// indexes stay aligned.
pub fn project(
    rec: &VbRecord,
    schema: Option<&SchemaStore>,
    declared: &DeclaredFields,
    paths: &[PathExpr],
) -> Result<Doc, RecordError> {
    let mut cursor = Cursor::new(rec.as_bytes())?;
    let Some(Event::Begin { nest, .. }) = cursor.next_event()? else {
        unreachable!("cursor always opens with the root");
    };
    let active: Vec<usize> = (0..paths.len()).collect();
    let mut walk = Walk {
        cursor: &mut cursor,
        schema,
        declared,
        paths,
    };
    let pruned = walk.container(nest, 0, &active)?;
    if cursor.next_event()?.is_some() {
        return Err(RecordError::Malformed {
            offset: 0,
            reason: "values after the root",
        });
    }
    Ok(pruned)
}

struct Walk<'c, 'a, 's> {
    cursor: &'c mut Cursor<'a>,
    schema: Option<&'s SchemaStore>,
    declared: &'s DeclaredFields,
    paths: &'s [PathExpr],
}

enum Step<'n> {
    Field(&'n str),
    Index(usize),
}

fn step_matches(want: &PathStep, have: &Step<'_>) -> bool {
    match (want, have) {
        (PathStep::Field(a), Step::Field(b)) => a == b,
        (PathStep::Index(a), Step::Index(b)) => a == b,
        (PathStep::Wildcard, Step::Index(_)) => true,
        _ => false,
    }
}

impl<'a> Walk<'_, 'a, '_> {
    /// Reads the children of a container whose `Begin` was just consumed,
    /// keeping only those on the way to some active path. Skipped array
    /// items leave a null placeholder so indexes stay aligned.
    fn container(&mut self, nest: Nest, depth: usize, active: &[usize]) -> Result<Doc, RecordError> {
        let mut object = IndexMap::new();
        let mut items = Vec::new();
        let mut index = 0usize;
        loop {
            let Some(event) = self.cursor.next_event()? else {
                return Err(RecordError::Malformed {
                    offset: 0,
                    reason: "record ended inside a nested value",
                });
            };
            let field = match event {
                Event::End => break,
                Event::Begin { field, .. } | Event::Value { field, .. } => field,
            };
            let name = match (nest, field) {
                (Nest::Object, Some(f)) => Some(name_str(f, self.schema, self.declared)?),
                _ => None,
            };
            let step = match name {
                Some(n) => Step::Field(n),
                None => {
                    index += 1;
                    Step::Index(index - 1)
                }
            };
            let child_active: Vec<usize> = active
                .iter()
                .copied()
                .filter(|&p| {
                    self.paths[p]
                        .steps()
                        .get(depth)
                        .is_some_and(|want| step_matches(want, &step))
                })
                .collect();
            let full = child_active.iter().any(|&p| self.paths[p].steps().len() == depth + 1);

            let value = match event {
                Event::Begin { nest: child, .. } => {
                    if full {
                        let mut builder = TreeBuilder::default();
                        builder.begin(child, None);
                        Some(build_subtree(self.cursor, &mut builder, self.schema, self.declared)?)
                    } else if !child_active.is_empty() {
                        Some(self.container(child, depth + 1, &child_active)?)
                    } else {
                        self.cursor.skip_nested()?;
                        None
                    }
                }
                Event::Value { value, .. } => (!child_active.is_empty()).then(|| scalar_doc(value)),
                Event::End => unreachable!(),
            };
            match name {
                Some(n) => {
                    if let Some(v) = value {
                        object.insert(n.to_owned(), v);
                    }
                }
                None => items.push(value.unwrap_or(Doc::Null)),
            }
        }
        Ok(match nest {
            Nest::Object => Doc::Object(object),
            Nest::Array => Doc::Array(items),
        })
    }
}
