//! Instance files: one JSON object per line in the [`RawInstance`] shape.

use std::collections::HashSet;
use std::path::Path;

use crate::model::{validate_instance, Instance, RawInstance};

use super::jsonl::{read_lines, LineError};
use super::{Ingestion, IoError};

#[derive(Debug)]
pub struct LoadedInstances {
    pub instances: Vec<Instance>,
    /// Lines skipped in lenient mode.
    pub errors: Vec<LineError>,
}

/// Loads and validates instances in file order.
///
/// Strict mode fails on the first bad line after collecting all of them;
/// lenient mode returns the good ones plus the line errors. Duplicate ids
/// are always fatal.
pub fn load_instances(path: &Path, mode: Ingestion) -> Result<LoadedInstances, IoError> {
    let mut instances = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for row in read_lines::<RawInstance>(path)? {
        let (line, raw) = match row {
            Ok(v) => v,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        match validate_instance(raw) {
            Ok(inst) => {
                if !seen.insert(inst.id().to_string()) {
                    return Err(IoError::DuplicateId {
                        path: path.to_path_buf(),
                        line,
                        id: inst.id().to_string(),
                    });
                }
                instances.push(inst);
            }
            Err(e) => errors.push(LineError {
                line,
                reason: e.to_string(),
            }),
        }
    }
    if mode == Ingestion::Strict {
        if let Some(first) = errors.first() {
            return Err(IoError::Invalid {
                path: path.to_path_buf(),
                count: errors.len(),
                first_line: first.line,
                first_reason: first.reason.clone(),
            });
        }
    }
    Ok(LoadedInstances { instances, errors })
}

pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<(), IoError> {
    super::jsonl::write_all(path, instances)
}
