//! Line-delimited JSON read/write.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::IoError;

/// A line that failed to decode. Line numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

/// A decoded line with its 1-based line number, or why it failed.
pub type LineResult<T> = Result<(usize, T), LineError>;

/// Decodes every non-blank line, keeping per-line failures instead of stopping.
pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<LineResult<T>>, IoError> {
    let file = File::open(path).map_err(|e| IoError::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map(|v| (i + 1, v))
                .map_err(|e| LineError {
                    line: i + 1,
                    reason: e.to_string(),
                }),
        );
    }
    Ok(out)
}

/// Reads a file where every line must decode.
pub fn read_all<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    read_lines(path)?
        .into_iter()
        .map(|r| {
            r.map(|(_, v)| v).map_err(|e| IoError::Parse {
                path: path.to_path_buf(),
                line: e.line,
                reason: e.reason,
            })
        })
        .collect()
}

pub fn write_all<'a, T, I>(path: &Path, items: I) -> Result<(), IoError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| IoError::file(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| IoError::file(path, e))?;
    }
    w.flush().map_err(|e| IoError::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: u32,
    }

    #[test]
    fn blank_lines_skipped_bad_lines_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"a\":1}\n\n{\"a\":\"no\"}\n{\"a\":3}\n").unwrap();
        let rows = read_lines::<Row>(&p).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], Ok((1, Row { a: 1 })));
        assert_eq!(rows[1].as_ref().unwrap_err().line, 3);
        assert!(matches!(read_all::<Row>(&p), Err(IoError::Parse { line: 3, .. })));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.jsonl");
        let rows = vec![Row { a: 1 }, Row { a: 2 }];
        write_all(&p, &rows).unwrap();
        assert_eq!(read_all::<Row>(&p).unwrap(), rows);
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(
            read_all::<Row>(Path::new("/nonexistent/z.jsonl")),
            Err(IoError::File { .. })
        ));
    }
}
