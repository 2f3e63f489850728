//! Tabular outputs. Every CSV may open with one `#` comment line carrying
//! provenance such as the config hash; readers here skip such lines.

use std::fs::File;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::{Error, Result};

/// The comment line embedded in outputs of a run with `config_hash`.
pub fn hash_comment(config_hash: &str) -> String {
    format!("config_hash: {config_hash}")
}

/// Renders a CSV with an optional leading comment line.
pub fn csv_bytes<I, R, S>(comment: Option<&str>, header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut out = Vec::new();
    if let Some(c) = comment {
        if c.contains('\n') {
            return Err(Error::InvalidInput("CSV comment must be a single line".into()));
        }
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Atomically writes a CSV built by [`csv_bytes`].
pub fn write_csv<I, R, S>(path: &Path, comment: Option<&str>, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    write_atomic(path, &csv_bytes(comment, header, rows)?)
}

/// A header-aware reader that skips `#` comment lines.
pub fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(file))
}

/// Pretty JSON, atomically written.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
