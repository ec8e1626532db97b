use serde::de::DeserializeOwned;

use crate::error::{format_err, Result};

/// Parses `text` as CSV with exactly the given header, one `T` per row.
pub(crate) fn read_rows<T: DeserializeOwned>(text: &str, header: &[&str], what: &str) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let found = rdr.headers().map_err(|e| format_err!("{what}: {e}"))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(format_err!("{what}: header must be {}, found {}", header.join(","), found.iter().collect::<Vec<_>>().join(",")));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| format_err!("{what} row {}: {e}", i + 1)))
        .collect()
}
