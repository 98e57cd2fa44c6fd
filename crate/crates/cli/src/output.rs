//! Result-file plumbing. Writers emit LF newlines and Rust's shortest
//! round-trip float formatting, so a rerun with the same configuration and
//! seed produces byte-identical files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// CSV cell for an optional value; empty when absent.
pub fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn bool_cell(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}
