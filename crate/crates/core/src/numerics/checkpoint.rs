//! Versioned text checkpoint.
//!
//! ```text
//! affectseq-params v1
//! <name> <dim>,<dim>,... <hex value> <hex value> ...
//! ```
//!
//! One record per line, records in lexicographic name order, values as hex
//! floats so a save/load cycle is bit exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::hexfloat::{format_hex, parse_hex};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const HEADER: &str = "affectseq-params v1";

pub fn to_string(params: &ParamStore) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for (name, p) in params.iter() {
        let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        let _ = write!(out, "{name} {}", shape.join(","));
        for v in &p.values {
            out.push(' ');
            out.push_str(&format_hex(*v));
        }
        out.push('\n');
    }
    out
}

pub fn from_str(text: &str, origin: &Path) -> Result<ParamStore> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        Some((_, h)) => return Err(parse_err(1, format!("expected header {HEADER:?}, found {h:?}"))),
        None => return Err(parse_err(1, "empty checkpoint".into())),
    }
    let mut store = ParamStore::new();
    let mut prev: Option<String> = None;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let name = fields.next().unwrap_or_default().to_string();
        let shape_field = fields
            .next()
            .ok_or_else(|| parse_err(lineno, format!("record {name} has no shape")))?;
        let shape = shape_field
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err(lineno, format!("bad shape {shape_field:?}")))?;
        let values = fields
            .map(parse_hex)
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, format!("non-finite value in {name}")));
        }
        if let Some(p) = &prev {
            if *p >= name {
                return Err(parse_err(lineno, format!("record {name} out of order after {p}")));
            }
        }
        store
            .insert(name.clone(), &shape, values)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        prev = Some(name);
    }
    Ok(store)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, to_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, path)
}
