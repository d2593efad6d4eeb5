use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use super::{Event, EventStream, StreamError};

#[derive(Clone, Debug, PartialEq)]
pub struct ParseOptions {
    /// Raw timestamp ticks per dataset time unit (86400 for days over seconds).
    pub ticks_per_unit: f64,
    pub time_unit: String,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            ticks_per_unit: 1.0,
            time_unit: "1".to_string(),
        }
    }
}

/// Raw-id to dense-id mapping. Dense ids follow first appearance in the
/// time-sorted stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    raw: Vec<String>,
    dense: HashMap<String, usize>,
}

impl IdMap {
    fn intern(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.dense.get(raw) {
            return id;
        }
        let id = self.raw.len();
        self.raw.push(raw.to_string());
        self.dense.insert(raw.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        self.raw.get(dense).map(String::as_str)
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.dense.get(raw).copied()
    }

    /// One `raw<TAB>dense` line per node.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), StreamError> {
        for (i, r) in self.raw.iter().enumerate() {
            writeln!(w, "{r}\t{i}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, StreamError> {
        let mut map = IdMap::default();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let malformed = |reason: &str| StreamError::Malformed {
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let (raw, dense) = line.split_once('\t').ok_or_else(|| malformed("expected raw<TAB>dense"))?;
            let dense: usize = dense.trim().parse().map_err(|_| malformed("dense id is not an integer"))?;
            if dense != map.len() || map.intern(raw) != dense {
                return Err(malformed("dense ids must be 0..n in order without repeats"));
            }
        }
        Ok(map)
    }
}

pub fn parse_events(path: &Path, opts: &ParseOptions) -> Result<(EventStream, IdMap), StreamError> {
    parse_events_str(&fs::read_to_string(path)?, opts)
}

/// Parse `src dst timestamp` lines. Blank lines and `#`/`%` comments are skipped.
pub fn parse_events_str(text: &str, opts: &ParseOptions) -> Result<(EventStream, IdMap), StreamError> {
    if !(opts.ticks_per_unit > 0.0 && opts.ticks_per_unit.is_finite()) {
        return Err(StreamError::Malformed {
            line: 0,
            reason: format!("time unit must be positive, got {}", opts.ticks_per_unit),
        });
    }
    let mut rows: Vec<(&str, &str, f64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('%') {
            continue;
        }
        let malformed = |reason: String| StreamError::Malformed {
            line: lineno + 1,
            reason,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(malformed(format!("expected 3 fields, found {}", fields.len())));
        }
        let t: f64 = fields[2]
            .parse()
            .map_err(|_| malformed(format!("timestamp {:?} is not a number", fields[2])))?;
        if !t.is_finite() {
            return Err(malformed("timestamp is not finite".to_string()));
        }
        rows.push((fields[0], fields[1], t));
    }
    if rows.is_empty() {
        return Err(StreamError::Empty);
    }
    rows.sort_by(|a, b| a.2.total_cmp(&b.2));
    let t0 = rows[0].2;
    let mut ids = IdMap::default();
    let events = rows
        .iter()
        .map(|&(u, v, t)| {
            let u = ids.intern(u);
            let v = ids.intern(v);
            Event::observed(u, v, ((t - t0) / opts.ticks_per_unit).floor())
        })
        .collect();
    Ok((EventStream::new(events, ids.len(), opts.time_unit.clone()), ids))
}

/// Canonical form: one `u v t` line per observed event, integer timestamps.
pub fn write_events_string(stream: &EventStream) -> String {
    let mut out = String::with_capacity(stream.len() * 12);
    for e in &stream.events {
        let _ = writeln!(out, "{} {} {}", e.u, e.v, e.t as i64);
    }
    out
}

pub fn write_events<W: Write>(stream: &EventStream, mut w: W) -> Result<(), StreamError> {
    w.write_all(write_events_string(stream).as_bytes())?;
    Ok(())
}
