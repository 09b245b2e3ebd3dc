//! Tab-separated assertion dump reader (plain or gzip-compressed).

use super::Assertion;
use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

/// Parse outcome with skip counters.
#[derive(Debug, Default)]
pub struct ParsedDump {
    pub assertions: Vec<Assertion>,
    /// Lines whose endpoints are well-formed but not both English.
    pub skipped_language: usize,
    /// Lines with a non-concept endpoint URI (e.g. a source URI).
    pub endpoint_warnings: usize,
}

/// Parses a dump from any reader. Expects one assertion per line with at
/// least five tab-separated fields: assertion URI, `/r/<Relation>`,
/// `/c/<lang>/<term>[...]` twice, and JSON metadata.
pub fn parse_assertions(reader: impl BufRead) -> Result<ParsedDump> {
    let mut out = ParsedDump::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: format!("unreadable line: {e}"),
        })?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let relation = fields[1].strip_prefix("/r/").ok_or(Error::Parse {
            line: line_no,
            message: format!("relation field '{}' does not start with /r/", fields[1]),
        })?;

        let start = match concept_parts(fields[2], line_no)? {
            Some(parts) => parts,
            None => {
                out.endpoint_warnings += 1;
                continue;
            }
        };
        let end = match concept_parts(fields[3], line_no)? {
            Some(parts) => parts,
            None => {
                out.endpoint_warnings += 1;
                continue;
            }
        };
        if start.0 != "en" || end.0 != "en" {
            out.skipped_language += 1;
            continue;
        }
        out.assertions.push(Assertion {
            relation: relation.to_string(),
            start: start.1,
            end: end.1,
            language: "en".to_string(),
        });
    }
    Ok(out)
}

/// Splits a `/c/<lang>/<term>[/sense...]` URI into (language, term), dropping
/// sense suffixes. Returns `None` for non-concept URIs.
fn concept_parts(uri: &str, line_no: usize) -> Result<Option<(String, String)>> {
    if !uri.starts_with("/c/") {
        return Ok(None);
    }
    let mut segments = uri.split('/').skip(2); // "", "c", then payload
    let lang = segments.next().filter(|s| !s.is_empty());
    let term = segments.next().filter(|s| !s.is_empty());
    match (lang, term) {
        (Some(lang), Some(term)) => Ok(Some((lang.to_string(), term.to_lowercase()))),
        _ => Err(Error::Parse {
            line: line_no,
            message: format!("malformed concept URI '{uri}'"),
        }),
    }
}

/// Opens and parses a dump file, transparently inflating gzip (sniffed by
/// magic bytes, not extension).
pub fn parse_assertions_path(path: &Path) -> Result<ParsedDump> {
    let display = path.display().to_string();
    let mut file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut magic = [0u8; 2];
    let read = file.read(&mut magic).map_err(|e| Error::io(&display, e))?;
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    if read == 2 && magic == [0x1f, 0x8b] {
        parse_assertions(BufReader::new(GzDecoder::new(file)))
    } else {
        parse_assertions(BufReader::new(file))
    }
}
