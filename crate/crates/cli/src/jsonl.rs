//! One JSON document per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use polar_layout_core::data::Document;

use crate::error::{CliError, CliResult};
use crate::store::write_atomic;

/// Parses and validates every non-blank line. Errors carry the 1-based line
/// number and the offending field path.
pub fn parse_documents_str(text: &str, path: &Path) -> CliResult<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let de = &mut serde_json::Deserializer::from_str(line);
        let doc: Document = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            if field == "." {
                parse_err(inner.to_string())
            } else {
                parse_err(format!("field {field}: {inner}"))
            }
        })?;
        doc.validate().map_err(|e| parse_err(e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn parse_documents(path: &Path) -> CliResult<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_documents_str(&text, path)
}

pub fn documents_to_string(docs: &[Document]) -> String {
    let mut out = Vec::new();
    for d in docs {
        serde_json::to_writer(&mut out, d).expect("documents serialize");
        out.write_all(b"\n").expect("write to vec");
    }
    String::from_utf8(out).expect("json is utf-8")
}

pub fn write_documents(path: &Path, docs: &[Document]) -> CliResult<()> {
    write_atomic(path, documents_to_string(docs).as_bytes())
}
