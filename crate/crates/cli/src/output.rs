//! Output writers. Files are written to a temporary sibling and renamed into
//! place, so a failed run never leaves a partial file behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes `text` to `out`, or to standard output when `out` is `None`.
pub fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            let mut tmp = tempfile::NamedTempFile::new_in(parent_of(path))
                .with_context(|| format!("creating a temporary file next to {}", path.display()))?;
            tmp.write_all(text.as_bytes())?;
            tmp.as_file().sync_all()?;
            tmp.persist(path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

/// Writes every `(file name, contents)` pair into a fresh directory that
/// replaces `dir` only once all files are complete.
pub fn emit_dir(dir: &Path, files: &[(String, String)]) -> anyhow::Result<()> {
    let parent = parent_of(dir);
    let staging = tempfile::Builder::new()
        .prefix(".qpc-staging")
        .tempdir_in(&parent)
        .with_context(|| format!("creating a staging directory in {}", parent.display()))?;
    for (name, text) in files {
        std::fs::write(staging.path().join(name), text)?;
    }
    let staged = staging.keep();
    if dir.exists() {
        let old = tempfile::Builder::new().prefix(".qpc-old").tempdir_in(&parent)?.keep();
        std::fs::rename(dir, old.join("previous"))
            .with_context(|| format!("moving aside {}", dir.display()))?;
        std::fs::rename(&staged, dir)?;
        std::fs::remove_dir_all(&old)?;
    } else {
        std::fs::rename(&staged, dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// A CSV table from a header and string rows.
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| quote(c)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn quote(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

pub fn json<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
