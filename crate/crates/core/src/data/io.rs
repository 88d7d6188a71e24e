//! Line-delimited JSON files for scenes and questions.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Dataset, Manifest};
use crate::error::{Error, Result};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads one record per non-blank line; errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes `scenes.jsonl`, `questions.jsonl` and, when given, the manifest
/// into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &Dataset, manifest: Option<&Manifest>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_jsonl(&dir.join(SCENES_FILE), &data.scenes)?;
    write_jsonl(&dir.join(QUESTIONS_FILE), &data.items)?;
    if let Some(m) = manifest {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(m)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let scenes: Vec<super::Scene> = read_jsonl(&dir.join(SCENES_FILE))?;
    for s in &scenes {
        s.validate()?;
    }
    Ok(Dataset {
        scenes,
        items: read_jsonl(&dir.join(QUESTIONS_FILE))?,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}
