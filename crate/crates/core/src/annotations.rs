//! Line-delimited annotation files: one JSON record per image.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcodec::TextInstance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLine {
    /// Image path, relative to the annotation file's directory unless absolute.
    pub image: String,
    pub instances: Vec<TextInstance>,
}

impl AnnotationLine {
    pub fn image_path(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotationLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let rec: AnnotationLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        for (j, inst) in rec.instances.iter().enumerate() {
            inst.validate().map_err(|e| err(format!("instance {}: {}", j, e)))?;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, lines: &[AnnotationLine]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        let s = serde_json::to_string(l).expect("annotation serializes");
        writeln!(w, "{}", s).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parent directory of an annotation file, for resolving image paths.
pub fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
