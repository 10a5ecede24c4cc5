//! Manifest: UTF-8 TSV with columns `feature_file`, `transcription`,
//! `translation`; tokens are space-separated and feature paths are relative to
//! the manifest's directory.
//!
//! Feature file (little-endian): `u32` magic, `u32` version, `u32` frame
//! count, `u32` feature dimension, then `frames × dim` `f32` values row-major.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::Triplet;
use crate::error::{Error, Result};
use crate::model::SpeechFeatures;
use crate::tensor::Tensor;

/// `"CSF1"` read as a little-endian u32.
pub const FEATURE_MAGIC: u32 = u32::from_le_bytes(*b"CSF1");
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(path: &Path, s: &SpeechFeatures) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = [FEATURE_MAGIC, FEATURE_VERSION, s.len() as u32, s.dim() as u32];
    let mut bytes = Vec::with_capacity(16 + 4 * s.frames.numel());
    for h in header {
        bytes.extend_from_slice(&h.to_le_bytes());
    }
    for &v in s.frames.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<SpeechFeatures> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "feature header truncated"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != FEATURE_MAGIC {
        return Err(Error::format(path, "bad feature magic"));
    }
    if word(1) != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature version {}", word(1))));
    }
    let (frames, dim) = (word(2) as usize, word(3) as usize);
    if frames == 0 || dim == 0 {
        return Err(Error::format(path, "empty feature matrix"));
    }
    let body = &bytes[16..];
    if body.len() != 4 * frames * dim {
        return Err(Error::format(
            path,
            format!("expected {} value bytes, found {}", 4 * frames * dim, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SpeechFeatures::new(Tensor::matrix(frames, dim, data)?)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Write the manifest rows; `feature_files` are stored verbatim.
pub fn write_manifest(path: &Path, rows: &[(String, &Triplet)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (feat, t) in rows {
        writeln!(w, "{feat}\t{}\t{}", t.x.join(" "), t.y.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `<dir>/<name>.tsv` plus one feature file per example under `<dir>/<name>/`.
pub fn write_corpus(dir: &Path, name: &str, corpus: &[Triplet]) -> Result<PathBuf> {
    let feat_dir = dir.join(name);
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut rows = Vec::with_capacity(corpus.len());
    for (i, t) in corpus.iter().enumerate() {
        let rel = format!("{name}/{i:06}.feat");
        write_features(&dir.join(&rel), &t.s)?;
        rows.push((rel, t));
    }
    let manifest = dir.join(format!("{name}.tsv"));
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

fn split_tokens(field: &str) -> Vec<String> {
    field.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn load_manifest(path: &Path) -> Result<Vec<Triplet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            reason,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse(format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let x = split_tokens(cols[1]);
        let y = split_tokens(cols[2]);
        if x.is_empty() || y.is_empty() {
            return Err(parse("empty transcription or translation".into()));
        }
        let feat = base.join(cols[0]);
        if !feat.is_file() {
            return Err(Error::io(
                feat,
                std::io::Error::new(std::io::ErrorKind::NotFound, "feature file not found"),
            ));
        }
        out.push(Triplet {
            s: read_features(&feat)?,
            x,
            y,
        });
    }
    if out.is_empty() {
        return Err(Error::format(path, "manifest has no rows"));
    }
    Ok(out)
}
