//! JSONL scene files and the feasibility table.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sdt_core::scene::{FeasibilityTable, Scene};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads one scene per non-blank line. Errors name the 1-based line.
pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>, IoError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut scenes = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = serde_json::from_str(&line).map_err(|source| IoError::Record {
            path: path.to_path_buf(),
            line: k + 1,
            source,
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn save_scenes(scenes: &[Scene], path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for s in scenes {
        let line = serde_json::to_string(s).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, IoError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    serde_json::from_reader(reader).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_feasibility(path: impl AsRef<Path>) -> Result<FeasibilityTable, IoError> {
    read_json(path)
}

pub fn save_feasibility(table: &FeasibilityTable, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_json(table, path)
}
