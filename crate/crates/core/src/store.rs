//! Append-only per-household record files shared by the memory and kb stores.
//!
//! Each household gets `<dir>/<hex(household_id)>.jsonl`. Ids are hex-encoded so
//! arbitrary identifiers map to safe file names.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// (1-based line number, line) pairs.
pub(crate) type NumberedLines = Vec<(usize, String)>;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record in {path} line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("invalid record: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HouseholdFiles {
    dir: PathBuf,
}

impl HouseholdFiles {
    pub(crate) fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir })
    }

    fn path_for(&self, household_id: &str) -> PathBuf {
        self.dir.join(format!("{}.jsonl", hex::encode(household_id.as_bytes())))
    }

    pub(crate) fn append(&self, household_id: &str, line: &str) -> Result<(), StoreError> {
        let path = self.path_for(household_id);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(f, "{line}").map_err(io_err(&path))?;
        Ok(())
    }

    /// Replaces the household file with `lines` via write-then-rename.
    pub(crate) fn rewrite<'a>(
        &self,
        household_id: &str,
        lines: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), StoreError> {
        let path = self.path_for(household_id);
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            for line in lines {
                writeln!(f, "{line}").map_err(io_err(&tmp))?;
            }
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Every household file as (household_id, lines), sorted by household id.
    pub(crate) fn read_all(&self) -> Result<Vec<(String, NumberedLines)>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let path = entry.map_err(io_err(&self.dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let Some(household) = hex::decode(stem).ok().and_then(|b| String::from_utf8(b).ok()) else {
                continue;
            };
            let f = File::open(&path).map_err(io_err(&path))?;
            let mut lines = Vec::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(io_err(&path))?;
                if !line.trim().is_empty() {
                    lines.push((i + 1, line));
                }
            }
            out.push((household, lines));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub(crate) fn display_path(&self, household_id: &str) -> String {
        self.path_for(household_id).display().to_string()
    }
}
