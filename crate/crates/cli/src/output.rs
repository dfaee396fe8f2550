use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in d.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub file: String,
    pub sha256: String,
}

/// Writes files into the output directory and remembers their hashes.
pub struct Outputs {
    dir: PathBuf,
    pub files: Vec<FileHash>,
}

/// Minimal CSV row builder.
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut c = Self { buf: String::new() };
        c.row(header.iter().map(|s| s.to_string()));
        c
    }

    pub fn row<I, S>(&mut self, cells: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for cell in cells {
            if !first {
                self.buf.push(',');
            }
            first = false;
            let c = cell.as_ref();
            if c.contains([',', '"', '\n']) {
                self.buf.push('"');
                self.buf.push_str(&c.replace('"', "\"\""));
                self.buf.push('"');
            } else {
                self.buf.push_str(c);
            }
        }
        self.buf.push('\n');
    }
}

/// Float cell; `NA` for non-finite values.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".to_string()
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })?;
        self.files.push(FileHash {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    pub fn csv(&mut self, name: &str, csv: Csv) -> Result<(), CliError> {
        self.bytes(name, csv.buf.as_bytes())
    }

    /// Record a file another writer already produced.
    pub fn written(&mut self, name: &str) -> Result<(), CliError> {
        let sha256 = file_sha256(&self.path(name))?;
        self.files.push(FileHash {
            file: name.to_string(),
            sha256,
        });
        Ok(())
    }
}
