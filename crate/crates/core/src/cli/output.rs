//! Output files: no silent overwrite, self-describing headers.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::topology::Topology;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "MEMCOMPOSE_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "memcompose-out";

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

/// Machine description and seeds, embedded in every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHeader {
    pub tool: String,
    pub version: String,
    pub created_unix_secs: u64,
    pub topology: Topology,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
}

impl OutputHeader {
    pub fn new(topology: Topology) -> Self {
        OutputHeader {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            created_unix_secs: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            topology,
            seeds: Vec::new(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds.push(seed);
        self
    }

    /// `# memcompose-header {...}` line for CSV files.
    pub fn csv_comment(&self) -> String {
        format!("# memcompose-header {}\n", serde_json::to_string(self).unwrap_or_default())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("{0} exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A directory whose files are created with overwrite protection.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
    pub force: bool,
}

impl OutputDir {
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Self {
        OutputDir {
            root: root.into(),
            force,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Fails with [`OutputError::Exists`] unless forced.
    pub fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), OutputError> {
        let path = self.path(name);
        create_file(&path, self.force).map(|f| (path, f))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, OutputError> {
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)
            .map_err(io::Error::from)
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, OutputError> {
        let (path, mut w) = self.create(name)?;
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Creates `path` (and its parents); refuses to replace an existing file
/// unless `force`.
pub fn create_file(path: &Path, force: bool) -> Result<BufWriter<File>, OutputError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut opts = OpenOptions::new();
    opts.write(true);
    if force {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    match opts.open(path) {
        Ok(f) => Ok(BufWriter::new(f)),
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(OutputError::Exists(path.to_path_buf())),
        Err(e) => Err(io_err(path)(e)),
    }
}

/// Appends one JSON object per line.
pub fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    let mut line = serde_json::to_vec(value).map_err(|e| io_err(path)(e.into()))?;
    line.push(b'\n');
    f.write_all(&line).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::new(dir.path().join("a/b"), false);
        out.write_text("x.txt", "one").unwrap();
        assert!(matches!(out.write_text("x.txt", "two"), Err(OutputError::Exists(_))));
        assert_eq!(fs::read_to_string(out.path("x.txt")).unwrap(), "one");
        OutputDir::new(&out.root, true).write_text("x.txt", "two").unwrap();
        assert_eq!(fs::read_to_string(out.path("x.txt")).unwrap(), "two");
    }

    #[test]
    fn appends_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.jsonl");
        append_json_line(&p, &1).unwrap();
        append_json_line(&p, &2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "1\n2\n");
    }

    #[test]
    fn header_records_topology() {
        let h = OutputHeader::new(Topology::synthetic(2, 1, 1 << 30)).with_seed(42);
        let c = h.csv_comment();
        assert!(c.starts_with("# memcompose-header {"));
        assert!(c.contains("\"seeds\":[42]"));
    }
}
