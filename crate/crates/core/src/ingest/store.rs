use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use super::IngestError;

/// Byte-addressable view over a snapshot: a flat set of line-delimited files.
///
/// `read_at` returning an empty buffer means the offset is at or past the
/// end of the file.
pub trait SnapshotStore: Send {
    fn describe(&self) -> String;

    /// File names in the snapshot. Callers sort them.
    fn list_files(&mut self) -> Result<Vec<String>, IngestError>;

    fn read_at(&mut self, file: &str, offset: u64, max_len: usize) -> Result<Vec<u8>, IngestError>;
}

/// Snapshot stored as a directory of `*.jsonl` files.
pub struct LocalStore {
    dir: PathBuf,
    open: Option<(String, File)>,
}

impl LocalStore {
    pub fn new(dir: impl Into<PathBuf>) -> LocalStore {
        LocalStore {
            dir: dir.into(),
            open: None,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn file(&mut self, name: &str) -> io::Result<&mut File> {
        let reopen = !matches!(&self.open, Some((n, _)) if n == name);
        if reopen {
            let f = File::open(self.dir.join(name))?;
            self.open = Some((name.to_string(), f));
        }
        Ok(&mut self.open.as_mut().expect("just opened").1)
    }
}

impl SnapshotStore for LocalStore {
    fn describe(&self) -> String {
        self.dir.display().to_string()
    }

    fn list_files(&mut self) -> Result<Vec<String>, IngestError> {
        let unreadable = |e: io::Error| IngestError::LocationUnreadable {
            location: self.dir.display().to_string(),
            reason: e.to_string(),
        };
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(unreadable)? {
            let entry = entry.map_err(unreadable)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".jsonl") && !name.starts_with('.') && entry.path().is_file() {
                names.push(name);
            }
        }
        Ok(names)
    }

    fn read_at(&mut self, file: &str, offset: u64, max_len: usize) -> Result<Vec<u8>, IngestError> {
        let io_err = |e: io::Error| IngestError::Io(format!("{file}: {e}"));
        let f = self.file(file).map_err(io_err)?;
        f.seek(SeekFrom::Start(offset)).map_err(io_err)?;
        let mut buf = Vec::with_capacity(max_len.min(1 << 20));
        f.take(max_len as u64).read_to_end(&mut buf).map_err(io_err)?;
        Ok(buf)
    }
}
