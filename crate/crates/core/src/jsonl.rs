//! Append-only JSON-lines files shared by the caches, transcripts and the
//! per-caption result store.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub(crate) struct AppendLog {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl AppendLog {
    /// Open `path` for appending and return the records already in it.
    ///
    /// A torn final line (no trailing newline, or not parseable) is cut off
    /// so the next append starts on a clean line. Corruption anywhere else is
    /// an error.
    pub(crate) fn open<T: DeserializeOwned>(path: &Path) -> io::Result<(Self, Vec<T>)> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut records = Vec::new();
        let mut good_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            let mut buf = String::new();
            let mut lineno = 0usize;
            loop {
                buf.clear();
                let n = reader.read_line(&mut buf)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                let complete = buf.ends_with('\n');
                let text = buf.trim_end_matches(['\n', '\r']);
                if text.trim().is_empty() {
                    if complete {
                        good_len += n as u64;
                    }
                    continue;
                }
                if !complete {
                    break;
                }
                match serde_json::from_str::<T>(text) {
                    Ok(rec) => {
                        records.push(rec);
                        good_len += n as u64;
                    }
                    Err(e) => {
                        // a bad line is only tolerated as the very last one
                        let mut rest = String::new();
                        reader.read_line(&mut rest)?;
                        if rest.is_empty() {
                            break;
                        }
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}:{lineno}: {e}", path.display()),
                        ));
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)?;
        file.set_len(good_len)?;
        drop(file);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                writer: Mutex::new(BufWriter::new(file)),
            },
            records,
        ))
    }

    pub(crate) fn append<T: Serialize>(&self, record: &T) -> io::Result<()> {
        let line = serde_json::to_string(record).map_err(io::Error::other)?;
        let mut w = self.writer.lock().expect("append log poisoned");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()
    }

    pub(crate) fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        id: u32,
    }

    #[test]
    fn round_trips_and_cuts_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/log.jsonl");
        {
            let (log, existing) = AppendLog::open::<Rec>(&path).unwrap();
            assert!(existing.is_empty());
            log.append(&Rec { id: 1 }).unwrap();
            log.append(&Rec { id: 2 }).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"id\": 3").unwrap();
        drop(f);
        let (log, existing) = AppendLog::open::<Rec>(&path).unwrap();
        assert_eq!(existing, vec![Rec { id: 1 }, Rec { id: 2 }]);
        log.append(&Rec { id: 4 }).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"id\":1}\n{\"id\":2}\n{\"id\":4}\n");
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, "{\"id\":1}\nnot json\n{\"id\":2}\n").unwrap();
        assert!(AppendLog::open::<Rec>(&path).is_err());
    }

    #[test]
    fn complete_but_bad_last_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        std::fs::write(&path, "{\"id\":1}\n{\"id\":\n").unwrap();
        let (_, recs) = AppendLog::open::<Rec>(&path).unwrap();
        assert_eq!(recs, vec![Rec { id: 1 }]);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "{\"id\":1}\n");
    }
}
