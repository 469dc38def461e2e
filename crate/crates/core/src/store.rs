//! Append-only key-value file store used for the response and vector caches.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
struct Record {
    k: String,
    v: String,
}

/// One JSON record per line; later records for a key shadow earlier ones.
/// Without a backing file the store lives only in memory.
pub struct KvStore {
    path: Option<PathBuf>,
    map: RwLock<HashMap<String, String>>,
    file: Option<Mutex<File>>,
}

impl KvStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            map: RwLock::new(HashMap::new()),
            file: None,
        }
    }

    /// Opens (creating if needed) `<dir>/<name>.jsonl`.
    pub fn open(dir: &Path, name: &str) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{name}.jsonl"));
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                // a torn final line from an interrupted write is skipped
                if let Ok(rec) = serde_json::from_str::<Record>(&line) {
                    map.insert(rec.k, rec.v);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            map: RwLock::new(map),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.map.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: &str, value: &str) -> io::Result<()> {
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&Record {
                k: key.to_string(),
                v: value.to_string(),
            })
            .map_err(io::Error::other)?;
            line.push('\n');
            let mut f = file.lock().unwrap();
            f.write_all(line.as_bytes())?;
        }
        self.map
            .write()
            .unwrap()
            .insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
