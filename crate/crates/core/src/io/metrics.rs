//! JSON-lines metrics stream: one object per line, flushed per record.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub struct MetricsWriter {
    out: Box<dyn Write>,
}

impl MetricsWriter {
    /// Truncates or creates `path`.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            out: Box::new(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn to_writer(out: Box<dyn Write>) -> Self {
        Self { out }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p).unwrap();
        w.write(&serde_json::json!({"epoch": 1})).unwrap();
        w.write(&serde_json::json!({"epoch": 2})).unwrap();
        drop(w);
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "{\"epoch\":1}\n{\"epoch\":2}\n"
        );
    }
}
