//! `path,label,split` manifests. Relative paths resolve against the
//! manifest's own directory; a clip's id is its file stem.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use burstnet::audio::source_id_for;
use burstnet::models::{class_index, CLASS_NAMES};
use burstnet::training::Split;

use crate::error::{CliError, Result};

const HEADER: [&str; 3] = ["path", "label", "split"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// As written in the file.
    pub path: PathBuf,
    /// `None` for `?`.
    pub label: Option<usize>,
    pub split: Split,
}

impl ManifestRow {
    pub fn id(&self) -> String {
        source_id_for(&self.path)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths resolve against.
    pub base: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let bad = |msg: String| CliError::Data(format!("{}: {msg}", origin.display()));
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| bad(e.to_string()))?;
        if header.iter().ne(HEADER) {
            return Err(bad(format!("header must be exactly {}", HEADER.join(","))));
        }
        let mut rows = Vec::new();
        let mut paths = HashSet::new();
        let mut ids = HashSet::new();
        for (n, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let line = n + 2;
            let split: Split = rec[2].trim().parse().map_err(|e| bad(format!("line {line}: {e}")))?;
            let label = match rec[1].trim() {
                "?" if split == Split::Test => None,
                "?" => return Err(bad(format!("line {line}: {split} rows need a label"))),
                name => Some(class_index(name).ok_or_else(|| {
                    bad(format!("line {line}: unknown label {name:?} (expected one of {})", CLASS_NAMES.join(", ")))
                })?),
            };
            let path = PathBuf::from(rec[0].trim());
            if path.as_os_str().is_empty() {
                return Err(bad(format!("line {line}: empty path")));
            }
            if !paths.insert(path.clone()) {
                return Err(bad(format!("line {line}: duplicate path {}", path.display())));
            }
            let row = ManifestRow { path, label, split };
            if !ids.insert(row.id()) {
                return Err(bad(format!("line {line}: duplicate clip id {:?}", row.id())));
            }
            rows.push(row);
        }
        Ok(Self {
            rows,
            base: base.to_path_buf(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, &base, path)
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base.join(&row.path)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.rows {
            let label = r.label.map_or("?", |l| CLASS_NAMES[l]);
            w.write_record([&r.path.to_string_lossy(), label, &r.split.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
