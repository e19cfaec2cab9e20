use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use frrr::io::fmt_f64;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Written as `manifest.json` into every output directory. Contains nothing
/// that varies between reruns of the same configuration.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    /// The effective configuration section with all defaults filled in.
    pub config: String,
    pub seed: u64,
    pub versions: BTreeMap<&'static str, &'static str>,
    /// sha256 of every input file, keyed by file name.
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: String, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("frrr-cli", env!("CARGO_PKG_VERSION"));
        versions.insert("frrr", frrr::VERSION);
        Manifest {
            command: command.to_string(),
            config_sha256: sha256_hex(config.as_bytes()),
            config,
            seed,
            versions,
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into());
        self.inputs.insert(name, file_sha256(path)?);
        Ok(self)
    }
}

/// Serialises one section under its table name so the manifest text is a
/// valid config on its own.
pub fn section_toml<T: Serialize>(name: &str, seed: Option<u64>, value: &T) -> String {
    #[derive(Serialize)]
    struct Wrap<'a, T> {
        #[serde(skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(flatten)]
        inner: BTreeMap<&'a str, &'a T>,
    }
    let mut inner = BTreeMap::new();
    inner.insert(name, value);
    toml::to_string(&Wrap { seed, inner }).expect("config sections serialise")
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    pub fn manifest(&self, m: &Manifest) -> Result<(), CliError> {
        self.json("manifest.json", m)
    }

    pub fn table(&self, name: &str, t: &Table) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.path(name)).map_err(csv_err)?;
        w.write_record(&t.header).map_err(csv_err)?;
        for r in &t.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        if t.partial {
            let mut marker = vec![String::new(); t.header.len()];
            marker[0] = "PARTIAL".into();
            w.write_record(&marker).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Two whitespace-separated columns for gnuplot.
    pub fn xy(&self, name: &str, comment: &str, points: &[(f64, f64)]) -> Result<(), CliError> {
        let mut s = format!("# {comment}\n");
        for (x, y) in points {
            s.push_str(&format!("{} {}\n", fmt_f64(*x), fmt_f64(*y)));
        }
        fs::write(self.path(name), s)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Io(io),
        other => CliError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// A CSV table built from pre-formatted cells.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    /// Append a `PARTIAL` marker row: some rows are missing or failed.
    pub partial: bool,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new(), partial: false }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Cell formatting: floats at full precision, everything else via Display.
pub trait Cell {
    fn cell(&self) -> String;
}

impl Cell for f64 {
    fn cell(&self) -> String {
        fmt_f64(*self)
    }
}

impl Cell for usize {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for bool {
    fn cell(&self) -> String {
        u8::from(*self).to_string()
    }
}

impl Cell for &str {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for String {
    fn cell(&self) -> String {
        self.clone()
    }
}

impl<T: Cell> Cell for Option<T> {
    fn cell(&self) -> String {
        self.as_ref().map_or_else(String::new, Cell::cell)
    }
}

#[macro_export]
macro_rules! row {
    ($($v:expr),* $(,)?) => { vec![$($crate::output::Cell::cell(&$v)),*] };
}
