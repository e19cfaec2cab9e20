//! On-disk formats: numeric CSV, the binary chain file with its sidecar
//! trace, and the X/Y/meta dataset triple.
//!
//! Every number is written with `{:.16e}` (17 significant digits), which
//! round-trips an `f64` exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FamilyId, FamilySpec};
use crate::posterior::{mean_matrix, Chain};
use crate::scalar::Real;

pub const CHAIN_MAGIC: &[u8; 8] = b"FRRRCHN1";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.into() }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a header line (if any) followed by the matrix rows.
pub fn write_matrix_csv<T: Real>(path: &Path, m: &DMatrix<T>, header: Option<&[String]>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(h) = header {
        if h.len() != m.ncols() {
            return Err(Error::shape(format!("{} header names for {} columns", h.len(), m.ncols())));
        }
        writeln!(w, "{}", h.join(","))?;
    }
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)].as_f64())).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a rectangular numeric CSV. A first line that does not parse as
/// numbers is treated as a header and skipped.
pub fn read_matrix_csv<T: Real>(path: &Path) -> Result<DMatrix<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => format_err(path, format!("{other:?}")),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if line == 0 => continue,
            Err(e) => return Err(format_err(path, format!("line {}: {e}", line + 1))),
        }
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(format_err(path, format!("row {} has {} fields, expected {ncols}", bad + 1, rows[bad].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| T::lit(rows[i][j])))
}

/// Family block of the dataset meta file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyBlock {
    pub family: FamilyId,
    pub a: f64,
    pub k: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub clip_margin: f64,
}

impl FamilyBlock {
    pub fn from_spec<T: Real>(f: &FamilySpec<T>) -> Self {
        let (lo, hi) = f.configured_domain();
        FamilyBlock {
            family: f.id(),
            a: f.dispersion().as_f64(),
            k: f.shape().as_f64(),
            theta_lo: lo.as_f64(),
            theta_hi: hi.as_f64(),
            clip_margin: f.clip_margin().as_f64(),
        }
    }

    pub fn to_spec<T: Real>(&self) -> Result<FamilySpec<T>> {
        FamilySpec::new(
            self.family,
            T::lit(self.a),
            T::lit(self.k),
            T::lit(self.theta_lo),
            T::lit(self.theta_hi),
            T::lit(self.clip_margin),
        )
    }
}

impl<T: Real> TryFrom<FamilyBlock> for FamilySpec<T> {
    type Error = Error;

    fn try_from(b: FamilyBlock) -> Result<Self> {
        b.to_spec()
    }
}

impl<T: Real> From<FamilySpec<T>> for FamilyBlock {
    fn from(f: FamilySpec<T>) -> Self {
        FamilyBlock::from_spec(&f)
    }
}

/// Contents of `meta.toml` next to `X.csv` and `Y.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Free-form description of how X was produced.
    pub design: String,
    pub family: FamilyBlock,
}

pub fn write_dataset<T: Real>(dir: &Path, data: &Dataset<T>, seed: u64, design: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_matrix_csv(&dir.join("X.csv"), data.x(), None)?;
    write_matrix_csv(&dir.join("Y.csv"), data.y(), None)?;
    let meta = DatasetMeta {
        seed,
        n: data.n(),
        p: data.p(),
        q: data.q(),
        design: design.to_string(),
        family: FamilyBlock::from_spec(data.family()),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Numerical(format!("meta serialisation: {e}")))?;
    std::fs::write(dir.join("meta.toml"), text)?;
    Ok(())
}

pub fn read_dataset_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.toml");
    let text = std::fs::read_to_string(&path)?;
    toml::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

pub fn read_dataset<T: Real>(dir: &Path) -> Result<(Dataset<T>, DatasetMeta)> {
    let meta = read_dataset_meta(dir)?;
    let x: DMatrix<T> = read_matrix_csv(&dir.join("X.csv"))?;
    let y: DMatrix<T> = read_matrix_csv(&dir.join("Y.csv"))?;
    // An n×0 or 0×p CSV is an empty file; restore the recorded shape.
    let x = if x.is_empty() { DMatrix::zeros(meta.n, meta.p) } else { x };
    let y = if y.is_empty() { DMatrix::zeros(meta.n, meta.q) } else { y };
    if x.shape() != (meta.n, meta.p) || y.shape() != (meta.n, meta.q) {
        return Err(format_err(
            dir,
            format!("X {:?} / Y {:?} disagree with meta ({}, {}, {})", x.shape(), y.shape(), meta.n, meta.p, meta.q),
        ));
    }
    let data = Dataset::new(x, y, meta.family.to_spec()?)?;
    Ok((data, meta))
}

/// A chain as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredChain {
    pub p: usize,
    pub q: usize,
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub alpha: f64,
    /// Step size at the end of the run.
    pub gamma: f64,
    pub samples: Vec<DMatrix<f64>>,
}

impl StoredChain {
    pub fn from_chain<T: Real>(chain: &Chain<T>) -> Self {
        let (p, q) = chain.samples.first().map_or((0, 0), |s| s.shape());
        StoredChain {
            p,
            q,
            n_steps: chain.config.n_steps,
            burn_in: chain.config.burn_in,
            thin: chain.config.thin,
            alpha: chain.config.alpha.as_f64(),
            gamma: chain.final_step_size.as_f64(),
            samples: chain.samples.iter().map(|s| s.map(|v| v.as_f64())).collect(),
        }
    }

    pub fn posterior_mean(&self) -> Result<DMatrix<f64>> {
        mean_matrix(&self.samples)
    }
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::invalid(format!("{what} = {v} does not fit the chain header")))
}

pub fn write_chain(path: &Path, chain: &StoredChain) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHAIN_MAGIC)?;
    for (v, what) in [
        (chain.p, "p"),
        (chain.q, "q"),
        (chain.samples.len(), "n_samples"),
        (chain.n_steps, "n_steps"),
        (chain.burn_in, "burn_in"),
        (chain.thin, "thin"),
    ] {
        w.write_all(&u32_field(v, what)?)?;
    }
    w.write_all(&chain.alpha.to_le_bytes())?;
    w.write_all(&chain.gamma.to_le_bytes())?;
    for s in &chain.samples {
        if s.shape() != (chain.p, chain.q) {
            return Err(Error::shape(format!("sample {:?} in a {}x{} chain", s.shape(), chain.p, chain.q)));
        }
        for i in 0..chain.p {
            for j in 0..chain.q {
                w.write_all(&s[(i, j)].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_chain(path: &Path) -> Result<StoredChain> {
    let mut r = BufReader::new(File::open(path)?);
    let short = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            format_err(path, "truncated file")
        } else {
            Error::Io(e)
        }
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != CHAIN_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let mut u = [0usize; 6];
    for slot in &mut u {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(short)?;
        *slot = u32::from_le_bytes(b) as usize;
    }
    let mut f = [0f64; 2];
    for slot in &mut f {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(short)?;
        *slot = f64::from_le_bytes(b);
    }
    let [p, q, n_samples, n_steps, burn_in, thin] = u;
    let mut samples = Vec::with_capacity(n_samples.min(1 << 20));
    let mut b = [0u8; 8];
    for _ in 0..n_samples {
        let mut m = DMatrix::zeros(p, q);
        for i in 0..p {
            for j in 0..q {
                r.read_exact(&mut b).map_err(short)?;
                m[(i, j)] = f64::from_le_bytes(b);
            }
        }
        samples.push(m);
    }
    if r.read(&mut b)? != 0 {
        return Err(format_err(path, "trailing bytes after the last sample"));
    }
    Ok(StoredChain { p, q, n_steps, burn_in, thin, alpha: f[0], gamma: f[1], samples })
}

/// Sidecar trace: one row per retained sample.
pub fn write_chain_trace<T: Real>(path: &Path, chain: &Chain<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,log_post,accepted")?;
    for ((s, lp), acc) in chain.steps.iter().zip(&chain.log_post).zip(&chain.accepted) {
        writeln!(w, "{s},{},{}", fmt_f64(lp.as_f64()), u8::from(*acc))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the sidecar trace back as (step, log_post, accepted) triples.
pub fn read_chain_trace(path: &Path) -> Result<Vec<(usize, f64, bool)>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if k == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || format_err(path, format!("line {}: `{line}`", k + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let step = f[0].trim().parse().map_err(|_| bad())?;
        let lp = f[1].trim().parse().map_err(|_| bad())?;
        let acc = match f[2].trim() {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        out.push((step, lp, acc));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("frrr-io-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn matrix_csv_round_trips_exactly() {
        let d = tmp("csv");
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, f64::MAX, 2.0_f64.sqrt(), -0.0]);
        let path = d.join("m.csv");
        write_matrix_csv(&path, &m, Some(&["a".into(), "b".into(), "c".into()])).unwrap();
        let back: DMatrix<f64> = read_matrix_csv(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn chain_round_trips() {
        let d = tmp("chain");
        let c = StoredChain {
            p: 2,
            q: 3,
            n_steps: 100,
            burn_in: 20,
            thin: 10,
            alpha: 0.5,
            gamma: 1.25e-3,
            samples: vec![
                DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
                DMatrix::from_row_slice(2, 3, &[-1.0, 0.5, 0.25, 1e-9, 7.0, -8.0]),
            ],
        };
        let path = d.join("c.bin");
        write_chain(&path, &c).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CHAIN_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 8 + 24 + 16 + 2 * 6 * 8);
        // Row-major: the second value stored is B[0,1].
        assert_eq!(f64::from_le_bytes(bytes[48 + 8..48 + 16].try_into().unwrap()), 2.0);
        assert_eq!(read_chain(&path).unwrap(), c);

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_chain(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_round_trips() {
        let d = tmp("data");
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let y = DMatrix::from_row_slice(3, 1, &[0.0, 3.0, 1.0]);
        let data = Dataset::new(x, y, FamilySpec::<f64>::negbin_log(2.5).unwrap()).unwrap();
        write_dataset(&d, &data, 42, "iid").unwrap();
        let (back, meta) = read_dataset::<f64>(&d).unwrap();
        assert_eq!(meta.seed, 42);
        assert_eq!(back.x(), data.x());
        assert_eq!(back.y(), data.y());
        assert_eq!(back.family(), data.family());
        assert_eq!(back.digest(), data.digest());
    }
}
