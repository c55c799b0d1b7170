//! Image stacks on disk and in memory, plus tabular CSV export.
//!
//! RAWSTACK layout (little-endian, 40-byte header):
//!
//! | offset | type   | field                          |
//! |--------|--------|--------------------------------|
//! | 0      | [u8;8] | magic `AIUQSTK1`               |
//! | 8      | u32    | version (= 1)                  |
//! | 12     | u32    | n1 (rows)                      |
//! | 16     | u32    | n2 (cols)                      |
//! | 20     | u32    | n (frames)                     |
//! | 24     | f64    | dt_min, seconds per frame      |
//! | 32     | f64    | px_size, micrometers per pixel |
//! | 40     | f32[]  | n frames of n1·n2, row-major   |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::curve::MsdCurve;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AIUQSTK1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

/// A calibrated stack of `n` frames of `n1 × n2` intensities.
///
/// Pixels are stored frame-major, each frame row-major. Intensities are
/// `f64` in memory and `f32` on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub n1: usize,
    pub n2: usize,
    pub n: usize,
    pub dt_min: f64,
    pub px_size: f64,
    data: Vec<f64>,
    degenerate: bool,
}

impl ImageStack {
    pub fn new(n1: usize, n2: usize, n: usize, dt_min: f64, px_size: f64, data: Vec<f64>) -> Result<Self> {
        if n1 < 4 || n2 < 4 || n < 3 {
            return Err(Error::validation(format!(
                "stack must be at least 4x4x3, got {n1}x{n2}x{n}"
            )));
        }
        if !(dt_min > 0.0 && dt_min.is_finite()) || !(px_size > 0.0 && px_size.is_finite()) {
            return Err(Error::validation("dt_min and px_size must be positive"));
        }
        if data.len() != n1 * n2 * n {
            return Err(Error::validation(format!(
                "payload has {} values, expected {}",
                data.len(),
                n1 * n2 * n
            )));
        }
        Ok(ImageStack { n1, n2, n, dt_min, px_size, data, degenerate: false })
    }

    pub fn zeros(n1: usize, n2: usize, n: usize, dt_min: f64, px_size: f64) -> Result<Self> {
        Self::new(n1, n2, n, dt_min, px_size, vec![0.0; n1 * n2 * n])
    }

    pub fn frame_len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let len = self.frame_len();
        &self.data[k * len..(k + 1) * len]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f64] {
        let len = self.frame_len();
        &mut self.data[k * len..(k + 1) * len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Set by [`normalize`] when every pixel of the stack has the same value.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn get(&self, k: usize, row: usize, col: usize) -> f64 {
        self.data[k * self.frame_len() + row * self.n2 + col]
    }
}

/// Rescales the whole stack with one affine map onto `[0, 1]`.
///
/// A constant stack maps to all zeros and is flagged degenerate.
pub fn normalize(stack: &ImageStack) -> ImageStack {
    let (lo, hi) = stack
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = stack.clone();
    if !(hi > lo) {
        log::warn!("constant image stack (value {lo}); normalized to zeros and flagged degenerate");
        out.data.iter_mut().for_each(|v| *v = 0.0);
        out.degenerate = true;
        return out;
    }
    let span = hi - lo;
    out.data.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out.degenerate = false;
    out
}

pub fn write_stack(stack: &ImageStack, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| Error::validation(format!("dimension {v} exceeds u32")))
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&dim(stack.n1)?.to_le_bytes())?;
    w.write_all(&dim(stack.n2)?.to_le_bytes())?;
    w.write_all(&dim(stack.n)?.to_le_bytes())?;
    w.write_all(&stack.dt_min.to_le_bytes())?;
    w.write_all(&stack.px_size.to_le_bytes())?;
    for &v in &stack.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<ImageStack> {
    let mut file = File::open(path.as_ref())?;
    let mut header = [0u8; HEADER_LEN];
    let got = read_full(&mut file, &mut header)?;
    if got < MAGIC.len() || &header[..8] != MAGIC {
        return Err(Error::Format("missing AIUQSTK1 magic".into()));
    }
    if got < HEADER_LEN {
        return Err(Error::CorruptFile(format!("header truncated at {got} bytes")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(header[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (n1, n2, n) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    let (dt_min, px_size) = (f64_at(24), f64_at(32));
    if n1 < 4 || n2 < 4 || n < 3 {
        return Err(Error::CorruptFile(format!("invalid dimensions {n1}x{n2}x{n}")));
    }
    if !(dt_min > 0.0 && dt_min.is_finite()) || !(px_size > 0.0 && px_size.is_finite()) {
        return Err(Error::CorruptFile(format!("invalid calibration dt={dt_min} px={px_size}")));
    }
    let count = n1
        .checked_mul(n2)
        .and_then(|v| v.checked_mul(n))
        .filter(|&v| v.checked_mul(4).is_some())
        .ok_or_else(|| Error::CorruptFile("dimension overflow".into()))?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(Error::CorruptFile(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(ImageStack { n1, n2, n, dt_min, px_size, data, degenerate: false })
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            k => filled += k,
        }
    }
    Ok(filled)
}

/// Named columns of numeric rows. Missing cells export as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl CurveTable {
    pub fn new(columns: &[&str]) -> Self {
        CurveTable { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Option<f64>>) {
        self.rows.push(row);
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.rows.iter().position(|r| r.len() != self.columns.len()) {
            return Err(Error::validation(format!(
                "row {i} has {} cells, expected {}",
                self.rows[i].len(),
                self.columns.len()
            )));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, row) in self.rows.iter().enumerate() {
            let key = row
                .first()
                .copied()
                .flatten()
                .ok_or_else(|| Error::validation(format!("row {i} has an empty key column")))?;
            if !(key > prev) {
                return Err(Error::validation(format!(
                    "column '{}' is not strictly increasing at row {i}",
                    self.columns[0]
                )));
            }
            prev = key;
        }
        Ok(())
    }

    /// `lag_time,msd,msd_lower,msd_upper`; bounds are empty when absent.
    pub fn from_msd(curve: &MsdCurve) -> Self {
        let mut t = CurveTable::new(&["lag_time", "msd", "msd_lower", "msd_upper"]);
        for k in 0..curve.len() {
            t.push(vec![
                Some(curve.lags[k]),
                Some(curve.msd[k]),
                curve.lower.as_ref().map(|v| v[k]),
                curve.upper.as_ref().map(|v| v[k]),
            ]);
        }
        t
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| c.map(format_f64).unwrap_or_default()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn export_curve(table: &CurveTable, path: impl AsRef<Path>) -> Result<()> {
    table.validate()?;
    let mut f = BufWriter::new(File::create(path.as_ref())?);
    f.write_all(table.to_csv_string().as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Parses a CSV produced by [`export_curve`] (or any header + numeric rows).
pub fn read_curve_table(path: impl AsRef<Path>) -> Result<CurveTable> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::validation("empty csv"))??;
    let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                let c = c.trim();
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::validation(format!("line {}: '{c}': {e}", i + 2)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let table = CurveTable { columns, rows };
    table.validate()?;
    Ok(table)
}

/// Reads `lag_time,msd[,msd_lower,msd_upper]`. Bounds are kept only when
/// every row has both.
pub fn read_msd_csv(path: impl AsRef<Path>) -> Result<MsdCurve> {
    let table = read_curve_table(path)?;
    let col = |name: &str| table.columns.iter().position(|c| c == name);
    let (lag_i, msd_i) = match (col("lag_time"), col("msd")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::validation("msd csv needs lag_time and msd columns")),
    };
    let get = |i: usize| -> Result<Vec<f64>> {
        table
            .rows
            .iter()
            .map(|r| r[i].ok_or_else(|| Error::validation("empty cell in required column")))
            .collect()
    };
    let mut curve = MsdCurve::new(get(lag_i)?, get(msd_i)?)?;
    if let (Some(lo), Some(hi)) = (col("msd_lower"), col("msd_upper")) {
        let lower: Option<Vec<f64>> = table.rows.iter().map(|r| r[lo]).collect();
        let upper: Option<Vec<f64>> = table.rows.iter().map(|r| r[hi]).collect();
        if let (Some(l), Some(u)) = (lower, upper) {
            curve = curve.with_bounds(l, u)?;
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(n1: usize, n2: usize, n: usize, seed: u64) -> ImageStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // f32-representable values so the disk round trip is exact
        let data = (0..n1 * n2 * n).map(|_| (rng.random::<f32>() * 40.0 - 3.0) as f64).collect();
        ImageStack::new(n1, n2, n, 0.031, 0.29, data).unwrap()
    }

    #[test]
    fn zero_stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.raw");
        let s = ImageStack::zeros(4, 4, 3, 1.0, 1.0).unwrap();
        write_stack(&s, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 232);
        let r = read_stack(&p).unwrap();
        assert_eq!(r.data().len(), 48);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_round_trip_and_file_size() {
        let dir = tempfile::tempdir().unwrap();
        for (i, &(n1, n2, n)) in [(4, 4, 3), (8, 5, 7), (16, 12, 4)].iter().enumerate() {
            let p = dir.path().join(format!("s{i}.raw"));
            let s = random_stack(n1, n2, n, i as u64);
            write_stack(&s, &p).unwrap();
            let size = std::fs::metadata(&p).unwrap().len() as usize;
            assert_eq!(size, 40 + 4 * n1 * n2 * n);
            let r = read_stack(&p).unwrap();
            assert_eq!(r, s);
            assert!(r.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.raw");
        let s = ImageStack::zeros(4, 4, 3, 1.0, 1.0).unwrap();
        write_stack(&s, &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_stack(&p), Err(Error::Format(_))));

        let mut zero_n = good.clone();
        zero_n[20..24].copy_from_slice(&0u32.to_le_bytes());
        std::fs::write(&p, &zero_n).unwrap();
        assert!(matches!(read_stack(&p), Err(Error::CorruptFile(_))));

        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_stack(&p), Err(Error::CorruptFile(_))));

        let mut huge = good.clone();
        for o in [12, 16, 20] {
            huge[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        std::fs::write(&p, &huge).unwrap();
        assert!(matches!(read_stack(&p), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let s = ImageStack::zeros(4, 4, 3, 1.0, 1.0).unwrap();
        let err = write_stack(&s, "/nonexistent-dir/x/y.raw").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn normalize_affine_map() {
        let mut data = vec![10.0; 48];
        data[5] = 30.0;
        data[7] = 20.0;
        let s = ImageStack::new(4, 4, 3, 1.0, 1.0, data).unwrap();
        let z = normalize(&s);
        assert_eq!(z.data()[7], 0.5);
        assert_eq!(z.data()[5], 1.0);
        assert_eq!(z.data()[0], 0.0);
        assert!(!z.is_degenerate());
        // idempotent once the stack spans [0, 1]
        assert_eq!(normalize(&z), z);
    }

    #[test]
    fn normalize_constant_stack_is_flagged() {
        let s = ImageStack::new(4, 4, 3, 1.0, 1.0, vec![7.0; 48]).unwrap();
        let z = normalize(&s);
        assert!(z.is_degenerate());
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_keeps_extrema_locations() {
        let s = random_stack(6, 6, 4, 9);
        let z = normalize(&s);
        for k in 0..s.n {
            let argmax = |f: &[f64]| {
                f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
            };
            let argmin = |f: &[f64]| {
                f.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
            };
            assert_eq!(argmax(s.frame(k)), argmax(z.frame(k)));
            assert_eq!(argmin(s.frame(k)), argmin(z.frame(k)));
        }
    }

    #[test]
    fn export_two_rows_and_reparse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("msd.csv");
        let curve = MsdCurve::new(vec![0.1, 0.2], vec![1.0 / 3.0, std::f64::consts::PI]).unwrap();
        export_curve(&CurveTable::from_msd(&curve), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), "lag_time,msd,msd_lower,msd_upper");
        let back = read_msd_csv(&p).unwrap();
        assert_eq!(back.msd[0].to_bits(), curve.msd[0].to_bits());
        assert_eq!(back.msd[1].to_bits(), curve.msd[1].to_bits());
        assert!(back.lower.is_none());
    }

    #[test]
    fn export_rejects_non_increasing_key() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = CurveTable::new(&["lag_time", "msd"]);
        t.push(vec![Some(2.0), Some(1.0)]);
        t.push(vec![Some(1.0), Some(1.0)]);
        let err = export_curve(&t, dir.path().join("x.csv")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    proptest::proptest! {
        #[test]
        fn csv_cells_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let back: f64 = format_f64(v).parse().unwrap();
            proptest::prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}
