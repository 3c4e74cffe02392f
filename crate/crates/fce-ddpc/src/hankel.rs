//! Dataset ingestion and scaled block-Hankel matrices.
//!
//! A [`Dataset`] holds an open-loop input/output log. [`build_hankel`] slices
//! a signal into the block-Hankel matrix `V_[t0,t1],N` whose column `j` stacks
//! the samples `v(t0+j) … v(t1+j)` (time indices are 1-based, matching the
//! usual subspace-identification convention), optionally scaled by `1/√N`.
//! [`partition`] produces the two partitions consumed downstream: the ARX
//! partition (past joint samples and the next output) and the LQ partition
//! (past joint block plus future input/output blocks over the horizon).

use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// An open-loop input/output log with `n_data` rows.
///
/// Row `t` (0-based) holds the sample pair `(u(t+1), y(t+1))` in 1-based
/// signal time. The joint sample is always ordered output-above-input,
/// `z(t) = [y(t); u(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    u_log: DMatrix<f64>,
    y_log: DMatrix<f64>,
}

impl Dataset {
    /// Builds a dataset from input (`n_data × m`) and output (`n_data × p`)
    /// logs with one row per time step.
    pub fn new(u_log: DMatrix<f64>, y_log: DMatrix<f64>) -> Result<Self> {
        if u_log.nrows() != y_log.nrows() {
            return Err(Error::Dimension(format!(
                "u_log has {} rows but y_log has {}",
                u_log.nrows(),
                y_log.nrows()
            )));
        }
        if u_log.nrows() == 0 {
            return Err(Error::Dimension("dataset must contain at least one sample".into()));
        }
        if u_log.ncols() == 0 || y_log.ncols() == 0 {
            return Err(Error::Dimension("channel groups must be nonempty (m ≥ 1, p ≥ 1)".into()));
        }
        if u_log.iter().chain(y_log.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parse("dataset contains non-finite values".into()));
        }
        Ok(Dataset { u_log, y_log })
    }

    /// Input dimension `m`.
    pub fn m(&self) -> usize {
        self.u_log.ncols()
    }

    /// Output dimension `p`.
    pub fn p(&self) -> usize {
        self.y_log.ncols()
    }

    /// Number of logged samples.
    pub fn n_data(&self) -> usize {
        self.u_log.nrows()
    }

    /// Input log, one row per time step.
    pub fn u_log(&self) -> &DMatrix<f64> {
        &self.u_log
    }

    /// Output log, one row per time step.
    pub fn y_log(&self) -> &DMatrix<f64> {
        &self.y_log
    }

    /// Input sample at 0-based time `t` as a column vector.
    pub fn u_at(&self, t: usize) -> DVector<f64> {
        self.u_log.row(t).transpose()
    }

    /// Output sample at 0-based time `t` as a column vector.
    pub fn y_at(&self, t: usize) -> DVector<f64> {
        self.y_log.row(t).transpose()
    }

    /// Joint signal matrix, one row per time step, ordered `[y(t), u(t)]`.
    pub fn joint(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n_data(), self.p() + self.m());
        z.view_mut((0, 0), (self.n_data(), self.p())).copy_from(&self.y_log);
        z.view_mut((0, self.p()), (self.n_data(), self.m())).copy_from(&self.u_log);
        z
    }

    /// Dataset consisting of rows `from ..` of this log.
    pub fn slice_from(&self, from: usize) -> Result<Dataset> {
        if from >= self.n_data() {
            return Err(Error::InsufficientSamples(format!(
                "cannot drop {from} samples from a log of {}",
                self.n_data()
            )));
        }
        let rows = self.n_data() - from;
        Dataset::new(self.u_log.rows(from, rows).into(), self.y_log.rows(from, rows).into())
    }

    /// Dataset consisting of the last `n` rows of this log.
    pub fn tail(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.n_data() {
            return Err(Error::InsufficientSamples(format!(
                "tail of {n} samples requested from a log of {}",
                self.n_data()
            )));
        }
        self.slice_from(self.n_data() - n)
    }
}

/// A block-Hankel matrix `V_[t0,t1],N` together with its window metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelBlock {
    values: DMatrix<f64>,
    /// First (1-based) time index of the window.
    pub t0: usize,
    /// Last (1-based) time index of the window.
    pub t1: usize,
    /// Number of columns `N`.
    pub n_cols: usize,
    /// Dimension of one signal sample.
    pub v_dim: usize,
    /// Whether the `1/√N` scaling is applied to `values`.
    pub scaled: bool,
}

impl HankelBlock {
    /// The stored matrix (scaled by `1/√N` when `self.scaled`).
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// The matrix with the `1/√N` scaling removed.
    pub fn unscaled(&self) -> DMatrix<f64> {
        if self.scaled {
            &self.values * (self.n_cols as f64).sqrt()
        } else {
            self.values.clone()
        }
    }

    /// Number of block rows `t1 − t0 + 1`.
    pub fn n_block_rows(&self) -> usize {
        self.t1 - self.t0 + 1
    }

    /// Block row `i` (0-based) as a `v_dim × N` matrix.
    pub fn block_row(&self, i: usize) -> DMatrix<f64> {
        self.values.rows(i * self.v_dim, self.v_dim).into()
    }
}

/// Builds the block-Hankel matrix of `signal` (one row per time step) over the
/// 1-based window `[t0, t1]` with `n_cols` columns.
///
/// Element block `(i, j)` equals `signal(t0+i+j)`, divided by `√n_cols` when
/// `scaled` is set.
pub fn build_hankel(
    signal: &DMatrix<f64>,
    t0: usize,
    t1: usize,
    n_cols: usize,
    scaled: bool,
) -> Result<HankelBlock> {
    if t0 < 1 || t1 < t0 {
        return Err(Error::Dimension(format!("window must satisfy 1 ≤ t0 ≤ t1, got [{t0}, {t1}]")));
    }
    if n_cols < 1 {
        return Err(Error::Dimension("Hankel matrix needs at least one column".into()));
    }
    if t1 + n_cols - 1 > signal.nrows() {
        return Err(Error::InsufficientSamples(format!(
            "window [{t0}, {t1}] with {n_cols} columns needs {} samples, log has {}",
            t1 + n_cols - 1,
            signal.nrows()
        )));
    }
    let v_dim = signal.ncols();
    let rows = (t1 - t0 + 1) * v_dim;
    let factor = if scaled { 1.0 / (n_cols as f64).sqrt() } else { 1.0 };
    let mut values = DMatrix::zeros(rows, n_cols);
    for i in 0..(t1 - t0 + 1) {
        for j in 0..n_cols {
            // 1-based sample time t0+i+j lives at 0-based row t0+i+j-1.
            let t = t0 + i + j - 1;
            for d in 0..v_dim {
                values[(i * v_dim + d, j)] = signal[(t, d)] * factor;
            }
        }
    }
    Ok(HankelBlock { values, t0, t1, n_cols, v_dim, scaled })
}

/// The past/future Hankel partitions of a dataset for order `ρ` and horizon `T`.
///
/// `z_p_arx`/`y_next` share the ARX column count `N_arx = N_data − ρ`;
/// `z_p`/`u_f`/`y_f` share the LQ column count `N_lq = N_data − ρ − T + 1`.
/// All blocks carry the `1/√N` scaling of their partition.
#[derive(Debug, Clone)]
pub struct PartitionedData {
    /// Joint past block `Z_[1,ρ]` on the ARX window.
    pub z_p_arx: HankelBlock,
    /// Next-output block `Y_[ρ+1,ρ+1]` on the ARX window.
    pub y_next: HankelBlock,
    /// Joint past block `Z_[1,ρ]` on the LQ window.
    pub z_p: HankelBlock,
    /// Future input block `U_[ρ+1,ρ+T]` on the LQ window.
    pub u_f: HankelBlock,
    /// Future output block `Y_[ρ+1,ρ+T]` on the LQ window.
    pub y_f: HankelBlock,
    /// ARX column count `N_data − ρ`.
    pub n_arx: usize,
    /// LQ column count `N_data − ρ − T + 1`.
    pub n_lq: usize,
    /// Truncation order.
    pub rho: usize,
    /// Prediction horizon.
    pub t: usize,
    /// Input dimension.
    pub m: usize,
    /// Output dimension.
    pub p: usize,
}

/// Splits a dataset into its ARX and LQ Hankel partitions.
///
/// The future window starts directly after the past window: `U_F = U_[ρ+1,ρ+T]`
/// and `Y_F = Y_[ρ+1,ρ+T]`, so no row of the past block is repeated in the
/// future blocks.
pub fn partition(dataset: &Dataset, rho: usize, t: usize) -> Result<PartitionedData> {
    let (m, p, n_data) = (dataset.m(), dataset.p(), dataset.n_data());
    if rho < 1 || t < 1 {
        return Err(Error::Dimension(format!("need ρ ≥ 1 and T ≥ 1, got ρ={rho}, T={t}")));
    }
    if n_data < rho + t + 1 {
        return Err(Error::HorizonTooLong(format!(
            "N_data = {n_data} leaves no future columns for ρ = {rho}, T = {t}"
        )));
    }
    let n_arx = n_data - rho;
    let n_lq = n_data - rho - t + 1;
    // Fewer columns than stacked past + future-input rows makes the LQ
    // factors rank-deficient by construction, so reject early.
    if n_lq < (m + p) * rho + m * t {
        return Err(Error::HorizonTooLong(format!(
            "N_lq = {n_lq} columns cannot support {} past + future-input rows",
            (m + p) * rho + m * t
        )));
    }
    let z = dataset.joint();
    Ok(PartitionedData {
        z_p_arx: build_hankel(&z, 1, rho, n_arx, true)?,
        y_next: build_hankel(dataset.y_log(), rho + 1, rho + 1, n_arx, true)?,
        z_p: build_hankel(&z, 1, rho, n_lq, true)?,
        u_f: build_hankel(dataset.u_log(), rho + 1, rho + t, n_lq, true)?,
        y_f: build_hankel(dataset.y_log(), rho + 1, rho + t, n_lq, true)?,
        n_arx,
        n_lq,
        rho,
        t,
        m,
        p,
    })
}

/// Formats one value with 17 significant digits (lossless f64 round-trip).
fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Serializes a dataset to the CSV interchange format: a `m=<m>,p=<p>` header
/// line followed by one `u(t),y(t)` row per sample, inputs first.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "m={},p={}", ds.m(), ds.p());
    for t in 0..ds.n_data() {
        let mut fields = Vec::with_capacity(ds.m() + ds.p());
        for j in 0..ds.m() {
            fields.push(format_value(ds.u_log()[(t, j)]));
        }
        for j in 0..ds.p() {
            fields.push(format_value(ds.y_log()[(t, j)]));
        }
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

/// Parses the CSV interchange format produced by [`dataset_to_csv`].
pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty file".into()))?;
    let (m, p) = parse_header(header)?;
    let mut u_rows: Vec<f64> = Vec::new();
    let mut y_rows: Vec<f64> = Vec::new();
    let mut n_data = 0usize;
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != m + p {
            return Err(Error::Parse(format!(
                "row {} has {} fields, expected {} (m={m} inputs then p={p} outputs)",
                idx + 2,
                fields.len(),
                m + p
            )));
        }
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad number {f:?}", idx + 2)))?;
            if k < m {
                u_rows.push(v);
            } else {
                y_rows.push(v);
            }
        }
        n_data += 1;
    }
    if n_data == 0 {
        return Err(Error::Parse("no data rows".into()));
    }
    Dataset::new(
        DMatrix::from_row_slice(n_data, m, &u_rows),
        DMatrix::from_row_slice(n_data, p, &y_rows),
    )
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let mut m = None;
    let mut p = None;
    for part in header.split(',') {
        let part = part.trim();
        if let Some(v) = part.strip_prefix("m=") {
            m = v.parse::<usize>().ok();
        } else if let Some(v) = part.strip_prefix("p=") {
            p = v.parse::<usize>().ok();
        } else {
            return Err(Error::Parse(format!("unexpected header field {part:?}")));
        }
    }
    match (m, p) {
        (Some(m), Some(p)) if m >= 1 && p >= 1 => Ok((m, p)),
        _ => Err(Error::Parse(format!(
            "header must declare m=<int>,p=<int> with both ≥ 1, got {header:?}"
        ))),
    }
}

/// Loads a dataset from a CSV file (see [`dataset_to_csv`] for the format).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    dataset_from_csv(&text)
}

/// Saves a dataset to a CSV file with full-precision values.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_csv(ds))?;
    Ok(())
}
