//! Multimodal fusion: per-device readings are stacked into one fused vector
//! per slot, and the most recent slots are kept in a sliding training window.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default floor applied to per-feature standard deviations.
pub const DEFAULT_SCALE_FLOOR: f64 = 1e-8;

/// Default number of slots kept in a training window.
pub const DEFAULT_WINDOW_CAPACITY: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("layout has no devices")]
    EmptyLayout,
    #[error("device `{0}` has zero dimensions")]
    ZeroDimension(String),
    #[error("device `{0}` appears twice in the layout")]
    DuplicateLayoutDevice(String),
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("missing reading for device `{0}`")]
    MissingDevice(String),
    #[error("duplicate reading for device `{0}`")]
    DuplicateDevice(String),
    #[error("device `{device}` expects {expected} values, got {actual}")]
    DimensionMismatch {
        device: String,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in reading for device `{0}`")]
    NonFinite(String),
    #[error("readings span several slots ({0} and {1})")]
    MixedSlots(u64, u64),
    #[error("vector length {actual} does not match expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("need at least {needed} columns, window holds {actual}")]
    TooFewColumns { needed: usize, actual: usize },
    #[error("slot {slot} is not newer than the newest slot {newest}")]
    SlotOrder { slot: u64, newest: u64 },
    #[error("window capacity must be positive")]
    ZeroCapacity,
    #[error("flagged feature index {0} out of range")]
    FeatureOutOfRange(usize),
}

/// How the fused feature space is partitioned among devices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DeviceSpec>", into = "Vec<DeviceSpec>")]
pub struct DeviceLayout {
    names: Vec<String>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
    index: HashMap<String, usize>,
    owner: Vec<usize>,
}

/// Serialized form of one layout entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub dims: usize,
}

impl DeviceLayout {
    pub fn new<I, S>(devices: I) -> Result<Self, FusionError>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let mut names = Vec::new();
        let mut dims = Vec::new();
        let mut offsets = Vec::new();
        let mut index = HashMap::new();
        let mut owner = Vec::new();
        let mut total = 0usize;
        for (name, d) in devices {
            let name = name.into();
            if d == 0 {
                return Err(FusionError::ZeroDimension(name));
            }
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(FusionError::DuplicateLayoutDevice(name));
            }
            offsets.push(total);
            owner.extend(std::iter::repeat_n(names.len(), d));
            total += d;
            names.push(name);
            dims.push(d);
        }
        if names.is_empty() {
            return Err(FusionError::EmptyLayout);
        }
        Ok(Self {
            names,
            dims,
            offsets,
            total,
            index,
            owner,
        })
    }

    /// Layout of `count` devices named `dev0..`, each with `dims` features.
    pub fn uniform(count: usize, dims: usize) -> Result<Self, FusionError> {
        Self::new((0..count).map(|i| (format!("dev{i}"), dims)))
    }

    pub fn device_count(&self) -> usize {
        self.names.len()
    }

    /// Total fused dimension b.
    pub fn total_dim(&self) -> usize {
        self.total
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn index_of(&self, device: &str) -> Option<usize> {
        self.index.get(device).copied()
    }

    /// Feature index range owned by device `n`.
    pub fn span_of(&self, n: usize) -> std::ops::Range<usize> {
        self.offsets[n]..self.offsets[n] + self.dims[n]
    }

    /// Device index owning feature `i`.
    pub fn owner_of(&self, feature: usize) -> usize {
        self.owner[feature]
    }

    /// Column identifiers `<device>.<k>` in fused order.
    pub fn feature_names(&self) -> Vec<String> {
        self.names
            .iter()
            .zip(&self.dims)
            .flat_map(|(n, &d)| (0..d).map(move |k| format!("{n}.{k}")))
            .collect()
    }

    /// Rebuilds a layout from `<device>.<k>` column identifiers. Features of a
    /// device must be contiguous and numbered from zero.
    pub fn from_feature_names<S: AsRef<str>>(headers: &[S]) -> Result<Self, String> {
        let mut devices: Vec<(String, usize)> = Vec::new();
        for (col, h) in headers.iter().enumerate() {
            let h = h.as_ref();
            let (dev, k) = h
                .rsplit_once('.')
                .ok_or_else(|| format!("column {}: header `{h}` is not `<device>.<k>`", col + 1))?;
            let k: usize = k
                .parse()
                .map_err(|_| format!("column {}: header `{h}` has a non-numeric feature index", col + 1))?;
            match devices.last_mut() {
                Some((name, d)) if name == dev => {
                    if k != *d {
                        return Err(format!("column {}: expected `{dev}.{d}`, found `{h}`", col + 1));
                    }
                    *d += 1;
                }
                _ => {
                    if k != 0 {
                        return Err(format!("column {}: device `{dev}` must start at feature 0", col + 1));
                    }
                    devices.push((dev.to_string(), 1));
                }
            }
        }
        Self::new(devices).map_err(|e| e.to_string())
    }
}

impl TryFrom<Vec<DeviceSpec>> for DeviceLayout {
    type Error = FusionError;

    fn try_from(specs: Vec<DeviceSpec>) -> Result<Self, Self::Error> {
        Self::new(specs.into_iter().map(|s| (s.name, s.dims)))
    }
}

impl From<DeviceLayout> for Vec<DeviceSpec> {
    fn from(layout: DeviceLayout) -> Self {
        layout
            .names
            .into_iter()
            .zip(layout.dims)
            .map(|(name, dims)| DeviceSpec { name, dims })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReading {
    pub device_id: String,
    pub slot: u64,
    pub values: Vec<f64>,
}

impl DeviceReading {
    pub fn new(device_id: impl Into<String>, slot: u64, values: Vec<f64>) -> Self {
        Self {
            device_id: device_id.into(),
            slot,
            values,
        }
    }

    /// Checks the reading against the layout.
    pub fn validate(&self, layout: &DeviceLayout) -> Result<usize, FusionError> {
        let n = layout
            .index_of(&self.device_id)
            .ok_or_else(|| FusionError::UnknownDevice(self.device_id.clone()))?;
        let expected = layout.dims()[n];
        if self.values.len() != expected {
            return Err(FusionError::DimensionMismatch {
                device: self.device_id.clone(),
                expected,
                actual: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(self.device_id.clone()));
        }
        Ok(n)
    }
}

/// The fused measurement vector d_t of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector {
    pub slot: u64,
    pub values: DVector<f64>,
}

impl FusedVector {
    pub fn new(slot: u64, values: impl Into<DVector<f64>>) -> Self {
        Self {
            slot,
            values: values.into(),
        }
    }

    pub fn from_slice(slot: u64, values: &[f64]) -> Self {
        Self::new(slot, DVector::from_column_slice(values))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slices the feature span of device `n`.
    pub fn device_values(&self, layout: &DeviceLayout, n: usize) -> Vec<f64> {
        self.values.as_slice()[layout.span_of(n)].to_vec()
    }
}

/// Stacks one reading per device into the fused vector.
pub fn fuse<'a, I>(readings: I, layout: &DeviceLayout) -> Result<FusedVector, FusionError>
where
    I: IntoIterator<Item = &'a DeviceReading>,
{
    let mut out = DVector::zeros(layout.total_dim());
    let mut seen = vec![false; layout.device_count()];
    let mut slot = None;
    for r in readings {
        let n = r.validate(layout)?;
        if std::mem::replace(&mut seen[n], true) {
            return Err(FusionError::DuplicateDevice(r.device_id.clone()));
        }
        match slot {
            None => slot = Some(r.slot),
            Some(s) if s != r.slot => return Err(FusionError::MixedSlots(s, r.slot)),
            _ => {}
        }
        out.rows_mut(layout.offsets()[n], r.values.len())
            .copy_from_slice(&r.values);
    }
    if let Some(n) = seen.iter().position(|s| !s) {
        return Err(FusionError::MissingDevice(layout.names()[n].clone()));
    }
    Ok(FusedVector::new(slot.unwrap_or_default(), out))
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, len: usize) -> Result<(), FusionError> {
        if len != self.dim() {
            return Err(FusionError::LengthMismatch {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    pub fn normalize(&self, v: &FusedVector) -> Result<FusedVector, FusionError> {
        self.check(v.len())?;
        let values = DVector::from_iterator(
            v.len(),
            v.values
                .iter()
                .zip(self.mean.iter().zip(&self.scale))
                .map(|(x, (m, s))| (x - m) / s),
        );
        Ok(FusedVector::new(v.slot, values))
    }

    pub fn denormalize(&self, v: &FusedVector) -> Result<FusedVector, FusionError> {
        self.check(v.len())?;
        let values = DVector::from_iterator(
            v.len(),
            v.values
                .iter()
                .zip(self.mean.iter().zip(&self.scale))
                .map(|(x, (m, s))| x * s + m),
        );
        Ok(FusedVector::new(v.slot, values))
    }

    /// Normalizes every column of a b×T matrix.
    pub fn normalize_matrix(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>, FusionError> {
        self.check(m.nrows())?;
        let mut out = m.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            let (mu, s) = (self.mean[i], self.scale[i]);
            row.apply(|x| *x = (*x - mu) / s);
        }
        Ok(out)
    }
}

/// Sliding window over the most recent fused vectors (the matrix D).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    capacity: usize,
    layout: DeviceLayout,
    columns: VecDeque<FusedVector>,
    flagged: VecDeque<Vec<usize>>,
}

impl TrainingWindow {
    pub fn new(layout: DeviceLayout, capacity: usize) -> Result<Self, FusionError> {
        if capacity == 0 {
            return Err(FusionError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            layout,
            columns: VecDeque::with_capacity(capacity),
            flagged: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layout(&self) -> &DeviceLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> impl ExactSizeIterator<Item = &FusedVector> {
        self.columns.iter()
    }

    /// Feature indices flagged as outliers when each column was admitted.
    pub fn flagged(&self) -> impl ExactSizeIterator<Item = &[usize]> {
        self.flagged.iter().map(Vec::as_slice)
    }

    pub fn slots(&self) -> Vec<u64> {
        self.columns.iter().map(|c| c.slot).collect()
    }

    pub fn push_slot(&mut self, v: FusedVector) -> Result<(), FusionError> {
        self.push_flagged(v, Vec::new())
    }

    /// Appends a column together with the features the detector flagged in it.
    pub fn push_flagged(&mut self, v: FusedVector, flagged: Vec<usize>) -> Result<(), FusionError> {
        let b = self.layout.total_dim();
        if v.len() != b {
            return Err(FusionError::LengthMismatch {
                expected: b,
                actual: v.len(),
            });
        }
        if let Some(&i) = flagged.iter().find(|&&i| i >= b) {
            return Err(FusionError::FeatureOutOfRange(i));
        }
        if let Some(newest) = self.columns.back() {
            if v.slot <= newest.slot {
                return Err(FusionError::SlotOrder {
                    slot: v.slot,
                    newest: newest.slot,
                });
            }
        }
        if self.columns.len() == self.capacity {
            self.columns.pop_front();
            self.flagged.pop_front();
        }
        self.columns.push_back(v);
        self.flagged.push_back(flagged);
        Ok(())
    }

    /// The window as a b×count matrix, oldest column first.
    pub fn matrix(&self) -> DMatrix<f64> {
        let b = self.layout.total_dim();
        let mut m = DMatrix::zeros(b, self.columns.len());
        for (j, c) in self.columns.iter().enumerate() {
            m.set_column(j, &c.values);
        }
        m
    }

    /// Per-feature mean and population standard deviation, floored.
    pub fn fit_norm(&self, floor: f64) -> Result<NormStats, FusionError> {
        let count = self.columns.len();
        if count < 2 {
            return Err(FusionError::TooFewColumns {
                needed: 2,
                actual: count,
            });
        }
        let b = self.layout.total_dim();
        let n = count as f64;
        let mut mean = vec![0.0; b];
        for c in &self.columns {
            for (m, x) in mean.iter_mut().zip(c.values.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; b];
        for c in &self.columns {
            for ((v, x), m) in var.iter_mut().zip(c.values.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var.into_iter().map(|v| (v / n).sqrt().max(floor)).collect();
        Ok(NormStats { mean, scale })
    }
}

/// A T×b matrix read from disk: one header of feature ids, one row per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MatrixFile {
    pub fn layout(&self) -> Result<DeviceLayout, String> {
        DeviceLayout::from_feature_names(&self.headers)
    }

    /// Row `t` as a fused vector for slot `t`.
    pub fn fused(&self, t: usize) -> FusedVector {
        FusedVector::from_slice(t as u64, &self.rows[t])
    }

    /// The rows as a b×T matrix (columns are slots).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let b = self.headers.len();
        DMatrix::from_fn(b, self.rows.len(), |i, j| self.rows[j][i])
    }
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("missing header row")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads the matrix CSV format. Ragged rows and non-numeric cells are errors
/// reported with their 1-based line number.
pub fn read_matrix_csv<R: Read>(reader: R) -> Result<MatrixFile, CsvError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let headers: Vec<String> = match records.next() {
        None => return Err(CsvError::MissingHeader),
        Some(r) => r
            .map_err(|e| csv_parse_error(&e, 1))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect(),
    };
    if headers.iter().all(String::is_empty) {
        return Err(CsvError::MissingHeader);
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_parse_error(&e, 0))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != headers.len() {
            return Err(CsvError::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(k, cell)| {
                let cell = cell.trim();
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(CsvError::Parse {
                        line,
                        message: format!("column {}: `{cell}` is not a finite number", k + 1),
                    }),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(MatrixFile { headers, rows })
}

fn csv_parse_error(e: &csv::Error, fallback_line: u64) -> CsvError {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
    CsvError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Writes rows (one per slot) under the given feature headers.
pub fn write_matrix_csv<W: Write>(mut w: W, headers: &[String], rows: &[Vec<f64>]) -> std::io::Result<()> {
    writeln!(w, "{}", headers.join(","))?;
    let mut line = String::new();
    for row in rows {
        line.clear();
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}
