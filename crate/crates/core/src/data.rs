//! Typed tabular data and CSV ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Scalar(Vec<f64>),
    /// Level codes `0..levels.len()` with their labels.
    Factor { codes: Vec<usize>, levels: Vec<String> },
    /// `n x m` block, e.g. a per-row quantile function evaluated at `m` levels.
    Matrix(DMatrix<f64>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Scalar(v) => v.len(),
            Column::Factor { codes, .. } => codes.len(),
            Column::Matrix(m) => m.nrows(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Column::Scalar(_) => "scalar",
            Column::Factor { .. } => "factor",
            Column::Matrix(_) => "matrix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    n: usize,
    columns: BTreeMap<String, Column>,
}

impl Dataset {
    pub fn new(n: usize) -> Self {
        Self { n, columns: BTreeMap::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn insert(&mut self, name: impl Into<String>, column: Column) -> Result<()> {
        let name = name.into();
        if column.len() != self.n {
            return Err(Error::Data(format!(
                "column `{name}` has {} rows, dataset has {}",
                column.len(),
                self.n
            )));
        }
        let finite = match &column {
            Column::Scalar(v) => v.iter().all(|x| x.is_finite()),
            Column::Matrix(m) => m.iter().all(|x| x.is_finite()),
            Column::Factor { codes, levels } => {
                if let Some(bad) = codes.iter().find(|&&c| c >= levels.len()) {
                    return Err(Error::Data(format!("factor `{name}` has out-of-range code {bad}")));
                }
                true
            }
        };
        if !finite {
            return Err(Error::Data(format!("column `{name}` contains NaN or infinite values")));
        }
        self.columns.insert(name, column);
        Ok(())
    }

    pub fn with_scalar(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.insert(name, Column::Scalar(values))?;
        Ok(self)
    }

    /// Build a factor column from labels; levels are the sorted distinct labels.
    pub fn with_factor<S: AsRef<str>>(mut self, name: &str, labels: &[S]) -> Result<Self> {
        self.insert(name, factor_from_labels(labels))?;
        Ok(self)
    }

    pub fn with_matrix(mut self, name: &str, values: DMatrix<f64>) -> Result<Self> {
        self.insert(name, Column::Matrix(values))?;
        Ok(self)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns.get(name).ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Scalar(v) => Ok(v),
            other => Err(Error::Data(format!("column `{name}` is a {}, expected scalar", other.kind()))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    /// Subset of rows, in the given order.
    pub fn rows(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::new(idx.len());
        for (name, col) in &self.columns {
            let c = match col {
                Column::Scalar(v) => Column::Scalar(idx.iter().map(|&i| v[i]).collect()),
                Column::Factor { codes, levels } => {
                    Column::Factor { codes: idx.iter().map(|&i| codes[i]).collect(), levels: levels.clone() }
                }
                Column::Matrix(m) => Column::Matrix(DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])),
            };
            out.columns.insert(name.clone(), c);
        }
        out
    }
}

pub(crate) fn factor_from_labels<S: AsRef<str>>(labels: &[S]) -> Column {
    let levels: Vec<String> =
        labels.iter().map(|s| s.as_ref().to_string()).collect::<BTreeSet<_>>().into_iter().collect();
    let codes = labels.iter().map(|s| levels.binary_search_by(|l| l.as_str().cmp(s.as_ref())).unwrap()).collect();
    Column::Factor { codes, levels }
}

/// How to interpret CSV columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaHints {
    /// Columns read as factors.
    pub factors: BTreeSet<String>,
    /// Matrix groups: prefix `q` with width `m` collects `q_1 ... q_m`.
    pub matrix_groups: BTreeMap<String, usize>,
    /// When set, only these columns (or groups) are read; the rest are skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub used: Option<BTreeSet<String>>,
}

/// Ingested data plus the SHA-256 fingerprint of the raw file bytes.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: Dataset,
    pub fingerprint: String,
}

pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn ingest_csv(path: impl AsRef<Path>, hints: &SchemaHints) -> Result<Ingested> {
    let bytes = std::fs::read(path.as_ref())?;
    ingest_csv_bytes(&bytes, hints)
}

pub fn ingest_csv_bytes(bytes: &[u8], hints: &SchemaHints) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(bytes);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Data(format!(
                "row {}: expected {expected_len} fields, found {len}",
                r + 1
            )),
            _ => Error::Data(format!("row {}: {e}", r + 1)),
        })?;
        for (c, field) in rec.iter().enumerate() {
            cells[c].push(field.trim().to_string());
        }
    }
    let n = cells.first().map_or(0, Vec::len);
    let col_index: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();

    let wanted = |name: &str| hints.used.as_ref().is_none_or(|u| u.contains(name));
    let parse_num = |c: usize| -> Result<Vec<f64>> {
        cells[c]
            .iter()
            .enumerate()
            .map(|(r, s)| {
                s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Data(format!("row {}, column `{}`: non-numeric value `{s}`", r + 1, headers[c]))
                })
            })
            .collect()
    };

    let mut data = Dataset::new(n);
    let mut grouped = BTreeSet::new();
    for (prefix, &m) in &hints.matrix_groups {
        if !wanted(prefix) {
            continue;
        }
        let mut mat = DMatrix::zeros(n, m);
        for j in 0..m {
            let name = format!("{prefix}_{}", j + 1);
            let &c = col_index
                .get(name.as_str())
                .ok_or_else(|| Error::Data(format!("missing column `{name}` of matrix group `{prefix}`")))?;
            for (r, v) in parse_num(c)?.into_iter().enumerate() {
                mat[(r, j)] = v;
            }
            grouped.insert(name);
        }
        data.insert(prefix.clone(), Column::Matrix(mat))?;
    }
    for name in &hints.factors {
        if !wanted(name) {
            continue;
        }
        let &c = col_index.get(name.as_str()).ok_or_else(|| Error::Data(format!("missing factor column `{name}`")))?;
        if let Some(r) = cells[c].iter().position(String::is_empty) {
            return Err(Error::Data(format!("row {}, column `{name}`: empty factor level", r + 1)));
        }
        data.insert(name.clone(), factor_from_labels(&cells[c]))?;
    }
    for (c, name) in headers.iter().enumerate() {
        if grouped.contains(name) || hints.factors.contains(name) || !wanted(name) {
            continue;
        }
        data.insert(name.clone(), Column::Scalar(parse_num(c)?))?;
    }
    if let Some(used) = &hints.used {
        for name in used {
            data.column(name)?;
        }
    }
    Ok(Ingested { data, fingerprint: fingerprint(bytes) })
}
