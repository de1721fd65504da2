//! Covariance models from CSV datasets or covariance-matrix files.
//!
//! Dataset CSV: comma separated, header row, `.` decimal point, optional
//! quoting, UTF-8. An empty field is a missing value; rows with a missing
//! value in any selected column are dropped (listwise deletion). The sample
//! covariance uses denominator `n − 1`; an intercept is always included,
//! which is equivalent to centering every column.
//!
//! Covariance file: a square CSV whose first row holds the variable labels
//! and whose remaining rows hold the matrix entries in the same order.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::covkernel::{check_symmetric, CovarianceModel, Role};
use crate::error::{Error, Result};
use crate::stream_rng;

/// Symmetry tolerance for covariance files.
pub const FILE_SYMMETRY_TOLERANCE: f64 = 1e-8;
/// Sample variances at or below this mark a column as constant.
pub const CONSTANT_COLUMN_VARIANCE: f64 = 1e-14;

/// Which dataset columns play which role.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub outcome: String,
    pub treatment: String,
    pub calibration: Vec<String>,
    pub controls: Vec<String>,
    /// Always true: all regressions include a constant, so columns are
    /// centered. Kept explicit for documentation.
    pub add_intercept: bool,
}

impl DatasetSpec {
    pub fn new(path: impl Into<PathBuf>, outcome: &str, treatment: &str, calibration: &[&str], controls: &[&str]) -> Self {
        Self {
            path: path.into(),
            outcome: outcome.to_string(),
            treatment: treatment.to_string(),
            calibration: calibration.iter().map(|s| s.to_string()).collect(),
            controls: controls.iter().map(|s| s.to_string()).collect(),
            add_intercept: true,
        }
    }

    /// Selected columns in model order: outcome, treatment, calibration, controls.
    pub fn columns(&self) -> Vec<(String, Role)> {
        let mut out = vec![(self.outcome.clone(), Role::Outcome), (self.treatment.clone(), Role::Treatment)];
        out.extend(self.calibration.iter().map(|c| (c.clone(), Role::Calibration)));
        out.extend(self.controls.iter().map(|c| (c.clone(), Role::Control)));
        out
    }
}

/// Sample information behind an estimated covariance model.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub n_rows_read: usize,
    pub n_rows_used: usize,
    pub means: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Mean and `n − 1` covariance of the rows.
fn sample_moments(rows: &[Vec<f64>], p: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(p);
    for r in rows {
        for j in 0..p {
            mean[j] += r[j];
        }
    }
    mean /= n;
    let mut cov = DMatrix::zeros(p, p);
    for r in rows {
        for i in 0..p {
            let di = r[i] - mean[i];
            for j in i..p {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in i..p {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Estimates the covariance model of the selected columns of a CSV dataset.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(CovarianceModel, SampleSummary)> {
    let columns = spec.columns();
    for (i, (c, _)) in columns.iter().enumerate() {
        if columns[..i].iter().any(|(d, _)| d == c) {
            return Err(Error::RoleMismatch(format!("column `{c}` is selected more than once")));
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&spec.path)
        .map_err(|e| io_error(&spec.path, e))?;
    let header = reader.headers().map_err(|e| io_error(&spec.path, e))?.clone();
    let positions = columns
        .iter()
        .map(|(c, _)| header.iter().position(|h| h.trim() == c).ok_or_else(|| Error::MissingColumn(c.clone())))
        .collect::<Result<Vec<_>>>()?;
    let p = columns.len();
    let mut rows = Vec::new();
    let mut n_read = 0;
    for (i, record) in reader.records().enumerate() {
        // Data rows are numbered from 1; the header is row 0.
        let record = record.map_err(|e| io_error(&spec.path, e))?;
        n_read += 1;
        let mut row = Vec::with_capacity(p);
        let mut complete = true;
        for (j, &pos) in positions.iter().enumerate() {
            let field = record.get(pos).unwrap_or("").trim();
            if field.is_empty() {
                complete = false;
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: columns[j].0.clone(),
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row: i + 1, column: columns[j].0.clone(), value: field.to_string() });
            }
            row.push(v);
        }
        if complete {
            rows.push(row);
        }
    }
    let needed = p + 2;
    if rows.len() < needed {
        return Err(Error::TooFewRows { used: rows.len(), variables: p, needed });
    }
    let (means, sigma_hat) = sample_moments(&rows, p);
    for (j, (c, _)) in columns.iter().enumerate() {
        if sigma_hat[(j, j)] <= CONSTANT_COLUMN_VARIANCE * (1.0 + means[j] * means[j]) {
            return Err(Error::ConstantColumn(c.clone()));
        }
    }
    let labels = columns.iter().map(|(c, _)| c.clone()).collect();
    let roles = columns.iter().map(|&(_, r)| r).collect();
    let model = CovarianceModel::new(sigma_hat.clone(), labels, roles)?;
    Ok((model, SampleSummary { n_rows_read: n_read, n_rows_used: rows.len(), means, sigma_hat }))
}

/// Reads a labelled covariance matrix and assigns roles by label. Every
/// label in `roles` must appear in the file; other labels are dropped.
pub fn load_covariance(path: &Path, roles: &BTreeMap<String, Role>) -> Result<CovarianceModel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_error(path, e))?;
    let labels: Vec<String> = reader.headers().map_err(|e| io_error(path, e))?.iter().map(|h| h.trim().to_string()).collect();
    let p = labels.len();
    let mut entries = Vec::with_capacity(p * p);
    let mut n_rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_error(path, e))?;
        if record.len() != p {
            return Err(Error::Dimension(format!("row {} has {} entries, expected {p}", i + 1, record.len())));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: labels[j].clone(),
                value: field.to_string(),
            })?;
            entries.push(v);
        }
        n_rows += 1;
    }
    if n_rows != p {
        return Err(Error::Dimension(format!("covariance file has {p} labels but {n_rows} rows")));
    }
    let full = DMatrix::from_row_slice(p, p, &entries);
    check_symmetric(&full, FILE_SYMMETRY_TOLERANCE)?;
    for l in roles.keys() {
        if !labels.contains(l) {
            return Err(Error::UnknownLabel(l.clone()));
        }
    }
    let keep: Vec<usize> = (0..p).filter(|&i| roles.contains_key(&labels[i])).collect();
    let sigma = DMatrix::from_fn(keep.len(), keep.len(), |i, j| 0.5 * (full[(keep[i], keep[j])] + full[(keep[j], keep[i])]));
    let kept_labels: Vec<String> = keep.iter().map(|&i| labels[i].clone()).collect();
    CovarianceModel::from_role_map(sigma, kept_labels, roles)
}

/// Writes a model's covariance matrix in the covariance-file format. Entries
/// use the shortest representation that parses back to the same `f64`.
pub fn write_covariance(model: &CovarianceModel, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    writer.write_record(model.labels()).map_err(|e| io_error(path, e))?;
    let s = model.sigma();
    for i in 0..s.nrows() {
        let row: Vec<String> = (0..s.ncols()).map(|j| format!("{:?}", s[(i, j)])).collect();
        writer.write_record(&row).map_err(|e| io_error(path, e))?;
    }
    writer.flush().map_err(|e| io_error(path, e))
}

/// `n` draws from `N(0, sigma)`, row `i` using random stream `(seed, i)`.
pub fn sample_gaussian(sigma: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    let chol = sigma.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        min_eigenvalue: f64::NAN,
        max_eigenvalue: f64::NAN,
    })?;
    let l = chol.l();
    let mut out = DMatrix::zeros(n, p);
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let x = &l * z;
        out.set_row(i, &x.transpose());
    }
    Ok(out)
}

/// Writes data rows under a header as CSV.
pub fn write_dataset(path: &Path, labels: &[String], data: &DMatrix<f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", labels.join(",")).map_err(|e| io_error(path, e))?;
    for i in 0..data.nrows() {
        let row: Vec<String> = (0..data.ncols()).map(|j| format!("{:?}", data[(i, j)])).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn listwise_deletion_then_row_floor() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "y,x,w\n1,2,3\n2,,4\n3,1,2\n");
        let err = load_dataset(&DatasetSpec::new(&p, "y", "x", &["w"], &[])).unwrap_err();
        assert_eq!(err, Error::TooFewRows { used: 2, variables: 3, needed: 5 });
    }

    #[test]
    fn parse_error_locates_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "y,x,w\n1,2,3\n2,abc,4\n");
        let err = load_dataset(&DatasetSpec::new(&p, "y", "x", &["w"], &[])).unwrap_err();
        assert_eq!(err, Error::Parse { row: 2, column: "x".into(), value: "abc".into() });
    }

    #[test]
    fn missing_and_constant_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "y,x,w\n1,2,3\n2,1,3\n3,5,3\n4,2,3\n5,0,3\n6,1,3\n");
        let spec = DatasetSpec::new(&p, "y", "x", &["w"], &[]);
        assert_eq!(load_dataset(&spec).unwrap_err(), Error::ConstantColumn("w".into()));
        let spec = DatasetSpec::new(&p, "y", "x", &["v"], &[]);
        assert_eq!(load_dataset(&spec).unwrap_err(), Error::MissingColumn("v".into()));
    }

    #[test]
    fn covariance_file_checks() {
        let dir = tempfile::tempdir().unwrap();
        let roles: BTreeMap<String, Role> =
            [("Y", Role::Outcome), ("X", Role::Treatment), ("W", Role::Calibration)].into_iter().map(|(a, b)| (a.to_string(), b)).collect();
        let p = write(&dir, "c.csv", "Y,X,W\n1,0,0\n0,1,0\n0,0,1\n");
        assert!(load_covariance(&p, &roles).is_ok());
        let p = write(&dir, "c2.csv", "Y,X,W\n1,0.101,0\n0.1,1,0\n0,0,1\n");
        assert!(matches!(load_covariance(&p, &roles), Err(Error::NotSymmetric { .. })));
    }
}
