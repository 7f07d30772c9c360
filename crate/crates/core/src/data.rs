//! Observed data, correlation matrices and leave-one-out correlations.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Default floor on the smallest eigenvalue for a correlation matrix to count
/// as invertible.
pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-10;

/// Individuals in rows, observed variables in columns.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    column_names: Vec<String>,
}

impl DataMatrix {
    /// Validates shape (`n >= p + 2`), finiteness and nonzero column variance.
    pub fn new(values: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        let (n, p) = values.shape();
        if p == 0 {
            return Err(Error::Input("data has no columns".into()));
        }
        if column_names.len() != p {
            return Err(Error::Shape(format!(
                "{} column names for {p} columns",
                column_names.len()
            )));
        }
        if n < p + 2 {
            return Err(Error::Input(format!(
                "need at least p + 2 = {} rows for leave-one-out analysis, got {n}",
                p + 2
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            let (row, column) = (idx % n, idx / n);
            return Err(Error::NonNumeric {
                row,
                column,
                name: column_names[column].clone(),
                value: values[idx].to_string(),
            });
        }
        let data = Self {
            values,
            column_names,
        };
        if let Some(column) = data.zero_variance_column(None) {
            return Err(Error::ZeroVariance {
                column,
                name: data.column_names[column].clone(),
            });
        }
        Ok(data)
    }

    /// Builds a matrix with generated column names `v1..vp`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let names = (1..=values.ncols()).map(|i| format!("v{i}")).collect();
        Self::new(values, names)
    }

    /// Reads comma-separated data with a header row. Row numbers in errors are
    /// 1-based data rows (the header is row 0).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Input(format!("cannot read header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        let p = names.len();
        let mut flat = Vec::new();
        let mut n = 0;
        for (r, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Input(format!("row {}: {e}", r + 1)))?;
            if record.len() != p {
                return Err(Error::Input(format!(
                    "row {} has {} fields, header has {p}",
                    r + 1,
                    record.len()
                )));
            }
            for (c, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::NonNumeric {
                    row: r + 1,
                    column: c,
                    name: names[c].clone(),
                    value: field.to_owned(),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonNumeric {
                        row: r + 1,
                        column: c,
                        name: names[c].clone(),
                        value: field.to_owned(),
                    });
                }
                flat.push(v);
            }
            n += 1;
        }
        Self::new(DMatrix::from_row_slice(n, p, &flat), names)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_means(&self) -> DVector<f64> {
        let n = self.n() as f64;
        DVector::from_iterator(self.p(), self.values.column_iter().map(|c| c.sum() / n))
    }

    /// Column standard deviations with the n - 1 denominator.
    pub fn column_sds(&self) -> DVector<f64> {
        let means = self.column_means();
        let n = self.n() as f64;
        DVector::from_iterator(
            self.p(),
            self.values.column_iter().enumerate().map(|(j, c)| {
                let m = means[j];
                (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
            }),
        )
    }

    /// Z-scores computed with the total-sample means and standard deviations.
    pub fn standardized(&self) -> DMatrix<f64> {
        let means = self.column_means();
        let sds = self.column_sds();
        DMatrix::from_fn(self.n(), self.p(), |i, j| {
            (self.values[(i, j)] - means[j]) / sds[j]
        })
    }

    fn zero_variance_column(&self, skip_row: Option<usize>) -> Option<usize> {
        let n = self.n() - usize::from(skip_row.is_some());
        (0..self.p()).find(|&j| {
            let col = self.values.column(j);
            let rows = || {
                col.iter()
                    .enumerate()
                    .filter(move |(i, _)| Some(*i) != skip_row)
                    .map(|(_, v)| *v)
            };
            let mean = rows().sum::<f64>() / n as f64;
            let var = rows().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            !(var > 1e-24 * (1.0 + mean * mean))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    /// Observed sample correlation S (or a leave-one-out S_(-k)).
    Sample,
    /// Model-implied Σ̂ = ΛΛ' + Ψ².
    ModelImplied,
    /// Implied matrix built from one individual's loadings.
    IndividualImplied,
}

/// Symmetric unit-diagonal matrix.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    values: DMatrix<f64>,
    kind: CorrelationKind,
}

impl CorrelationMatrix {
    /// Checks symmetry (1e-12) and forces the diagonal to exactly 1. The
    /// diagonal must already be within 1e-8 of 1.
    pub fn new(mut values: DMatrix<f64>, kind: CorrelationKind) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Shape(format!(
                "correlation matrix must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        let p = values.nrows();
        for i in 0..p {
            if (values[(i, i)] - 1.0).abs() > 1e-8 {
                return Err(Error::Input(format!(
                    "diagonal entry {i} is {} instead of 1",
                    values[(i, i)]
                )));
            }
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Input(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite correlation".into()));
        }
        linalg::symmetrize(&mut values);
        values.fill_diagonal(1.0);
        Ok(Self { values, kind })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            values: DMatrix::identity(p, p),
            kind: CorrelationKind::Sample,
        }
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.values)
    }

    pub fn ensure_invertible(&self, floor: f64) -> Result<()> {
        let min = self.min_eigenvalue();
        if min > floor {
            Ok(())
        } else {
            Err(Error::Singular(format!(
                "correlation matrix smallest eigenvalue {min:e} is not above {floor:e}"
            )))
        }
    }
}

/// Pearson correlations of the columns; kind = sample.
pub fn correlation_from_data(data: &DataMatrix) -> Result<CorrelationMatrix> {
    CrossProducts::new(data).correlation()
}

/// Correlation of all rows except `k` (S_(-k)), recomputed from scratch.
pub fn loo_correlation(data: &DataMatrix, k: usize) -> Result<CorrelationMatrix> {
    if k >= data.n() {
        return Err(Error::Input(format!("row {k} out of range (n = {})", data.n())));
    }
    if let Some(column) = data.zero_variance_column(Some(k)) {
        return Err(Error::ZeroVariance {
            column,
            name: data.column_names()[column].clone(),
        });
    }
    CrossProducts::new(data).correlation_without(k)
}

/// Centered cross-products of a data matrix, supporting cheap removal of a
/// single row.
#[derive(Debug, Clone)]
pub struct CrossProducts {
    centered: DMatrix<f64>,
    cross: DMatrix<f64>,
}

impl CrossProducts {
    pub fn new(data: &DataMatrix) -> Self {
        let means = data.column_means();
        let centered = DMatrix::from_fn(data.n(), data.p(), |i, j| data.values()[(i, j)] - means[j]);
        let cross = centered.tr_mul(&centered);
        Self { centered, cross }
    }

    pub fn correlation(&self) -> Result<CorrelationMatrix> {
        scale_to_correlation(self.cross.clone())
    }

    /// Removing row k with deviation d from the full mean updates the centered
    /// cross-products by `-(n / (n - 1)) d d'`.
    pub fn correlation_without(&self, k: usize) -> Result<CorrelationMatrix> {
        let n = self.centered.nrows() as f64;
        let d = self.centered.row(k).transpose();
        let factor = n / (n - 1.0);
        let mut cross = self.cross.clone();
        cross.ger(-factor, &d, &d, 1.0);
        scale_to_correlation(cross)
    }
}

fn scale_to_correlation(mut cross: DMatrix<f64>) -> Result<CorrelationMatrix> {
    let p = cross.nrows();
    let scale: Vec<f64> = (0..p).map(|i| cross[(i, i)]).collect();
    let max_scale = scale.iter().copied().fold(0.0, f64::max);
    if let Some(column) = scale.iter().position(|&s| !(s > 1e-24 * max_scale.max(1e-300))) {
        return Err(Error::ZeroVariance {
            column,
            name: format!("v{}", column + 1),
        });
    }
    let inv: Vec<f64> = scale.iter().map(|s| 1.0 / s.sqrt()).collect();
    for j in 0..p {
        for i in 0..p {
            cross[(i, j)] *= inv[i] * inv[j];
        }
    }
    linalg::symmetrize(&mut cross);
    cross.fill_diagonal(1.0);
    Ok(CorrelationMatrix {
        values: cross,
        kind: CorrelationKind::Sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_data(n: usize, p: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        DataMatrix::from_matrix(v).unwrap()
    }

    // Straightforward two-pass Pearson correlation over a row subset.
    fn brute_correlation(data: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
        let p = data.ncols();
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|j| rows.iter().map(|&i| data[(i, j)]).collect())
            .collect();
        DMatrix::from_fn(p, p, |a, b| {
            if a == b {
                1.0
            } else {
                linalg::pearson(&cols[a], &cols[b]).unwrap()
            }
        })
    }

    #[test]
    fn perfectly_correlated_columns() {
        let v = DMatrix::from_fn(6, 2, |i, j| (i as f64) * if j == 0 { 1.0 } else { 3.0 } + 2.0);
        let s = correlation_from_data(&DataMatrix::from_matrix(v).unwrap()).unwrap();
        assert!((s.values()[(0, 1)] - 1.0).abs() < 1e-14);
        assert_eq!(s.values()[(0, 0)], 1.0);
        assert_eq!(s.kind(), CorrelationKind::Sample);
    }

    #[test]
    fn zero_variance_column_rejected_with_index() {
        let v = DMatrix::from_fn(6, 3, |i, j| if j == 2 { 4.0 } else { (i * (j + 1)) as f64 });
        match DataMatrix::from_matrix(v) {
            Err(Error::ZeroVariance { column, .. }) => assert_eq!(column, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_rejected() {
        let v = DMatrix::from_fn(4, 3, |i, j| (i + j * j) as f64);
        assert!(matches!(DataMatrix::from_matrix(v), Err(Error::Input(_))));
    }

    #[test]
    fn csv_non_numeric_names_row_and_column() {
        let text = "a,b\n1,2\n3,x\n5,7\n";
        match DataMatrix::from_csv_reader(text.as_bytes()) {
            Err(Error::NonNumeric { row, column, name, .. }) => {
                assert_eq!((row, column, name.as_str()), (2, 1, "b"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip_values() {
        let text = "x,y\n1.5,2\n-3,4.25\n5,6\n7,1\n";
        let d = DataMatrix::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.column_names(), &["x", "y"]);
        assert_eq!(d.values()[(1, 1)], 4.25);
    }

    #[test]
    fn loo_small_case_matches_direct_definition() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 4.0]);
        let d = DataMatrix::from_matrix(v).unwrap();
        let s = loo_correlation(&d, 2).unwrap();
        assert_eq!(s.values()[(0, 0)], 1.0);
    }

    #[test]
    fn loo_matches_brute_force_for_every_row() {
        let d = random_data(20, 6, 11);
        let cp = CrossProducts::new(&d);
        for k in 0..20 {
            let rows: Vec<usize> = (0..20).filter(|&i| i != k).collect();
            let brute = brute_correlation(d.values(), &rows);
            let fast = cp.correlation_without(k).unwrap();
            let diff = (fast.values() - &brute).abs().max();
            assert!(diff < 1e-12, "k = {k}: {diff}");
        }
    }

    #[test]
    fn deleting_mean_row_leaves_correlation_unchanged() {
        let mut v = random_data(30, 4, 5).values().clone();
        let means: Vec<f64> = (0..4).map(|j| v.column(j).mean()).collect();
        let v = {
            v = v.insert_row(30, 0.0);
            for j in 0..4 {
                v[(30, j)] = means[j];
            }
            v
        };
        let d = DataMatrix::from_matrix(v).unwrap();
        let full = correlation_from_data(&d).unwrap();
        let loo = loo_correlation(&d, 30).unwrap();
        // Removing a row at the mean rescales every cross-product identically.
        assert!((full.values() - loo.values()).abs().max() < 1e-12);
    }

    #[test]
    fn jackknife_mean_of_loo_is_close_to_full() {
        let d = random_data(200, 5, 3);
        let cp = CrossProducts::new(&d);
        let full = cp.correlation().unwrap();
        let mut acc = DMatrix::zeros(5, 5);
        for k in 0..200 {
            acc += cp.correlation_without(k).unwrap().values();
        }
        acc /= 200.0;
        assert!((acc - full.values()).abs().max() < 1.0 / 200.0);
    }

    #[test]
    fn large_sample_recovers_product_of_loadings() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let psi = (1.0f64 - 0.36).sqrt();
        let v = DMatrix::from_fn(n, 2, |_, _| 0.0);
        let mut v = v;
        for i in 0..n {
            let xi: f64 = StandardNormal.sample(&mut rng);
            for j in 0..2 {
                let e: f64 = StandardNormal.sample(&mut rng);
                v[(i, j)] = 0.6 * xi + psi * e;
            }
        }
        let s = correlation_from_data(&DataMatrix::from_matrix(v).unwrap()).unwrap();
        assert!((s.values()[(0, 1)] - 0.36).abs() < 0.01);
    }

    #[test]
    fn correlation_matrix_validation() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(CorrelationMatrix::new(m, CorrelationKind::Sample).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = CorrelationMatrix::new(m, CorrelationKind::Sample).unwrap();
        assert!(c.ensure_invertible(DEFAULT_EIGEN_FLOOR).is_err());
    }
}
