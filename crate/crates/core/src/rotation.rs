//! Orthogonal rotations: raw or Kaiser-normalized Varimax, and orthogonal
//! Procrustes rotation toward a target.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::paf::LoadingMatrix;

#[derive(Debug, Clone)]
pub struct RotationResult {
    pub rotated: LoadingMatrix,
    /// q×q orthogonal matrix with `rotated = input · transform`.
    pub transform: DMatrix<f64>,
    pub criterion_before: Option<f64>,
    pub criterion_after: Option<f64>,
    pub residual_ssq: Option<f64>,
    /// Smallest singular value of the Procrustes cross-product below 1e-12.
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarimaxOptions {
    /// Kaiser row normalization before rotating.
    pub kaiser: bool,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for VarimaxOptions {
    fn default() -> Self {
        Self {
            kaiser: false,
            tolerance: 1e-10,
            max_sweeps: 100,
        }
    }
}

/// Raw Varimax criterion: sum over columns of the variance of squared loadings.
pub fn varimax_criterion(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows() as f64;
    m.column_iter()
        .map(|c| {
            let sq: Vec<f64> = c.iter().map(|v| v * v).collect();
            let mean = sq.iter().sum::<f64>() / p;
            sq.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / p
        })
        .sum()
}

/// Pairwise-sweep Varimax.
///
/// Each pair of columns is rotated by the angle maximizing the criterion for
/// that pair, so the criterion never decreases. Sweeps stop once a full sweep
/// improves the criterion by less than `tolerance`. The output columns are
/// ordered by descending sum of squares and sign-normalized so that each
/// column's largest entry is positive; both steps are folded into `transform`.
pub fn varimax(loadings: &LoadingMatrix, opts: &VarimaxOptions) -> RotationResult {
    let input = loadings.values();
    let (p, q) = input.shape();
    if q < 2 {
        return RotationResult {
            rotated: loadings.clone(),
            transform: DMatrix::identity(q, q),
            criterion_before: Some(varimax_criterion(input)),
            criterion_after: Some(varimax_criterion(input)),
            residual_ssq: None,
            rank_deficient: false,
        };
    }

    let row_norms: Vec<f64> = input
        .row_iter()
        .map(|r| r.norm())
        .map(|h| if h > 0.0 { h } else { 1.0 })
        .collect();
    let mut work = input.clone();
    if opts.kaiser {
        for i in 0..p {
            for j in 0..q {
                work[(i, j)] /= row_norms[i];
            }
        }
    }
    let before = varimax_criterion(&work);
    let mut transform = DMatrix::<f64>::identity(q, q);
    let mut current = before;
    let pf = p as f64;

    for _ in 0..opts.max_sweeps {
        for a in 0..q {
            for b in (a + 1)..q {
                let (mut sa, mut sb, mut sc, mut sd) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..p {
                    let (x, y) = (work[(i, a)], work[(i, b)]);
                    let u = x * x - y * y;
                    let v = 2.0 * x * y;
                    sa += u;
                    sb += v;
                    sc += u * u - v * v;
                    sd += 2.0 * u * v;
                }
                let num = sd - 2.0 * sa * sb / pf;
                let den = sc - (sa * sa - sb * sb) / pf;
                let phi = 0.25 * num.atan2(den);
                if phi.abs() < 1e-15 {
                    continue;
                }
                let (s, c) = phi.sin_cos();
                rotate_pair(&mut work, a, b, c, s);
                rotate_pair(&mut transform, a, b, c, s);
            }
        }
        let next = varimax_criterion(&work);
        let gain = next - current;
        current = next;
        if gain < opts.tolerance {
            break;
        }
    }

    // Order by descending column sum of squares, then fix signs.
    let rotated_raw = input * &transform;
    let ss: Vec<f64> = rotated_raw
        .column_iter()
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| ss[y].partial_cmp(&ss[x]).unwrap_or(std::cmp::Ordering::Equal));
    let mut permuted = DMatrix::zeros(q, q);
    for (dst, &src) in order.iter().enumerate() {
        permuted.set_column(dst, &transform.column(src));
    }
    let mut rotated = input * &permuted;
    let signs = linalg::canonical_column_signs(&mut rotated);
    for (j, s) in signs.iter().enumerate() {
        if *s < 0.0 {
            permuted.column_mut(j).neg_mut();
        }
    }
    let rotated = input * &permuted;
    let after = if opts.kaiser {
        let mut normed = rotated.clone();
        for i in 0..p {
            for j in 0..q {
                normed[(i, j)] /= row_norms[i];
            }
        }
        varimax_criterion(&normed)
    } else {
        varimax_criterion(&rotated)
    };

    RotationResult {
        rotated: LoadingMatrix::new(rotated),
        transform: permuted,
        criterion_before: Some(before),
        criterion_after: Some(after),
        residual_ssq: None,
        rank_deficient: false,
    }
}

/// Applies the plane rotation `[c -s; s c]` to columns `a`, `b`.
fn rotate_pair(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, a)], m[(i, b)]);
        m[(i, a)] = c * x + s * y;
        m[(i, b)] = -s * x + c * y;
    }
}

/// Orthogonal Procrustes rotation of `source` toward `target`.
///
/// With `source' · target = U D V'`, `T = U V'` minimizes
/// `‖source · T − target‖²` over orthogonal T. A final sign pass (see
/// [`align_sign`]) is folded into T, which only matters when singular values
/// tie or vanish.
pub fn procrustes_target(source: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<RotationResult> {
    check_same_shape(source, target)?;
    let q = source.ncols();
    let cross = source.tr_mul(target);
    let svd = cross.clone().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numerical("SVD failed in Procrustes rotation".into())),
    };
    let min_sv = svd
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut transform = u * v_t;
    let rotated = source * &transform;
    for j in 0..q {
        if rotated.column(j).dot(&target.column(j)) < 0.0 {
            transform.column_mut(j).neg_mut();
        }
    }
    let rotated = source * &transform;
    let residual = (&rotated - target).norm_squared();
    Ok(RotationResult {
        rotated: LoadingMatrix::new(rotated),
        transform,
        criterion_before: None,
        criterion_after: None,
        residual_ssq: Some(residual),
        rank_deficient: q > 0 && min_sv < 1e-12,
    })
}

/// Negates each column of `source` whose inner product with the matching
/// `target` column is negative. A zero inner product keeps the column.
pub fn align_sign(source: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_same_shape(source, target)?;
    let mut out = source.clone();
    for j in 0..out.ncols() {
        if source.column(j).dot(&target.column(j)) < 0.0 {
            out.column_mut(j).neg_mut();
        }
    }
    Ok(out)
}

/// Rotates `source` toward `target`: Procrustes for q > 1, sign alignment for q = 1.
pub fn rotate_toward(source: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if source.ncols() > 1 {
        Ok(procrustes_target(source, target)?.rotated.into_values())
    } else {
        align_sign(source, target)
    }
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "loading matrices differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
