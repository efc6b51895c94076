//! Descriptive dispersion diagnostics: the per-response Fisher dispersion
//! index, the multivariate generalized dispersion index (GDI) with a
//! bootstrap standard error, and the Spearman correlation matrix.
//!
//! GDI = (√m)ᵀ C (√m) / (mᵀ m) with m the column-mean vector (square root
//! elementwise) and C the sample covariance matrix; with one column this is
//! exactly the classical variance/mean index. Sums are accumulated in a
//! canonical value order, so the statistics are bitwise invariant under
//! subject permutations.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::canonical_sum;
use crate::sim::child_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_of(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    canonical_sum(&mut v) / values.len() as f64
}

/// Sample variance with the N−1 denominator.
fn var_of(values: &[f64], mean: f64) -> f64 {
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    canonical_sum(&mut sq) / (values.len() as f64 - 1.0)
}

fn cov_of(a: &[f64], ma: f64, b: &[f64], mb: f64) -> f64 {
    let mut prod: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .collect();
    canonical_sum(&mut prod) / (a.len() as f64 - 1.0)
}

/// Fisher dispersion index from already-computed moments.
pub fn di_from_moments(mean: f64, variance: f64) -> Result<f64> {
    if !(mean > 0.0) {
        return Err(Error::Domain(format!(
            "dispersion index requires a positive mean, got {mean}"
        )));
    }
    Ok(variance / mean)
}

/// Fisher dispersion index of one count sample: variance over mean.
pub fn di(sample: &[f64]) -> Result<f64> {
    if sample.len() < 2 {
        return Err(Error::Data(
            "dispersion index needs at least 2 values".into(),
        ));
    }
    let m = mean_of(sample);
    di_from_moments(m, var_of(sample, m))
}

/// The GDI formula on a mean vector and covariance matrix.
pub(crate) fn gdi_from_moments(means: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let k = means.len();
    if k == 1 {
        // exact univariate reduction
        return di_from_moments(means[0], cov[(0, 0)]);
    }
    let mut num_terms = Vec::with_capacity(k * k);
    for i in 0..k {
        if !(means[i] > 0.0) {
            return Err(Error::Domain(format!(
                "gdi requires positive column means, got {} at column {i}",
                means[i]
            )));
        }
        for j in 0..k {
            num_terms.push(means[i].sqrt() * cov[(i, j)] * means[j].sqrt());
        }
    }
    let num = canonical_sum(&mut num_terms);
    let mut den_terms: Vec<f64> = means.iter().map(|m| m * m).collect();
    let den = canonical_sum(&mut den_terms);
    Ok(num / den)
}

fn column_moments(y: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k = y.ncols();
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|r| y.column(r).iter().copied().collect())
        .collect();
    let means: Vec<f64> = cols.iter().map(|c| mean_of(c)).collect();
    let mut cov = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let c = cov_of(&cols[i], means[i], &cols[j], means[j]);
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    if (0..k).all(|i| cov[(i, i)] == 0.0) {
        return Err(Error::Data(
            "gdi is undefined: every response column is constant".into(),
        ));
    }
    Ok((means, cov))
}

#[derive(Debug, Clone, Copy)]
pub struct GdiEstimate {
    pub value: f64,
    /// Bootstrap SE; absent below 30 subjects.
    pub se: Option<f64>,
}

pub const DEFAULT_BOOTSTRAP: usize = 1000;
const MIN_SUBJECTS_FOR_SE: usize = 30;

/// Generalized dispersion index with a seeded nonparametric bootstrap SE
/// over subjects. Resamples draw independent generators split from the
/// seed, so the SE is reproducible and parallel-safe.
pub fn gdi(y: &DMatrix<f64>, resamples: usize, seed: u64) -> Result<GdiEstimate> {
    let n = y.nrows();
    if n < 2 {
        return Err(Error::Data("gdi needs at least 2 subjects".into()));
    }
    let (means, cov) = column_moments(y)?;
    let value = gdi_from_moments(&means, &cov)?;
    if n < MIN_SUBJECTS_FOR_SE || resamples == 0 {
        return Ok(GdiEstimate { value, se: None });
    }
    let reps: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, 0xb007, b as u64));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = y.select_rows(idx.iter());
            match column_moments(&resampled) {
                Ok((m, c)) => gdi_from_moments(&m, &c).unwrap_or(f64::NAN),
                Err(_) => f64::NAN,
            }
        })
        .collect();
    let clean: Vec<f64> = reps.into_iter().filter(|v| v.is_finite()).collect();
    if clean.len() < resamples / 2 {
        return Ok(GdiEstimate { value, se: None });
    }
    let m = mean_of(&clean);
    let se = var_of(&clean, m).sqrt();
    Ok(GdiEstimate {
        value,
        se: Some(se),
    })
}

/// Midranks with average ranks for ties.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // average of 1-based positions i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation matrix; entries involving a constant column
/// are undefined and reported as NaN.
pub fn spearman_matrix(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = y.nrows();
    let k = y.ncols();
    if n < 3 {
        return Err(Error::Data(
            "spearman correlation needs at least 3 rows".into(),
        ));
    }
    let rank_cols: Vec<Vec<f64>> = (0..k)
        .map(|r| {
            let col: Vec<f64> = y.column(r).iter().copied().collect();
            ranks(&col)
        })
        .collect();
    let mut out = DMatrix::from_element(k, k, 1.0);
    for i in 0..k {
        for j in 0..i {
            let mi = mean_of(&rank_cols[i]);
            let mj = mean_of(&rank_cols[j]);
            let vi = var_of(&rank_cols[i], mi);
            let vj = var_of(&rank_cols[j], mj);
            let rho = if vi > 0.0 && vj > 0.0 {
                cov_of(&rank_cols[i], mi, &rank_cols[j], mj) / (vi * vj).sqrt()
            } else {
                f64::NAN
            };
            out[(i, j)] = rho;
            out[(j, i)] = rho;
        }
    }
    Ok(out)
}

/// Everything the descriptive table needs for one dataset.
#[derive(Debug, Clone)]
pub struct DispersionSummary {
    pub responses: Vec<String>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub di: Vec<f64>,
    pub spearman: DMatrix<f64>,
    pub gdi: GdiEstimate,
}

pub fn summarize(
    y: &DMatrix<f64>,
    responses: &[String],
    resamples: usize,
    seed: u64,
) -> Result<DispersionSummary> {
    let k = y.ncols();
    let mut mean = Vec::with_capacity(k);
    let mut variance = Vec::with_capacity(k);
    let mut dis = Vec::with_capacity(k);
    for r in 0..k {
        let col: Vec<f64> = y.column(r).iter().copied().collect();
        let m = mean_of(&col);
        let v = var_of(&col, m);
        mean.push(m);
        variance.push(v);
        dis.push(di_from_moments(m, v)?);
    }
    Ok(DispersionSummary {
        responses: responses.to_vec(),
        mean,
        variance,
        di: dis,
        spearman: spearman_matrix(y)?,
        gdi: gdi(y, resamples, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_distr::Poisson;

    #[test]
    fn di_reproduces_descriptive_table_arithmetic() {
        // variance/mean pairs straight from the survey's descriptive table
        let a = di_from_moments(1.313, 1.084).unwrap();
        assert_eq!(format!("{a:.3}"), "0.826");
        let b = di_from_moments(0.368, 0.411).unwrap();
        assert_eq!(format!("{b:.3}"), "1.117");
        let c = di_from_moments(0.372, 0.350).unwrap();
        assert_eq!(format!("{c:.3}"), "0.941");
    }

    #[test]
    fn di_on_hand_sample() {
        // values 0,1,2,3,4: mean 2, variance 2.5
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert!((di(&s).unwrap() - 1.25).abs() < 1e-15);
        assert!(di(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn poisson_sample_is_equidispersed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pois = Poisson::new(2.0).unwrap();
        let sample: Vec<f64> = (0..1_000_000).map(|_| rng.sample(pois)).collect();
        let d = di(&sample).unwrap();
        assert!((d - 1.0).abs() < 0.01, "got {d}");
    }

    #[test]
    fn gdi_single_column_equals_di_exactly() {
        let y = DMatrix::from_fn(50, 1, |i, _| (i % 7) as f64);
        let col: Vec<f64> = y.column(0).iter().copied().collect();
        let g = gdi(&y, 0, 1).unwrap();
        assert_eq!(g.value, di(&col).unwrap());
    }

    #[test]
    fn gdi_formula_with_diagonal_covariance() {
        // C = diag(d·m_r) gives GDI = d for any positive means
        let means = [1.3, 0.4, 2.2];
        let d = 0.7;
        let cov = DMatrix::from_fn(3, 3, |i, j| if i == j { d * means[i] } else { 0.0 });
        let g = gdi_from_moments(&means, &cov).unwrap();
        assert!((g - d).abs() < 1e-14, "got {g}");
    }

    #[test]
    fn independent_poisson_columns_have_unit_gdi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lambdas = [0.7, 1.5, 3.0];
        let y = DMatrix::from_fn(100_000, 3, |_, c| {
            rng.sample(Poisson::new(lambdas[c]).unwrap())
        });
        let g = gdi(&y, 0, 1).unwrap();
        assert!((g.value - 1.0).abs() < 0.02, "got {}", g.value);
    }

    #[test]
    fn gdi_is_invariant_to_row_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = DMatrix::from_fn(200, 2, |_, _| rng.random_range(0..8) as f64);
        let g1 = gdi(&y, 0, 1).unwrap().value;
        let mut idx: Vec<usize> = (0..200).collect();
        idx.shuffle(&mut rng);
        let g2 = gdi(&y.select_rows(idx.iter()), 0, 1).unwrap().value;
        assert_eq!(g1.to_bits(), g2.to_bits());
    }

    #[test]
    fn gdi_bootstrap_is_seed_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = DMatrix::from_fn(80, 2, |_, _| rng.random_range(0..6) as f64);
        let a = gdi(&y, 200, 42).unwrap();
        let b = gdi(&y, 200, 42).unwrap();
        let c = gdi(&y, 200, 43).unwrap();
        assert_eq!(a.se.unwrap().to_bits(), b.se.unwrap().to_bits());
        assert_ne!(a.se.unwrap().to_bits(), c.se.unwrap().to_bits());
        assert!(a.se.unwrap() > 0.0);
    }

    #[test]
    fn gdi_rejects_fully_degenerate_data() {
        let y = DMatrix::from_element(40, 2, 3.0);
        assert!(gdi(&y, 0, 1).is_err());
    }

    #[test]
    fn spearman_identical_columns() {
        let y = DMatrix::from_fn(20, 2, |i, _| (i % 5) as f64);
        let s = spearman_matrix(&y).unwrap();
        assert!((s[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_small_sample_matches_exhaustive_ranks() {
        // 5 rows with a tie in each column, ranks computed by hand:
        // col a: 3,1,4,1,5 → ranks 3, 1.5, 4, 1.5, 5
        // col b: 2,7,1,8,2 → ranks 2.5, 4, 1, 5, 2.5
        let a = [3.0, 1.0, 4.0, 1.0, 5.0];
        let b = [2.0, 7.0, 1.0, 8.0, 2.0];
        let ra = [3.0, 1.5, 4.0, 1.5, 5.0];
        let rb = [2.5, 4.0, 1.0, 5.0, 2.5];
        assert_eq!(ranks(&a), ra.to_vec());
        assert_eq!(ranks(&b), rb.to_vec());
        let y = DMatrix::from_fn(5, 2, |i, c| if c == 0 { a[i] } else { b[i] });
        let s = spearman_matrix(&y).unwrap();
        // plain Pearson on the hand ranks
        let ma = ra.iter().sum::<f64>() / 5.0;
        let mb = rb.iter().sum::<f64>() / 5.0;
        let cov: f64 = ra
            .iter()
            .zip(&rb)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>();
        let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>();
        let vb: f64 = rb.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>();
        let want = cov / (va * vb).sqrt();
        assert!((s[(0, 1)] - want).abs() < 1e-12);
    }

    #[test]
    fn spearman_independent_columns_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = DMatrix::from_fn(100_000, 2, |_, _| rng.random_range(0..50) as f64);
        let s = spearman_matrix(&y).unwrap();
        assert!(s[(0, 1)].abs() < 0.02, "got {}", s[(0, 1)]);
    }

    #[test]
    fn spearman_constant_column_is_missing() {
        let mut y = DMatrix::from_fn(10, 2, |i, _| i as f64);
        for i in 0..10 {
            y[(i, 1)] = 4.0;
        }
        let s = spearman_matrix(&y).unwrap();
        assert!(s[(0, 1)].is_nan());
    }
}
