//! Objective metrics: Fréchet distance between Gaussian fits of embedding sets, and
//! edit-distance based error rates (CER / PER).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result, Rows};

/// Clamped negative eigenvalue mass above this fraction of the trace is logged.
const CLAMP_WARN_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `D x D`, symmetric.
    pub cov: Vec<f64>,
    pub count: usize,
    /// Set when the covariance is exactly zero.
    pub degenerate: bool,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::InvalidInput(format!("covariance of {} values for dimension {d}", cov.len())));
        }
        if count < 2 {
            return Err(Error::InsufficientData(format!("Gaussian statistics need at least 2 samples, got {count}")));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite Gaussian statistics".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-10 {
                    return Err(Error::InvalidInput(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        let degenerate = cov.iter().all(|&v| v == 0.0);
        Ok(Self { mean, cov, count, degenerate })
    }
}

/// Sample mean and unbiased (n - 1) covariance, symmetrized.
pub fn gaussian_stats(embeddings: Rows<'_>) -> Result<GaussianStats> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("Gaussian statistics need at least 2 vectors, got {n}")));
    }
    if embeddings.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite embedding".into()));
    }
    let d = embeddings.dim();
    let mut mean = vec![0.0; d];
    for row in embeddings.iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = DMatrix::<f64>::zeros(n, d);
    for (i, row) in embeddings.iter().enumerate() {
        for j in 0..d {
            centered[(i, j)] = row[j] - mean[j];
        }
    }
    let mut cov_m = centered.tr_mul(&centered) / (n - 1) as f64;
    cov_m = (&cov_m + cov_m.transpose()) * 0.5;
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = cov_m[(i, j)];
        }
    }
    GaussianStats::new(mean, cov, n)
}

fn to_matrix(d: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, v)
}

/// Eigenvalues of a symmetric matrix clamped at zero, and the clamped (negative) mass.
fn clamped_eigen(m: DMatrix<f64>) -> Result<(SymmetricEigen<f64, nalgebra::Dyn>, f64)> {
    let m = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let mut clamped = 0.0;
    for l in eig.eigenvalues.iter_mut() {
        if !l.is_finite() {
            return Err(Error::Numeric("non-finite eigenvalue".into()));
        }
        if *l < 0.0 {
            clamped -= *l;
            *l = 0.0;
        }
    }
    Ok((eig, clamped))
}

/// PSD square root via eigendecomposition with negative eigenvalues clamped to 0.
pub fn sqrtm_psd(d: usize, m: &[f64]) -> Result<Vec<f64>> {
    let (eig, _) = clamped_eigen(to_matrix(d, m))?;
    let root = sqrt_from_eigen(&eig);
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = root[(i, j)];
        }
    }
    Ok(out)
}

fn sqrt_from_eigen(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let sqrt_vals = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    let scaled = v * DMatrix::from_diagonal(&sqrt_vals);
    scaled * v.transpose()
}

/// `scale * (||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2))`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats, scale: f64) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::InvalidInput(format!("dimension {d} vs {}", b.dim())));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("scale {scale} must be nonnegative")));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = to_matrix(d, &a.cov);
    let sb = to_matrix(d, &b.cov);
    let (eig_a, clamped_a) = clamped_eigen(sa.clone())?;
    let root_a = sqrt_from_eigen(&eig_a);
    let inner = &root_a * &sb * &root_a;
    let (eig_inner, clamped_inner) = clamped_eigen(inner)?;
    let trace_root: f64 = eig_inner.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let trace = sa.trace() + sb.trace();
    let clamped = clamped_a + clamped_inner;
    if clamped > CLAMP_WARN_FRACTION * trace.abs().max(f64::MIN_POSITIVE) {
        log::warn!("clamped {clamped:.3e} of negative eigenvalue mass (trace {trace:.3e})");
    }
    // The distance is nonnegative; rounding can leave a tiny negative residue near zero.
    let value = scale * (mean_term + trace - 2.0 * trace_root).max(0.0);
    if !value.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(value)
}

/// An utterance as an ordered list of symbols.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
}

impl TokenSequence {
    /// One token per character (for CER).
    pub fn chars(text: &str) -> Self {
        Self { tokens: text.chars().map(String::from).collect() }
    }

    /// Whitespace-separated tokens (for PER).
    pub fn words(text: &str) -> Self {
        Self { tokens: text.split_whitespace().map(String::from).collect() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditOps {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein distance split into operation counts. The backtrace prefers
/// substitution (or match), then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hypothesis.len());
    let width = m + 1;
    let mut dp = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        dp[i * width] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dp[(i - 1) * width + j] + 1;
            let ins = dp[i * width + j - 1] + 1;
            dp[i * width + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * width + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[(i - 1) * width + j - 1] + cost == here {
                ops.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * width + j] + 1 == here {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

/// `(S + D + I) / |ref|`; can exceed 1.
pub fn error_rate(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedRate("reference is empty".into()));
    }
    Ok(edit_distance(&reference.tokens, &hypothesis.tokens).total() as f64 / reference.len() as f64)
}

/// Edit operations pooled over the corpus divided by the pooled reference length.
pub fn corpus_error_rate(pairs: &[(TokenSequence, TokenSequence)]) -> Result<f64> {
    let (errors, total) = pairs.iter().fold((0usize, 0usize), |(e, t), (r, h)| {
        (e + edit_distance(&r.tokens, &h.tokens).total(), t + r.len())
    });
    if total == 0 {
        return Err(Error::UndefinedRate("corpus has no reference tokens".into()));
    }
    Ok(errors as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stats1(mu: f64, var: f64) -> GaussianStats {
        GaussianStats::new(vec![mu], vec![var], 10).unwrap()
    }

    #[test]
    fn two_point_stats() {
        let data = [1.0, -2.0, -1.0, 2.0];
        let s = gaussian_stats(Rows::new(&data, 2).unwrap()).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.cov, vec![2.0, -4.0, -4.0, 8.0]);
        let same = gaussian_stats(Rows::new(&[1.0, 1.0, 1.0, 1.0], 2).unwrap()).unwrap();
        assert!(same.degenerate);
        assert!(matches!(gaussian_stats(Rows::new(&[1.0, 1.0], 2).unwrap()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn normal_samples_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let data: Vec<f64> = (0..10_000 * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = gaussian_stats(Rows::new(&data, 3).unwrap()).unwrap();
        for i in 0..3 {
            assert!(s.mean[i].abs() < 0.05);
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s.cov[i * 3 + j] - want).abs() < 0.1);
            }
        }
    }

    #[test]
    fn frechet_examples() {
        let a = stats1(0.0, 1.0);
        assert!(frechet_distance(&a, &a, 1.0).unwrap().abs() < 1e-6);
        assert_relative_eq!(frechet_distance(&a, &stats1(1.0, 1.0), 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(frechet_distance(&a, &stats1(0.0, 4.0), 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(frechet_distance(&a, &stats1(0.0, 4.0), 10.0).unwrap(), 10.0, epsilon = 1e-11);
        let b = GaussianStats::new(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0], 5).unwrap();
        assert!(frechet_distance(&a, &b, 1.0).is_err());
    }

    #[test]
    fn sqrtm_squares_back() {
        let m = [4.0, 1.0, 1.0, 3.0];
        let r = sqrtm_psd(2, &m).unwrap();
        let sq = [
            r[0] * r[0] + r[1] * r[2],
            r[0] * r[1] + r[1] * r[3],
            r[2] * r[0] + r[3] * r[2],
            r[2] * r[1] + r[3] * r[3],
        ];
        for (a, b) in sq.iter().zip(&m) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn edit_examples() {
        let k = TokenSequence::chars("kitten");
        let s = TokenSequence::chars("sitting");
        assert_eq!(edit_distance(&k.tokens, &k.tokens), EditOps::default());
        let ops = edit_distance(&k.tokens, &s.tokens);
        assert_eq!(ops.total(), 3);
        assert_eq!((ops.substitutions, ops.insertions, ops.deletions), (2, 1, 0));
        let empty = TokenSequence::chars("");
        assert_eq!(edit_distance(&empty.tokens, &s.tokens).insertions, 7);
        assert_eq!(edit_distance(&s.tokens, &empty.tokens).deletions, 7);
    }

    #[test]
    fn rate_examples() {
        let r = TokenSequence::words("a b c d e f g h i j");
        assert_eq!(error_rate(&r, &r).unwrap(), 0.0);
        let h = TokenSequence::words("a b c d e f g h i x");
        assert_relative_eq!(error_rate(&r, &h).unwrap(), 0.1);
        let twice = TokenSequence::words("a b c d e f g h i j a b c d e f g h i j");
        assert_eq!(error_rate(&r, &twice).unwrap(), 1.0);
        assert!(matches!(error_rate(&TokenSequence::words(""), &r), Err(Error::UndefinedRate(_))));
    }

    #[test]
    fn corpus_rate_examples() {
        let p = |a: &str, b: &str| (TokenSequence::chars(a), TokenSequence::chars(b));
        assert_eq!(corpus_error_rate(&[p("abc", "abc"), p("de", "de")]).unwrap(), 0.0);
        assert_relative_eq!(corpus_error_rate(&[p("abcde", "abcdx"), p("fghij", "fghij")]).unwrap(), 0.1);
        // Pooled, not the mean of per-utterance rates (which would be 0.5).
        assert_relative_eq!(corpus_error_rate(&[p("a", "b"), p("bcdefghij", "bcdefghij")]).unwrap(), 0.1);
        assert!(corpus_error_rate(&[]).is_err());
    }
}
