//! Streaming linear discriminant analysis.
//!
//! Per-class running means plus one shared covariance. The covariance is
//! either updated with every sample (plastic) or frozen after the base
//! initialization. Predictions use the shrunk precision
//! `((1 - eps) * Sigma + eps * I)^-1`, which is cached until the next
//! mutation.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::learners::head::argmax;
use crate::stream::Sample;

pub const DEFAULT_SHRINKAGE: f64 = 1e-4;

/// Linear discriminant derived from the precision matrix: one row
/// `Lambda mu_c` and one offset `-0.5 mu_c' Lambda mu_c` per class.
#[derive(Debug, Clone)]
struct Discriminant {
    rows: DMatrix<f64>,
    offsets: Vec<f64>,
}

#[derive(Debug)]
pub struct SldaState {
    pub n_classes: usize,
    pub dim: usize,
    pub means: Vec<DVector<f64>>,
    pub counts: Vec<u64>,
    pub sigma: DMatrix<f64>,
    pub total: u64,
    pub epsilon: f64,
    pub plastic: bool,
    cache: OnceLock<Discriminant>,
}

impl Clone for SldaState {
    fn clone(&self) -> Self {
        let cache = OnceLock::new();
        if let Some(d) = self.cache.get() {
            let _ = cache.set(d.clone());
        }
        Self {
            n_classes: self.n_classes,
            dim: self.dim,
            means: self.means.clone(),
            counts: self.counts.clone(),
            sigma: self.sigma.clone(),
            total: self.total,
            epsilon: self.epsilon,
            plastic: self.plastic,
            cache,
        }
    }
}

impl SldaState {
    pub fn new(n_classes: usize, dim: usize, epsilon: f64, plastic: bool) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid("SLDA shrinkage must lie in (0, 1)"));
        }
        Ok(Self {
            n_classes,
            dim,
            means: vec![DVector::zeros(dim); n_classes],
            counts: vec![0; n_classes],
            sigma: DMatrix::zeros(dim, dim),
            total: 0,
            epsilon,
            plastic,
            cache: OnceLock::new(),
        })
    }

    pub fn observed_classes(&self) -> usize {
        self.counts.iter().filter(|&&n| n > 0).count()
    }

    fn invalidate(&mut self) {
        self.cache = OnceLock::new();
    }

    fn check(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: s.features.len(),
            });
        }
        if s.label >= self.n_classes {
            return Err(Error::invalid(format!("label {} out of range", s.label)));
        }
        Ok(())
    }

    /// Streaming update with one sample. The deviation from the class mean
    /// is taken before the mean moves; a class's first sample contributes no
    /// deviation.
    pub fn update(&mut self, s: &Sample) -> Result<()> {
        self.check(s)?;
        let x = DVector::from_iterator(self.dim, s.features.iter().map(|&v| v as f64));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature".into()));
        }
        let y = s.label;
        let ny = self.counts[y];
        if self.plastic {
            let t = self.total as f64;
            let delta = if ny == 0 { DVector::zeros(self.dim) } else { &x - &self.means[y] };
            let outer = &delta * delta.transpose() * (t / (t + 1.0));
            self.sigma = (&self.sigma * t + outer) / (t + 1.0);
        }
        let n = ny as f64;
        self.means[y] = (&self.means[y] * n + &x) / (n + 1.0);
        self.counts[y] += 1;
        self.total += 1;
        self.invalidate();
        Ok(())
    }

    /// Base initialization from a batch: class means and counts, and the
    /// pooled within-class scatter divided by `max(1, t - classes present)`.
    pub fn fit_base(&mut self, batch: &[Sample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("SLDA base initialization needs samples".into()));
        }
        for s in batch {
            self.check(s)?;
        }
        let mut sums = vec![DVector::<f64>::zeros(self.dim); self.n_classes];
        let mut counts = vec![0u64; self.n_classes];
        let xs: Vec<DVector<f64>> = batch
            .iter()
            .map(|s| DVector::from_iterator(self.dim, s.features.iter().map(|&v| v as f64)))
            .collect();
        for (s, x) in batch.iter().zip(&xs) {
            sums[s.label] += x;
            counts[s.label] += 1;
        }
        let means: Vec<DVector<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(sum, &n)| if n > 0 { sum / n as f64 } else { DVector::zeros(self.dim) })
            .collect();
        let mut scatter = DMatrix::zeros(self.dim, self.dim);
        for (s, x) in batch.iter().zip(&xs) {
            let d = x - &means[s.label];
            scatter += &d * d.transpose();
        }
        let present = counts.iter().filter(|&&n| n > 0).count();
        let denom = (batch.len().saturating_sub(present)).max(1) as f64;
        self.sigma = scatter / denom;
        self.means = means;
        self.counts = counts;
        self.total = batch.len() as u64;
        self.invalidate();
        Ok(())
    }

    /// Shrunk covariance `(1 - eps) Sigma + eps I`.
    pub fn shrunk_covariance(&self) -> DMatrix<f64> {
        &self.sigma * (1.0 - self.epsilon) + DMatrix::identity(self.dim, self.dim) * self.epsilon
    }

    /// Precision matrix of the shrunk covariance.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        let chol = self.shrunk_covariance().cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "shrunk covariance is not positive definite at eps={}; increase the shrinkage",
                self.epsilon
            ))
        })?;
        let p = chol.inverse();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "precision has non-finite entries at eps={}; increase the shrinkage",
                self.epsilon
            )));
        }
        Ok(p)
    }

    fn discriminant(&self) -> Result<&Discriminant> {
        if let Some(d) = self.cache.get() {
            return Ok(d);
        }
        let precision = self.precision()?;
        let mut rows = DMatrix::zeros(self.n_classes, self.dim);
        let mut offsets = vec![f64::NEG_INFINITY; self.n_classes];
        for c in 0..self.n_classes {
            if self.counts[c] == 0 {
                continue;
            }
            let w = &precision * &self.means[c];
            offsets[c] = -0.5 * self.means[c].dot(&w);
            rows.set_row(c, &w.transpose());
        }
        let _ = self.cache.set(Discriminant { rows, offsets });
        Ok(self.cache.get().expect("cache was just filled"))
    }

    /// Class scores `mu_c' L x - mu_c' L mu_c / 2`; unseen classes score
    /// negative infinity.
    pub fn predict_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: x.len(),
            });
        }
        if self.observed_classes() == 0 {
            return Err(Error::Uninitialized("SLDA has not observed any class".into()));
        }
        let d = self.discriminant()?;
        let xv = DVector::from_column_slice(x);
        let lin = &d.rows * xv;
        Ok((0..self.n_classes)
            .map(|c| if self.counts[c] == 0 { f64::NEG_INFINITY } else { lin[c] + d.offsets[c] })
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_scores(x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(label: usize, f: &[f32]) -> Sample {
        Sample::new(0, f.to_vec(), label, 0)
    }

    #[test]
    fn first_sample_sets_mean() {
        let mut st = SldaState::new(2, 3, 1e-4, true).unwrap();
        st.update(&s(1, &[1.5, -2.0, 0.25])).unwrap();
        assert_eq!(st.means[1].as_slice(), &[1.5, -2.0, 0.25]);
        assert_eq!(st.counts, vec![0, 1]);
    }

    #[test]
    fn frozen_covariance_untouched() {
        let mut st = SldaState::new(2, 2, 1e-4, false).unwrap();
        st.fit_base(&[s(0, &[1.0, 0.0]), s(0, &[0.0, 1.0]), s(1, &[3.0, 3.0]), s(1, &[2.0, 5.0])])
            .unwrap();
        let before = st.sigma.clone();
        for i in 0..20 {
            st.update(&s(i % 2, &[i as f32, -(i as f32)])).unwrap();
        }
        assert_eq!(before.as_slice(), st.sigma.as_slice());
    }

    #[test]
    fn identical_vectors_give_zero_scatter() {
        let mut st = SldaState::new(2, 2, 0.1, true).unwrap();
        st.fit_base(&[s(0, &[1.0, 1.0]), s(0, &[1.0, 1.0]), s(1, &[-1.0, 2.0])]).unwrap();
        assert!(st.sigma.iter().all(|&v| v == 0.0));
        let p = st.precision().unwrap();
        assert!((p[(0, 0)] - 10.0).abs() < 1e-12 && p[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn unseen_class_excluded() {
        let mut st = SldaState::new(3, 1, 1e-4, true).unwrap();
        st.update(&s(2, &[1.0])).unwrap();
        let scores = st.predict_scores(&[-100.0]).unwrap();
        assert_eq!(scores[0], f64::NEG_INFINITY);
        assert_eq!(st.predict(&[-100.0]).unwrap(), 2);
    }

    #[test]
    fn empty_state_is_uninitialized() {
        let st = SldaState::new(3, 1, 1e-4, true).unwrap();
        assert!(matches!(st.predict(&[0.0]), Err(Error::Uninitialized(_))));
        assert!(SldaState::new(3, 1, 0.0, true).is_err());
    }

    #[test]
    fn closed_form_two_means() {
        let mut st = SldaState::new(2, 3, 1e-4, false).unwrap();
        st.sigma = DMatrix::identity(3, 3);
        st.means = vec![DVector::from_vec(vec![1.0, 0.0, 0.0]), DVector::from_vec(vec![-1.0, 0.0, 0.0])];
        st.counts = vec![1, 1];
        assert_eq!(st.predict(&[0.9, 0.0, 0.0]).unwrap(), 0);
        assert_eq!(st.predict(&[-0.9, 0.0, 0.0]).unwrap(), 1);
    }

    #[test]
    fn nearest_mean_under_shared_covariance() {
        let mut st = SldaState::new(3, 2, 1e-4, false).unwrap();
        st.sigma = DMatrix::identity(2, 2);
        st.means = vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![2.0, 0.0]),
            DVector::from_vec(vec![-2.0, 0.0]),
        ];
        st.counts = vec![1, 1, 1];
        for c in 0..3 {
            let x: Vec<f64> = st.means[c].iter().copied().collect();
            assert_eq!(st.predict(&x).unwrap(), c);
        }
    }

    #[test]
    fn scale_invariance() {
        let mut st = SldaState::new(3, 2, 1e-6, false).unwrap();
        st.sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        st.means = vec![
            DVector::from_vec(vec![0.5, 1.0]),
            DVector::from_vec(vec![-1.0, 0.2]),
            DVector::from_vec(vec![0.1, -1.5]),
        ];
        st.counts = vec![4, 4, 4];
        let gamma = 10.0;
        let mut scaled = st.clone();
        scaled.sigma *= gamma * gamma;
        scaled.means.iter_mut().for_each(|m| *m *= gamma);
        scaled.invalidate();
        for i in 0..50 {
            let x = [(i as f64 * 0.37).sin() * 2.0, (i as f64 * 0.91).cos() * 2.0];
            let xs = [x[0] * gamma, x[1] * gamma];
            assert_eq!(st.predict(&x).unwrap(), scaled.predict(&xs).unwrap());
        }
    }

    #[test]
    fn empty_base_batch() {
        let mut st = SldaState::new(2, 2, 1e-4, true).unwrap();
        assert!(matches!(st.fit_base(&[]), Err(Error::EmptyInput(_))));
    }
}
