//! Streaming SLDA against a batch shrinkage-LDA written from scratch.

use natstream_core::learners::SldaState;
use natstream_core::rng::seeded;
use natstream_core::Sample;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

const D: usize = 5;
const EPS: f64 = 1e-4;

fn blobs(n_per_class: usize, seed: u64) -> Vec<Sample> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    for c in 0..2 {
        for _ in 0..n_per_class {
            let f = (0..D)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let center = if j == 0 { 4.0 * c as f64 } else { 0.0 };
                    (center + z * (1.0 + 0.3 * j as f64)) as f32
                })
                .collect();
            out.push(Sample::new(0, f, c, 0));
        }
    }
    out.shuffle(&mut rng);
    for (i, s) in out.iter_mut().enumerate() {
        s.id = i as u64;
    }
    out
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

struct BatchLda {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn batch_lda(data: &[Sample]) -> BatchLda {
    let mut means = vec![vec![0.0; D]; 2];
    let mut counts = [0usize; 2];
    for s in data {
        counts[s.label] += 1;
        for j in 0..D {
            means[s.label][j] += s.features[j] as f64;
        }
    }
    for c in 0..2 {
        means[c].iter_mut().for_each(|v| *v /= counts[c] as f64);
    }
    let mut cov = vec![vec![0.0; D]; D];
    for s in data {
        for i in 0..D {
            for j in 0..D {
                cov[i][j] += (s.features[i] as f64 - means[s.label][i]) * (s.features[j] as f64 - means[s.label][j]);
            }
        }
    }
    let denom = (data.len() - 2) as f64;
    for (i, row) in cov.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (1.0 - EPS) * *v / denom + if i == j { EPS } else { 0.0 };
        }
    }
    let w: Vec<Vec<f64>> = means.iter().map(|m| solve(cov.clone(), m.clone())).collect();
    let b = (0..2).map(|c| -0.5 * means[c].iter().zip(&w[c]).map(|(a, b)| a * b).sum::<f64>()).collect();
    BatchLda { w, b }
}

impl BatchLda {
    fn predict(&self, x: &[f64]) -> usize {
        let s: Vec<f64> = (0..2).map(|c| self.w[c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[c]).collect();
        usize::from(s[1] > s[0])
    }
}

#[test]
fn frozen_covariance_streaming_agrees_with_batch_lda() {
    let train = blobs(500, 1);
    let test = blobs(500, 2);
    let mut slda = SldaState::new(2, D, EPS, false).unwrap();
    let (base, rest) = train.split_at(100);
    slda.fit_base(base).unwrap();
    for s in rest {
        slda.update(s).unwrap();
    }
    let oracle = batch_lda(&train);
    let agree = test
        .iter()
        .filter(|s| {
            let x = s.features_f64();
            slda.predict(&x).unwrap() == oracle.predict(&x)
        })
        .count();
    assert!(agree as f64 / test.len() as f64 >= 0.99, "agreement {agree}/1000");
}

#[test]
fn class_means_do_not_depend_on_order() {
    let train = blobs(500, 3);
    let mut a = SldaState::new(2, D, EPS, false).unwrap();
    let mut b = SldaState::new(2, D, EPS, false).unwrap();
    a.fit_base(&train[..100]).unwrap();
    b.fit_base(&train[..100]).unwrap();
    let mut rest = train[100..].to_vec();
    for s in &rest {
        a.update(s).unwrap();
    }
    rest.shuffle(&mut seeded(4));
    for s in &rest {
        b.update(s).unwrap();
    }
    for c in 0..2 {
        assert!((&a.means[c] - &b.means[c]).amax() < 1e-10);
    }
}

#[test]
fn plastic_covariance_matches_pooled_scatter() {
    // With a single class the running update is exactly Welford's, so the
    // covariance equals the scatter divided by the sample count.
    let train: Vec<Sample> = blobs(60, 5).into_iter().filter(|s| s.label == 1).collect();
    let mut slda = SldaState::new(2, D, EPS, true).unwrap();
    for s in &train {
        slda.update(s).unwrap();
    }
    let mut means = vec![vec![0.0; D]; 2];
    let mut counts = [0usize; 2];
    for s in &train {
        counts[s.label] += 1;
        for j in 0..D {
            means[s.label][j] += s.features[j] as f64;
        }
    }
    for c in 0..2 {
        means[c].iter_mut().for_each(|v| *v /= counts[c] as f64);
    }
    for i in 0..D {
        for j in 0..D {
            let scatter: f64 = train
                .iter()
                .map(|s| (s.features[i] as f64 - means[s.label][i]) * (s.features[j] as f64 - means[s.label][j]))
                .sum();
            let expected = scatter / train.len() as f64;
            assert!((slda.sigma[(i, j)] - expected).abs() < 1e-9, "({i},{j})");
        }
    }
}
