//! Analytic gradients against central finite differences. The losses used
//! for the differences are recomputed here from the logits only.

use natstream_core::learners::head::{ce_objective, kd_objective, lwf_objective, weighted_ce_objective, Example};
use natstream_core::learners::{Head, MlpHead};
use natstream_core::rng::seeded;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn ce(head: &Head, x: &[f64], y: usize) -> f64 {
    -log_softmax(&head.forward(x).unwrap())[y]
}

fn kl_t(student: &Head, teacher: &Head, x: &[f64], t: f64) -> f64 {
    let s: Vec<f64> = student.forward(x).unwrap().iter().map(|v| v / t).collect();
    let q: Vec<f64> = teacher.forward(x).unwrap().iter().map(|v| v / t).collect();
    let (ls, lq) = (log_softmax(&s), log_softmax(&q));
    t * t * lq.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
}

fn numeric(head: &Head, loss: impl Fn(&Head) -> f64) -> Vec<f64> {
    let mut h = head.clone();
    (0..head.params().len())
        .map(|i| {
            let p = h.params()[i];
            h.params_mut()[i] = p + H;
            let up = loss(&h);
            h.params_mut()[i] = p - H;
            let down = loss(&h);
            h.params_mut()[i] = p;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        assert!(rel <= TOL, "{what}: param {i} analytic {a} numeric {n} rel {rel}");
    }
}

fn random_head(rng: &mut natstream_core::StreamRng, mlp: bool) -> Head {
    let (k, d) = (rng.random_range(2..5), rng.random_range(1..5));
    let mut head = if mlp { Head::Mlp(MlpHead::init(k, d, 3, rng)) } else { Head::linear(k, d) };
    for p in head.params_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    head
}

fn random_batch(rng: &mut natstream_core::StreamRng, head: &Head, n: usize) -> Vec<(Vec<f64>, usize)> {
    (0..n)
        .map(|_| {
            let x = (0..head.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            (x, rng.random_range(0..head.n_classes()))
        })
        .collect()
}

#[test]
fn ce_gradient_matches_differences() {
    let mut rng = seeded(11);
    for case in 0..50 {
        let head = random_head(&mut rng, case % 2 == 1);
        let data = random_batch(&mut rng, &head, 4);
        let batch: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let (loss, grad) = ce_objective(&head, &batch);
        let oracle = |h: &Head| data.iter().map(|(x, y)| ce(h, x, *y)).sum::<f64>() / data.len() as f64;
        assert!((loss - oracle(&head)).abs() < 1e-12);
        assert_close(&grad, &numeric(&head, oracle), "ce");
    }
}

#[test]
fn weighted_ce_gradient_matches_differences() {
    let mut rng = seeded(12);
    for case in 0..50 {
        let head = random_head(&mut rng, case % 2 == 1);
        let data = random_batch(&mut rng, &head, 5);
        let weights: Vec<f64> = (0..data.len()).map(|_| rng.random_range(1..6) as f64).collect();
        let batch: Vec<Example<'_>> = data
            .iter()
            .zip(&weights)
            .map(|((x, y), &w)| Example { x, label: *y, weight: w })
            .collect();
        let (_, grad) = weighted_ce_objective(&head, &batch);
        let total: f64 = weights.iter().sum();
        let oracle = |h: &Head| data.iter().zip(&weights).map(|((x, y), w)| w * ce(h, x, *y)).sum::<f64>() / total;
        assert_close(&grad, &numeric(&head, oracle), "weighted ce");
    }
}

#[test]
fn kd_gradient_matches_differences() {
    let mut rng = seeded(13);
    for case in 0..50 {
        let mlp = case % 2 == 1;
        let student = random_head(&mut rng, mlp);
        let mut teacher = student.clone();
        for p in teacher.params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        let t = rng.random_range(1.0..4.0);
        let data = random_batch(&mut rng, &student, 3);
        let xs: Vec<&[f64]> = data.iter().map(|(x, _)| x.as_slice()).collect();
        let (_, grad) = kd_objective(&student, &teacher, &xs, t);
        let oracle = |h: &Head| data.iter().map(|(x, _)| kl_t(h, &teacher, x, t)).sum::<f64>() / data.len() as f64;
        assert_close(&grad, &numeric(&student, oracle), "kd");

        let lambda = rng.random_range(0.0..2.0);
        let batch: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let (_, grad) = lwf_objective(&student, &teacher, &batch, t, lambda);
        let oracle = |h: &Head| {
            data.iter().map(|(x, y)| ce(h, x, *y) + lambda * kl_t(h, &teacher, x, t)).sum::<f64>() / data.len() as f64
        };
        assert_close(&grad, &numeric(&student, oracle), "lwf");
    }
}
