//! Library routines against the loop implementations in `common`, each
//! returning the number of mismatching instances.

use entity_coherence::conversation::{enumerate_valid_trees, ParentVector};
use entity_coherence::grid::transition_probabilities;
use entity_coherence::neural::ops::{conv1d_transitions, conv2d_transitions, max_pool_1d, max_pool_2d};
use entity_coherence::neural::Mode;
use entity_coherence::rng::stream;
use entity_coherence::training::Setting;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

use super::*;

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

pub fn conv1d(instances: usize) -> usize {
    let mut rng = stream(1, "conv1d");
    let mut bad = 0;
    for _ in 0..instances {
        let (i, j, d, nf) = (
            rng.gen_range(1..6),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..4),
        );
        let m = rng.gen_range(1..=i * j);
        let x: Vec<Vec<Vec<f64>>> = (0..i)
            .map(|_| (0..j).map(|_| random_tensor(&mut rng, d)).collect())
            .collect();
        let w: Vec<Vec<f64>> = (0..nf).map(|_| random_tensor(&mut rng, m * d)).collect();
        let b = random_tensor(&mut rng, nf);
        let expect = naive_conv1d(&x, &w, &b, m);
        let xa = Array3::from_shape_vec((i, j, d), x.concat().concat()).unwrap();
        let wa = Array2::from_shape_vec((nf, m * d), w.concat()).unwrap();
        let got = conv1d_transitions(xa.view(), wa.view(), Array1::from(b).view(), m).unwrap();
        let ok = got.dim() == (nf, i * j - m + 1)
            && expect
                .iter()
                .enumerate()
                .all(|(f, row)| row.iter().enumerate().all(|(t, &v)| close(got[[f, t]], v)));
        bad += usize::from(!ok);
    }
    bad
}

pub fn conv2d(instances: usize) -> usize {
    let mut rng = stream(2, "conv2d");
    let mut bad = 0;
    for _ in 0..instances {
        let (i, j, p, d, nf) = (
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let (m, n) = (rng.gen_range(1..=i * j), rng.gen_range(1..=p));
        let x: Vec<Vec<Vec<Vec<f64>>>> = (0..i)
            .map(|_| {
                (0..j)
                    .map(|_| (0..p).map(|_| random_tensor(&mut rng, d)).collect())
                    .collect()
            })
            .collect();
        let w: Vec<Vec<f64>> = (0..nf).map(|_| random_tensor(&mut rng, m * n * d)).collect();
        let b = random_tensor(&mut rng, nf);
        let expect = naive_conv2d(&x, &w, &b, m, n);
        let xa = Array4::from_shape_vec((i, j, p, d), x.concat().concat().concat()).unwrap();
        let wa = Array2::from_shape_vec((nf, m * n * d), w.concat()).unwrap();
        let got = conv2d_transitions(xa.view(), wa.view(), Array1::from(b).view(), m, n).unwrap();
        let ok = got.dim() == (nf, i * j - m + 1, p - n + 1)
            && expect.iter().enumerate().all(|(f, map)| {
                map.iter()
                    .enumerate()
                    .all(|(r, row)| row.iter().enumerate().all(|(c, &v)| close(got[[f, r, c]], v)))
            });
        bad += usize::from(!ok);
    }
    bad
}

pub fn pool1d(instances: usize) -> usize {
    let mut rng = stream(3, "pool1d");
    (0..instances)
        .filter(|_| {
            let len = rng.gen_range(1..40);
            let l = rng.gen_range(1..=12);
            let v = random_tensor(&mut rng, len);
            max_pool_1d(&v, l) != naive_pool1d(&v, l)
        })
        .count()
}

pub fn pool2d(instances: usize) -> usize {
    let mut rng = stream(3, "pool2d");
    (0..instances)
        .filter(|_| {
            let (rows, cols) = (rng.gen_range(1..12), rng.gen_range(1..6));
            let (l, w) = (rng.gen_range(1..=12), rng.gen_range(1..=4));
            let map: Vec<Vec<f64>> = (0..rows).map(|_| random_tensor(&mut rng, cols)).collect();
            let arr = Array2::from_shape_vec((rows, cols), map.concat()).unwrap();
            max_pool_2d(arr.view(), l, w) != naive_pool2d(&map, l, w)
        })
        .count()
}

pub fn transitions(instances: usize) -> usize {
    let mut rng = stream(4, "transitions");
    (0..instances)
        .filter(|_| {
            let (rows, cols) = (rng.gen_range(1..8), rng.gen_range(1..6));
            let k = rng.gen_range(1..=rows.min(3));
            let g = random_grid(&mut rng, rows, cols);
            let got = transition_probabilities(&g, k).unwrap();
            let expect = naive_transitions(&g, k);
            got.len() != expect.len() || got.iter().zip(&expect).any(|(a, b)| !close(*a, *b))
        })
        .count()
}

/// Exhaustive agreement for `n <= 7`, then random parent vectors checked for
/// membership against the validity rule.
pub fn trees(instances: usize) -> usize {
    let mut bad = (1..=7)
        .filter(|&n| enumerate_valid_trees(n, 8).unwrap() != naive_trees(n))
        .count();
    let all: Vec<_> = (2..=8).map(|n| enumerate_valid_trees(n, 8).unwrap()).collect();
    let mut rng = stream(5, "trees");
    for _ in 0..instances {
        let n = rng.gen_range(2..=8);
        let v = ParentVector((0..n - 1).map(|_| rng.gen_range(0..=n as u32)).collect());
        if all[n - 2].binary_search(&v).is_ok() != naive_is_valid_tree(&v) {
            bad += 1;
        }
    }
    bad
}

/// Model inference scores against the loop reference, with random running
/// statistics so batch norm is not the identity.
pub fn model_forward(models: u64) -> usize {
    let mut bad = 0;
    for setting in [Setting::Monologue, Setting::Tree] {
        for seed in 0..models {
            let (mut model, batch) = tiny_model(setting, seed);
            let mut rng = stream(seed, "running");
            for v in model.params.batchnorm.running_mean.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            for v in model.params.batchnorm.running_var.iter_mut() {
                *v = rng.gen_range(0.1..2.0);
            }
            let scores = model.forward(&batch, Mode::Inference).unwrap().scores;
            bad += batch
                .iter()
                .zip(scores)
                .filter(|(enc, s)| !close(*s, naive_model_score(&model, enc)))
                .count();
        }
    }
    bad
}
