//! Layer primitives: embedding lookup, 1D/2D convolution over transition
//! grids, max pooling, batch normalization, linear scoring and the pairwise
//! hinge loss.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CoherenceError, Result};

/// Stacks the embedding rows of `ids`.
pub fn lookup(ids: &[u32], embeddings: &Array2<f64>) -> Array2<f64> {
    embeddings.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Convolution pre-activations over an `H x W x d` embedding grid.
///
/// `weights` is `N x (m * n * d)`, laid out window row, then window column,
/// then embedding dimension. Returns `N x (H - m + 1) x (W - n + 1)`.
pub fn conv2d_pre(
    input: ArrayView3<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    m: usize,
    n: usize,
) -> Result<Array3<f64>> {
    let (h, w, d) = input.dim();
    if m == 0 || m > h {
        return Err(CoherenceError::FilterTooLong {
            length: m,
            available: h,
        });
    }
    if n == 0 || n > w {
        return Err(CoherenceError::FilterTooWide { width: n, paths: w });
    }
    if weights.ncols() != m * n * d || bias.len() != weights.nrows() {
        return Err(CoherenceError::ShapeMismatch(format!(
            "filters {:?} with bias {} do not fit window {m}x{n}x{d}",
            weights.dim(),
            bias.len()
        )));
    }
    let (oh, ow) = (h - m + 1, w - n + 1);
    let mut cols = Array2::<f64>::zeros((oh * ow, m * n * d));
    for r in 0..oh {
        for c in 0..ow {
            let mut row = cols.row_mut(r * ow + c);
            for a in 0..m {
                for b in 0..n {
                    let off = (a * n + b) * d;
                    row.slice_mut(s![off..off + d])
                        .assign(&input.slice(s![r + a, c + b, ..]));
                }
            }
        }
    }
    let z = weights.dot(&cols.t()) + bias.insert_axis(Axis(1));
    Ok(z.as_standard_layout()
        .into_owned()
        .into_shape_with_order((weights.nrows(), oh, ow))
        .expect("contiguous feature maps"))
}

/// 1D convolution over a monologue grid embedded as `I x J x d`
/// (sentences x entities). Entities are laid end to end, so windows may
/// span two entities. Returns `N x (I*J - m + 1)` ReLU activations.
pub fn conv1d_transitions(
    embedded: ArrayView3<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    m: usize,
) -> Result<Array2<f64>> {
    let (i, j, d) = embedded.dim();
    if m > i * j {
        return Err(CoherenceError::FilterTooLong {
            length: m,
            available: i * j,
        });
    }
    let flat = embedded
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((i * j, 1, d))
        .expect("standard layout");
    let z = conv2d_pre(flat.view(), weights, bias, m, 1)?;
    let (nf, oh, _) = z.dim();
    Ok(z.into_shape_with_order((nf, oh)).expect("width one").mapv(relu))
}

/// 2D convolution over a conversational grid embedded as `I x J x P x d`
/// (entities x depth x paths). Entity blocks are stacked along depth.
/// Returns `N x (I*J - m + 1) x (P - n + 1)` ReLU activations.
pub fn conv2d_transitions(
    embedded: ArrayView4<f64>,
    weights: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    m: usize,
    n: usize,
) -> Result<Array3<f64>> {
    let (i, j, p, d) = embedded.dim();
    if n > p {
        return Err(CoherenceError::FilterTooWide { width: n, paths: p });
    }
    let stacked = embedded
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((i * j, p, d))
        .expect("standard layout");
    Ok(conv2d_pre(stacked.view(), weights, bias, m, n)?.mapv(relu))
}

/// Maximum over consecutive non-overlapping windows of `l`; a trailing
/// partial window is pooled as-is.
pub fn max_pool_1d(values: &[f64], l: usize) -> Vec<f64> {
    assert!(l >= 1, "pool length must be positive");
    values
        .chunks(l)
        .map(|w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Maximum over non-overlapping `l x w` windows, row-major over windows.
pub fn max_pool_2d(map: ArrayView2<f64>, l: usize, w: usize) -> Vec<f64> {
    assert!(l >= 1 && w >= 1, "pool window must be positive");
    let (rows, cols) = map.dim();
    let mut out = Vec::with_capacity(rows.div_ceil(l) * cols.div_ceil(w));
    for r0 in (0..rows).step_by(l) {
        for c0 in (0..cols).step_by(w) {
            let window = map.slice(s![r0..(r0 + l).min(rows), c0..(c0 + w).min(cols)]);
            out.push(window.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    out
}

/// Pools each feature map and concatenates the results.
pub fn pool_feature_maps(maps: ArrayView3<f64>, l: usize, w: usize) -> Vec<f64> {
    maps.outer_iter().flat_map(|m| max_pool_2d(m, l, w)).collect()
}

/// Linear coherence score `u . p + b`.
pub fn score(pooled: &[f64], weights: &[f64], bias: f64) -> Result<f64> {
    if pooled.len() != weights.len() {
        return Err(CoherenceError::ShapeMismatch(format!(
            "pooled vector has {} features, scoring layer expects {}",
            pooled.len(),
            weights.len()
        )));
    }
    Ok(pooled.iter().zip(weights).map(|(p, u)| p * u).sum::<f64>() + bias)
}

/// `max(0, 1 - y_pos + y_neg)`.
pub fn hinge_rank_loss(y_pos: f64, y_neg: f64) -> f64 {
    (1.0 - y_pos + y_neg).max(0.0)
}

/// Gradient of the hinge loss with respect to `(y_pos, y_neg)`. Zero at the kink.
pub fn hinge_rank_grad(y_pos: f64, y_neg: f64) -> (f64, f64) {
    if 1.0 - y_pos + y_neg > 0.0 {
        (-1.0, 1.0)
    } else {
        (0.0, 0.0)
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Per-channel mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl ChannelStats {
    pub fn of_rows(x: ArrayView2<f64>) -> ChannelStats {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean.view().insert_axis(Axis(0));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        ChannelStats { mean, var }
    }
}

/// Batch normalization over rows (batch x spatial positions) for each channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// What the backward pass needs from a normalization forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x` (rows x channels). Training mode uses the statistics of
    /// `x` itself and needs a batch of at least two samples; running averages
    /// are left alone (see `update_running`).
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        batch_size: usize,
        mode: Mode,
    ) -> Result<(Array2<f64>, BatchNormCache, Option<ChannelStats>)> {
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if batch_size < 2 {
                    return Err(CoherenceError::BatchTooSmall(batch_size));
                }
                let stats = ChannelStats::of_rows(x);
                (stats.mean.clone(), stats.var.clone(), Some(stats))
            }
            Mode::Inference => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        let normalized = (&x - &mean.insert_axis(Axis(0))) * inv_std.view().insert_axis(Axis(0));
        let out = &normalized * &self.gamma.view().insert_axis(Axis(0)) + self.beta.view().insert_axis(Axis(0));
        Ok((
            out,
            BatchNormCache {
                normalized,
                inv_std,
                mode,
            },
            stats,
        ))
    }

    pub fn update_running(&mut self, stats: &ChannelStats) {
        let k = self.momentum;
        self.running_mean = &self.running_mean * k + &stats.mean * (1.0 - k);
        self.running_var = &self.running_var * k + &stats.var * (1.0 - k);
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, dout: ArrayView2<f64>, cache: &BatchNormCache) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let xhat = &cache.normalized;
        let dgamma = (&dout * xhat).sum_axis(Axis(0));
        let dbeta = dout.sum_axis(Axis(0));
        let dxhat = &dout * &self.gamma.view().insert_axis(Axis(0));
        let inv_std = cache.inv_std.view().insert_axis(Axis(0));
        let dx = match cache.mode {
            Mode::Inference => &dxhat * &inv_std,
            Mode::Train => {
                let n = dout.nrows().max(1) as f64;
                let sum_dxhat = dxhat.sum_axis(Axis(0)).insert_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                (&dxhat * n - &sum_dxhat - xhat * &sum_dxhat_xhat) * inv_std / n
            }
        };
        (dx, dgamma, dbeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pooling_examples() {
        assert_eq!(max_pool_1d(&[1., 5., 3., 2., 8., 4.], 3), vec![5., 8.]);
        assert_eq!(max_pool_1d(&[1., 5., 3., 2., 8.], 3), vec![5., 8.]);
        let map = Array2::from_shape_fn((7, 2), |(r, c)| (r * 2 + c) as f64 * if r == 4 { 10.0 } else { 1.0 });
        assert_eq!(max_pool_2d(map.view(), 7, 2), vec![90.0]);
    }

    #[test]
    fn scoring_and_loss() {
        assert_eq!(score(&[0.0, 0.0], &[3.0, 4.0], 0.25).unwrap(), 0.25);
        assert_eq!(score(&[2.0, 3.0], &[1.0, 1.0], 0.0).unwrap(), 5.0);
        assert!(score(&[1.0], &[1.0, 2.0], 0.0).is_err());
        assert_eq!(hinge_rank_loss(2.0, 0.5), 0.0);
        assert!((hinge_rank_loss(0.3, 0.5) - 1.2).abs() < 1e-12);
        assert_eq!(hinge_rank_loss(0.7, 0.7), 1.0);
        assert_eq!(hinge_rank_grad(2.0, 0.5), (0.0, 0.0));
        assert_eq!(hinge_rank_grad(1.0, 0.0), (0.0, 0.0));
        assert_eq!(hinge_rank_grad(0.3, 0.5), (-1.0, 1.0));
    }

    #[test]
    fn glorot_example() {
        assert!((glorot_bound(900, 1) - 0.0816).abs() < 5e-5);
    }

    #[test]
    fn conv_shapes() {
        let l = Array3::<f64>::zeros((4, 16, 5));
        let w = Array2::<f64>::ones((2, 3 * 5));
        let b = Array1::<f64>::zeros(2);
        let z = conv1d_transitions(l.view(), w.view(), b.view(), 3).unwrap();
        assert_eq!(z.dim(), (2, 62));
        assert!(z.iter().all(|&v| v == 0.0));

        let l4 = ndarray::Array4::<f64>::zeros((1, 8, 3, 4));
        let w2 = Array2::<f64>::ones((3, 2 * 2 * 4));
        let b2 = array![0.5, -1.0, 0.0];
        let z = conv2d_transitions(l4.view(), w2.view(), b2.view(), 2, 2).unwrap();
        assert_eq!(z.dim(), (3, 7, 2));
        assert!(z.index_axis(Axis(0), 0).iter().all(|&v| v == 0.5));
        assert!(z.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
        let err = conv2d_transitions(l4.view(), w2.view(), b2.view(), 2, 4).unwrap_err();
        assert_eq!(err.to_string(), "filter wider than path count: n = 4 > P = 3");
    }

    #[test]
    fn batchnorm_zero_variance_gives_beta() {
        let mut bn = BatchNorm::new(2, 0.99, 1e-5);
        bn.beta = array![0.3, -0.7];
        let x = array![[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]];
        let (out, _, _) = bn.forward(x.view(), 3, Mode::Train).unwrap();
        assert!(out.column(0).iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(matches!(
            bn.forward(x.view(), 1, Mode::Train),
            Err(CoherenceError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batchnorm_identity_on_standardized_batch() {
        let bn = BatchNorm::new(1, 0.99, 1e-12);
        let x = array![[-1.0], [1.0], [-1.0], [1.0]];
        let (out, _, _) = bn.forward(x.view(), 4, Mode::Train).unwrap();
        for (a, b) in out.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
