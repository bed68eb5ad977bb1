//! The convolutional coherence scorer and its exact backward pass.
//!
//! Pipeline: embedding lookup, convolution (1D over flattened monologue
//! grids or 2D over stacked conversational grids), batch normalization,
//! ReLU, masked non-overlapping max pooling, and a linear score.
//!
//! Every input is padded (or truncated) to the configured extent so the
//! pooled vector, and with it the scoring layer, has a fixed length.
//! Convolution windows made only of padding are excluded from batch
//! statistics and from pooling; a pooling window with no real position
//! emits 0.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embeddings::PretrainedEmbeddings;
use super::input::GridSample;
use super::ops::{glorot_bound, BatchNorm, BatchNormCache, Mode};
use super::vocab::{Vocab, PAD_ID};
use crate::error::{CoherenceError, Result};
use crate::grid::{GridToken, LexMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Conv1d,
    Conv2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub lex_mode: LexMode,
    pub embedding_dim: usize,
    pub num_filters: usize,
    /// Filter extent along the stacked entity/depth axis.
    pub filter_height: usize,
    /// Filter extent across paths; 1 for the 1D model.
    pub filter_width: usize,
    pub pool_height: usize,
    pub pool_width: usize,
    /// Padded input extent (stacked rows x paths).
    pub input_height: usize,
    pub input_width: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("num_filters", self.num_filters),
            ("filter_height", self.filter_height),
            ("filter_width", self.filter_width),
            ("pool_height", self.pool_height),
            ("pool_width", self.pool_width),
            ("input_height", self.input_height),
            ("input_width", self.input_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoherenceError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.architecture == Architecture::Conv1d
            && (self.filter_width != 1 || self.pool_width != 1 || self.input_width != 1)
        {
            return Err(CoherenceError::InvalidConfig(
                "the 1D model needs filter_width = pool_width = input_width = 1".into(),
            ));
        }
        if self.filter_height > self.input_height {
            return Err(CoherenceError::FilterTooLong {
                length: self.filter_height,
                available: self.input_height,
            });
        }
        if self.filter_width > self.input_width {
            return Err(CoherenceError::FilterTooWide {
                width: self.filter_width,
                paths: self.input_width,
            });
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return Err(CoherenceError::InvalidConfig(
                "bad batch-norm momentum or epsilon".into(),
            ));
        }
        Ok(())
    }

    pub fn window_size(&self) -> usize {
        self.filter_height * self.filter_width
    }

    pub fn out_height(&self) -> usize {
        self.input_height - self.filter_height + 1
    }

    pub fn out_width(&self) -> usize {
        self.input_width - self.filter_width + 1
    }

    pub fn pool_rows(&self) -> usize {
        self.out_height().div_ceil(self.pool_height)
    }

    pub fn pool_cols(&self) -> usize {
        self.out_width().div_ceil(self.pool_width)
    }

    /// Pooled windows per feature map.
    pub fn windows_per_map(&self) -> usize {
        self.pool_rows() * self.pool_cols()
    }

    pub fn pooled_len(&self) -> usize {
        self.num_filters * self.windows_per_map()
    }
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `|V| x d`; row 0 is padding and stays zero.
    pub embeddings: Array2<f64>,
    /// `N x (m * n * d)`, window row, window column, embedding dim.
    pub filters: Array2<f64>,
    pub filter_bias: Array1<f64>,
    pub batchnorm: BatchNorm,
    pub score_weights: Array1<f64>,
    pub score_bias: f64,
}

/// Names of the trainable tensors, in optimizer order.
pub const PARAM_NAMES: [&str; 7] = [
    "embeddings",
    "filters",
    "filter_bias",
    "bn_gamma",
    "bn_beta",
    "score_weights",
    "score_bias",
];

impl ModelParams {
    pub fn tensor(&self, name: &str) -> &[f64] {
        match name {
            "embeddings" => self.embeddings.as_slice(),
            "filters" => self.filters.as_slice(),
            "filter_bias" => self.filter_bias.as_slice(),
            "bn_gamma" => self.batchnorm.gamma.as_slice(),
            "bn_beta" => self.batchnorm.beta.as_slice(),
            "score_weights" => self.score_weights.as_slice(),
            "score_bias" => Some(std::slice::from_ref(&self.score_bias)),
            other => panic!("unknown parameter {other}"),
        }
        .expect("parameters are contiguous")
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        match name {
            "embeddings" => self.embeddings.as_slice_mut(),
            "filters" => self.filters.as_slice_mut(),
            "filter_bias" => self.filter_bias.as_slice_mut(),
            "bn_gamma" => self.batchnorm.gamma.as_slice_mut(),
            "bn_beta" => self.batchnorm.beta.as_slice_mut(),
            "score_weights" => self.score_weights.as_slice_mut(),
            "score_bias" => Some(std::slice::from_mut(&mut self.score_bias)),
            other => panic!("unknown parameter {other}"),
        }
        .expect("parameters are contiguous")
    }

    pub fn all_finite(&self) -> bool {
        PARAM_NAMES.iter().all(|n| self.tensor(n).iter().all(|v| v.is_finite()))
            && self.batchnorm.running_mean.iter().all(|v| v.is_finite())
            && self.batchnorm.running_var.iter().all(|v| v.is_finite())
    }
}

/// Gradients of a loss with respect to `ModelParams`. Embedding gradients
/// are kept only for rows the batch touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub embeddings: BTreeMap<u32, Array1<f64>>,
    pub filters: Array2<f64>,
    pub filter_bias: Array1<f64>,
    pub bn_gamma: Array1<f64>,
    pub bn_beta: Array1<f64>,
    pub score_weights: Array1<f64>,
    pub score_bias: f64,
}

impl Gradients {
    /// Dense gradient for one named tensor.
    pub fn dense(&self, name: &str, params: &ModelParams) -> Vec<f64> {
        match name {
            "embeddings" => {
                let mut out = Array2::<f64>::zeros(params.embeddings.dim());
                for (&row, g) in &self.embeddings {
                    out.row_mut(row as usize).assign(g);
                }
                out.into_raw_vec_and_offset().0
            }
            "filters" => self.filters.iter().copied().collect(),
            "filter_bias" => self.filter_bias.to_vec(),
            "bn_gamma" => self.bn_gamma.to_vec(),
            "bn_beta" => self.bn_beta.to_vec(),
            "score_weights" => self.score_weights.to_vec(),
            "score_bias" => vec![self.score_bias],
            other => panic!("unknown parameter {other}"),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.embeddings.values().all(|g| g.iter().all(|&v| v == 0.0))
            && self.filters.iter().all(|&v| v == 0.0)
            && self.filter_bias.iter().all(|&v| v == 0.0)
            && self.bn_gamma.iter().all(|&v| v == 0.0)
            && self.bn_beta.iter().all(|&v| v == 0.0)
            && self.score_weights.iter().all(|&v| v == 0.0)
            && self.score_bias == 0.0
    }
}

/// Token ids padded or truncated to the model's input extent, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedGrid(pub Vec<u32>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

struct SampleState {
    /// Valid conv positions in ascending order; their rows in the batch
    /// matrix are consecutive starting at `row_start`.
    valid: Vec<usize>,
    row_start: usize,
    pooled: Vec<f64>,
    /// Row (in the batch matrix) that won each pooling window.
    winners: Vec<Option<usize>>,
}

/// Intermediates of one forward pass, consumed by `backward`.
pub struct ForwardCache {
    pub scores: Vec<f64>,
    inputs: Vec<EncodedGrid>,
    samples: Vec<SampleState>,
    activations: Array2<f64>,
    bn_cache: BatchNormCache,
    batch_stats: Option<super::ops::ChannelStats>,
    embed_ids: Vec<u32>,
}

impl ForwardCache {
    pub fn batch_stats(&self) -> Option<&super::ops::ChannelStats> {
        self.batch_stats.as_ref()
    }
}

impl CoherenceModel {
    /// Fresh model: Glorot-uniform filters and scoring weights, U(-0.01, 0.01)
    /// embeddings (overwritten from `pretrained` for lexicalized tokens whose
    /// word is found), zero biases, identity batch norm.
    pub fn new<R: Rng>(
        config: ModelConfig,
        vocab: Vocab,
        pretrained: Option<&PretrainedEmbeddings>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embedding_dim;
        let nf = config.num_filters;
        let mn = config.window_size();

        let mut embeddings = Array2::from_shape_simple_fn((vocab.len(), d), || rng.gen_range(-0.01..0.01));
        embeddings.row_mut(PAD_ID as usize).fill(0.0);
        if let Some(pre) = pretrained {
            if config.lex_mode == LexMode::Lexicalized && !pre.is_empty() {
                if pre.dim() != d {
                    return Err(CoherenceError::InvalidConfig(format!(
                        "pretrained vectors have dimension {}, model uses {d}",
                        pre.dim()
                    )));
                }
                let mut hits = 0;
                for (id, token) in vocab.tokens().iter().enumerate().skip(1) {
                    if token.starts_with("UNK-") {
                        continue;
                    }
                    if let (Some(word), _) = GridToken(token.clone()).decompose() {
                        if let Some(v) = pre.get(word) {
                            embeddings.row_mut(id).assign(&ndarray::ArrayView1::from(v));
                            hits += 1;
                        }
                    }
                }
                log::info!(
                    "initialized {hits} of {} embeddings from pretrained vectors",
                    vocab.len() - 1
                );
            }
        }

        let fb = glorot_bound(mn * d, mn * nf);
        let filters = Array2::from_shape_simple_fn((nf, mn * d), || rng.gen_range(-fb..fb));
        let sb = glorot_bound(config.pooled_len(), 1);
        let score_weights = Array1::from_shape_simple_fn(config.pooled_len(), || rng.gen_range(-sb..sb));

        let params = ModelParams {
            embeddings,
            filters,
            filter_bias: Array1::zeros(nf),
            batchnorm: BatchNorm::new(nf, config.bn_momentum, config.bn_epsilon),
            score_weights,
            score_bias: 0.0,
        };
        Ok(CoherenceModel { config, vocab, params })
    }

    /// Maps a grid to padded token ids.
    pub fn encode(&self, sample: &GridSample) -> Result<EncodedGrid> {
        match (self.config.architecture, sample) {
            (Architecture::Conv1d, GridSample::Monologue(_)) | (Architecture::Conv2d, GridSample::Conversation(_)) => {}
            (arch, s) => {
                return Err(CoherenceError::SettingMismatch(format!(
                    "{arch:?} model cannot score a {} grid",
                    if s.is_conversation() {
                        "conversational"
                    } else {
                        "monologue"
                    }
                )))
            }
        }
        let tokens = sample.stack(self.config.lex_mode);
        let (h, w) = (self.config.input_height, self.config.input_width);
        if tokens.height > h || tokens.width > w {
            log::debug!(
                "truncating {}x{} grid to model extent {h}x{w}",
                tokens.height,
                tokens.width
            );
        }
        let mut ids = vec![PAD_ID; h * w];
        for r in 0..tokens.height.min(h) {
            for c in 0..tokens.width.min(w) {
                ids[r * w + c] = self.vocab.id(tokens.get(r, c));
            }
        }
        Ok(EncodedGrid(ids))
    }

    /// Inference-mode score of one grid.
    pub fn score(&self, sample: &GridSample) -> Result<f64> {
        let enc = self.encode(sample)?;
        Ok(self.forward(std::slice::from_ref(&enc), Mode::Inference)?.scores[0])
    }

    /// Inference-mode scores; each grid is scored independently.
    pub fn score_all(&self, samples: &[&GridSample]) -> Result<Vec<f64>> {
        samples.par_iter().map(|s| self.score(s)).collect()
    }

    /// Filters rearranged to `(m*n*N) x d` with row `offset * N + filter`.
    fn filters_by_offset(&self) -> Array2<f64> {
        let (nf, mn, d) = (
            self.config.num_filters,
            self.config.window_size(),
            self.config.embedding_dim,
        );
        let mut out = Array2::<f64>::zeros((mn * nf, d));
        for c in 0..nf {
            let row = self.params.filters.row(c);
            for off in 0..mn {
                out.row_mut(off * nf + c)
                    .assign(&row.slice(ndarray::s![off * d..(off + 1) * d]));
            }
        }
        out
    }

    pub fn forward(&self, batch: &[EncodedGrid], mode: Mode) -> Result<ForwardCache> {
        let cfg = &self.config;
        let (w_in, nf) = (cfg.input_width, cfg.num_filters);
        let (m, n) = (cfg.filter_height, cfg.filter_width);
        let (oh, ow) = (cfg.out_height(), cfg.out_width());
        let expected = cfg.input_height * cfg.input_width;
        if let Some(bad) = batch.iter().find(|e| e.0.len() != expected) {
            return Err(CoherenceError::ShapeMismatch(format!(
                "encoded grid has {} cells, model expects {expected}",
                bad.0.len()
            )));
        }

        // project every distinct token through every filter offset once
        let mut embed_ids: Vec<u32> = batch
            .iter()
            .flat_map(|e| e.0.iter().copied())
            .filter(|&i| i != PAD_ID)
            .collect();
        embed_ids.sort_unstable();
        embed_ids.dedup();
        let slot: HashMap<u32, usize> = embed_ids.iter().enumerate().map(|(s, &i)| (i, s)).collect();
        let table = if embed_ids.is_empty() {
            Array2::zeros((0, cfg.window_size() * nf))
        } else {
            let emb = self
                .params
                .embeddings
                .select(Axis(0), &embed_ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
            emb.dot(&self.filters_by_offset().t())
        };

        let bias = &self.params.filter_bias;
        let per_sample: Vec<(Vec<usize>, Array2<f64>)> = batch
            .par_iter()
            .map(|enc| {
                let mut valid = Vec::new();
                let mut rows: Vec<f64> = Vec::new();
                for r in 0..oh {
                    for c in 0..ow {
                        let mut z = bias.to_vec();
                        let mut any = false;
                        for a in 0..m {
                            for b in 0..n {
                                let id = enc.0[(r + a) * w_in + c + b];
                                if id == PAD_ID {
                                    continue;
                                }
                                any = true;
                                let off = a * n + b;
                                let proj = table.row(slot[&id]);
                                for (zc, p) in z.iter_mut().zip(proj.slice(ndarray::s![off * nf..(off + 1) * nf])) {
                                    *zc += p;
                                }
                            }
                        }
                        if any {
                            valid.push(r * ow + c);
                            rows.extend(z);
                        }
                    }
                }
                let count = valid.len();
                (
                    valid,
                    Array2::from_shape_vec((count, nf), rows).expect("row count matches"),
                )
            })
            .collect();

        let total_rows: usize = per_sample.iter().map(|(v, _)| v.len()).sum();
        let mut pre = Array2::<f64>::zeros((total_rows, nf));
        let mut starts = Vec::with_capacity(batch.len());
        let mut at = 0;
        for (valid, z) in &per_sample {
            starts.push(at);
            pre.slice_mut(ndarray::s![at..at + valid.len(), ..]).assign(z);
            at += valid.len();
        }

        let (normed, bn_cache, batch_stats) = self.params.batchnorm.forward(pre.view(), batch.len(), mode)?;
        let activations = normed;

        let (pr, pc) = (cfg.pool_rows(), cfg.pool_cols());
        let (pl, pw) = (cfg.pool_height, cfg.pool_width);
        let windows = pr * pc;
        let samples: Vec<SampleState> = per_sample
            .into_par_iter()
            .zip(starts.into_par_iter())
            .map(|((valid, _), row_start)| {
                let mut pooled = vec![0.0; nf * windows];
                let mut winners = vec![None; nf * windows];
                let mut best = vec![f64::NEG_INFINITY; nf * windows];
                for (k, &pos) in valid.iter().enumerate() {
                    let (r, c) = (pos / ow, pos % ow);
                    let win = (r / pl) * pc + c / pw;
                    let row = activations.row(row_start + k);
                    for ch in 0..nf {
                        let v = row[ch].max(0.0);
                        let idx = ch * windows + win;
                        if v > best[idx] {
                            best[idx] = v;
                            winners[idx] = Some(row_start + k);
                        }
                    }
                }
                for idx in 0..nf * windows {
                    if winners[idx].is_some() {
                        pooled[idx] = best[idx];
                    }
                }
                SampleState {
                    valid,
                    row_start,
                    pooled,
                    winners,
                }
            })
            .collect();

        let u = self.params.score_weights.as_slice().expect("contiguous");
        let scores = samples
            .iter()
            .map(|s| super::ops::score(&s.pooled, u, self.params.score_bias))
            .collect::<Result<Vec<_>>>()?;

        Ok(ForwardCache {
            scores,
            inputs: batch.to_vec(),
            samples,
            activations,
            bn_cache,
            batch_stats,
            embed_ids,
        })
    }

    /// Gradients of `sum_s dscores[s] * score_s` through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, dscores: &[f64]) -> Result<Gradients> {
        let cfg = &self.config;
        let (nf, d) = (cfg.num_filters, cfg.embedding_dim);
        let (m, n, w_in) = (cfg.filter_height, cfg.filter_width, cfg.input_width);
        let ow = cfg.out_width();
        let windows = cfg.windows_per_map();
        if dscores.len() != cache.samples.len() {
            return Err(CoherenceError::ShapeMismatch(format!(
                "{} score gradients for a batch of {}",
                dscores.len(),
                cache.samples.len()
            )));
        }
        let u = &self.params.score_weights;

        let mut score_weights = Array1::<f64>::zeros(u.len());
        let mut score_bias = 0.0;
        let mut d_act = Array2::<f64>::zeros(cache.activations.dim());
        for (s, &dy) in cache.samples.iter().zip(dscores) {
            if dy == 0.0 {
                continue;
            }
            score_weights.scaled_add(dy, &Array1::from(s.pooled.clone()));
            score_bias += dy;
            for (idx, winner) in s.winners.iter().enumerate() {
                if let Some(row) = *winner {
                    let ch = idx / windows;
                    // ReLU passes gradient only where the normalized value is positive
                    if cache.activations[[row, ch]] > 0.0 {
                        d_act[[row, ch]] += dy * u[idx];
                    }
                }
            }
        }

        let (dz, bn_gamma, bn_beta) = self.params.batchnorm.backward(d_act.view(), &cache.bn_cache);
        let filter_bias = dz.sum_axis(Axis(0));

        // scatter conv-output gradients back onto (token, offset) pairs
        let slot: HashMap<u32, usize> = cache.embed_ids.iter().enumerate().map(|(s, &i)| (i, s)).collect();
        let width = cfg.window_size() * nf;
        let partials: Vec<Vec<(usize, Vec<f64>)>> = cache
            .samples
            .par_iter()
            .zip(cache.inputs.par_iter())
            .map(|(s, enc)| {
                let mut local: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for (k, &pos) in s.valid.iter().enumerate() {
                    let g = dz.row(s.row_start + k);
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let (r, c) = (pos / ow, pos % ow);
                    for a in 0..m {
                        for b in 0..n {
                            let id = enc.0[(r + a) * w_in + c + b];
                            if id == PAD_ID {
                                continue;
                            }
                            let off = a * n + b;
                            let acc = local.entry(slot[&id]).or_insert_with(|| vec![0.0; width]);
                            for (x, gv) in acc[off * nf..(off + 1) * nf].iter_mut().zip(g.iter()) {
                                *x += gv;
                            }
                        }
                    }
                }
                local.into_iter().collect()
            })
            .collect();
        let mut g_table = Array2::<f64>::zeros((cache.embed_ids.len(), width));
        for part in partials {
            for (sl, row) in part {
                let mut dst = g_table.row_mut(sl);
                for (x, v) in dst.iter_mut().zip(row) {
                    *x += v;
                }
            }
        }

        let mut filters = Array2::<f64>::zeros((nf, cfg.window_size() * d));
        let mut embeddings = BTreeMap::new();
        if !cache.embed_ids.is_empty() {
            let idx: Vec<usize> = cache.embed_ids.iter().map(|&i| i as usize).collect();
            let emb = self.params.embeddings.select(Axis(0), &idx);
            // (mn*N) x d, row offset*N + filter
            let d_by_offset = g_table.t().dot(&emb);
            for c in 0..nf {
                for off in 0..cfg.window_size() {
                    filters
                        .slice_mut(ndarray::s![c, off * d..(off + 1) * d])
                        .assign(&d_by_offset.row(off * nf + c));
                }
            }
            let d_emb = g_table.dot(&self.filters_by_offset());
            for (sl, &id) in cache.embed_ids.iter().enumerate() {
                embeddings.insert(id, d_emb.row(sl).to_owned());
            }
        }

        Ok(Gradients {
            embeddings,
            filters,
            filter_bias,
            bn_gamma,
            bn_beta,
            score_weights,
            score_bias,
        })
    }
}

/// Forward/backward pairing that refuses to run backward without a forward.
#[derive(Default)]
pub struct Tape {
    cache: Option<ForwardCache>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn forward(&mut self, model: &CoherenceModel, batch: &[EncodedGrid], mode: Mode) -> Result<&[f64]> {
        self.cache = Some(model.forward(batch, mode)?);
        Ok(&self.cache.as_ref().expect("just set").scores)
    }

    pub fn backward(&mut self, model: &CoherenceModel, dscores: &[f64]) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(CoherenceError::NoForwardPass)?;
        model.backward(&cache, dscores)
    }

    pub fn batch_stats(&self) -> Option<&super::ops::ChannelStats> {
        self.cache.as_ref().and_then(|c| c.batch_stats())
    }
}
