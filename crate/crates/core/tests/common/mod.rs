#![allow(dead_code, clippy::needless_range_loop)]

pub mod oracle;

use std::path::PathBuf;

use entity_coherence::conversation::{ParentVector, Thread};
use entity_coherence::grid::{AnnotatedDocument, EntityGrid, LexMode, Role};
use entity_coherence::neural::ops::{hinge_rank_grad, hinge_rank_loss, Mode};
use entity_coherence::neural::{CoherenceModel, EncodedGrid, GridSample, Tape, PAD_ID, PARAM_NAMES};
use entity_coherence::synth::{synth_documents, synth_threads, SynthConfig};
use entity_coherence::training::{build_vocab, generate_pairs, model_config, Corpus, PairSet, Setting, TrainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn load_document(name: &str) -> AnnotatedDocument {
    serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

pub fn load_thread(name: &str) -> Thread {
    serde_json::from_str(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

pub fn random_role<R: Rng>(rng: &mut R) -> Role {
    Role::GRID_ROLES[rng.gen_range(0..4)]
}

/// Random grid whose every column holds at least one mention.
pub fn random_grid<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> EntityGrid {
    let entities: Vec<String> = (0..cols).map(|j| format!("e{j}")).collect();
    let mut cells: Vec<Role> = (0..rows * cols).map(|_| random_role(rng)).collect();
    for j in 0..cols {
        if (0..rows).all(|i| cells[i * cols + j] == Role::Absent) {
            cells[rng.gen_range(0..rows) * cols + j] = Role::Subject;
        }
    }
    EntityGrid::from_parts(entities, rows, cells).unwrap()
}

pub fn random_tensor<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// ReLU(conv) over an `I x J x d` grid flattened entity by entity.
pub fn naive_conv1d(x: &[Vec<Vec<f64>>], w: &[Vec<f64>], b: &[f64], m: usize) -> Vec<Vec<f64>> {
    let (i_len, j_len) = (x.len(), x[0].len());
    let d = x[0][0].len();
    let mut flat = Vec::new();
    for j in 0..j_len {
        for i in 0..i_len {
            flat.push(x[i][j].clone());
        }
    }
    w.iter()
        .zip(b)
        .map(|(f, &bias)| {
            (0..=flat.len() - m)
                .map(|t| {
                    let mut z = bias;
                    for a in 0..m {
                        for k in 0..d {
                            z += f[a * d + k] * flat[t + a][k];
                        }
                    }
                    z.max(0.0)
                })
                .collect()
        })
        .collect()
}

/// ReLU(conv) over an `I x J x P x d` grid, entity blocks stacked along depth.
pub fn naive_conv2d(x: &[Vec<Vec<Vec<f64>>>], w: &[Vec<f64>], b: &[f64], m: usize, n: usize) -> Vec<Vec<Vec<f64>>> {
    let (i_len, j_len, p_len) = (x.len(), x[0].len(), x[0][0].len());
    let d = x[0][0][0].len();
    let cell = |row: usize, col: usize| &x[row / j_len][row % j_len][col];
    let rows = i_len * j_len;
    w.iter()
        .zip(b)
        .map(|(f, &bias)| {
            (0..=rows - m)
                .map(|r| {
                    (0..=p_len - n)
                        .map(|c| {
                            let mut z = bias;
                            for a in 0..m {
                                for bb in 0..n {
                                    for k in 0..d {
                                        z += f[(a * n + bb) * d + k] * cell(r + a, c + bb)[k];
                                    }
                                }
                            }
                            z.max(0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn naive_pool1d(v: &[f64], l: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < v.len() {
        let mut best = v[start];
        for t in start..(start + l).min(v.len()) {
            if v[t] > best {
                best = v[t];
            }
        }
        out.push(best);
        start += l;
    }
    out
}

pub fn naive_pool2d(map: &[Vec<f64>], l: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let (rows, cols) = (map.len(), map[0].len());
    let mut r0 = 0;
    while r0 < rows {
        let mut c0 = 0;
        while c0 < cols {
            let mut best = f64::NEG_INFINITY;
            for r in r0..(r0 + l).min(rows) {
                for c in c0..(c0 + w).min(cols) {
                    best = best.max(map[r][c]);
                }
            }
            out.push(best);
            c0 += w;
        }
        r0 += l;
    }
    out
}

/// Counts every role sequence by direct comparison.
pub fn naive_transitions(grid: &EntityGrid, k: usize) -> Vec<f64> {
    let roles = Role::GRID_ROLES;
    let total = (grid.num_sentences() + 1 - k) * grid.num_entities();
    (0..4usize.pow(k as u32))
        .map(|code| {
            let seq: Vec<Role> = (0..k)
                .map(|t| roles[(code / 4usize.pow((k - 1 - t) as u32)) % 4])
                .collect();
            let mut hits = 0;
            for j in 0..grid.num_entities() {
                for s in 0..=grid.num_sentences() - k {
                    if (0..k).all(|t| grid.get(s + t, j) == seq[t]) {
                        hits += 1;
                    }
                }
            }
            hits as f64 / total as f64
        })
        .collect()
}

/// A parent vector is valid when each post answers an earlier one.
pub fn naive_is_valid_tree(v: &ParentVector) -> bool {
    v.0.iter().enumerate().all(|(i, &p)| p >= 1 && (p as usize) < i + 2)
}

/// Every vector in `{1..n}^(n-1)` that is a valid tree, in lexicographic order.
pub fn naive_trees(n: usize) -> Vec<ParentVector> {
    let len = n - 1;
    let mut out = Vec::new();
    let total = n.pow(len as u32);
    for code in 0..total {
        let v: Vec<u32> = (0..len)
            .map(|t| ((code / n.pow((len - 1 - t) as u32)) % n) as u32 + 1)
            .collect();
        let v = ParentVector(v);
        if naive_is_valid_tree(&v) {
            out.push(v);
        }
    }
    out
}

/// Inference score recomputed with explicit loops from the model's parameters.
pub fn naive_model_score(model: &CoherenceModel, enc: &EncodedGrid) -> f64 {
    let c = &model.config;
    let p = &model.params;
    let (h, w_in, d, nf) = (c.input_height, c.input_width, c.embedding_dim, c.num_filters);
    let (m, n, l, pw) = (c.filter_height, c.filter_width, c.pool_height, c.pool_width);
    let (oh, ow) = (h - m + 1, w_in - n + 1);
    let (pr, pc) = (oh.div_ceil(l), ow.div_ceil(pw));
    let bn = &p.batchnorm;
    let mut pooled = vec![0.0; nf * pr * pc];
    let mut seen = vec![false; nf * pr * pc];
    for r in 0..oh {
        for col in 0..ow {
            let ids: Vec<u32> = (0..m)
                .flat_map(|a| (0..n).map(move |b| (a, b)))
                .map(|(a, b)| enc.0[(r + a) * w_in + col + b])
                .collect();
            if ids.iter().all(|&i| i == PAD_ID) {
                continue;
            }
            for f in 0..nf {
                let mut z = p.filter_bias[f];
                for (off, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        z += p.filters[[f, off * d + k]] * p.embeddings[[id as usize, k]];
                    }
                }
                let y = bn.gamma[f] * (z - bn.running_mean[f]) / (bn.running_var[f] + bn.epsilon).sqrt() + bn.beta[f];
                let a = y.max(0.0);
                let idx = f * pr * pc + (r / l) * pc + col / pw;
                if !seen[idx] || a > pooled[idx] {
                    pooled[idx] = a;
                    seen[idx] = true;
                }
            }
        }
    }
    pooled
        .iter()
        .zip(p.score_weights.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + p.score_bias
}

pub fn tiny_pairs(setting: Setting, seed: u64) -> PairSet {
    let cfg = SynthConfig {
        min_sentences: 3,
        max_sentences: 3,
        entities_per_doc: 2,
        min_posts: 2,
        max_posts: 3,
        max_sentences_per_post: 1,
        thread_entities: 2,
        topic_probability: 0.5,
        lexicon_size: 4,
        ..SynthConfig::default()
    };
    let mut set = match setting {
        Setting::Monologue => {
            let docs = synth_documents(6, &cfg, seed).unwrap();
            generate_pairs(Corpus::Documents(&docs), setting, 2, seed).unwrap()
        }
        _ => {
            let threads = synth_threads(6, &cfg, seed).unwrap();
            generate_pairs(Corpus::Threads(&threads), setting, 2, seed).unwrap()
        }
    };
    set.pairs.truncate(4);
    set
}

/// Tiny model and encoded pair batch for gradient checks.
pub fn tiny_model(setting: Setting, seed: u64) -> (CoherenceModel, Vec<EncodedGrid>) {
    let pairs = tiny_pairs(setting, seed);
    assert!(pairs.len() >= 2, "need at least two pairs");
    let tc = TrainConfig {
        setting,
        embedding_dim: 4,
        num_filters: 3,
        filter_length: 2,
        pool_length: 2,
        filter_width: if setting == Setting::Tree { 2 } else { 1 },
        pool_width: 1,
        lex_mode: LexMode::Lexicalized,
        input_height: Some(6),
        input_width: if setting == Setting::Tree { Some(2) } else { None },
        seed,
        ..TrainConfig::default()
    };
    let cfg = model_config(&tc, &[&pairs]).unwrap();
    let vocab = build_vocab(&pairs, LexMode::Lexicalized);
    let mut rng: ChaCha8Rng = entity_coherence::rng::stream(seed, "gradcheck");
    let mut model = CoherenceModel::new(cfg, vocab, None, &mut rng).unwrap();
    // move every parameter away from its initial value so no gradient is trivially zero
    for name in PARAM_NAMES {
        for (i, v) in model.params.tensor_mut(name).iter_mut().enumerate() {
            if name == "embeddings" && i < model.config.embedding_dim {
                continue;
            }
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let mut batch: Vec<EncodedGrid> = pairs.pairs.iter().map(|p| model.encode(&p.positive).unwrap()).collect();
    batch.extend(pairs.pairs.iter().map(|p| model.encode(&p.negative).unwrap()));
    // orient every pair so its hinge is active; the batch statistics do not change
    let scores = model.forward(&batch, Mode::Train).unwrap().scores;
    let b = pairs.len();
    for k in 0..b {
        if hinge_rank_loss(scores[k], scores[b + k]) == 0.0 {
            batch.swap(k, b + k);
        }
    }
    (model, batch)
}

pub fn batch_loss(model: &CoherenceModel, batch: &[EncodedGrid]) -> f64 {
    let scores = model.forward(batch, Mode::Train).unwrap().scores;
    let b = batch.len() / 2;
    (0..b).map(|k| hinge_rank_loss(scores[k], scores[b + k])).sum::<f64>() / b as f64
}

#[derive(Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs_grad: f64,
    pub failures: usize,
}

/// Central differences against the analytic gradient of the mean hinge loss.
/// A coordinate passes if the absolute error is below 1e-7 or the relative
/// error below 1e-3.
pub fn gradient_check(model: &CoherenceModel, batch: &[EncodedGrid], step: f64) -> Vec<GradCheck> {
    let mut tape = Tape::new();
    let scores = tape.forward(model, batch, Mode::Train).unwrap().to_vec();
    let b = batch.len() / 2;
    let mut dscores = vec![0.0; 2 * b];
    for k in 0..b {
        let (gp, gn) = hinge_rank_grad(scores[k], scores[b + k]);
        dscores[k] = gp / b as f64;
        dscores[b + k] = gn / b as f64;
    }
    let grads = tape.backward(model, &dscores).unwrap();
    let mut rng = entity_coherence::rng::stream(17, "coords");
    PARAM_NAMES
        .iter()
        .map(|&name| {
            let analytic = grads.dense(name, &model.params);
            let size = analytic.len();
            let mut coords: Vec<usize> = (0..size).collect();
            if size > 100 {
                coords = rand::seq::index::sample(&mut rng, size, 100).into_vec();
                coords.sort();
            }
            let mut work = model.clone();
            let mut max_rel: f64 = 0.0;
            let mut failures = 0;
            for &i in &coords {
                let orig = work.params.tensor(name)[i];
                work.params.tensor_mut(name)[i] = orig + step;
                let up = batch_loss(&work, batch);
                work.params.tensor_mut(name)[i] = orig - step;
                let down = batch_loss(&work, batch);
                work.params.tensor_mut(name)[i] = orig;
                let numeric = (up - down) / (2.0 * step);
                let abs = (numeric - analytic[i]).abs();
                let rel = abs / numeric.abs().max(analytic[i].abs()).max(1e-300);
                if numeric.abs().max(analytic[i].abs()) > 1e-6 {
                    max_rel = max_rel.max(rel);
                }
                if abs >= 1e-7 && rel >= 1e-3 {
                    failures += 1;
                }
            }
            GradCheck {
                name,
                checked: coords.len(),
                max_rel,
                max_abs_grad: coords.iter().map(|&i| analytic[i].abs()).fold(0.0, f64::max),
                failures,
            }
        })
        .collect()
}

/// Samples that are plausible model inputs for a setting.
pub fn all_samples(set: &PairSet) -> Vec<&GridSample> {
    set.pairs.iter().flat_map(|p| [&p.positive, &p.negative]).collect()
}
