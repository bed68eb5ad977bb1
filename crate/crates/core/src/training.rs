//! Pair generation and the pairwise ranking training loop.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conversation::{build_conv_grid, enumerate_valid_trees, permute_thread, Thread};
use crate::error::{CoherenceError, Result};
use crate::eval::discriminate;
use crate::grid::{build_grid, AnnotatedDocument, LexMode, SentenceOrder};
use crate::neural::ops::{hinge_rank_grad, hinge_rank_loss, Mode};
use crate::neural::{
    Architecture, CoherenceModel, EncodedGrid, GridSample, ModelConfig, OptimizerState, PretrainedEmbeddings,
    RmsPropConfig, Tape, Vocab, PARAM_NAMES,
};
use crate::rng;

/// Which representation a pair of grids uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    #[default]
    Monologue,
    /// Conversation read in chronological order as a monologue.
    Temporal,
    /// Each root-to-leaf path as its own monologue; decisions aggregated per conversation.
    Path,
    /// The 3D conversational grid.
    Tree,
}

impl Setting {
    pub fn architecture(self) -> Architecture {
        match self {
            Setting::Tree => Architecture::Conv2d,
            _ => Architecture::Conv1d,
        }
    }

    pub fn is_conversational(self) -> bool {
        self != Setting::Monologue
    }
}

impl FromStr for Setting {
    type Err = CoherenceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monologue" => Ok(Setting::Monologue),
            "temporal" => Ok(Setting::Temporal),
            "path" => Ok(Setting::Path),
            "tree" => Ok(Setting::Tree),
            other => Err(CoherenceError::InvalidConfig(format!("unknown setting {other:?}"))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Monologue => "monologue",
            Setting::Temporal => "temporal",
            Setting::Path => "path",
            Setting::Tree => "tree",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub setting: Setting,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub num_filters: usize,
    pub filter_length: usize,
    pub pool_length: usize,
    /// Filter and pool extent across paths (tree setting only).
    pub filter_width: usize,
    pub pool_width: usize,
    pub max_epochs: usize,
    pub permutations_per_doc: usize,
    pub seed: u64,
    pub lex_mode: LexMode,
    /// Pretrained word vectors; random initialization when absent.
    pub embeddings_path: Option<String>,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub dev_fraction: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Overrides for the padded input extent; derived from the data otherwise.
    pub input_height: Option<usize>,
    pub input_width: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = RmsPropConfig::default();
        TrainConfig {
            setting: Setting::Monologue,
            batch_size: 32,
            embedding_dim: 300,
            num_filters: 150,
            filter_length: 6,
            pool_length: 6,
            filter_width: 1,
            pool_width: 1,
            max_epochs: 25,
            permutations_per_doc: 20,
            seed: 0,
            lex_mode: LexMode::Lexicalized,
            embeddings_path: None,
            learning_rate: opt.learning_rate,
            rho: opt.rho,
            epsilon: opt.epsilon,
            dev_fraction: 0.1,
            bn_momentum: 0.99,
            bn_epsilon: 1e-5,
            input_height: None,
            input_width: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("num_filters", self.num_filters),
            ("max_epochs", self.max_epochs),
            ("permutations_per_doc", self.permutations_per_doc),
        ] {
            if v == 0 {
                return Err(CoherenceError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("filter_length", self.filter_length),
            ("pool_length", self.pool_length),
            ("filter_width", self.filter_width),
            ("pool_width", self.pool_width),
        ] {
            if !(1..=12).contains(&v) {
                return Err(CoherenceError::InvalidConfig(format!("{name} = {v} is outside 1..=12")));
            }
        }
        if self.setting != Setting::Tree && (self.filter_width != 1 || self.pool_width != 1) {
            return Err(CoherenceError::InvalidConfig(
                "filter_width and pool_width apply to the tree setting only".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(CoherenceError::InvalidConfig("dev_fraction must be in [0, 1)".into()));
        }
        if self.learning_rate < 0.0 || !(0.0..1.0).contains(&self.rho) || self.epsilon <= 0.0 {
            return Err(CoherenceError::InvalidConfig("bad RMSprop hyperparameters".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: self.learning_rate,
            rho: self.rho,
            epsilon: self.epsilon,
        }
    }

    /// Parses JSON, or `key = value` lines with `#` comments.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let trimmed = text.trim_start();
        let value = if trimmed.starts_with('{') {
            serde_json::from_str(trimmed)?
        } else {
            let mut map = serde_json::Map::new();
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| CoherenceError::Parse {
                    line: i + 1,
                    message: format!("expected key = value, found {line:?}"),
                })?;
                let v = v.trim();
                let parsed = serde_json::from_str::<serde_json::Value>(v)
                    .unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
                map.insert(k.trim().to_string(), parsed);
            }
            serde_json::Value::Object(map)
        };
        let cfg: TrainConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One ordered training or test pair: `positive` should outscore `negative`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    /// Document or thread id.
    pub group: String,
    pub perm_id: usize,
    /// Path index for the path setting.
    pub path: Option<usize>,
    pub positive: GridSample,
    pub negative: GridSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub setting: Setting,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn groups(&self) -> usize {
        self.pairs.iter().map(|p| &p.group).collect::<HashSet<_>>().len()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Corpus<'a> {
    Documents(&'a [AnnotatedDocument]),
    Threads(&'a [Thread]),
}

/// Up to `count` distinct non-identity permutations of `0..n`.
pub fn sample_permutations<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let identity: Vec<usize> = (0..n).collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::new();
    // n = 2 has a single non-identity permutation; allow generous retries
    let max_attempts = 50 * count + 100;
    for _ in 0..max_attempts {
        if out.len() == count || n < 2 {
            break;
        }
        let mut p = identity.clone();
        p.shuffle(rng);
        if p != identity && seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

/// Original-versus-permuted pairs. For every document or thread, up to
/// `per_item` distinct sentence permutations are drawn from a stream keyed on
/// the item index, so all conversation settings see the same permutations.
/// Permutations whose grid equals the original are dropped; in the path
/// setting each path becomes a pair and paths left unchanged are dropped.
pub fn generate_pairs(corpus: Corpus<'_>, setting: Setting, per_item: usize, seed: u64) -> Result<PairSet> {
    let mut pairs = Vec::new();
    match (corpus, setting) {
        (Corpus::Documents(docs), Setting::Monologue) => {
            for (i, doc) in docs.iter().enumerate() {
                if doc.num_sentences() < 2 {
                    log::warn!("skipping document {}: fewer than two sentences", doc.doc_id);
                    continue;
                }
                let original = build_grid(doc)?;
                let mut r = rng::item_stream(seed, "permutation", i as u64);
                for (perm_id, perm) in sample_permutations(doc.num_sentences(), per_item, &mut r)
                    .iter()
                    .enumerate()
                {
                    let permuted = build_grid(&doc.permute_sentences(perm)?)?;
                    if permuted == original {
                        continue;
                    }
                    pairs.push(Pair {
                        group: doc.doc_id.clone(),
                        perm_id,
                        path: None,
                        positive: GridSample::Monologue(original.clone()),
                        negative: GridSample::Monologue(permuted),
                    });
                }
            }
        }
        (Corpus::Threads(threads), s) if s.is_conversational() => {
            for (i, thread) in threads.iter().enumerate() {
                let n = thread.num_sentences();
                if n < 2 {
                    log::warn!("skipping thread {}: fewer than two sentences", thread.thread_id);
                    continue;
                }
                let mut r = rng::item_stream(seed, "permutation", i as u64);
                for (perm_id, perm) in sample_permutations(n, per_item, &mut r).iter().enumerate() {
                    let permuted = permute_thread(thread, perm)?;
                    conversation_pairs(thread, &permuted, s, perm_id, &mut pairs)?;
                }
            }
        }
        (_, s) => {
            return Err(CoherenceError::SettingMismatch(format!(
                "setting {s} does not match the corpus kind"
            )))
        }
    }
    Ok(PairSet { setting, pairs })
}

/// Pairs comparing `original` with a re-ordered rendering of the same thread.
pub(crate) fn conversation_pairs(
    original: &Thread,
    permuted: &Thread,
    setting: Setting,
    perm_id: usize,
    out: &mut Vec<Pair>,
) -> Result<()> {
    let group = original.thread_id.clone();
    match setting {
        Setting::Temporal => {
            let (a, b) = (original.temporal_grid()?, permuted.temporal_grid()?);
            if a != b {
                out.push(Pair {
                    group,
                    perm_id,
                    path: None,
                    positive: GridSample::Monologue(a),
                    negative: GridSample::Monologue(b),
                });
            }
        }
        Setting::Tree => {
            let (a, b) = (build_conv_grid(original)?, build_conv_grid(permuted)?);
            if a != b {
                out.push(Pair {
                    group,
                    perm_id,
                    path: None,
                    positive: GridSample::Conversation(a),
                    negative: GridSample::Conversation(b),
                });
            }
        }
        Setting::Path => {
            for (p, (a, b)) in original
                .path_grids()?
                .into_iter()
                .zip(permuted.path_grids()?)
                .enumerate()
            {
                if a != b {
                    out.push(Pair {
                        group: group.clone(),
                        perm_id,
                        path: Some(p),
                        positive: GridSample::Monologue(a),
                        negative: GridSample::Monologue(b),
                    });
                }
            }
        }
        Setting::Monologue => {
            return Err(CoherenceError::SettingMismatch(
                "threads need a conversational setting".into(),
            ))
        }
    }
    Ok(())
}

/// Gold-versus-alternative reply structures for training a reconstruction
/// model: each thread's true tree against up to `per_thread` other valid trees.
pub fn generate_structure_pairs(threads: &[Thread], per_thread: usize, cap: usize, seed: u64) -> Result<PairSet> {
    let mut pairs = Vec::new();
    for (i, thread) in threads.iter().enumerate() {
        if thread.num_posts() < 3 {
            continue;
        }
        if thread.num_posts() > cap {
            log::warn!(
                "skipping thread {}: {} posts exceed cap {cap}",
                thread.thread_id,
                thread.num_posts()
            );
            continue;
        }
        let gold = thread.parent_vector();
        let positive = build_conv_grid(thread)?;
        let mut alternatives: Vec<(usize, _)> = enumerate_valid_trees(thread.num_posts(), cap)?
            .into_iter()
            .enumerate()
            .filter(|(_, t)| *t != gold)
            .collect();
        let mut r = rng::item_stream(seed, "structure", i as u64);
        alternatives.shuffle(&mut r);
        alternatives.truncate(per_thread);
        alternatives.sort_by_key(|(k, _)| *k);
        for (tree_id, tree) in alternatives {
            let negative = build_conv_grid(&thread.with_parents(&tree)?)?;
            if negative == positive {
                continue;
            }
            pairs.push(Pair {
                group: thread.thread_id.clone(),
                perm_id: tree_id,
                path: None,
                positive: GridSample::Conversation(positive.clone()),
                negative: GridSample::Conversation(negative),
            });
        }
    }
    Ok(PairSet {
        setting: Setting::Tree,
        pairs,
    })
}

/// Moves the pairs of a seeded `fraction` of groups into a development set.
pub fn split_dev(pairs: &PairSet, fraction: f64, seed: u64) -> (PairSet, PairSet) {
    let mut groups: Vec<&String> = pairs
        .pairs
        .iter()
        .map(|p| &p.group)
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    groups.sort();
    let mut r = rng::stream(seed, "dev-split");
    groups.shuffle(&mut r);
    let take = ((groups.len() as f64) * fraction).ceil() as usize;
    let dev_groups: HashSet<&String> = groups.into_iter().take(take).collect();
    let (dev, train): (Vec<Pair>, Vec<Pair>) = pairs.pairs.iter().cloned().partition(|p| dev_groups.contains(&p.group));
    (
        PairSet {
            setting: pairs.setting,
            pairs: train,
        },
        PairSet {
            setting: pairs.setting,
            pairs: dev,
        },
    )
}

/// Shuffles groups and pairs within groups, then deals pairs round-robin
/// across groups so a document's negatives are spread through the epoch.
pub fn stratified_order<R: Rng>(groups: &[usize], rng: &mut R) -> Vec<usize> {
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    let mut buckets: Vec<Vec<usize>> = by_group.into_values().collect();
    for b in buckets.iter_mut() {
        b.shuffle(rng);
    }
    buckets.shuffle(rng);
    let mut order = Vec::with_capacity(groups.len());
    let longest = buckets.iter().map(Vec::len).max().unwrap_or(0);
    for round in 0..longest {
        order.extend(buckets.iter().filter_map(|b| b.get(round).copied()));
    }
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CoherenceModel,
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub log: Vec<EpochLog>,
}

/// Builds the vocabulary over every token of the training pairs.
pub fn build_vocab(pairs: &PairSet, mode: LexMode) -> Vocab {
    let mut tokens = Vec::new();
    for p in &pairs.pairs {
        for g in [&p.positive, &p.negative] {
            tokens.extend(g.stack(mode).tokens.into_iter().flatten());
        }
    }
    Vocab::build(mode, tokens.iter())
}

/// Model configuration for a training run; the input extent covers the
/// largest grid among `sets` unless the config overrides it.
pub fn model_config(config: &TrainConfig, sets: &[&PairSet]) -> Result<ModelConfig> {
    let mut height = 0;
    let mut width = 0;
    for set in sets {
        for p in &set.pairs {
            for g in [&p.positive, &p.negative] {
                let t = g.stack(config.lex_mode);
                height = height.max(t.height);
                width = width.max(t.width);
            }
        }
    }
    let architecture = config.setting.architecture();
    let cfg = ModelConfig {
        architecture,
        lex_mode: config.lex_mode,
        embedding_dim: config.embedding_dim,
        num_filters: config.num_filters,
        filter_height: config.filter_length,
        filter_width: config.filter_width,
        pool_height: config.pool_length,
        pool_width: config.pool_width,
        input_height: config.input_height.unwrap_or(height).max(config.filter_length),
        input_width: match architecture {
            Architecture::Conv1d => 1,
            Architecture::Conv2d => config.input_width.unwrap_or(width).max(config.filter_width),
        },
        bn_momentum: config.bn_momentum,
        bn_epsilon: config.bn_epsilon,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains with the pairwise hinge loss and keeps the epoch with the best
/// development accuracy (earliest on ties). With an empty development set the
/// training pairs stand in for it.
pub fn train(
    train_pairs: &PairSet,
    dev_pairs: &PairSet,
    config: &TrainConfig,
    pretrained: Option<&PretrainedEmbeddings>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(CoherenceError::InvalidConfig("no training pairs".into()));
    }
    for set in [train_pairs, dev_pairs] {
        if set.setting != config.setting && !set.is_empty() {
            return Err(CoherenceError::SettingMismatch(format!(
                "pairs are for {} but the config trains {}",
                set.setting, config.setting
            )));
        }
    }
    let dev = if dev_pairs.is_empty() {
        log::warn!("empty development set; selecting epochs on training pairs");
        train_pairs
    } else {
        dev_pairs
    };

    let vocab = build_vocab(train_pairs, config.lex_mode);
    let model_cfg = model_config(config, &[train_pairs, dev_pairs])?;
    let mut model = CoherenceModel::new(model_cfg, vocab, pretrained, &mut rng::stream(config.seed, "init"))?;
    log::info!(
        "training {} model: {} pairs, vocab {}, input {}x{}, {} pooled features",
        config.setting,
        train_pairs.len(),
        model.vocab.len(),
        model.config.input_height,
        model.config.input_width,
        model.config.pooled_len()
    );

    let encoded: Vec<(EncodedGrid, EncodedGrid)> = train_pairs
        .pairs
        .iter()
        .map(|p| Ok((model.encode(&p.positive)?, model.encode(&p.negative)?)))
        .collect::<Result<_>>()?;
    let mut group_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let groups: Vec<usize> = train_pairs
        .pairs
        .iter()
        .map(|p| {
            let next = group_ids.len();
            *group_ids.entry(p.group.as_str()).or_insert(next)
        })
        .collect();

    let mut optimizer = OptimizerState::new(config.optimizer());
    let mut shuffle_rng = rng::stream(config.seed, "shuffle");
    let mut best: Option<(usize, f64, CoherenceModel)> = None;
    let mut log_rows = Vec::new();

    for epoch in 1..=config.max_epochs {
        let order = stratified_order(&groups, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch: Vec<EncodedGrid> = chunk.iter().map(|&i| encoded[i].0.clone()).collect();
            batch.extend(chunk.iter().map(|&i| encoded[i].1.clone()));
            let b = chunk.len();

            let mut tape = Tape::new();
            let scores = tape.forward(&model, &batch, Mode::Train)?.to_vec();
            let mut dscores = vec![0.0; 2 * b];
            for k in 0..b {
                let loss = hinge_rank_loss(scores[k], scores[b + k]);
                if !loss.is_finite() {
                    return Err(CoherenceError::Diverged { epoch, loss });
                }
                loss_sum += loss;
                let (gp, gn) = hinge_rank_grad(scores[k], scores[b + k]);
                dscores[k] = gp / b as f64;
                dscores[b + k] = gn / b as f64;
            }
            let stats = tape.batch_stats().cloned();
            let grads = tape.backward(&model, &dscores)?;
            if let Some(stats) = stats {
                model.params.batchnorm.update_running(&stats);
            }
            for name in PARAM_NAMES {
                let g = grads.dense(name, &model.params);
                optimizer.step(name, model.params.tensor_mut(name), &g)?;
            }
            if !model.params.all_finite() {
                return Err(CoherenceError::Diverged { epoch, loss: f64::NAN });
            }
        }
        let mean_loss = loss_sum / train_pairs.len() as f64;
        let dev_acc = discriminate(&model, dev)?.accuracy;
        log::info!("epoch {epoch}: loss {mean_loss:.5}, dev accuracy {dev_acc:.4}");
        log_rows.push(EpochLog {
            epoch,
            mean_loss,
            dev_acc,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| dev_acc > *acc) {
            best = Some((epoch, dev_acc, model.clone()));
        }
    }

    let (best_epoch, best_dev_acc, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_dev_acc,
        log: log_rows,
    })
}
