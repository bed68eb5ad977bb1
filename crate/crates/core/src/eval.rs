//! Discrimination, thread reconstruction, baselines and metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conversation::{build_conv_grid, enumerate_valid_trees, ParentVector, Thread};
use crate::error::{CoherenceError, Result};
use crate::grid::{build_grid, transition_probabilities, EntityGrid};
use crate::neural::{CoherenceModel, GridSample};
use crate::training::{conversation_pairs, Corpus, Pair, PairSet, Setting};

/// Anything that assigns a coherence score to a grid.
pub trait Scorer: Sync {
    fn score_grid(&self, grid: &GridSample) -> Result<f64>;
}

impl Scorer for CoherenceModel {
    fn score_grid(&self, grid: &GridSample) -> Result<f64> {
        self.score(grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub group: String,
    pub perm_id: usize,
    pub path: Option<usize>,
    pub score_pos: f64,
    pub score_neg: f64,
    /// Strictly higher score for the original.
    pub correct: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    /// Decided units: pairs, or (conversation, permutation) in the path setting.
    pub total: usize,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Wins over all units; ties count as errors.
    pub accuracy: f64,
    /// Ties count as abstentions: precision over decided units, recall over all.
    pub f1: f64,
    pub decisions: Vec<PairDecision>,
}

impl EvalReport {
    fn from_outcomes(setting: Setting, outcomes: &[Outcome], decisions: Vec<PairDecision>) -> Self {
        let count = |o: Outcome| outcomes.iter().filter(|&&x| x == o).count();
        let (wins, losses, ties) = (count(Outcome::Win), count(Outcome::Loss), count(Outcome::Tie));
        let total = outcomes.len();
        let accuracy = ratio(wins, total);
        let precision = ratio(wins, wins + losses);
        let f1 = if precision + accuracy > 0.0 {
            2.0 * precision * accuracy / (precision + accuracy)
        } else {
            0.0
        };
        EvalReport {
            setting,
            total,
            wins,
            losses,
            ties,
            accuracy,
            f1,
            decisions,
        }
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("setting", self.setting.to_string()),
            ("units", self.total.to_string()),
            ("wins", self.wins.to_string()),
            ("losses", self.losses.to_string()),
            ("ties", self.ties.to_string()),
            ("accuracy", format!("{:.4}", self.accuracy)),
            ("f1", format!("{:.4}", self.f1)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<10} {v:>10}");
        }
        out
    }

    pub fn decisions_csv(&self) -> String {
        let mut out = String::from("group,perm_id,path,score_pos,score_neg,correct\n");
        for d in &self.decisions {
            let path = d.path.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{}",
                d.group, d.perm_id, path, d.score_pos, d.score_neg, d.correct
            );
        }
        out
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn outcome(pos: f64, neg: f64) -> Outcome {
    if pos > neg {
        Outcome::Win
    } else if pos < neg {
        Outcome::Loss
    } else {
        Outcome::Tie
    }
}

/// Scores both sides of every pair. In the path setting a conversation wins a
/// permutation when more of its paths beat their permuted counterparts than
/// the other way round.
pub fn discriminate<S: Scorer + ?Sized>(scorer: &S, pairs: &PairSet) -> Result<EvalReport> {
    for p in &pairs.pairs {
        let expect_conv = pairs.setting == Setting::Tree;
        if p.positive.is_conversation() != expect_conv || p.negative.is_conversation() != expect_conv {
            return Err(CoherenceError::SettingMismatch(format!(
                "pair from {} does not fit the {} setting",
                p.group, pairs.setting
            )));
        }
        if (pairs.setting == Setting::Path) != p.path.is_some() {
            return Err(CoherenceError::SettingMismatch(format!(
                "path index on pair from {} does not fit the {} setting",
                p.group, pairs.setting
            )));
        }
    }
    let decisions: Vec<PairDecision> = pairs
        .pairs
        .par_iter()
        .map(|p: &Pair| {
            let score_pos = scorer.score_grid(&p.positive)?;
            let score_neg = scorer.score_grid(&p.negative)?;
            Ok(PairDecision {
                group: p.group.clone(),
                perm_id: p.perm_id,
                path: p.path,
                score_pos,
                score_neg,
                correct: score_pos > score_neg,
            })
        })
        .collect::<Result<_>>()?;

    let outcomes: Vec<Outcome> = if pairs.setting == Setting::Path {
        let mut tally: BTreeMap<(&str, usize), (usize, usize)> = BTreeMap::new();
        for d in &decisions {
            let t = tally.entry((d.group.as_str(), d.perm_id)).or_default();
            match outcome(d.score_pos, d.score_neg) {
                Outcome::Win => t.0 += 1,
                Outcome::Loss => t.1 += 1,
                Outcome::Tie => {}
            }
        }
        tally.values().map(|&(w, l)| outcome(w as f64, l as f64)).collect()
    } else {
        decisions.iter().map(|d| outcome(d.score_pos, d.score_neg)).collect()
    };
    Ok(EvalReport::from_outcomes(pairs.setting, &outcomes, decisions))
}

/// Original against its sentence order fully reversed.
pub fn inverse_pairs(corpus: Corpus<'_>, setting: Setting) -> Result<PairSet> {
    let mut pairs = Vec::new();
    match (corpus, setting) {
        (Corpus::Documents(docs), Setting::Monologue) => {
            for doc in docs {
                let n = doc.num_sentences();
                if n < 2 {
                    continue;
                }
                let mut reversed = doc.clone();
                reversed.sentences.reverse();
                let (a, b) = (build_grid(doc)?, build_grid(&reversed)?);
                if a != b {
                    pairs.push(Pair {
                        group: doc.doc_id.clone(),
                        perm_id: 0,
                        path: None,
                        positive: GridSample::Monologue(a),
                        negative: GridSample::Monologue(b),
                    });
                }
            }
        }
        (Corpus::Threads(threads), s) if s.is_conversational() => {
            for thread in threads {
                let n = thread.num_sentences();
                if n < 2 {
                    continue;
                }
                let perm: Vec<usize> = (0..n).rev().collect();
                let permuted = crate::conversation::permute_thread(thread, &perm)?;
                conversation_pairs(thread, &permuted, s, 0, &mut pairs)?;
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

pub fn inverse_eval<S: Scorer + ?Sized>(scorer: &S, corpus: Corpus<'_>, setting: Setting) -> Result<EvalReport> {
    discriminate(scorer, &inverse_pairs(corpus, setting)?)
}

/// The highest-scoring valid reply structure for the thread's posts; the
/// thread's own structure is ignored. Ties go to the lexicographically
/// smallest parent vector.
pub fn reconstruct<S: Scorer + ?Sized>(scorer: &S, thread: &Thread, cap: usize) -> Result<ParentVector> {
    let n = thread.num_posts();
    let candidates = enumerate_valid_trees(n, cap)?;
    if candidates.len() == 1 {
        return Ok(candidates.into_iter().next().expect("one candidate"));
    }
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|tree| scorer.score_grid(&GridSample::Conversation(build_conv_grid(&thread.with_parents(tree)?)?)))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(candidates[best].clone())
}

/// Every post replies to the one before it.
pub fn baseline_all_previous(num_posts: usize) -> ParentVector {
    ParentVector((1..num_posts as u32).collect())
}

/// Every post replies to the first.
pub fn baseline_all_first(num_posts: usize) -> ParentVector {
    ParentVector(vec![1; num_posts.saturating_sub(1)])
}

/// Each post replies to the earlier post with the most similar TF-IDF vector
/// over entity mentions. Without any overlap it falls back to the previous
/// post; ties go to the earliest post.
pub fn baseline_cos_sim(thread: &Thread) -> ParentVector {
    let bags: Vec<HashMap<&str, f64>> = thread
        .posts
        .iter()
        .map(|p| {
            let mut bag = HashMap::new();
            for m in p.sentences.iter().flatten() {
                *bag.entry(m.entity.as_str()).or_insert(0.0) += 1.0;
            }
            bag
        })
        .collect();
    let total = bags.len() as f64;
    let mut df: HashMap<&str, f64> = HashMap::new();
    for bag in &bags {
        for &e in bag.keys() {
            *df.entry(e).or_insert(0.0) += 1.0;
        }
    }
    let vectors: Vec<HashMap<&str, f64>> = bags
        .iter()
        .map(|bag| {
            bag.iter()
                .map(|(&e, &tf)| (e, tf * (((1.0 + total) / (1.0 + df[e])).ln() + 1.0)))
                .collect()
        })
        .collect();
    let cosine = |a: &HashMap<&str, f64>, b: &HashMap<&str, f64>| {
        let dot: f64 = a.iter().filter_map(|(e, x)| b.get(e).map(|y| x * y)).sum();
        let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut parents = Vec::new();
    for k in 1..vectors.len() {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..k {
            let s = cosine(&vectors[k], &vectors[j]);
            if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let parent = best.map_or(k, |(j, _)| j + 1);
        parents.push(parent as u32);
    }
    ParentVector(parents)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub threads: usize,
    /// Threads whose whole structure is recovered.
    pub thread_accuracy: f64,
    /// Mean per-thread fraction of correct parent links.
    pub edge_accuracy: f64,
    /// Mean per-thread F1 over parent links.
    pub edge_f1: f64,
}

impl ReconstructionReport {
    pub fn to_table(&self) -> String {
        format!(
            "{:<16} {:>8}\n{:<16} {:>8.4}\n{:<16} {:>8.4}\n{:<16} {:>8.4}\n",
            "threads",
            self.threads,
            "thread_accuracy",
            self.thread_accuracy,
            "edge_accuracy",
            self.edge_accuracy,
            "edge_f1",
            self.edge_f1
        )
    }
}

pub fn reconstruction_metrics(predicted: &[ParentVector], gold: &[ParentVector]) -> Result<ReconstructionReport> {
    if predicted.len() != gold.len() {
        return Err(CoherenceError::ShapeMismatch(format!(
            "{} predictions for {} threads",
            predicted.len(),
            gold.len()
        )));
    }
    let mut exact = 0;
    let mut edge_acc = Vec::new();
    let mut edge_f1 = Vec::new();
    for (p, g) in predicted.iter().zip(gold) {
        if p.0.len() != g.0.len() {
            return Err(CoherenceError::ShapeMismatch(format!(
                "prediction for {} posts against gold for {}",
                p.num_posts(),
                g.num_posts()
            )));
        }
        if p == g {
            exact += 1;
        }
        if g.0.is_empty() {
            continue;
        }
        let pe: HashSet<(usize, u32)> = p.0.iter().copied().enumerate().collect();
        let ge: HashSet<(usize, u32)> = g.0.iter().copied().enumerate().collect();
        let tp = pe.intersection(&ge).count() as f64;
        let prec = tp / pe.len() as f64;
        let rec = tp / ge.len() as f64;
        edge_acc.push(rec);
        edge_f1.push(if tp == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        });
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(ReconstructionReport {
        threads: gold.len(),
        thread_accuracy: ratio(exact, gold.len()),
        edge_accuracy: mean(&edge_acc),
        edge_f1: mean(&edge_f1),
    })
}

/// Linear scorer over transition probabilities, fitted as the mean difference
/// between original and permuted feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRanker {
    pub k: usize,
    pub weights: Vec<f64>,
}

impl TransitionRanker {
    pub fn features(grid: &EntityGrid, k: usize) -> Vec<f64> {
        transition_probabilities(grid, k).unwrap_or_else(|_| vec![0.0; 4usize.pow(k as u32)])
    }

    pub fn fit(pairs: &PairSet, k: usize) -> Result<TransitionRanker> {
        let mut weights = vec![0.0; 4usize.pow(k as u32)];
        let mut count = 0usize;
        for p in &pairs.pairs {
            match (&p.positive, &p.negative) {
                (GridSample::Monologue(a), GridSample::Monologue(b)) => {
                    for (w, (x, y)) in weights
                        .iter_mut()
                        .zip(Self::features(a, k).into_iter().zip(Self::features(b, k)))
                    {
                        *w += x - y;
                    }
                    count += 1;
                }
                _ => {
                    return Err(CoherenceError::SettingMismatch(
                        "transition ranker needs monologue grids".into(),
                    ))
                }
            }
        }
        if count > 0 {
            weights.iter_mut().for_each(|w| *w /= count as f64);
        }
        Ok(TransitionRanker { k, weights })
    }
}

impl Scorer for TransitionRanker {
    fn score_grid(&self, grid: &GridSample) -> Result<f64> {
        match grid {
            GridSample::Monologue(g) => Ok(Self::features(g, self.k)
                .iter()
                .zip(&self.weights)
                .map(|(x, w)| x * w)
                .sum()),
            GridSample::Conversation(_) => Err(CoherenceError::SettingMismatch(
                "transition ranker needs monologue grids".into(),
            )),
        }
    }
}
