//! Seeded synthetic corpora. Each entity's role follows a sticky Markov chain
//! over S, O, X and absent, so original orderings have measurably lower
//! role-transition entropy than shuffled ones. In threads the chain runs down
//! the reply tree, and replies introduce topic entities of their own.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conversation::{Post, Thread};
use crate::error::{CoherenceError, Result};
use crate::grid::{AnnotatedDocument, EntityGrid, Mention, Role, Sentence};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Probability that an entity keeps its role from one sentence to the next.
    pub stickiness: f64,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub entities_per_doc: usize,
    pub min_posts: usize,
    pub max_posts: usize,
    pub max_sentences_per_post: usize,
    /// Entities shared by the whole thread.
    pub thread_entities: usize,
    /// Chance that a reply introduces an entity confined to its subtree.
    pub topic_probability: f64,
    /// Number of distinct entity names to draw from.
    pub lexicon_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            stickiness: 0.7,
            min_sentences: 6,
            max_sentences: 12,
            entities_per_doc: 6,
            min_posts: 4,
            max_posts: 7,
            max_sentences_per_post: 2,
            thread_entities: 3,
            topic_probability: 0.8,
            lexicon_size: 60,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoherenceError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.stickiness) || !(0.0..=1.0).contains(&self.topic_probability) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return bad("need 1 <= min_sentences <= max_sentences");
        }
        if self.min_posts == 0 || self.min_posts > self.max_posts || self.max_sentences_per_post == 0 {
            return bad("need 1 <= min_posts <= max_posts and max_sentences_per_post >= 1");
        }
        if self.lexicon_size < self.entities_per_doc.max(self.thread_entities) || self.lexicon_size == 0 {
            return bad("lexicon too small for the requested entities");
        }
        Ok(())
    }
}

fn step<R: Rng>(role: Role, stickiness: f64, rng: &mut R) -> Role {
    if rng.gen::<f64>() < stickiness {
        return role;
    }
    let others: Vec<Role> = Role::GRID_ROLES.iter().copied().filter(|&r| r != role).collect();
    others[rng.gen_range(0..others.len())]
}

fn initial<R: Rng>(rng: &mut R) -> Role {
    Role::GRID_ROLES[rng.gen_range(0..4)]
}

fn entity_name(i: usize) -> String {
    format!("ent{i:03}")
}

fn pick_entities<R: Rng>(count: usize, lexicon: usize, rng: &mut R) -> Vec<String> {
    rand::seq::index::sample(rng, lexicon, count)
        .into_iter()
        .map(entity_name)
        .collect()
}

fn sentence_of(entities: &[String], roles: &[Role]) -> Sentence {
    entities
        .iter()
        .zip(roles)
        .filter(|(_, r)| !matches!(r, Role::Absent | Role::Pad))
        .map(|(e, &r)| Mention::new(e, r))
        .collect()
}

pub fn synth_documents(count: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<AnnotatedDocument>> {
    cfg.validate()?;
    Ok((0..count)
        .map(|i| {
            let mut r = rng::item_stream(seed, "synth-doc", i as u64);
            let n = r.gen_range(cfg.min_sentences..=cfg.max_sentences);
            let entities = pick_entities(cfg.entities_per_doc, cfg.lexicon_size, &mut r);
            let mut roles: Vec<Role> = entities.iter().map(|_| initial(&mut r)).collect();
            let mut sentences = Vec::with_capacity(n);
            for s in 0..n {
                if s > 0 {
                    for role in roles.iter_mut() {
                        *role = step(*role, cfg.stickiness, &mut r);
                    }
                }
                sentences.push(sentence_of(&entities, &roles));
            }
            AnnotatedDocument::new(format!("synth-doc-{i}"), sentences)
        })
        .collect())
}

pub fn synth_threads(count: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Thread>> {
    cfg.validate()?;
    Ok((0..count)
        .map(|i| {
            let mut r = rng::item_stream(seed, "synth-thread", i as u64);
            let n_posts = r.gen_range(cfg.min_posts..=cfg.max_posts);
            let mut entities = pick_entities(cfg.thread_entities, cfg.lexicon_size, &mut r);
            // role of every entity at the last sentence of each post
            let mut last: Vec<Vec<Role>> = Vec::with_capacity(n_posts);
            let mut raw_posts: Vec<(Option<u32>, Vec<Vec<Role>>)> = Vec::with_capacity(n_posts);
            for p in 0..n_posts {
                let parent = if p == 0 { None } else { Some(r.gen_range(1..=p as u32)) };
                let mut roles = match parent {
                    None => entities.iter().map(|_| initial(&mut r)).collect::<Vec<_>>(),
                    Some(q) => last[q as usize - 1].clone(),
                };
                // entities introduced in other branches stay out of scope
                roles.resize(entities.len(), Role::Pad);
                let introduced = parent.is_some() && r.gen::<f64>() < cfg.topic_probability;
                if introduced {
                    let name = loop {
                        let cand = entity_name(r.gen_range(0..cfg.lexicon_size));
                        if !entities.contains(&cand) {
                            break cand;
                        }
                        if entities.len() >= cfg.lexicon_size {
                            break format!("topic{i}_{p}");
                        }
                    };
                    entities.push(name);
                    roles.push(if r.gen::<bool>() { Role::Subject } else { Role::Object });
                }
                let k = r.gen_range(1..=cfg.max_sentences_per_post);
                let mut rows = Vec::with_capacity(k);
                for s in 0..k {
                    if s > 0 || parent.is_some() {
                        for (e, role) in roles.iter_mut().enumerate() {
                            if *role != Role::Pad && !(introduced && s == 0 && e + 1 == entities.len()) {
                                *role = step(*role, cfg.stickiness, &mut r);
                            }
                        }
                    }
                    rows.push(roles.clone());
                }
                last.push(roles);
                raw_posts.push((parent, rows));
            }
            let posts = raw_posts
                .into_iter()
                .enumerate()
                .map(|(p, (parent, rows))| Post {
                    id: p as u32 + 1,
                    parent,
                    sentences: rows
                        .iter()
                        .map(|roles| sentence_of(&entities[..roles.len()], roles))
                        .collect(),
                })
                .collect();
            Thread {
                thread_id: format!("synth-thread-{i}"),
                posts,
            }
        })
        .collect())
}

/// Conditional entropy in bits of an entity's next role given its current
/// role, pooled over every column of every grid.
pub fn transition_entropy<'a>(grids: impl IntoIterator<Item = &'a EntityGrid>) -> f64 {
    let mut counts: HashMap<(Role, Role), f64> = HashMap::new();
    for g in grids {
        for e in 0..g.num_entities() {
            let col: Vec<Role> = g.column(e).collect();
            for w in col.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0.0) += 1.0;
            }
        }
    }
    let total: f64 = counts.values().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut from: HashMap<Role, f64> = HashMap::new();
    for (&(a, _), &c) in &counts {
        *from.entry(a).or_insert(0.0) += c;
    }
    counts
        .iter()
        .map(|(&(a, _), &c)| -(c / total) * (c / from[&a]).log2())
        .sum()
}
