//! Asynchronous conversations: reply trees over posts, the sentence-level
//! graph derived from them, root-to-leaf paths, and the 3D entity grid
//! (entities x depth x paths).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{CoherenceError, Result};
use crate::grid::{build_grid_from_sentences, check_permutation, EntityGrid, Mention, Role, Sentence};

/// Largest thread size `enumerate_valid_trees` accepts unless told otherwise.
pub const DEFAULT_ENUMERATION_CAP: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: u32,
    /// Accepts `null`, an id, or a list of ids; a list keeps its earliest id.
    #[serde(deserialize_with = "earliest_parent")]
    pub parent: Option<u32>,
    pub sentences: Vec<Sentence>,
}

fn earliest_parent<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Option<u32>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Parent {
        One(u32),
        Many(Vec<u32>),
    }
    Ok(match Option::<Parent>::deserialize(de)? {
        None => None,
        Some(Parent::One(p)) => Some(p),
        Some(Parent::Many(ps)) => ps.into_iter().min(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thread {
    pub thread_id: String,
    pub posts: Vec<Post>,
}

/// Parent of each post `2..=n`, 1-based: entry `k - 2` is the parent of post `k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParentVector(pub Vec<u32>);

impl ParentVector {
    pub fn parent_of(&self, post: u32) -> Option<u32> {
        if post < 2 {
            return None;
        }
        self.0.get(post as usize - 2).copied()
    }

    pub fn num_posts(&self) -> usize {
        self.0.len() + 1
    }

    pub fn is_chronological(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| p >= 1 && (p as usize) < i + 2)
    }
}

impl fmt::Display for ParentVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let edges: Vec<String> = self
            .0
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}->{}", i + 2, p))
            .collect();
        write!(f, "{{{}}}", edges.join(", "))
    }
}

impl Thread {
    pub fn validate(&self) -> Result<()> {
        if self.posts.is_empty() {
            return Err(CoherenceError::InvalidReplyStructure(format!(
                "thread {} has no posts",
                self.thread_id
            )));
        }
        for (k, post) in self.posts.iter().enumerate() {
            let expected = k as u32 + 1;
            if post.id != expected {
                return Err(CoherenceError::InvalidReplyStructure(format!(
                    "thread {}: post {} found where post {} was expected",
                    self.thread_id, post.id, expected
                )));
            }
            match (k, post.parent) {
                (0, None) => {}
                (0, Some(p)) => {
                    return Err(CoherenceError::InvalidReplyStructure(format!(
                        "thread {}: first post replies to {}",
                        self.thread_id, p
                    )))
                }
                (_, Some(p)) if p >= 1 && p < post.id => {}
                (_, p) => {
                    return Err(CoherenceError::InvalidReplyStructure(format!(
                        "thread {}: post {} has parent {:?}",
                        self.thread_id, post.id, p
                    )))
                }
            }
            if post.sentences.is_empty() {
                return Err(CoherenceError::InvalidReplyStructure(format!(
                    "thread {}: post {} has no sentences",
                    self.thread_id, post.id
                )));
            }
        }
        Ok(())
    }

    pub fn num_posts(&self) -> usize {
        self.posts.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.posts.iter().map(|p| p.sentences.len()).sum()
    }

    pub fn parent_vector(&self) -> ParentVector {
        ParentVector(self.posts.iter().skip(1).map(|p| p.parent.unwrap_or(0)).collect())
    }

    /// Same posts and sentences, different reply structure.
    pub fn with_parents(&self, parents: &ParentVector) -> Result<Thread> {
        if parents.num_posts() != self.posts.len() {
            return Err(CoherenceError::ShapeMismatch(format!(
                "parent vector covers {} posts, thread has {}",
                parents.num_posts(),
                self.posts.len()
            )));
        }
        let mut out = self.clone();
        for post in out.posts.iter_mut().skip(1) {
            post.parent = parents.parent_of(post.id);
        }
        out.validate()?;
        Ok(out)
    }

    /// All sentences in chronological (post) order.
    pub fn temporal_sentences(&self) -> Vec<&Sentence> {
        self.posts.iter().flat_map(|p| p.sentences.iter()).collect()
    }

    /// The conversation read as a monologue.
    pub fn temporal_grid(&self) -> Result<EntityGrid> {
        build_grid_from_sentences(&self.temporal_sentences())
    }

    /// One monologue grid per root-to-leaf path, in path order.
    pub fn path_grids(&self) -> Result<Vec<EntityGrid>> {
        let graph = build_sentence_graph(self)?;
        let sentences = self.temporal_sentences();
        extract_paths(&graph)
            .iter()
            .map(|path| {
                let seq: Vec<&Sentence> = path.0.iter().map(|&s| sentences[s]).collect();
                build_grid_from_sentences(&seq)
            })
            .collect()
    }
}

/// Sentence-level reply graph. Nodes are global sentence indices in post order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceGraph {
    parents: Vec<Option<usize>>,
    post_of: Vec<u32>,
}

impl SentenceGraph {
    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, sentence: usize) -> Option<usize> {
        self.parents[sentence]
    }

    pub fn post_of(&self, sentence: usize) -> u32 {
        self.post_of[sentence]
    }

    /// Child-to-parent sentence links.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents.iter().enumerate().filter_map(|(s, p)| p.map(|p| (s, p)))
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.len()];
        for (_, p) in self.edges() {
            has_child[p] = true;
        }
        (0..self.len()).filter(|&s| !has_child[s]).collect()
    }
}

/// Links sentences within a post in order, and the first sentence of each
/// reply to the last sentence of the post it replies to.
pub fn build_sentence_graph(thread: &Thread) -> Result<SentenceGraph> {
    thread.validate()?;
    let mut first = Vec::with_capacity(thread.posts.len());
    let mut last = Vec::with_capacity(thread.posts.len());
    let mut parents = Vec::new();
    let mut post_of = Vec::new();
    for post in &thread.posts {
        let start = parents.len();
        first.push(start);
        for offset in 0..post.sentences.len() {
            let parent = if offset > 0 {
                Some(start + offset - 1)
            } else {
                post.parent.map(|p| last[p as usize - 1])
            };
            parents.push(parent);
            post_of.push(post.id);
        }
        last.push(parents.len() - 1);
    }
    Ok(SentenceGraph { parents, post_of })
}

/// Sentence indices from the root sentence down to one leaf.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvPath(pub Vec<usize>);

impl ConvPath {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Root-to-leaf paths, ordered by the id of the leaf's post.
pub fn extract_paths(graph: &SentenceGraph) -> Vec<ConvPath> {
    let mut leaves = graph.leaves();
    leaves.sort_by_key(|&s| (graph.post_of(s), s));
    leaves
        .into_iter()
        .map(|leaf| {
            let mut path = vec![leaf];
            let mut cur = leaf;
            while let Some(p) = graph.parent(cur) {
                path.push(p);
                cur = p;
            }
            path.reverse();
            ConvPath(path)
        })
        .collect()
}

/// Entities x depth x paths grid of roles; cells past the end of a path are `Pad`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGrid3D {
    entities: Vec<String>,
    depth: usize,
    paths: usize,
    cells: Vec<Role>,
}

impl ConvGrid3D {
    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_paths(&self) -> usize {
        self.paths
    }

    pub fn get(&self, entity: usize, level: usize, path: usize) -> Role {
        self.cells[(entity * self.depth + level) * self.paths + path]
    }

    /// The depth x paths matrix of one entity, row-major.
    pub fn entity_matrix(&self, entity: &str) -> Option<Vec<Vec<Role>>> {
        let e = self.entities.iter().position(|x| x == entity)?;
        Some(
            (0..self.depth)
                .map(|j| (0..self.paths).map(|p| self.get(e, j, p)).collect())
                .collect(),
        )
    }

    /// Column `path` of an entity with padding stripped.
    pub fn path_column(&self, entity: usize, path: usize) -> Vec<Role> {
        (0..self.depth)
            .map(|j| self.get(entity, j, path))
            .take_while(|&r| r != Role::Pad)
            .collect()
    }
}

pub fn build_conv_grid(thread: &Thread) -> Result<ConvGrid3D> {
    let graph = build_sentence_graph(thread)?;
    let paths = extract_paths(&graph);
    let sentences = thread.temporal_sentences();

    let mut entities: Vec<String> = Vec::new();
    let mut column: HashMap<&str, usize> = HashMap::new();
    for m in sentences.iter().flat_map(|s| s.iter()) {
        if !column.contains_key(m.entity.as_str()) {
            column.insert(&m.entity, entities.len());
            entities.push(m.entity.clone());
        }
    }

    // role of each entity in each sentence
    let n_ent = entities.len();
    let mut roles = vec![Role::Absent; sentences.len() * n_ent];
    for (s, sentence) in sentences.iter().enumerate() {
        for Mention { entity, role } in sentence.iter() {
            let cell = &mut roles[s * n_ent + column[entity.as_str()]];
            *cell = cell.merge(*role);
        }
    }

    let depth = paths.iter().map(ConvPath::len).max().unwrap_or(0);
    let n_paths = paths.len();
    let mut cells = vec![Role::Pad; n_ent * depth * n_paths];
    for (p, path) in paths.iter().enumerate() {
        for (j, &s) in path.0.iter().enumerate() {
            for e in 0..n_ent {
                cells[(e * depth + j) * n_paths + p] = roles[s * n_ent + e];
            }
        }
    }
    Ok(ConvGrid3D {
        entities,
        depth,
        paths: n_paths,
        cells,
    })
}

/// Every reply structure where each post answers an earlier one, in
/// lexicographic order of the parent vector. There are `(n - 1)!` of them.
pub fn enumerate_valid_trees(n: usize, cap: usize) -> Result<Vec<ParentVector>> {
    if n > cap {
        return Err(CoherenceError::EnumerationTooLarge { n, cap });
    }
    if n == 0 {
        return Err(CoherenceError::InvalidReplyStructure(
            "a thread needs at least one post".into(),
        ));
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n - 1);
    fn extend(post: u32, n: u32, current: &mut Vec<u32>, out: &mut Vec<ParentVector>) {
        if post > n {
            out.push(ParentVector(current.clone()));
            return;
        }
        for parent in 1..post {
            current.push(parent);
            extend(post + 1, n, current, out);
            current.pop();
        }
    }
    extend(2, n as u32, &mut current, &mut out);
    Ok(out)
}

/// Redistributes a global sentence permutation into the original post slots:
/// slot `i` of the chronological sentence sequence receives sentence `perm[i]`.
/// The reply tree and per-post sentence counts are unchanged.
pub fn permute_thread(thread: &Thread, perm: &[usize]) -> Result<Thread> {
    let sentences: Vec<Sentence> = thread.temporal_sentences().into_iter().cloned().collect();
    check_permutation(perm, sentences.len())?;
    let mut reordered = perm.iter().map(|&p| sentences[p].clone());
    let mut out = thread.clone();
    for post in out.posts.iter_mut() {
        for slot in post.sentences.iter_mut() {
            *slot = reordered.next().expect("permutation covers every slot");
        }
    }
    Ok(out)
}
