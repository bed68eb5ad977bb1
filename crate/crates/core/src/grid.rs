//! Entity grids for monologue text.
//!
//! A grid has one row per sentence and one column per entity. Each cell holds
//! the grammatical role the entity plays in that sentence, merged by rank
//! (Subject over Object over Other) when the entity is mentioned more than
//! once in the same sentence.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoherenceError, Result};

/// Grammatical role of an entity in a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Subject,
    Object,
    Other,
    Absent,
    /// Only appears in conversational grids, past the end of a path.
    Pad,
}

impl Role {
    /// The four roles a monologue grid can hold, in transition-index order.
    pub const GRID_ROLES: [Role; 4] = [Role::Subject, Role::Object, Role::Other, Role::Absent];

    /// Higher is more salient. Pad ranks below everything.
    pub fn rank(self) -> u8 {
        match self {
            Role::Subject => 4,
            Role::Object => 3,
            Role::Other => 2,
            Role::Absent => 1,
            Role::Pad => 0,
        }
    }

    /// Keeps the higher-ranked of two roles.
    pub fn merge(self, other: Role) -> Role {
        if other.rank() > self.rank() {
            other
        } else {
            self
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Role::Subject => "S",
            Role::Object => "O",
            Role::Other => "X",
            Role::Absent => "-",
            Role::Pad => PAD_SYMBOL,
        }
    }

    /// Position of the role in `GRID_ROLES`; `None` for `Pad`.
    pub fn transition_index(self) -> Option<usize> {
        match self {
            Role::Subject => Some(0),
            Role::Object => Some(1),
            Role::Other => Some(2),
            Role::Absent => Some(3),
            Role::Pad => None,
        }
    }
}

pub const PAD_SYMBOL: &str = "<pad>";

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Role {
    type Err = CoherenceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Role::Subject),
            "O" | "o" => Ok(Role::Object),
            "X" | "x" => Ok(Role::Other),
            "-" => Ok(Role::Absent),
            PAD_SYMBOL => Ok(Role::Pad),
            other => Err(CoherenceError::Parse {
                line: 0,
                message: format!("unknown role {other:?}"),
            }),
        }
    }
}

/// Lowercases and collapses internal whitespace.
pub fn normalize_entity(surface: &str) -> String {
    surface.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// One entity mention with its role. Serialized as `["entity", "S"]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(String, String)", into = "(String, String)")]
pub struct Mention {
    pub entity: String,
    pub role: Role,
}

impl Mention {
    pub fn new(entity: &str, role: Role) -> Self {
        Mention {
            entity: normalize_entity(entity),
            role,
        }
    }
}

impl TryFrom<(String, String)> for Mention {
    type Error = String;

    fn try_from((entity, role): (String, String)) -> std::result::Result<Self, Self::Error> {
        let role: Role = role.parse().map_err(|e: CoherenceError| e.to_string())?;
        if matches!(role, Role::Absent | Role::Pad) {
            return Err(format!("mention role must be S, O or X, got {role}"));
        }
        let entity = normalize_entity(&entity);
        if entity.is_empty() {
            return Err("empty entity surface".to_string());
        }
        Ok(Mention { entity, role })
    }
}

impl From<Mention> for (String, String) {
    fn from(m: Mention) -> Self {
        (m.entity, m.role.symbol().to_string())
    }
}

/// Sentences whose mentions are already role-annotated.
pub type Sentence = Vec<Mention>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub doc_id: String,
    pub sentences: Vec<Sentence>,
}

impl AnnotatedDocument {
    pub fn new(doc_id: impl Into<String>, sentences: Vec<Sentence>) -> Self {
        AnnotatedDocument {
            doc_id: doc_id.into(),
            sentences,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(CoherenceError::EmptyDocument);
        }
        for m in self.sentences.iter().flatten() {
            if m.entity.is_empty() || m.entity != normalize_entity(&m.entity) {
                return Err(CoherenceError::InvalidDocument {
                    doc_id: self.doc_id.clone(),
                    reason: format!("entity {:?} is not normalized", m.entity),
                });
            }
            if matches!(m.role, Role::Absent | Role::Pad) {
                return Err(CoherenceError::InvalidDocument {
                    doc_id: self.doc_id.clone(),
                    reason: format!("mention of {:?} has role {}", m.entity, m.role),
                });
            }
        }
        Ok(())
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }
}

/// Sentence-by-entity matrix of roles, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityGrid {
    entities: Vec<String>,
    num_sentences: usize,
    cells: Vec<Role>,
}

impl EntityGrid {
    /// Builds a grid from raw parts, checking the column invariants.
    pub fn from_parts(entities: Vec<String>, num_sentences: usize, cells: Vec<Role>) -> Result<Self> {
        if cells.len() != entities.len() * num_sentences {
            return Err(CoherenceError::ShapeMismatch(format!(
                "{} cells for {} sentences x {} entities",
                cells.len(),
                num_sentences,
                entities.len()
            )));
        }
        let grid = EntityGrid {
            entities,
            num_sentences,
            cells,
        };
        for j in 0..grid.num_entities() {
            if grid.column(j).all(|r| r == Role::Absent) {
                return Err(CoherenceError::ShapeMismatch(format!(
                    "entity {:?} is never mentioned",
                    grid.entities[j]
                )));
            }
        }
        if grid.cells.contains(&Role::Pad) {
            return Err(CoherenceError::ShapeMismatch(
                "monologue grids cannot contain padding".to_string(),
            ));
        }
        Ok(grid)
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn num_sentences(&self) -> usize {
        self.num_sentences
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn get(&self, sentence: usize, entity: usize) -> Role {
        self.cells[sentence * self.entities.len() + entity]
    }

    pub fn row(&self, sentence: usize) -> &[Role] {
        let j = self.entities.len();
        &self.cells[sentence * j..(sentence + 1) * j]
    }

    pub fn column(&self, entity: usize) -> impl Iterator<Item = Role> + '_ {
        (0..self.num_sentences).map(move |i| self.get(i, entity))
    }

    pub fn column_of(&self, entity: &str) -> Option<Vec<Role>> {
        let j = self.entities.iter().position(|e| e == entity)?;
        Some(self.column(j).collect())
    }

    /// Reorders columns to `order`, which must name every entity exactly once.
    pub fn with_entity_order(&self, order: &[String]) -> Result<EntityGrid> {
        if order.len() != self.entities.len() {
            return Err(CoherenceError::ShapeMismatch(format!(
                "entity order lists {} entities, grid has {}",
                order.len(),
                self.entities.len()
            )));
        }
        let index: HashMap<&str, usize> = self.entities.iter().enumerate().map(|(j, e)| (e.as_str(), j)).collect();
        let mut source = Vec::with_capacity(order.len());
        for name in order {
            match index.get(name.as_str()) {
                Some(&j) if !source.contains(&j) => source.push(j),
                _ => {
                    return Err(CoherenceError::ShapeMismatch(format!(
                        "entity order names unknown or repeated entity {name:?}"
                    )))
                }
            }
        }
        let mut cells = Vec::with_capacity(self.cells.len());
        for i in 0..self.num_sentences {
            cells.extend(source.iter().map(|&j| self.get(i, j)));
        }
        Ok(EntityGrid {
            entities: order.to_vec(),
            num_sentences: self.num_sentences,
            cells,
        })
    }

    /// Tab-separated rendering: entity header, then one row of role symbols
    /// per sentence.
    pub fn to_tsv(&self) -> String {
        let mut out = self.entities.join("\t");
        out.push('\n');
        for i in 0..self.num_sentences {
            let row: Vec<&str> = self.row(i).iter().map(|r| r.symbol()).collect();
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<EntityGrid> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(CoherenceError::Parse {
            line: 1,
            message: "missing entity header".to_string(),
        })?;
        let entities: Vec<String> = header.split('\t').map(str::to_string).collect();
        let mut cells = Vec::new();
        let mut rows = 0;
        for (offset, line) in lines.enumerate() {
            let line_no = offset + 2;
            if line.is_empty() {
                continue;
            }
            let row: Vec<&str> = line.split('\t').collect();
            if row.len() != entities.len() {
                return Err(CoherenceError::Parse {
                    line: line_no,
                    message: format!("expected {} cells, found {}", entities.len(), row.len()),
                });
            }
            for sym in row {
                let role: Role = sym.parse().map_err(|_| CoherenceError::Parse {
                    line: line_no,
                    message: format!("unknown role {sym:?}"),
                })?;
                cells.push(role);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(CoherenceError::EmptyDocument);
        }
        EntityGrid::from_parts(entities, rows, cells)
    }
}

/// Builds the entity grid of a document. Columns follow first-mention order.
pub fn build_grid(doc: &AnnotatedDocument) -> Result<EntityGrid> {
    build_grid_from_sentences(&doc.sentences)
}

pub(crate) fn build_grid_from_sentences<S: AsRef<[Mention]>>(sentences: &[S]) -> Result<EntityGrid> {
    if sentences.is_empty() {
        return Err(CoherenceError::EmptyDocument);
    }
    let mut entities: Vec<String> = Vec::new();
    let mut column: HashMap<&str, usize> = HashMap::new();
    for m in sentences.iter().flat_map(|s| s.as_ref()) {
        if !column.contains_key(m.entity.as_str()) {
            column.insert(&m.entity, entities.len());
            entities.push(m.entity.clone());
        }
    }
    let j = entities.len();
    let mut cells = vec![Role::Absent; sentences.len() * j];
    for (i, sentence) in sentences.iter().enumerate() {
        for m in sentence.as_ref() {
            let cell = &mut cells[i * j + column[m.entity.as_str()]];
            *cell = cell.merge(m.role);
        }
    }
    Ok(EntityGrid {
        entities,
        num_sentences: sentences.len(),
        cells,
    })
}

/// Whether grid cells carry the entity word along with the role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexMode {
    Unlexicalized,
    #[default]
    Lexicalized,
}

impl FromStr for LexMode {
    type Err = CoherenceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unlexicalized" | "unlex" => Ok(LexMode::Unlexicalized),
            "lexicalized" | "lex" => Ok(LexMode::Lexicalized),
            other => Err(CoherenceError::InvalidConfig(format!(
                "unknown lexicalization mode {other:?}"
            ))),
        }
    }
}

/// A grid cell as seen by the embedding layer: `S`, `-`, or `obama-S`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridToken(pub String);

impl GridToken {
    pub fn role(role: Role) -> Self {
        GridToken(role.symbol().to_string())
    }

    pub fn lexical(entity: &str, role: Role) -> Self {
        GridToken(format!("{entity}-{}", role.symbol()))
    }

    /// Produces the token for one cell. Absent and Pad stay bare in both modes.
    pub fn for_cell(entity: &str, role: Role, mode: LexMode) -> Self {
        match (mode, role) {
            (_, Role::Absent | Role::Pad) | (LexMode::Unlexicalized, _) => GridToken::role(role),
            (LexMode::Lexicalized, _) => GridToken::lexical(entity, role),
        }
    }

    /// Splits a lexicalized token at its final hyphen. Bare tags give `None`
    /// for the entity.
    pub fn decompose(&self) -> (Option<&str>, Role) {
        if let Ok(role) = self.0.parse::<Role>() {
            return (None, role);
        }
        match self.0.rsplit_once('-') {
            Some((entity, tag)) if !entity.is_empty() => match tag.parse::<Role>() {
                Ok(role) => (Some(entity), role),
                Err(_) => (Some(self.0.as_str()), Role::Other),
            },
            _ => (Some(self.0.as_str()), Role::Other),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GridToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Token matrix of a grid, one row per sentence.
pub fn lexicalize(grid: &EntityGrid, mode: LexMode) -> Vec<Vec<GridToken>> {
    (0..grid.num_sentences())
        .map(|i| {
            grid.row(i)
                .iter()
                .zip(grid.entities())
                .map(|(&role, entity)| GridToken::for_cell(entity, role, mode))
                .collect()
        })
        .collect()
}

pub(crate) fn check_permutation(perm: &[usize], len: usize) -> Result<()> {
    if perm.len() != len {
        return Err(CoherenceError::InvalidPermutation(format!(
            "length {} does not match {} sentences",
            perm.len(),
            len
        )));
    }
    let mut seen = vec![false; len];
    for &p in perm {
        if p >= len || std::mem::replace(&mut seen[p], true) {
            return Err(CoherenceError::InvalidPermutation(format!(
                "{perm:?} is not a bijection on 0..{len}"
            )));
        }
    }
    Ok(())
}

/// Sentence reordering shared by documents and grids.
pub trait SentenceOrder: Sized {
    fn sentence_count(&self) -> usize;

    /// Row `i` of the result is row `perm[i]` of `self`.
    fn permute_sentences(&self, perm: &[usize]) -> Result<Self>;

    fn inverse_order(&self) -> Self {
        let n = self.sentence_count();
        let rev: Vec<usize> = (0..n).rev().collect();
        self.permute_sentences(&rev).expect("reversal is always a bijection")
    }
}

impl SentenceOrder for AnnotatedDocument {
    fn sentence_count(&self) -> usize {
        self.sentences.len()
    }

    fn permute_sentences(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.sentences.len())?;
        Ok(AnnotatedDocument {
            doc_id: self.doc_id.clone(),
            sentences: perm.iter().map(|&p| self.sentences[p].clone()).collect(),
        })
    }
}

impl SentenceOrder for EntityGrid {
    fn sentence_count(&self) -> usize {
        self.num_sentences
    }

    fn permute_sentences(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_sentences)?;
        let cells = perm.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        Ok(EntityGrid {
            entities: self.entities.clone(),
            num_sentences: self.num_sentences,
            cells,
        })
    }
}

/// Relative frequencies of every length-`k` role sequence over all column
/// windows. Index `sum_t role_t * 4^(k-1-t)` with S=0, O=1, X=2, -=3.
pub fn transition_probabilities(grid: &EntityGrid, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(CoherenceError::InvalidConfig(
            "transition length must be positive".into(),
        ));
    }
    if k > grid.num_sentences() {
        return Err(CoherenceError::GridTooShort {
            k,
            rows: grid.num_sentences(),
        });
    }
    if grid.num_entities() == 0 {
        return Err(CoherenceError::ShapeMismatch("grid has no entities".into()));
    }
    let mut counts = vec![0usize; 4usize.pow(k as u32)];
    for j in 0..grid.num_entities() {
        for start in 0..=grid.num_sentences() - k {
            let idx = (start..start + k).fold(0, |acc, i| {
                acc * 4
                    + grid
                        .get(i, j)
                        .transition_index()
                        .expect("no padding in monologue grids")
            });
            counts[idx] += 1;
        }
    }
    let total = (grid.num_entities() * (grid.num_sentences() - k + 1)) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(sentences: &[&[(&str, Role)]]) -> AnnotatedDocument {
        AnnotatedDocument::new(
            "d",
            sentences
                .iter()
                .map(|s| s.iter().map(|&(e, r)| Mention::new(e, r)).collect())
                .collect(),
        )
    }

    #[test]
    fn rank_merge_keeps_object_over_other() {
        let g = build_grid(&doc(&[&[("paper", Role::Other), ("paper", Role::Object)]])).unwrap();
        assert_eq!(g.get(0, 0), Role::Object);
        let g = build_grid(&doc(&[&[
            ("paper", Role::Object),
            ("paper", Role::Subject),
            ("paper", Role::Other),
        ]]))
        .unwrap();
        assert_eq!(g.get(0, 0), Role::Subject);
    }

    #[test]
    fn minimal_grid() {
        let g = build_grid(&doc(&[&[("e", Role::Subject)]])).unwrap();
        assert_eq!((g.num_sentences(), g.num_entities()), (1, 1));
        assert_eq!(g.get(0, 0), Role::Subject);
    }

    #[test]
    fn empty_document_rejected() {
        let err = build_grid(&AnnotatedDocument::new("x", vec![])).unwrap_err();
        assert_eq!(err.to_string(), "empty document");
    }

    #[test]
    fn normalization_folds_case_and_space() {
        assert_eq!(normalize_entity("  Data \t Processing "), "data processing");
        let m: Mention = serde_json::from_str(r#"["LDI  Corp","S"]"#).unwrap();
        assert_eq!(m.entity, "ldi corp");
        assert!(serde_json::from_str::<Mention>(r#"["x","-"]"#).is_err());
        assert!(serde_json::from_str::<Mention>(r#"["  ","S"]"#).is_err());
    }

    #[test]
    fn tokens() {
        assert_eq!(
            GridToken::for_cell("obama", Role::Subject, LexMode::Lexicalized).as_str(),
            "obama-S"
        );
        assert_eq!(
            GridToken::for_cell("obama", Role::Absent, LexMode::Lexicalized).as_str(),
            "-"
        );
        assert_eq!(
            GridToken::for_cell("obama", Role::Absent, LexMode::Unlexicalized).as_str(),
            "-"
        );
        assert_eq!(
            GridToken::for_cell("registry", Role::Object, LexMode::Unlexicalized).as_str(),
            "O"
        );
        let t = GridToken::lexical("data-process.", Role::Other);
        assert_eq!(t.decompose(), (Some("data-process."), Role::Other));
        assert_eq!(GridToken::role(Role::Absent).decompose(), (None, Role::Absent));
    }

    #[test]
    fn bad_permutations() {
        let g = build_grid(&doc(&[&[("a", Role::Subject)], &[("b", Role::Object)]])).unwrap();
        assert!(g.permute_sentences(&[0, 0]).is_err());
        assert!(g.permute_sentences(&[0]).is_err());
        assert!(g.permute_sentences(&[0, 2]).is_err());
    }

    #[test]
    fn transition_single_window() {
        let g = build_grid(&doc(&[&[("e", Role::Subject)], &[("e", Role::Object)]])).unwrap();
        let p = transition_probabilities(&g, 2).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p[1], 1.0);
        assert_eq!(p.iter().sum::<f64>(), 1.0);
        assert!(matches!(
            transition_probabilities(&g, 3),
            Err(CoherenceError::GridTooShort { k: 3, rows: 2 })
        ));
    }

    #[test]
    fn tsv_rejects_ragged_rows() {
        let err = EntityGrid::from_tsv("a\tb\nS\t-\nO\n").unwrap_err();
        assert!(matches!(err, CoherenceError::Parse { line: 3, .. }));
        assert!(EntityGrid::from_tsv("a\n-\n").is_err());
    }
}
