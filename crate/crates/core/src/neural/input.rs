//! Turning grids into the 2D token layouts the convolution runs over.
//!
//! Monologue grids are flattened entity by entity into one column of height
//! `sentences * entities`. Conversational grids stack the depth x paths matrix
//! of each entity on top of each other, giving `(entities * depth) x paths`.

use serde::{Deserialize, Serialize};

use crate::conversation::ConvGrid3D;
use crate::grid::{EntityGrid, GridToken, LexMode, Role};

/// A grid in either representation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridSample {
    Monologue(EntityGrid),
    Conversation(ConvGrid3D),
}

impl GridSample {
    pub fn is_conversation(&self) -> bool {
        matches!(self, GridSample::Conversation(_))
    }

    pub fn stack(&self, mode: LexMode) -> TokenMatrix {
        match self {
            GridSample::Monologue(g) => stack_monologue(g, mode),
            GridSample::Conversation(g) => stack_conversation(g, mode),
        }
    }
}

/// Row-major token layout; `None` marks padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMatrix {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<Option<GridToken>>,
}

impl TokenMatrix {
    pub fn get(&self, row: usize, col: usize) -> Option<&GridToken> {
        self.tokens[row * self.width + col].as_ref()
    }
}

pub fn stack_monologue(grid: &EntityGrid, mode: LexMode) -> TokenMatrix {
    let (rows, cols) = (grid.num_sentences(), grid.num_entities());
    let mut tokens = Vec::with_capacity(rows * cols);
    for (j, entity) in grid.entities().iter().enumerate() {
        for i in 0..rows {
            tokens.push(Some(GridToken::for_cell(entity, grid.get(i, j), mode)));
        }
    }
    TokenMatrix {
        height: rows * cols,
        width: 1,
        tokens,
    }
}

pub fn stack_conversation(grid: &ConvGrid3D, mode: LexMode) -> TokenMatrix {
    let (depth, paths) = (grid.depth(), grid.num_paths());
    let mut tokens = Vec::with_capacity(grid.num_entities() * depth * paths);
    for (e, entity) in grid.entities().iter().enumerate() {
        for j in 0..depth {
            for p in 0..paths {
                tokens.push(match grid.get(e, j, p) {
                    Role::Pad => None,
                    role => Some(GridToken::for_cell(entity, role, mode)),
                });
            }
        }
    }
    TokenMatrix {
        height: grid.num_entities() * depth,
        width: paths,
        tokens,
    }
}
