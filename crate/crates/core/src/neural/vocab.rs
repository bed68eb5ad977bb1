use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::grid::{GridToken, LexMode, Role, PAD_SYMBOL};

pub const PAD_ID: u32 = 0;

/// Token vocabulary. Index 0 is reserved for padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Role-specific stand-in for a lexicalized token never seen in training.
pub fn unk_token(role: Role) -> String {
    format!("UNK-{}", role.symbol())
}

impl Vocab {
    /// Builds a vocabulary over `tokens`. Bare role tags are always present;
    /// lexicalized vocabularies also carry the three UNK tokens.
    pub fn build<'a>(mode: LexMode, tokens: impl IntoIterator<Item = &'a GridToken>) -> Vocab {
        let mut set: BTreeSet<String> = BTreeSet::new();
        set.insert(Role::Absent.symbol().to_string());
        match mode {
            LexMode::Unlexicalized => {
                for r in [Role::Subject, Role::Object, Role::Other] {
                    set.insert(r.symbol().to_string());
                }
            }
            LexMode::Lexicalized => {
                for r in [Role::Subject, Role::Object, Role::Other] {
                    set.insert(unk_token(r));
                }
            }
        }
        set.extend(tokens.into_iter().map(|t| t.0.clone()));
        set.remove(PAD_SYMBOL);
        let mut list = vec![PAD_SYMBOL.to_string()];
        list.extend(set);
        Vocab::from(list)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Maps a cell token to its id; unseen lexicalized tokens go to the UNK
    /// of their role, and `None` is padding.
    pub fn id(&self, token: Option<&GridToken>) -> u32 {
        let Some(token) = token else { return PAD_ID };
        if let Some(id) = self.get(token.as_str()) {
            return id;
        }
        let (_, role) = token.decompose();
        match role {
            Role::Pad => PAD_ID,
            Role::Absent => self.get(Role::Absent.symbol()).unwrap_or(PAD_ID),
            r => self
                .get(&unk_token(r))
                .or_else(|| self.get(r.symbol()))
                .unwrap_or(PAD_ID),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_is_zero_and_unk_keeps_role() {
        let toks = [
            GridToken::lexical("obama", Role::Subject),
            GridToken::role(Role::Absent),
        ];
        let v = Vocab::build(LexMode::Lexicalized, toks.iter());
        assert_eq!(v.token(PAD_ID), PAD_SYMBOL);
        assert_eq!(v.id(None), PAD_ID);
        assert_eq!(v.token(v.id(Some(&toks[0]))), "obama-S");
        let unseen = GridToken::lexical("clinton", Role::Object);
        assert_eq!(v.token(v.id(Some(&unseen))), "UNK-O");
        let round: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(round, v);
    }

    #[test]
    fn unlexicalized_has_five_entries() {
        let v = Vocab::build(LexMode::Unlexicalized, []);
        assert_eq!(v.len(), 5);
    }
}
