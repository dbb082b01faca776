use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_PHONEMES: usize = 39;

/// ARPAbet-style default ordering (alphabetical).
pub const DEFAULT_SYMBOLS: [&str; N_PHONEMES] = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh", "ih", "iy", "jh",
    "k", "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh", "uw", "v", "w", "y", "z", "zh",
];

/// The 39 phoneme classes and their ids `0..39`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() != N_PHONEMES {
            return Err(Error::Config(format!(
                "phoneme inventory needs exactly {N_PHONEMES} symbols, got {}",
                symbols.len()
            )));
        }
        let mut index = HashMap::with_capacity(N_PHONEMES);
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.contains(|c: char| c.is_whitespace() || c == ',') {
                return Err(Error::Config(format!("invalid phoneme symbol '{s}'")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate phoneme symbol '{s}'")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

impl Default for PhonemeInventory {
    fn default() -> Self {
        Self::new(DEFAULT_SYMBOLS.iter().map(|s| s.to_string()).collect()).expect("default inventory is valid")
    }
}

impl TryFrom<Vec<String>> for PhonemeInventory {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PhonemeInventory> for Vec<String> {
    fn from(inv: PhonemeInventory) -> Self {
        inv.symbols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_inventory_is_bijective() {
        let inv = PhonemeInventory::default();
        assert_eq!(inv.len(), 39);
        for id in 0..39 {
            assert_eq!(inv.id(inv.symbol(id).unwrap()), Some(id));
        }
        for s in ["zh", "oy", "sh", "dh", "ng", "l", "n", "m", "ae", "iy"] {
            assert!(inv.id(s).is_some(), "{s}");
        }
    }

    #[test]
    fn rejects_wrong_size_and_duplicates() {
        assert!(PhonemeInventory::new(vec!["a".into()]).is_err());
        let mut v: Vec<String> = DEFAULT_SYMBOLS.iter().map(|s| s.to_string()).collect();
        v[1] = "aa".into();
        assert!(PhonemeInventory::new(v).is_err());
    }
}
