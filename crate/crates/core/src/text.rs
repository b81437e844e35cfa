//! Vocabulary, special tokens and transcripts.
//!
//! Ids 0..5 are always the special tokens in the order PAD, UNK, CLS, SEP,
//! MASK. Every ordinary symbol carries a syllable class (its pronunciation);
//! homophones share a class. Specials all map to the reserved class 0.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;

/// Syllable class shared by every special token.
pub const SPECIAL_CLASS: usize = 0;

pub const SPECIAL_SYMBOLS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["pad", "unk", "cls", "sep", "mask"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    syllable_class: Vec<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from its ordinary symbols (ids assigned in order
    /// after the specials) and their syllable classes (`>= 1`).
    pub fn from_parts(symbols: Vec<String>, classes: Vec<usize>) -> Result<Self> {
        if symbols.len() != classes.len() {
            return Err(Error::Vocabulary(format!(
                "{} symbols but {} syllable classes",
                symbols.len(),
                classes.len()
            )));
        }
        let mut all: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
        let mut syllable_class = vec![SPECIAL_CLASS; NUM_SPECIALS];
        for (sym, class) in symbols.into_iter().zip(classes) {
            if class == SPECIAL_CLASS {
                return Err(Error::Vocabulary(format!(
                    "symbol {sym:?} uses the reserved syllable class {SPECIAL_CLASS}"
                )));
            }
            all.push(sym);
            syllable_class.push(class);
        }
        let mut index = HashMap::with_capacity(all.len());
        for (id, sym) in all.iter().enumerate() {
            if index.insert(sym.clone(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate symbol {sym:?}")));
            }
        }
        Ok(Vocabulary {
            symbols: all,
            index,
            syllable_class,
        })
    }

    /// Total size including the special tokens.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// Ids of the ordinary (decodable) tokens.
    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        NUM_SPECIALS..self.len()
    }

    pub fn syllable_class(&self, id: usize) -> usize {
        self.syllable_class[id]
    }

    /// Number of distinct syllable classes among ordinary tokens.
    pub fn num_syllable_classes(&self) -> usize {
        let mut classes: Vec<usize> = self.syllable_class[NUM_SPECIALS..].to_vec();
        classes.sort_unstable();
        classes.dedup();
        classes.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = VocabularyDoc {
            symbols: self.symbols.clone(),
            specials: SPECIAL_NAMES
                .iter()
                .enumerate()
                .map(|(id, name)| (name.to_string(), id))
                .collect(),
            syllable_classes: self
                .symbols
                .iter()
                .zip(&self.syllable_class)
                .map(|(s, &c)| (s.clone(), c))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: VocabularyDoc = serde_json::from_str(json)?;
        for (id, name) in SPECIAL_NAMES.iter().enumerate() {
            if doc.specials.get(*name) != Some(&id)
                || doc.symbols.get(id).map(String::as_str) != Some(SPECIAL_SYMBOLS[id])
            {
                return Err(Error::Vocabulary(format!("special token {name} must have id {id}")));
            }
        }
        let ordinary = doc.symbols[NUM_SPECIALS..].to_vec();
        let classes = ordinary
            .iter()
            .map(|s| {
                doc.syllable_classes
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Vocabulary(format!("no syllable class for {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Vocabulary::from_parts(ordinary, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyDoc {
    symbols: Vec<String>,
    specials: BTreeMap<String, usize>,
    syllable_classes: BTreeMap<String, usize>,
}

/// Collects every symbol of `corpus` in first-appearance order.
///
/// With `homophone_groups`, each group becomes one syllable class (in group
/// order); symbols outside every group get a class of their own.
pub fn build_vocabulary<I, S>(corpus: I, homophone_groups: Option<&[Vec<String>]>) -> Result<Vocabulary>
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut symbols: Vec<String> = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for sentence in corpus {
        for sym in sentence {
            let sym = sym.as_ref();
            if SPECIAL_SYMBOLS.contains(&sym) {
                return Err(Error::Vocabulary(format!(
                    "corpus symbol {sym:?} collides with a special token"
                )));
            }
            if seen.insert(sym.to_string(), ()).is_none() {
                symbols.push(sym.to_string());
            }
        }
    }
    if symbols.is_empty() {
        return Err(Error::Vocabulary("empty corpus".into()));
    }

    let mut class_of: HashMap<&str, usize> = HashMap::new();
    let mut next_class = SPECIAL_CLASS + 1;
    for group in homophone_groups.unwrap_or(&[]) {
        for sym in group {
            if !seen.contains_key(sym) {
                return Err(Error::UnknownSymbol(sym.clone()));
            }
            if class_of.insert(sym, next_class).is_some() {
                return Err(Error::Vocabulary(format!(
                    "symbol {sym:?} appears in more than one homophone group"
                )));
            }
        }
        if !group.is_empty() {
            next_class += 1;
        }
    }
    let classes = symbols
        .iter()
        .map(|s| {
            *class_of.entry(s.as_str()).or_insert_with(|| {
                next_class += 1;
                next_class - 1
            })
        })
        .collect();
    Vocabulary::from_parts(symbols, classes)
}

/// Token ids of one utterance, never containing PAD/CLS/SEP/MASK.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Transcript {
    pub token_ids: Vec<usize>,
}

impl Transcript {
    pub fn new(token_ids: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = token_ids.iter().find(|&&id| id < NUM_SPECIALS && id != UNK) {
            return Err(Error::Vocabulary(format!("transcript contains special token id {bad}")));
        }
        Ok(Transcript { token_ids })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Unknown symbols (including the special-token strings) become UNK.
pub fn encode<S: AsRef<str>>(text: &[S], vocab: &Vocabulary) -> Transcript {
    let token_ids = text
        .iter()
        .map(|s| match vocab.id(s.as_ref()) {
            Some(id) if !Vocabulary::is_special(id) => id,
            _ => UNK,
        })
        .collect();
    Transcript { token_ids }
}

pub fn decode(t: &Transcript, vocab: &Vocabulary) -> Vec<String> {
    t.token_ids
        .iter()
        .map(|&id| vocab.symbol(id).unwrap_or(SPECIAL_SYMBOLS[UNK]).to_string())
        .collect()
}

pub fn to_syllables(t: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    t.iter().map(|&id| vocab.syllable_class(id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<String> {
        s.chars().map(|c| c.to_string()).collect()
    }

    #[test]
    fn identity_grouping() {
        let v = build_vocabulary([chars("ab"), chars("ba")], None).unwrap();
        assert_eq!(v.len(), 2 + NUM_SPECIALS);
        assert_eq!(v.num_syllable_classes(), 2);
        assert_ne!(
            v.syllable_class(v.id("a").unwrap()),
            v.syllable_class(v.id("b").unwrap())
        );
    }

    #[test]
    fn single_group_shares_class() {
        let groups = vec![vec!["a".to_string(), "b".to_string()]];
        let v = build_vocabulary([chars("ab")], Some(&groups)).unwrap();
        assert_eq!(
            v.syllable_class(v.id("a").unwrap()),
            v.syllable_class(v.id("b").unwrap())
        );
        assert_eq!(v.num_syllable_classes(), 1);
    }

    #[test]
    fn fifty_symbols_ten_groups() {
        let syms: Vec<String> = (0..50).map(|i| format!("s{i}")).collect();
        let groups: Vec<Vec<String>> = syms.chunks(5).map(|c| c.to_vec()).collect();
        let v = build_vocabulary([syms.clone()], Some(&groups)).unwrap();
        assert_eq!(v.num_syllable_classes(), 10);
    }

    #[test]
    fn unknown_group_symbol_is_named() {
        let groups = vec![vec!["a".to_string(), "z".to_string()]];
        let err = build_vocabulary([chars("ab")], Some(&groups)).unwrap_err();
        assert!(matches!(err, Error::UnknownSymbol(ref s) if s == "z"));
    }

    #[test]
    fn specials_fixed_ids() {
        let v = build_vocabulary([chars("xy")], None).unwrap();
        for (id, sym) in SPECIAL_SYMBOLS.iter().enumerate() {
            assert_eq!(v.id(sym), Some(id));
            assert_eq!(v.syllable_class(id), SPECIAL_CLASS);
        }
    }

    #[test]
    fn encode_lookup_and_unk() {
        let v = build_vocabulary([chars("ab")], None).unwrap();
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        assert_eq!(encode(&["a", "b"], &v).token_ids, vec![a, b]);
        assert_eq!(encode(&["a", "?"], &v).token_ids, vec![a, UNK]);
        assert_eq!(encode(&["[CLS]"], &v).token_ids, vec![UNK]);
        assert!(encode::<&str>(&[], &v).is_empty());
    }

    #[test]
    fn syllables_follow_classes() {
        let groups = vec![vec!["a".to_string(), "b".to_string()]];
        let merged = build_vocabulary([chars("ab")], Some(&groups)).unwrap();
        let t = encode(&["a", "b"], &merged);
        assert_eq!(to_syllables(&t.token_ids, &merged), vec![1, 1]);

        let ident = build_vocabulary([chars("ab")], None).unwrap();
        let t = encode(&["a", "b"], &ident);
        assert_eq!(to_syllables(&t.token_ids, &ident), vec![1, 2]);
    }

    #[test]
    fn json_round_trip() {
        let groups = vec![vec!["a".to_string(), "c".to_string()]];
        let v = build_vocabulary([chars("abc")], Some(&groups)).unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn transcript_rejects_specials() {
        assert!(Transcript::new(vec![CLS, 7]).is_err());
        assert!(Transcript::new(vec![UNK, 7]).is_ok());
    }

    #[test]
    fn decode_inverts_encode() {
        let v = build_vocabulary([chars("hello")], None).unwrap();
        let text = chars("hole");
        assert_eq!(decode(&encode(&text, &v), &v), text);
    }
}
