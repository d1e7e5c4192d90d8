//! Caption variants by vocabulary substitution.
//!
//! Each vocabulary slot is a list of interchangeable words; element 0 is the word
//! looked up in the caption. A caption activates the slots whose trigger word it
//! contains, and variant `j` is decoded as a mixed-radix number over the active
//! slots, first active slot least significant. Digit 0 keeps the original word,
//! so `j = 0` is always the unchanged caption.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<String>>", into = "Vec<Vec<String>>")]
pub struct Vocabulary {
    slots: Vec<Vec<String>>,
}

impl Vocabulary {
    pub fn new(slots: Vec<Vec<String>>) -> Result<Self> {
        let mut triggers = BTreeSet::new();
        for (i, slot) in slots.iter().enumerate() {
            if slot.is_empty() {
                return Err(Error::Vocabulary(format!("slot {i} is empty")));
            }
            let mut seen = BTreeSet::new();
            for word in slot {
                if word.is_empty() || !word.chars().all(char::is_alphanumeric) {
                    return Err(Error::Vocabulary(format!("slot {i}: {word:?} is not a single word")));
                }
                if !seen.insert(word.to_lowercase()) {
                    return Err(Error::Vocabulary(format!("slot {i}: {word:?} listed twice")));
                }
            }
            if !triggers.insert(slot[0].to_lowercase()) {
                return Err(Error::Vocabulary(format!("trigger word {:?} used by two slots", slot[0])));
            }
        }
        Ok(Vocabulary { slots })
    }

    pub fn from_words(slots: &[&[&str]]) -> Result<Self> {
        Vocabulary::new(slots.iter().map(|s| s.iter().map(|w| w.to_string()).collect()).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn slots(&self) -> &[Vec<String>] {
        &self.slots
    }
}

impl TryFrom<Vec<Vec<String>>> for Vocabulary {
    type Error = Error;

    fn try_from(slots: Vec<Vec<String>>) -> Result<Self> {
        Vocabulary::new(slots)
    }
}

impl From<Vocabulary> for Vec<Vec<String>> {
    fn from(v: Vocabulary) -> Self {
        v.slots
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionVariant {
    pub source_caption: String,
    pub variant_index: usize,
    pub text: String,
}

/// A caption split into alternating separator and word pieces.
struct Tokens<'a> {
    pieces: Vec<(&'a str, bool)>,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut in_word = false;
        for (i, c) in text.char_indices() {
            let is_word = c.is_alphanumeric();
            if i > start && is_word != in_word {
                pieces.push((&text[start..i], in_word));
                start = i;
            }
            in_word = is_word;
        }
        if start < text.len() {
            pieces.push((&text[start..], in_word));
        }
        Tokens { pieces }
    }

    fn words(&self) -> impl Iterator<Item = &'a str> + '_ {
        self.pieces.iter().filter(|(_, w)| *w).map(|(s, _)| *s)
    }
}

/// Indices of the slots whose trigger word occurs in the caption, in slot order.
fn active_slots(caption: &str, vocab: &Vocabulary) -> Vec<usize> {
    let words: BTreeSet<String> = Tokens::new(caption).words().map(str::to_lowercase).collect();
    vocab
        .slots
        .iter()
        .enumerate()
        .filter(|(_, slot)| words.contains(&slot[0].to_lowercase()))
        .map(|(i, _)| i)
        .collect()
}

pub fn variant_count(caption: &str, vocab: &Vocabulary) -> usize {
    active_slots(caption, vocab).iter().map(|&i| vocab.slots[i].len()).product()
}

pub fn apply_variant(caption: &str, vocab: &Vocabulary, j: usize) -> Result<CaptionVariant> {
    let active = active_slots(caption, vocab);
    let count: usize = active.iter().map(|&i| vocab.slots[i].len()).product();
    if j >= count {
        return Err(Error::VariantIndex { index: j, count });
    }
    for (a, &si) in active.iter().enumerate() {
        let words: BTreeSet<String> = vocab.slots[si].iter().map(|w| w.to_lowercase()).collect();
        for &sj in &active[a + 1..] {
            if vocab.slots[sj].iter().any(|w| words.contains(&w.to_lowercase())) {
                return Err(Error::Vocabulary(format!(
                    "slots {si} and {sj} share words and both match {caption:?}"
                )));
            }
        }
    }

    // trigger (lowercase) -> replacement
    let mut rest = j;
    let mut replacements = Vec::with_capacity(active.len());
    for &si in &active {
        let slot = &vocab.slots[si];
        let digit = rest % slot.len();
        rest /= slot.len();
        replacements.push((slot[0].to_lowercase(), slot[digit].as_str()));
    }

    let mut text = String::with_capacity(caption.len());
    for (piece, is_word) in Tokens::new(caption).pieces {
        if is_word && j != 0 {
            let lower = piece.to_lowercase();
            if let Some((_, alt)) = replacements.iter().find(|(t, _)| *t == lower) {
                // digit 0 keeps the caption's own spelling
                if alt.to_lowercase() == lower {
                    text.push_str(piece);
                } else {
                    text.push_str(alt);
                }
                continue;
            }
        }
        text.push_str(piece);
    }
    Ok(CaptionVariant { source_caption: caption.to_string(), variant_index: j, text })
}

pub fn enumerate_all(caption: &str, vocab: &Vocabulary) -> Result<Vec<CaptionVariant>> {
    (0..variant_count(caption, vocab)).map(|j| apply_variant(caption, vocab, j)).collect()
}

/// Variant indices used when building a synthetic pool: the non-identity
/// variants `1, 2, ...` in order, cycling when fewer than `n` exist. A caption
/// with no alternatives can only yield its identity variant.
pub fn pool_variant_indices(count: usize, n: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0; n];
    }
    (0..n).map(|k| 1 + k % (count - 1)).collect()
}

pub fn token_count(text: &str) -> usize {
    Tokens::new(text).words().count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shirt_vocab() -> Vocabulary {
        Vocabulary::from_words(&[&["man", "woman", "child"], &["red", "black", "yellow"]]).unwrap()
    }

    const CAPTION: &str = "a man in a red shirt";

    /// Hand oracle: nested loops over the two slots, slot 0 varying fastest.
    fn brute_force(caption: &str) -> Vec<String> {
        let mut out = Vec::new();
        for colour in ["red", "black", "yellow"] {
            for person in ["man", "woman", "child"] {
                out.push(caption.replace("man", person).replace("red", colour));
            }
        }
        out
    }

    #[test]
    fn counts_follow_the_product_rule() {
        let v = shirt_vocab();
        assert_eq!(variant_count(CAPTION, &v), 9);
        assert_eq!(variant_count("a dog on a sofa", &v), 1);
        assert_eq!(variant_count("a man on a bench", &v), 3);
    }

    #[test]
    fn single_slot_enumeration_matches_hand_oracle() {
        let v = shirt_vocab();
        let texts: Vec<String> = enumerate_all("a man on a bench", &v).unwrap().into_iter().map(|c| c.text).collect();
        assert_eq!(texts, vec!["a man on a bench", "a woman on a bench", "a child on a bench"]);
    }

    #[test]
    fn known_indices() {
        let v = shirt_vocab();
        assert_eq!(apply_variant(CAPTION, &v, 0).unwrap().text, CAPTION);
        assert_eq!(apply_variant(CAPTION, &v, 7).unwrap().text, "a woman in a yellow shirt");
        assert_eq!(apply_variant(CAPTION, &v, 4).unwrap().text, "a woman in a black shirt");
        assert!(matches!(apply_variant(CAPTION, &v, 9), Err(Error::VariantIndex { index: 9, count: 9 })));
    }

    #[test]
    fn enumeration_matches_brute_force_and_apply() {
        let v = shirt_vocab();
        let all = enumerate_all(CAPTION, &v).unwrap();
        let texts: Vec<String> = all.iter().map(|c| c.text.clone()).collect();
        assert_eq!(texts, brute_force(CAPTION));
        let distinct: BTreeSet<&String> = texts.iter().collect();
        assert_eq!(distinct.len(), 9);
        for (j, c) in all.iter().enumerate() {
            assert_eq!(c, &apply_variant(CAPTION, &v, j).unwrap());
        }
    }

    #[test]
    fn singleton_slot_yields_the_caption() {
        let v = Vocabulary::from_words(&[&["man"]]).unwrap();
        let all = enumerate_all(CAPTION, &v).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].text, CAPTION);
    }

    #[test]
    fn whole_word_case_insensitive_all_occurrences() {
        let v = shirt_vocab();
        let c = "A Man and another man, with manners.";
        assert_eq!(variant_count(c, &v), 3);
        assert_eq!(apply_variant(c, &v, 2).unwrap().text, "A child and another child, with manners.");
        assert_eq!(apply_variant(c, &v, 0).unwrap().text, c);
    }

    #[test]
    fn vocabulary_validation() {
        assert!(Vocabulary::from_words(&[&[]]).is_err());
        assert!(Vocabulary::from_words(&[&["man", "Man"]]).is_err());
        assert!(Vocabulary::from_words(&[&["man", "woman"], &["man", "boy"]]).is_err());
        assert!(Vocabulary::from_words(&[&["t-shirt"]]).is_err());
        let json = r#"[["man","woman","child"],["red","black","yellow"]]"#;
        let v: Vocabulary = serde_json::from_str(json).unwrap();
        assert_eq!(v, shirt_vocab());
        assert!(serde_json::from_str::<Vocabulary>(r#"[[]]"#).is_err());
    }

    #[test]
    fn overlapping_active_slots_are_rejected() {
        let v = Vocabulary::from_words(&[&["man", "woman"], &["woman", "girl"]]).unwrap();
        assert!(matches!(apply_variant("a man and a woman", &v, 1), Err(Error::Vocabulary(_))));
        // only one slot active: fine
        assert_eq!(apply_variant("a man", &v, 1).unwrap().text, "a woman");
    }

    #[test]
    fn pool_indices_skip_identity_and_wrap() {
        assert_eq!(pool_variant_indices(9, 5), vec![1, 2, 3, 4, 5]);
        assert_eq!(pool_variant_indices(4, 3), vec![1, 2, 3]);
        assert_eq!(pool_variant_indices(3, 5), vec![1, 2, 1, 2, 1]);
        assert_eq!(pool_variant_indices(1, 2), vec![0, 0]);
    }

    proptest! {
        #[test]
        fn substitution_preserves_tokens_and_is_injective(
            pre in "[a-z]{0,6}", mid in "[a-z]{0,6}", j in 0usize..9
        ) {
            let v = shirt_vocab();
            let caption = format!("{pre} man {mid} red.");
            let count = variant_count(&caption, &v);
            let j = j % count;
            let out = apply_variant(&caption, &v, j).unwrap();
            prop_assert_eq!(token_count(&out.text), token_count(&caption));
            prop_assert_eq!(&out, &apply_variant(&caption, &v, j).unwrap());
            let texts: BTreeSet<String> = enumerate_all(&caption, &v).unwrap().into_iter().map(|c| c.text).collect();
            prop_assert_eq!(texts.len(), count);
        }
    }
}
