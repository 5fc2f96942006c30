use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary size of the hash-bucket tokenizer.
pub const VOCAB_SIZE: usize = 512;

/// Default prompt template; `{}` is the category slot.
pub const DEFAULT_TEMPLATE: &str = "a photo of {}";

/// Lowercases, splits on whitespace and hashes every token (64-bit FNV-1a)
/// into one of [`VOCAB_SIZE`] buckets.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.to_lowercase()
        .split_whitespace()
        .map(|tok| (fnv1a(tok.as_bytes()) % VOCAB_SIZE as u64) as u32)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A filled-in text prompt and its token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub template: String,
    pub category: String,
    pub token_ids: Vec<u32>,
}

impl Prompt {
    pub fn new(template: &str, category: &str) -> Result<Self> {
        if category.trim().is_empty() {
            return Err(Error::contract("prompt", "empty category"));
        }
        if !template.contains("{}") {
            return Err(Error::contract("prompt", format!("template `{template}` has no `{{}}` slot")));
        }
        let text = template.replacen("{}", category, 1);
        Ok(Prompt {
            template: template.to_string(),
            category: category.to_string(),
            token_ids: tokenize(&text),
        })
    }

    pub fn for_category(category: &str) -> Result<Self> {
        Self::new(DEFAULT_TEMPLATE, category)
    }

    pub fn text(&self) -> String {
        self.template.replacen("{}", &self.category, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_is_case_and_space_insensitive() {
        assert_eq!(tokenize("A  Photo of\tSquare"), tokenize("a photo of square"));
        assert_eq!(tokenize("a photo of square").len(), 4);
        assert!(tokenize("one two three").iter().all(|&t| (t as usize) < VOCAB_SIZE));
    }

    #[test]
    fn prompts_differ_by_category() {
        let a = Prompt::for_category("waterbird").unwrap();
        let b = Prompt::for_category("landbird").unwrap();
        assert_ne!(a.token_ids, b.token_ids);
        assert_eq!(a.text(), "a photo of waterbird");
    }

    #[test]
    fn empty_category_is_rejected() {
        let err = Prompt::for_category("  ").unwrap_err().to_string();
        assert!(err.contains("empty category"), "{err}");
    }
}
