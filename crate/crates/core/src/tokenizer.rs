//! Byte-level tokenizer with reserved sentinel ids.
//!
//! Ids `0..=255` are raw UTF-8 bytes, followed by `PAD`, `EOS` and `UNK`.
//! Sentinels occupy the top of the id range: sentinel 0 has the highest id.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BYTE_COUNT: usize = 256;
pub const PAD: TokenId = 256;
pub const EOS: TokenId = 257;
pub const UNK: TokenId = 258;
pub const DEFAULT_SENTINEL_COUNT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub base_size: usize,
    pub sentinel_count: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new(DEFAULT_SENTINEL_COUNT)
    }
}

impl Vocab {
    pub fn new(sentinel_count: usize) -> Self {
        Self {
            base_size: BYTE_COUNT + 3,
            sentinel_count,
        }
    }

    pub fn size(&self) -> usize {
        self.base_size + self.sentinel_count
    }

    pub fn pad(&self) -> TokenId {
        PAD
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn sentinel_id(&self, k: usize) -> Result<TokenId> {
        if k >= self.sentinel_count {
            return Err(Error::SentinelOutOfRange {
                index: k,
                count: self.sentinel_count,
            });
        }
        Ok((self.size() - 1 - k) as TokenId)
    }

    /// Sentinel index for `id`, if `id` is a sentinel.
    pub fn sentinel_index(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        (id >= self.base_size && id < self.size()).then(|| self.size() - 1 - id)
    }

    pub fn is_sentinel(&self, id: TokenId) -> bool {
        self.sentinel_index(id).is_some()
    }

    /// One id per UTF-8 byte, followed by `EOS`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
        ids.push(EOS);
        ids
    }

    /// Byte ids without the trailing `EOS`.
    pub fn encode_bare(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &id in ids {
            if (id as usize) < BYTE_COUNT {
                bytes.push(id as u8);
                continue;
            }
            flush(&mut bytes, &mut out);
            if id == PAD || id == EOS {
                continue;
            }
            match self.sentinel_index(id) {
                Some(k) => out.push_str(&format!("<extra_id_{k}>")),
                None => out.push(char::REPLACEMENT_CHARACTER),
            }
        }
        flush(&mut bytes, &mut out);
        out
    }
}

fn flush(bytes: &mut Vec<u8>, out: &mut String) {
    if !bytes.is_empty() {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    }
}
