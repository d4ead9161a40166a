//! Span corruption: contiguous spans of the input are replaced by sentinel
//! ids and the target lists each removed span after its sentinel.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocab, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mask_rate: f64,
    pub mean_span_length: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            mean_span_length: 3.0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_rate {} must lie in (0, 1)",
                self.mask_rate
            )));
        }
        if !(self.mean_span_length >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mean_span_length {} must be at least 1",
                self.mean_span_length
            )));
        }
        Ok(())
    }

    /// Masked token count for a sequence of `n` tokens (EOS excluded).
    pub fn masked_count(&self, n: usize) -> usize {
        ((self.mask_rate * n as f64).round() as usize).clamp(1, n - 1)
    }

    /// Span count for `m` masked tokens out of `n`.
    pub fn span_count(&self, n: usize, m: usize) -> usize {
        let s = ((m as f64 / self.mean_span_length).round() as usize).max(1);
        // Interior gaps need at least one unmasked token each.
        s.min(m).min(n - m + 1)
    }
}

/// Splits `total` into `parts` positive integers, uniformly over compositions.
fn positive_parts(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut cuts = index::sample(rng, total - 1, parts - 1).into_vec();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c + 1 - prev);
        prev = c + 1;
    }
    out.push(total - prev);
    out
}

/// Splits `total` into `parts` non-negative integers (stars and bars).
fn nonneg_parts(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    positive_parts(total + parts, parts, rng)
        .into_iter()
        .map(|p| p - 1)
        .collect()
}

/// Returns `(corrupted input, target)`. A trailing `EOS` on `ids` is
/// ignored; both outputs end in `EOS`.
pub fn span_corrupt(
    ids: &[TokenId],
    spec: &CorruptionSpec,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    spec.validate()?;
    let body = match ids.last() {
        Some(&EOS) => &ids[..ids.len() - 1],
        _ => ids,
    };
    if let Some(&s) = body.iter().find(|&&t| vocab.is_sentinel(t)) {
        return Err(Error::Corruption(format!("input already contains sentinel id {s}")));
    }
    let n = body.len();
    if n < 2 {
        return Err(Error::Corruption(format!("need at least 2 tokens, got {n}")));
    }
    let m = spec.masked_count(n);
    let s = spec.span_count(n, m);
    if s > vocab.sentinel_count {
        return Err(Error::Corruption(format!(
            "{s} spans exceed {} sentinels",
            vocab.sentinel_count
        )));
    }
    let span_lens = positive_parts(m, s, rng);
    // s + 1 gaps; the s - 1 interior gaps hold at least one token each.
    let mut gaps = nonneg_parts(n - m - (s - 1), s + 1, rng);
    for g in gaps.iter_mut().take(s).skip(1) {
        *g += 1;
    }

    let mut corrupted = Vec::with_capacity(n - m + s + 1);
    let mut target = Vec::with_capacity(m + s + 1);
    let mut pos = 0;
    for (k, &len) in span_lens.iter().enumerate() {
        corrupted.extend_from_slice(&body[pos..pos + gaps[k]]);
        pos += gaps[k];
        let sentinel = vocab.sentinel_id(k)?;
        corrupted.push(sentinel);
        target.push(sentinel);
        target.extend_from_slice(&body[pos..pos + len]);
        pos += len;
    }
    corrupted.extend_from_slice(&body[pos..]);
    corrupted.push(EOS);
    target.push(EOS);
    Ok((corrupted, target))
}

/// Splices each target span back into its sentinel position.
pub fn reconstruct(corrupted: &[TokenId], target: &[TokenId], vocab: &Vocab) -> Result<Vec<TokenId>> {
    let Some((&EOS, spans_part)) = target.split_last() else {
        return Err(Error::Corruption("target must end with EOS".into()));
    };
    let mut spans: Vec<&[TokenId]> = Vec::new();
    let mut i = 0;
    while i < spans_part.len() {
        let k = vocab.sentinel_index(spans_part[i]).ok_or_else(|| {
            Error::Corruption(format!("target position {i} should hold a sentinel"))
        })?;
        if k != spans.len() {
            return Err(Error::Corruption(format!(
                "target sentinel {k} out of order, expected {}",
                spans.len()
            )));
        }
        let start = i + 1;
        let mut end = start;
        while end < spans_part.len() && !vocab.is_sentinel(spans_part[end]) {
            if spans_part[end] == EOS {
                return Err(Error::Corruption("EOS inside target span".into()));
            }
            end += 1;
        }
        spans.push(&spans_part[start..end]);
        i = end;
    }

    let mut out = Vec::with_capacity(corrupted.len() + target.len());
    let mut next = 0;
    for &t in corrupted {
        match vocab.sentinel_index(t) {
            Some(k) => {
                if k != next || k >= spans.len() {
                    return Err(Error::Corruption(format!(
                        "input sentinel {k} does not match target span {next}"
                    )));
                }
                out.extend_from_slice(spans[k]);
                next += 1;
            }
            None => out.push(t),
        }
    }
    if next != spans.len() {
        return Err(Error::Corruption(format!(
            "target has {} spans, input has {next} sentinels",
            spans.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_follow_the_formula() {
        let spec = CorruptionSpec::default();
        assert_eq!(spec.masked_count(20), 3);
        assert_eq!(spec.span_count(20, 3), 1);
        assert_eq!(spec.masked_count(2), 1);
        assert_eq!(spec.masked_count(100), 15);
        assert_eq!(spec.span_count(100, 15), 5);
    }

    #[test]
    fn twenty_tokens_give_one_span_of_three() {
        let v = Vocab::default();
        let ids: Vec<TokenId> = (0..20).map(|i| 97 + i).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, t) = span_corrupt(&ids, &CorruptionSpec::default(), &v, &mut rng).unwrap();
        assert_eq!(c.len(), 18 + 1);
        assert_eq!(t.len(), 1 + 3 + 1);
        assert_eq!(t[0], v.sentinel_id(0).unwrap());
        assert_eq!(reconstruct(&c, &t, &v).unwrap(), [ids.as_slice(), &[EOS]].concat());
    }

    #[test]
    fn reconstruct_examples() {
        let v = Vocab::default();
        let s0 = v.sentinel_id(0).unwrap();
        assert_eq!(reconstruct(&[1, s0, 4], &[s0, 2, 3, EOS], &v).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(reconstruct(&[5, 6, 7], &[EOS], &v).unwrap(), vec![5, 6, 7]);
        let s1 = v.sentinel_id(1).unwrap();
        assert!(reconstruct(&[1, s1, 4], &[s0, 2, EOS], &v).is_err());
        assert!(reconstruct(&[1, s0, 4], &[s0, 2], &v).is_err());
        assert!(reconstruct(&[1, s0, 4], &[2, EOS], &v).is_err());
        assert!(reconstruct(&[1, 4], &[s0, 2, EOS], &v).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let v = Vocab::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = CorruptionSpec::default();
        assert!(span_corrupt(&[1, EOS], &spec, &v, &mut rng).is_err());
        let s = v.sentinel_id(2).unwrap();
        assert!(span_corrupt(&[1, 2, s, 3], &spec, &v, &mut rng).is_err());
        let bad = CorruptionSpec {
            mask_rate: 1.0,
            ..spec
        };
        assert!(span_corrupt(&[1, 2, 3], &bad, &v, &mut rng).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn round_trip_and_structure(
            body in proptest::collection::vec(0u32..256, 2..160),
            seed in any::<u64>(),
            rate in 0.05f64..0.6,
            span in 1.0f64..6.0,
        ) {
            let v = Vocab::default();
            let spec = CorruptionSpec { mask_rate: rate, mean_span_length: span };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, t) = span_corrupt(&body, &spec, &v, &mut rng).unwrap();
            let rebuilt = reconstruct(&c, &t, &v).unwrap();
            prop_assert_eq!(&rebuilt[..body.len()], &body[..]);
            let sent_in: Vec<usize> = c.iter().filter_map(|&x| v.sentinel_index(x)).collect();
            let sent_out: Vec<usize> = t.iter().filter_map(|&x| v.sentinel_index(x)).collect();
            prop_assert_eq!(&sent_in, &sent_out);
            prop_assert!(sent_in.windows(2).all(|w| w[0] < w[1]));
            let m = spec.masked_count(body.len());
            prop_assert_eq!(t.len() - sent_out.len() - 1, m);
        }
    }
}
