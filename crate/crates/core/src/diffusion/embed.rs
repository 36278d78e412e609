//! Deterministic bag-of-tokens text embedding.
//!
//! Stand-in for a pretrained text encoder: lowercase, split on any
//! non-alphanumeric byte, hash each token with FNV-1a (64-bit) into one of
//! 32 buckets, count, L2-normalize. Empty text maps to the zero vector,
//! which doubles as the null-text convention.

use crate::numkit::Tensor;

pub const TEXT_DIM: usize = 32;

const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Bucket index a token lands in; exposed so tests can pin the mapping.
pub fn token_bucket(token: &str) -> usize {
    (fnv1a(token.as_bytes()) % TEXT_DIM as u64) as usize
}

/// Embed an instruction as unit-norm bucket counts, shape (32,).
pub fn embed_text(instruction: &str) -> Tensor {
    let mut counts = [0.0f32; TEXT_DIM];
    let lower = instruction.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        counts[token_bucket(token)] += 1.0;
    }
    let norm = counts.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 0.0 {
        for v in &mut counts {
            *v /= norm;
        }
    }
    Tensor::new(vec![TEXT_DIM], counts.to_vec()).expect("finite counts")
}

/// The null-text convention: an all-zero embedding.
pub fn null_text() -> Tensor {
    Tensor::zeros(vec![TEXT_DIM]).expect("static shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &Tensor, b: &Tensor) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn empty_text_is_zero() {
        assert_eq!(embed_text("").data(), null_text().data());
        assert_eq!(embed_text("  ,.;  ").data(), null_text().data());
    }

    #[test]
    fn pinned_buckets_for_core_instructions() {
        // Frozen once from the committed FNV-1a mapping; a hash change would
        // silently re-map every trained checkpoint's conditioning. Note
        // "brighten" and "darken" collide; tasks needing separable text
        // conditions must avoid that pair.
        assert_eq!(token_bucket("invert"), 1);
        assert_eq!(token_bucket("brighten"), 10);
        assert_eq!(token_bucket("darken"), 10);
        assert_eq!(token_bucket("grayscale"), 16);
    }

    #[test]
    fn distinct_buckets_give_orthogonal_embeddings() {
        let a = embed_text("invert");
        let b = embed_text("brighten");
        assert!(cosine(&a, &b).abs() < 1e-7);
    }

    #[test]
    fn repetition_does_not_change_direction() {
        assert_eq!(embed_text("invert invert").data(), embed_text("invert").data());
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        assert_eq!(embed_text("Invert!").data(), embed_text("invert").data());
    }

    #[test]
    fn unit_norm_for_nonempty() {
        for text in ["invert", "brighten the sky", "a b c d e f g"] {
            let e = embed_text(text);
            let n: f32 = e.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{text}: norm {n}");
        }
    }
}
