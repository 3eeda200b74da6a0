//! Deterministic text-embedding stub.
//!
//! This is NOT a language model. It hashes character 3-grams of the
//! lowercased text into a fixed number of signed buckets and normalizes, so
//! any label or caption maps to a stable unit vector and dot-product
//! classification against arbitrary vocabularies can be exercised without a
//! pretrained encoder. Swap in a real text encoder behind the same signature
//! for semantically meaningful similarities.

use thiserror::Error;

pub const DEFAULT_TEXT_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("text is empty after trimming")]
    EmptyText,
    #[error("embedding dim {0} below minimum of 8")]
    DimTooSmall(usize),
}

/// Unit-norm text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    vector: Vec<f64>,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dot(&self, other: &TextEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

/// Deterministic embedding of arbitrary text: equal inputs give bit-identical
/// unit vectors; case-insensitive.
pub fn embed_text(text: &str, dim: usize) -> Result<TextEmbedding, TextError> {
    if dim < 8 {
        return Err(TextError::DimTooSmall(dim));
    }
    let lowered = text.trim().to_lowercase();
    if lowered.is_empty() {
        return Err(TextError::EmptyText);
    }

    // Sentinel padding so even one-character inputs yield a 3-gram.
    let chars: Vec<char> = std::iter::once('\u{2}')
        .chain(lowered.chars())
        .chain(std::iter::once('\u{3}'))
        .collect();

    let mut vector = vec![0.0f64; dim];
    let mut buf = String::new();
    for gram in chars.windows(3) {
        buf.clear();
        buf.extend(gram);
        let h = crate::rng::hash_str(&buf);
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        vector[bucket] += sign;
    }

    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        // grams cancelled exactly; fall back to a whole-string bucket
        let h = crate::rng::hash_str(&lowered);
        vector[(h % dim as u64) as usize] = 1.0;
        return Ok(TextEmbedding { vector });
    }
    for v in &mut vector {
        *v /= norm;
    }
    Ok(TextEmbedding { vector })
}
