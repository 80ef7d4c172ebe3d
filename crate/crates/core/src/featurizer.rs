//! Deterministic hashed features for text and raw image bytes.
//!
//! Tokens and byte windows are hashed with 64-bit FNV-1a into signed buckets:
//! bucket `h % dim`, sign `+1` when bit 32 of `h` is clear, `-1` otherwise.
//! Outputs are L2-normalized.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Item;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub text_dim: usize,
    pub image_dim: usize,
    /// Seeds parameter initialization downstream; hashing itself is unseeded.
    pub seed: u64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            text_dim: 4096,
            image_dim: 1024,
            seed: 0,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_dim < 8 || self.image_dim < 8 {
            return Err(Error::Config(format!(
                "feature dims must be >= 8 (text {}, image {})",
                self.text_dim, self.image_dim
            )));
        }
        Ok(())
    }
}

/// Sparse vector as (index, value) pairs sorted by index, no zeros stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub dim: usize,
    pub entries: Vec<(u32, f64)>,
}

impl SparseVec {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    fn from_buckets(dim: usize, buckets: std::collections::BTreeMap<u32, f64>) -> Self {
        SparseVec {
            dim,
            entries: buckets.into_iter().filter(|&(_, v)| v != 0.0).collect(),
        }
    }

    fn normalized(mut self) -> Option<Self> {
        let n = self.norm();
        if n == 0.0 {
            return None;
        }
        for (_, v) in &mut self.entries {
            *v /= n;
        }
        Some(self)
    }
}

#[inline]
fn signed_bucket(hash: u64, dim: usize) -> (u32, f64) {
    let bucket = (hash % dim as u64) as u32;
    let sign = if hash & (1 << 32) == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

/// ASCII lowercase, split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
}

/// Pre-normalization signed bucket counts.
pub fn featurize_text_raw(text: &str, dim: usize) -> SparseVec {
    let mut buckets = std::collections::BTreeMap::new();
    for tok in tokenize(text) {
        let (b, s) = signed_bucket(fnv1a64(tok.as_bytes()), dim);
        *buckets.entry(b).or_insert(0.0) += s;
    }
    SparseVec::from_buckets(dim, buckets)
}

pub fn featurize_text_sparse(text: &str, cfg: &FeaturizerConfig) -> Result<SparseVec> {
    if tokenize(text).next().is_none() {
        return Err(Error::EmptyText);
    }
    // all tokens may cancel out in a shared bucket
    featurize_text_raw(text, cfg.text_dim)
        .normalized()
        .ok_or(Error::EmptyText)
}

pub fn featurize_text(text: &str, cfg: &FeaturizerConfig) -> Result<Vec<f64>> {
    featurize_text_sparse(text, cfg).map(|v| v.to_dense())
}

/// Inputs shorter than one window are hashed as a single window.
pub fn featurize_image_bytes(bytes: &[u8], cfg: &FeaturizerConfig) -> Result<Vec<f64>> {
    const WINDOW: usize = 8;
    const STRIDE: usize = 4;
    if bytes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut buckets = std::collections::BTreeMap::new();
    let mut add = |w: &[u8]| {
        let (b, s) = signed_bucket(fnv1a64(w), cfg.image_dim);
        *buckets.entry(b).or_insert(0.0) += s;
    };
    if bytes.len() < WINDOW {
        add(bytes);
    } else {
        let mut start = 0;
        while start + WINDOW <= bytes.len() {
            add(&bytes[start..start + WINDOW]);
            start += STRIDE;
        }
    }
    SparseVec::from_buckets(cfg.image_dim, buckets)
        .normalized()
        .map(|v| v.to_dense())
        .ok_or(Error::EmptyInput)
}

/// Populate `image_feat` from `image_ref` when needed. Relative references
/// resolve against `base_dir`.
pub fn load_or_featurize(item: &Item, cfg: &FeaturizerConfig, base_dir: &Path) -> Result<Item> {
    let mut out = item.clone();
    if let Some(feat) = &item.image_feat {
        if feat.len() != cfg.image_dim {
            return Err(Error::DimMismatch {
                context: format!("image_feat of {}", item.id),
                expected: cfg.image_dim,
                got: feat.len(),
            });
        }
        return Ok(out);
    }
    if let Some(r) = &item.image_ref {
        let path = base_dir.join(r);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.clone()),
            _ => Error::Io(e),
        })?;
        out.image_feat = Some(featurize_image_bytes(&bytes, cfg)?);
        out.image_ref = None;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Modality;

    // Reference FNV-1a written out longhand, independent of `fnv1a64`.
    fn oracle_fnv(bytes: &[u8]) -> u64 {
        let mut h: u64 = 14695981039346656037;
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        h
    }

    fn cfg() -> FeaturizerConfig {
        FeaturizerConfig::default()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn repeated_token_single_bucket() {
        let v = featurize_text("a a", &cfg()).unwrap();
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        assert!((norm(&v) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ascii_case_folded() {
        assert_eq!(
            featurize_text("cat", &cfg()).unwrap(),
            featurize_text("Cat", &cfg()).unwrap()
        );
    }

    #[test]
    fn non_ascii_not_folded() {
        let c = cfg();
        assert_ne!(
            featurize_text("É", &c).unwrap(),
            featurize_text("é", &c).unwrap()
        );
    }

    #[test]
    fn two_tokens_sum_of_accumulators() {
        let c = cfg();
        let mut expected = vec![0.0; c.text_dim];
        for tok in ["cat", "dog"] {
            let h = oracle_fnv(tok.as_bytes());
            let idx = (h % c.text_dim as u64) as usize;
            expected[idx] += if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        }
        let n = norm(&expected);
        expected.iter_mut().for_each(|x| *x /= n);
        assert_eq!(featurize_text("cat dog", &c).unwrap(), expected);
    }

    #[test]
    fn empty_text_errors() {
        assert!(matches!(
            featurize_text(" ,.; ", &cfg()),
            Err(Error::EmptyText)
        ));
    }

    #[test]
    fn identical_window_bytes_one_bucket() {
        let v = featurize_image_bytes(&[7u8; 8], &cfg()).unwrap();
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        assert!((norm(&v) - 1.0).abs() < 1e-15);
        assert_eq!(v, featurize_image_bytes(&[7u8; 8], &cfg()).unwrap());
    }

    #[test]
    fn sixteen_zero_bytes_matches_oracle() {
        let c = cfg();
        let bytes = [0u8; 16];
        let mut expected = vec![0.0; c.image_dim];
        for start in [0usize, 4, 8] {
            let h = oracle_fnv(&bytes[start..start + 8]);
            expected[(h % c.image_dim as u64) as usize] +=
                if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        }
        let n = norm(&expected);
        expected.iter_mut().for_each(|x| *x /= n);
        assert_eq!(featurize_image_bytes(&bytes, &c).unwrap(), expected);
    }

    #[test]
    fn empty_bytes_error() {
        assert!(matches!(
            featurize_image_bytes(&[], &cfg()),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn load_passes_through_features() {
        let c = FeaturizerConfig {
            image_dim: 8,
            ..cfg()
        };
        let item = Item::image("i", vec![0.5; 8]);
        assert_eq!(load_or_featurize(&item, &c, Path::new(".")).unwrap(), item);
        let bad = Item::image("i", vec![0.5; 9]);
        assert!(matches!(
            load_or_featurize(&bad, &c, Path::new(".")),
            Err(Error::DimMismatch {
                expected: 8,
                got: 9,
                ..
            })
        ));
    }

    #[test]
    fn load_reads_image_ref() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..64u8).collect();
        std::fs::write(dir.path().join("img.bin"), &bytes).unwrap();
        let item = Item {
            id: "i".into(),
            modality: Modality::Image,
            text: None,
            image_feat: None,
            image_ref: Some("img.bin".into()),
        };
        let out = load_or_featurize(&item, &cfg(), dir.path()).unwrap();
        let feat = out.image_feat.unwrap();
        assert!((norm(&feat) - 1.0).abs() < 1e-12);
        assert_eq!(feat, featurize_image_bytes(&bytes, &cfg()).unwrap());
        assert!(out.image_ref.is_none());

        let missing = Item {
            image_ref: Some("nope.bin".into()),
            ..item
        };
        assert!(matches!(
            load_or_featurize(&missing, &cfg(), dir.path()),
            Err(Error::FileNotFound(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn text_output_unit_or_error(s in "\\PC{0,40}") {
                match featurize_text(&s, &cfg()) {
                    Ok(v) => {
                        prop_assert!(v.iter().all(|x| x.is_finite()));
                        prop_assert!((norm(&v) - 1.0).abs() < 1e-12);
                    }
                    Err(e) => prop_assert!(matches!(e, Error::EmptyText)),
                }
            }

            #[test]
            fn image_output_unit(bytes in proptest::collection::vec(any::<u8>(), 1..100)) {
                let v = featurize_image_bytes(&bytes, &cfg()).unwrap_or_default();
                if !v.is_empty() {
                    prop_assert!((norm(&v) - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
