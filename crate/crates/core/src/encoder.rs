//! Score-fusion bi-encoder: text and image features are projected separately,
//! summed, and L2-normalized into one embedding.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{featurize_text_sparse, FeaturizerConfig, SparseVec};
use crate::types::{EmbeddingRecord, Item};

const MAGIC: &[u8; 4] = b"UMRP";
const VERSION: u32 = 1;
const ZERO_NORM: f64 = 1e-12;

/// Trainable projections. Both matrices are row-major, `dim` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub dim: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub w_text: Vec<f64>,
    pub w_image: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeOptions {
    pub include_instruction: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            include_instruction: true,
        }
    }
}

impl FusionParams {
    pub fn zeros(dim: usize, text_dim: usize, image_dim: usize) -> Self {
        FusionParams {
            dim,
            text_dim,
            image_dim,
            w_text: vec![0.0; dim * text_dim],
            w_image: vec![0.0; dim * image_dim],
        }
    }

    /// Uniform(-a, a) entries with `a = sqrt(6 / (dim + fan_in))` per matrix.
    pub fn init(dim: usize, text_dim: usize, image_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |fan_in: usize| {
            let a = (6.0 / (dim + fan_in) as f64).sqrt();
            (0..dim * fan_in)
                .map(|_| rng.gen_range(-a..a))
                .collect::<Vec<_>>()
        };
        let w_text = fill(text_dim);
        let w_image = fill(image_dim);
        FusionParams {
            dim,
            text_dim,
            image_dim,
            w_text,
            w_image,
        }
    }

    pub fn for_featurizer(dim: usize, cfg: &FeaturizerConfig) -> Self {
        Self::init(dim, cfg.text_dim, cfg.image_dim, cfg.seed)
    }

    pub fn num_params(&self) -> usize {
        self.w_text.len() + self.w_image.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w_text
            .iter()
            .chain(&self.w_image)
            .all(|x| x.is_finite())
    }

    pub fn check_compatible(&self, cfg: &FeaturizerConfig) -> Result<()> {
        if self.text_dim != cfg.text_dim {
            return Err(Error::DimMismatch {
                context: "text feature dim".into(),
                expected: cfg.text_dim,
                got: self.text_dim,
            });
        }
        if self.image_dim != cfg.image_dim {
            return Err(Error::DimMismatch {
                context: "image feature dim".into(),
                expected: cfg.image_dim,
                got: self.image_dim,
            });
        }
        Ok(())
    }

    /// Flat view over all parameters: text matrix first, then image.
    pub fn get(&self, flat: usize) -> f64 {
        if flat < self.w_text.len() {
            self.w_text[flat]
        } else {
            self.w_image[flat - self.w_text.len()]
        }
    }

    pub fn get_mut(&mut self, flat: usize) -> &mut f64 {
        let n = self.w_text.len();
        if flat < n {
            &mut self.w_text[flat]
        } else {
            &mut self.w_image[flat - n]
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.dim as u32,
            self.text_dim as u32,
            self.image_dim as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in self.w_text.iter().chain(&self.w_image) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::parse("params checkpoint", "bad magic"));
        }
        let mut u32s = [0u32; 4];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, dim, text_dim, image_dim] = u32s.map(|v| v as usize);
        if version != VERSION as usize {
            return Err(Error::parse(
                "params checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let mut read_mat = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect())
        };
        let w_text = read_mat(dim * text_dim)?;
        let w_image = read_mat(dim * image_dim)?;
        let params = FusionParams {
            dim,
            text_dim,
            image_dim,
            w_text,
            w_image,
        };
        if !params.is_finite() {
            return Err(Error::NonFinite("params checkpoint"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Featurized input to the encoder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Features {
    pub text: Option<SparseVec>,
    pub image: Option<Vec<f64>>,
}

impl Features {
    /// Features of a query; the instruction is joined to the query text with
    /// one space, or used alone when the query has no text.
    pub fn query(
        instruction: &str,
        q: &Item,
        cfg: &FeaturizerConfig,
        opts: EncodeOptions,
    ) -> Result<Self> {
        let text = match (&q.text, opts.include_instruction) {
            (Some(t), true) => Some(format!("{instruction} {t}")),
            (Some(t), false) => Some(t.clone()),
            (None, true) if !instruction.trim().is_empty() => Some(instruction.to_string()),
            (None, _) => None,
        };
        Self::build(text.as_deref(), q, cfg)
    }

    pub fn candidate(c: &Item, cfg: &FeaturizerConfig) -> Result<Self> {
        Self::build(c.text.as_deref(), c, cfg)
    }

    fn build(text: Option<&str>, item: &Item, cfg: &FeaturizerConfig) -> Result<Self> {
        let text = text
            .map(|t| featurize_text_sparse(t, cfg))
            .transpose()
            .map_err(|e| e.context(format!("featurizing {}", item.id)))?;
        let image = match &item.image_feat {
            Some(f) if f.len() != cfg.image_dim => {
                return Err(Error::DimMismatch {
                    context: format!("image_feat of {}", item.id),
                    expected: cfg.image_dim,
                    got: f.len(),
                })
            }
            Some(f) => Some(f.clone()),
            None if item.modality.has_image() => {
                return Err(Error::parse(
                    format!("item {}", item.id),
                    "image features not loaded",
                ))
            }
            None => None,
        };
        Ok(Features { text, image })
    }
}

/// Unnormalized fused vector `W_t f_t + W_i f_i`.
pub fn project(f: &Features, p: &FusionParams) -> Vec<f64> {
    let mut raw = vec![0.0; p.dim];
    if let Some(t) = &f.text {
        for (k, out) in raw.iter_mut().enumerate() {
            let row = &p.w_text[k * p.text_dim..(k + 1) * p.text_dim];
            *out += t
                .entries
                .iter()
                .map(|&(j, v)| row[j as usize] * v)
                .sum::<f64>();
        }
    }
    if let Some(img) = &f.image {
        for (k, out) in raw.iter_mut().enumerate() {
            let row = &p.w_image[k * p.image_dim..(k + 1) * p.image_dim];
            *out += row.iter().zip(img).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    raw
}

/// Normalized embedding together with the pre-normalization norm.
pub fn encode_features(f: &Features, p: &FusionParams, id: &str) -> Result<(Vec<f64>, f64)> {
    let mut v = project(f, p);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() {
        return Err(Error::NonFinite("encoder output"));
    }
    if n < ZERO_NORM {
        return Err(Error::ZeroVector(id.to_string()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok((v, n))
}

pub fn encode_query(
    instruction: &str,
    q: &Item,
    params: &FusionParams,
    cfg: &FeaturizerConfig,
    opts: EncodeOptions,
) -> Result<Vec<f64>> {
    let f = Features::query(instruction, q, cfg, opts)?;
    encode_features(&f, params, &q.id).map(|(v, _)| v)
}

pub fn encode_candidate(
    c: &Item,
    params: &FusionParams,
    cfg: &FeaturizerConfig,
) -> Result<Vec<f64>> {
    let f = Features::candidate(c, cfg)?;
    encode_features(&f, params, &c.id).map(|(v, _)| v)
}

pub fn to_f32_unit(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Encode candidates in input order.
pub fn encode_corpus(
    items: &[Item],
    params: &FusionParams,
    cfg: &FeaturizerConfig,
) -> Result<Vec<EmbeddingRecord>> {
    items
        .par_iter()
        .map(|item| {
            let v = encode_candidate(item, params, cfg)
                .map_err(|e| e.context(format!("encoding {}", item.id)))?;
            EmbeddingRecord::new(item.id.clone(), item.modality, to_f32_unit(&v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::featurize_text;
    use crate::types::Modality;
    use rand::Rng;

    fn small_cfg() -> FeaturizerConfig {
        FeaturizerConfig {
            text_dim: 32,
            image_dim: 16,
            seed: 3,
        }
    }

    fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / s).collect()
    }

    // dense matmul oracle
    fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                out[r] += w[r * cols + c] * x[c];
            }
        }
        out
    }

    fn normalize(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_image_projection_returns_features() {
        let cfg = small_cfg();
        let mut p = FusionParams::zeros(cfg.image_dim, cfg.text_dim, cfg.image_dim);
        for k in 0..cfg.image_dim {
            p.w_image[k * cfg.image_dim + k] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = unit(&mut rng, cfg.image_dim);
        let q = Item::image("q", f.clone());
        let opts = EncodeOptions {
            include_instruction: false,
        };
        let v = encode_query("find it", &q, &p, &cfg, opts).unwrap();
        assert_close(&v, &f, 1e-15);
    }

    #[test]
    fn zero_text_projection_is_zero_vector() {
        let cfg = small_cfg();
        let p = FusionParams::zeros(8, cfg.text_dim, cfg.image_dim);
        let q = Item::text("q", "hello world");
        let err = encode_query("inst", &q, &p, &cfg, EncodeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ZeroVector(_)));
        assert!(matches!(
            encode_candidate(&q, &p, &cfg),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn image_text_query_matches_matmul_oracle() {
        let cfg = small_cfg();
        let p = FusionParams::init(8, cfg.text_dim, cfg.image_dim, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = unit(&mut rng, cfg.image_dim);
        let q = Item::image_text("q", "red hat", img.clone());
        let v = encode_query("find a product", &q, &p, &cfg, EncodeOptions::default()).unwrap();
        let ft = featurize_text("find a product red hat", &cfg).unwrap();
        let a = matvec(&p.w_text, 8, cfg.text_dim, &ft);
        let b = matvec(&p.w_image, 8, cfg.image_dim, &img);
        let expected = normalize(a.iter().zip(&b).map(|(x, y)| x + y).collect());
        assert_close(&v, &expected, 1e-12);
    }

    #[test]
    fn candidates_match_oracle() {
        let cfg = small_cfg();
        let p = FusionParams::init(8, cfg.text_dim, cfg.image_dim, 5);
        let c = Item::text("c", "a small dog");
        let ft = featurize_text("a small dog", &cfg).unwrap();
        assert_close(
            &encode_candidate(&c, &p, &cfg).unwrap(),
            &normalize(matvec(&p.w_text, 8, cfg.text_dim, &ft)),
            1e-12,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = unit(&mut rng, cfg.image_dim);
        let c = Item::image_text("c", "a small dog", img.clone());
        let a = matvec(&p.w_text, 8, cfg.text_dim, &ft);
        let b = matvec(&p.w_image, 8, cfg.image_dim, &img);
        assert_close(
            &encode_candidate(&c, &p, &cfg).unwrap(),
            &normalize(a.iter().zip(&b).map(|(x, y)| x + y).collect()),
            1e-12,
        );
    }

    #[test]
    fn image_only_query_uses_instruction_as_text() {
        let cfg = small_cfg();
        let q = Item::image("q", vec![0.25; 16]);
        let f = Features::query("retrieve a caption", &q, &cfg, EncodeOptions::default()).unwrap();
        assert!(f.text.is_some());
        let f = Features::query(
            "retrieve a caption",
            &q,
            &cfg,
            EncodeOptions {
                include_instruction: false,
            },
        )
        .unwrap();
        assert!(f.text.is_none());
    }

    #[test]
    fn fusion_is_additive() {
        let cfg = small_cfg();
        let p = FusionParams::init(8, cfg.text_dim, cfg.image_dim, 5);
        let both =
            Features::candidate(&Item::image_text("c", "blue car", vec![0.25; 16]), &cfg).unwrap();
        let t = Features {
            text: both.text.clone(),
            image: None,
        };
        let i = Features {
            text: None,
            image: both.image.clone(),
        };
        let sum: Vec<f64> = project(&t, &p)
            .iter()
            .zip(project(&i, &p))
            .map(|(a, b)| a + b)
            .collect();
        assert_close(&project(&both, &p), &sum, 1e-14);
    }

    #[test]
    fn scaling_params_leaves_embedding_unchanged() {
        let cfg = small_cfg();
        let p = FusionParams::init(8, cfg.text_dim, cfg.image_dim, 5);
        let mut scaled = p.clone();
        scaled
            .w_text
            .iter_mut()
            .chain(scaled.w_image.iter_mut())
            .for_each(|x| *x *= 3.7);
        let c = Item::image_text("c", "blue car", vec![0.25; 16]);
        assert_close(
            &encode_candidate(&c, &p, &cfg).unwrap(),
            &encode_candidate(&c, &scaled, &cfg).unwrap(),
            1e-12,
        );
    }

    #[test]
    fn encode_corpus_order_and_norms() {
        let cfg = small_cfg();
        let p = FusionParams::init(16, cfg.text_dim, cfg.image_dim, 5);
        assert!(encode_corpus(&[], &p, &cfg).unwrap().is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let items: Vec<Item> = (0..1000)
            .map(|i| match i % 3 {
                0 => Item::text(&format!("t{i}"), &format!("word{i}")),
                1 => Item::image(&format!("i{i}"), unit(&mut rng, 16)),
                _ => Item::image_text(&format!("m{i}"), &format!("w{i}"), unit(&mut rng, 16)),
            })
            .collect();
        let recs = encode_corpus(&items, &p, &cfg).unwrap();
        assert_eq!(recs.len(), items.len());
        for (r, it) in recs.iter().zip(&items) {
            assert_eq!(r.id, it.id);
            assert_eq!(r.modality, it.modality);
            assert!((crate::types::norm_f32(&r.vector) - 1.0).abs() <= 1e-5);
        }
        assert_eq!(
            recs[..3].iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["t0", "i1", "m2"]
        );
        assert_eq!(recs[1].modality, Modality::Image);
    }

    #[test]
    fn encode_corpus_reports_offending_id() {
        let cfg = small_cfg();
        let p = FusionParams::zeros(8, cfg.text_dim, cfg.image_dim);
        let err = encode_corpus(&[Item::text("bad", "x")], &p, &cfg).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = FusionParams::init(4, 8, 8, 1);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"UMRP");
        assert_eq!(buf.len(), 4 + 16 + 8 * (32 + 32));
        assert_eq!(FusionParams::read_from(&buf[..]).unwrap(), p);
        buf[0] = b'X';
        assert!(FusionParams::read_from(&buf[..]).is_err());
    }

    #[test]
    fn init_range_and_determinism() {
        let p = FusionParams::init(8, 32, 16, 42);
        let a_t = (6.0f64 / 40.0).sqrt();
        assert!(p.w_text.iter().all(|x| x.abs() < a_t));
        assert_eq!(p, FusionParams::init(8, 32, 16, 42));
        assert_ne!(p, FusionParams::init(8, 32, 16, 43));
    }
}
