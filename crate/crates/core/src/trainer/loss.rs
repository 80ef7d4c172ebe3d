use crate::encoder::{encode_features, Features, FusionParams};
use crate::error::{Error, Result};
use crate::types::Modality;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

/// Candidate set shared by every query of a mini-batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchPool {
    pub entries: Vec<PoolEntry>,
}

impl BatchPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of `logits` plus `log(sum(exp(logits)))`, max-shifted.
pub(crate) fn softmax_lse(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (exps.into_iter().map(|e| e / sum).collect(), lse)
}

fn check_inputs(
    queries: &[Vec<f64>],
    pool: &[Vec<f64>],
    pos_index: &[usize],
    tau: f64,
) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    if queries.is_empty() || pool.is_empty() {
        return Err(Error::BatchInfeasible("empty queries or pool".into()));
    }
    if pos_index.len() != queries.len() || pos_index.iter().any(|&p| p >= pool.len()) {
        return Err(Error::BatchInfeasible("positive index out of range".into()));
    }
    if queries.iter().chain(pool).flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("loss inputs"));
    }
    Ok(())
}

/// Mean negative log-softmax of each query's positive against the pool at
/// temperature `tau`.
pub fn infonce_loss(
    query_vecs: &[Vec<f64>],
    pool: &BatchPool,
    pos_index: &[usize],
    tau: f64,
) -> Result<f64> {
    let pool_vecs: Vec<Vec<f64>> = pool.entries.iter().map(|e| e.vector.clone()).collect();
    infonce_loss_vecs(query_vecs, &pool_vecs, pos_index, tau)
}

pub(crate) fn infonce_loss_vecs(
    query_vecs: &[Vec<f64>],
    pool: &[Vec<f64>],
    pos_index: &[usize],
    tau: f64,
) -> Result<f64> {
    check_inputs(query_vecs, pool, pos_index, tau)?;
    let total: f64 = query_vecs
        .iter()
        .zip(pos_index)
        .map(|(q, &p)| {
            let logits: Vec<f64> = pool.iter().map(|c| dot(q, c) / tau).collect();
            let (_, lse) = softmax_lse(&logits);
            lse - logits[p]
        })
        .sum();
    let loss = total / query_vecs.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(loss)
}

/// Gradient of the loss with respect to both projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w_text: Vec<f64>,
    pub w_image: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(p: &FusionParams) -> Self {
        ParamGrads {
            w_text: vec![0.0; p.w_text.len()],
            w_image: vec![0.0; p.w_image.len()],
        }
    }

    pub fn get(&self, flat: usize) -> f64 {
        if flat < self.w_text.len() {
            self.w_text[flat]
        } else {
            self.w_image[flat - self.w_text.len()]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w_text.iter().chain(&self.w_image)
    }
}

/// Accumulate `d loss / d W` for one encoded item given `d loss / d v` on
/// its unit output `v = r / |r|`.
fn backprop_item(
    grads: &mut ParamGrads,
    p: &FusionParams,
    f: &Features,
    v: &[f64],
    norm: f64,
    dv: &[f64],
) {
    // Jacobian of the normalization: (I - v v^T) / |r|
    let proj = dot(v, dv);
    let dr: Vec<f64> = dv
        .iter()
        .zip(v)
        .map(|(g, x)| (g - x * proj) / norm)
        .collect();
    if let Some(t) = &f.text {
        for (k, &drk) in dr.iter().enumerate() {
            if drk == 0.0 {
                continue;
            }
            let row = &mut grads.w_text[k * p.text_dim..(k + 1) * p.text_dim];
            for &(j, val) in &t.entries {
                row[j as usize] += drk * val;
            }
        }
    }
    if let Some(img) = &f.image {
        for (k, &drk) in dr.iter().enumerate() {
            if drk == 0.0 {
                continue;
            }
            let row = &mut grads.w_image[k * p.image_dim..(k + 1) * p.image_dim];
            for (g, &x) in row.iter_mut().zip(img) {
                *g += drk * x;
            }
        }
    }
}

/// Loss and exact analytic gradient through projection, fusion,
/// normalization and the temperature-scaled softmax.
pub fn infonce_grad(
    queries: &[Features],
    pool: &[Features],
    pos_index: &[usize],
    params: &FusionParams,
    tau: f64,
) -> Result<(f64, ParamGrads)> {
    let enc = |fs: &[Features]| -> Result<Vec<(Vec<f64>, f64)>> {
        fs.iter()
            .map(|f| encode_features(f, params, "batch item"))
            .collect()
    };
    let q_enc = enc(queries)?;
    let c_enc = enc(pool)?;
    let q_vecs: Vec<Vec<f64>> = q_enc.iter().map(|(v, _)| v.clone()).collect();
    let c_vecs: Vec<Vec<f64>> = c_enc.iter().map(|(v, _)| v.clone()).collect();
    check_inputs(&q_vecs, &c_vecs, pos_index, tau)?;

    let b = queries.len() as f64;
    let d = params.dim;
    let mut loss = 0.0;
    let mut dq = vec![vec![0.0; d]; queries.len()];
    let mut dc = vec![vec![0.0; d]; pool.len()];
    for (i, q) in q_vecs.iter().enumerate() {
        let logits: Vec<f64> = c_vecs.iter().map(|c| dot(q, c) / tau).collect();
        let (probs, lse) = softmax_lse(&logits);
        loss += lse - logits[pos_index[i]];
        for (j, c) in c_vecs.iter().enumerate() {
            let target = if j == pos_index[i] { 1.0 } else { 0.0 };
            // d loss / d (q . c)
            let g = (probs[j] - target) / (b * tau);
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                dq[i][k] += g * c[k];
                dc[j][k] += g * q[k];
            }
        }
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    let mut grads = ParamGrads::zeros_like(params);
    for ((f, (v, n)), g) in queries.iter().zip(&q_enc).zip(&dq) {
        backprop_item(&mut grads, params, f, v, *n, g);
    }
    for ((f, (v, n)), g) in pool.iter().zip(&c_enc).zip(&dc) {
        backprop_item(&mut grads, params, f, v, *n, g);
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((loss, grads))
}

/// Loss of the composed map, evaluated by encoding then calling the loss.
pub fn composed_loss(
    queries: &[Features],
    pool: &[Features],
    pos_index: &[usize],
    params: &FusionParams,
    tau: f64,
) -> Result<f64> {
    let enc = |fs: &[Features]| -> Result<Vec<Vec<f64>>> {
        fs.iter()
            .map(|f| encode_features(f, params, "batch item").map(|(v, _)| v))
            .collect()
    };
    infonce_loss_vecs(&enc(queries)?, &enc(pool)?, pos_index, tau)
}
