use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{composed_loss, infonce_grad};
use crate::encoder::{Features, FusionParams};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const MIN_COORDS: usize = 200;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Coordinates whose feature column is non-zero for some item in the batch.
fn active_coords(p: &FusionParams, items: &[&Features]) -> Vec<usize> {
    let mut text_cols = BTreeSet::new();
    let mut image_cols = BTreeSet::new();
    for f in items {
        if let Some(t) = &f.text {
            text_cols.extend(t.entries.iter().map(|&(j, _)| j as usize));
        }
        if let Some(img) = &f.image {
            image_cols.extend(
                img.iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(j, _)| j),
            );
        }
    }
    let mut out = Vec::new();
    for k in 0..p.dim {
        out.extend(text_cols.iter().map(|&j| k * p.text_dim + j));
    }
    let off = p.w_text.len();
    for k in 0..p.dim {
        out.extend(image_cols.iter().map(|&j| off + k * p.image_dim + j));
    }
    out
}

/// Compare the analytic gradient against central differences on at least
/// `MIN_COORDS` coordinates (all of them when the model is that small).
pub fn grad_check(
    params: &FusionParams,
    queries: &[Features],
    pool: &[Features],
    pos_index: &[usize],
    tau: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = infonce_grad(queries, pool, pos_index, params, tau)?;
    let coords: Vec<usize> = if params.num_params() <= MIN_COORDS {
        (0..params.num_params()).collect()
    } else {
        let items: Vec<&Features> = queries.iter().chain(pool).collect();
        let active = active_coords(params, &items);
        if active.len() <= MIN_COORDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: BTreeSet<usize> = active.into_iter().collect();
            let extra = sample(
                &mut rng,
                params.num_params(),
                MIN_COORDS.min(params.num_params()),
            );
            all.extend(extra.iter());
            all.into_iter().collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = sample(&mut rng, active.len(), MIN_COORDS)
                .iter()
                .map(|i| active[i])
                .collect();
            picked.sort_unstable();
            picked
        }
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        coords_checked: coords.len(),
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for &c in &coords {
        let orig = probe.get(c);
        *probe.get_mut(c) = orig + FD_STEP;
        let up = composed_loss(queries, pool, pos_index, &probe, tau)?;
        *probe.get_mut(c) = orig - FD_STEP;
        let down = composed_loss(queries, pool, pos_index, &probe, tau)?;
        *probe.get_mut(c) = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads.get(c);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = c;
            report.analytic_at_worst = analytic;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
