use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{Graph, Real, Var};

/// Query score: the largest class probability, computed from logits
/// `[n, classes]` row-major. Sigmoid is monotone so the max logit decides.
pub fn query_scores<T: Real>(logits: &[T], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .map(|row| {
            let m = row
                .iter()
                .map(|v| v.f64())
                .fold(f64::NEG_INFINITY, f64::max);
            1.0 / (1.0 + (-m).exp())
        })
        .collect()
}

/// Indices of the `k` highest scores, best first; equal scores keep the
/// lower index first.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::contract(format!(
            "top-{k} of {} queries",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: ties stay in index order.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Query filter head: scores `queries: [n, d]` with `class_embed` and keeps
/// the top `k` rows. The ranking is routing only; gradients reach the kept
/// rows through the gather.
pub fn qfh_select<T: Real>(
    g: &mut Graph<'_, T>,
    queries: Var,
    k: usize,
    class_embed: &Linear,
) -> Result<(Var, Vec<usize>)> {
    let logits = class_embed.forward(g, queries)?;
    let scores = query_scores(g.value(logits), class_embed.dout);
    let idx = top_k(&scores, k)?;
    Ok((g.gather_rows(queries, &idx)?, idx))
}
