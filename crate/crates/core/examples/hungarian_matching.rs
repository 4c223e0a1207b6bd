//! Optimal assignment of predictions to ground truths on a small cost
//! matrix, with the exhaustive minimum for comparison.

use stvod::matching::hungarian_match;

fn main() -> stvod::error::Result<()> {
    // Four predictions (rows) against three ground truths (columns).
    let cost = [
        4.0, 1.0, 3.0, //
        2.0, 0.0, 5.0, //
        3.0, 2.0, 2.0, //
        0.5, 4.0, 4.0,
    ];
    let (n_pred, n_gt) = (4, 3);
    let m = hungarian_match(&cost, n_pred, n_gt)?;
    println!("pairs (pred, gt): {:?}", m.pairs);
    println!("unmatched predictions: {:?}", m.unmatched);
    println!("total cost: {}", m.total_cost(&cost, n_gt));

    let mut best = f64::INFINITY;
    for a in 0..n_pred {
        for b in (0..n_pred).filter(|&b| b != a) {
            for c in (0..n_pred).filter(|&c| c != a && c != b) {
                best = best.min(cost[a * n_gt] + cost[b * n_gt + 1] + cost[c * n_gt + 2]);
            }
        }
    }
    println!("brute force minimum: {best}");
    Ok(())
}
