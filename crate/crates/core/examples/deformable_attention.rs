//! Multi-frame deformable attention: the attention weights of each head sum
//! to one over all frames and points, and with zero offsets every sample
//! lands on the reference point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stvod::attention::{DeformableAttention, ReferencePoints};
use stvod::numerics::{Graph, Init, ParamStore, Tensor};

fn main() -> stvod::error::Result<()> {
    let (d, heads, points, frames) = (8, 2, 3, 2);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let attn = DeformableAttention::new(
        &mut Init::new(&mut store, &mut rng),
        "attn",
        d,
        heads,
        points,
        frames,
    )?;

    let mut g = Graph::inference(&store);
    let q = Tensor::from_fn(vec![4, d], |i| ((i * 37 % 17) as f64 - 8.0) / 8.0);
    let q = g.leaf(&q, false);
    let refs =
        ReferencePoints::new([[0.2, 0.3], [0.5, 0.5], [0.9, 0.1], [0.0, 1.0]]).to_var(&mut g);
    let maps: Vec<_> = (0..frames)
        .map(|l| {
            let m = Tensor::from_fn(vec![6, 6, d], |i| ((i + 13 * l) % 9) as f64 / 9.0);
            g.leaf(&m, false)
        })
        .collect();
    let (out, weights) = attn.forward_with_weights(&mut g, q, refs, &maps)?;
    let cols = frames * points;
    for (row, w) in g.value(weights).chunks(cols).enumerate() {
        println!(
            "query {} head {}: sum of weights = {:.6}",
            row / heads,
            row % heads,
            w.iter().sum::<f64>()
        );
    }
    println!("output shape {:?}", g.shape(out));

    attn.zero_offsets(&mut store);
    let mut g = Graph::inference(&store);
    let q = g.leaf(&Tensor::from_fn(vec![1, d], |i| i as f64 / d as f64), false);
    let refs = ReferencePoints::new([[0.4, 0.6]]).to_var(&mut g);
    let maps: Vec<_> = (0..frames)
        .map(|l| {
            g.leaf(
                &Tensor::from_fn(vec![6, 6, d], |i| ((i + l) % 5) as f64),
                false,
            )
        })
        .collect();
    let out = attn.forward(&mut g, q, refs, &maps)?;
    println!("zero offsets: output {:?}", &g.value(out)[..4]);
    Ok(())
}
