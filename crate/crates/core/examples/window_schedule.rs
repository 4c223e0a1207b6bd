//! Sliding-window plans for lite inference: sequential windows with a
//! sampling interval, shuffled windows, and reassembly of per-window
//! outputs back into frame order.

use stvod::schedule::{plan_video, reassemble, PlanMode};

fn main() -> stvod::error::Result<()> {
    let n = 10;
    for (t_w, i_w, mode) in [
        (4, 1, PlanMode::Sequential),
        (3, 2, PlanMode::Sequential),
        (4, 1, PlanMode::Shuffled),
    ] {
        let plan = plan_video(n, t_w, i_w, mode, 42)?;
        println!("{mode} T_w={t_w} I_w={i_w}:");
        for w in &plan.windows {
            let frames: Vec<usize> = w.iter().map(|&x| plan.frame_of(x)).collect();
            println!("  slots {w:?} -> frames {frames:?}");
        }
        // Each window "predicts" its frame indices; reassembly must give 0..n.
        let outputs: Vec<Vec<usize>> = plan
            .windows
            .iter()
            .map(|w| w.iter().map(|&x| plan.frame_of(x)).collect())
            .collect();
        let back = reassemble(&plan, &outputs)?;
        println!("  reassembled: {back:?}");
    }
    Ok(())
}
