//! Stream a long context through the model in small chunks and show that
//! the prediction is identical to processing everything at once, while the
//! peak footprint stays pinned to the chunk size.
//!
//!     cargo run --release --example stream_inference

use nv3d::apsp::apsp_forward;
use nv3d::check::{noise_pairs, noise_volume};
use nv3d::net::{NetConfig, Network};
use nv3d::tensor::{mem_stats, reset_peak};
use nv3d::Result;

fn main() -> Result<()> {
    let side = 16;
    let total = 12;
    let net = Network::<f64>::init(NetConfig::default(), 7)?;
    let pairs = noise_pairs(total, side, 11)?;
    let x = noise_volume(side, 12)?;

    // Everything at once: the reference prediction, and the footprint of
    // holding all 12 context activations simultaneously.
    let baseline = reset_peak();
    let reference = apsp_forward(&net, &x, &pairs, total)?;
    let full_peak = mem_stats().peak_bytes - baseline;
    println!("full context  (L={total:>2}): peak {:>6} KiB", full_peak / 1024);

    for mini in [1usize, 2, 3, 4] {
        let baseline = reset_peak();
        let y = apsp_forward(&net, &x, &pairs, mini)?;
        let peak = mem_stats().peak_bytes - baseline;
        println!(
            "chunks of {mini}  (L={total:>2}): peak {:>6} KiB, max |diff| vs full {:.2e}",
            peak / 1024,
            y.max_abs_diff(&reference)
        );
    }

    // The promise in one sentence: with chunks of 1, a context 4x longer
    // costs the same memory.
    let short = noise_pairs(3, side, 13)?;
    let baseline = reset_peak();
    apsp_forward(&net, &x, &short, 1)?;
    let short_peak = mem_stats().peak_bytes - baseline;
    let baseline = reset_peak();
    apsp_forward(&net, &x, &pairs, 1)?;
    let long_peak = mem_stats().peak_bytes - baseline;
    println!(
        "\nchunk size 1: L=3 peaks at {} KiB, L={total} at {} KiB ({:+.1}%)",
        short_peak / 1024,
        long_peak / 1024,
        100.0 * (long_peak as f64 - short_peak as f64) / short_peak as f64
    );
    Ok(())
}
