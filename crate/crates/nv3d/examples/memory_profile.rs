//! Peak tensor bytes of one prediction as a table over context length and
//! chunk size. Down a column the context grows; if streaming does its job
//! the numbers barely move. Across a row the chunk grows and the footprint
//! grows with it.
//!
//!     cargo run --release --example memory_profile

use nv3d::apsp::apsp_forward;
use nv3d::check::{noise_pairs, noise_volume};
use nv3d::net::{NetConfig, Network};
use nv3d::tensor::{mem_stats, reset_peak};
use nv3d::Result;

fn main() -> Result<()> {
    let side = 16;
    let net = Network::<f32>::init(NetConfig::default(), 5)?;
    let x = noise_volume(side, 6)?.cast::<f32>();
    let minis = [1usize, 2, 4, 8];
    let totals = [1usize, 2, 4, 8, 16];

    print!("{:>6}", "L\\mini");
    for m in minis {
        print!("{m:>10}");
    }
    println!("   (peak KiB per prediction, {side}^3 volumes, f32)");

    for total in totals {
        let pairs = noise_pairs(total, side, 100 + total as u64)?
            .iter()
            .map(|p| p.cast::<f32>())
            .collect::<Vec<_>>();
        print!("{total:>6}");
        for mini in minis {
            let baseline = reset_peak();
            apsp_forward(&net, &x, &pairs, mini)?;
            let peak = mem_stats().peak_bytes - baseline;
            print!("{:>10}", peak / 1024);
        }
        println!();
    }
    Ok(())
}
