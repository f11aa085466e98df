//! The training trick in action: process chunks sequentially, backpropagate
//! through only the last one, and rescale so the gradient matches the full
//! pass in expectation. Here the expectation is taken exactly, by averaging
//! over every choice of retained chunk, and compared against the reference
//! full-context gradient per parameter. The two deliberately broken
//! rescalings show the comparison has teeth.
//!
//!     cargo run --release --example gradient_equivalence

use nv3d::apsp::GradMode;
use nv3d::check::{enumerated_mean_grads, full_context_grads, noise_pairs, noise_volume};
use nv3d::net::{NetConfig, Network};
use nv3d::taskgen::TaskKind;
use nv3d::Result;

fn main() -> Result<()> {
    let side = 8;
    let (total, mini) = (4usize, 2usize);
    let kind = TaskKind::GaussianDenoise;
    let net = Network::<f64>::init(NetConfig::with_stages(2, 4), 3)?;
    let pairs = noise_pairs(total, side, 21)?;
    let x = noise_volume(side, 22)?;
    let y = noise_volume(side, 23)?;

    let reference = full_context_grads(&net, &x, &y, &pairs, kind)?.1;
    let mean = enumerated_mean_grads(&net, &x, &y, &pairs, mini, kind, GradMode::Exact)?;

    println!("context {total}, chunks of {mini}: per-parameter max relative deviation\n");
    let mut worst = 0.0f64;
    for (name, r) in &reference {
        let m = &mean[name];
        let mut rel = 0.0f64;
        for (a, b) in m.data().iter().zip(r.data()) {
            rel = rel.max((a - b).abs() / b.abs().max(a.abs()).max(1e-12));
        }
        println!("  {name:<14} {rel:.3e}");
        worst = worst.max(rel);
    }
    println!("\nworst over all parameters: {worst:.3e}");

    for (mode, label) in [
        (GradMode::UnderScale, "chunk count off by one"),
        (GradMode::DropLenWeight, "chunk-length weight dropped"),
    ] {
        let broken = enumerated_mean_grads(&net, &x, &y, &pairs, mini, kind, mode)?;
        let mut rel = 0.0f64;
        for (name, r) in &reference {
            let m = &broken[name];
            for (a, b) in m.data().iter().zip(r.data()) {
                rel = rel.max((a - b).abs() / b.abs().max(a.abs()).max(1e-12));
            }
        }
        println!("faulty rescaling ({label}): deviation {rel:.3e}");
    }
    Ok(())
}
