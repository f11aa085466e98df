//! Sample one episode per task family and describe what came out: shapes,
//! label statistics, corruption levels. Pass a directory to also dump the
//! target pair as `.nvol` volumes:
//!
//!     cargo run --release --example generate_episodes -- /tmp/episodes

use std::path::PathBuf;

use nv3d::io::write_nvol;
use nv3d::taskgen::{sample_episode, TaskKind, TaskSpec};
use nv3d::tensor::Tensor;
use nv3d::Result;

fn foreground_fraction(t: &Tensor<f64>) -> f64 {
    let n = t.numel() as f64;
    t.data().iter().filter(|&&v| v > 0.5).count() as f64 / n
}

fn range(t: &Tensor<f64>) -> (f64, f64) {
    t.data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn main() -> Result<()> {
    let out: Option<PathBuf> = std::env::args().nth(1).map(PathBuf::from);
    let side = 16;
    let context = 3;

    for (i, kind) in TaskKind::ALL.iter().enumerate() {
        let spec = TaskSpec::new(*kind, side).with_augment(false);
        let ep = sample_episode(&spec, context, 1000 + i as u64)?;
        let (in_lo, in_hi) = range(&ep.target.input);
        let (out_lo, out_hi) = range(&ep.target.output);
        println!("{}", kind.name());
        println!(
            "  {} context pairs + 1 target, volumes {:?}",
            ep.context.len(),
            ep.target.input.shape()
        );
        println!("  input range  [{in_lo:+.3}, {in_hi:+.3}]");
        println!("  output range [{out_lo:+.3}, {out_hi:+.3}]");
        if matches!(kind, TaskKind::Segmentation) {
            println!(
                "  foreground fraction: target {:.3}, context {:?}",
                foreground_fraction(&ep.target.output),
                ep.context
                    .iter()
                    .map(|p| (foreground_fraction(&p.output) * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            );
        }
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            let stem = kind.name();
            write_nvol(
                &dir.join(format!("{stem}_input.nvol")),
                &ep.target.input.cast::<f32>(),
            )?;
            write_nvol(
                &dir.join(format!("{stem}_output.nvol")),
                &ep.target.output.cast::<f32>(),
            )?;
        }
    }
    if let Some(dir) = &out {
        println!("\nwrote target pairs under {}", dir.display());
    }
    Ok(())
}
