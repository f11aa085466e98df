//! A tiny end-to-end training run on an 8^3 two-stage model: enough to watch
//! the loss fall and the validation hook fire, quick enough for a coffee
//! break. Nothing here is tuned for quality; see the README for the
//! desk-scale recipe.
//!
//!     cargo run --release --example train_smoke

use nv3d::net::NetConfig;
use nv3d::taskgen::TaskKind;
use nv3d::train::{train, TrainConfig};
use nv3d::Result;

fn main() -> Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.steps = 150;
    cfg.side = 8;
    cfg.net = NetConfig::with_stages(2, 4);
    cfg.tasks = vec![TaskKind::Segmentation, TaskKind::GaussianDenoise];
    cfg.seed = 4;
    cfg.log_every = 25;
    cfg.val_interval = 75;
    cfg.val_episodes = 4;

    let result = train::<f32>(&cfg, None, |line| println!("{line}"))?;
    println!(
        "\n{} steps: loss {:.4} -> {:.4}, best validation {:.4}",
        result.steps_done, result.first_loss, result.last_loss, result.best_val
    );
    Ok(())
}
