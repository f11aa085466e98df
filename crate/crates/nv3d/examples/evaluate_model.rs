//! Evaluate a model across context sizes: overlap score on segmentation,
//! reconstruction quality on denoising. With a trained checkpoint the table
//! shows accuracy climbing as more solved examples are provided; without
//! one a freshly initialized model is used, which pins the floor.
//!
//!     cargo run --release --example evaluate_model -- [checkpoint.ckpt]

use nv3d::io::{read_checkpoint, render_report};
use nv3d::net::{NetConfig, Network};
use nv3d::taskgen::TaskKind;
use nv3d::train::{evaluate, unpack_checkpoint, TrainConfig};
use nv3d::Result;

fn main() -> Result<()> {
    let side = 16;
    let net = match std::env::args().nth(1) {
        Some(path) => {
            let ck = read_checkpoint(path.as_ref())?;
            let (cfg, state): (TrainConfig, _) = unpack_checkpoint::<f32>(&ck)?;
            println!("loaded checkpoint {path} (trained {} steps)\n", state.step);
            let _ = cfg;
            state.net
        }
        None => {
            println!("no checkpoint given; evaluating an untrained model\n");
            Network::<f32>::init(NetConfig::default(), 0)?
        }
    };
    let rows = evaluate(
        &net,
        &[TaskKind::Segmentation, TaskKind::GaussianDenoise],
        &[1, 2, 4, 8],
        4,
        side,
        3,
        77,
    )?;
    print!("{}", render_report(&rows));
    Ok(())
}
