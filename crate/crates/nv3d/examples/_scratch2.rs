//! Micro-timing for the building-block kernels, useful when tuning the
//! straight-line performance of the compute path on a new machine.
//!
//! Run with: cargo run --example profile_kernels

use std::time::Instant;

use nv3d::net::{NetConfig, Network, ValueExec};
use nv3d::tensor::{conv3d, conv3d_backward, gelu, Tensor};
use nv3d::Result;

fn time<R>(label: &str, reps: usize, mut f: impl FnMut() -> Result<R>) -> Result<()> {
    f()?; // warm up
    let t0 = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{label:<38} {:>9.3} ms", per * 1e3);
    Ok(())
}

fn main() -> Result<()> {
    let side = 16usize;
    let c = 8usize;
    let x = Tensor::<f32>::from_fn(vec![c, side, side, side], |i| (i % 13) as f32 * 0.07);
    let w = Tensor::<f32>::from_fn(vec![c, c, 3, 3, 3], |i| ((i % 7) as f32 - 3.0) * 0.02);
    let b = Tensor::<f32>::zeros(vec![c]);

    time("conv3d 8->8 @16^3 stride 1", 20, || conv3d(&x, &w, &b, 1, 1))?;
    time("conv3d 8->8 @16^3 stride 2", 20, || conv3d(&x, &w, &b, 2, 1))?;
    let xd = x.cast::<f64>();
    let wd = w.cast::<f64>();
    let bd = b.cast::<f64>();
    time("conv3d 8->8 @16^3 stride 1 (f64)", 20, || {
        conv3d(&xd, &wd, &bd, 1, 1)
    })?;
    let go = conv3d(&x, &w, &b, 1, 1)?;
    time("conv3d backward (full)", 20, || {
        conv3d_backward(&x, &w, &go, 1, 1, true)
    })?;
    time("gelu @ 8x16^3", 50, || Ok(gelu(&x)))?;

    let net = Network::<f32>::init(NetConfig::default(), 0)?;
    let vol = Tensor::<f32>::from_fn(vec![1, side, side, side], |i| (i % 11) as f32 * 0.09);
    time("target_encode (3-stage, base 8)", 8, || {
        let mut e = ValueExec::new(&net.params);
        net.target_encode(&mut e, &vol)
    })?;
    let pair = Tensor::<f32>::from_fn(vec![2, side, side, side], |i| (i % 11) as f32 * 0.09);
    time("context_pass (one pair)", 8, || {
        let mut e = ValueExec::new(&net.params);
        let tf = net.target_encode(&mut e, &vol)?;
        net.context_branch(&mut e, &tf, std::slice::from_ref(&pair))
    })?;
    Ok(())
}
