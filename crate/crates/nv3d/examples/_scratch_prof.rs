//! Temporary: per-op cost breakdown at the shapes one context pass uses.

use std::time::Instant;

use nv3d::net::{Exec, NetConfig, Network, ValueExec};
use nv3d::tensor::{concat_channels, conv3d, gelu, upsample_nearest2x, Tensor};
use nv3d::Result;

fn time<R>(label: &str, reps: usize, mut f: impl FnMut() -> Result<R>) -> Result<()> {
    f()?;
    let t0 = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{label:<44} {:>9.3} ms", per * 1e3);
    Ok(())
}

fn main() -> Result<()> {
    let t = |c: usize, s: usize, sc: f32| {
        Tensor::<f32>::from_fn(vec![c, s, s, s], move |i| (i % 13) as f32 * sc)
    };
    let k = |co: usize, ci: usize| {
        Tensor::<f32>::from_fn(vec![co, ci, 3, 3, 3], |i| ((i % 7) as f32 - 3.0) * 0.02)
    };
    let b = |co: usize| Tensor::<f32>::zeros(vec![co]);

    let xh = t(8, 16, 0.1);
    let kh = k(8, 8);
    let bh = b(8);
    time("conv 8->8 @16^3 hoisted inputs", 30, || {
        conv3d(&xh, &kh, &bh, 1, 1)
    })?;

    // every stride-1 conv shape in one desk-scale context pass
    time("conv 2->8 @16^3 (stem)", 30, || {
        conv3d(&t(2, 16, 0.1), &k(8, 2), &b(8), 1, 1)
    })?;
    time("conv 8->8 @16^3 (rb)", 30, || {
        conv3d(&t(8, 16, 0.1), &k(8, 8), &b(8), 1, 1)
    })?;
    time("conv 16->8 @16^3 (fuse/skip)", 30, || {
        conv3d(&t(16, 16, 0.1), &k(8, 16), &b(8), 1, 1)
    })?;
    time("conv 16->16 @8^3 (rb)", 30, || {
        conv3d(&t(16, 8, 0.1), &k(16, 16), &b(16), 1, 1)
    })?;
    time("conv 32->16 @8^3 (fuse/skip/up)", 30, || {
        conv3d(&t(32, 8, 0.1), &k(16, 32), &b(16), 1, 1)
    })?;
    time("conv 32->32 @4^3 (rb)", 30, || {
        conv3d(&t(32, 4, 0.1), &k(32, 32), &b(32), 1, 1)
    })?;
    time("conv 64->32 @4^3 (fuse)", 30, || {
        conv3d(&t(64, 4, 0.1), &k(32, 64), &b(32), 1, 1)
    })?;
    time("conv 8->16 @16^3 s2 (down)", 30, || {
        conv3d(&t(8, 16, 0.1), &k(16, 8), &b(16), 2, 1)
    })?;
    time("conv 16->32 @8^3 s2 (down)", 30, || {
        conv3d(&t(16, 8, 0.1), &k(32, 16), &b(32), 2, 1)
    })?;
    time("gelu 8 @16^3", 60, || Ok(gelu(&t(8, 16, 0.1))))?;
    time("upsample2x 16: 8^3 -> 16^3", 30, || {
        upsample_nearest2x(&t(16, 8, 0.1))
    })?;
    time("upsample2x 32: 4^3 -> 8^3", 30, || {
        upsample_nearest2x(&t(32, 4, 0.1))
    })?;
    time("concat 8+8 @16^3", 60, || {
        concat_channels(&t(8, 16, 0.1), &t(8, 16, 0.2))
    })?;

    let net = Network::<f32>::init(NetConfig::default(), 0)?;
    let vol = t(1, 16, 0.09);
    let pair = t(2, 16, 0.09);
    let mut e = ValueExec::new(&net.params);
    let tf = net.target_encode(&mut e, &vol)?;
    time("context_pass alone (one pair)", 8, || {
        let mut e = ValueExec::new(&net.params);
        let h = e.input(&pair);
        net.context_pass(&mut e, &tf, &h)
    })?;
    Ok(())
}
