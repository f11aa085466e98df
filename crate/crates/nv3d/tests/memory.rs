//! Memory accounting proofs: the tensor byte counter is exact, the engine's
//! footprint tracks the chunk size rather than the context length, and the
//! instrumentation counters confirm every context pair is processed exactly
//! once per query. One test function on purpose: the byte counter is
//! process-global, so nothing else may allocate tensors while it runs.

use nv3d::apsp::apsp_forward;
use nv3d::check;
use nv3d::net::{NetConfig, Network};
use nv3d::tensor::{self, Tensor};

#[test]
fn memory_accounting() {
    // The counter must be exact to the byte for both element widths.
    let before = tensor::mem_stats().live_bytes;
    let t = Tensor::<f64>::zeros(vec![4, 10, 10, 10]);
    assert_eq!(tensor::mem_stats().live_bytes - before, 4 * 1000 * 8);
    drop(t);
    assert_eq!(tensor::mem_stats().live_bytes, before);
    let t32 = Tensor::<f32>::zeros(vec![4, 10, 10, 10]);
    assert_eq!(tensor::mem_stats().live_bytes - before, 4 * 1000 * 4);
    drop(t32);

    // The high-water mark survives a drop and collapses on reset.
    {
        let _big = Tensor::<f64>::zeros(vec![64, 16, 16, 16]);
    }
    assert!(tensor::mem_stats().peak_bytes >= before + 64 * 4096 * 8);
    let baseline = tensor::reset_peak();
    assert_eq!(tensor::mem_stats().peak_bytes, baseline);

    // Every pair runs through the context branch exactly once and the query
    // is encoded exactly once, no matter how the context is chunked.
    let net = Network::<f64>::init(NetConfig::with_stages(2, 4), 9).unwrap();
    let pairs = check::noise_pairs(6, 8, 101).unwrap();
    let x = check::noise_volume(8, 102).unwrap();
    for mini in [1usize, 2, 3, 6] {
        net.reset_counters();
        apsp_forward(&net, &x, &pairs, mini).unwrap();
        let (encodes, passes) = net.counters();
        assert_eq!(encodes, 1, "query encoded once with mini size {mini}");
        assert_eq!(passes, 6, "each pair visited once with mini size {mini}");
    }

    // Footprint bound: the peak at mini size 1 is set by the chunk, not the
    // number of pairs, and grows monotonically with the chunk size.
    let report = check::memory_checks();
    print!("{}", report.render());
    assert!(report.all_passed(), "{}", report.render());
}
