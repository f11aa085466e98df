//! Self-verification suites: partition/order invariance, a brute-force
//! cross-path oracle, exact gradient-equivalence by enumeration, fault
//! injection that must be caught, finite-difference checks, memory-bound
//! checks and generator contracts. Tolerances and workloads are pinned here
//! as constants so every caller (CLI and tests) checks the same thing.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::apsp::{
    apsp_forward, apsp_train_forward_with_plan, ContextPair, GradMode, PartitionPlan,
};
use crate::error::{Error, Result};
use crate::losses;
use crate::net::{NetConfig, Network, ValueExec};
use crate::taskgen::{self, corrupt, noise, TaskKind, TaskSpec};
use crate::tensor::{self, Scalar, Tensor};

// ---------------------------------------------------------------------------
// Pinned workloads and tolerances.

/// Partition invariance: context size, mini sizes, fresh seeds, bounds.
pub const PART_TOTAL: usize = 8;
pub const PART_MINIS: [usize; 5] = [1, 2, 3, 4, 8];
pub const PART_SEEDS: u64 = 20;
pub const PART_TOL_F64: f64 = 1e-10;
pub const PART_TOL_F32_REL: f64 = 1e-4;
/// Order invariance: number of random permutations.
pub const ORDER_PERMS: usize = 20;
/// Gradient equivalence: (context size, mini size) cases and bound.
pub const EQUIV_CASES: [(usize, usize); 2] = [(4, 2), (6, 2)];
pub const EQUIV_TOL: f64 = 1e-8;
/// A fault injection must blow past this margin to count as detected.
pub const FAULT_MARGIN: f64 = 1e-4;
/// Finite differences.
pub const FD_TOL_KERNEL: f64 = 1e-5;
pub const FD_TOL_LOSS: f64 = 1e-6;
pub const KNEE_TOL: f64 = 1e-12;
/// Cross-path oracle bound.
pub const ORACLE_TOL: f64 = 1e-10;
/// Memory: L=1 vs L=16 at mini 1 must agree within this relative band.
pub const MEM_RATIO: f64 = 0.10;
pub const MEM_TOTAL: usize = 16;
pub const MEM_MINIS: [usize; 5] = [1, 2, 4, 8, 16];

/// Small but fully featured network used by the fast checks.
fn check_config() -> NetConfig {
    NetConfig::with_stages(2, 4)
}

/// Desk-scale configuration exercised by a slower spot check.
fn desk_config() -> NetConfig {
    NetConfig::default()
}

// ---------------------------------------------------------------------------
// Report plumbing.

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn run(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let started = Instant::now();
        let (passed, detail) = match f() {
            Ok((ok, d)) => (ok, d),
            Err(e) => (false, format!("errored: {e}")),
        };
        let secs = started.elapsed().as_secs_f64();
        self.lines.push(CheckLine {
            name: name.to_string(),
            passed,
            detail: format!("{detail} [{secs:.2}s]"),
        });
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.lines.extend(other.lines);
    }

    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let tag = if l.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{tag}  {:<32}  {}\n", l.name, l.detail));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Deterministic fixtures.

/// Smooth random volume with values in roughly [0.1, 0.9].
pub fn noise_volume(side: usize, seed: u64) -> Result<Tensor<f64>> {
    let n = noise::value_noise(side, 4, seed)?;
    let data: Vec<f64> = n.data().iter().map(|&v| 0.5 + 0.4 * v).collect();
    Tensor::new(n.shape(), data)
}

/// Deterministic context pairs built from smooth noise volumes.
pub fn noise_pairs(count: usize, side: usize, seed: u64) -> Result<Vec<ContextPair<f64>>> {
    (0..count)
        .map(|i| {
            let image = noise_volume(side, seed + 2 * i as u64)?;
            let label = noise_volume(side, seed + 2 * i as u64 + 1)?;
            ContextPair::new(image, label)
        })
        .collect()
}

fn cast_pairs<T: Scalar>(pairs: &[ContextPair<f64>]) -> Vec<ContextPair<T>> {
    pairs.iter().map(|p| p.cast::<T>()).collect()
}

fn global_rel(diff: f64, reference: f64) -> f64 {
    diff / reference.max(1e-12)
}

fn max_abs<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().fold(0.0f64, |a, &v| a.max(v.to_f64().abs()))
}

// ---------------------------------------------------------------------------
// Brute-force oracle: an independent full-materialization forward pass.

/// Reference prediction computed the expensive way: run every context pair
/// through the context branch, keep ALL features, average them with a plain
/// ascending-order loop, then decode. Shares only the network building
/// blocks with the streaming path — no partition plans, no running means,
/// no batched reduction.
pub fn brute_force_forward(
    net: &Network<f64>,
    x: &Tensor<f64>,
    pairs: &[ContextPair<f64>],
) -> Result<Tensor<f64>> {
    if pairs.is_empty() {
        return Err(Error::invalid("brute-force forward needs context pairs"));
    }
    let mut e = ValueExec::new(&net.params);
    let tf = net.target_encode(&mut e, x)?;
    let inputs: Vec<Tensor<f64>> = pairs.iter().map(|p| p.to_input()).collect::<Result<_>>()?;
    let all = net.context_branch(&mut e, &tf, &inputs)?;
    let stages = all[0].len();
    let mut means = Vec::with_capacity(stages);
    for i in 0..stages {
        let mut acc = vec![0.0f64; all[0][i].numel()];
        for feats in &all {
            for (a, &v) in acc.iter_mut().zip(feats[i].data()) {
                *a += v;
            }
        }
        let inv = 1.0 / all.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        means.push(Tensor::new(all[0][i].shape(), acc)?);
    }
    net.target_decode(&mut e, &tf, &means)
}

// ---------------------------------------------------------------------------
// Gradient-equivalence machinery.

/// Exact expectation of the training gradient over every choice of the
/// retained chunk, each choice weighted 1/n.
pub fn enumerated_mean_grads(
    net: &Network<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    pairs: &[ContextPair<f64>],
    mini: usize,
    kind: TaskKind,
    mode: GradMode,
) -> Result<BTreeMap<String, Tensor<f64>>> {
    let n = PartitionPlan::new(pairs.len(), mini)?.n;
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for retained in 0..n {
        let plan = PartitionPlan::with_retained(pairs.len(), mini, retained)?;
        let (_, grads) = apsp_train_forward_with_plan(net, x, y, pairs, &plan, kind, mode)?;
        for (name, g) in grads {
            let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (a, &v) in slot.iter_mut().zip(g.data()) {
                *a += v / n as f64;
            }
            shapes.entry(name).or_insert_with(|| g.shape().to_vec());
        }
    }
    acc.into_iter()
        .map(|(name, data)| {
            let shape = shapes[&name].clone();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect()
}

/// The unchunked reference gradient: one chunk holding the whole context
/// (mini = L), which degenerates to the ordinary full-context backward pass.
pub fn full_context_grads(
    net: &Network<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    pairs: &[ContextPair<f64>],
    kind: TaskKind,
) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
    let plan = PartitionPlan::new(pairs.len(), pairs.len())?;
    apsp_train_forward_with_plan(net, x, y, pairs, &plan, kind, GradMode::Exact)
}

/// Worst per-parameter relative infinity-norm difference between two
/// gradient tables.
pub fn max_rel_table_diff(
    a: &BTreeMap<String, Tensor<f64>>,
    b: &BTreeMap<String, Tensor<f64>>,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, ga) in a {
        let gb = &b[name];
        let diff = ga.max_abs_diff(gb);
        let scale = max_abs(gb).max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

fn equivalence_case(
    net: &Network<f64>,
    total: usize,
    mini: usize,
    kind: TaskKind,
    mode: GradMode,
    seed: u64,
) -> Result<f64> {
    let side = 8;
    let pairs = noise_pairs(total, side, seed)?;
    let x = noise_volume(side, seed + 100)?;
    let y = noise_volume(side, seed + 101)?;
    let mean = enumerated_mean_grads(net, &x, &y, &pairs, mini, kind, mode)?;
    let (_, reference) = full_context_grads(net, &x, &y, &pairs, kind)?;
    Ok(max_rel_table_diff(&mean, &reference))
}

// ---------------------------------------------------------------------------
// Invariance suite.

pub fn invariant_checks() -> CheckReport {
    let mut report = CheckReport::default();
    let side = 8;

    report.run("partition-invariance-f64", || {
        let net = Network::<f64>::init(check_config(), 11)?;
        let mut worst = 0.0f64;
        for seed in 0..PART_SEEDS {
            let pairs = noise_pairs(PART_TOTAL, side, 1000 + 37 * seed)?;
            let x = noise_volume(side, 2000 + seed)?;
            let reference = apsp_forward(&net, &x, &pairs, PART_TOTAL)?;
            for &mini in &PART_MINIS {
                let y = apsp_forward(&net, &x, &pairs, mini)?;
                worst = worst.max(y.max_abs_diff(&reference));
            }
        }
        Ok((
            worst <= PART_TOL_F64,
            format!("max |Δ| {worst:.2e} over {PART_SEEDS} seeds (tol {PART_TOL_F64:.0e})"),
        ))
    });

    report.run("partition-invariance-f32", || {
        let net = Network::<f64>::init(check_config(), 11)?.cast::<f32>();
        let mut worst = 0.0f64;
        for seed in 0..PART_SEEDS {
            let pairs64 = noise_pairs(PART_TOTAL, side, 1000 + 37 * seed)?;
            let pairs = cast_pairs::<f32>(&pairs64);
            let x = noise_volume(side, 2000 + seed)?.cast::<f32>();
            let reference = apsp_forward(&net, &x, &pairs, PART_TOTAL)?;
            let scale = max_abs(&reference);
            for &mini in &PART_MINIS {
                let y = apsp_forward(&net, &x, &pairs, mini)?;
                worst = worst.max(global_rel(y.max_abs_diff(&reference), scale));
            }
        }
        Ok((
            worst <= PART_TOL_F32_REL,
            format!("max rel Δ {worst:.2e} over {PART_SEEDS} seeds (tol {PART_TOL_F32_REL:.0e})"),
        ))
    });

    report.run("order-invariance", || {
        let net = Network::<f64>::init(check_config(), 11)?;
        let pairs = noise_pairs(PART_TOTAL, side, 5000)?;
        let x = noise_volume(side, 5003)?;
        let reference = apsp_forward(&net, &x, &pairs, 3)?;
        let net32 = net.cast::<f32>();
        let pairs32 = cast_pairs::<f32>(&pairs);
        let x32 = x.cast::<f32>();
        let ref32 = apsp_forward(&net32, &x32, &pairs32, 3)?;
        let scale32 = max_abs(&ref32);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let mut worst64 = 0.0f64;
        let mut worst32 = 0.0f64;
        for _ in 0..ORDER_PERMS {
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rng);
            let y = apsp_forward(&net, &x, &shuffled, 3)?;
            worst64 = worst64.max(y.max_abs_diff(&reference));
            let shuffled32 = cast_pairs::<f32>(&shuffled);
            let y32 = apsp_forward(&net32, &x32, &shuffled32, 3)?;
            worst32 = worst32.max(global_rel(y32.max_abs_diff(&ref32), scale32));
        }
        Ok((
            worst64 <= PART_TOL_F64 && worst32 <= PART_TOL_F32_REL,
            format!(
                "{ORDER_PERMS} permutations: f64 max |Δ| {worst64:.2e}, f32 max rel {worst32:.2e}"
            ),
        ))
    });

    report.run("cross-path-oracle", || {
        let net = Network::<f64>::init(check_config(), 23)?;
        let mut worst = 0.0f64;
        for total in 1..=4usize {
            let pairs = noise_pairs(total, side, 7000 + 13 * total as u64)?;
            let x = noise_volume(side, 7100 + total as u64)?;
            let oracle = brute_force_forward(&net, &x, &pairs)?;
            for mini in 1..=total {
                let y = apsp_forward(&net, &x, &pairs, mini)?;
                worst = worst.max(y.max_abs_diff(&oracle));
            }
        }
        Ok((
            worst <= ORACLE_TOL,
            format!("max |Δ| vs full materialization {worst:.2e} (tol {ORACLE_TOL:.0e})"),
        ))
    });

    report.run("desk-scale-spot", || {
        let net = Network::<f64>::init(desk_config(), 3)?;
        let pairs = noise_pairs(4, 16, 9000)?;
        let x = noise_volume(16, 9005)?;
        let reference = apsp_forward(&net, &x, &pairs, 4)?;
        let mut worst = 0.0f64;
        for mini in [1usize, 2, 3] {
            let y = apsp_forward(&net, &x, &pairs, mini)?;
            worst = worst.max(y.max_abs_diff(&reference));
        }
        Ok((
            worst <= PART_TOL_F64,
            format!("16³ / 3-stage: max |Δ| {worst:.2e}"),
        ))
    });

    report.extend(memory_checks());
    report.extend(generator_checks());
    report
}

// ---------------------------------------------------------------------------
// Memory suite.

/// Peak-allocation checks under a private single-thread pool so transient
/// buffers are deterministic. The counters are process-global: run this
/// without other threads allocating tensors concurrently.
pub fn memory_checks() -> CheckReport {
    memory_checks_with(check_config(), 8)
}

/// Same checks against an arbitrary architecture and volume side.
pub fn memory_checks_with(cfg: NetConfig, side: usize) -> CheckReport {
    let mut report = CheckReport::default();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
        Ok(p) => p,
        Err(e) => {
            report.lines.push(CheckLine {
                name: "memory-pool".into(),
                passed: false,
                detail: format!("cannot build single-thread pool: {e}"),
            });
            return report;
        }
    };
    pool.install(|| {
        let prep = (|| -> Result<(Network<f64>, Vec<ContextPair<f64>>, Tensor<f64>)> {
            let net = Network::<f64>::init(cfg, 31)?;
            let pairs = noise_pairs(MEM_TOTAL, side, 4000)?;
            let x = noise_volume(side, 4100)?;
            Ok((net, pairs, x))
        })();
        let (net, pairs, x) = match prep {
            Ok(v) => v,
            Err(e) => {
                report.lines.push(CheckLine {
                    name: "memory-fixtures".into(),
                    passed: false,
                    detail: format!("errored: {e}"),
                });
                return;
            }
        };
        let measure = |l: usize, mini: usize| -> Result<usize> {
            let slice = &pairs[..l];
            let baseline = tensor::reset_peak();
            let y = apsp_forward(&net, &x, slice, mini)?;
            let peak = tensor::mem_stats().peak_bytes;
            drop(y);
            Ok(peak - baseline)
        };

        report.run("memory-chunk-bound", || {
            let p1 = measure(1, 1)?;
            let p16 = measure(MEM_TOTAL, 1)?;
            let rel = (p16 as f64 - p1 as f64).abs() / p16.max(p1) as f64;
            Ok((
                rel <= MEM_RATIO,
                format!(
                    "mini 1: peak {p1} B at L=1 vs {p16} B at L={MEM_TOTAL} (rel Δ {rel:.3})"
                ),
            ))
        });

        report.run("memory-monotone-in-mini", || {
            let mut peaks = Vec::new();
            for &mini in &MEM_MINIS {
                peaks.push(measure(MEM_TOTAL, mini)?);
            }
            let mut ok = true;
            for w in peaks.windows(2) {
                if (w[1] as f64) < w[0] as f64 * 0.98 {
                    ok = false;
                }
            }
            let grew = peaks[MEM_MINIS.len() - 1] > peaks[0];
            Ok((
                ok && grew,
                format!("peaks at mini {MEM_MINIS:?}: {peaks:?} bytes"),
            ))
        });
    });
    report
}

// ---------------------------------------------------------------------------
// Generator contracts.

pub fn generator_checks() -> CheckReport {
    let mut report = CheckReport::default();

    report.run("generator-foreground-fraction", || {
        let mut lo = 1.0f64;
        let mut hi = 0.0f64;
        for seed in 0..100 {
            let p = taskgen::synth_phantom(8, 4, seed)?;
            let fg = p.labels.data().iter().filter(|&&v| v > 0.0).count() as f64
                / p.labels.numel() as f64;
            lo = lo.min(fg);
            hi = hi.max(fg);
            if !(0.05..=0.6).contains(&fg) {
                return Ok((false, format!("seed {seed}: fraction {fg} outside [0.05, 0.6]")));
            }
        }
        Ok((true, format!("100 seeds, fractions in [{lo:.3}, {hi:.3}]")))
    });

    report.run("generator-noise-sigma", || {
        let x = Tensor::full(&[1usize, 8, 8, 8][..], 0.5f64);
        let mut sigmas = Vec::new();
        for seed in 0..100 {
            let (_, sigma) = corrupt::add_gaussian_noise(&x, seed)?;
            if !(0.15..0.25).contains(&sigma) {
                return Ok((false, format!("seed {seed}: sigma {sigma} outside [0.15, 0.25)")));
            }
            sigmas.push(sigma);
        }
        let mean: f64 = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
        // Uniform(0.15, 0.25): mean 0.2, sd 0.1/sqrt(12); 3-sigma band on the
        // sample mean of 100 draws.
        let band = 3.0 * (0.1 / 12f64.sqrt()) / 10.0;
        Ok((
            (mean - 0.2).abs() < band,
            format!("sigma mean {mean:.4} (band ±{band:.4})"),
        ))
    });

    report.run("generator-impulse-fractions", || {
        let x = Tensor::full(&[1usize, 22, 22, 22][..], 0.5f64);
        let y = corrupt::add_salt_pepper(&x, 99)?;
        let n = y.numel() as f64;
        let salt = y.data().iter().filter(|&&v| v == 1.0).count() as f64 / n;
        let pepper = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n;
        let stray = y
            .data()
            .iter()
            .filter(|&&v| v != 0.0 && v != 1.0 && v != 0.5)
            .count();
        let band = 3.0 * (0.04f64 * 0.96 / n).sqrt();
        let ok = (salt - 0.04).abs() < band && (pepper - 0.04).abs() < band && stray == 0;
        Ok((
            ok,
            format!("salt {salt:.4}, pepper {pepper:.4} over {n} voxels (band ±{band:.4})"),
        ))
    });

    report.run("generator-occlusion-fraction", || {
        let x = Tensor::full(&[1usize, 16, 16, 16][..], 0.8f64);
        for &want in &[0.08f64, 0.15, 0.28] {
            for seed in [3u64, 17, 91] {
                let thr = corrupt::occlusion_threshold(16, seed, want)?;
                let (_, mask) = corrupt::perlin_occlude(&x, thr, seed)?;
                let got = mask.data().iter().sum::<f64>() / mask.numel() as f64;
                if (got - want).abs() > 0.01 || !(0.05..=0.3).contains(&got) {
                    return Ok((
                        false,
                        format!("seed {seed}: requested {want}, occluded {got:.4}"),
                    ));
                }
            }
        }
        Ok((true, "9 (fraction, seed) combinations within ±0.01".into()))
    });

    report.run("generator-task-sampler", || {
        let mut rng = ChaCha12Rng::seed_from_u64(12345);
        let mut counts: BTreeMap<TaskKind, usize> = BTreeMap::new();
        let draws = 10_000usize;
        for _ in 0..draws {
            let k = taskgen::sample_task_kind(&mut rng, &TaskKind::ALL)?;
            *counts.entry(k).or_insert(0) += 1;
        }
        for kind in TaskKind::ALL {
            let p = if losses::is_mask_task(kind) { 2.0 / 9.0 } else { 1.0 / 9.0 };
            let expect = draws as f64 * p;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let got = *counts.get(&kind).unwrap_or(&0) as f64;
            if (got - expect).abs() > 3.0 * sigma {
                return Ok((
                    false,
                    format!("{kind}: {got} draws, expected {expect:.0} ± {:.0}", 3.0 * sigma),
                ));
            }
        }
        Ok((true, format!("{draws} draws, all 8 kinds within 3σ of their rates")))
    });

    report.run("generator-fixed-points", || {
        // Central slab at depth 16 keeps exactly slices 7..=9.
        let x = Tensor::full(&[1usize, 16, 4, 4][..], 1.0f64);
        let slab = corrupt::central_slab(&x)?;
        for d in 0..16usize {
            let v = slab.data()[d * 16];
            let want = if (7..=9).contains(&d) { 1.0 } else { 0.0 };
            if v != want {
                return Ok((false, format!("slab slice {d} is {v}, wanted {want}")));
            }
        }
        // Legendre field: center voxel of an odd side sees P2(0) = -1/2.
        let f = noise::legendre_field(9, &[((2, 0, 0), 1.0)])?;
        let center = f.data()[(4 * 9 + 4) * 9 + 4];
        if (center + 0.5).abs() > 1e-12 {
            return Ok((false, format!("Legendre center {center} != -0.5")));
        }
        // Zero-scale bias is the identity.
        let v = noise_volume(8, 31)?;
        let b = corrupt::apply_bias_field(&v, 3, 0.0, 7)?;
        if !v.bitwise_eq(&b) {
            return Ok((false, "zero-scale bias changed the volume".into()));
        }
        // Percentile window: the exact ramp midpoint maps linearly.
        let n = 512usize;
        let ramp = Tensor::from_fn(vec![1usize, 8, 8, 8], |i| i as f64 / (n - 1) as f64);
        let pre = taskgen::preprocess(&ramp)?;
        let mid = pre.data()[n / 2 - 1];
        let expect = ((ramp.data()[n / 2 - 1] - 0.02) / 0.96).clamp(0.0, 1.0);
        if (mid - expect).abs() > 1e-12 {
            return Ok((false, format!("preprocess midpoint {mid} vs {expect}")));
        }
        Ok((true, "slab, Legendre center, zero bias, percentile window".into()))
    });

    report.run("generator-episode-determinism", || {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind, 8);
            let a = taskgen::sample_episode(&spec, 2, 424_242)?;
            let b = taskgen::sample_episode(&spec, 2, 424_242)?;
            if !a.target.input.bitwise_eq(&b.target.input)
                || !a.target.output.bitwise_eq(&b.target.output)
            {
                return Ok((false, format!("{kind}: same seed, different episode")));
            }
            if kind == TaskKind::Segmentation {
                for p in a.context.iter().chain(std::iter::once(&a.target)) {
                    if p.output.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                        return Ok((false, "segmentation output not binary".into()));
                    }
                }
            }
        }
        Ok((true, "all 8 kinds reproduce bitwise from their seed".into()))
    });

    report
}

// ---------------------------------------------------------------------------
// Gradient suite.

pub fn loss_checks() -> CheckReport {
    let mut report = CheckReport::default();

    report.run("loss-knee-continuity", || {
        // Evaluate both closed-form branches exactly at the knee |d| = 1.
        let inside_val = 1.0f64.powi(3) / 3.0;
        let outside_val = 1.0f64 - 2.0 / 3.0;
        let inside_slope = 1.0f64 * 1.0f64.abs(); // d|d|²·sign = d·|d|
        let outside_slope = 1.0f64;
        let v_gap = (inside_val - outside_val).abs();
        let s_gap = (inside_slope - outside_slope).abs();
        let lib_val = tensor::cubic_l1_voxel(1.0f64);
        let lib_slope = tensor::cubic_l1_voxel_deriv(1.0f64);
        let lib_ok = (lib_val - 1.0 / 3.0).abs() <= KNEE_TOL
            && (lib_slope - 1.0).abs() <= KNEE_TOL;
        Ok((
            v_gap <= KNEE_TOL && s_gap <= KNEE_TOL && lib_ok,
            format!("value gap {v_gap:.1e}, slope gap {s_gap:.1e} at the knee"),
        ))
    });

    report.run("loss-uniform-offset-identity", || {
        // A uniform offset has zero spatial differences, so the gradient
        // term of the generation loss vanishes and it halves the plain one.
        let shape = [1usize, 4, 4, 4];
        let target = noise_volume(4, 51)?;
        let mut worst = 0.0f64;
        for &off in &[0.05f64, 0.1, 0.3, 0.9] {
            let pred = Tensor::new(&shape[..], target.data().iter().map(|&v| v + off).collect())?;
            let gen = losses::gen_loss(&pred, &target)?;
            let smooth = losses::smooth_l1(&pred, &target)?;
            worst = worst.max((gen - 0.5 * smooth).abs());
        }
        let pred = Tensor::new(
            &shape[..],
            target.data().iter().map(|&v| v + 0.1).collect(),
        )?;
        let exact = (losses::gen_loss(&pred, &target)? - 0.0025f64).abs();
        Ok((
            worst <= 1e-15 && exact <= 1e-15,
            format!("max |gen - smooth/2| {worst:.1e}; offset-0.1 value gap {exact:.1e}"),
        ))
    });

    report.run("loss-finite-difference", || {
        let side = 4;
        let target = noise_volume(side, 61)?;
        let pred = noise_volume(side, 62)?;
        let mut worst = 0.0f64;
        for kind in [TaskKind::Segmentation, TaskKind::GaussianDenoise] {
            // Analytic gradient via the tape.
            let mut g = tensor::Graph::<f64>::new();
            let p = g.param("pred", pred.clone());
            let loss = losses::task_loss_node(&mut g, kind, p, &target)?;
            let grads = g.backward(loss)?;
            let analytic = g.named_grads(&grads)["pred"].clone();
            // Central differences on a spread of entries.
            let h = 1e-6;
            for idx in (0..pred.numel()).step_by(7) {
                let f = |delta: f64| -> Result<f64> {
                    let mut data = pred.data().to_vec();
                    data[idx] += delta;
                    let p = Tensor::new(pred.shape(), data)?;
                    Ok(losses::task_loss(kind, &p, &target)?)
                };
                let fd = (f(h)? - f(-h)?) / (2.0 * h);
                let an = analytic.data()[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-9);
                worst = worst.max(rel);
            }
        }
        Ok((
            worst <= FD_TOL_LOSS,
            format!("max rel FD error {worst:.2e} (tol {FD_TOL_LOSS:.0e})"),
        ))
    });

    report
}

pub fn kernel_checks() -> CheckReport {
    let mut report = CheckReport::default();

    report.run("conv-kernel-finite-difference", || {
        let mut worst = 0.0f64;
        for &(stride, padding) in &[(1usize, 1usize), (2, 1)] {
            let mut rng = ChaCha12Rng::seed_from_u64(40 + stride as u64);
            let mut draw = |shape: &[usize]| -> Tensor<f64> {
                Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
            };
            let x = draw(&[2, 4, 4, 4]);
            let w = draw(&[3, 2, 3, 3, 3]);
            let b = draw(&[3]);
            let probe = {
                let out = tensor::conv3d(&x, &w, &b, stride, padding)?;
                draw(out.shape())
            };
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
                let out = tensor::conv3d(x, w, b, stride, padding)?;
                Ok(out
                    .data()
                    .iter()
                    .zip(probe.data())
                    .map(|(&o, &p)| o * p)
                    .sum())
            };
            let (gi, gk, gb) = tensor::conv3d_backward(&x, &w, &probe, stride, padding, true)?;
            let gi = gi.expect("input gradient requested");
            let h = 1e-6;
            let mut fd_check = |t: &Tensor<f64>, analytic: &Tensor<f64>, which: usize| -> Result<()> {
                for idx in (0..t.numel()).step_by((t.numel() / 25).max(1)) {
                    let eval = |delta: f64| -> Result<f64> {
                        let mut data = t.data().to_vec();
                        data[idx] += delta;
                        let tt = Tensor::new(t.shape(), data)?;
                        match which {
                            0 => loss(&tt, &w, &b),
                            1 => loss(&x, &tt, &b),
                            _ => loss(&x, &w, &tt),
                        }
                    };
                    let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                    let an = analytic.data()[idx];
                    let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-9);
                    worst = worst.max(rel);
                }
                Ok(())
            };
            fd_check(&x, &gi, 0)?;
            fd_check(&w, &gk, 1)?;
            fd_check(&b, &gb, 2)?;
        }
        Ok((
            worst <= FD_TOL_KERNEL,
            format!("strides 1 and 2: max rel FD error {worst:.2e} (tol {FD_TOL_KERNEL:.0e})"),
        ))
    });

    report.run("op-finite-difference", || {
        // Activation, upsampling, and the residual fusion block, each driven
        // through the tape with a plain-L1 head so finite differences see
        // the whole composition. The head's own gradient is covered by
        // loss-finite-difference.
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let mut draw = |shape: &[usize]| -> Tensor<f64> {
            Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
        };
        let gelu_t = draw(&[2, 4, 4, 4]);
        let up_t = draw(&[2, 4, 4, 4]);
        let fuse_other = draw(&[2, 4, 4, 4]);
        let fuse_k = draw(&[2, 4, 3, 3, 3]);
        let fuse_b = draw(&[2]);
        let fuse_t = draw(&[2, 4, 4, 4]);
        let cases: Vec<(
            Tensor<f64>,
            Box<dyn Fn(&mut tensor::Graph<f64>, tensor::NodeId) -> Result<tensor::NodeId>>,
        )> = vec![
            (draw(&[2, 4, 4, 4]), {
                let t = gelu_t.clone();
                Box::new(move |g, x| {
                    let y = g.gelu(x);
                    g.smooth_l1(y, &t)
                })
            }),
            (draw(&[2, 2, 2, 2]), {
                let t = up_t.clone();
                Box::new(move |g, x| {
                    let y = g.upsample2x(x)?;
                    g.smooth_l1(y, &t)
                })
            }),
            (draw(&[2, 4, 4, 4]), {
                let (other, k, b, t) = (
                    fuse_other.clone(),
                    fuse_k.clone(),
                    fuse_b.clone(),
                    fuse_t.clone(),
                );
                Box::new(move |g, x| {
                    // concat -> 2C->C conv -> residual add -> gelu, the same
                    // dataflow as the network's fusion block
                    let o = g.constant(other.clone());
                    let kk = g.constant(k.clone());
                    let bb = g.constant(b.clone());
                    let cat = g.concat(x, o)?;
                    let f = g.conv3d(cat, kk, bb, 1, 1)?;
                    let s = g.add(f, x)?;
                    let y = g.gelu(s);
                    g.smooth_l1(y, &t)
                })
            }),
        ];
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (x0, build) in &cases {
            let mut g = tensor::Graph::<f64>::new();
            let p = g.param("x", x0.clone());
            let loss = build(&mut g, p)?;
            let grads = g.backward(loss)?;
            let analytic = g.named_grads(&grads)["x"].clone();
            for idx in (0..x0.numel()).step_by((x0.numel() / 40).max(1)) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut data = x0.data().to_vec();
                    data[idx] += delta;
                    let mut g = tensor::Graph::<f64>::new();
                    let p = g.param("x", Tensor::new(x0.shape(), data)?);
                    let loss = build(&mut g, p)?;
                    Ok(g.value(loss).data()[0])
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                let an = analytic.data()[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-9);
                worst = worst.max(rel);
            }
        }
        Ok((
            worst <= FD_TOL_KERNEL,
            format!(
                "activation, upsampling, fusion block: max rel FD error {worst:.2e} \
                 (tol {FD_TOL_KERNEL:.0e})"
            ),
        ))
    });

    report.run("end-to-end-finite-difference", || {
        let side = 8;
        let net = Network::<f64>::init(check_config(), 71)?;
        let pairs = noise_pairs(2, side, 8200)?;
        let x = noise_volume(side, 8300)?;
        let y = noise_volume(side, 8301)?;
        let kind = TaskKind::GaussianDenoise;
        let plan = PartitionPlan::new(2, 2)?; // single chunk: the full network
        let (_, grads) = apsp_train_forward_with_plan(&net, &x, &y, &pairs, &plan, kind, GradMode::Exact)?;
        let loss_at = |net: &Network<f64>| -> Result<f64> {
            let (l, _) =
                apsp_train_forward_with_plan(net, &x, &y, &pairs, &plan, kind, GradMode::Exact)?;
            Ok(l)
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();
        for name in &names {
            let t = net.params.get(name)?.clone();
            let picks: Vec<usize> = if t.numel() == 1 {
                vec![0]
            } else {
                vec![0, t.numel() / 2, t.numel() - 1]
            };
            for idx in picks {
                let eval = |delta: f64| -> Result<f64> {
                    let mut data = t.data().to_vec();
                    data[idx] += delta;
                    let mut p = net.params.clone();
                    p.set(name, Tensor::new(t.shape(), data)?)?;
                    let perturbed = Network::from_params(net.cfg.clone(), p)?;
                    loss_at(&perturbed)
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                let an = grads[name].data()[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        Ok((
            worst <= FD_TOL_KERNEL,
            format!(
                "{} parameters × 3 entries: max rel FD error {worst:.2e} (tol {FD_TOL_KERNEL:.0e})",
                names.len()
            ),
        ))
    });

    report
}

pub fn equivalence_checks() -> CheckReport {
    let mut report = CheckReport::default();

    report.run("gradient-equivalence", || {
        let net = Network::<f64>::init(check_config(), 83)?;
        let mut worst = 0.0f64;
        for &(total, mini) in &EQUIV_CASES {
            for kind in [TaskKind::GaussianDenoise, TaskKind::Segmentation] {
                let rel = equivalence_case(&net, total, mini, kind, GradMode::Exact, 6000)?;
                worst = worst.max(rel);
            }
        }
        Ok((
            worst <= EQUIV_TOL,
            format!(
                "cases {EQUIV_CASES:?} × 2 losses: max rel {worst:.2e} (tol {EQUIV_TOL:.0e})"
            ),
        ))
    });

    report.extend(fault_checks(GradMode::UnderScale));
    report.extend(fault_checks(GradMode::DropLenWeight));
    report
}

pub fn gradient_checks() -> CheckReport {
    let mut report = loss_checks();
    report.extend(kernel_checks());
    report.extend(equivalence_checks());
    report
}

/// Prove the equivalence check has teeth: with a deliberately wrong scaling
/// the enumerated gradient must disagree with the reference by a wide
/// margin. The line passes when the fault IS detected.
pub fn fault_checks(mode: GradMode) -> CheckReport {
    let mut report = CheckReport::default();
    let name = match mode {
        GradMode::Exact => "fault-exact-mode",
        GradMode::UnderScale => "fault-under-scale-detected",
        GradMode::DropLenWeight => "fault-drop-len-detected",
    };
    report.run(name, || {
        if mode == GradMode::Exact {
            return Err(Error::invalid("fault check needs a fault mode"));
        }
        let net = Network::<f64>::init(check_config(), 83)?;
        let mut least = f64::INFINITY;
        for &(total, mini) in &EQUIV_CASES {
            let rel = equivalence_case(&net, total, mini, TaskKind::GaussianDenoise, mode, 6000)?;
            least = least.min(rel);
        }
        Ok((
            least > FAULT_MARGIN,
            format!("smallest deviation {least:.2e}; detection margin {FAULT_MARGIN:.0e}"),
        ))
    });
    report
}

pub fn all_checks() -> CheckReport {
    let mut report = invariant_checks();
    report.extend(gradient_checks());
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_and_streaming_agree_on_a_tiny_case() {
        let net = Network::<f64>::init(check_config(), 5).unwrap();
        let pairs = noise_pairs(3, 8, 42).unwrap();
        let x = noise_volume(8, 77).unwrap();
        let brute = brute_force_forward(&net, &x, &pairs).unwrap();
        let streamed = apsp_forward(&net, &x, &pairs, 2).unwrap();
        assert!(brute.max_abs_diff(&streamed) < 1e-11);
    }

    #[test]
    fn fault_modes_are_detected() {
        for mode in [GradMode::UnderScale, GradMode::DropLenWeight] {
            let r = fault_checks(mode);
            assert!(r.all_passed(), "{}", r.render());
        }
    }

    #[test]
    fn report_renders_one_line_per_check() {
        let mut r = CheckReport::default();
        r.run("alpha", || Ok((true, "fine".into())));
        r.run("beta", || Err(Error::invalid("boom")));
        let text = r.render();
        assert!(text.contains("PASS  alpha"));
        assert!(text.contains("FAIL  beta"));
        assert!(!r.all_passed());
    }
}
