//! Acceptance run: the engine's core guarantees verified end to end, one
//! printed line per criterion. Everything runs inside a single test function
//! on purpose: the allocation counters are process-global, the smoke
//! training at the end is far too heavy to interleave with other tests, and
//! a single function keeps the report ordered. Run with `--nocapture` to
//! watch progress.

use std::time::Instant;

use nv3d::apsp::{apsp_forward, GradMode};
use nv3d::check;
use nv3d::net::{NetConfig, Network};
use nv3d::taskgen::TaskKind;
use nv3d::train::{self, ResumeState, TrainConfig};
use nv3d::Result;

const DESK_SIDE: usize = 16;
const PART_TOTAL: usize = 8;
const PART_MINIS: [usize; 5] = [1, 2, 3, 4, 8];
const PART_SEEDS: u64 = 20;
const TOL_ABS_F64: f64 = 1e-10;
const TOL_REL_F32: f64 = 1e-4;
const PART_BUDGET_SECS: f64 = 120.0;
const EQUIV_BUDGET_SECS: f64 = 300.0;
const SMOKE_MAX_STEPS: u64 = 20_000;
const SMOKE_SEGMENT: u64 = 1_000;
const SMOKE_TARGET_DICE: f64 = 0.70;
const SMOKE_STOP_DICE: f64 = 0.74;

fn desk_cfg() -> NetConfig {
    NetConfig::default()
}

fn max_abs32(t: &nv3d::Tensor<f32>) -> f64 {
    t.data().iter().fold(0.0f64, |a, &v| a.max(v.abs() as f64))
}

struct Gate {
    all_passed: bool,
}

impl Gate {
    fn record(&mut self, name: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, format!("errored: {e}")),
        };
        println!("{}  {name:<22} {detail}", if passed { "PASS" } else { "FAIL" });
        self.all_passed &= passed;
    }
}

/// Worst deviation of every partition choice from the single-chunk pass, for
/// one freshly initialized desk-scale model in both precisions.
fn partition_case(seed: u64) -> Result<(f64, f64)> {
    let net = Network::<f64>::init(desk_cfg(), 900 + seed)?;
    let pairs = check::noise_pairs(PART_TOTAL, DESK_SIDE, 10_000 + 37 * seed)?;
    let x = check::noise_volume(DESK_SIDE, 20_000 + seed)?;
    let reference = apsp_forward(&net, &x, &pairs, PART_TOTAL)?;
    let mut worst64 = 0.0f64;
    for &mini in &PART_MINIS {
        if mini == PART_TOTAL {
            continue; // the reference itself
        }
        let y = apsp_forward(&net, &x, &pairs, mini)?;
        worst64 = worst64.max(y.max_abs_diff(&reference));
    }
    let net32 = net.cast::<f32>();
    let pairs32: Vec<_> = pairs.iter().map(|p| p.cast::<f32>()).collect();
    let x32 = x.cast::<f32>();
    let ref32 = apsp_forward(&net32, &x32, &pairs32, PART_TOTAL)?;
    let scale = max_abs32(&ref32).max(1e-12);
    let mut worst32 = 0.0f64;
    for &mini in &PART_MINIS {
        if mini == PART_TOTAL {
            continue;
        }
        let y = apsp_forward(&net32, &x32, &pairs32, mini)?;
        worst32 = worst32.max(y.max_abs_diff(&ref32) / scale);
    }
    Ok((worst64, worst32))
}

fn criterion_partition_invariance() -> Result<(bool, String)> {
    let started = Instant::now();
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for seed in 0..PART_SEEDS {
        let (w64, w32) = partition_case(seed)?;
        worst64 = worst64.max(w64);
        worst32 = worst32.max(w32);
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst64 <= TOL_ABS_F64 && worst32 <= TOL_REL_F32 && secs < PART_BUDGET_SECS;
    Ok((
        ok,
        format!(
            "{PART_SEEDS} seeds, mini sizes {PART_MINIS:?}: f64 max |diff| {worst64:.2e} \
             (tol {TOL_ABS_F64:.0e}), f32 max rel {worst32:.2e} (tol {TOL_REL_F32:.0e}), {secs:.0}s"
        ),
    ))
}

fn criterion_order_invariance() -> Result<(bool, String)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let net = Network::<f64>::init(desk_cfg(), 901)?;
    let pairs = check::noise_pairs(PART_TOTAL, DESK_SIDE, 30_000)?;
    let x = check::noise_volume(DESK_SIDE, 30_001)?;
    let reference = apsp_forward(&net, &x, &pairs, 3)?;
    let net32 = net.cast::<f32>();
    let pairs32: Vec<_> = pairs.iter().map(|p| p.cast::<f32>()).collect();
    let x32 = x.cast::<f32>();
    let ref32 = apsp_forward(&net32, &x32, &pairs32, 3)?;
    let scale = max_abs32(&ref32).max(1e-12);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4242);
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for _ in 0..20 {
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng);
        let y = apsp_forward(&net, &x, &shuffled, 3)?;
        worst64 = worst64.max(y.max_abs_diff(&reference));
        let shuffled32: Vec<_> = shuffled.iter().map(|p| p.cast::<f32>()).collect();
        let y32 = apsp_forward(&net32, &x32, &shuffled32, 3)?;
        worst32 = worst32.max(y32.max_abs_diff(&ref32) / scale);
    }
    Ok((
        worst64 <= TOL_ABS_F64 && worst32 <= TOL_REL_F32,
        format!(
            "20 permutations at L={PART_TOTAL}: f64 max |diff| {worst64:.2e}, \
             f32 max rel {worst32:.2e}"
        ),
    ))
}

fn criterion_gradient_equivalence() -> Result<(bool, String)> {
    let started = Instant::now();
    let side = 8;
    let net = Network::<f64>::init(NetConfig::with_stages(2, 4), 83)?;
    let mut worst = 0.0f64;
    let mut fault_floor = f64::INFINITY;
    for &(total, mini) in &[(4usize, 2usize), (6, 2)] {
        let pairs = check::noise_pairs(total, side, 6000)?;
        let x = check::noise_volume(side, 6100)?;
        let y = check::noise_volume(side, 6101)?;
        for kind in [TaskKind::GaussianDenoise, TaskKind::Segmentation] {
            let mean =
                check::enumerated_mean_grads(&net, &x, &y, &pairs, mini, kind, GradMode::Exact)?;
            let (_, reference) = check::full_context_grads(&net, &x, &y, &pairs, kind)?;
            worst = worst.max(check::max_rel_table_diff(&mean, &reference));
        }
        // The deliberately broken scalings have to blow the bound, or the
        // equivalence check proves nothing.
        for mode in [GradMode::UnderScale, GradMode::DropLenWeight] {
            let mean = check::enumerated_mean_grads(
                &net,
                &x,
                &y,
                &pairs,
                mini,
                TaskKind::GaussianDenoise,
                mode,
            )?;
            let (_, reference) =
                check::full_context_grads(&net, &x, &y, &pairs, TaskKind::GaussianDenoise)?;
            fault_floor = fault_floor.min(check::max_rel_table_diff(&mean, &reference));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst <= 1e-8 && fault_floor > 1e-4 && secs < EQUIV_BUDGET_SECS;
    Ok((
        ok,
        format!(
            "chunked-vs-full max rel {worst:.2e} (tol 1e-8); injected faults deviate \
             by at least {fault_floor:.2e}; {secs:.0}s"
        ),
    ))
}

fn criterion_memory_bound() -> Result<(bool, String)> {
    let report = check::memory_checks_with(desk_cfg(), DESK_SIDE);
    let detail = report
        .lines
        .iter()
        .map(|l| l.detail.clone())
        .collect::<Vec<_>>()
        .join("; ");
    Ok((report.all_passed(), detail))
}

fn one_line(report: check::CheckReport) -> Result<(bool, String)> {
    let passed = report.all_passed();
    let detail = if passed {
        format!("{} properties verified", report.lines.len())
    } else {
        report
            .lines
            .iter()
            .filter(|l| !l.passed)
            .map(|l| format!("{}: {}", l.name, l.detail))
            .collect::<Vec<_>>()
            .join("; ")
    };
    Ok((passed, detail))
}

fn pick(rows: &[nv3d::io::ReportRow], context: usize) -> (f64, f64) {
    let r = rows
        .iter()
        .find(|r| r.context_size == context)
        .expect("row for context size");
    (r.mean, r.std)
}

fn trend_holds(lo: (f64, f64), hi: (f64, f64)) -> bool {
    let pooled = ((lo.1 * lo.1 + hi.1 * hi.1) / 2.0).sqrt();
    hi.0 >= lo.0 - pooled
}

fn criterion_smoke_training() -> Result<(bool, String)> {
    let started = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.tasks = vec![TaskKind::Segmentation, TaskKind::GaussianDenoise];
    cfg.seed = 1;
    cfg.side = DESK_SIDE;
    cfg.val_interval = 500;
    cfg.val_episodes = 8;
    cfg.log_every = 250;
    let mut resume: Option<ResumeState<f32>> = None;
    let mut trained: Option<Network<f32>> = None;
    let mut steps_done = 0u64;
    while steps_done < SMOKE_MAX_STEPS {
        cfg.steps = (steps_done + SMOKE_SEGMENT).min(SMOKE_MAX_STEPS);
        let r = train::train::<f32>(&cfg, resume.take(), |l| {
            if l.step % 250 == 0 {
                println!("      {l}");
            }
        })?;
        steps_done = r.steps_done;
        let gate = train::evaluate(
            &r.last,
            &[TaskKind::Segmentation],
            &[4],
            6,
            DESK_SIDE,
            cfg.mini_context,
            40,
        )?;
        println!(
            "      step {steps_done}: held-out dice at L=4 = {:.3} [{:.0}s elapsed]",
            gate[0].mean,
            started.elapsed().as_secs_f64()
        );
        let reached = gate[0].mean >= SMOKE_STOP_DICE;
        trained = Some(r.last.clone());
        resume = Some(ResumeState {
            net: r.last,
            adam: r.adam,
            step: r.steps_done,
            lr: r.lr,
            best_val: r.best_val,
        });
        if reached {
            break;
        }
    }
    let net = trained.expect("at least one training segment ran");
    let sizes = [1usize, 4, 8];
    let dice = train::evaluate(
        &net,
        &[TaskKind::Segmentation],
        &sizes,
        8,
        DESK_SIDE,
        cfg.mini_context,
        60,
    )?;
    let psnr = train::evaluate(
        &net,
        &[TaskKind::GaussianDenoise],
        &sizes,
        8,
        DESK_SIDE,
        cfg.mini_context,
        61,
    )?;
    let (d1, d4, d8) = (pick(&dice, 1), pick(&dice, 4), pick(&dice, 8));
    let (p1, p8) = (pick(&psnr, 1), pick(&psnr, 8));
    let secs = started.elapsed().as_secs_f64();
    let ok = d4.0 >= SMOKE_TARGET_DICE && trend_holds(d1, d8) && trend_holds(p1, p8);
    Ok((
        ok,
        format!(
            "{steps_done} steps in {:.0} min; dice L1/L4/L8 = {:.3}/{:.3}/{:.3} \
             (need L4 >= {SMOKE_TARGET_DICE}), psnr L1/L8 = {:.1}/{:.1} dB; \
             larger context no worse within one pooled std",
            secs / 60.0,
            d1.0,
            d4.0,
            d8.0,
            p1.0,
            p8.0
        ),
    ))
}

fn criterion_cross_path_oracle() -> Result<(bool, String)> {
    let net = Network::<f64>::init(NetConfig::with_stages(2, 4), 23)?;
    let side = 8;
    let mut worst = 0.0f64;
    for total in 1..=4usize {
        let pairs = check::noise_pairs(total, side, 7000 + 13 * total as u64)?;
        let x = check::noise_volume(side, 7100 + total as u64)?;
        let oracle = check::brute_force_forward(&net, &x, &pairs)?;
        for mini in 1..=total {
            let y = apsp_forward(&net, &x, &pairs, mini)?;
            worst = worst.max(y.max_abs_diff(&oracle));
        }
    }
    Ok((
        worst <= 1e-10,
        format!("streaming vs full materialization, L <= 4: max |diff| {worst:.2e} (tol 1e-10)"),
    ))
}

#[test]
fn acceptance_criteria() {
    let mut gate = Gate { all_passed: true };
    gate.record("partition-invariance", criterion_partition_invariance());
    gate.record("order-invariance", criterion_order_invariance());
    gate.record("gradient-equivalence", criterion_gradient_equivalence());
    gate.record("memory-bound", criterion_memory_bound());
    gate.record("loss-correctness", one_line(check::loss_checks()));
    gate.record("kernel-correctness", one_line(check::kernel_checks()));
    gate.record("generator-contracts", one_line(check::generator_checks()));
    gate.record("smoke-training", criterion_smoke_training());
    gate.record("cross-path-oracle", criterion_cross_path_oracle());
    assert!(gate.all_passed, "one or more acceptance criteria failed");
}
