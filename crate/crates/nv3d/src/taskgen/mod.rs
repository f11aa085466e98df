//! Synthetic episode generation. Every training or evaluation episode is a
//! small set of (input, output) volume pairs that share one latent rule: the
//! same phantom family, the same degradation convention, the same label
//! semantics. A learner sees `L` solved context pairs plus one query input
//! and must produce the query output.
//!
//! All randomness is derived from explicit 64-bit seeds through ChaCha12
//! streams with a fixed draw order, so any episode can be regenerated
//! bit-for-bit from its seed alone.

pub mod augment;
pub mod corrupt;
pub mod noise;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::apsp::ContextPair;
use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{Scalar, Tensor};

use augment::LabelAug;
use corrupt::RemapNet;
use noise::{low_freq_field, quantile};

/// The eight task families an episode can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Segmentation,
    BiasCorrection,
    GaussianDenoise,
    SaltPepperDenoise,
    Inpainting,
    SuperResolution,
    TwoDToThreeD,
    ContrastRemap,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Segmentation,
        TaskKind::BiasCorrection,
        TaskKind::GaussianDenoise,
        TaskKind::SaltPepperDenoise,
        TaskKind::Inpainting,
        TaskKind::SuperResolution,
        TaskKind::TwoDToThreeD,
        TaskKind::ContrastRemap,
    ];

    /// Stable snake_case identifier used in configs, CLI flags and reports.
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "segmentation",
            TaskKind::BiasCorrection => "bias_correction",
            TaskKind::GaussianDenoise => "gaussian_denoise",
            TaskKind::SaltPepperDenoise => "salt_pepper_denoise",
            TaskKind::Inpainting => "inpainting",
            TaskKind::SuperResolution => "super_resolution",
            TaskKind::TwoDToThreeD => "two_d_to_three_d",
            TaskKind::ContrastRemap => "contrast_remap",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        TaskKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = TaskKind::ALL.iter().map(|k| k.name()).collect();
                Error::invalid(format!(
                    "unknown task '{s}'; expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<TaskKind> {
        TaskKind::parse(s)
    }
}

/// Tunable generator knobs that are not drawn per episode.
#[derive(Debug, Clone)]
pub struct TaskParams {
    /// Coefficient scale of the multiplicative bias field.
    pub bias_coeff_scale: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            bias_coeff_scale: 0.5,
        }
    }
}

/// What to generate: the task family, the cubic volume side, whether the
/// sampled episodes carry augmentations (corruption overlays, label-map
/// reinterpretations, flips and rotations).
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub side: usize,
    pub augment: bool,
    pub params: TaskParams,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, side: usize) -> Self {
        TaskSpec {
            kind,
            side,
            augment: false,
            params: TaskParams::default(),
        }
    }

    pub fn with_augment(mut self, augment: bool) -> Self {
        self.augment = augment;
        self
    }
}

/// A synthetic anatomy-like volume: a smooth intensity image in [0, 1] and an
/// integer label map (0 = background, 1..=K foreground classes, every class
/// non-empty).
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Tensor<f64>,
    pub labels: Tensor<f64>,
}

impl Phantom {
    pub fn num_classes(&self) -> usize {
        self.labels.data().iter().fold(0.0f64, |a, &b| a.max(b)) as usize
    }
}

/// Per-family appearance parameters shared by every phantom in one episode:
/// the intensity palette, the class volume fractions and the texture level.
/// Geometry still varies pair to pair through a separate seed.
#[derive(Debug, Clone)]
pub struct FamilyParams {
    pub bg_intensity: f64,
    pub class_intensities: Vec<f64>,
    pub bg_fraction: f64,
    pub class_fractions: Vec<f64>,
    pub texture_amp: f64,
}

impl FamilyParams {
    pub fn draw(rng: &mut ChaCha12Rng, k_classes: usize) -> Result<FamilyParams> {
        if !(1..=10).contains(&k_classes) {
            return Err(Error::invalid(format!(
                "phantom class count {k_classes} outside 1..=10"
            )));
        }
        let bg_intensity = rng.random_range(0.05..0.35);
        let class_intensities: Vec<f64> =
            (0..k_classes).map(|_| rng.random_range(0.3..0.95)).collect();
        let bg_fraction = rng.random_range(0.4..0.95);
        let raw: Vec<f64> = (0..k_classes).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let class_fractions = raw
            .iter()
            .map(|r| r / total * (1.0 - bg_fraction))
            .collect();
        Ok(FamilyParams {
            bg_intensity,
            class_intensities,
            bg_fraction,
            class_fractions,
            texture_amp: 0.06,
        })
    }

    /// Materialize one phantom of this family. Voxels are ranked by a smooth
    /// random field and split into background plus K classes according to
    /// the family's volume fractions; every class is forced non-empty.
    pub fn synth(&self, side: usize, seed: u64) -> Result<Phantom> {
        if side < 8 {
            return Err(Error::invalid(format!(
                "phantom side {side} too small; need side >= 8"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let field_seed = rng.next_u64();
        let texture_seed = rng.next_u64();
        let field = low_freq_field(side, 4, field_seed)?;
        let texture = low_freq_field(side, 8, texture_seed)?;
        let n = side * side * side;
        let mut order: Vec<usize> = (0..n).collect();
        let fd = field.data();
        order.sort_by(|&a, &b| fd[a].total_cmp(&fd[b]).then(a.cmp(&b)));
        let k = self.class_intensities.len();
        let mut counts: Vec<usize> = self
            .class_fractions
            .iter()
            .map(|f| ((f * n as f64).round() as usize).max(1))
            .collect();
        let fg_total: usize = counts.iter().sum();
        debug_assert!(fg_total < n, "background fraction >= 0.4 leaves room");
        let mut labels = vec![0.0f64; n];
        // Highest-field voxels get the highest class index; the lowest
        // (n - fg_total) voxels stay background.
        let mut cursor = n;
        for class in (1..=k).rev() {
            let c = counts.pop().expect("one count per class");
            for &v in &order[cursor - c..cursor] {
                labels[v] = class as f64;
            }
            cursor -= c;
        }
        let image: Vec<f64> = (0..n)
            .map(|v| {
                let base = if labels[v] == 0.0 {
                    self.bg_intensity
                } else {
                    self.class_intensities[labels[v] as usize - 1]
                };
                (base + self.texture_amp * texture.data()[v]).clamp(0.0, 1.0)
            })
            .collect();
        Ok(Phantom {
            image: Tensor::new(vec![1, side, side, side], image)?,
            labels: Tensor::new(vec![1, side, side, side], labels)?,
        })
    }
}

/// Standalone phantom synthesis: family parameters and geometry both derived
/// from the one seed.
pub fn synth_phantom(side: usize, k_classes: usize, seed: u64) -> Result<Phantom> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let family = FamilyParams::draw(&mut rng, k_classes)?;
    let geometry_seed = rng.next_u64();
    family.synth(side, geometry_seed)
}

/// Robust intensity normalization: map the 2nd..98th percentile window to
/// [0, 1] with clamping. A (near-)constant volume maps to all zeros.
pub fn preprocess(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    if x.numel() == 0 {
        return Err(Error::invalid("preprocess of an empty volume"));
    }
    let p02 = quantile(x.data(), 0.02)?;
    let p98 = quantile(x.data(), 0.98)?;
    let span = p98 - p02;
    let data: Vec<f64> = if span < 1e-12 {
        vec![0.0; x.numel()]
    } else {
        x.data()
            .iter()
            .map(|&v| ((v - p02) / span).clamp(0.0, 1.0))
            .collect()
    };
    Tensor::new(x.shape().to_vec(), data)
}

/// Binary mask of a random non-empty subset of the foreground classes in a
/// label map. The subset depends only on `seed` and the number of classes,
/// so phantoms of one family yield consistent mask semantics.
pub fn random_foreground(labels: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    for &v in labels.data() {
        if v < 0.0 || v.fract() != 0.0 || v > 10.0 {
            return Err(Error::invalid(format!(
                "label map value {v} is not a class index in 0..=10"
            )));
        }
    }
    let kmax = labels.data().iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
    if kmax == 0 {
        return Err(Error::invalid("label map has no foreground classes"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=kmax);
    let picked = rand::seq::index::sample(&mut rng, kmax, count);
    let mut chosen = vec![false; kmax + 1];
    for i in picked {
        chosen[i + 1] = true;
    }
    let data: Vec<f64> = labels
        .data()
        .iter()
        .map(|&v| if chosen[v as usize] { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(labels.shape().to_vec(), data)
}

/// One solved example: the task input and the expected output, both
/// single-channel volumes of the same shape.
#[derive(Debug, Clone)]
pub struct EpisodePair {
    pub input: Tensor<f64>,
    pub output: Tensor<f64>,
}

/// A full in-context episode: `context` holds solved pairs, `target` the
/// held-out query pair whose output is the ground truth for evaluation.
#[derive(Debug, Clone)]
pub struct Episode {
    pub kind: TaskKind,
    pub context: Vec<EpisodePair>,
    pub target: EpisodePair,
}

impl Episode {
    /// Context pairs cast to the compute precision.
    pub fn context_pairs<T: Scalar>(&self) -> Result<Vec<ContextPair<T>>> {
        self.context
            .iter()
            .map(|p| ContextPair::new(p.input.cast::<T>(), p.output.cast::<T>()))
            .collect()
    }

    pub fn target_input<T: Scalar>(&self) -> Tensor<T> {
        self.target.input.cast::<T>()
    }

    pub fn target_output<T: Scalar>(&self) -> Tensor<T> {
        self.target.output.cast::<T>()
    }
}

/// Episode-level parameters shared by all pairs, drawn once per episode.
struct EpisodeRule {
    class_seed: u64,
    bias_degree: usize,
    occlusion_fraction: f64,
    remap: RemapNet,
}

/// One optional extra corruption applied to inputs only.
#[derive(Clone, Copy)]
enum Overlay {
    Bias { degree: usize },
    Gaussian,
    SaltPepper,
    Inpaint { fraction: f64 },
    SuperRes,
}

struct AugmentPlan {
    overlays: Vec<Overlay>,
    label_augs: Vec<LabelAug>,
    flips: Vec<usize>,
    rotation: Option<(usize, usize)>,
}

impl AugmentPlan {
    fn none() -> Self {
        AugmentPlan {
            overlays: Vec::new(),
            label_augs: Vec::new(),
            flips: Vec::new(),
            rotation: None,
        }
    }

    /// Draw the plan. Each overlay kind (excluding the episode's own task)
    /// fires independently with probability 0.05, as does each label
    /// reinterpretation, each axis flip and a single random rotation. Label
    /// augmentations apply in a fixed order with the non-binary Sobel map
    /// last, so the binary-mask preconditions of the others always hold.
    fn draw(rng: &mut ChaCha12Rng, kind: TaskKind) -> Self {
        const P: f64 = 0.05;
        let mut overlays = Vec::new();
        for candidate in [
            TaskKind::BiasCorrection,
            TaskKind::GaussianDenoise,
            TaskKind::SaltPepperDenoise,
            TaskKind::Inpainting,
            TaskKind::SuperResolution,
        ] {
            if candidate == kind {
                continue;
            }
            if rng.random_bool(P) {
                overlays.push(match candidate {
                    TaskKind::BiasCorrection => Overlay::Bias {
                        degree: rng.random_range(2..=4),
                    },
                    TaskKind::GaussianDenoise => Overlay::Gaussian,
                    TaskKind::SaltPepperDenoise => Overlay::SaltPepper,
                    TaskKind::Inpainting => Overlay::Inpaint {
                        fraction: rng.random_range(0.08..0.28),
                    },
                    _ => Overlay::SuperRes,
                });
            }
        }
        let mut label_augs = Vec::new();
        if kind == TaskKind::Segmentation {
            for aug in [
                LabelAug::Invert,
                LabelAug::Dilate1,
                LabelAug::Erode1,
                LabelAug::Sobel,
            ] {
                if rng.random_bool(P) {
                    label_augs.push(aug);
                }
            }
        }
        let mut flips = Vec::new();
        for axis in 1..=3 {
            if rng.random_bool(P) {
                flips.push(axis);
            }
        }
        let rotation = if rng.random_bool(P) {
            Some((rng.random_range(1..=3), rng.random_range(1..=3)))
        } else {
            None
        };
        AugmentPlan {
            overlays,
            label_augs,
            flips,
            rotation,
        }
    }
}

/// Generate one episode with `context_len` solved pairs plus a target pair.
///
/// Fixed draw order from the episode seed: (1) class count, (2) family
/// appearance, (3) episode rule (mask subset seed, bias degree, occlusion
/// fraction, contrast curve), (4) one sub-seed per pair, (5) target slot,
/// (6) the augmentation plan — drawn last and only when `spec.augment` is
/// set, so vanilla episodes are unaffected by the flag's existence.
pub fn sample_episode(spec: &TaskSpec, context_len: usize, seed: u64) -> Result<Episode> {
    if context_len == 0 {
        return Err(Error::invalid("an episode needs at least one context pair"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let k_classes = rng.random_range(2..=5);
    let family = FamilyParams::draw(&mut rng, k_classes)?;
    let rule = EpisodeRule {
        class_seed: rng.next_u64(),
        bias_degree: rng.random_range(2..=4),
        occlusion_fraction: rng.random_range(0.08..0.28),
        remap: RemapNet::random(rng.next_u64()),
    };
    let pair_seeds: Vec<u64> = (0..=context_len).map(|_| rng.next_u64()).collect();
    let target_idx = rng.random_range(0..=context_len);
    let plan = if spec.augment {
        AugmentPlan::draw(&mut rng, spec.kind)
    } else {
        AugmentPlan::none()
    };
    let mut pairs = Vec::with_capacity(context_len + 1);
    for &ps in &pair_seeds {
        pairs.push(build_pair(spec, &family, &rule, &plan, ps)?);
    }
    let target = pairs.remove(target_idx);
    Ok(Episode {
        kind: spec.kind,
        context: pairs,
        target,
    })
}

fn build_pair(
    spec: &TaskSpec,
    family: &FamilyParams,
    rule: &EpisodeRule,
    plan: &AugmentPlan,
    pair_seed: u64,
) -> Result<EpisodePair> {
    let mut sub = ChaCha12Rng::seed_from_u64(pair_seed);
    let geometry_seed = sub.next_u64();
    let op_seed = sub.next_u64();
    let phantom = family.synth(spec.side, geometry_seed)?;
    let base = preprocess(&phantom.image)?;
    let (mut input, mut output) = match spec.kind {
        TaskKind::Segmentation => {
            let mask = random_foreground(&phantom.labels, rule.class_seed)?;
            (base, mask)
        }
        TaskKind::BiasCorrection => {
            let corrupted = corrupt::apply_bias_field(
                &base,
                rule.bias_degree,
                spec.params.bias_coeff_scale,
                op_seed,
            )?;
            (corrupted, base)
        }
        TaskKind::GaussianDenoise => {
            let (corrupted, _sigma) = corrupt::add_gaussian_noise(&base, op_seed)?;
            (corrupted, base)
        }
        TaskKind::SaltPepperDenoise => (corrupt::add_salt_pepper(&base, op_seed)?, base),
        TaskKind::Inpainting => {
            let thr = corrupt::occlusion_threshold(spec.side, op_seed, rule.occlusion_fraction)?;
            let (corrupted, _mask) = corrupt::perlin_occlude(&base, thr, op_seed)?;
            (corrupted, base)
        }
        TaskKind::SuperResolution => (corrupt::downsample_blur(&base)?, base),
        TaskKind::TwoDToThreeD => (corrupt::central_slab(&base)?, base),
        TaskKind::ContrastRemap => {
            let remapped = rule.remap.apply(&base)?;
            (base, remapped)
        }
    };
    // Input-side corruption overlays, in the fixed plan order.
    for overlay in &plan.overlays {
        let o_seed = sub.next_u64();
        input = match *overlay {
            Overlay::Bias { degree } => {
                corrupt::apply_bias_field(&input, degree, spec.params.bias_coeff_scale, o_seed)?
            }
            Overlay::Gaussian => corrupt::add_gaussian_noise(&input, o_seed)?.0,
            Overlay::SaltPepper => corrupt::add_salt_pepper(&input, o_seed)?,
            Overlay::Inpaint { fraction } => {
                let thr = corrupt::occlusion_threshold(spec.side, o_seed, fraction)?;
                corrupt::perlin_occlude(&input, thr, o_seed)?.0
            }
            Overlay::SuperRes => corrupt::downsample_blur(&input)?,
        };
    }
    for &aug in &plan.label_augs {
        output = augment::augment_label(&output, aug)?;
    }
    for &axis in &plan.flips {
        input = augment::flip_axis(&input, axis)?;
        output = augment::flip_axis(&output, axis)?;
    }
    if let Some((axis, quarters)) = plan.rotation {
        input = augment::rotate90(&input, axis, quarters)?;
        output = augment::rotate90(&output, axis, quarters)?;
    }
    Ok(EpisodePair { input, output })
}

/// Draw a task kind with the training mix's sampling rates (segmentation is
/// visited twice as often as each generation task).
pub fn sample_task_kind(rng: &mut ChaCha12Rng, kinds: &[TaskKind]) -> Result<TaskKind> {
    if kinds.is_empty() {
        return Err(Error::invalid("task list is empty"));
    }
    let weights: Vec<f64> = kinds
        .iter()
        .map(|&k| losses::task_sampling_rate(k) as f64)
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (&k, &w) in kinds.iter().zip(&weights) {
        if u < w {
            return Ok(k);
        }
        u -= w;
    }
    Ok(*kinds.last().expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_with_valid_labels_and_range() {
        let a = synth_phantom(8, 3, 77).unwrap();
        let b = synth_phantom(8, 3, 77).unwrap();
        assert!(a.image.bitwise_eq(&b.image));
        assert!(a.labels.bitwise_eq(&b.labels));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for class in 0..=3usize {
            let c = a.labels.data().iter().filter(|&&v| v == class as f64).count();
            assert!(c > 0, "class {class} empty");
        }
        assert!(a.labels.data().iter().all(|&v| v >= 0.0 && v <= 3.0 && v.fract() == 0.0));
    }

    #[test]
    fn single_class_phantom_has_exactly_two_label_values() {
        let p = synth_phantom(8, 1, 5).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for &v in p.labels.data() {
            seen.insert(v as i64);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn foreground_fraction_respects_the_family_band() {
        for seed in 0..100 {
            let p = synth_phantom(8, 4, seed).unwrap();
            let fg = p.labels.data().iter().filter(|&&v| v > 0.0).count() as f64
                / p.labels.numel() as f64;
            assert!(
                (0.05..=0.6).contains(&fg),
                "seed {seed}: foreground fraction {fg} outside [0.05, 0.6]"
            );
        }
    }

    #[test]
    fn preprocess_maps_percentile_window_to_unit_range() {
        let n = 1000usize;
        let ramp = Tensor::from_fn(vec![1, 10, 10, 10], |i| i as f64 / (n - 1) as f64);
        let y = preprocess(&ramp).unwrap();
        // A symmetric window keeps the midpoint fixed.
        let mid = y.data()[n / 2 - 1];
        let raw = ramp.data()[n / 2 - 1];
        let expect = ((raw - 0.02) / 0.96).clamp(0.0, 1.0);
        assert!((mid - expect).abs() < 1e-12);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[n - 1], 1.0);
        let flat = preprocess(&Tensor::full(&[1, 4, 4, 4], 3.7)).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_foreground_masks_are_binary_nonempty_and_deterministic() {
        let p = synth_phantom(8, 5, 11).unwrap();
        for seed in 0..20 {
            let m = random_foreground(&p.labels, seed).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(m.data().iter().any(|&v| v == 1.0), "chosen classes exist");
            let m2 = random_foreground(&p.labels, seed).unwrap();
            assert!(m.bitwise_eq(&m2));
        }
        let empty = Tensor::full(&[1, 8, 8, 8], 0.0);
        assert!(random_foreground(&empty, 0).is_err());
    }

    #[test]
    fn episodes_are_deterministic_and_well_shaped() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind, 8);
            let a = sample_episode(&spec, 3, 1234).unwrap();
            let b = sample_episode(&spec, 3, 1234).unwrap();
            assert_eq!(a.context.len(), 3);
            assert!(a.target.input.bitwise_eq(&b.target.input));
            assert!(a.target.output.bitwise_eq(&b.target.output));
            for (pa, pb) in a.context.iter().zip(&b.context) {
                assert!(pa.input.bitwise_eq(&pb.input));
                assert!(pa.output.bitwise_eq(&pb.output));
                assert_eq!(pa.input.shape(), &[1, 8, 8, 8]);
                assert_eq!(pa.output.shape(), &[1, 8, 8, 8]);
            }
            let c = sample_episode(&spec, 3, 1235).unwrap();
            assert!(!a.target.input.bitwise_eq(&c.target.input));
        }
    }

    #[test]
    fn vanilla_segmentation_outputs_are_binary_masks() {
        let spec = TaskSpec::new(TaskKind::Segmentation, 8);
        for seed in 0..10 {
            let ep = sample_episode(&spec, 2, seed).unwrap();
            for p in ep.context.iter().chain(std::iter::once(&ep.target)) {
                assert!(p.output.data().iter().all(|&v| v == 0.0 || v == 1.0));
                assert!(p.input.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn restoration_targets_are_the_clean_preprocessed_volume() {
        let spec = TaskSpec::new(TaskKind::GaussianDenoise, 8);
        let ep = sample_episode(&spec, 2, 42).unwrap();
        for p in ep.context.iter().chain(std::iter::once(&ep.target)) {
            // Target is clean: in range, and differs from the noisy input.
            assert!(p.output.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(p.input.max_abs_diff(&p.output) > 0.01);
        }
    }

    #[test]
    fn slab_episodes_zero_everything_outside_three_slices() {
        let spec = TaskSpec::new(TaskKind::TwoDToThreeD, 8);
        let ep = sample_episode(&spec, 1, 9).unwrap();
        let d = 8usize;
        for p in ep.context.iter().chain(std::iter::once(&ep.target)) {
            for dd in 0..d {
                let slice = &p.input.data()[dd * d * d..(dd + 1) * d * d];
                let inside = (3..=5).contains(&dd);
                if !inside {
                    assert!(slice.iter().all(|&v| v == 0.0), "slice {dd} not zeroed");
                }
            }
        }
    }

    #[test]
    fn augmentation_eventually_changes_an_episode() {
        let spec = TaskSpec::new(TaskKind::GaussianDenoise, 8);
        let aug = spec.clone().with_augment(true);
        let mut changed = 0;
        for seed in 0..60 {
            let a = sample_episode(&spec, 1, seed).unwrap();
            let b = sample_episode(&aug, 1, seed).unwrap();
            if !a.target.input.bitwise_eq(&b.target.input)
                || !a.target.output.bitwise_eq(&b.target.output)
            {
                changed += 1;
            }
        }
        // With ~7 independent 5% events per episode, about 30% of episodes
        // should differ; zero would mean the flag is dead.
        assert!(changed > 3, "only {changed}/60 augmented episodes differ");
    }

    #[test]
    fn task_sampler_visits_segmentation_twice_as_often() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let kinds = TaskKind::ALL;
        let mut seg = 0usize;
        let draws = 9000usize;
        for _ in 0..draws {
            if sample_task_kind(&mut rng, &kinds).unwrap() == TaskKind::Segmentation {
                seg += 1;
            }
        }
        let p = 2.0 / 9.0;
        let expect = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (seg as f64 - expect).abs() < 3.0 * sigma,
            "segmentation drawn {seg} times, expected about {expect}"
        );
    }
}
