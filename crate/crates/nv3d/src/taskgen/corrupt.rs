//! Degradation operators: each takes a clean volume in [0, 1] and produces
//! the corrupted counterpart that a restoration task uses as its input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{upsample_nearest2x, Tensor};

use super::noise::{legendre_field, perlin_noise, quantile};

/// Lattice resolution of the gradient noise behind occlusion masks.
pub const OCCLUSION_CELLS: usize = 4;
/// Fractions of voxels forced to 1.0 (salt) and 0.0 (pepper).
pub const SALT_FRACTION: f64 = 0.04;
pub const PEPPER_FRACTION: f64 = 0.04;
/// Noise level range for additive Gaussian corruption.
pub const GAUSS_SIGMA_RANGE: (f64, f64) = (0.15, 0.25);

fn require_volume(x: &Tensor<f64>, op: &str) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 || x.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "{op} expects a single-channel volume [1, D, H, W], got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[1], x.shape()[2], x.shape()[3]))
}

/// Multiplicative smooth intensity bias: `clamp(x * exp(B), 0, 1)` where `B`
/// is a Legendre expansion of total degree <= `degree` with coefficients
/// drawn from U(-coeff_scale, coeff_scale) and zero constant term.
/// `coeff_scale == 0` leaves the volume unchanged.
pub fn apply_bias_field(
    x: &Tensor<f64>,
    degree: usize,
    coeff_scale: f64,
    seed: u64,
) -> Result<Tensor<f64>> {
    let (d, h, w) = require_volume(x, "apply_bias_field")?;
    if !(d == h && h == w) {
        return Err(Error::shape(format!(
            "apply_bias_field expects a cubic volume, got {:?}",
            x.shape()
        )));
    }
    if !(2..=4).contains(&degree) {
        return Err(Error::invalid(format!(
            "bias field degree {degree} outside the supported range 2..=4"
        )));
    }
    if !(coeff_scale >= 0.0 && coeff_scale.is_finite()) {
        return Err(Error::invalid(format!(
            "bias field coefficient scale {coeff_scale} must be finite and >= 0"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut coeffs = Vec::new();
    // Lexicographic order over (i, j, k) keeps the draw sequence stable.
    for i in 0..=degree {
        for j in 0..=degree - i {
            for k in 0..=degree - i - j {
                if i + j + k == 0 {
                    continue; // no constant term: bias has unit geometric mean
                }
                let a = if coeff_scale > 0.0 {
                    rng.random_range(-coeff_scale..coeff_scale)
                } else {
                    0.0
                };
                coeffs.push(((i, j, k), a));
            }
        }
    }
    let field = legendre_field(d, &coeffs)?;
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(field.data())
        .map(|(&v, &b)| (v * b.exp()).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Additive Gaussian noise with a per-call noise level sigma drawn uniformly
/// from [`GAUSS_SIGMA_RANGE`]; output clamped to [0, 1]. Returns the
/// corrupted volume and the sigma that was used.
pub fn add_gaussian_noise(x: &Tensor<f64>, seed: u64) -> Result<(Tensor<f64>, f64)> {
    require_volume(x, "add_gaussian_noise")?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sigma = rng.random_range(GAUSS_SIGMA_RANGE.0..GAUSS_SIGMA_RANGE.1);
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, sigma))
}

/// Impulse noise: a single uniform draw per voxel decides salt (forced to
/// 1.0), pepper (forced to 0.0), or pass-through, so the two corruptions are
/// disjoint by construction.
pub fn add_salt_pepper(x: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    require_volume(x, "add_salt_pepper")?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            let u: f64 = rng.random_range(0.0..1.0);
            if u < SALT_FRACTION {
                1.0
            } else if u < SALT_FRACTION + PEPPER_FRACTION {
                0.0
            } else {
                v
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Threshold such that `fraction` of the gradient-noise field generated from
/// `seed` lies above it. Feed the same seed to [`perlin_occlude`] so the
/// realized occluded fraction matches the request (up to grid discreteness).
pub fn occlusion_threshold(side: usize, seed: u64, fraction: f64) -> Result<f64> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "occlusion fraction {fraction} outside (0, 1)"
        )));
    }
    let noise = perlin_noise(side, OCCLUSION_CELLS, seed)?;
    quantile(noise.data(), 1.0 - fraction)
}

/// Zero out the connected blobby region where gradient noise exceeds
/// `threshold`. Returns the occluded volume and the binary occlusion mask
/// (1.0 where voxels were erased).
pub fn perlin_occlude(
    x: &Tensor<f64>,
    threshold: f64,
    seed: u64,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (d, h, w) = require_volume(x, "perlin_occlude")?;
    if !(d == h && h == w) {
        return Err(Error::shape(format!(
            "perlin_occlude expects a cubic volume, got {:?}",
            x.shape()
        )));
    }
    let noise = perlin_noise(d, OCCLUSION_CELLS, seed)?;
    let mut out = Vec::with_capacity(x.numel());
    let mut mask = Vec::with_capacity(x.numel());
    for (&v, &n) in x.data().iter().zip(noise.data()) {
        if n > threshold {
            out.push(0.0);
            mask.push(1.0);
        } else {
            out.push(v);
            mask.push(0.0);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        Tensor::new(x.shape().to_vec(), mask)?,
    ))
}

/// Resolution loss: 2x mean-pool then nearest-neighbor blow-up back to the
/// original grid, so the output shape matches the input but each 2^3 block
/// holds its average. Requires even spatial sides.
pub fn downsample_blur(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (d, h, w) = require_volume(x, "downsample_blur")?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "downsample_blur requires even spatial sides, got {:?}",
            x.shape()
        )));
    }
    let (hd, hh, hw) = (d / 2, h / 2, w / 2);
    let src = x.data();
    let mut pooled = vec![0.0f64; hd * hh * hw];
    for pd in 0..hd {
        for ph in 0..hh {
            for pw in 0..hw {
                let mut acc = 0.0;
                for od in 0..2 {
                    for oh in 0..2 {
                        for ow in 0..2 {
                            acc += src[((pd * 2 + od) * h + ph * 2 + oh) * w + pw * 2 + ow];
                        }
                    }
                }
                pooled[(pd * hh + ph) * hw + pw] = acc / 8.0;
            }
        }
    }
    let small = Tensor::new(vec![1, hd, hh, hw], pooled)?;
    upsample_nearest2x(&small)
}

/// Keep only the three central depth slices (centered at `D / 2`), zeroing
/// the rest: the input a sparse-acquisition volume, the target the full one.
pub fn central_slab(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (d, h, w) = require_volume(x, "central_slab")?;
    if d < 3 {
        return Err(Error::shape(format!(
            "central_slab requires depth >= 3, got {:?}",
            x.shape()
        )));
    }
    let c = d / 2;
    let (lo, hi) = (c - 1, c + 1);
    let src = x.data();
    let mut out = vec![0.0f64; x.numel()];
    for dd in lo..=hi.min(d - 1) {
        let start = dd * h * w;
        out[start..start + h * w].copy_from_slice(&src[start..start + h * w]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// A tiny random monotone-ish intensity transfer curve: a 1-4-1 MLP with
/// leaky-ReLU hidden units applied voxelwise, then min-max rescaled to
/// [0, 1]. Each instance defines one episode's contrast convention.
#[derive(Debug, Clone)]
pub struct RemapNet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.2 * v
    }
}

impl RemapNet {
    pub const HIDDEN: usize = 4;

    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| normal.sample(&mut rng) * scale).collect()
        };
        let w1 = draw(Self::HIDDEN, 1.0);
        let b1 = draw(Self::HIDDEN, 0.5);
        let w2 = draw(Self::HIDDEN, 1.0);
        let b2 = draw(1, 0.5)[0];
        RemapNet { w1, b1, w2, b2 }
    }

    /// The identity curve (useful as a fixed point in tests): one hidden unit
    /// passes the value straight through.
    pub fn identity() -> Self {
        RemapNet {
            w1: vec![1.0],
            b1: vec![0.0],
            w2: vec![1.0],
            b2: 0.0,
        }
    }

    fn eval(&self, v: f64) -> f64 {
        let mut acc = self.b2;
        for ((&w1, &b1), &w2) in self.w1.iter().zip(&self.b1).zip(&self.w2) {
            acc += w2 * leaky(w1 * v + b1);
        }
        acc
    }

    /// Apply the curve voxelwise and min-max rescale the result to [0, 1].
    /// A flat response collapses to all zeros.
    pub fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        require_volume(x, "RemapNet::apply")?;
        let mapped: Vec<f64> = x.data().iter().map(|&v| self.eval(v)).collect();
        let lo = mapped.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = mapped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data: Vec<f64> = if span < 1e-12 {
            vec![0.0; mapped.len()]
        } else {
            mapped.iter().map(|&v| (v - lo) / span).collect()
        };
        Tensor::new(x.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(side: usize) -> Tensor<f64> {
        let n = side * side * side;
        Tensor::from_fn(vec![1, side, side, side], |i| i as f64 / (n - 1) as f64)
    }

    #[test]
    fn zero_scale_bias_is_the_identity() {
        let x = ramp(8);
        let y = apply_bias_field(&x, 3, 0.0, 42).unwrap();
        assert!(x.bitwise_eq(&y));
    }

    #[test]
    fn bias_field_stays_in_unit_range_and_is_deterministic() {
        let x = ramp(8);
        let a = apply_bias_field(&x, 4, 0.5, 9).unwrap();
        let b = apply_bias_field(&x, 4, 0.5, 9).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.max_abs_diff(&x) > 1e-3, "bias with scale 0.5 should move voxels");
        assert!(apply_bias_field(&x, 1, 0.5, 9).is_err());
        assert!(apply_bias_field(&x, 5, 0.5, 9).is_err());
    }

    #[test]
    fn gaussian_noise_sigma_lands_in_declared_range() {
        let x = ramp(8);
        for seed in 0..20 {
            let (y, sigma) = add_gaussian_noise(&x, seed).unwrap();
            assert!((GAUSS_SIGMA_RANGE.0..GAUSS_SIGMA_RANGE.1).contains(&sigma));
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn salt_pepper_fractions_near_four_percent() {
        let x = Tensor::full(&[1, 24, 24, 24], 0.5);
        let y = add_salt_pepper(&x, 123).unwrap();
        let n = y.numel() as f64;
        let salt = y.data().iter().filter(|&&v| v == 1.0).count() as f64 / n;
        let pepper = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n;
        let untouched = y.data().iter().filter(|&&v| v == 0.5).count() as f64 / n;
        // 3-sigma band for a binomial with p = 0.04 and n = 24^3.
        let band = 3.0 * (0.04f64 * 0.96 / n).sqrt();
        assert!((salt - 0.04).abs() < band, "salt fraction {salt}");
        assert!((pepper - 0.04).abs() < band, "pepper fraction {pepper}");
        assert!((untouched - 0.92).abs() < 2.0 * band);
    }

    #[test]
    fn occlusion_fraction_tracks_the_quantile_threshold() {
        let x = Tensor::full(&[1, 16, 16, 16], 0.7);
        for seed in [1u64, 7, 99] {
            let want = 0.15;
            let thr = occlusion_threshold(16, seed, want).unwrap();
            let (y, mask) = perlin_occlude(&x, thr, seed).unwrap();
            let got = mask.data().iter().sum::<f64>() / mask.numel() as f64;
            assert!(
                (got - want).abs() < 0.01,
                "occluded fraction {got} vs requested {want}"
            );
            for (&v, &m) in y.data().iter().zip(mask.data()) {
                assert_eq!(v, if m == 1.0 { 0.0 } else { 0.7 });
            }
        }
    }

    #[test]
    fn downsample_blur_averages_each_block() {
        let x = ramp(4);
        let y = downsample_blur(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        // Every voxel of an output 2^3 block equals the block mean.
        let mut want = 0.0;
        for od in 0..2 {
            for oh in 0..2 {
                for ow in 0..2 {
                    want += x.data()[(od * 4 + oh) * 4 + ow];
                }
            }
        }
        want /= 8.0;
        assert!((y.data()[0] - want).abs() < 1e-15);
        assert!((y.data()[1] - want).abs() < 1e-15);
        let c = Tensor::full(&[1, 4, 4, 4], 0.3);
        assert!(downsample_blur(&c).unwrap().max_abs_diff(&c) < 1e-15);
        let odd = Tensor::full(&[1, 3, 3, 3], 0.3);
        assert!(downsample_blur(&odd).is_err());
    }

    #[test]
    fn central_slab_keeps_exactly_three_slices() {
        let x = Tensor::full(&[1, 16, 4, 4], 1.0);
        let y = central_slab(&x).unwrap();
        for d in 0..16 {
            let v = y.data()[d * 16];
            let expect = if (7..=9).contains(&d) { 1.0 } else { 0.0 };
            assert_eq!(v, expect, "slice {d}");
        }
    }

    #[test]
    fn identity_remap_fixes_unit_range_volumes() {
        let x = ramp(4); // contains exact 0 and 1, so rescale is a no-op
        let y = RemapNet::identity().apply(&x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn random_remap_is_deterministic_and_unit_range() {
        let x = ramp(6);
        let net = RemapNet::random(5);
        let a = net.apply(&x).unwrap();
        let b = RemapNet::random(5).apply(&x).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let flat = RemapNet::random(5).apply(&Tensor::full(&[1, 4, 4, 4], 0.5)).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }
}
