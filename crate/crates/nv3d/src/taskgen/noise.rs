//! Random field synthesis: value noise, gradient (Perlin-style) noise, and
//! Legendre polynomial fields used to build phantoms and degradations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothstep-like fade `6t^5 - 15t^4 + 10t^3` used for gradient-noise
/// interpolation weights. Maps [0,1] -> [0,1] with zero first and second
/// derivatives at both ends.
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Trilinearly interpolated lattice of uniform values in [-1, 1].
///
/// The lattice has `cells` cells per axis (so `cells + 1` nodes); voxel `i`
/// samples the field at parameter `i / side * cells`. Output is a rank-4
/// volume `[1, side, side, side]`, deterministic in `seed`.
pub fn value_noise(side: usize, cells: usize, seed: u64) -> Result<Tensor<f64>> {
    if side == 0 || cells == 0 {
        return Err(Error::invalid("value_noise requires side >= 1 and cells >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let nodes = cells + 1;
    let mut grid = vec![0.0f64; nodes * nodes * nodes];
    for v in grid.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let at = |d: usize, h: usize, w: usize| grid[(d * nodes + h) * nodes + w];
    let scale = cells as f64 / side as f64;
    let mut out = vec![0.0f64; side * side * side];
    for d in 0..side {
        let pd = d as f64 * scale;
        let (d0, td) = (pd.floor() as usize, pd.fract());
        for h in 0..side {
            let ph = h as f64 * scale;
            let (h0, th) = (ph.floor() as usize, ph.fract());
            for w in 0..side {
                let pw = w as f64 * scale;
                let (w0, tw) = (pw.floor() as usize, pw.fract());
                let c00 = lerp(at(d0, h0, w0), at(d0, h0, w0 + 1), tw);
                let c01 = lerp(at(d0, h0 + 1, w0), at(d0, h0 + 1, w0 + 1), tw);
                let c10 = lerp(at(d0 + 1, h0, w0), at(d0 + 1, h0, w0 + 1), tw);
                let c11 = lerp(at(d0 + 1, h0 + 1, w0), at(d0 + 1, h0 + 1, w0 + 1), tw);
                out[(d * side + h) * side + w] =
                    lerp(lerp(c00, c01, th), lerp(c10, c11, th), td);
            }
        }
    }
    Tensor::new(vec![1, side, side, side], out)
}

/// Two-octave value noise (`cells` and `2*cells`, second octave at half
/// amplitude). The workhorse field behind phantom geometry.
pub fn low_freq_field(side: usize, cells: usize, seed: u64) -> Result<Tensor<f64>> {
    let a = value_noise(side, cells, seed)?;
    let b = value_noise(side, cells * 2, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + 0.5 * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Gradient-lattice noise: a random unit gradient per lattice node, corner
/// dot products blended with the quintic [`fade`] weights. Smoother than
/// value noise and roughly zero-mean; used for occlusion masks.
pub fn perlin_noise(side: usize, cells: usize, seed: u64) -> Result<Tensor<f64>> {
    if side == 0 || cells == 0 {
        return Err(Error::invalid("perlin_noise requires side >= 1 and cells >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let nodes = cells + 1;
    let mut grads = vec![[0.0f64; 3]; nodes * nodes * nodes];
    for g in grads.iter_mut() {
        loop {
            let v: [f64; 3] = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-6 {
                *g = [v[0] / n, v[1] / n, v[2] / n];
                break;
            }
        }
    }
    let grad_at = |d: usize, h: usize, w: usize| grads[(d * nodes + h) * nodes + w];
    let scale = cells as f64 / side as f64;
    let mut out = vec![0.0f64; side * side * side];
    for d in 0..side {
        let pd = d as f64 * scale;
        let (d0, td) = (pd.floor() as usize, pd.fract());
        for h in 0..side {
            let ph = h as f64 * scale;
            let (h0, th) = (ph.floor() as usize, ph.fract());
            for w in 0..side {
                let pw = w as f64 * scale;
                let (w0, tw) = (pw.floor() as usize, pw.fract());
                let mut corner = [0.0f64; 8];
                for (i, c) in corner.iter_mut().enumerate() {
                    let (dd, dh, dw) = (i >> 2 & 1, i >> 1 & 1, i & 1);
                    let g = grad_at(d0 + dd, h0 + dh, w0 + dw);
                    let off = [td - dd as f64, th - dh as f64, tw - dw as f64];
                    *c = g[0] * off[0] + g[1] * off[1] + g[2] * off[2];
                }
                let (fd, fh, fw) = (fade(td), fade(th), fade(tw));
                let x00 = lerp(corner[0], corner[1], fw);
                let x01 = lerp(corner[2], corner[3], fw);
                let x10 = lerp(corner[4], corner[5], fw);
                let x11 = lerp(corner[6], corner[7], fw);
                out[(d * side + h) * side + w] = lerp(lerp(x00, x01, fh), lerp(x10, x11, fh), fd);
            }
        }
    }
    Tensor::new(vec![1, side, side, side], out)
}

/// Legendre polynomial P_n(x) via the three-term recurrence
/// `(n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}`.
pub fn legendre_p(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut pm1, mut p) = (1.0, x);
            for k in 1..n {
                let next = ((2 * k + 1) as f64 * x * p - k as f64 * pm1) / (k + 1) as f64;
                pm1 = p;
                p = next;
            }
            p
        }
    }
}

/// Evaluate a separable Legendre expansion `sum a_ijk P_i(u) P_j(v) P_k(w)`
/// at a single normalized coordinate (each of u, v, w in [-1, 1]).
pub fn legendre_value(coeffs: &[((usize, usize, usize), f64)], u: f64, v: f64, w: f64) -> f64 {
    coeffs
        .iter()
        .map(|&((i, j, k), a)| a * legendre_p(i, u) * legendre_p(j, v) * legendre_p(k, w))
        .sum()
}

/// Evaluate a Legendre expansion over a cubic grid. Voxel `i` maps to the
/// normalized coordinate `2 (i + 0.5) / side - 1`, so an odd-sided volume has
/// a voxel exactly at the origin.
pub fn legendre_field(side: usize, coeffs: &[((usize, usize, usize), f64)]) -> Result<Tensor<f64>> {
    if side == 0 {
        return Err(Error::invalid("legendre_field requires side >= 1"));
    }
    let coord = |i: usize| 2.0 * (i as f64 + 0.5) / side as f64 - 1.0;
    // Precompute per-axis polynomial tables so the triple loop is a lookup.
    let max_deg = coeffs
        .iter()
        .map(|&((i, j, k), _)| i.max(j).max(k))
        .max()
        .unwrap_or(0);
    let table: Vec<Vec<f64>> = (0..side)
        .map(|i| {
            let x = coord(i);
            (0..=max_deg).map(|n| legendre_p(n, x)).collect()
        })
        .collect();
    let mut out = vec![0.0f64; side * side * side];
    for d in 0..side {
        for h in 0..side {
            for w in 0..side {
                let mut acc = 0.0;
                for &((i, j, k), a) in coeffs {
                    acc += a * table[d][i] * table[h][j] * table[w][k];
                }
                out[(d * side + h) * side + w] = acc;
            }
        }
    }
    Tensor::new(vec![1, side, side, side], out)
}

/// Linear-interpolation quantile of `values` at fraction `q` in [0, 1]
/// (the convention where q sits at position `q * (n - 1)` of the sorted data).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty slice"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile fraction {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(lerp(sorted[lo], sorted[hi], pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_noise_is_deterministic_and_bounded() {
        let a = value_noise(12, 4, 7).unwrap();
        let b = value_noise(12, 4, 7).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        let c = value_noise(12, 4, 8).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn value_noise_interpolates_between_lattice_nodes() {
        // With cells == side, voxel i sits exactly on lattice node i, so the
        // field at voxel 0 equals the first drawn node value.
        let side = 4;
        let f = value_noise(side, side, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let first: f64 = rng.random_range(-1.0..1.0);
        assert!((f.data()[0] - first).abs() < 1e-12);
    }

    #[test]
    fn perlin_vanishes_on_lattice_nodes() {
        // On a lattice node the offset vector is zero, so the dot product and
        // hence the blended value there is exactly zero.
        let side = 4;
        let f = perlin_noise(side, side, 11).unwrap();
        assert_eq!(f.data()[0], 0.0);
    }

    #[test]
    fn perlin_is_deterministic_and_roughly_centered() {
        let a = perlin_noise(16, 4, 5).unwrap();
        let b = perlin_noise(16, 4, 5).unwrap();
        assert!(a.bitwise_eq(&b));
        let mean: f64 = a.data().iter().sum::<f64>() / a.numel() as f64;
        assert!(mean.abs() < 0.2, "gradient noise mean {mean} far from zero");
    }

    #[test]
    fn legendre_matches_closed_forms() {
        for &x in &[-0.9, -0.3, 0.0, 0.5, 1.0] {
            assert!((legendre_p(0, x) - 1.0).abs() < 1e-15);
            assert!((legendre_p(1, x) - x).abs() < 1e-15);
            assert!((legendre_p(2, x) - 0.5 * (3.0 * x * x - 1.0)).abs() < 1e-14);
            assert!((legendre_p(3, x) - 0.5 * (5.0 * x * x * x - 3.0 * x)).abs() < 1e-14);
            let p4 = (35.0 * x.powi(4) - 30.0 * x * x + 3.0) / 8.0;
            assert!((legendre_p(4, x) - p4).abs() < 1e-14);
        }
    }

    #[test]
    fn legendre_field_center_voxel_of_odd_side() {
        // Side 9 puts voxel 4 at the exact center (coordinate 0); with only
        // the (2,0,0) coefficient set, the field there is a * P_2(0) = -a/2.
        let f = legendre_field(9, &[((2, 0, 0), 1.0)]).unwrap();
        let center = f.data()[(4 * 9 + 4) * 9 + 4];
        assert!((center - (-0.5)).abs() < 1e-12, "center value {center}");
    }

    #[test]
    fn quantile_interpolates_linearly() {
        let vals = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&vals, 0.0).unwrap(), 0.0);
        assert_eq!(quantile(&vals, 1.0).unwrap(), 3.0);
        assert!((quantile(&vals, 0.5).unwrap() - 1.5).abs() < 1e-15);
        // Order must not matter.
        let shuffled = [3.0, 0.0, 2.0, 1.0];
        assert!((quantile(&shuffled, 0.5).unwrap() - 1.5).abs() < 1e-15);
    }
}
