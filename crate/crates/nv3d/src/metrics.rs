//! Evaluation metrics: Dice overlap for masks, PSNR for intensity volumes.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dice coefficient between a raw prediction (thresholded at 0.5) and a
/// binary ground-truth mask: `2|A ∩ B| / (|A| + |B|)`. Two empty masks are a
/// perfect match by convention (1.0).
pub fn dice<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "dice shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let half = T::from_f64(0.5);
    let mut inter = 0u64;
    let mut a = 0u64;
    let mut b = 0u64;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let tv = t.to_f64();
        if tv != 0.0 && tv != 1.0 {
            return Err(Error::invalid(format!(
                "dice ground truth must be binary, found {tv}"
            )));
        }
        let pa = p > half;
        let tb = tv == 1.0;
        a += pa as u64;
        b += tb as u64;
        inter += (pa && tb) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Peak signal-to-noise ratio in dB against a [0, 1] reference:
/// `10 log10(1 / MSE)`. A perfect match returns +infinity.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::invalid("psnr of empty volumes"));
    }
    let mut mse = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let d = p.to_f64() - t.to_f64();
        mse += d * d;
    }
    mse /= pred.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean and population standard deviation of a sample.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("mean_std of an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_counts_overlap_after_thresholding() {
        // pred selects {0, 1}, truth selects {1, 2}: 2*1 / (2 + 2) = 0.5.
        let pred = Tensor::new(vec![4], vec![0.9, 0.7, 0.1, 0.2]).unwrap();
        let truth = Tensor::new(vec![4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((dice(&pred, &truth).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dice_of_two_empty_masks_is_one() {
        let pred = Tensor::full(&[8], 0.2);
        let truth = Tensor::full(&[8], 0.0);
        assert_eq!(dice(&pred, &truth).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_non_binary_truth() {
        let pred = Tensor::full(&[4], 0.9);
        let truth = Tensor::full(&[4], 0.5);
        assert!(dice(&pred, &truth).is_err());
    }

    #[test]
    fn psnr_of_uniform_offsets() {
        let truth = Tensor::full(&[100], 0.5);
        let a = Tensor::full(&[100], 0.6); // MSE 0.01 -> 20 dB
        assert!((psnr(&a, &truth).unwrap() - 20.0).abs() < 1e-12);
        let b = Tensor::full(&[100], 1.0); // MSE 0.25 -> ~6.0206 dB
        assert!((psnr(&b, &truth).unwrap() - 10.0 * 4.0f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&truth, &truth).unwrap(), f64::INFINITY);
    }

    #[test]
    fn mean_std_is_population_flavored() {
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
        assert!(mean_std(&[]).is_err());
    }
}
