//! Task-balanced training losses.
//!
//! Binary mask targets use a cubic-inner robust loss that tolerates small
//! residuals (so near-correct soft predictions are not punished toward 0.5)
//! while staying linear for gross errors. Continuous-valued targets use
//! smooth-L1 on intensities plus smooth-L1 on forward intensity differences,
//! which penalizes blur by matching local gradient structure. Per-task scalar
//! weights bring the loss magnitudes of dissimilar tasks into the same range.

use crate::error::Result;
use crate::taskgen::TaskKind;
use crate::tensor::{self, Graph, NodeId, Scalar, Tensor};

/// Mask loss: mean over voxels of `|d|^3/3` for `|d| < 1`, else `|d| - 2/3`.
/// Value and slope agree at the knee, so the loss is C1 everywhere.
pub fn seg_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    tensor::cubic_l1_mean(pred, target)
}

/// Mean smooth-L1 with unit knee: `0.5 d^2` inside, `|d| - 0.5` outside.
pub fn smooth_l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    tensor::smooth_l1_mean(pred, target)
}

/// Continuous-image loss: equal parts smooth-L1 on voxel values and smooth-L1
/// on forward differences along the three axes.
pub fn gen_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let value_term = tensor::smooth_l1_mean(pred, target)?;
    let dp = tensor::intensity_diff(pred)?;
    let dt = tensor::intensity_diff(target)?;
    let diff_term = tensor::smooth_l1_mean(&dp, &dt)?;
    Ok(T::from_f64(0.5) * (value_term + diff_term))
}

/// Tape version of [`seg_loss`].
pub fn seg_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
) -> Result<NodeId> {
    g.cubic_l1(pred, target)
}

/// Tape version of [`gen_loss`].
pub fn gen_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
) -> Result<NodeId> {
    let value_term = g.smooth_l1(pred, target)?;
    let dp = g.intensity_diff(pred)?;
    let dt = tensor::intensity_diff(target)?;
    let diff_term = g.smooth_l1(dp, &dt)?;
    let s = g.add(value_term, diff_term)?;
    Ok(g.scale(s, 0.5))
}

/// Whether a task is scored as a binary mask or a continuous image.
pub fn is_mask_task(kind: TaskKind) -> bool {
    matches!(kind, TaskKind::Segmentation)
}

/// Loss for one (prediction, target) pair under the given task.
pub fn task_loss<T: Scalar>(kind: TaskKind, pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if is_mask_task(kind) {
        seg_loss(pred, target)
    } else {
        gen_loss(pred, target)
    }
}

/// Tape version of [`task_loss`].
pub fn task_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    kind: TaskKind,
    pred: NodeId,
    target: &Tensor<T>,
) -> Result<NodeId> {
    if is_mask_task(kind) {
        seg_loss_node(g, pred, target)
    } else {
        gen_loss_node(g, pred, target)
    }
}

/// Scalar weight applied to each task's loss so magnitudes are comparable:
/// mask losses on mostly-correct binary outputs are tiny (cubic inner zone),
/// so segmentation is scaled up hard; slice completion produces large easy
/// wins and is scaled down.
pub fn task_loss_weight(kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Segmentation => 50.0,
        TaskKind::TwoDToThreeD => 0.5,
        _ => 1.0,
    }
}

/// Relative draw frequency of each task during training. Segmentation is the
/// hardest transfer target and gets sampled twice as often.
pub fn task_sampling_rate(kind: TaskKind) -> u32 {
    match kind {
        TaskKind::Segmentation => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, 1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn seg_loss_values_at_reference_points() {
        // |d| = 0.5 -> 0.125/3; |d| = 2 -> 4/3
        let l = seg_loss(&vol(&[0.5]), &vol(&[0.0])).unwrap();
        assert!((l - 0.125 / 3.0).abs() < 1e-15);
        let l = seg_loss(&vol(&[2.0]), &vol(&[0.0])).unwrap();
        assert!((l - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn seg_loss_is_c1_at_the_knee() {
        for d in [1.0f64, -1.0] {
            let below = tensor::cubic_l1_voxel(d - d.signum() * 1e-9);
            let at = tensor::cubic_l1_voxel(d);
            let above = tensor::cubic_l1_voxel(d + d.signum() * 1e-9);
            assert!((at - 1.0 / 3.0).abs() < 1e-12, "value mismatch at knee");
            assert!((above - below).abs() < 3e-9, "value jump at knee");
            let slope_in = tensor::cubic_l1_voxel_deriv(d - d.signum() * 1e-12);
            let slope_out = tensor::cubic_l1_voxel_deriv(d + d.signum() * 1e-12);
            assert!((slope_in - slope_out).abs() < 1e-10, "slope jump at knee");
            assert!((slope_in.abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gen_loss_on_uniform_offset_is_half_smooth_l1() {
        // constant offset has identical forward differences, so only the value
        // term contributes
        let side = 4;
        let n = side * side * side;
        let target = Tensor::from_fn(&[1, side, side, side], |i| (i as f64 * 0.37).sin());
        let pred_data: Vec<f64> = target.data().iter().map(|v| v + 0.3).collect();
        let pred = Tensor::new(&[1, side, side, side], pred_data).unwrap();
        let g = gen_loss(&pred, &target).unwrap();
        let s = smooth_l1(&pred, &target).unwrap();
        assert!((g - 0.5 * s).abs() < 1e-12);
        assert!((s - 0.5 * 0.3 * 0.3).abs() < 1e-12, "n = {n}");
    }

    #[test]
    fn smooth_l1_matches_reference_values() {
        let l = smooth_l1(&vol(&[0.4]), &vol(&[0.0])).unwrap();
        assert!((l - 0.08).abs() < 1e-15);
        let l = smooth_l1(&vol(&[-3.0]), &vol(&[0.0])).unwrap();
        assert!((l - 2.5).abs() < 1e-15);
    }

    #[test]
    fn tape_losses_match_value_losses() {
        let target = Tensor::from_fn(&[1, 3, 3, 3], |i| ((i * 7 % 11) as f64) / 11.0);
        let pred_v = Tensor::from_fn(&[1, 3, 3, 3], |i| ((i * 5 % 13) as f64) / 13.0 - 0.2);

        let mut g = Graph::<f64>::new();
        let p = g.param("p", pred_v.clone());
        let n = gen_loss_node(&mut g, p, &target).unwrap();
        assert!((g.value(n).item() - gen_loss(&pred_v, &target).unwrap()).abs() < 1e-14);

        let n = seg_loss_node(&mut g, p, &target).unwrap();
        assert!((g.value(n).item() - seg_loss(&pred_v, &target).unwrap()).abs() < 1e-14);
    }
}
