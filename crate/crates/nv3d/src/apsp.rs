//! Chunked context processing with exact streaming semantics.
//!
//! A context set of `L` pairs is split into `n = ceil(L / mini)` disjoint
//! chunks. Pairs inside a chunk are processed in parallel and averaged
//! (uniform mean); chunks are folded sequentially into a running weighted
//! mean, after which each chunk's features are dropped. Peak live activation
//! memory is therefore bounded by one chunk, while the final representation —
//! and hence the prediction — is identical to processing all `L` pairs at
//! once: the running mean reassociates the same uniform average.
//!
//! Training differentiates through only the last-processed chunk (chunk order
//! is shuffled per step) and rescales that branch so the gradient is unbiased:
//! the retained stage means enter the loss as `constant + s * m` with
//! `s = n * len / L`, where the constant is chosen so the forward value stays
//! the true full mean. Averaged over a uniform choice of retained chunk the
//! gradient equals the full-context gradient exactly, because the loss is
//! evaluated at the same forward point for every choice.
//!
//! Stage means are accumulated in f64 regardless of the working dtype so the
//! partition/order invariance bounds hold at f32 too.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses;
use crate::net::{register_params, Exec, Network, TapeExec, ValueExec};
use crate::taskgen::TaskKind;
use crate::tensor::{self, Graph, NodeId, Scalar, Tensor};

/// One context example: an input volume and its task output, both `[1,D,H,W]`.
#[derive(Clone)]
pub struct ContextPair<T: Scalar> {
    pub image: Tensor<T>,
    pub label: Tensor<T>,
}

impl<T: Scalar> ContextPair<T> {
    pub fn new(image: Tensor<T>, label: Tensor<T>) -> Result<Self> {
        if image.rank() != 4 || label.rank() != 4 {
            return Err(Error::shape(format!(
                "context pair wants rank-4 volumes, got {:?} and {:?}",
                image.shape(),
                label.shape()
            )));
        }
        if image.shape() != label.shape() {
            return Err(Error::shape(format!(
                "context image {:?} and label {:?} differ",
                image.shape(),
                label.shape()
            )));
        }
        image.assert_finite("context image")?;
        label.assert_finite("context label")?;
        Ok(ContextPair { image, label })
    }

    /// Stack image and label into the 2-channel context-branch input.
    pub fn to_input(&self) -> Result<Tensor<T>> {
        tensor::concat_channels(&self.image, &self.label)
    }

    pub fn cast<U: Scalar>(&self) -> ContextPair<U> {
        ContextPair {
            image: self.image.cast(),
            label: self.label.cast(),
        }
    }
}

/// How a context set is chunked and in which order the chunks are folded.
/// Chunk `j` (original index) covers pairs `[j*mini, min((j+1)*mini, total))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub total: usize,
    pub mini: usize,
    pub n: usize,
    pub sizes: Vec<usize>,
    /// Original chunk indices in processing order; the last entry is the
    /// chunk that training retains gradients for.
    pub order: Vec<usize>,
}

impl PartitionPlan {
    /// Inference plan: chunks processed in natural order.
    pub fn new(total: usize, mini: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::invalid("cannot partition an empty context set"));
        }
        if mini == 0 {
            return Err(Error::invalid("mini-context size must be at least 1"));
        }
        let n = total.div_ceil(mini);
        let sizes: Vec<usize> = (0..n)
            .map(|j| if j + 1 < n { mini } else { total - mini * (n - 1) })
            .collect();
        Ok(PartitionPlan {
            total,
            mini,
            n,
            sizes,
            order: (0..n).collect(),
        })
    }

    /// Training plan: chunk order shuffled, so the retained (last) chunk is
    /// uniform over chunks.
    pub fn shuffled(total: usize, mini: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        let mut plan = Self::new(total, mini)?;
        plan.order.shuffle(rng);
        Ok(plan)
    }

    /// Plan with a chosen retained chunk; the rest keep natural order. Used to
    /// enumerate every retained choice exactly.
    pub fn with_retained(total: usize, mini: usize, retained: usize) -> Result<Self> {
        let mut plan = Self::new(total, mini)?;
        if retained >= plan.n {
            return Err(Error::invalid(format!(
                "retained chunk {retained} out of range for n={}",
                plan.n
            )));
        }
        plan.order.retain(|&j| j != retained);
        plan.order.push(retained);
        Ok(plan)
    }

    /// Pair index range of chunk `j` (original index).
    pub fn members(&self, j: usize) -> std::ops::Range<usize> {
        let lo = j * self.mini;
        lo..(lo + self.sizes[j])
    }

    /// Original index of the chunk processed last.
    pub fn retained(&self) -> usize {
        *self.order.last().expect("plan is never empty")
    }
}

/// Running weighted mean of per-stage context features, accumulated in f64.
pub struct ContextRepresentation {
    pub stage_means: Vec<Tensor<f64>>,
    /// Pairs merged so far; exact by integer arithmetic.
    pub weight: u64,
}

impl ContextRepresentation {
    pub fn empty() -> Self {
        ContextRepresentation {
            stage_means: Vec::new(),
            weight: 0,
        }
    }

    /// Fold one chunk mean in: `alpha * acc + (1 - alpha) * incoming` with
    /// `alpha = w / (w + len)`. The incoming tensors are consumed and dropped.
    pub fn sequential_merge(&mut self, incoming: Vec<Tensor<f64>>, len: u64) -> Result<()> {
        if len == 0 {
            return Err(Error::invalid("cannot merge an empty chunk"));
        }
        if self.weight == 0 {
            self.stage_means = incoming;
            self.weight = len;
            return Ok(());
        }
        if incoming.len() != self.stage_means.len() {
            return Err(Error::shape(format!(
                "merge of {} stages into accumulator with {}",
                incoming.len(),
                self.stage_means.len()
            )));
        }
        let alpha = self.weight as f64 / (self.weight + len) as f64;
        let beta = 1.0 - alpha;
        for (acc, inc) in self.stage_means.iter_mut().zip(incoming) {
            if acc.shape() != inc.shape() {
                return Err(Error::shape(format!(
                    "merge stage shape {:?} vs accumulator {:?}",
                    inc.shape(),
                    acc.shape()
                )));
            }
            let data: Vec<f64> = acc
                .data()
                .iter()
                .zip(inc.data())
                .map(|(&a, &b)| alpha * a + beta * b)
                .collect();
            *acc = Tensor::new(acc.shape(), data)?;
        }
        self.weight += len;
        Ok(())
    }
}

/// Uniform per-stage mean of the context features of one chunk. Pairs are
/// processed in parallel; the reduction runs in ascending pair order, so the
/// result is reproducible bit-for-bit. Per-pair features are cast to f64
/// before averaging.
pub fn mini_context_pass<T: Scalar>(
    net: &Network<T>,
    target_feats: &[Tensor<T>],
    pairs: &[ContextPair<T>],
) -> Result<Vec<Tensor<f64>>> {
    if pairs.is_empty() {
        return Err(Error::invalid("mini_context_pass on an empty chunk"));
    }
    let per_pair: Vec<Vec<Tensor<f64>>> = pairs
        .par_iter()
        .map(|p| {
            let mut e = ValueExec::new(&net.params);
            let input = p.to_input()?;
            let feats = net.context_pass(&mut e, target_feats, &input)?;
            Ok(feats.into_iter().map(|t| t.cast::<f64>()).collect())
        })
        .collect::<Result<_>>()?;
    let stages = per_pair[0].len();
    let weights = vec![1.0; per_pair.len()];
    (0..stages)
        .map(|i| {
            let xs: Vec<Tensor<f64>> = per_pair.iter().map(|f| f[i].clone()).collect();
            tensor::reduce_mean_batch(&xs, &weights)
        })
        .collect()
}

fn check_context_shapes<T: Scalar>(x: &Tensor<T>, pairs: &[ContextPair<T>]) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.image.shape() != x.shape() {
            return Err(Error::shape(format!(
                "context pair {i} has shape {:?} but the target is {:?}",
                p.image.shape(),
                x.shape()
            )));
        }
    }
    Ok(())
}

fn streamed_representation<T: Scalar>(
    net: &Network<T>,
    target_feats: &[Tensor<T>],
    pairs: &[ContextPair<T>],
    plan: &PartitionPlan,
    skip_last: bool,
) -> Result<ContextRepresentation> {
    let mut acc = ContextRepresentation::empty();
    let upto = if skip_last { plan.n - 1 } else { plan.n };
    for &j in plan.order.iter().take(upto) {
        let chunk = &pairs[plan.members(j)];
        let means = mini_context_pass(net, target_feats, chunk)?;
        acc.sequential_merge(means, chunk.len() as u64)?;
    }
    Ok(acc)
}

/// Streaming prediction: encode the target once, fold all context chunks into
/// the running mean, then decode. The result does not depend on `mini` or on
/// the order of pairs beyond float rounding.
pub fn apsp_forward<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    pairs: &[ContextPair<T>],
    mini: usize,
) -> Result<Tensor<T>> {
    let plan = PartitionPlan::new(pairs.len(), mini)?;
    apsp_forward_with_plan(net, x, pairs, &plan)
}

pub fn apsp_forward_with_plan<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    pairs: &[ContextPair<T>],
    plan: &PartitionPlan,
) -> Result<Tensor<T>> {
    check_context_shapes(x, pairs)?;
    let mut e = ValueExec::new(&net.params);
    let target_feats = net.target_encode(&mut e, x)?;
    let acc = streamed_representation(net, &target_feats, pairs, plan, false)?;
    debug_assert_eq!(acc.weight as usize, plan.total);
    let cbar: Vec<Tensor<T>> = acc.stage_means.iter().map(|t| t.cast::<T>()).collect();
    net.target_decode(&mut e, &target_feats, &cbar)
}

/// Which scaling the retained chunk's gradient branch gets. The fault modes
/// deliberately break the unbiasedness and exist so the equivalence check can
/// prove it would catch a wrong implementation; forward values are preserved
/// in every mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Unbiased: scale by `n * len / L`.
    Exact,
    /// Fault injection: scale as if one chunk fewer, `(n-1) * len / L`.
    UnderScale,
    /// Fault injection: drop the `len / L` weighting, scale by `n` alone.
    DropLenWeight,
}

impl GradMode {
    fn scale(self, n: usize, len: usize, total: usize) -> f64 {
        let (n, len, total) = (n as f64, len as f64, total as f64);
        match self {
            GradMode::Exact => n * len / total,
            GradMode::UnderScale => (n - 1.0) * len / total,
            GradMode::DropLenWeight => n,
        }
    }
}

/// One training forward/backward: shuffled chunk order, gradients through the
/// last chunk only, rescaled to stay unbiased. Returns the (task-weighted)
/// loss and gradients for every named parameter.
pub fn apsp_train_forward<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    pairs: &[ContextPair<T>],
    mini: usize,
    kind: TaskKind,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let plan = PartitionPlan::shuffled(pairs.len(), mini, &mut rng)?;
    apsp_train_forward_with_plan(net, x, y, pairs, &plan, kind, GradMode::Exact)
}

pub fn apsp_train_forward_with_plan<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    pairs: &[ContextPair<T>],
    plan: &PartitionPlan,
    kind: TaskKind,
    mode: GradMode,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    check_context_shapes(x, pairs)?;
    if y.shape() != x.shape() {
        return Err(Error::shape(format!(
            "target output {:?} does not match input {:?}",
            y.shape(),
            x.shape()
        )));
    }

    let mut g: Graph<T> = Graph::new();
    let nodes = register_params(&mut g, &net.params);
    let mut e = TapeExec::new(&mut g, &nodes);
    let xh = e.input(x);
    let tfeat_nodes = net.target_encode(&mut e, &xh)?;
    let tfeat_values: Vec<Tensor<T>> = tfeat_nodes.iter().map(|&id| g.value(id).clone()).collect();

    // all chunks except the retained one: plain value passes, features dropped
    let prefix = streamed_representation(net, &tfeat_values, pairs, plan, true)?;

    // retained chunk on the tape
    let retained = plan.retained();
    let chunk = &pairs[plan.members(retained)];
    let len = chunk.len();
    let mut e = TapeExec::new(&mut g, &nodes);
    let mut per_pair: Vec<Vec<NodeId>> = Vec::with_capacity(len);
    for p in chunk {
        let input = e.input(&p.to_input()?);
        per_pair.push(net.context_pass(&mut e, &tfeat_nodes, &input)?);
    }
    let stages = per_pair[0].len();
    let uniform = vec![1.0; len];
    let retained_means: Vec<NodeId> = (0..stages)
        .map(|i| {
            let ids: Vec<NodeId> = per_pair.iter().map(|f| f[i]).collect();
            g.mean_batch(&ids, &uniform)
        })
        .collect::<Result<_>>()?;

    // straight-through mix: forward = true mean, backward = scaled retained
    let s = mode.scale(plan.n, len, plan.total);
    let w_pre = prefix.weight as f64;
    let total = plan.total as f64;
    let cbar_nodes: Vec<NodeId> = retained_means
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let v = g.value(m).cast::<f64>();
            let full_mean = if prefix.weight == 0 {
                v.clone()
            } else {
                let p = &prefix.stage_means[i];
                let data: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(&pv, &mv)| (w_pre * pv + len as f64 * mv) / total)
                    .collect();
                Tensor::new(p.shape(), data)?
            };
            let constant: Vec<f64> = full_mean
                .data()
                .iter()
                .zip(v.data())
                .map(|(&fm, &mv)| fm - s * mv)
                .collect();
            let c = g.constant(Tensor::new(full_mean.shape(), constant)?.cast::<T>());
            let scaled = g.scale(m, s);
            g.add(c, scaled)
        })
        .collect::<Result<_>>()?;

    let mut e = TapeExec::new(&mut g, &nodes);
    let pred = net.target_decode(&mut e, &tfeat_nodes, &cbar_nodes)?;
    let yt = y.clone();
    let base_loss = losses::task_loss_node(&mut g, kind, pred, &yt)?;
    let loss = g.scale(base_loss, losses::task_loss_weight(kind));

    let loss_value = g.value(loss).item().to_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss is {loss_value} (task {kind:?})"
        )));
    }
    let grads = g.backward(loss)?;
    Ok((loss_value, g.named_grads(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn rand_vol(shape: &[usize], salt: u64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| {
            let h = (i as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 0.8
        })
    }

    fn tiny_net(seed: u64) -> Network<f64> {
        Network::init(NetConfig::with_stages(2, 2), seed).unwrap()
    }

    fn pairs(count: usize, salt: u64) -> Vec<ContextPair<f64>> {
        (0..count)
            .map(|i| {
                ContextPair::new(
                    rand_vol(&[1, 4, 4, 4], salt + 2 * i as u64),
                    rand_vol(&[1, 4, 4, 4], salt + 2 * i as u64 + 1),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn partition_arithmetic() {
        let p = PartitionPlan::new(8, 3).unwrap();
        assert_eq!((p.n, p.sizes.clone()), (3, vec![3, 3, 2]));
        assert_eq!(p.members(2), 6..8);
        let p = PartitionPlan::new(4, 4).unwrap();
        assert_eq!((p.n, p.sizes.clone()), (1, vec![4]));
        let p = PartitionPlan::new(5, 1).unwrap();
        assert_eq!((p.n, p.sizes.clone()), (5, vec![1; 5]));
        assert!(PartitionPlan::new(0, 3).is_err());
        assert!(PartitionPlan::new(3, 0).is_err());
    }

    #[test]
    fn shuffled_plan_is_a_permutation_ending_in_retained() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let p = PartitionPlan::shuffled(10, 3, &mut rng).unwrap();
        let mut sorted = p.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(p.retained(), *p.order.last().unwrap());
        let q = PartitionPlan::with_retained(10, 3, 1).unwrap();
        assert_eq!(q.order, vec![0, 2, 3, 1]);
        assert!(PartitionPlan::with_retained(10, 3, 4).is_err());
    }

    #[test]
    fn sequential_merge_matches_closed_form() {
        let shape = [2usize, 2, 2, 2];
        let v = |c: f64| vec![Tensor::full(&shape, c)];
        let mut acc = ContextRepresentation::empty();
        acc.sequential_merge(v(1.0), 3).unwrap();
        assert_eq!(acc.weight, 3);
        assert!(acc.stage_means[0].max_abs_diff(&Tensor::full(&shape, 1.0)) == 0.0);
        acc.sequential_merge(v(2.0), 3).unwrap();
        acc.sequential_merge(v(4.0), 2).unwrap();
        let expect = (3.0 * 1.0 + 3.0 * 2.0 + 2.0 * 4.0) / 8.0;
        assert!(acc.stage_means[0].max_abs_diff(&Tensor::full(&shape, expect)) < 1e-15);
        assert_eq!(acc.weight, 8);
    }

    #[test]
    fn merging_the_same_value_keeps_it() {
        let shape = [1usize, 2, 2, 2];
        let c = rand_vol(&shape, 9);
        let mut acc = ContextRepresentation::empty();
        acc.sequential_merge(vec![c.clone()], 2).unwrap();
        acc.sequential_merge(vec![c.clone()], 2).unwrap();
        assert!(acc.stage_means[0].max_abs_diff(&c) < 1e-15);
    }

    #[test]
    fn chunk_mean_matches_brute_force_average() {
        let net = tiny_net(21);
        let ps = pairs(3, 100);
        let mut e = ValueExec::new(&net.params);
        let x = rand_vol(&[1, 4, 4, 4], 55);
        let tf = net.target_encode(&mut e, &x).unwrap();

        let got = mini_context_pass(&net, &tf, &ps).unwrap();
        // independent accumulation: plain elementwise sums
        for stage in 0..got.len() {
            let mut acc: Option<Vec<f64>> = None;
            for p in &ps {
                let mut e = ValueExec::new(&net.params);
                let f = net
                    .context_pass(&mut e, &tf, &p.to_input().unwrap())
                    .unwrap();
                let d: Vec<f64> = f[stage].data().to_vec();
                acc = Some(match acc {
                    None => d,
                    Some(a) => a.iter().zip(&d).map(|(x, y)| x + y).collect(),
                });
            }
            let mean: Vec<f64> = acc.unwrap().iter().map(|v| v / ps.len() as f64).collect();
            let reference = Tensor::new(got[stage].shape(), mean).unwrap();
            assert!(got[stage].max_abs_diff(&reference) < 1e-13, "stage {stage}");
        }

        // singleton chunk passes features through unchanged
        let single = mini_context_pass(&net, &tf, &ps[..1]).unwrap();
        let mut e = ValueExec::new(&net.params);
        let direct = net
            .context_pass(&mut e, &tf, &ps[0].to_input().unwrap())
            .unwrap();
        for (a, b) in single.iter().zip(&direct) {
            assert!(a.max_abs_diff(&b.cast::<f64>()) < 1e-15);
        }
    }

    #[test]
    fn streaming_is_partition_invariant_on_a_tiny_net() {
        let net = tiny_net(33);
        let ps = pairs(5, 500);
        let x = rand_vol(&[1, 4, 4, 4], 77);
        let full = apsp_forward(&net, &x, &ps, 5).unwrap();
        for mini in [1, 2, 3, 4] {
            let out = apsp_forward(&net, &x, &ps, mini).unwrap();
            assert!(out.max_abs_diff(&full) < 1e-10, "mini={mini}");
        }
    }

    #[test]
    fn target_encoder_runs_once_per_prediction() {
        let net = tiny_net(41);
        let ps = pairs(4, 900);
        let x = rand_vol(&[1, 4, 4, 4], 3);
        net.reset_counters();
        apsp_forward(&net, &x, &ps, 1).unwrap();
        let (enc_calls, ctx_calls) = net.counters();
        assert_eq!(enc_calls, 1);
        assert_eq!(ctx_calls, 4);
    }

    #[test]
    fn train_forward_is_deterministic_and_complete() {
        let net = tiny_net(52);
        let ps = pairs(4, 1300);
        let x = rand_vol(&[1, 4, 4, 4], 8);
        let y = rand_vol(&[1, 4, 4, 4], 9);
        let (l1, g1) =
            apsp_train_forward(&net, &x, &y, &ps, 2, TaskKind::GaussianDenoise, 99).unwrap();
        let (l2, g2) =
            apsp_train_forward(&net, &x, &y, &ps, 2, TaskKind::GaussianDenoise, 99).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.len(), net.params.len());
        for (k, v) in &g1 {
            assert!(v.bitwise_eq(&g2[k]), "{k}");
            assert_eq!(v.shape(), net.params.get(k).unwrap().shape());
        }
    }

    #[test]
    fn train_forward_value_equals_inference_forward_loss() {
        // the straight-through constants must keep the forward value at the
        // true mean: loss(train pass) == loss(value pass) for every mini size
        let net = tiny_net(60);
        let ps = pairs(4, 1700);
        let x = rand_vol(&[1, 4, 4, 4], 10);
        let y = rand_vol(&[1, 4, 4, 4], 11);
        let pred = apsp_forward(&net, &x, &ps, 4).unwrap();
        let direct =
            losses::task_loss(TaskKind::GaussianDenoise, &pred, &y).unwrap();
        for mini in [1, 2, 4] {
            let plan = PartitionPlan::with_retained(4, mini, 0).unwrap();
            let (loss, _) = apsp_train_forward_with_plan(
                &net,
                &x,
                &y,
                &ps,
                &plan,
                TaskKind::GaussianDenoise,
                GradMode::Exact,
            )
            .unwrap();
            assert!(
                (loss - direct).abs() < 1e-10,
                "mini={mini}: {loss} vs {direct}"
            );
        }
    }

    #[test]
    fn context_pair_validation() {
        let a = rand_vol(&[1, 4, 4, 4], 1);
        let b = rand_vol(&[1, 2, 2, 2], 2);
        assert!(ContextPair::new(a.clone(), b).is_err());
        let bad = Tensor::full(&[1, 4, 4, 4], f64::NAN);
        assert!(ContextPair::new(a.clone(), bad).is_err());
        let ok = ContextPair::new(a.clone(), a).unwrap();
        assert_eq!(ok.to_input().unwrap().shape(), &[2, 4, 4, 4]);
    }
}
