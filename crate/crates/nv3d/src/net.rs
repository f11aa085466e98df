//! Dual-branch fusion network.
//!
//! The target branch is a 3D U-Net over the query volume. The context branch
//! is a second, weight-shared U-Net applied to each (image ‖ label) context
//! pair. The branches talk at every resolution level: after each context
//! encoder stage the matching target encoder feature is fused in
//! (target-to-context), and after each target decoder stage the averaged
//! context decoder feature is fused in (context-to-target). Both fusions are
//! `gelu(conv(a ‖ b) + residual)`.
//!
//! All forward code is written once against the [`Exec`] abstraction and runs
//! either directly on tensors ([`ValueExec`]) or on the autodiff tape
//! ([`TapeExec`]).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, Graph, NodeId, Scalar, Tensor};

/// Architecture description. `stages` counts resolution levels including the
/// bottleneck; level `i` (1-based) runs at side `s / 2^(i-1)` with
/// `base_channels * 2^(i-1)` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub in_channels_target: usize,
    /// Levels that get both fusion directions; subset of `1..=stages`.
    pub fusion_stages: Vec<usize>,
    pub residual_blocks_per_stage: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            stages: 3,
            base_channels: 8,
            in_channels_target: 1,
            fusion_stages: vec![1, 2, 3],
            residual_blocks_per_stage: 2,
        }
    }
}

impl NetConfig {
    /// Desk-scale default with a given depth, fusing at every level.
    pub fn with_stages(stages: usize, base_channels: usize) -> Self {
        NetConfig {
            stages,
            base_channels,
            in_channels_target: 1,
            fusion_stages: (1..=stages).collect(),
            residual_blocks_per_stage: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::invalid(format!(
                "net needs at least 2 stages, got {}",
                self.stages
            )));
        }
        if self.base_channels == 0 || self.in_channels_target == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.residual_blocks_per_stage == 0 {
            return Err(Error::invalid("residual_blocks_per_stage must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.fusion_stages {
            if s == 0 || s > self.stages {
                return Err(Error::invalid(format!(
                    "fusion stage {s} outside 1..={}",
                    self.stages
                )));
            }
            if !seen.insert(s) {
                return Err(Error::invalid(format!("fusion stage {s} listed twice")));
            }
        }
        Ok(())
    }

    /// Channels at level `i` (1-based).
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    pub fn context_in_channels(&self) -> usize {
        self.in_channels_target + 1
    }

    pub fn fused(&self, stage: usize) -> bool {
        self.fusion_stages.contains(&stage)
    }

    /// The input cube side must survive `stages - 1` halvings.
    pub fn validate_side(&self, side: usize) -> Result<()> {
        let factor = 1usize << (self.stages - 1);
        if side == 0 || side % factor != 0 {
            return Err(Error::invalid(format!(
                "volume side {side} is not a positive multiple of {factor} \
                 (required by {} resolution levels)",
                self.stages
            )));
        }
        Ok(())
    }

    /// Every parameter tensor the architecture uses, with its shape, in
    /// deterministic construction order.
    pub fn expected_params(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut conv = |name: String, co: usize, ci: usize, k: usize| {
            out.push((format!("{name}.w"), vec![co, ci, k, k, k]));
            out.push((format!("{name}.b"), vec![co]));
        };
        let d = self.stages;
        let rbs = self.residual_blocks_per_stage;
        for branch in ["tgt", "ctx"] {
            let in_ch = if branch == "tgt" {
                self.in_channels_target
            } else {
                self.context_in_channels()
            };
            conv(format!("{branch}.stem"), self.channels(1), in_ch, 3);
            for i in 1..=d {
                let c = self.channels(i);
                for r in 0..rbs {
                    conv(format!("{branch}.enc{i}.rb{r}.c0"), c, c, 3);
                    conv(format!("{branch}.enc{i}.rb{r}.c1"), c, c, 3);
                }
                if i < d {
                    conv(format!("{branch}.down{i}"), self.channels(i + 1), c, 3);
                }
            }
            for i in 1..d {
                let c = self.channels(i);
                conv(format!("{branch}.up{i}"), c, self.channels(i + 1), 3);
                conv(format!("{branch}.skip{i}"), c, 2 * c, 3);
                for r in 0..rbs {
                    conv(format!("{branch}.dec{i}.rb{r}.c0"), c, c, 3);
                    conv(format!("{branch}.dec{i}.rb{r}.c1"), c, c, 3);
                }
            }
            for i in 1..=d {
                if self.fused(i) {
                    let c = self.channels(i);
                    let name = if branch == "tgt" { "c2t" } else { "t2c" };
                    conv(format!("{branch}.{name}{i}"), c, 2 * c, 3);
                }
            }
        }
        conv("tgt.out".to_string(), 1, self.channels(1), 1);
        out
    }
}

/// Named parameter table.
#[derive(Clone)]
pub struct ModelParams<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(map: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    /// Replace one tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name:?} has shape {:?}, replacement has {:?}",
                old.shape(),
                value.shape()
            )));
        }
        self.map.insert(name.to_string(), value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

/// Network = config + parameters + instrumentation counters.
pub struct Network<T: Scalar> {
    pub cfg: NetConfig,
    pub params: ModelParams<T>,
    target_encode_calls: AtomicU64,
    context_pass_calls: AtomicU64,
}

impl<T: Scalar> Clone for Network<T> {
    /// Clones config and weights; the instrumentation counters start at zero.
    fn clone(&self) -> Self {
        Network {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            target_encode_calls: AtomicU64::new(0),
            context_pass_calls: AtomicU64::new(0),
        }
    }
}

impl<T: Scalar> Network<T> {
    /// He-style initialization: weights ~ N(0, 2 / fan_in), biases zero.
    /// Deterministic in `seed`.
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (name, shape) in cfg.expected_params() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape.clone())
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
                    .expect("valid normal");
                let data: Vec<T> = (0..shape.iter().product())
                    .map(|_| T::from_f64(dist.sample(&mut rng)))
                    .collect();
                Tensor::new(shape, data)?
            };
            map.insert(name, t);
        }
        Ok(Network {
            cfg,
            params: ModelParams::new(map),
            target_encode_calls: AtomicU64::new(0),
            context_pass_calls: AtomicU64::new(0),
        })
    }

    /// Wrap existing parameters (e.g. from a checkpoint), verifying the table
    /// matches the architecture exactly.
    pub fn from_params(cfg: NetConfig, params: ModelParams<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.expected_params();
        if expected.len() != params.len() {
            return Err(Error::invalid(format!(
                "parameter table has {} tensors, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {name:?}: checkpoint shape {:?} vs architecture {:?}",
                    t.shape(),
                    shape
                )));
            }
            t.assert_finite(name)?;
        }
        Ok(Network {
            cfg,
            params,
            target_encode_calls: AtomicU64::new(0),
            context_pass_calls: AtomicU64::new(0),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            target_encode_calls: AtomicU64::new(0),
            context_pass_calls: AtomicU64::new(0),
        }
    }

    /// (target-encoder calls, per-pair context passes) since the last reset.
    pub fn counters(&self) -> (u64, u64) {
        (
            self.target_encode_calls.load(Ordering::Relaxed),
            self.context_pass_calls.load(Ordering::Relaxed),
        )
    }

    pub fn reset_counters(&self) {
        self.target_encode_calls.store(0, Ordering::Relaxed);
        self.context_pass_calls.store(0, Ordering::Relaxed);
    }

    // -- building blocks -----------------------------------------------------

    /// `gelu(conv1(gelu(conv0(x))) + x)`; zeroed convs reduce it to `gelu(x)`.
    pub fn residual_block<E: Exec<T>>(&self, e: &mut E, prefix: &str, x: &E::H) -> Result<E::H> {
        let h = e.conv(&format!("{prefix}.c0"), x, 1, 1)?;
        let h = e.gelu(&h);
        let h = e.conv(&format!("{prefix}.c1"), &h, 1, 1)?;
        let s = e.add(&h, x)?;
        Ok(e.gelu(&s))
    }

    /// Ordered concatenation followed by a 2C -> C convolution.
    pub fn fusion<E: Exec<T>>(
        &self,
        e: &mut E,
        conv_name: &str,
        c: &E::H,
        t: &E::H,
    ) -> Result<E::H> {
        let cat = e.concat(c, t)?;
        e.conv(conv_name, &cat, 1, 1)
    }

    /// Context-side fusion at an encoder level: residual on the context
    /// feature, so a zeroed fusion conv leaves `gelu(c)`.
    pub fn t2c_fuse<E: Exec<T>>(&self, e: &mut E, stage: usize, c: &E::H, t: &E::H) -> Result<E::H> {
        let f = self.fusion(e, &format!("ctx.t2c{stage}"), c, t)?;
        let s = e.add(&f, c)?;
        Ok(e.gelu(&s))
    }

    /// Target-side fusion at a decoder level: residual on the target feature.
    pub fn c2t_fuse<E: Exec<T>>(
        &self,
        e: &mut E,
        stage: usize,
        cbar: &E::H,
        t: &E::H,
    ) -> Result<E::H> {
        let f = self.fusion(e, &format!("tgt.c2t{stage}"), cbar, t)?;
        let s = e.add(&f, t)?;
        Ok(e.gelu(&s))
    }

    fn encode<E: Exec<T>>(&self, e: &mut E, branch: &str, x: &E::H) -> Result<Vec<E::H>> {
        let d = self.cfg.stages;
        let mut feats = Vec::with_capacity(d);
        let mut h = e.conv(&format!("{branch}.stem"), x, 1, 1)?;
        for i in 1..=d {
            for r in 0..self.cfg.residual_blocks_per_stage {
                h = self.residual_block(e, &format!("{branch}.enc{i}.rb{r}"), &h)?;
            }
            feats.push(h.clone());
            if i < d {
                h = e.conv(&format!("{branch}.down{i}"), &h, 2, 1)?;
            }
        }
        Ok(feats)
    }

    fn decode_ladder<E: Exec<T>>(
        &self,
        e: &mut E,
        branch: &str,
        enc: &[E::H],
        start: E::H,
        mut after_stage: impl FnMut(&mut E, usize, &E::H) -> Result<Option<E::H>>,
    ) -> Result<E::H> {
        let d = self.cfg.stages;
        let mut h = start;
        for i in (1..d).rev() {
            let up = e.upsample2x(&h)?;
            h = e.conv(&format!("{branch}.up{i}"), &up, 1, 1)?;
            let cat = e.concat(&h, &enc[i - 1])?;
            h = e.conv(&format!("{branch}.skip{i}"), &cat, 1, 1)?;
            for r in 0..self.cfg.residual_blocks_per_stage {
                h = self.residual_block(e, &format!("{branch}.dec{i}.rb{r}"), &h)?;
            }
            if let Some(replaced) = after_stage(e, i, &h)? {
                h = replaced;
            }
        }
        Ok(h)
    }

    // -- passes --------------------------------------------------------------

    /// Target encoder: per-level features `t^1..t^D` (last entry = bottleneck).
    /// Called once per prediction however many context pairs there are.
    pub fn target_encode<E: Exec<T>>(&self, e: &mut E, x: &E::H) -> Result<Vec<E::H>> {
        self.target_encode_calls.fetch_add(1, Ordering::Relaxed);
        self.encode(e, "tgt", x)
    }

    /// Full U-Net pass over one 2-channel context pair. Target encoder
    /// features are fused in after each encoder level; the returned list holds
    /// the decoder output at every level (`index i-1` = level `i`, last =
    /// bottleneck).
    pub fn context_pass<E: Exec<T>>(
        &self,
        e: &mut E,
        target_feats: &[E::H],
        pair: &E::H,
    ) -> Result<Vec<E::H>> {
        self.context_pass_calls.fetch_add(1, Ordering::Relaxed);
        let d = self.cfg.stages;
        if target_feats.len() != d {
            return Err(Error::shape(format!(
                "context_pass wants {d} target features, got {}",
                target_feats.len()
            )));
        }
        // encoder with target-to-context fusion
        let mut enc = Vec::with_capacity(d);
        let mut h = e.conv("ctx.stem", pair, 1, 1)?;
        for i in 1..=d {
            for r in 0..self.cfg.residual_blocks_per_stage {
                h = self.residual_block(e, &format!("ctx.enc{i}.rb{r}"), &h)?;
            }
            if self.cfg.fused(i) {
                h = self.t2c_fuse(e, i, &h, &target_feats[i - 1])?;
            }
            enc.push(h.clone());
            if i < d {
                h = e.conv(&format!("ctx.down{i}"), &h, 2, 1)?;
            }
        }
        // decoder; capture the output at every level
        let mut dec: Vec<Option<E::H>> = vec![None; d];
        dec[d - 1] = Some(enc[d - 1].clone());
        let bottom = enc[d - 1].clone();
        self.decode_ladder(e, "ctx", &enc, bottom, |_e, i, h| {
            dec[i - 1] = Some(h.clone());
            Ok(None)
        })?;
        Ok(dec.into_iter().map(|o| o.expect("all levels filled")).collect())
    }

    /// Batch wrapper over [`Network::context_pass`]; rejects an empty list.
    pub fn context_branch<E: Exec<T>>(
        &self,
        e: &mut E,
        target_feats: &[E::H],
        pairs: &[E::H],
    ) -> Result<Vec<Vec<E::H>>> {
        if pairs.is_empty() {
            return Err(Error::invalid("context_branch requires at least one pair"));
        }
        pairs
            .iter()
            .map(|p| self.context_pass(e, target_feats, p))
            .collect()
    }

    /// Target decoder: U-Net skips from the target encoder plus
    /// context-to-target fusion with the averaged context feature at each
    /// fused level, then a 1x1x1 projection to one channel.
    pub fn target_decode<E: Exec<T>>(
        &self,
        e: &mut E,
        target_feats: &[E::H],
        cbar: &[E::H],
    ) -> Result<E::H> {
        let d = self.cfg.stages;
        if target_feats.len() != d || cbar.len() != d {
            return Err(Error::shape(format!(
                "target_decode wants {d} target and {d} context features, got {} and {}",
                target_feats.len(),
                cbar.len()
            )));
        }
        let mut h = target_feats[d - 1].clone();
        if self.cfg.fused(d) {
            h = self.c2t_fuse(e, d, &cbar[d - 1], &h)?;
        }
        let h = self.decode_ladder(e, "tgt", target_feats, h, |e, i, t| {
            if self.cfg.fused(i) {
                Ok(Some(self.c2t_fuse(e, i, &cbar[i - 1], t)?))
            } else {
                Ok(None)
            }
        })?;
        e.conv("tgt.out", &h, 1, 0)
    }
}

// ---------------------------------------------------------------------------
// Execution modes
// ---------------------------------------------------------------------------

/// How forward code touches values: plainly or on the autodiff tape.
pub trait Exec<T: Scalar> {
    type H: Clone;
    fn input(&mut self, v: &Tensor<T>) -> Self::H;
    fn conv(&mut self, name: &str, x: &Self::H, stride: usize, padding: usize) -> Result<Self::H>;
    fn gelu(&mut self, x: &Self::H) -> Self::H;
    fn add(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn concat(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn upsample2x(&mut self, x: &Self::H) -> Result<Self::H>;
    fn value(&self, x: &Self::H) -> Tensor<T>;
}

/// Direct evaluation against a parameter table; used for inference and for
/// the value-only (discarded) part of training.
pub struct ValueExec<'a, T: Scalar> {
    pub params: &'a ModelParams<T>,
}

impl<'a, T: Scalar> ValueExec<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        ValueExec { params }
    }
}

impl<T: Scalar> Exec<T> for ValueExec<'_, T> {
    type H = Tensor<T>;

    fn input(&mut self, v: &Tensor<T>) -> Tensor<T> {
        v.clone()
    }

    fn conv(&mut self, name: &str, x: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        tensor::conv3d(x, w, b, stride, padding)
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        tensor::gelu(x)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add_elem(a, b)
    }

    fn concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::concat_channels(a, b)
    }

    fn upsample2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::upsample_nearest2x(x)
    }

    fn value(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }
}

/// Tape-building evaluation for training. Parameters must be registered on
/// the graph first (see [`register_params`]).
pub struct TapeExec<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a BTreeMap<String, NodeId>,
}

/// Put every parameter on the tape as a named gradient target.
pub fn register_params<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ModelParams<T>,
) -> BTreeMap<String, NodeId> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), graph.param(name, t.clone())))
        .collect()
}

impl<'a, T: Scalar> TapeExec<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a BTreeMap<String, NodeId>) -> Self {
        TapeExec { graph, params }
    }

    fn param_node(&self, name: &str) -> Result<NodeId> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }
}

impl<T: Scalar> Exec<T> for TapeExec<'_, T> {
    type H = NodeId;

    fn input(&mut self, v: &Tensor<T>) -> NodeId {
        self.graph.constant(v.clone())
    }

    fn conv(&mut self, name: &str, x: &NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let w = self.param_node(&format!("{name}.w"))?;
        let b = self.param_node(&format!("{name}.b"))?;
        self.graph.conv3d(*x, w, b, stride, padding)
    }

    fn gelu(&mut self, x: &NodeId) -> NodeId {
        self.graph.gelu(*x)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.add(*a, *b)
    }

    fn concat(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.concat(*a, *b)
    }

    fn upsample2x(&mut self, x: &NodeId) -> Result<NodeId> {
        self.graph.upsample2x(*x)
    }

    fn value(&self, x: &NodeId) -> Tensor<T> {
        self.graph.value(*x).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64) -> Network<f64> {
        Network::init(NetConfig::with_stages(2, 2), seed).unwrap()
    }

    fn rand_vol(shape: &[usize], salt: u64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| {
            let h = (i as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
            ((h >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        assert!(NetConfig::with_stages(1, 4).validate().is_err());
        let mut cfg = NetConfig::with_stages(2, 4);
        cfg.fusion_stages = vec![3];
        assert!(cfg.validate().is_err());
        cfg.fusion_stages = vec![1, 1];
        assert!(cfg.validate().is_err());
        let cfg = NetConfig::with_stages(3, 4);
        assert!(cfg.validate_side(16).is_ok());
        assert!(cfg.validate_side(6).is_err());
        assert!(cfg.validate_side(0).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = tiny_net(7);
        let b = tiny_net(7);
        let c = tiny_net(8);
        for (name, t) in a.params.iter() {
            assert!(t.bitwise_eq(b.params.get(name).unwrap()), "{name}");
        }
        let differs = a
            .params
            .iter()
            .any(|(name, t)| !t.bitwise_eq(c.params.get(name).unwrap()));
        assert!(differs);
    }

    #[test]
    fn encoder_ladder_shapes() {
        let net = Network::<f64>::init(NetConfig::with_stages(3, 2), 1).unwrap();
        let x = rand_vol(&[1, 8, 8, 8], 0);
        let mut e = ValueExec::new(&net.params);
        let feats = net.target_encode(&mut e, &x).unwrap();
        assert_eq!(feats[0].shape(), &[2, 8, 8, 8]);
        assert_eq!(feats[1].shape(), &[4, 4, 4, 4]);
        assert_eq!(feats[2].shape(), &[8, 2, 2, 2]);
    }

    #[test]
    fn residual_block_with_zero_convs_is_gelu() {
        let mut net = tiny_net(3);
        for r in 0..2 {
            for c in ["c0", "c1"] {
                let wname = format!("tgt.enc1.rb{r}.{c}.w");
                let shape = net.params.get(&wname).unwrap().shape().to_vec();
                net.params.set(&wname, Tensor::zeros(shape)).unwrap();
            }
        }
        let x = rand_vol(&[2, 4, 4, 4], 1);
        let mut e = ValueExec::new(&net.params);
        let y = net.residual_block(&mut e, "tgt.enc1.rb0", &x).unwrap();
        assert!(y.max_abs_diff(&tensor::gelu(&x)) < 1e-15);
    }

    #[test]
    fn fusion_is_ordered_in_its_arguments() {
        let net = tiny_net(4);
        let c = rand_vol(&[2, 4, 4, 4], 2);
        let t = rand_vol(&[2, 4, 4, 4], 3);
        let mut e = ValueExec::new(&net.params);
        let ab = net.fusion(&mut e, "ctx.t2c1", &c, &t).unwrap();
        let ba = net.fusion(&mut e, "ctx.t2c1", &t, &c).unwrap();
        assert!(ab.max_abs_diff(&ba) > 1e-6);
    }

    #[test]
    fn zeroed_t2c_ignores_the_target_feature() {
        let mut net = tiny_net(5);
        let shape = net.params.get("ctx.t2c1.w").unwrap().shape().to_vec();
        net.params.set("ctx.t2c1.w", Tensor::zeros(shape)).unwrap();
        net.params.set("ctx.t2c1.b", Tensor::zeros(&[2])).unwrap();
        let c = rand_vol(&[2, 4, 4, 4], 4);
        let t1 = rand_vol(&[2, 4, 4, 4], 5);
        let t2 = rand_vol(&[2, 4, 4, 4], 6);
        let mut e = ValueExec::new(&net.params);
        let a = net.t2c_fuse(&mut e, 1, &c, &t1).unwrap();
        let b = net.t2c_fuse(&mut e, 1, &c, &t2).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.max_abs_diff(&tensor::gelu(&c)) < 1e-15);
    }

    #[test]
    fn zeroed_fusion_convs_make_output_context_independent() {
        let mut net = tiny_net(6);
        for i in 1..=2 {
            for (name, co) in [(format!("tgt.c2t{i}"), net.cfg.channels(i))] {
                let wshape = net.params.get(&format!("{name}.w")).unwrap().shape().to_vec();
                net.params.set(&format!("{name}.w"), Tensor::zeros(wshape)).unwrap();
                net.params.set(&format!("{name}.b"), Tensor::zeros(&[co])).unwrap();
            }
        }
        let x = rand_vol(&[1, 4, 4, 4], 7);
        let mut e = ValueExec::new(&net.params);
        let feats = net.target_encode(&mut e, &x).unwrap();
        let cbar1 = vec![rand_vol(&[2, 4, 4, 4], 8), rand_vol(&[4, 2, 2, 2], 9)];
        let cbar2 = vec![rand_vol(&[2, 4, 4, 4], 10), rand_vol(&[4, 2, 2, 2], 11)];
        let y1 = net.target_decode(&mut e, &feats, &cbar1).unwrap();
        let y2 = net.target_decode(&mut e, &feats, &cbar2).unwrap();
        assert!(y1.bitwise_eq(&y2));
        assert_eq!(y1.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn forward_is_pure_and_counters_count() {
        let net = tiny_net(9);
        net.reset_counters();
        let x = rand_vol(&[1, 4, 4, 4], 12);
        let pair = rand_vol(&[2, 4, 4, 4], 13);
        let mut e = ValueExec::new(&net.params);
        let feats = net.target_encode(&mut e, &x).unwrap();
        let c1 = net.context_pass(&mut e, &feats, &pair).unwrap();
        let c2 = net.context_pass(&mut e, &feats, &pair).unwrap();
        for (a, b) in c1.iter().zip(&c2) {
            assert!(a.bitwise_eq(b));
        }
        assert_eq!(net.counters(), (1, 2));
        assert_eq!(c1[0].shape(), &[2, 4, 4, 4]);
        assert_eq!(c1[1].shape(), &[4, 2, 2, 2]);
    }

    #[test]
    fn context_pass_depends_on_target_when_fused() {
        let net = tiny_net(10);
        let pair = rand_vol(&[2, 4, 4, 4], 14);
        let mut e = ValueExec::new(&net.params);
        let f1 = net.target_encode(&mut e, &rand_vol(&[1, 4, 4, 4], 15)).unwrap();
        let f2 = net.target_encode(&mut e, &rand_vol(&[1, 4, 4, 4], 16)).unwrap();
        let c1 = net.context_pass(&mut e, &f1, &pair).unwrap();
        let c2 = net.context_pass(&mut e, &f2, &pair).unwrap();
        assert!(c1[0].max_abs_diff(&c2[0]) > 1e-9);
    }

    #[test]
    fn empty_context_branch_is_rejected() {
        let net = tiny_net(11);
        let x = rand_vol(&[1, 4, 4, 4], 17);
        let mut e = ValueExec::new(&net.params);
        let feats = net.target_encode(&mut e, &x).unwrap();
        assert!(net.context_branch(&mut e, &feats, &[]).is_err());
    }

    #[test]
    fn tape_and_value_execution_agree() {
        let net = tiny_net(12);
        let x = rand_vol(&[1, 4, 4, 4], 18);
        let pair = rand_vol(&[2, 4, 4, 4], 19);

        let mut ve = ValueExec::new(&net.params);
        let vfeats = net.target_encode(&mut ve, &x).unwrap();
        let vc = net.context_pass(&mut ve, &vfeats, &pair).unwrap();
        let vy = net.target_decode(&mut ve, &vfeats, &vc).unwrap();

        let mut g = Graph::new();
        let nodes = register_params(&mut g, &net.params);
        let mut te = TapeExec::new(&mut g, &nodes);
        let xh = te.input(&x);
        let ph = te.input(&pair);
        let tfeats = net.target_encode(&mut te, &xh).unwrap();
        let tc = net.context_pass(&mut te, &tfeats, &ph).unwrap();
        let ty = net.target_decode(&mut te, &tfeats, &tc).unwrap();

        assert!(vy.max_abs_diff(g.value(ty)) < 1e-12);
    }
}
