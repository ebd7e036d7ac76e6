//! The segmentation backbone: a 3-D V-Net-style encoder shared by one
//! main decoder and, from the finetuning phase on, `K` auxiliary
//! decoders. Auxiliary decoders are architecturally identical to the
//! main one but independently initialized, and consume a perturbed
//! bottleneck while skip connections pass through unperturbed.

use crate::tensor::{Element, Graph, NodeId, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Number of feature perturbation kinds available to auxiliary
/// decoders (see [`crate::perturb::PerturbationKind`]).
pub const MAX_AUX_DECODERS: usize = 7;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("decoder index {index} out of range (K = {k})")]
    AuxIndex { index: usize, k: usize },
    #[error("auxiliary decoders have not been instantiated")]
    AuxMissing,
    #[error("input spatial shape {got:?} does not match the {expected}^3 patch")]
    PatchShape { got: Vec<usize>, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Resolution levels; the bottleneck sits at `patch / 2^(levels-1)`.
    pub levels: usize,
    /// Channels at full resolution; doubled per level.
    pub base_channels: usize,
    /// Number of auxiliary decoders (K).
    pub aux_decoders: usize,
    /// Cubic patch extent consumed by a single forward pass.
    pub patch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            levels: 3,
            base_channels: 8,
            aux_decoders: 7,
            patch: 32,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.levels < 2 {
            return Err(NetError::Config(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 {
            return Err(NetError::Config("base_channels must be >= 1".into()));
        }
        let down = 1usize << (self.levels - 1);
        if self.patch == 0 || self.patch % down != 0 {
            return Err(NetError::Config(format!(
                "patch {} is not divisible by 2^(levels-1) = {down}",
                self.patch
            )));
        }
        if self.aux_decoders == 0 || self.aux_decoders > MAX_AUX_DECODERS {
            return Err(NetError::Config(format!(
                "aux_decoders must be in 1..={MAX_AUX_DECODERS}, got {}",
                self.aux_decoders
            )));
        }
        if self.in_channels == 0 || self.out_channels != 1 {
            return Err(NetError::Config(
                "in_channels must be >= 1 and out_channels must be 1".into(),
            ));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Ordered named parameter tensors. Iteration order is the sorted name
/// order, which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    entries: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) {
        let name = name.into();
        debug_assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<E>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Element>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Deterministic He-style initializer: conv kernels scaled by fan-in,
/// biases and norm shifts zero, norm scales one. Values are drawn in
/// `f64` and cast, so `f32` and `f64` builds agree up to rounding.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn gaussian(&mut self) -> f64 {
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn conv<E: Element>(
        &mut self,
        store: &mut ParamStore<E>,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
    ) {
        let fan_in = (ci * k * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = co * ci * k * k * k;
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(self.gaussian() * std))
            .collect();
        store.insert(
            format!("{name}.w"),
            Tensor::from_vec(vec![co, ci, k, k, k], data).expect("shape matches"),
        );
        store.insert(format!("{name}.b"), Tensor::zeros(&[co]));
    }

    fn norm<E: Element>(&mut self, store: &mut ParamStore<E>, name: &str, c: usize) {
        store.insert(format!("{name}.g"), Tensor::full(&[c], E::ONE));
        store.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    }
}

const NORM_EPS: f64 = 1e-5;

/// Encoder plus decoders over a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network<E: Element> {
    pub cfg: NetConfig,
    params: ParamStore<E>,
    aux_present: bool,
}

/// Result of a main-path forward: the prediction, the bottleneck
/// feature (reused by every auxiliary path), and the skip features.
pub struct MainForward {
    pub pred: NodeId,
    pub bottleneck: NodeId,
    pub skips: Vec<NodeId>,
}

/// Graph handles for every bound parameter, keyed by name.
pub struct BoundParams {
    nodes: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

fn decoder_init_params<E: Element>(
    cfg: &NetConfig,
    store: &mut ParamStore<E>,
    init: &mut Init,
    decoder: &str,
) {
    for i in (0..cfg.levels - 1).rev() {
        let (c_hi, c_lo) = (cfg.channels(i + 1), cfg.channels(i));
        init.conv(store, &format!("dec.{decoder}.up{i}"), c_lo, c_hi, 3);
        init.norm(store, &format!("dec.{decoder}.un{i}"), c_lo);
        init.conv(store, &format!("dec.{decoder}.fuse{i}"), c_lo, 2 * c_lo, 3);
        init.norm(store, &format!("dec.{decoder}.fn{i}"), c_lo);
    }
    init.conv(
        store,
        &format!("dec.{decoder}.head"),
        cfg.out_channels,
        cfg.channels(0),
        1,
    );
}

/// Build encoder + main decoder deterministically from `seed`.
/// Auxiliary decoders are added later by
/// [`Network::instantiate_aux_decoders`] (they only exist during
/// finetuning).
pub fn build_network<E: Element>(cfg: &NetConfig, seed: u64) -> Result<Network<E>, NetError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);

    init.conv(&mut store, "enc.l0.c1", cfg.channels(0), cfg.in_channels, 3);
    init.norm(&mut store, "enc.l0.n1", cfg.channels(0));
    init.conv(&mut store, "enc.l0.c2", cfg.channels(0), cfg.channels(0), 3);
    init.norm(&mut store, "enc.l0.n2", cfg.channels(0));
    for i in 1..cfg.levels {
        let (c_in, c_out) = (cfg.channels(i - 1), cfg.channels(i));
        init.conv(&mut store, &format!("enc.l{i}.down"), c_out, c_in, 3);
        init.norm(&mut store, &format!("enc.l{i}.dn"), c_out);
        init.conv(&mut store, &format!("enc.l{i}.c"), c_out, c_out, 3);
        init.norm(&mut store, &format!("enc.l{i}.n"), c_out);
    }
    decoder_init_params(cfg, &mut store, &mut init, "main");

    Ok(Network {
        cfg: *cfg,
        params: store,
        aux_present: false,
    })
}

impl<E: Element> Network<E> {
    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    /// Rebuild from a parameter store (checkpoint load). The store
    /// decides whether auxiliary decoders exist.
    pub fn from_params(cfg: NetConfig, params: ParamStore<E>) -> Result<Self, NetError> {
        cfg.validate()?;
        let aux_present = params.names().any(|n| n.starts_with("dec.aux"));
        Ok(Network {
            cfg,
            params,
            aux_present,
        })
    }

    pub fn has_aux_decoders(&self) -> bool {
        self.aux_present
    }

    /// Add the K auxiliary decoders as fresh random initializations
    /// (not clones of the main decoder).
    pub fn instantiate_aux_decoders(&mut self, seed: u64) {
        if self.aux_present {
            return;
        }
        for k in 0..self.cfg.aux_decoders {
            let mut init =
                Init::new(seed ^ (0xA0_D0 + k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            decoder_init_params(&self.cfg, &mut self.params, &mut init, &format!("aux{k}"));
        }
        self.aux_present = true;
    }

    /// Drop auxiliary decoder parameters (inference keeps only the
    /// main path).
    pub fn strip_aux_decoders(&mut self) {
        let aux_names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("dec.aux"))
            .cloned()
            .collect();
        for n in aux_names {
            self.params.remove(&n);
        }
        self.aux_present = false;
    }

    /// Bind every parameter as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph<E>) -> BoundParams {
        let mut nodes = BTreeMap::new();
        for (name, value) in self.params.iter() {
            nodes.insert(name.clone(), g.param(name.clone(), value.clone()));
        }
        BoundParams { nodes }
    }

    /// Bind every parameter as a frozen (non-differentiable) leaf, for
    /// graphs that differentiate with respect to something else, such
    /// as the adversarial-direction search.
    pub fn bind_frozen(&self, g: &mut Graph<E>) -> BoundParams {
        let mut nodes = BTreeMap::new();
        for (name, value) in self.params.iter() {
            nodes.insert(name.clone(), g.input(name.clone(), value.clone()));
        }
        BoundParams { nodes }
    }

    fn conv_block(
        &self,
        g: &mut Graph<E>,
        bound: &BoundParams,
        x: NodeId,
        conv: &str,
        norm: &str,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NetError> {
        let w = bound.node(&format!("{conv}.w"));
        let b = bound.node(&format!("{conv}.b"));
        let y = g.conv3d(x, w, Some(b), stride, pad)?;
        let gamma = bound.node(&format!("{norm}.g"));
        let beta = bound.node(&format!("{norm}.b"));
        let y = g.instance_norm(y, gamma, beta, NORM_EPS)?;
        Ok(g.relu(y)?)
    }

    fn check_patch_input(&self, g: &Graph<E>, x: NodeId) -> Result<(), NetError> {
        let shape = g.shape(x);
        let p = self.cfg.patch;
        if shape.len() != 5
            || shape[1] != self.cfg.in_channels
            || shape[2] != p
            || shape[3] != p
            || shape[4] != p
        {
            return Err(NetError::PatchShape {
                got: shape.to_vec(),
                expected: p,
            });
        }
        Ok(())
    }

    /// Shared encoder; returns skip features (levels `0..L-1`) and the
    /// bottleneck.
    pub fn forward_encoder(
        &self,
        g: &mut Graph<E>,
        bound: &BoundParams,
        x: NodeId,
    ) -> Result<(Vec<NodeId>, NodeId), NetError> {
        self.check_patch_input(g, x)?;
        let mut features = Vec::with_capacity(self.cfg.levels);
        let mut h = self.conv_block(g, bound, x, "enc.l0.c1", "enc.l0.n1", 1, 1)?;
        h = self.conv_block(g, bound, h, "enc.l0.c2", "enc.l0.n2", 1, 1)?;
        features.push(h);
        for i in 1..self.cfg.levels {
            h = self.conv_block(
                g,
                bound,
                h,
                &format!("enc.l{i}.down"),
                &format!("enc.l{i}.dn"),
                2,
                1,
            )?;
            h = self.conv_block(
                g,
                bound,
                h,
                &format!("enc.l{i}.c"),
                &format!("enc.l{i}.n"),
                1,
                1,
            )?;
            features.push(h);
        }
        let bottleneck = features.pop().expect("levels >= 2");
        Ok((features, bottleneck))
    }

    fn forward_decoder(
        &self,
        g: &mut Graph<E>,
        bound: &BoundParams,
        decoder: &str,
        bottleneck: NodeId,
        skips: &[NodeId],
    ) -> Result<NodeId, NetError> {
        let mut h = bottleneck;
        for i in (0..self.cfg.levels - 1).rev() {
            h = g.upsample3d(h, 2)?;
            h = self.conv_block(
                g,
                bound,
                h,
                &format!("dec.{decoder}.up{i}"),
                &format!("dec.{decoder}.un{i}"),
                1,
                1,
            )?;
            h = g.concat(h, skips[i])?;
            h = self.conv_block(
                g,
                bound,
                h,
                &format!("dec.{decoder}.fuse{i}"),
                &format!("dec.{decoder}.fn{i}"),
                1,
                1,
            )?;
        }
        let w = bound.node(&format!("dec.{decoder}.head.w"));
        let b = bound.node(&format!("dec.{decoder}.head.b"));
        let logits = g.conv3d(h, w, Some(b), 1, 0)?;
        Ok(g.sigmoid(logits)?)
    }

    /// Main path: probabilities in `(0,1)` at input resolution, plus
    /// the bottleneck and skips for reuse by auxiliary paths.
    pub fn forward_main(
        &self,
        g: &mut Graph<E>,
        bound: &BoundParams,
        x: NodeId,
    ) -> Result<MainForward, NetError> {
        let (skips, bottleneck) = self.forward_encoder(g, bound, x)?;
        let pred = self.forward_decoder(g, bound, "main", bottleneck, &skips)?;
        Ok(MainForward {
            pred,
            bottleneck,
            skips,
        })
    }

    /// Auxiliary decoder `k` on a (perturbed) bottleneck. Skips come
    /// from the same encoder pass, unperturbed.
    pub fn forward_aux(
        &self,
        g: &mut Graph<E>,
        bound: &BoundParams,
        k: usize,
        z_perturbed: NodeId,
        skips: &[NodeId],
    ) -> Result<NodeId, NetError> {
        if !self.aux_present {
            return Err(NetError::AuxMissing);
        }
        if k >= self.cfg.aux_decoders {
            return Err(NetError::AuxIndex {
                index: k,
                k: self.cfg.aux_decoders,
            });
        }
        self.forward_decoder(g, bound, &format!("aux{k}"), z_perturbed, skips)
    }
}
