//! Frozen actor-critic backbone modulated by binarized score masks.
//!
//! The backbone is built once from a collective-wide seed and never
//! trained. Each agent learns real-valued scores, one per weight element
//! (biases stay unmasked); the forward pass thresholds the scores at zero
//! and multiplies the surviving weights in. Peer masks enter through a
//! softmax-weighted linear combination whose weights (beta) are trained
//! jointly with the local scores; gradients cross the threshold via the
//! straight-through estimator.
//!
//! All tensor math is generic over f32/f64: production runs in f32, the
//! gradient-verification tests instantiate f64 where finite differences
//! are meaningful.

use ndarray::{Array1, Array2, ArrayView2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::rng::{splitmix64, DetRng};

/// Element type bound for network tensors.
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + std::fmt::Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch at layer {layer}: {got:?} vs {want:?}")]
    ShapeMismatch {
        layer: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("observation dimension {got} does not match backbone input {want}")]
    BadInput { got: usize, want: usize },
    #[error("beta length {got} does not match 1 + {peers} peers")]
    BetaLength { got: usize, peers: usize },
    #[error("stale forward cache (generation {cache} vs current {current})")]
    StaleCache { cache: u64, current: u64 },
}

/// Layer sizing: three hidden feature layers plus critic and actor heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub obs_dim: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl NetDims {
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        vec![
            (self.obs_dim, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, 1),
            (self.hidden, self.actions),
        ]
    }
}

/// Index of the critic head in the layer list.
pub const CRITIC_LAYER: usize = 3;
/// Index of the actor head in the layer list.
pub const ACTOR_LAYER: usize = 4;

/// Frozen shared network. Weights and biases are fan-in-scaled uniform,
/// drawn per layer from the collective backbone seed, so any two agents
/// with the same config hold bitwise-equal parameters.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub dims: NetDims,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn init(seed: u64, dims: NetDims) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (layer, (fan_in, fan_out)) in dims.weight_shapes().into_iter().enumerate() {
            let mut rng = DetRng::derive(seed, "backbone", layer as u64);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Array2::zeros((fan_in, fan_out));
            for i in 0..fan_in {
                for j in 0..fan_out {
                    w[(i, j)] = T::of(rng.uniform_pm(bound));
                }
            }
            let mut b = Array1::zeros(fan_out);
            for j in 0..fan_out {
                b[j] = T::of(rng.uniform_pm(bound));
            }
            weights.push(w);
            biases.push(b);
        }
        Self {
            dims,
            weights,
            biases,
        }
    }

    /// Order-sensitive bit checksum over all parameters; the trainer
    /// verifies it after every update to enforce the frozen contract.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xC0FF_EE00_D15E_A5E5u64;
        for w in &self.weights {
            for &x in w.iter() {
                h = splitmix64(h ^ x.as_f64().to_bits());
            }
        }
        for b in &self.biases {
            for &x in b.iter() {
                h = splitmix64(h ^ x.as_f64().to_bits());
            }
        }
        h
    }
}

/// Real-valued score arrays, shape-aligned with the backbone weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskScores<T> {
    pub layers: Vec<Array2<T>>,
}

impl<T: Scalar> MaskScores<T> {
    /// Uniform init in [-range, range] from the agent's own seed; roughly
    /// half the weights start active.
    pub fn init_uniform(dims: NetDims, seed: u64, range: f64) -> Self {
        let layers = dims
            .weight_shapes()
            .into_iter()
            .enumerate()
            .map(|(layer, (fan_in, fan_out))| {
                let mut rng = DetRng::derive(seed, "scores", layer as u64);
                Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.uniform_pm(range)))
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Array2::zeros(l.dim()))
                .collect(),
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.dim()).collect()
    }

    pub fn matches_dims(&self, dims: NetDims) -> bool {
        self.shapes() == dims.weight_shapes()
    }
}

/// Strict-threshold binarization: 1 where score > 0, else 0.
pub fn binarize<T: Scalar>(scores: &MaskScores<T>) -> Vec<Array2<T>> {
    scores
        .layers
        .iter()
        .map(|l| l.mapv(|s| if s > T::zero() { T::one() } else { T::zero() }))
        .collect()
}

/// Forward-pass gate. `Binary` is the production thresholding; `Identity`
/// is the linearized hook used by gradient-verification tests, where the
/// straight-through estimate is the exact derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Binary,
    Identity,
}

/// Softmax mixture over the local mask and K peer masks. Logits are kept
/// in f64 so the weights sum to one far below the 1e-9 contract even when
/// the score tensors are f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub logits: Vec<f64>,
}

/// Floor applied to beta targets before the log so a normalized return of
/// exactly one does not produce an infinite logit.
pub const RGI_FLOOR: f64 = 1e-6;

impl BetaMixture {
    pub fn uniform(k: usize) -> Self {
        Self {
            logits: vec![0.0; 1 + k],
        }
    }

    /// Reward-guided initialization: beta_local = 0.5 + 0.5 r, the rest of
    /// the mass split evenly over the K peers. Out-of-range returns are
    /// clamped with a warning.
    pub fn reward_guided(r_bar: f64, k: usize) -> Self {
        let r = if (0.0..=1.0).contains(&r_bar) {
            r_bar
        } else {
            log::warn!("normalized return {r_bar} outside [0,1]; clamping");
            r_bar.clamp(0.0, 1.0)
        };
        if k == 0 {
            return Self { logits: vec![0.0] };
        }
        let mut targets = Vec::with_capacity(1 + k);
        targets.push(0.5 + 0.5 * r);
        let per_peer = 0.5 * (1.0 - r) / k as f64;
        targets.extend(std::iter::repeat(per_peer).take(k));
        Self {
            logits: targets.iter().map(|t| t.max(RGI_FLOOR).ln()).collect(),
        }
    }

    /// Ablation variant: fixed 0.5 local mass, 0.5 split over peers.
    pub fn fixed_split(k: usize) -> Self {
        if k == 0 {
            return Self { logits: vec![0.0] };
        }
        let mut targets = vec![0.5];
        targets.extend(std::iter::repeat(0.5 / k as f64).take(k));
        Self {
            logits: targets.iter().map(|t| t.max(RGI_FLOOR).ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Softmax weights; always positive, summing to one.
    pub fn weights(&self) -> Vec<f64> {
        let max = self
            .logits
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// A mask received from a peer, tagged with its provenance.
#[derive(Debug, Clone)]
pub struct PeerMask<T> {
    pub scores: MaskScores<T>,
    pub source_agent: u32,
    pub mask_id: u64,
}

/// Trainable composition state: the local mask, the peer set of the
/// current communication event, and the beta mixture over all of them.
#[derive(Debug, Clone)]
pub struct Composition<T> {
    pub local: MaskScores<T>,
    pub peers: Vec<PeerMask<T>>,
    pub beta: BetaMixture,
}

impl<T: Scalar> Composition<T> {
    pub fn new(local: MaskScores<T>) -> Self {
        Self {
            local,
            peers: Vec::new(),
            beta: BetaMixture::uniform(0),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let want = self.local.shapes();
        for peer in &self.peers {
            for (layer, (got, expect)) in
                peer.scores.shapes().into_iter().zip(want.iter()).enumerate()
            {
                if got != *expect {
                    return Err(NetError::ShapeMismatch {
                        layer,
                        got,
                        want: *expect,
                    });
                }
            }
        }
        if self.beta.len() != 1 + self.peers.len() {
            return Err(NetError::BetaLength {
                got: self.beta.len(),
                peers: self.peers.len(),
            });
        }
        Ok(())
    }

    /// Weighted score sum beta_local * local + sum_k beta_k * peer_k.
    /// With no peers this is the local mask itself (no beta scaling), the
    /// branch the forward pass takes when nothing has been received.
    pub fn combined_scores(&self) -> MaskScores<T> {
        if self.peers.is_empty() {
            return self.local.clone();
        }
        let betas = self.beta.weights();
        let b_local = T::of(betas[0]);
        let mut layers: Vec<Array2<T>> = self
            .local
            .layers
            .iter()
            .map(|l| l.mapv(|s| s * b_local))
            .collect();
        for (k, peer) in self.peers.iter().enumerate() {
            let b = T::of(betas[1 + k]);
            for (acc, src) in layers.iter_mut().zip(&peer.scores.layers) {
                acc.zip_mut_with(src, |a, &s| *a = *a + s * b);
            }
        }
        MaskScores { layers }
    }

    /// Binarized linear combination; the mask actually applied in forward.
    pub fn binary_mask(&self) -> Vec<Array2<T>> {
        binarize(&self.combined_scores())
    }

    /// Collapses the composition into a single score set (the weighted sum
    /// itself). Binarizing the result reproduces the composed mask, so the
    /// policy is unchanged; the caller replaces the local mask with this,
    /// clears the peer set, and re-initializes beta.
    pub fn consolidated_scores(&self) -> MaskScores<T> {
        self.combined_scores()
    }
}

/// Forward activations cached for the backward pass.
pub struct ForwardCache<T> {
    generation: u64,
    input: Array2<T>,
    hidden: Vec<Array2<T>>,
    pub logits: Array2<T>,
    pub values: Array2<T>,
}

/// Gradients with respect to the trainable quantities.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub local_scores: Vec<Array2<T>>,
    /// d loss / d beta logits; all zeros when the peer set is empty.
    pub beta_logits: Vec<f64>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros(shapes: &[(usize, usize)], beta_len: usize) -> Self {
        Self {
            local_scores: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            beta_logits: vec![0.0; beta_len],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.local_scores.iter_mut().zip(&other.local_scores) {
            a.zip_mut_with(b, |x, &y| *x = *x + y);
        }
        for (a, b) in self.beta_logits.iter_mut().zip(&other.beta_logits) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let f = T::of(factor);
        for g in self.local_scores.iter_mut() {
            g.mapv_inplace(|x| x * f);
        }
        for g in self.beta_logits.iter_mut() {
            *g *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in &self.local_scores {
            for &x in g.iter() {
                let v = x.as_f64();
                acc += v * v;
            }
        }
        for &x in &self.beta_logits {
            acc += x * x;
        }
        acc.sqrt()
    }
}

/// The policy: frozen backbone plus composition state plus the cached
/// effective weights. `refresh` must be called after any score or beta
/// change; forward caches carry a generation stamp so a backward against
/// stale activations is rejected.
pub struct PolicyNet<T> {
    pub backbone: std::sync::Arc<Backbone<T>>,
    pub comp: Composition<T>,
    pub gate: GateMode,
    effective: Vec<Array2<T>>,
    generation: u64,
}

impl<T: Scalar> PolicyNet<T> {
    pub fn new(
        backbone: std::sync::Arc<Backbone<T>>,
        comp: Composition<T>,
        gate: GateMode,
    ) -> Result<Self, NetError> {
        comp.validate()?;
        let mut net = Self {
            backbone,
            comp,
            gate,
            effective: Vec::new(),
            generation: 0,
        };
        net.refresh();
        Ok(net)
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Recomputes effective weights from the current composition.
    pub fn refresh(&mut self) {
        let combined = self.comp.combined_scores();
        self.effective = self
            .backbone
            .weights
            .iter()
            .zip(&combined.layers)
            .map(|(w, m)| match self.gate {
                GateMode::Binary => Array2::from_shape_fn(w.dim(), |idx| {
                    if m[idx] > T::zero() {
                        w[idx]
                    } else {
                        T::zero()
                    }
                }),
                GateMode::Identity => w * m,
            })
            .collect();
        self.generation += 1;
    }

    /// Swaps in a new peer set and beta mixture atomically (the effective
    /// weights are rebuilt once, between forward passes).
    pub fn replace_composition(
        &mut self,
        peers: Vec<PeerMask<T>>,
        beta: BetaMixture,
    ) -> Result<(), NetError> {
        self.comp.peers = peers;
        self.comp.beta = beta;
        self.comp.validate()?;
        self.refresh();
        Ok(())
    }

    pub fn forward(&self, obs: ArrayView2<T>) -> Result<ForwardCache<T>, NetError> {
        if obs.ncols() != self.backbone.dims.obs_dim {
            return Err(NetError::BadInput {
                got: obs.ncols(),
                want: self.backbone.dims.obs_dim,
            });
        }
        fn add_bias<T: Scalar>(z: &mut Array2<T>, bias: &Array1<T>) {
            for mut row in z.rows_mut() {
                row.zip_mut_with(bias, |x, &b| *x = *x + b);
            }
        }
        let mut hidden = Vec::with_capacity(3);
        let mut activ = obs.to_owned();
        let input = activ.clone();
        for layer in 0..3 {
            let mut z = activ.dot(&self.effective[layer]);
            add_bias(&mut z, &self.backbone.biases[layer]);
            z.mapv_inplace(|x| x.tanh());
            hidden.push(z.clone());
            activ = z;
        }
        let features = &hidden[2];
        let mut values = features.dot(&self.effective[CRITIC_LAYER]);
        add_bias(&mut values, &self.backbone.biases[CRITIC_LAYER]);
        let mut logits = features.dot(&self.effective[ACTOR_LAYER]);
        add_bias(&mut logits, &self.backbone.biases[ACTOR_LAYER]);
        Ok(ForwardCache {
            generation: self.generation,
            input,
            hidden,
            logits,
            values,
        })
    }

    /// Straight-through backward from output gradients to score and beta
    /// gradients. Peer mask scores receive no gradient by construction.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: ArrayView2<T>,
        dvalues: ArrayView2<T>,
    ) -> Result<Grads<T>, NetError> {
        if cache.generation != self.generation {
            return Err(NetError::StaleCache {
                cache: cache.generation,
                current: self.generation,
            });
        }
        let features = &cache.hidden[2];
        let mut weight_grads: Vec<Array2<T>> = vec![Array2::zeros((0, 0)); 5];
        weight_grads[ACTOR_LAYER] = features.t().dot(&dlogits);
        weight_grads[CRITIC_LAYER] = features.t().dot(&dvalues);

        let mut dact = dlogits.dot(&self.effective[ACTOR_LAYER].t())
            + dvalues.dot(&self.effective[CRITIC_LAYER].t());
        for layer in (0..3).rev() {
            // d tanh(z) = 1 - tanh(z)^2, and hidden[layer] is tanh(z).
            let mut delta = dact;
            delta.zip_mut_with(&cache.hidden[layer], |d, &a| {
                *d = *d * (T::one() - a * a);
            });
            let prev: ArrayView2<T> = if layer == 0 {
                cache.input.view()
            } else {
                cache.hidden[layer - 1].view()
            };
            weight_grads[layer] = prev.t().dot(&delta);
            dact = delta.dot(&self.effective[layer].t());
        }

        // STE: gradient w.r.t. the combined score is the weight gradient
        // times the frozen backbone weight, with the threshold treated as
        // identity.
        let combined_grads: Vec<Array2<T>> = weight_grads
            .iter()
            .zip(&self.backbone.weights)
            .map(|(g, w)| g * w)
            .collect();

        if self.comp.peers.is_empty() {
            return Ok(Grads {
                local_scores: combined_grads,
                beta_logits: vec![0.0; self.comp.beta.len()],
            });
        }

        let betas = self.comp.beta.weights();
        let b_local = T::of(betas[0]);
        let local_scores: Vec<Array2<T>> = combined_grads
            .iter()
            .map(|g| g.mapv(|x| x * b_local))
            .collect();

        // d loss / d beta_j = <combined_grad, phi_j> summed over layers,
        // then through the softmax Jacobian to the logits.
        let mut source_dots = vec![0.0f64; 1 + self.comp.peers.len()];
        for (layer, g) in combined_grads.iter().enumerate() {
            for (gv, sv) in g.iter().zip(self.comp.local.layers[layer].iter()) {
                source_dots[0] += gv.as_f64() * sv.as_f64();
            }
            for (k, peer) in self.comp.peers.iter().enumerate() {
                for (gv, sv) in g.iter().zip(peer.scores.layers[layer].iter()) {
                    source_dots[1 + k] += gv.as_f64() * sv.as_f64();
                }
            }
        }
        let weighted: f64 = betas.iter().zip(&source_dots).map(|(b, s)| b * s).sum();
        let beta_logits: Vec<f64> = betas
            .iter()
            .zip(&source_dots)
            .map(|(b, s)| b * (s - weighted))
            .collect();

        Ok(Grads {
            local_scores,
            beta_logits,
        })
    }
}
