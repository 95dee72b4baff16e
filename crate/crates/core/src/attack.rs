//! Attack backends and the combined model state.
//!
//! Three backends share one interface: the dynamic prompt generator (a
//! two-layer network that maps pooled intermediate features to `N` prompt
//! tokens, shared across its injection layers), input-agnostic static prompt
//! blocks, and rank-r adapters on the attention q/v projections. All of them
//! train jointly with an additive trigger constrained to an l-infinity ball.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::floor;

use crate::autodiff::{NodeId, Parameter, Tape, Tensor};
use crate::error::CoreError;
use crate::rng::{fnv1a64, Rng64};
use crate::vit::{
    forward_trace, normal_tensor, AttnDelta, BackboneState, BoundBackbone, ForwardTrace, TokenSeq,
    ViTConfig,
};
use crate::Result;

const VPG_INIT_STD: f64 = 0.02;

/// Which attack backend a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Dynamic,
    Static,
    LowRank,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::Dynamic => "dynamic",
            AttackKind::Static => "static",
            AttackKind::LowRank => "lowrank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(AttackKind::Dynamic),
            "static" => Ok(AttackKind::Static),
            "lowrank" => Ok(AttackKind::LowRank),
            _ => Err(CoreError::Contract(
                "attack kind must be dynamic, static or lowrank",
            )),
        }
    }
}

/// Injection layers proportional to the reference placement (quarter, half,
/// three-quarter depth, floored), deduplicated. The quarter-depth entry keeps
/// the generator reading features shallow enough that an imperceptible
/// trigger is still visible above the residual stream.
pub fn default_injection_layers(depth: usize) -> Vec<usize> {
    let mut layers: Vec<usize> = [0.25, 0.5, 0.75]
        .iter()
        .map(|f| (floor(f * depth as f64) as usize).clamp(1, depth))
        .collect();
    layers.dedup();
    layers
}

fn validate_layers(layers: &[usize], depth: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(CoreError::Contract("injection layer list must not be empty"));
    }
    for pair in layers.windows(2) {
        if pair[0] >= pair[1] {
            return Err(CoreError::Contract(
                "injection layers must be strictly increasing",
            ));
        }
    }
    if let Some(&last) = layers.last() {
        if layers[0] < 1 || last > depth {
            return Err(CoreError::IndexOutOfRange {
                context: "injection layer",
                index: last,
                bound: depth,
            });
        }
    }
    Ok(())
}

/// The dynamic prompt generator: one two-layer network shared across all
/// injection layers.
#[derive(Debug, Clone)]
pub struct VpgParams {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub injection_layers: Vec<usize>,
    pub n_prompts: usize,
    pub hidden: usize,
}

impl VpgParams {
    pub fn init(cfg: &ViTConfig, layers: Vec<usize>, n_prompts: usize, seed: u64) -> Result<Self> {
        validate_layers(&layers, cfg.depth)?;
        if n_prompts == 0 {
            return Err(CoreError::Contract("prompt count must be >= 1"));
        }
        let d = cfg.dim;
        let hidden = 2 * d;
        let mut rng = Rng64::stream(seed, &[0x767067]); // "vpg"
        // the first layer carries the detector: unit-variance activations so
        // input-conditioning is visible to the output layer from step one
        let w1_std = 1.0 / libm::sqrt(d as f64);
        let w2_std = VPG_INIT_STD;
        Ok(VpgParams {
            w1: Parameter::new("vpg_w1", normal_tensor(&mut rng, &[d, hidden], w1_std), true),
            b1: Parameter::new("vpg_b1", Tensor::zeros(&[1, hidden]), true),
            w2: Parameter::new(
                "vpg_w2",
                normal_tensor(&mut rng, &[hidden, n_prompts * d], w2_std),
                true,
            ),
            b2: Parameter::new("vpg_b2", Tensor::zeros(&[1, n_prompts * d]), true),
            injection_layers: layers,
            n_prompts,
            hidden,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Per-injection-layer learnable token block, identical for every input.
#[derive(Debug, Clone)]
pub struct StaticPrompts {
    pub blocks: Vec<Parameter>,
    pub injection_layers: Vec<usize>,
    pub n_prompts: usize,
}

impl StaticPrompts {
    pub fn init(cfg: &ViTConfig, layers: Vec<usize>, n_prompts: usize, seed: u64) -> Result<Self> {
        validate_layers(&layers, cfg.depth)?;
        if n_prompts == 0 {
            return Err(CoreError::Contract("prompt count must be >= 1"));
        }
        let mut rng = Rng64::stream(seed, &[0x737461]); // "sta"
        let blocks = layers
            .iter()
            .map(|l| {
                Parameter::new(
                    format!("static_L{l:02}"),
                    normal_tensor(&mut rng, &[n_prompts, cfg.dim], VPG_INIT_STD),
                    true,
                )
            })
            .collect();
        Ok(StaticPrompts {
            blocks,
            injection_layers: layers,
            n_prompts,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.blocks.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks.iter_mut().collect()
    }
}

/// Rank-r factors for one adapted layer (q and v projections).
#[derive(Debug, Clone)]
pub struct LoraLayer {
    pub q_a: Parameter,
    pub q_b: Parameter,
    pub v_a: Parameter,
    pub v_b: Parameter,
}

/// Low-rank adapters on every attention block. The base matrices are
/// untouched; the effective delta is the B-after-A product.
#[derive(Debug, Clone)]
pub struct LoraAdapters {
    pub layers: Vec<LoraLayer>,
    pub rank: usize,
}

impl LoraAdapters {
    pub fn init(cfg: &ViTConfig, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank > cfg.dim {
            return Err(CoreError::Contract("adapter rank must be in 1..=dim"));
        }
        let mut rng = Rng64::stream(seed, &[0x6c6f7261]); // "lora"
        let d = cfg.dim;
        let layers = (0..cfg.depth)
            .map(|li| LoraLayer {
                // A random, B zero: the delta starts at exactly zero
                q_a: Parameter::new(
                    format!("lora_L{li:02}/q_a"),
                    normal_tensor(&mut rng, &[d, rank], VPG_INIT_STD),
                    true,
                ),
                q_b: Parameter::new(format!("lora_L{li:02}/q_b"), Tensor::zeros(&[rank, d]), true),
                v_a: Parameter::new(
                    format!("lora_L{li:02}/v_a"),
                    normal_tensor(&mut rng, &[d, rank], VPG_INIT_STD),
                    true,
                ),
                v_b: Parameter::new(format!("lora_L{li:02}/v_b"), Tensor::zeros(&[rank, d]), true),
            })
            .collect();
        Ok(LoraAdapters { layers, rank })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|l| [&l.q_a, &l.q_b, &l.v_a, &l.v_b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.q_a, &mut l.q_b, &mut l.v_a, &mut l.v_b])
            .collect()
    }
}

/// Additive image trigger with its l-infinity budget.
#[derive(Debug, Clone)]
pub struct Trigger {
    pub delta: Parameter,
    pub epsilon: f64,
}

impl Trigger {
    /// Uniform init in [-eps/2, +eps/2].
    pub fn init(cfg: &ViTConfig, epsilon: f64, seed: u64) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(CoreError::Contract("trigger radius must be positive"));
        }
        let mut rng = Rng64::stream(seed, &[0x747267]); // "trg"
        let mut t = Tensor::zeros(&[cfg.image, cfg.image, cfg.channels]);
        for v in t.data_mut() {
            *v = rng.uniform(-epsilon / 2.0, epsilon / 2.0) as f32;
        }
        Ok(Trigger {
            delta: Parameter::new("delta", t, true),
            epsilon,
        })
    }

    pub fn linf(&self) -> f64 {
        self.delta.value.max_abs() as f64
    }
}

/// Elementwise clamp of the trigger to [-eps, +eps].
pub fn project_trigger(trigger: &mut Trigger) -> Result<()> {
    project_values(trigger.delta.value.data_mut(), trigger.epsilon)
}

pub fn project_values(values: &mut [f32], epsilon: f64) -> Result<()> {
    if epsilon <= 0.0 {
        return Err(CoreError::Contract("projection radius must be positive"));
    }
    let e = epsilon as f32;
    for v in values.iter_mut() {
        *v = v.clamp(-e, e);
    }
    Ok(())
}

/// x' = clamp(x + delta, 0, 1) on the tape (differentiable through the
/// interior of the clamp).
pub fn apply_trigger(tape: &mut Tape, image: NodeId, delta: NodeId) -> Result<NodeId> {
    let sum = tape.add(image, delta)?;
    Ok(tape.clamp_unit(sum))
}

/// Tensor-level trigger application for evaluation paths.
pub fn apply_trigger_tensor(image: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if image.numel() != delta.numel() {
        return Err(CoreError::ShapeMismatch {
            context: "trigger vs image extents",
            left: image.shape().to_vec(),
            right: delta.shape().to_vec(),
        });
    }
    let mut out = image.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o = (*o + d).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Fixed gain on the standardized tokens entering the first layer. The
/// encoder's own layer norms strip prompt scale downstream, so the output
/// weights equilibrate at small magnitudes; amplifying the input lets the
/// detector weights sit at the same scale, which keeps global magnitude
/// thresholds (near-zero cutoffs, top-quantile cores, pruning) meaningful
/// across both weight tensors.
pub const VPG_INPUT_GAIN: f64 = 1.0;

/// Two affine maps with the smooth nonlinearity between, with the base-token
/// mean pool taken between the nonlinearity and the output map: the first
/// layer parses each (standardized) token individually, the pool accumulates
/// its evidence across tokens, the second layer emits the prompt block.
/// Token standardization and the pool gain are parameter-free, so the
/// trainable surface stays exactly the two-layer network.
pub fn generate_prompts(tape: &mut Tape, vpg: &BoundVpg, seq: TokenSeq) -> Result<NodeId> {
    if seq.base_count == 0 {
        return Err(CoreError::Contract("prompt generation needs base tokens"));
    }
    let base = tape.slice_rows(seq.node, 0, seq.base_count)?;
    let width = tape.dims(base).1;
    let gain = tape.leaf(1, width, vec![VPG_INPUT_GAIN; width]);
    let zero_shift = tape.leaf(1, width, vec![0.0; width]);
    let normed = tape.layer_norm(base, gain, zero_shift)?;
    let h_lin = tape.matmul(normed, vpg.w1)?;
    let h_b = tape.add_row_broadcast(h_lin, vpg.b1)?;
    let h = tape.gelu(h_b);
    let pooled = tape.mean_pool_rows(h);
    let out_lin = tape.matmul(pooled, vpg.w2)?;
    let out = tape.add_row_broadcast(out_lin, vpg.b2)?;
    let d = tape.dims(out).1 / vpg.n_prompts;
    tape.reshape(out, vpg.n_prompts, d)
}

/// Replaces any previously appended prompts with the given block; base tokens
/// are untouched.
pub fn inject_prompts(tape: &mut Tape, seq: TokenSeq, prompts: NodeId) -> Result<TokenSeq> {
    let (n, w) = tape.dims(prompts);
    let seq_w = tape.dims(seq.node).1;
    if w != seq_w {
        return Err(CoreError::ShapeMismatch {
            context: "prompt width vs token width",
            left: vec![n, w],
            right: vec![seq.total(), seq_w],
        });
    }
    let base = tape.slice_rows(seq.node, 0, seq.base_count)?;
    let node = tape.concat_rows(&[base, prompts])?;
    Ok(TokenSeq {
        node,
        base_count: seq.base_count,
        prompt_count: n,
    })
}

/// Static-prompt injection: identical to [`inject_prompts`] with a fixed
/// learnable block, so the appended tokens are input-agnostic.
pub fn static_prompts_forward(tape: &mut Tape, seq: TokenSeq, block: NodeId) -> Result<TokenSeq> {
    inject_prompts(tape, seq, block)
}

/// base path + (B after A) path applied to the same input.
pub fn adapter_forward(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    bias: NodeId,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let (ar, _) = tape.dims(a);
    let (_, bc) = tape.dims(b);
    let (wr, wc) = tape.dims(w);
    if ar != wr || bc != wc || tape.dims(a).1 != tape.dims(b).0 {
        return Err(CoreError::ShapeMismatch {
            context: "adapter factor extents vs base matrix",
            left: vec![tape.dims(a).0, tape.dims(a).1, tape.dims(b).0, tape.dims(b).1],
            right: vec![wr, wc],
        });
    }
    let base = tape.matmul(x, w)?;
    let based = tape.add_row_broadcast(base, bias)?;
    let low = tape.matmul(x, a)?;
    let delta = tape.matmul(low, b)?;
    tape.add(based, delta)
}

/// One of the three attack backends.
#[derive(Debug, Clone)]
pub enum AttackModule {
    Dynamic(VpgParams),
    Static(StaticPrompts),
    LowRank(LoraAdapters),
}

impl AttackModule {
    pub fn kind(&self) -> AttackKind {
        match self {
            AttackModule::Dynamic(_) => AttackKind::Dynamic,
            AttackModule::Static(_) => AttackKind::Static,
            AttackModule::LowRank(_) => AttackKind::LowRank,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            AttackModule::Dynamic(v) => v.params(),
            AttackModule::Static(s) => s.params(),
            AttackModule::LowRank(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            AttackModule::Dynamic(v) => v.params_mut(),
            AttackModule::Static(s) => s.params_mut(),
            AttackModule::LowRank(l) => l.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Canonical flattened view of every attack parameter.
    pub fn flat_values(&self) -> Vec<f32> {
        self.params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f32]) -> Result<()> {
        let total = self.param_count();
        if values.len() != total {
            return Err(CoreError::ShapeMismatch {
                context: "flat attack values",
                left: vec![values.len()],
                right: vec![total],
            });
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        fnv1a64(self.params().iter().flat_map(|p| {
            p.value
                .data()
                .iter()
                .flat_map(|x| x.to_bits().to_le_bytes())
        }))
    }
}

/// Tape bindings for the dynamic generator.
#[derive(Debug, Clone)]
pub struct BoundVpg {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub injection_layers: Vec<usize>,
    pub n_prompts: usize,
}

#[derive(Debug, Clone)]
pub enum BoundAttack {
    Dynamic(BoundVpg),
    Static {
        blocks: Vec<NodeId>,
        injection_layers: Vec<usize>,
    },
    LowRank(Vec<AttnDelta>),
}

impl BoundAttack {
    /// Leaf node ids in the same order as [`AttackModule::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        match self {
            BoundAttack::Dynamic(v) => vec![v.w1, v.b1, v.w2, v.b2],
            BoundAttack::Static { blocks, .. } => blocks.clone(),
            BoundAttack::LowRank(layers) => layers
                .iter()
                .flat_map(|d| [d.q_a, d.q_b, d.v_a, d.v_b])
                .collect(),
        }
    }
}

pub fn bind_attack(tape: &mut Tape, module: &AttackModule) -> BoundAttack {
    match module {
        AttackModule::Dynamic(v) => BoundAttack::Dynamic(BoundVpg {
            w1: tape.leaf_tensor(&v.w1.value),
            b1: tape.leaf_tensor(&v.b1.value),
            w2: tape.leaf_tensor(&v.w2.value),
            b2: tape.leaf_tensor(&v.b2.value),
            injection_layers: v.injection_layers.clone(),
            n_prompts: v.n_prompts,
        }),
        AttackModule::Static(s) => BoundAttack::Static {
            blocks: s.blocks.iter().map(|b| tape.leaf_tensor(&b.value)).collect(),
            injection_layers: s.injection_layers.clone(),
        },
        AttackModule::LowRank(l) => BoundAttack::LowRank(
            l.layers
                .iter()
                .map(|layer| AttnDelta {
                    q_a: tape.leaf_tensor(&layer.q_a.value),
                    q_b: tape.leaf_tensor(&layer.q_b.value),
                    v_a: tape.leaf_tensor(&layer.v_a.value),
                    v_b: tape.leaf_tensor(&layer.v_b.value),
                })
                .collect(),
        ),
    }
}

/// Forward through the backbone with whatever the bound attack contributes:
/// prompt injection hooks for the prompt backends, attention deltas for the
/// adapters.
pub fn forward_bound(
    tape: &mut Tape,
    cfg: &ViTConfig,
    bb: &BoundBackbone,
    attack: Option<&BoundAttack>,
    image: NodeId,
) -> Result<ForwardTrace> {
    let deltas: Vec<Option<AttnDelta>> = match attack {
        Some(BoundAttack::LowRank(layers)) => layers.iter().map(|d| Some(*d)).collect(),
        _ => Vec::new(),
    };
    forward_trace(tape, cfg, bb, &deltas, image, |tape, layer, seq| match attack {
        Some(BoundAttack::Dynamic(vpg)) if vpg.injection_layers.contains(&layer) => {
            let prompts = generate_prompts(tape, vpg, seq)?;
            inject_prompts(tape, seq, prompts)
        }
        Some(BoundAttack::Static {
            blocks,
            injection_layers,
        }) => match injection_layers.iter().position(|&l| l == layer) {
            Some(pos) => static_prompts_forward(tape, seq, blocks[pos]),
            None => Ok(seq),
        },
        _ => Ok(seq),
    })
}

/// Frozen backbone, attack module, trigger and architecture configuration;
/// the unit that checkpoints carry.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ViTConfig,
    pub backbone: BackboneState,
    pub attack: Option<AttackModule>,
    pub trigger: Option<Trigger>,
    pub seed: u64,
}

impl ModelState {
    pub fn new_clean(cfg: ViTConfig, seed: u64) -> Result<Self> {
        let backbone = BackboneState::init(&cfg, seed)?;
        Ok(ModelState {
            config: cfg,
            backbone,
            attack: None,
            trigger: None,
            seed,
        })
    }

    /// Binds everything and runs one image.
    pub fn forward(&self, tape: &mut Tape, image: NodeId) -> Result<ForwardTrace> {
        let bb = self.backbone.bind(tape);
        let attack = self.attack.as_ref().map(|m| bind_attack(tape, m));
        forward_bound(tape, &self.config, &bb, attack.as_ref(), image)
    }

    /// Logits for a batch, binding parameters once per chunk of images.
    pub fn logits_for(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        self.batch_forward(images, false)
            .map(|rows| rows.into_iter().map(|(l, _)| l).collect())
    }

    /// Final-norm CLS features (the head inputs) for a batch.
    pub fn features_for(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        self.batch_forward(images, true)
            .map(|rows| rows.into_iter().map(|(_, f)| f).collect())
    }

    fn batch_forward(
        &self,
        images: &[Tensor],
        want_features: bool,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bb = self.backbone.bind(&mut tape);
            let attack = self.attack.as_ref().map(|m| bind_attack(&mut tape, m));
            for img in chunk {
                let node = tape.leaf_tensor(img);
                let trace = forward_bound(&mut tape, &self.config, &bb, attack.as_ref(), node)?;
                let logits = tape.value(trace.logits).to_vec();
                let feat = if want_features {
                    tape.value(trace.cls_feature).to_vec()
                } else {
                    Vec::new()
                };
                out.push((logits, feat));
            }
        }
        Ok(out)
    }

    /// Checksum over backbone, attack and trigger bits.
    pub fn full_checksum(&self) -> u64 {
        let mut h = self.backbone.checksum();
        if let Some(a) = &self.attack {
            h ^= a.checksum().rotate_left(17);
        }
        if let Some(t) = &self.trigger {
            h ^= fnv1a64(
                t.delta
                    .value
                    .data()
                    .iter()
                    .flat_map(|x| x.to_bits().to_le_bytes()),
            )
            .rotate_left(31);
        }
        h
    }

    pub fn attack_name(&self) -> String {
        match &self.attack {
            Some(m) => String::from(m.kind().label()),
            None => String::from("none"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_setup() -> (ViTConfig, BackboneState) {
        let cfg = ViTConfig::toy();
        let bb = BackboneState::init(&cfg, 11).unwrap();
        (cfg, bb)
    }

    fn random_image(cfg: &ViTConfig, seed: u64) -> Vec<f64> {
        let mut rng = Rng64::new(seed);
        (0..cfg.image_len()).map(|_| rng.next_f64()).collect()
    }

    #[test]
    fn default_layers_track_depth() {
        assert_eq!(default_injection_layers(12), vec![3, 6, 9]);
        assert_eq!(default_injection_layers(6), vec![1, 3, 4]);
        assert_eq!(default_injection_layers(2), vec![1]);
    }

    #[test]
    fn zero_vpg_generates_zero_prompts() {
        let (cfg, bb) = toy_setup();
        let mut vpg = VpgParams::init(&cfg, vec![2, 3, 5], 8, 1).unwrap();
        for p in vpg.params_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let bound_bb = bb.bind(&mut tape);
        let img = tape.leaf(1, cfg.image_len(), random_image(&cfg, 2));
        let seq = crate::vit::patch_embed(&mut tape, &cfg, &bound_bb, img).unwrap();
        let bound = match bind_attack(&mut tape, &AttackModule::Dynamic(vpg)) {
            BoundAttack::Dynamic(v) => v,
            _ => unreachable!(),
        };
        let prompts = generate_prompts(&mut tape, &bound, seq).unwrap();
        assert_eq!(tape.dims(prompts), (8, 64));
        assert!(tape.value(prompts).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn generate_prompts_matches_straight_line_oracle() {
        let (cfg, bb) = toy_setup();
        let vpg = VpgParams::init(&cfg, vec![2], 4, 3).unwrap();
        let mut tape = Tape::new();
        let bound_bb = bb.bind(&mut tape);
        let img = tape.leaf(1, cfg.image_len(), random_image(&cfg, 4));
        let seq = crate::vit::patch_embed(&mut tape, &cfg, &bound_bb, img).unwrap();
        let module = AttackModule::Dynamic(vpg.clone());
        let bound = match bind_attack(&mut tape, &module) {
            BoundAttack::Dynamic(v) => v,
            _ => unreachable!(),
        };
        let prompts = generate_prompts(&mut tape, &bound, seq).unwrap();

        // independent standardize -> affine -> gelu -> pool -> affine oracle
        let tokens = tape.value(seq.node);
        let d = cfg.dim;
        let w1 = vpg.w1.value.to_f64();
        let b1 = vpg.b1.value.to_f64();
        let w2 = vpg.w2.value.to_f64();
        let b2 = vpg.b2.value.to_f64();
        let hidden = vpg.hidden;
        let mut pooled_h = vec![0.0f64; hidden];
        for row in tokens.chunks(d).take(seq.base_count) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + 1e-5);
            let normed: Vec<f64> = row
                .iter()
                .map(|&x| (x - mean) * inv * VPG_INPUT_GAIN)
                .collect();
            for (j, ph) in pooled_h.iter_mut().enumerate() {
                let mut s = b1[j];
                for (i, &x) in normed.iter().enumerate() {
                    s += x * w1[i * hidden + j];
                }
                let g = 0.5 * s * (1.0 + libm::erf(s * core::f64::consts::FRAC_1_SQRT_2));
                *ph += g / seq.base_count as f64;
            }
        }
        let out_dim = vpg.n_prompts * d;
        for j in 0..out_dim {
            let mut s = b2[j];
            for (i, &hv) in pooled_h.iter().enumerate() {
                s += hv * w2[i * out_dim + j];
            }
            assert!(
                (tape.value(prompts)[j] - s).abs() < 1e-5,
                "prompt coord {j}: {} vs {s}",
                tape.value(prompts)[j]
            );
        }
    }

    #[test]
    fn inject_replaces_and_preserves_base_prefix() {
        let (cfg, bb) = toy_setup();
        let mut tape = Tape::new();
        let bound_bb = bb.bind(&mut tape);
        let img = tape.leaf(1, cfg.image_len(), random_image(&cfg, 5));
        let seq = crate::vit::patch_embed(&mut tape, &cfg, &bound_bb, img).unwrap();
        let before = tape.value(seq.node).to_vec();
        let block1 = tape.leaf(8, 64, vec![0.5; 8 * 64]);
        let once = inject_prompts(&mut tape, seq, block1).unwrap();
        assert_eq!((once.base_count, once.prompt_count), (17, 8));
        assert_eq!(tape.dims(once.node).0, 25);
        let block2 = tape.leaf(8, 64, vec![-0.25; 8 * 64]);
        let twice = inject_prompts(&mut tape, once, block2).unwrap();
        assert_eq!((twice.base_count, twice.prompt_count), (17, 8));
        assert_eq!(tape.dims(twice.node).0, 25);
        // base prefix bit-identical
        assert_eq!(&tape.value(twice.node)[..17 * 64], &before[..]);
    }

    #[test]
    fn trigger_identity_and_shift() {
        let cfg = ViTConfig::toy();
        let x = Tensor::filled(&[32, 32, 1], 0.5);
        let zero = Tensor::zeros(&[32, 32, 1]);
        let same = apply_trigger_tensor(&x, &zero).unwrap();
        assert_eq!(same.data(), x.data());
        let eps = 4.0 / 255.0;
        let delta = Tensor::filled(&[32, 32, 1], eps as f32);
        let shifted = apply_trigger_tensor(&x, &delta).unwrap();
        for &v in shifted.data() {
            assert!((v - (0.5 + eps as f32)).abs() < 1e-7);
        }
        let _ = cfg;
    }

    #[test]
    fn trigger_matches_clamp_oracle() {
        let mut rng = Rng64::new(6);
        let mut x = Tensor::zeros(&[8, 8, 1]);
        let mut d = Tensor::zeros(&[8, 8, 1]);
        for v in x.data_mut() {
            *v = rng.next_f64() as f32;
        }
        for v in d.data_mut() {
            *v = rng.uniform(-0.5, 0.5) as f32;
        }
        let out = apply_trigger_tensor(&x, &d).unwrap();
        for i in 0..64 {
            let want = (x.data()[i] + d.data()[i]).clamp(0.0, 1.0);
            assert_eq!(out.data()[i], want);
        }
    }

    #[test]
    fn projection_saturates_and_fixes_interior() {
        let eps = 0.1;
        let mut inside = vec![0.05f32, -0.02, 0.0];
        project_values(&mut inside, eps).unwrap();
        assert_eq!(inside, vec![0.05, -0.02, 0.0]);
        let mut outside = vec![0.2f32, -0.3];
        project_values(&mut outside, eps).unwrap();
        assert_eq!(outside, vec![0.1, -0.1]);
        let mut rng = Rng64::new(7);
        let mut random: Vec<f32> = (0..50).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let reference: Vec<f32> = random.iter().map(|v| v.clamp(-0.1, 0.1)).collect();
        project_values(&mut random, eps).unwrap();
        assert_eq!(random, reference);
        assert!(project_values(&mut random, 0.0).is_err());
    }

    #[test]
    fn adapter_zero_b_equals_base_path() {
        let (cfg, _) = toy_setup();
        let lora = LoraAdapters::init(&cfg, 8, 8).unwrap();
        let mut tape = Tape::new();
        let mut rng = Rng64::new(9);
        let x = tape.leaf(5, 64, (0..5 * 64).map(|_| rng.normal()).collect());
        let w = tape.leaf(64, 64, (0..64 * 64).map(|_| rng.normal() * 0.1).collect());
        let bias = tape.leaf(1, 64, vec![0.0; 64]);
        let a = tape.leaf_tensor(&lora.layers[0].q_a.value);
        let b = tape.leaf_tensor(&lora.layers[0].q_b.value); // zero init
        let with = adapter_forward(&mut tape, x, w, bias, a, b).unwrap();
        let base = tape.matmul(x, w).unwrap();
        let based = tape.add_row_broadcast(base, bias).unwrap();
        assert_eq!(tape.value(with), tape.value(based));
    }

    #[test]
    fn adapter_parameter_arithmetic() {
        let cfg = ViTConfig::toy();
        let lora = LoraAdapters::init(&cfg, 8, 10).unwrap();
        let per_matrix = 2 * 64 * 8;
        assert_eq!(per_matrix, 1024);
        let module = AttackModule::LowRank(lora);
        assert_eq!(module.param_count(), 6 * 2 * per_matrix);
        assert_eq!(module.param_count(), 12_288);
    }

    #[test]
    fn adapter_matches_densified_oracle() {
        let mut tape = Tape::new();
        let mut rng = Rng64::new(11);
        let (d, r, s) = (16usize, 4usize, 3usize);
        let x: Vec<f64> = (0..s * d).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.normal() * 0.2).collect();
        let av: Vec<f64> = (0..d * r).map(|_| rng.normal() * 0.3).collect();
        let bv: Vec<f64> = (0..r * d).map(|_| rng.normal() * 0.3).collect();
        let xn = tape.leaf(s, d, x.clone());
        let wn = tape.leaf(d, d, w.clone());
        let bias = tape.leaf(1, d, vec![0.0; d]);
        let an = tape.leaf(d, r, av.clone());
        let bn = tape.leaf(r, d, bv.clone());
        let out = adapter_forward(&mut tape, xn, wn, bias, an, bn).unwrap();
        // dense oracle: x * (w + a*b)
        let mut dense = w.clone();
        for i in 0..d {
            for j in 0..d {
                let mut s_ = 0.0;
                for t in 0..r {
                    s_ += av[i * r + t] * bv[t * d + j];
                }
                dense[i * d + j] += s_;
            }
        }
        for i in 0..s {
            for j in 0..d {
                let mut want = 0.0;
                for t in 0..d {
                    want += x[i * d + t] * dense[t * d + j];
                }
                assert!((tape.value(out)[i * d + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn static_prompts_are_input_agnostic() {
        let (cfg, bb) = toy_setup();
        let sp = StaticPrompts::init(&cfg, vec![2, 3, 5], 8, 12).unwrap();
        let state = ModelState {
            config: cfg.clone(),
            backbone: bb,
            attack: Some(AttackModule::Static(sp)),
            trigger: None,
            seed: 12,
        };
        let prompt_block = |img_seed: u64| -> Vec<f64> {
            let mut tape = Tape::new();
            let img = tape.leaf(1, cfg.image_len(), random_image(&cfg, img_seed));
            let trace = state.forward(&mut tape, img).unwrap();
            let node = trace.final_seq.node;
            let total = trace.final_seq.total();
            let d = cfg.dim;
            tape.value(node)[(total - 8) * d..total * d].to_vec()
        };
        // two different images: identical appended prompt tokens at injection,
        // then processed by layers; compare the *injected* blocks instead
        let mut tape = Tape::new();
        let bound = bind_attack(&mut tape, state.attack.as_ref().unwrap());
        if let BoundAttack::Static { blocks, .. } = &bound {
            let first = tape.value(blocks[0]).to_vec();
            let mut tape2 = Tape::new();
            let bound2 = bind_attack(&mut tape2, state.attack.as_ref().unwrap());
            if let BoundAttack::Static { blocks: b2, .. } = &bound2 {
                assert_eq!(first, tape2.value(b2[0]));
            }
        }
        // the final-layer prompt slots still differ because attention mixes
        // image content into every token downstream of injection; what must
        // match is the block itself, checked above. Shape contract:
        assert_eq!(prompt_block(1).len(), prompt_block(2).len());
    }

    #[test]
    fn dynamic_prompts_condition_on_input_but_static_do_not() {
        let (cfg, bb) = toy_setup();
        let vpg = VpgParams::init(&cfg, vec![2], 4, 13).unwrap();
        let module = AttackModule::Dynamic(vpg);
        let prompts_for = |img_seed: u64| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound_bb = bb.bind(&mut tape);
            let img = tape.leaf(1, cfg.image_len(), random_image(&cfg, img_seed));
            let seq = crate::vit::patch_embed(&mut tape, &cfg, &bound_bb, img).unwrap();
            let bound = match bind_attack(&mut tape, &module) {
                BoundAttack::Dynamic(v) => v,
                _ => unreachable!(),
            };
            let p = generate_prompts(&mut tape, &bound, seq).unwrap();
            tape.value(p).to_vec()
        };
        let p1 = prompts_for(100);
        let p2 = prompts_for(200);
        assert_ne!(p1, p2, "dynamic prompts must depend on the input");
    }

    #[test]
    fn flat_roundtrip() {
        let cfg = ViTConfig::toy();
        let vpg = VpgParams::init(&cfg, vec![2, 3], 8, 14).unwrap();
        let mut module = AttackModule::Dynamic(vpg);
        let flat = module.flat_values();
        assert_eq!(flat.len(), module.param_count());
        let mut doubled: Vec<f32> = flat.iter().map(|x| x * 2.0).collect();
        module.set_flat(&doubled).unwrap();
        assert_eq!(module.flat_values(), doubled);
        doubled.pop();
        assert!(module.set_flat(&doubled).is_err());
    }
}
