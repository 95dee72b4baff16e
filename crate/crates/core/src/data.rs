//! Deterministic synthetic dataset generation and the bit-exact tensor
//! container used for checkpoints and dataset export.
//!
//! Container layout: magic `FLAB`, version as 4-byte little-endian unsigned,
//! then per tensor: name length (4-byte LE), UTF-8 name, rank (4-byte LE),
//! dims (4-byte LE each), raw 32-bit little-endian floats.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, sin, sqrt};

use crate::attack::{
    AttackKind, AttackModule, LoraAdapters, ModelState, StaticPrompts, Trigger, VpgParams,
};
use crate::autodiff::{Parameter, Tensor};
use crate::error::CoreError;
use crate::rng::Rng64;
use crate::vit::{BackboneState, ViTConfig};
use crate::Result;

const MAGIC: &[u8; 4] = b"FLAB";
const TEMPLATE_CONTRAST: f64 = 1.0;
const VERSION: u32 = 1;

// ── synthetic dataset ───────────────────────────────────────────────

/// Recipe for a seeded synthetic image classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub image: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pattern_seed: u64,
    pub noise_std: f64,
}

impl SyntheticDatasetSpec {
    pub fn toy(pattern_seed: u64) -> Self {
        SyntheticDatasetSpec {
            classes: 10,
            image: 32,
            channels: 1,
            train_per_class: 16,
            test_per_class: 50,
            pattern_seed,
            noise_std: 0.15,
        }
    }

    pub fn tiny_two_class(pattern_seed: u64) -> Self {
        SyntheticDatasetSpec {
            classes: 2,
            image: 16,
            channels: 1,
            train_per_class: 16,
            test_per_class: 40,
            pattern_seed,
            noise_std: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(CoreError::Contract(
                "dataset needs >= 2 classes and >= 1 sample per split",
            ));
        }
        if self.noise_std < 0.0 {
            return Err(CoreError::Contract("noise std must be >= 0"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.image, self.image, self.channels]
    }
}

/// Seeded labeled image set with train/test split, pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticDatasetSpec,
    pub templates: Vec<Tensor>,
    pub train_images: Vec<Tensor>,
    pub train_labels: Vec<usize>,
    pub test_images: Vec<Tensor>,
    pub test_labels: Vec<usize>,
}

/// Class template: seeded mixture of 2-D sinusoids and Gaussian blobs,
/// min-max normalized to [0, 1].
fn class_template(spec: &SyntheticDatasetSpec, class: usize) -> Tensor {
    let side = spec.image;
    let mut t = Tensor::zeros(&spec.image_shape());
    for ch in 0..spec.channels {
        let mut rng = Rng64::stream(spec.pattern_seed, &[0x74706c, class as u64, ch as u64]);
        let n_waves = 3;
        let n_blobs = 2;
        let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
            .map(|_| {
                (
                    rng.uniform(0.5, 1.0),              // amplitude
                    rng.uniform(1.0, 4.0) / side as f64, // fx cycles/pixel
                    rng.uniform(1.0, 4.0) / side as f64, // fy
                    rng.uniform(0.0, core::f64::consts::TAU),
                )
            })
            .collect();
        let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
            .map(|_| {
                (
                    rng.uniform(0.2, 0.8) * side as f64,
                    rng.uniform(0.2, 0.8) * side as f64,
                    rng.uniform(0.08, 0.2) * side as f64,
                    if rng.next_f64() < 0.5 { -1.2 } else { 1.2 },
                )
            })
            .collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut raw = vec![0.0f64; side * side];
        for y in 0..side {
            for x in 0..side {
                let mut v = 0.0;
                for &(a, fx, fy, ph) in &waves {
                    v += a * sin(core::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph);
                }
                for &(cx, cy, sigma, amp) in &blobs {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    v += amp * exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                }
                raw[y * side + x] = v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        // min-max normalize, then soften contrast so classes stay plausibly
        // confusable under noise (raw mixtures are otherwise far apart)
        let span = if hi - lo > 1e-9 { hi - lo } else { 1.0 };
        let data = t.data_mut();
        for y in 0..side {
            for x in 0..side {
                let unit = (raw[y * side + x] - lo) / span;
                let v = 0.5 + TEMPLATE_CONTRAST * (unit - 0.5);
                data[(y * side + x) * spec.channels + ch] = v as f32;
            }
        }
    }
    t
}

/// Spatially smooth Gaussian noise: a coarse grid of unit normals upsampled
/// bilinearly, rescaled so the per-pixel marginal std is exactly `noise_std`.
/// Smooth fields mimic natural nuisance variation (lighting, deformation);
/// the per-pixel white-noise alternative would bury any imperceptible
/// perturbation below the matched-filter detection floor at this resolution.
const NOISE_GRID_STEP: usize = 4;

fn noisy_sample(spec: &SyntheticDatasetSpec, template: &Tensor, class: usize, index: u64) -> Tensor {
    let side = spec.image;
    let step = NOISE_GRID_STEP.min(side);
    let nodes = side / step + 1;
    let mut out = template.clone();
    for ch in 0..spec.channels {
        let mut rng = Rng64::stream(
            spec.pattern_seed,
            &[0x6e6f69, class as u64, index, ch as u64],
        );
        let grid: Vec<f64> = (0..nodes * nodes).map(|_| rng.normal()).collect();
        let data = out.data_mut();
        for y in 0..side {
            for x in 0..side {
                let (gx, gy) = (x / step, y / step);
                let fx = (x % step) as f64 / step as f64;
                let fy = (y % step) as f64 / step as f64;
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w01 = fx * (1.0 - fy);
                let w10 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                let blend = w00 * grid[gy * nodes + gx]
                    + w01 * grid[gy * nodes + gx + 1]
                    + w10 * grid[(gy + 1) * nodes + gx]
                    + w11 * grid[(gy + 1) * nodes + gx + 1];
                let norm = sqrt(w00 * w00 + w01 * w01 + w10 * w10 + w11 * w11);
                let idx = (y * side + x) * spec.channels + ch;
                let noisy = data[idx] as f64 + spec.noise_std * blend / norm;
                data[idx] = noisy.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Fully deterministic per (pattern seed, sample index); train and test
/// samples draw from disjoint index ranges of the noise stream.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let templates: Vec<Tensor> = (0..spec.classes).map(|k| class_template(spec, k)).collect();
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    for (k, template) in templates.iter().enumerate() {
        for i in 0..spec.train_per_class {
            train_images.push(noisy_sample(spec, template, k, i as u64));
            train_labels.push(k);
        }
        for j in 0..spec.test_per_class {
            test_images.push(noisy_sample(
                spec,
                template,
                k,
                (spec.train_per_class + j) as u64,
            ));
            test_labels.push(k);
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        templates,
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

// ── tensor container ────────────────────────────────────────────────

pub fn encode_named(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_named(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    match r.take(4) {
        Some(m) if m == MAGIC => {}
        _ => return Err(CoreError::Format("bad magic bytes".to_string())),
    }
    match r.u32() {
        Some(VERSION) => {}
        Some(v) => {
            return Err(CoreError::Format(format!(
                "unsupported container version {v} (expected {VERSION})"
            )))
        }
        None => return Err(CoreError::Format("truncated version field".to_string())),
    }
    let mut out = Vec::new();
    let mut ordinal = 0usize;
    while !r.done() {
        ordinal += 1;
        let placeholder = format!("<tensor #{ordinal}>");
        let name_len = r.u32().ok_or(CoreError::Corrupt {
            tensor: placeholder.clone(),
        })? as usize;
        let name_bytes = r.take(name_len).ok_or(CoreError::Corrupt {
            tensor: placeholder.clone(),
        })?;
        let name = core::str::from_utf8(name_bytes)
            .map_err(|_| CoreError::Format(format!("tensor name #{ordinal} is not UTF-8")))?
            .to_string();
        let rank = r.u32().ok_or(CoreError::Corrupt {
            tensor: name.clone(),
        })? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or(CoreError::Corrupt {
                tensor: name.clone(),
            })? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4).ok_or(CoreError::Corrupt {
            tensor: name.clone(),
        })?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name.clone(), Tensor::new(shape, data)?));
    }
    Ok(out)
}

// ── model checkpoints ───────────────────────────────────────────────

fn config_tensor(cfg: &ViTConfig) -> Tensor {
    Tensor::new(
        vec![7],
        vec![
            cfg.depth as f32,
            cfg.dim as f32,
            cfg.heads as f32,
            cfg.patch as f32,
            cfg.image as f32,
            cfg.channels as f32,
            cfg.classes as f32,
        ],
    )
    .expect("static shape")
}

fn config_from_tensor(t: &Tensor) -> Result<ViTConfig> {
    if t.numel() != 7 {
        return Err(CoreError::Format("config tensor must have 7 entries".to_string()));
    }
    let d = t.data();
    let cfg = ViTConfig {
        depth: d[0] as usize,
        dim: d[1] as usize,
        heads: d[2] as usize,
        patch: d[3] as usize,
        image: d[4] as usize,
        channels: d[5] as usize,
        classes: d[6] as usize,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Seeds are stored as four 16-bit chunks so they survive the f32 container.
fn seed_tensor(seed: u64) -> Tensor {
    Tensor::new(
        vec![4],
        (0..4)
            .map(|i| ((seed >> (16 * i)) & 0xffff) as f32)
            .collect(),
    )
    .expect("static shape")
}

fn seed_from_tensor(t: &Tensor) -> Result<u64> {
    if t.numel() != 4 {
        return Err(CoreError::Format("seed tensor must have 4 entries".to_string()));
    }
    let mut seed = 0u64;
    for (i, &v) in t.data().iter().enumerate() {
        seed |= ((v as u64) & 0xffff) << (16 * i);
    }
    Ok(seed)
}

/// Serializes config, seed, backbone, attack module and trigger.
pub fn encode_model(state: &ModelState) -> Vec<u8> {
    let cfg_t = config_tensor(&state.config);
    let seed_t = seed_tensor(state.seed);
    let frozen_t = Tensor::scalar(if state.backbone.frozen { 1.0 } else { 0.0 });
    let mut named: Vec<(String, &Tensor)> = vec![
        ("config".to_string(), &cfg_t),
        ("seed".to_string(), &seed_t),
        ("frozen".to_string(), &frozen_t),
    ];
    for p in state.backbone.params() {
        named.push((format!("theta/{}", p.name), &p.value));
    }
    let meta;
    match &state.attack {
        Some(module) => {
            let kind = match module.kind() {
                AttackKind::Dynamic => 1.0,
                AttackKind::Static => 2.0,
                AttackKind::LowRank => 3.0,
            };
            meta = match module {
                AttackModule::Dynamic(v) => vec![
                    ("attack/kind".to_string(), Tensor::scalar(kind)),
                    (
                        "attack/layers".to_string(),
                        Tensor::new(
                            vec![v.injection_layers.len()],
                            v.injection_layers.iter().map(|&l| l as f32).collect(),
                        )
                        .expect("layer tensor"),
                    ),
                    ("attack/n_prompts".to_string(), Tensor::scalar(v.n_prompts as f32)),
                ],
                AttackModule::Static(s) => vec![
                    ("attack/kind".to_string(), Tensor::scalar(kind)),
                    (
                        "attack/layers".to_string(),
                        Tensor::new(
                            vec![s.injection_layers.len()],
                            s.injection_layers.iter().map(|&l| l as f32).collect(),
                        )
                        .expect("layer tensor"),
                    ),
                    ("attack/n_prompts".to_string(), Tensor::scalar(s.n_prompts as f32)),
                ],
                AttackModule::LowRank(l) => vec![
                    ("attack/kind".to_string(), Tensor::scalar(kind)),
                    ("attack/rank".to_string(), Tensor::scalar(l.rank as f32)),
                ],
            };
            for (name, t) in &meta {
                named.push((name.clone(), t));
            }
            for p in module.params() {
                named.push((format!("phi/{}", p.name), &p.value));
            }
        }
        None => {}
    }
    let eps_t;
    if let Some(trigger) = &state.trigger {
        eps_t = Tensor::scalar(trigger.epsilon as f32);
        named.push(("attack/epsilon".to_string(), &eps_t));
        named.push(("delta".to_string(), &trigger.delta.value));
    }
    encode_named(&named)
}

fn take_tensor(
    map: &mut Vec<(String, Tensor)>,
    name: &str,
) -> Result<Tensor> {
    match map.iter().position(|(n, _)| n == name) {
        Some(i) => Ok(map.remove(i).1),
        None => Err(CoreError::Format(format!("missing tensor '{name}'"))),
    }
}

fn fill_param(map: &mut Vec<(String, Tensor)>, prefix: &str, p: &mut Parameter) -> Result<()> {
    let name = format!("{prefix}/{}", p.name);
    let t = take_tensor(map, &name)?;
    if t.shape() != p.value.shape() {
        return Err(CoreError::Format(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            t.shape(),
            p.value.shape()
        )));
    }
    p.value = t;
    Ok(())
}

/// Rebuilds a [`ModelState`] from container bytes; shape-checks everything
/// against the embedded config before committing to a state.
pub fn decode_model(bytes: &[u8]) -> Result<ModelState> {
    let mut tensors = decode_named(bytes)?;
    let cfg = config_from_tensor(&take_tensor(&mut tensors, "config")?)?;
    let seed = seed_from_tensor(&take_tensor(&mut tensors, "seed")?)?;
    let frozen = take_tensor(&mut tensors, "frozen")?.data()[0] != 0.0;
    let mut backbone = BackboneState::init(&cfg, seed)?;
    for p in backbone.params_mut() {
        fill_param(&mut tensors, "theta", p)?;
    }
    if frozen {
        backbone.freeze();
    }
    let attack = match tensors.iter().position(|(n, _)| n == "attack/kind") {
        Some(_) => {
            let kind = take_tensor(&mut tensors, "attack/kind")?.data()[0] as u32;
            let module = match kind {
                1 | 2 => {
                    let layers_t = take_tensor(&mut tensors, "attack/layers")?;
                    let layers: Vec<usize> =
                        layers_t.data().iter().map(|&l| l as usize).collect();
                    let n = take_tensor(&mut tensors, "attack/n_prompts")?.data()[0] as usize;
                    if kind == 1 {
                        let mut v = VpgParams::init(&cfg, layers, n, seed)?;
                        for p in v.params_mut() {
                            fill_param(&mut tensors, "phi", p)?;
                        }
                        AttackModule::Dynamic(v)
                    } else {
                        let mut s = StaticPrompts::init(&cfg, layers, n, seed)?;
                        for p in s.params_mut() {
                            fill_param(&mut tensors, "phi", p)?;
                        }
                        AttackModule::Static(s)
                    }
                }
                3 => {
                    let rank = take_tensor(&mut tensors, "attack/rank")?.data()[0] as usize;
                    let mut l = LoraAdapters::init(&cfg, rank, seed)?;
                    for p in l.params_mut() {
                        fill_param(&mut tensors, "phi", p)?;
                    }
                    AttackModule::LowRank(l)
                }
                other => {
                    return Err(CoreError::Format(format!("unknown attack kind {other}")))
                }
            };
            Some(module)
        }
        None => None,
    };
    let trigger = match tensors.iter().position(|(n, _)| n == "delta") {
        Some(_) => {
            let eps = take_tensor(&mut tensors, "attack/epsilon")?.data()[0] as f64;
            let delta = take_tensor(&mut tensors, "delta")?;
            if delta.shape() != [cfg.image, cfg.image, cfg.channels] {
                return Err(CoreError::Format("trigger shape mismatch".to_string()));
            }
            Some(Trigger {
                delta: Parameter::new("delta", delta, true),
                epsilon: eps,
            })
        }
        None => None,
    };
    Ok(ModelState {
        config: cfg,
        backbone,
        attack,
        trigger,
        seed,
    })
}

// ── dataset container ───────────────────────────────────────────────

fn stack_images(images: &[Tensor], spec: &SyntheticDatasetSpec) -> Tensor {
    let per = spec.image * spec.image * spec.channels;
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(
        vec![images.len(), spec.image, spec.image, spec.channels],
        data,
    )
    .expect("consistent image extents")
}

/// Exports the four spec-named tensors: images/train, labels/train,
/// images/test, labels/test.
pub fn encode_dataset(ds: &SyntheticDataset) -> Vec<u8> {
    let train = stack_images(&ds.train_images, &ds.spec);
    let test = stack_images(&ds.test_images, &ds.spec);
    let tl = Tensor::new(
        vec![ds.train_labels.len()],
        ds.train_labels.iter().map(|&l| l as f32).collect(),
    )
    .expect("labels");
    let sl = Tensor::new(
        vec![ds.test_labels.len()],
        ds.test_labels.iter().map(|&l| l as f32).collect(),
    )
    .expect("labels");
    encode_named(&[
        ("images/train".to_string(), &train),
        ("labels/train".to_string(), &tl),
        ("images/test".to_string(), &test),
        ("labels/test".to_string(), &sl),
    ])
}
