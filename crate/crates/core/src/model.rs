//! Teacher and student networks: frozen convolutional feature extractor plus
//! a trainable eight-head attribute classifier.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{self, Tape, Tensor, Var};

pub const NUM_HEADS: usize = 8;
/// Zero-based index of head 8, the overall fraud probability.
pub const OVERALL: usize = 7;
/// Zero-based index of head 7, attacks with no visible cue.
pub const IMPERCEPTIBLE: usize = 6;
/// Heads 1-6 (zero-based 0..6) carry human-visible spoof cues.
pub const VISIBLE_CUES: std::ops::Range<usize> = 0..6;

/// Meaning of each head, index 0 is head 1.
pub const HEAD_SEMANTICS: [&str; NUM_HEADS] = [
    "fingers-holding-device",
    "visible-device-border",
    "mobile-ui",
    "moire-patterns",
    "screen-glare",
    "screen-reflections",
    "imperceptible-attack",
    "overall-fraud",
];

pub const DEFAULT_INPUT_SIZE: usize = 16;
pub const TEACHER_FEATURE_DIM: usize = 32;
pub const STUDENT_FEATURE_DIM: usize = 16;
pub const TEACHER_ADAPTER_WIDTH: usize = 128;
pub const STUDENT_ADAPTER_WIDTH: usize = 128;

/// Set of heads, bit `j` is zero-based head `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadMask(u8);

impl HeadMask {
    /// All eight heads (the multi-head "V2" configuration).
    pub const ALL: HeadMask = HeadMask(0xff);
    /// Head 8 only (the binary "V1" configuration).
    pub const OVERALL_ONLY: HeadMask = HeadMask(1 << OVERALL);

    pub fn from_bits(bits: u8) -> Self {
        HeadMask(bits)
    }

    pub fn from_heads(heads: &[usize]) -> Result<Self> {
        heads.iter().try_fold(HeadMask(0), |m, &h| {
            if h >= NUM_HEADS {
                Err(Error::Config(format!("head index {h} out of range")))
            } else {
                Ok(HeadMask(m.0 | (1 << h)))
            }
        })
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, head: usize) -> bool {
        head < NUM_HEADS && self.0 & (1 << head) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..NUM_HEADS).filter(move |&h| self.contains(h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchTag {
    Teacher,
    Student,
}

/// Shape of a network: conv stages (output channels, stride), feature width
/// and the width of the shared hidden layer every head reads from, if any.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub stages: Vec<(usize, usize)>,
    pub feature_dim: usize,
    pub adapter: Option<usize>,
}

impl ArchConfig {
    pub fn teacher(feature_dim: usize) -> Self {
        Self {
            input_size: DEFAULT_INPUT_SIZE,
            stages: vec![(8, 1), (16, 2), (16, 2)],
            feature_dim,
            adapter: Some(TEACHER_ADAPTER_WIDTH),
        }
    }

    /// One conv stage fewer than the teacher.
    pub fn student(feature_dim: usize) -> Self {
        Self {
            input_size: DEFAULT_INPUT_SIZE,
            stages: vec![(8, 2), (16, 2)],
            feature_dim,
            adapter: Some(STUDENT_ADAPTER_WIDTH),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(Error::Config(format!(
                "feature dim must be at least 8, got {}",
                self.feature_dim
            )));
        }
        if self.input_size < 3 {
            return Err(Error::Config(format!("input size {} < 3", self.input_size)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one conv stage".into()));
        }
        if let Some(&(c, s)) = self.stages.iter().find(|&&(c, s)| c == 0 || !(1..=2).contains(&s)) {
            return Err(Error::Config(format!("bad conv stage ({c} channels, stride {s})")));
        }
        Ok(())
    }

    /// Flattened size of the last conv stage's output.
    fn flat_dim(&self) -> usize {
        let side = self
            .stages
            .iter()
            .fold(self.input_size, |side, &(_, s)| side.div_ceil(s));
        self.stages.last().map_or(0, |&(c, _)| c) * side * side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub kernels: Tensor,
    pub stride: usize,
}

/// Frozen feature extractor: ReLU conv stages then a tanh projection.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub stages: Vec<ConvStage>,
    pub projection: Tensor,
    pub projection_bias: Tensor,
    pub frozen: bool,
}

impl BackboneParams {
    pub fn feature_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.stages
            .iter()
            .map(|s| &s.kernels)
            .chain([&self.projection, &self.projection_bias])
            .collect()
    }

    /// Serialized bytes of every contained tensor. Equal bytes ⇔ equal weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.to_snapshot_bytes())
            .collect()
    }

    /// Non-taped forward. Frames are centered around 0.5 before the first stage.
    pub fn features(&self, frame: &Tensor) -> Result<Tensor> {
        let mut x = frame.map(|v| v - 0.5);
        for stage in &self.stages {
            x = tensor::relu(&tensor::conv2d(&x, &stage.kernels, stage.stride)?);
        }
        let n = x.len();
        let flat = x.reshape(&[n])?;
        Ok(tensor::tanh(&tensor::affine(
            &flat,
            &self.projection,
            &self.projection_bias,
        )?))
    }
}

/// Shared hidden layer `h = tanh(A f + c)` feeding all heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// Fixed per-feature standardization `f * scale + shift`, fitted once on
    /// clean training frames and never updated by the optimizer.
    pub input_scale: Tensor,
    pub input_shift: Tensor,
    pub adapter: Option<Adapter>,
    pub weights: Tensor,
    pub bias: Tensor,
    pub active: HeadMask,
}

impl HeadParams {
    /// Zeroed head. A shared hidden layer, if any, is also zeroed; see
    /// [`init_model`] for the random draw used in training.
    pub fn zeros(feature_dim: usize, adapter: Option<usize>, active: HeadMask) -> Self {
        Self {
            input_scale: Tensor::filled(&[feature_dim], 1.0),
            input_shift: Tensor::zeros(&[feature_dim]),
            adapter: adapter.map(|width| Adapter {
                weights: Tensor::zeros(&[width, feature_dim]),
                bias: Tensor::zeros(&[width]),
            }),
            weights: Tensor::zeros(&[NUM_HEADS, adapter.unwrap_or(feature_dim)]),
            bias: Tensor::zeros(&[NUM_HEADS]),
            active,
        }
    }

    /// Trainable tensors in a fixed order: output weights, output bias,
    /// then adapter weights and bias when present.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.weights, &self.bias];
        if let Some(a) = &self.adapter {
            out.extend([&a.weights, &a.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.weights, &mut self.bias];
        if let Some(a) = &mut self.adapter {
            out.extend([&mut a.weights, &mut a.bias]);
        }
        out
    }

    /// Set the input standardization from a sample of backbone features.
    pub fn fit_input_normalization(&mut self, features: &[Tensor]) -> Result<()> {
        let d = self.input_scale.len();
        if features.is_empty() {
            return Err(Error::Input("no features to fit normalization on".into()));
        }
        if let Some(f) = features.iter().find(|f| f.shape() != [d]) {
            return Err(Error::dim("fit_input_normalization", f.shape(), &[d]));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f.data()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f.data()).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-8)).collect();
        let shift = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        self.input_scale = Tensor::new(vec![d], scale)?;
        self.input_shift = Tensor::new(vec![d], shift)?;
        Ok(())
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let x = tensor::add(&tensor::mul(features, &self.input_scale)?, &self.input_shift)?;
        let hidden = match &self.adapter {
            Some(a) => tensor::tanh(&tensor::affine(&x, &a.weights, &a.bias)?),
            None => x,
        };
        tensor::affine(&hidden, &self.weights, &self.bias)
    }
}

/// Head vars recorded on a tape, in [`HeadParams::tensors`] order.
pub struct TapedHead {
    pub logits: Var,
    pub params: Vec<Var>,
}

/// Logits for all eight heads; heads outside `active` are inert.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub logits: Tensor,
    pub active: HeadMask,
}

impl HeadLogits {
    pub fn is_inert(&self, head: usize) -> bool {
        !self.active.contains(head)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchTag,
    /// Set once fine-tuning has produced the head.
    pub trained: bool,
    pub config: ArchConfig,
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

/// Teacher with a seeded random frozen backbone and a zeroed head.
pub fn init_teacher(rng: RngStream, feature_dim: usize) -> Result<ModelParams> {
    init_model(ArchTag::Teacher, ArchConfig::teacher(feature_dim), HeadMask::ALL, rng)
}

pub fn init_student(rng: RngStream, feature_dim: usize) -> Result<ModelParams> {
    init_model(ArchTag::Student, ArchConfig::student(feature_dim), HeadMask::ALL, rng)
}

pub fn init_model(
    arch: ArchTag,
    config: ArchConfig,
    active: HeadMask,
    rng: RngStream,
) -> Result<ModelParams> {
    config.validate()?;
    if active.is_empty() {
        return Err(Error::Config("active head mask is empty".into()));
    }
    let mut in_ch = 3;
    let stages = config
        .stages
        .iter()
        .enumerate()
        .map(|(i, &(out_ch, stride))| {
            let fan_in = in_ch * 9;
            let kernels = Tensor::random_normal(
                &[out_ch, in_ch, 3, 3],
                1.0 / (fan_in as f64).sqrt(),
                rng.derive_named("conv").derive(i as u64),
            );
            in_ch = out_ch;
            ConvStage { kernels, stride }
        })
        .collect();
    let flat = config.flat_dim();
    let projection = Tensor::random_normal(
        &[config.feature_dim, flat],
        1.0 / (flat as f64).sqrt(),
        rng.derive_named("projection"),
    );
    Ok(ModelParams {
        arch,
        trained: false,
        backbone: BackboneParams {
            stages,
            projection,
            projection_bias: Tensor::zeros(&[config.feature_dim]),
            frozen: true,
        },
        head: {
            let mut head = HeadParams::zeros(config.feature_dim, config.adapter, active);
            if let Some(a) = &mut head.adapter {
                a.weights = Tensor::random_normal(
                    a.weights.shape(),
                    1.0 / (config.feature_dim as f64).sqrt(),
                    rng.derive_named("adapter"),
                );
            }
            head
        },
        config,
    })
}

impl ModelParams {
    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn with_active_heads(mut self, active: HeadMask) -> Self {
        self.head.active = active;
        self
    }

    /// Same weights under a different role tag.
    pub fn retagged(&self, arch: ArchTag) -> Self {
        Self {
            arch,
            ..self.clone()
        }
    }

    fn check_frame(&self, frame: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if frame.shape() != [3, s, s] {
            return Err(Error::dim("forward(frame)", frame.shape(), &[3, s, s]));
        }
        Ok(())
    }

    pub fn features(&self, frame: &Tensor) -> Result<Tensor> {
        self.check_frame(frame)?;
        self.backbone.features(frame)
    }

    pub fn forward(&self, frame: &Tensor) -> Result<HeadLogits> {
        let features = self.features(frame)?;
        Ok(HeadLogits {
            logits: self.head.logits(&features)?,
            active: self.head.active,
        })
    }

    /// Record the head on `tape` on top of precomputed features.
    pub fn record_head(&self, tape: &mut Tape, features: Var) -> Result<TapedHead> {
        let weights = tape.leaf(self.head.weights.clone());
        let bias = tape.leaf(self.head.bias.clone());
        let mut params = vec![weights, bias];
        let scale = tape.leaf(self.head.input_scale.clone());
        let shift = tape.leaf(self.head.input_shift.clone());
        let scaled = tape.mul(features, scale)?;
        let features = tape.add(scaled, shift)?;
        let hidden = match &self.head.adapter {
            Some(a) => {
                let aw = tape.leaf(a.weights.clone());
                let ab = tape.leaf(a.bias.clone());
                params.extend([aw, ab]);
                let pre = tape.affine(features, aw, ab)?;
                tape.tanh(pre)?
            }
            None => features,
        };
        let logits = tape.affine(hidden, weights, bias)?;
        Ok(TapedHead { logits, params })
    }

    /// Record the whole network, backbone included, on `tape`. Returns the
    /// head handles and the vars of every backbone tensor.
    pub fn record_full(&self, tape: &mut Tape, frame: &Tensor) -> Result<(TapedHead, Vec<Var>)> {
        self.check_frame(frame)?;
        let mut backbone_vars = Vec::new();
        let mut x = tape.leaf(frame.map(|v| v - 0.5));
        for stage in &self.backbone.stages {
            let k = tape.leaf(stage.kernels.clone());
            backbone_vars.push(k);
            let c = tape.conv2d(x, k, stage.stride)?;
            x = tape.relu(c)?;
        }
        let flat = tape.flatten(x)?;
        let p = tape.leaf(self.backbone.projection.clone());
        let pb = tape.leaf(self.backbone.projection_bias.clone());
        backbone_vars.extend([p, pb]);
        let pre = tape.affine(flat, p, pb)?;
        let features = tape.tanh(pre)?;
        Ok((self.record_head(tape, features)?, backbone_vars))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// `SPBC` magic, u32 LE header length, JSON header, tensor snapshots.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = CheckpointHeader {
            version: 1,
            arch: self.arch,
            feature_dim: self.config.feature_dim,
            active_heads: self.head.active,
            config: self.config.clone(),
            strides: self.backbone.stages.iter().map(|s| s.stride).collect(),
            frozen: self.backbone.frozen,
            trained: self.trained,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let head = &self.head;
        for t in self
            .backbone
            .tensors()
            .into_iter()
            .chain(head.tensors())
            .chain([&head.input_scale, &head.input_shift])
        {
            t.write_snapshot(&mut w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        header.config.validate()?;
        if header.feature_dim != header.config.feature_dim {
            return Err(Error::Format("feature dim disagrees with arch config".into()));
        }
        let stages = header
            .strides
            .iter()
            .map(|&stride| {
                Ok(ConvStage {
                    kernels: Tensor::read_snapshot(&mut r)?,
                    stride,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let projection = Tensor::read_snapshot(&mut r)?;
        let projection_bias = Tensor::read_snapshot(&mut r)?;
        let weights = Tensor::read_snapshot(&mut r)?;
        let bias = Tensor::read_snapshot(&mut r)?;
        let adapter = if header.config.adapter.is_some() {
            Some(Adapter {
                weights: Tensor::read_snapshot(&mut r)?,
                bias: Tensor::read_snapshot(&mut r)?,
            })
        } else {
            None
        };
        let input_scale = Tensor::read_snapshot(&mut r)?;
        let input_shift = Tensor::read_snapshot(&mut r)?;
        let d = header.feature_dim;
        if projection.shape() != [d, header.config.flat_dim()]
            || input_scale.shape() != [d]
            || input_shift.shape() != [d]
            || weights.shape() != [NUM_HEADS, header.config.adapter.unwrap_or(d)]
            || adapter.as_ref().is_some_and(|a| a.weights.shape() != [weights.shape()[1], d])
            || bias.shape() != [NUM_HEADS]
        {
            return Err(Error::Format("checkpoint tensor shapes disagree with header".into()));
        }
        Ok(ModelParams {
            arch: header.arch,
            trained: header.trained,
            config: header.config,
            backbone: BackboneParams {
                stages,
                projection,
                projection_bias,
                frozen: header.frozen,
            },
            head: HeadParams {
                input_scale,
                input_shift,
                adapter,
                weights,
                bias,
                active: header.active_heads,
            },
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPBC";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: ArchTag,
    feature_dim: usize,
    active_heads: HeadMask,
    config: ArchConfig,
    strides: Vec<usize>,
    frozen: bool,
    trained: bool,
}

/// `sigmoid(logit / temperature)` per head.
pub fn head_probabilities(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(logits.map(|z| tensor::sigmoid_scalar(z / temperature)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, central_difference};

    fn frame(seed: u64) -> Tensor {
        Tensor::random_uniform(&[3, 16, 16], 0.0, 1.0, RngStream::new(seed, 99))
    }

    #[test]
    fn semantics_table() {
        assert_eq!(HEAD_SEMANTICS.len(), 8);
        assert_eq!(HEAD_SEMANTICS[OVERALL], "overall-fraud");
        assert_eq!(HEAD_SEMANTICS[IMPERCEPTIBLE], "imperceptible-attack");
        assert_eq!(VISIBLE_CUES.len(), 6);
    }

    #[test]
    fn feature_dim_below_eight_rejected() {
        assert!(matches!(init_teacher(RngStream::new(0, 0), 7), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_teacher(RngStream::new(3, 1), 32).unwrap();
        let b = init_teacher(RngStream::new(3, 1), 32).unwrap();
        assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
        let c = init_teacher(RngStream::new(4, 1), 32).unwrap();
        assert_ne!(a.backbone.to_bytes(), c.backbone.to_bytes());
    }

    #[test]
    fn zero_head_gives_half_probability() {
        let m = init_teacher(RngStream::new(1, 0), 32).unwrap();
        let out = m.forward(&frame(1)).unwrap();
        assert!(out.logits.data().iter().all(|&z| z == 0.0));
        let p = head_probabilities(&out.logits, 1.0).unwrap();
        assert_eq!(p.data()[OVERALL], 0.5);
    }

    #[test]
    fn v1_heads_flagged_inert() {
        let m = init_teacher(RngStream::new(1, 0), 32)
            .unwrap()
            .with_active_heads(HeadMask::OVERALL_ONLY);
        let out = m.forward(&frame(2)).unwrap();
        assert_eq!(out.logits.len(), 8);
        assert!((0..7).all(|h| out.is_inert(h)));
        assert!(!out.is_inert(OVERALL));
    }

    #[test]
    fn weight_scale_matches_fan_in() {
        // projection: 32 × 256 = 8192 draws plus 16×16×9 conv = 2304 → >10k
        let m = init_teacher(RngStream::new(8, 0), 32).unwrap();
        let check = |t: &Tensor, fan_in: usize| {
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let expected = 1.0 / (fan_in as f64).sqrt();
            assert!((var.sqrt() / expected - 1.0).abs() < 0.1, "std {} vs {expected}", var.sqrt());
        };
        check(&m.backbone.projection, 256);
        check(&m.backbone.stages[1].kernels, 8 * 9);
        let big = init_teacher(RngStream::new(9, 0), 64).unwrap();
        assert!(big.backbone.projection.len() >= 10_000);
        check(&big.backbone.projection, 256);
    }

    #[test]
    fn forward_rejects_wrong_frame() {
        let m = init_teacher(RngStream::new(1, 0), 32).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[3, 8, 8])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn forward_is_pure_and_matches_taped_composition() {
        let mut m = init_teacher(RngStream::new(2, 0), 32).unwrap();
        m.head.weights = Tensor::random_normal(m.head.weights.shape(), 0.3, RngStream::new(2, 5));
        m.head.bias = Tensor::random_normal(&[8], 0.3, RngStream::new(2, 6));
        m.head.input_scale = Tensor::random_uniform(&[32], 5.0, 50.0, RngStream::new(2, 8));
        m.head.input_shift = Tensor::random_normal(&[32], 0.5, RngStream::new(2, 9));
        let f = frame(3);
        let a = m.forward(&f).unwrap();
        let b = m.forward(&f).unwrap();
        assert_eq!(a, b);

        let mut tape = Tape::new();
        let (head, _) = m.record_full(&mut tape, &f).unwrap();
        let taped = tape.value(head.logits).unwrap();
        assert_close(a.logits.data(), taped.data(), 1e-12);
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let mut m = init_model(
            ArchTag::Student,
            ArchConfig {
                input_size: 5,
                stages: vec![(2, 2)],
                feature_dim: 8,
                adapter: Some(8),
            },
            HeadMask::ALL,
            RngStream::new(4, 0),
        )
        .unwrap();
        m.head.weights = Tensor::random_normal(&[8, 8], 0.5, RngStream::new(4, 1));
        m.head.adapter.as_mut().unwrap().weights =
            Tensor::random_normal(&[8, 8], 0.5, RngStream::new(4, 2));
        m.head.input_scale = Tensor::random_uniform(&[8], 0.5, 3.0, RngStream::new(4, 5));
        m.head.input_shift = Tensor::random_normal(&[8], 0.5, RngStream::new(4, 6));
        let f = Tensor::random_uniform(&[3, 5, 5], 0.0, 1.0, RngStream::new(4, 3));
        let up = Tensor::random_uniform(&[8], -1.0, 1.0, RngStream::new(4, 4));
        let dot = |m: &ModelParams| {
            m.forward(&f)
                .unwrap()
                .logits
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };

        let mut tape = Tape::new();
        let (head, bb) = m.record_full(&mut tape, &f).unwrap();
        let g = tape.backward(head.logits, up.clone()).unwrap();

        let fd_kernels = central_difference(&m.backbone.stages[0].kernels, 1e-5, |k| {
            let mut p = m.clone();
            p.backbone.stages[0].kernels = k.clone();
            dot(&p)
        });
        assert_close(g.get(bb[0]).unwrap().data(), fd_kernels.data(), 1e-4);

        let fd_adapter = central_difference(&m.head.adapter.as_ref().unwrap().weights, 1e-5, |w| {
            let mut p = m.clone();
            p.head.adapter.as_mut().unwrap().weights = w.clone();
            dot(&p)
        });
        assert_close(g.get(head.params[2]).unwrap().data(), fd_adapter.data(), 1e-4);
    }

    #[test]
    fn fitted_normalization_standardizes_its_sample() {
        let mut head = HeadParams::zeros(4, None, HeadMask::ALL);
        let sample: Vec<Tensor> = (0..50)
            .map(|i| Tensor::random_normal(&[4], 0.02, RngStream::new(6, i)).map(|v| v + 0.3))
            .collect();
        head.fit_input_normalization(&sample).unwrap();
        let normalized: Vec<Vec<f64>> = sample
            .iter()
            .map(|f| {
                let x = tensor::mul(f, &head.input_scale).unwrap();
                tensor::add(&x, &head.input_shift).unwrap().into_data()
            })
            .collect();
        for j in 0..4 {
            let col: Vec<f64> = normalized.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "{mean} {var}");
        }
        assert!(head.fit_input_normalization(&[]).is_err());
    }

    #[test]
    fn overall_only_mask_zeroes_other_rows() {
        let m = init_teacher(RngStream::new(5, 0), 32).unwrap();
        let features = m.features(&frame(5)).unwrap();
        let mut tape = Tape::new();
        let fv = tape.leaf(features);
        let head = m.record_head(&mut tape, fv).unwrap();
        let mut up = Tensor::zeros(&[8]);
        up.data_mut()[OVERALL] = 0.7;
        let g = tape.backward(head.logits, up).unwrap();
        let gw = g.get(head.params[0]).unwrap();
        assert!(gw.data()[..7 * 32].iter().all(|&v| v == 0.0));
        assert!(gw.data()[7 * 32..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_student(RngStream::new(6, 0), 16)
            .unwrap()
            .with_active_heads(HeadMask::OVERALL_ONLY);
        let bytes = m.to_checkpoint_bytes();
        let back = ModelParams::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(ModelParams::read_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn temperature_scaling() {
        let logits = Tensor::vector(vec![3.0, 9f64.ln(), 0.0]);
        let p1 = head_probabilities(&logits, 1.0).unwrap();
        assert_eq!(p1.data()[0], tensor::sigmoid_scalar(3.0));
        let flat = head_probabilities(&logits, 1e6).unwrap();
        assert!((flat.data()[0] - 0.5).abs() < 1e-6);
        let p2 = head_probabilities(&logits, 2.0).unwrap();
        assert!((p2.data()[1] - 0.75).abs() < 1e-12);
        assert!(matches!(head_probabilities(&logits, 0.0), Err(Error::Config(_))));
        assert!(matches!(head_probabilities(&logits, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn student_is_smaller() {
        let t = init_teacher(RngStream::new(0, 0), TEACHER_FEATURE_DIM).unwrap();
        let s = init_student(RngStream::new(0, 1), STUDENT_FEATURE_DIM).unwrap();
        assert!(s.feature_dim() <= t.feature_dim());
        assert_eq!(s.backbone.stages.len() + 1, t.backbone.stages.len());
    }
}
