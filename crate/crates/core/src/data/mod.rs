//! Sessions, attribute labels, the synthetic multi-domain generator, frame
//! augmentation and manifest persistence.

mod augment;
mod generate;
mod manifest;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IMPERCEPTIBLE, NUM_HEADS, OVERALL, VISIBLE_CUES};
use crate::tensor::Tensor;

pub use augment::{augment, hflip, rotate90, AugmentConfig};
pub use generate::{generate_domain, AttackMix, DomainSpec, SplitFractions};
pub use manifest::{
    read_manifest, write_manifest, write_manifest_with_files, ManifestHeader, SplitCounts,
};

pub const FRAME_CHANNELS: usize = 3;
pub const FRAME_SIZE: usize = 16;
pub const FRAMES_PER_SESSION: usize = 8;

/// Eight binary attribute labels, index 0 is head 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 8]", into = "[u8; 8]")]
pub struct AttributeLabels([bool; NUM_HEADS]);

impl AttributeLabels {
    /// Validates the label schema; bits must be 0 or 1.
    pub fn new(bits: [u8; NUM_HEADS]) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Validation(format!("label bit {b} is not 0/1")));
        }
        let labels = Self(bits.map(|b| b == 1));
        labels.validate()?;
        Ok(labels)
    }

    pub fn bona_fide() -> Self {
        Self([false; NUM_HEADS])
    }

    /// Attack carrying the given visible cues (zero-based heads 0..6). With no
    /// cues the attack is imperceptible.
    pub fn attack(cues: &[usize]) -> Result<Self> {
        let mut bits = [false; NUM_HEADS];
        for &c in cues {
            if !VISIBLE_CUES.contains(&c) {
                return Err(Error::Validation(format!("head {} is not a visible cue", c + 1)));
            }
            bits[c] = true;
        }
        bits[IMPERCEPTIBLE] = cues.is_empty();
        bits[OVERALL] = true;
        Ok(Self(bits))
    }

    pub fn get(&self, head: usize) -> bool {
        self.0[head]
    }

    pub fn is_attack(&self) -> bool {
        self.0[OVERALL]
    }

    pub fn has_visible_cue(&self) -> bool {
        self.0[VISIBLE_CUES].iter().any(|&b| b)
    }

    pub fn bits(&self) -> [u8; NUM_HEADS] {
        self.0.map(u8::from)
    }

    fn validate(&self) -> Result<()> {
        let visible = self.has_visible_cue();
        let attack = self.0[OVERALL];
        if visible && !attack {
            return Err(Error::Validation(
                "any of bits[1..6] = 1 requires bits[8] = 1".into(),
            ));
        }
        if self.0[IMPERCEPTIBLE] != (attack && !visible) {
            return Err(Error::Validation(
                "bits[7] = 1 iff bits[8] = 1 and bits[1..6] are all 0".into(),
            ));
        }
        Ok(())
    }
}

impl TryFrom<[u8; 8]> for AttributeLabels {
    type Error = Error;

    fn try_from(bits: [u8; 8]) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<AttributeLabels> for [u8; 8] {
    fn from(l: AttributeLabels) -> Self {
        l.bits()
    }
}

/// One RGB frame, `3 × 16 × 16`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(Tensor);

impl Frame {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.shape() != [FRAME_CHANNELS, FRAME_SIZE, FRAME_SIZE] {
            return Err(Error::dim(
                "frame",
                pixels.shape(),
                &[FRAME_CHANNELS, FRAME_SIZE, FRAME_SIZE],
            ));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("frame pixel {v} outside [0,1]")));
        }
        Ok(Self(pixels))
    }

    /// Clamps into `[0, 1]` (NaN becomes 0).
    pub(crate) fn clamped(mut pixels: Tensor) -> Self {
        pixels
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self(pixels)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.0
    }

    pub fn into_pixels(self) -> Tensor {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calib,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Calib, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calib => "calib",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackType {
    BonaFide,
    Print,
    Replay,
    Imperceptible,
}

impl AttackType {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackType::BonaFide => "bona_fide",
            AttackType::Print => "print",
            AttackType::Replay => "replay",
            AttackType::Imperceptible => "imperceptible",
        }
    }
}

/// A labeled recording: frames share the session's labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    pub domain: String,
    pub split: Split,
    pub attack_type: AttackType,
    pub labels: AttributeLabels,
    pub frames: Vec<Frame>,
}

impl Session {
    pub fn is_attack(&self) -> bool {
        self.labels.is_attack()
    }
}

/// Sessions of `split`, in input order.
pub fn split_of(sessions: &[Session], split: Split) -> Vec<&Session> {
    sessions.iter().filter(|s| s.split == split).collect()
}
