use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttackType, AttributeLabels, Frame, Session, Split, FRAME_CHANNELS, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const FINGERS: usize = 0;
const BORDER: usize = 1;
const UI: usize = 2;
const MOIRE: usize = 3;
const GLARE: usize = 4;
const REFLECTION: usize = 5;

/// Cues a printed photo can show.
const PRINT_CUES: &[usize] = &[FINGERS, BORDER, GLARE];
/// Cues a replayed screen can show.
const REPLAY_CUES: &[usize] = &[FINGERS, BORDER, UI, MOIRE, GLARE, REFLECTION];

/// Session-type proportions; must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMix {
    pub bona_fide: f64,
    pub print: f64,
    pub replay: f64,
    pub imperceptible: f64,
}

impl AttackMix {
    fn validate(&self) -> Result<()> {
        let parts = [self.bona_fide, self.print, self.replay, self.imperceptible];
        if parts.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config(format!("attack mix has a negative entry: {self:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("attack mix sums to {sum}, not 1")));
        }
        Ok(())
    }

    fn draw(&self, u: f64) -> AttackType {
        let mut acc = self.bona_fide;
        if u < acc {
            return AttackType::BonaFide;
        }
        acc += self.print;
        if u < acc {
            return AttackType::Print;
        }
        acc += self.replay;
        if u < acc || self.imperceptible == 0.0 {
            return AttackType::Replay;
        }
        AttackType::Imperceptible
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub calib: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            calib: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.calib, self.test];
        if parts.iter().any(|&p| !(p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be >= 0 and sum to 1: {self:?}")));
        }
        Ok(())
    }

    fn draw(&self, u: f64) -> Split {
        if u < self.train {
            Split::Train
        } else if u < self.train + self.calib {
            Split::Calib
        } else {
            Split::Test
        }
    }
}

/// Capture conditions and attack population of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub seed: u64,
    /// Range the per-session scene luminance is drawn from.
    pub luminance: [f64; 2],
    /// Per-channel multiplier applied to the whole scene.
    pub chroma_bias: [f64; 3],
    pub noise_std: f64,
    /// Strength of each visible cue (heads 1-6).
    pub cue_intensity: [f64; 6],
    /// Chance that an attack shows each cue it can show (at least one is
    /// always kept).
    #[serde(default = "default_cue_prob")]
    pub cue_prob: [f64; 6],
    /// Std of the high-pass noise that marks an imperceptible attack.
    pub imperceptible_intensity: f64,
    pub mix: AttackMix,
    #[serde(default)]
    pub splits: SplitFractions,
    #[serde(default = "default_frames")]
    pub frames_per_session: usize,
}

fn default_cue_prob() -> [f64; 6] {
    [0.5; 6]
}

fn default_frames() -> usize {
    super::FRAMES_PER_SESSION
}

impl DomainSpec {
    /// Bright, neutral lighting, low noise, replay-heavy attacks.
    pub fn domain_a(seed: u64) -> Self {
        Self {
            name: "domain-a".into(),
            seed,
            luminance: [0.6, 0.9],
            chroma_bias: [1.0, 1.0, 1.0],
            noise_std: 0.02,
            cue_intensity: [1.0; 6],
            cue_prob: default_cue_prob(),
            imperceptible_intensity: 0.08,
            mix: AttackMix {
                bona_fide: 0.5,
                print: 0.18,
                replay: 0.24,
                imperceptible: 0.08,
            },
            splits: SplitFractions::default(),
            frames_per_session: super::FRAMES_PER_SESSION,
        }
    }

    /// Slightly dimmer, cooler lighting, noisier sensor, weaker moire,
    /// print-heavy attacks.
    pub fn domain_b(seed: u64) -> Self {
        Self {
            name: "domain-b".into(),
            seed,
            luminance: [0.5, 0.8],
            chroma_bias: [0.95, 1.0, 1.05],
            noise_std: 0.025,
            cue_intensity: [0.8, 0.8, 0.9, 0.7, 1.1, 0.8],
            cue_prob: default_cue_prob(),
            imperceptible_intensity: 0.07,
            mix: AttackMix {
                bona_fide: 0.5,
                print: 0.28,
                replay: 0.14,
                imperceptible: 0.08,
            },
            splits: SplitFractions::default(),
            frames_per_session: super::FRAMES_PER_SESSION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        self.splits.validate()?;
        let [lo, hi] = self.luminance;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config(format!("bad luminance range {:?}", self.luminance)));
        }
        let nonneg = self
            .cue_intensity
            .iter()
            .chain(&self.chroma_bias)
            .chain(&self.cue_prob)
            .chain([&self.noise_std, &self.imperceptible_intensity])
            .all(|&v| v >= 0.0 && v.is_finite());
        if !nonneg {
            return Err(Error::Config("intensities must be finite and >= 0".into()));
        }
        if self.cue_prob.iter().any(|&p| p > 1.0) {
            return Err(Error::Config(format!("cue probabilities must be <= 1: {:?}", self.cue_prob)));
        }
        if self.frames_per_session == 0 {
            return Err(Error::Config("frames per session must be >= 1".into()));
        }
        if self.name.is_empty() {
            return Err(Error::Config("domain name is empty".into()));
        }
        Ok(())
    }

    fn session_stream(&self, index: usize) -> RngStream {
        RngStream::new(self.seed, 0)
            .derive_named(&self.name)
            .derive(index as u64)
    }
}

/// Generate `n_sessions` sessions. Each session draws from its own stream
/// keyed by (seed, domain, index), so output is independent of thread count.
pub fn generate_domain(spec: &DomainSpec, n_sessions: usize) -> Result<Vec<Session>> {
    spec.validate()?;
    if n_sessions == 0 {
        return Err(Error::Config("n_sessions must be >= 1".into()));
    }
    (0..n_sessions)
        .into_par_iter()
        .map(|i| generate_session(spec, i))
        .collect()
}

fn generate_session(spec: &DomainSpec, index: usize) -> Result<Session> {
    let mut rng = spec.session_stream(index).rng();
    let split = spec.splits.draw(rng.random());
    let attack_type = spec.mix.draw(rng.random());
    let cues = match attack_type {
        AttackType::BonaFide => None,
        AttackType::Imperceptible => Some(Vec::new()),
        AttackType::Print => Some(pick_cues(&mut rng, PRINT_CUES, &spec.cue_prob)),
        AttackType::Replay => Some(pick_cues(&mut rng, REPLAY_CUES, &spec.cue_prob)),
    };
    let labels = match &cues {
        None => AttributeLabels::bona_fide(),
        Some(c) => AttributeLabels::attack(c)?,
    };
    let scene = Scene::draw(&mut rng, spec, cues.as_deref().unwrap_or(&[]), attack_type);
    let frames = (0..spec.frames_per_session)
        .map(|f| Frame::clamped(scene.render(&mut rng, spec, f)))
        .collect();
    Ok(Session {
        id: format!("{}-{index:06}", spec.name),
        domain: spec.name.clone(),
        split,
        attack_type,
        labels,
        frames,
    })
}

/// Each allowed cue independently with its domain probability, at least one.
fn pick_cues(rng: &mut ChaCha8Rng, allowed: &[usize], prob: &[f64; 6]) -> Vec<usize> {
    let mut cues: Vec<usize> = allowed
        .iter()
        .copied()
        .filter(|&c| rng.random::<f64>() < prob[c])
        .collect();
    if cues.is_empty() {
        cues.push(allowed[rng.random_range(0..allowed.len())]);
    }
    cues
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

const N: usize = FRAME_SIZE;

#[inline]
fn idx(c: usize, y: usize, x: usize) -> usize {
    (c * N + y) * N + x
}

/// Per-session scene parameters; frames jitter around them.
struct Scene {
    luminance: f64,
    background: [f64; 3],
    gradient: (f64, f64),
    face_center: (f64, f64),
    face_radii: (f64, f64),
    skin: [f64; 3],
    attack: AttackType,
    /// Per-cue strength, zero when the cue is absent.
    cue: [f64; 6],
    finger_corners: (bool, bool),
    border_width: usize,
    ui_rows: usize,
    moire_freq: (f64, f64),
    moire_phase: f64,
    glare_center: (f64, f64),
    ghost_shift: f64,
}

impl Scene {
    fn draw(rng: &mut ChaCha8Rng, spec: &DomainSpec, cues: &[usize], attack: AttackType) -> Self {
        let luminance = uniform(rng, spec.luminance[0], spec.luminance[1]);
        let bg_tone = [uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7)];
        let tone = uniform(rng, 0.8, 1.1);
        let mut cue = [0.0; 6];
        for &c in cues {
            cue[c] = spec.cue_intensity[c] * uniform(rng, 0.7, 1.3);
        }
        let left = rng.random_bool(0.5);
        let angle = uniform(rng, 0.0, TAU);
        let freq = uniform(rng, 0.3, 0.45);
        Self {
            luminance,
            background: bg_tone,
            gradient: (uniform(rng, -0.08, 0.08), uniform(rng, -0.08, 0.08)),
            face_center: (8.0 + uniform(rng, -1.5, 1.5), 8.0 + uniform(rng, -1.0, 1.0)),
            face_radii: (uniform(rng, 3.5, 5.0), uniform(rng, 4.5, 6.0)),
            skin: [0.85 * tone, 0.65 * tone, 0.55 * tone],
            attack,
            cue,
            finger_corners: (left, !left || rng.random_bool(0.3)),
            border_width: if rng.random_bool(0.5) { 1 } else { 2 },
            ui_rows: rng.random_range(2..=3),
            moire_freq: (freq * angle.cos(), freq * angle.sin()),
            moire_phase: uniform(rng, 0.0, TAU),
            glare_center: (uniform(rng, 3.0, 13.0), uniform(rng, 3.0, 13.0)),
            ghost_shift: uniform(rng, 1.0, 3.0),
        }
    }

    fn render(&self, rng: &mut ChaCha8Rng, spec: &DomainSpec, frame_index: usize) -> Tensor {
        let mut img = vec![0.0; FRAME_CHANNELS * N * N];
        let (jx, jy) = (uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5));
        let (cx, cy) = (self.face_center.0 + jx, self.face_center.1 + jy);
        let (rx, ry) = self.face_radii;
        for y in 0..N {
            for x in 0..N {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let d2 = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
                let face = 1.0 / (1.0 + ((d2 - 1.0) * 6.0).exp());
                let eyes = [-1.8, 1.8]
                    .iter()
                    .map(|&ox| (-((fx - cx - ox).powi(2) + (fy - cy + 1.2).powi(2)) / 0.9).exp())
                    .sum::<f64>();
                let mouth = (-((fx - cx).powi(2) / 2.0 + (fy - cy - 2.3).powi(2) / 0.3)).exp();
                let shade = 1.0 - 0.35 * eyes - 0.25 * mouth;
                let grad = 1.0 + self.gradient.0 * (fx - 8.0) / 8.0 + self.gradient.1 * (fy - 8.0) / 8.0;
                for c in 0..FRAME_CHANNELS {
                    let bg = self.background[c] * grad;
                    let skin = self.skin[c] * shade;
                    img[idx(c, y, x)] =
                        self.luminance * spec.chroma_bias[c] * (face * skin + (1.0 - face) * bg);
                }
            }
        }

        self.overlay_cues(&mut img, frame_index);

        for v in img.iter_mut() {
            *v += spec.noise_std * gauss(rng);
        }
        if self.attack == AttackType::Imperceptible {
            add_high_pass_noise(&mut img, rng, spec.imperceptible_intensity);
        }
        Tensor::new(vec![FRAME_CHANNELS, N, N], img).expect("frame shape")
    }

    fn overlay_cues(&self, img: &mut [f64], frame_index: usize) {
        if self.cue[REFLECTION] > 0.0 {
            let k = self.cue[REFLECTION];
            let src = img.to_vec();
            for c in 0..FRAME_CHANNELS {
                let mean = src[c * N * N..(c + 1) * N * N].iter().sum::<f64>() / (N * N) as f64;
                for y in 0..N {
                    for x in 0..N {
                        let mx = (N as f64 - 1.0 - x as f64 + self.ghost_shift).clamp(0.0, N as f64 - 1.0);
                        let ghost = src[idx(c, y, mx as usize)] - mean;
                        img[idx(c, y, x)] += 0.35 * k * ghost + 0.04 * k;
                    }
                }
            }
        }
        if self.cue[MOIRE] > 0.0 {
            let k = self.cue[MOIRE];
            let phase = self.moire_phase + 0.4 * frame_index as f64;
            for c in 0..FRAME_CHANNELS {
                let cp = phase + c as f64 * TAU / 3.0;
                for y in 0..N {
                    for x in 0..N {
                        let arg = TAU * (self.moire_freq.0 * x as f64 + self.moire_freq.1 * y as f64);
                        img[idx(c, y, x)] += 0.12 * k * (arg + cp).sin();
                    }
                }
            }
        }
        if self.cue[GLARE] > 0.0 {
            let k = self.cue[GLARE];
            let (gx, gy) = (
                self.glare_center.0 + 0.2 * frame_index as f64,
                self.glare_center.1,
            );
            for y in 0..N {
                for x in 0..N {
                    let d2 = (x as f64 + 0.5 - gx).powi(2) + (y as f64 + 0.5 - gy).powi(2);
                    let g = 0.7 * k * (-d2 / 6.0).exp();
                    for c in 0..FRAME_CHANNELS {
                        let p = &mut img[idx(c, y, x)];
                        *p += g * (1.0 - *p).max(0.0) + 0.1 * g;
                    }
                }
            }
        }
        if self.cue[UI] > 0.0 {
            let alpha = (0.75 * self.cue[UI]).min(1.0);
            let colors = [[0.95, 0.95, 0.95], [0.1, 0.2, 0.5]];
            for y in 0..self.ui_rows {
                let color = colors[y % 2];
                for x in 0..N {
                    for c in 0..FRAME_CHANNELS {
                        let p = &mut img[idx(c, y, x)];
                        *p = (1.0 - alpha) * *p + alpha * color[c];
                    }
                }
            }
        }
        if self.cue[FINGERS] > 0.0 {
            let alpha = (0.85 * self.cue[FINGERS]).min(1.0);
            let (left, right) = self.finger_corners;
            let spans = [(left, 0..3), (right, N - 3..N)];
            for (on, xs) in spans {
                if !on {
                    continue;
                }
                for y in N - 6..N {
                    for x in xs.clone() {
                        for c in 0..FRAME_CHANNELS {
                            let p = &mut img[idx(c, y, x)];
                            *p = (1.0 - alpha) * *p + alpha * self.skin[c] * 0.9;
                        }
                    }
                }
            }
        }
        if self.cue[BORDER] > 0.0 {
            let dark = (0.85 * self.cue[BORDER]).min(1.0);
            let w = self.border_width;
            for y in 0..N {
                for x in 0..N {
                    if y < w || x < w || y >= N - w || x >= N - w {
                        for c in 0..FRAME_CHANNELS {
                            img[idx(c, y, x)] *= 1.0 - dark;
                        }
                    }
                }
            }
        }
    }
}

/// White noise minus its 3×3 box blur: energy concentrated at high spatial
/// frequencies, no visible structure.
fn add_high_pass_noise(img: &mut [f64], rng: &mut ChaCha8Rng, std: f64) {
    let noise: Vec<f64> = (0..img.len()).map(|_| gauss(rng)).collect();
    for c in 0..FRAME_CHANNELS {
        for y in 0..N {
            for x in 0..N {
                let mut sum = 0.0;
                let mut count = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(N) {
                    for xx in x.saturating_sub(1)..(x + 2).min(N) {
                        sum += noise[idx(c, yy, xx)];
                        count += 1.0;
                    }
                }
                // rescale so the high-passed field has roughly unit variance
                img[idx(c, y, x)] += std * 1.06 * (noise[idx(c, y, x)] - sum / count);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IMPERCEPTIBLE, OVERALL};

    #[test]
    fn no_attacks_when_mix_is_all_bona_fide() {
        let mut spec = DomainSpec::domain_a(1);
        spec.mix = AttackMix {
            bona_fide: 1.0,
            print: 0.0,
            replay: 0.0,
            imperceptible: 0.0,
        };
        let sessions = generate_domain(&spec, 200).unwrap();
        assert!(sessions.iter().all(|s| !s.labels.get(OVERALL)));
    }

    #[test]
    fn imperceptible_only_forces_schema() {
        let mut spec = DomainSpec::domain_b(2);
        spec.mix = AttackMix {
            bona_fide: 0.5,
            print: 0.0,
            replay: 0.0,
            imperceptible: 0.5,
        };
        for s in generate_domain(&spec, 200).unwrap() {
            if s.is_attack() {
                assert!(s.labels.get(IMPERCEPTIBLE));
                assert!(!s.labels.has_visible_cue());
            }
        }
    }

    #[test]
    fn invalid_mix_rejected() {
        let mut spec = DomainSpec::domain_a(1);
        spec.mix.print = 0.5;
        assert!(matches!(generate_domain(&spec, 10), Err(Error::Config(_))));
        spec.mix = AttackMix {
            bona_fide: 1.2,
            print: -0.2,
            replay: 0.0,
            imperceptible: 0.0,
        };
        assert!(generate_domain(&spec, 10).is_err());
        assert!(generate_domain(&DomainSpec::domain_a(1), 0).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let spec = DomainSpec::domain_a(5);
        let a = generate_domain(&spec, 40).unwrap();
        let b = generate_domain(&spec, 40).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.frames.len(), 8);
            for f in &s.frames {
                assert!(f.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn thread_count_does_not_matter() {
        let spec = DomainSpec::domain_b(3);
        let parallel = generate_domain(&spec, 30).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| generate_domain(&spec, 30).unwrap());
        assert_eq!(parallel, serial);
    }

    #[test]
    fn session_ids_carry_domain() {
        let s = generate_domain(&DomainSpec::domain_b(0), 3).unwrap();
        assert_eq!(s[2].id, "domain-b-000002");
        assert!(s.iter().all(|s| s.domain == "domain-b"));
    }
}
