//! Training objectives with analytic gradients w.r.t. logits.
//!
//! * [`reduced_focal`]: cross-entropy below a confidence cutoff, polynomially
//!   down-weighted above it.
//! * [`multihead_loss`]: weighted mean of reduced focal loss over active heads.
//! * [`distill_loss`] / [`soft_distill_loss`]: hard-label log-loss balanced
//!   against temperature-softened teacher targets, instantiated per sigmoid
//!   head over the outcomes {y, ¬y}.

use serde::{Deserialize, Serialize};

use crate::data::AttributeLabels;
use crate::error::{Error, Result};
use crate::model::{HeadMask, NUM_HEADS};
use crate::tensor::{sigmoid_scalar, Tensor};

const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RflConfig {
    pub gamma: f64,
    pub cutoff: f64,
}

impl Default for RflConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            cutoff: 0.5,
        }
    }
}

impl RflConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("rfl gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::Config(format!("rfl cutoff must be in (0,1], got {}", self.cutoff)));
        }
        Ok(())
    }
}

/// Per-head loss weights, default uniform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadWeights(pub [f64; NUM_HEADS]);

impl Default for HeadWeights {
    fn default() -> Self {
        HeadWeights([1.0; NUM_HEADS])
    }
}

impl HeadWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("head weights must be finite and >= 0: {:?}", self.0)));
        }
        if !self.0.iter().any(|&w| w > 0.0) {
            return Err(Error::Config("at least one head weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Which loss the hard-label part of the distillation objective uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SupervisedTerm {
    #[default]
    LogLoss,
    ReducedFocal(RflConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub tau: f64,
    /// Heads the objective averages over.
    pub heads: HeadMask,
    pub supervised: SupervisedTerm,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 2.0,
            heads: HeadMask::ALL,
            supervised: SupervisedTerm::LogLoss,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("distillation head mask is empty".into()));
        }
        if let SupervisedTerm::ReducedFocal(rfl) = self.supervised {
            rfl.validate()?;
        }
        Ok(())
    }
}

/// Reduced focal loss of probability `p` for binary label `y`, and its
/// derivative with respect to the logit that produced `p`.
pub fn reduced_focal(p: f64, y: bool, cfg: &RflConfig) -> (f64, f64) {
    let sign = if y { 1.0 } else { -1.0 };
    let pt_raw = if y { p } else { 1.0 - p };
    let pt = pt_raw.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let log_pt = pt.ln();
    if pt < cfg.cutoff {
        // d(-ln p_t)/dz = -sign·(1-p_t)
        (-log_pt, -sign * (1.0 - pt_raw))
    } else {
        let ratio = (1.0 - pt) / cfg.cutoff;
        let w = ratio.powf(cfg.gamma);
        let dw = if cfg.gamma == 0.0 {
            0.0
        } else {
            -cfg.gamma / cfg.cutoff * ratio.powf(cfg.gamma - 1.0)
        };
        // dL/dz = dL/dp_t · dp_t/dz with dp_t/dz = sign·p_t(1-p_t)
        let grad = sign * (1.0 - pt_raw) * (-pt_raw * dw * log_pt - w);
        (-w * log_pt, grad)
    }
}

fn check_logits(op: &'static str, logits: &Tensor) -> Result<()> {
    if logits.shape() != [NUM_HEADS] {
        return Err(Error::dim(op, logits.shape(), &[NUM_HEADS]));
    }
    Ok(())
}

/// Weighted mean of [`reduced_focal`] over the heads in `mask`. Heads outside
/// the mask contribute neither loss nor gradient.
pub fn multihead_loss(
    logits: &Tensor,
    labels: &AttributeLabels,
    mask: HeadMask,
    weights: &HeadWeights,
    cfg: &RflConfig,
) -> Result<(f64, Tensor)> {
    check_logits("multihead_loss", logits)?;
    if mask.is_empty() {
        return Err(Error::Config("multihead loss mask is empty".into()));
    }
    let total: f64 = mask.iter().map(|h| weights.0[h]).sum();
    if !(total > 0.0) {
        return Err(Error::Config("active heads carry zero total weight".into()));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[NUM_HEADS]);
    for h in mask.iter() {
        let p = sigmoid_scalar(logits.data()[h]);
        let (l, g) = reduced_focal(p, labels.get(h), cfg);
        loss += weights.0[h] * l;
        grad.data_mut()[h] = weights.0[h] * g / total;
    }
    Ok((loss / total, grad))
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Soft term for one head: cross-entropy of tempered student against tempered
/// teacher, and its derivative w.r.t. the student logit.
fn soft_term(student: f64, teacher: f64, tau: f64) -> (f64, f64) {
    let zs = student / tau;
    let pt = sigmoid_scalar(teacher / tau);
    let ps = sigmoid_scalar(zs);
    // -[pt ln ps + (1-pt) ln(1-ps)] with ln ps = -softplus(-zs), ln(1-ps) = -softplus(zs)
    let loss = pt * softplus(-zs) + (1.0 - pt) * softplus(zs);
    (loss, (ps - pt) / tau)
}

fn supervised_term(student: f64, y: bool, term: &SupervisedTerm) -> (f64, f64) {
    match term {
        SupervisedTerm::LogLoss => {
            let loss = if y { softplus(-student) } else { softplus(student) };
            (loss, sigmoid_scalar(student) - if y { 1.0 } else { 0.0 })
        }
        SupervisedTerm::ReducedFocal(rfl) => reduced_focal(sigmoid_scalar(student), y, rfl),
    }
}

/// Distillation objective for one labeled sample, averaged over `cfg.heads`.
///
/// `hard_label` may be `None` only when `alpha == 1`; samples drawn from the
/// unlabeled pool go through [`soft_distill_loss`] instead.
pub fn distill_loss(
    student: &Tensor,
    teacher: &Tensor,
    hard_label: Option<&AttributeLabels>,
    cfg: &DistillConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    check_logits("distill_loss(student)", student)?;
    check_logits("distill_loss(teacher)", teacher)?;
    if cfg.alpha < 1.0 && hard_label.is_none() {
        return Err(Error::Input(format!(
            "distillation with alpha {} < 1 needs a hard label",
            cfg.alpha
        )));
    }
    let n = cfg.heads.count() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[NUM_HEADS]);
    for h in cfg.heads.iter() {
        let (s, t) = (student.data()[h], teacher.data()[h]);
        let (soft, dsoft) = soft_term(s, t, cfg.tau);
        let mut l = cfg.alpha * soft;
        let mut g = cfg.alpha * dsoft;
        if let (Some(labels), true) = (hard_label, cfg.alpha < 1.0) {
            let (sup, dsup) = supervised_term(s, labels.get(h), &cfg.supervised);
            l += (1.0 - cfg.alpha) * sup;
            g += (1.0 - cfg.alpha) * dsup;
        }
        loss += l;
        grad.data_mut()[h] = g / n;
    }
    Ok((loss / n, grad))
}

/// Distillation objective for a sample without a label: only the
/// `alpha`-weighted soft term.
pub fn soft_distill_loss(
    student: &Tensor,
    teacher: &Tensor,
    cfg: &DistillConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    check_logits("soft_distill_loss(student)", student)?;
    check_logits("soft_distill_loss(teacher)", teacher)?;
    let n = cfg.heads.count() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[NUM_HEADS]);
    for h in cfg.heads.iter() {
        let (soft, dsoft) = soft_term(student.data()[h], teacher.data()[h], cfg.tau);
        loss += cfg.alpha * soft;
        grad.data_mut()[h] = cfg.alpha * dsoft / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference_scalar, relative_error};
    use crate::model::OVERALL;
    use proptest::prelude::*;

    fn labels(bits: [u8; 8]) -> AttributeLabels {
        AttributeLabels::new(bits).unwrap()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let (l, _) = reduced_focal(1.0 - 1e-7, true, &RflConfig::default());
        assert!(l < 1e-12);
        let (l, _) = reduced_focal(1e-7, false, &RflConfig::default());
        assert!(l < 1e-12);
    }

    #[test]
    fn below_cutoff_is_cross_entropy() {
        let (l, _) = reduced_focal(0.3, true, &RflConfig::default());
        assert!((l + 0.3f64.ln()).abs() < 1e-15);
        let (l, _) = reduced_focal(0.7, false, &RflConfig::default());
        assert!((l + 0.3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn above_cutoff_is_down_weighted() {
        let (l, _) = reduced_focal(0.75, true, &RflConfig::default());
        assert!((l - 0.071_920_518_112_945_23).abs() < 1e-12);
    }

    #[test]
    fn gradient_tracks_logit_through_saturation() {
        // badly wrong and saturated: gradient must still push the right way
        let p = sigmoid_scalar(-60.0);
        let (_, g) = reduced_focal(p, true, &RflConfig::default());
        assert!((g + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rfl_config_validation() {
        assert!(RflConfig { gamma: -1.0, cutoff: 0.5 }.validate().is_err());
        assert!(RflConfig { gamma: 2.0, cutoff: 0.0 }.validate().is_err());
        assert!(RflConfig { gamma: 2.0, cutoff: 1.5 }.validate().is_err());
        assert!(RflConfig { gamma: 0.0, cutoff: 1.0 }.validate().is_ok());
        assert!(HeadWeights([0.0; 8]).validate().is_err());
    }

    #[test]
    fn single_head_mask_reduces_to_head_eight() {
        let logits = Tensor::vector(vec![0.3, -1.0, 2.0, 0.1, -0.4, 0.9, -2.2, 1.3]);
        let lab = labels([0, 1, 0, 0, 0, 0, 0, 1]);
        let cfg = RflConfig::default();
        let (l, g) =
            multihead_loss(&logits, &lab, HeadMask::OVERALL_ONLY, &HeadWeights::default(), &cfg)
                .unwrap();
        let (l8, g8) = reduced_focal(sigmoid_scalar(1.3), true, &cfg);
        assert_eq!(l, l8);
        assert_eq!(g.data()[OVERALL], g8);
        assert!(g.data()[..7].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multihead_matches_sum_of_singles() {
        let logits = Tensor::vector(vec![0.3, -1.0, 2.0, 0.1, -0.4, 0.9, -2.2, 1.3]);
        let lab = labels([1, 1, 0, 0, 0, 0, 0, 1]);
        let w = HeadWeights([1.0, 2.0, 0.5, 1.0, 1.0, 3.0, 1.0, 1.0]);
        let cfg = RflConfig::default();
        let (l, _) = multihead_loss(&logits, &lab, HeadMask::ALL, &w, &cfg).unwrap();
        let mut num = 0.0;
        for h in 0..8 {
            let p = 1.0 / (1.0 + (-logits.data()[h]).exp());
            let pt: f64 = if lab.get(h) { p } else { 1.0 - p };
            let single = if pt < 0.5 { -pt.ln() } else { -((1.0 - pt) / 0.5).powi(2) * pt.ln() };
            num += w.0[h] * single;
        }
        assert!((l - num / w.0.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        let lab = labels([0; 8]);
        let r = multihead_loss(
            &Tensor::zeros(&[8]),
            &lab,
            HeadMask::from_bits(0),
            &HeadWeights::default(),
            &RflConfig::default(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn distill_examples() {
        let lab = labels([0, 0, 0, 0, 0, 0, 1, 1]);
        // α=0, near-perfect supervised fit
        let cfg = DistillConfig { alpha: 0.0, tau: 1.0, ..Default::default() };
        let s = Tensor::vector(vec![-60.0, -60.0, -60.0, -60.0, -60.0, -60.0, 60.0, 60.0]);
        let (l, _) = distill_loss(&s, &Tensor::zeros(&[8]), Some(&lab), &cfg).unwrap();
        assert!(l < 1e-20);

        // α=1, τ=1, zero logits → ln 2
        let cfg = DistillConfig { alpha: 1.0, tau: 1.0, ..Default::default() };
        let (l, g) = distill_loss(&Tensor::zeros(&[8]), &Tensor::zeros(&[8]), None, &cfg).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.data().iter().all(|&v| v == 0.0));

        // α=0.5, τ=2, teacher 2, student 1, label 1 (values frozen from a
        // direct evaluation of the closed form)
        let cfg = DistillConfig { alpha: 0.5, tau: 2.0, ..Default::default() };
        let (l, g) = distill_loss(
            &Tensor::filled(&[8], 1.0),
            &Tensor::filled(&[8], 2.0),
            Some(&labels([1, 1, 1, 1, 1, 1, 0, 1])),
            &DistillConfig { heads: HeadMask::OVERALL_ONLY, ..cfg },
        )
        .unwrap();
        assert!((l - 0.460_904_691_191_663_55).abs() < 1e-12);
        assert!((g.data()[OVERALL] + 0.161_620_522_542_035_13).abs() < 1e-12);
    }

    #[test]
    fn missing_label_with_supervision_rejected() {
        let cfg = DistillConfig { alpha: 0.7, ..Default::default() };
        let r = distill_loss(&Tensor::zeros(&[8]), &Tensor::zeros(&[8]), None, &cfg);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn distill_config_validation() {
        assert!(DistillConfig { alpha: 1.2, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { heads: HeadMask::from_bits(0), ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn soft_only_matches_alpha_one() {
        let s = Tensor::vector(vec![0.3, -1.0, 2.0, 0.1, -0.4, 0.9, -2.2, 1.3]);
        let t = Tensor::vector(vec![1.0, -0.5, 0.0, 2.0, 0.4, -0.9, 1.2, 0.3]);
        let cfg = DistillConfig { alpha: 1.0, tau: 3.0, ..Default::default() };
        let (a, ga) = soft_distill_loss(&s, &t, &cfg).unwrap();
        let (b, gb) = distill_loss(&s, &t, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    proptest! {
        #[test]
        fn gamma_zero_cutoff_one_is_bce(p in 1e-6f64..(1.0 - 1e-6), y: bool) {
            let (l, g) = reduced_focal(p, y, &RflConfig { gamma: 0.0, cutoff: 1.0 });
            let bce = if y { -p.ln() } else { -(1.0 - p).ln() };
            prop_assert!((l - bce).abs() <= 1e-12 * bce.max(1.0));
            let dz = p - if y { 1.0 } else { 0.0 };
            prop_assert!((g - dz).abs() < 1e-12);
        }

        #[test]
        fn rfl_gradient_matches_finite_difference(z in -8.0f64..8.0, y: bool, gamma in 0.0f64..4.0, cutoff in 0.1f64..1.0) {
            let cfg = RflConfig { gamma, cutoff };
            let pt = |z: f64| if y { sigmoid_scalar(z) } else { 1.0 - sigmoid_scalar(z) };
            // skip the kink at p_t == cutoff
            prop_assume!((pt(z) - cutoff).abs() > 1e-3);
            let (_, g) = reduced_focal(sigmoid_scalar(z), y, &cfg);
            let fd = central_difference_scalar(z, 1e-5, |z| reduced_focal(sigmoid_scalar(z), y, &cfg).0);
            prop_assert!(relative_error(g, fd) <= 1e-4, "{} vs {}", g, fd);
        }

        #[test]
        fn masked_heads_do_not_matter(noise in proptest::collection::vec(-50.0f64..50.0, 7)) {
            let lab = labels([0, 0, 0, 0, 0, 0, 1, 1]);
            let base = Tensor::vector(vec![0.5; 8]);
            let mut other = base.clone();
            other.data_mut()[..7].copy_from_slice(&noise);
            let cfg = RflConfig::default();
            let a = multihead_loss(&base, &lab, HeadMask::OVERALL_ONLY, &HeadWeights::default(), &cfg).unwrap();
            let b = multihead_loss(&other, &lab, HeadMask::OVERALL_ONLY, &HeadWeights::default(), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
