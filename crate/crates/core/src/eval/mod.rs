//! Session scoring and biometric error rates.
//!
//! Scores follow the "higher means more likely spoof" convention of head 8;
//! a session is rejected as an attack when its aggregate score is at or above
//! the threshold.

mod protocol;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AttackType, Session};
use crate::error::{Error, Result};
use crate::model::{head_probabilities, ModelParams, OVERALL};

pub use protocol::{
    format_table, run_protocol, write_scores_csv, ProtocolResult, ScoreHistograms, TableRow,
    ThresholdPolicy,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Mean,
    Median,
    Max,
}

impl Aggregator {
    pub fn apply(self, scores: &[f64]) -> Result<f64> {
        if scores.is_empty() {
            return Err(Error::Input("cannot aggregate an empty score list".into()));
        }
        Ok(match self {
            Aggregator::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            Aggregator::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregator::Median => {
                let mut s = scores.to_vec();
                s.sort_by(f64::total_cmp);
                let n = s.len();
                if n % 2 == 1 {
                    s[n / 2]
                } else {
                    (s[n / 2 - 1] + s[n / 2]) / 2.0
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session_id: String,
    pub domain: String,
    pub attack_type: AttackType,
    /// Head-8 probability of every frame, in frame order.
    pub frame_scores: Vec<f64>,
    pub aggregate: f64,
    /// True for attacks.
    pub is_attack: bool,
}

impl SessionScore {
    /// A bare score record, for metric tests and external score files.
    pub fn from_aggregate(aggregate: f64, attack_type: AttackType) -> Self {
        Self {
            session_id: String::new(),
            domain: String::new(),
            attack_type,
            frame_scores: vec![aggregate],
            aggregate,
            is_attack: attack_type != AttackType::BonaFide,
        }
    }
}

/// Head-8 probability per frame at temperature 1, aggregated per session.
pub fn score_session(model: &ModelParams, session: &Session, aggregator: Aggregator) -> Result<SessionScore> {
    if session.frames.is_empty() {
        return Err(Error::Input(format!("session {} has no frames", session.id)));
    }
    let frame_scores = session
        .frames
        .iter()
        .map(|f| {
            let logits = model.forward(f.pixels())?.logits;
            Ok(head_probabilities(&logits, 1.0)?.data()[OVERALL])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SessionScore {
        session_id: session.id.clone(),
        domain: session.domain.clone(),
        attack_type: session.attack_type,
        aggregate: aggregator.apply(&frame_scores)?,
        frame_scores,
        is_attack: session.is_attack(),
    })
}

/// Score many sessions in parallel; output order matches input order.
pub fn score_sessions(
    model: &ModelParams,
    sessions: &[&Session],
    aggregator: Aggregator,
) -> Result<Vec<SessionScore>> {
    sessions
        .par_iter()
        .map(|s| score_session(model, s, aggregator))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub far: f64,
    pub frr: f64,
    /// `(far + frr) / 2`.
    pub hter: f64,
    pub threshold: f64,
}

struct ClassCounts {
    attacks: usize,
    bona_fide: usize,
}

fn class_counts(scores: &[SessionScore]) -> Result<ClassCounts> {
    let attacks = scores.iter().filter(|s| s.is_attack).count();
    let bona_fide = scores.len() - attacks;
    if attacks == 0 || bona_fide == 0 {
        return Err(Error::Protocol(format!(
            "need both classes, got {attacks} attacks and {bona_fide} bona fide"
        )));
    }
    Ok(ClassCounts { attacks, bona_fide })
}

/// Attacks accepted and bona fide sessions rejected at `threshold`.
fn error_counts(scores: &[SessionScore], threshold: f64) -> (usize, usize) {
    let accepted_attacks = scores
        .iter()
        .filter(|s| s.is_attack && s.aggregate < threshold)
        .count();
    let rejected_bona = scores
        .iter()
        .filter(|s| !s.is_attack && s.aggregate >= threshold)
        .count();
    (accepted_attacks, rejected_bona)
}

fn rates_at(scores: &[SessionScore], counts: &ClassCounts, threshold: f64) -> ErrorRates {
    let (accepted_attacks, rejected_bona) = error_counts(scores, threshold);
    let far = accepted_attacks as f64 / counts.attacks as f64;
    let frr = rejected_bona as f64 / counts.bona_fide as f64;
    ErrorRates {
        far,
        frr,
        hter: (far + frr) / 2.0,
        threshold,
    }
}

/// FAR, FRR and HTER at a fixed threshold.
pub fn error_rates(scores: &[SessionScore], threshold: f64) -> Result<ErrorRates> {
    let counts = class_counts(scores)?;
    Ok(rates_at(scores, &counts, threshold))
}

/// Candidate thresholds: 0, 1 and the midpoints between consecutive distinct
/// scores, ascending.
pub fn sweep_thresholds(scores: &[SessionScore]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.iter().map(|s| s.aggregate).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds: Vec<f64> = distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    thresholds.push(0.0);
    thresholds.push(1.0);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    /// `1 − FRR`.
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    /// `(FAR + FRR) / 2` at the chosen point.
    pub eer: f64,
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub roc: Vec<RocPoint>,
}

/// Sweep point minimising |FAR − FRR|, ties to the lower threshold. The gap
/// is compared on integer counts so exact ties stay ties.
pub fn eer_sweep(scores: &[SessionScore]) -> Result<EerResult> {
    let counts = class_counts(scores)?;
    let mut best: Option<(u128, ErrorRates)> = None;
    let mut roc = Vec::new();
    for t in sweep_thresholds(scores) {
        let r = rates_at(scores, &counts, t);
        roc.push(RocPoint {
            threshold: t,
            far: r.far,
            tpr: 1.0 - r.frr,
        });
        // |FAR − FRR| scaled by attacks × bona fide
        let (aa, rb) = error_counts(scores, t);
        let gap = (aa as i128 * counts.bona_fide as i128 - rb as i128 * counts.attacks as i128).unsigned_abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, r));
        }
    }
    let (_, best) = best.expect("sweep always has the 0 and 1 thresholds");
    Ok(EerResult {
        eer: best.hter,
        threshold: best.threshold,
        far: best.far,
        frr: best.frr,
        roc,
    })
}

/// Threshold minimising HTER over every distinct decision the scores allow.
/// Diagnostic only: it peeks at the evaluation labels.
pub fn oracle_threshold(scores: &[SessionScore]) -> Result<ErrorRates> {
    let counts = class_counts(scores)?;
    let max = scores.iter().map(|s| s.aggregate).fold(f64::NEG_INFINITY, f64::max);
    let mut candidates = sweep_thresholds(scores);
    candidates.push(max.next_up());
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // HTER scaled by 2 × attacks × bona fide; ties go to the lower threshold
    let mut best: Option<(usize, f64)> = None;
    for t in candidates {
        let (aa, rb) = error_counts(scores, t);
        let cost = aa * counts.bona_fide + rb * counts.attacks;
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, t));
        }
    }
    let (_, t) = best.expect("non-empty candidates");
    Ok(rates_at(scores, &counts, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcerReport {
    /// Worst per-type attack acceptance rate.
    pub apcer: f64,
    pub bpcer: f64,
    /// `(apcer + bpcer) / 2`.
    pub acer: f64,
    pub threshold: f64,
    pub per_type_apcer: Vec<(AttackType, f64)>,
}

/// APCER (max over attack types), BPCER and ACER at a fixed threshold.
pub fn acer(scores: &[SessionScore], threshold: f64) -> Result<AcerReport> {
    let counts = class_counts(scores)?;
    let mut types: Vec<AttackType> = scores
        .iter()
        .filter(|s| s.is_attack)
        .map(|s| s.attack_type)
        .collect();
    types.sort_by_key(|t| t.as_str());
    types.dedup();
    let per_type_apcer: Vec<(AttackType, f64)> = types
        .into_iter()
        .map(|ty| {
            let of_type = scores.iter().filter(|s| s.is_attack && s.attack_type == ty);
            let total = of_type.clone().count();
            let accepted = of_type.filter(|s| s.aggregate < threshold).count();
            (ty, accepted as f64 / total as f64)
        })
        .collect();
    let apcer = per_type_apcer.iter().map(|&(_, r)| r).fold(0.0, f64::max);
    let bpcer = rates_at(scores, &counts, threshold).frr;
    Ok(AcerReport {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        threshold,
        per_type_apcer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use AttackType::*;

    fn scores(bona: &[f64], attacks: &[f64]) -> Vec<SessionScore> {
        bona.iter()
            .map(|&s| SessionScore::from_aggregate(s, BonaFide))
            .chain(attacks.iter().map(|&s| SessionScore::from_aggregate(s, Replay)))
            .collect()
    }

    #[test]
    fn aggregators() {
        let s = [0.2, 0.4, 0.6];
        assert!((Aggregator::Mean.apply(&s).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(Aggregator::Median.apply(&s).unwrap(), 0.4);
        assert_eq!(Aggregator::Max.apply(&s).unwrap(), 0.6);
        assert_eq!(Aggregator::Median.apply(&[0.1, 0.3]).unwrap(), 0.2);
        for agg in [Aggregator::Mean, Aggregator::Median, Aggregator::Max] {
            assert_eq!(agg.apply(&[0.7]).unwrap(), 0.7);
            assert_eq!(agg.apply(&[0.6, 0.2, 0.4]).unwrap(), agg.apply(&s).unwrap());
        }
        assert!(Aggregator::Mean.apply(&[]).is_err());
    }

    #[test]
    fn separable_and_inverted() {
        let r = error_rates(&scores(&[0.1, 0.2], &[0.8, 0.9]), 0.5).unwrap();
        assert_eq!((r.far, r.frr, r.hter), (0.0, 0.0, 0.0));
        let r = error_rates(&scores(&[0.6], &[0.4]), 0.5).unwrap();
        assert_eq!((r.far, r.frr, r.hter), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_is_protocol_error() {
        assert!(matches!(error_rates(&scores(&[0.1], &[]), 0.5), Err(Error::Protocol(_))));
        assert!(eer_sweep(&scores(&[], &[0.3])).is_err());
        assert!(acer(&scores(&[], &[0.3]), 0.5).is_err());
    }

    #[test]
    fn eer_cases() {
        assert_eq!(eer_sweep(&scores(&[0.1, 0.2], &[0.8, 0.9])).unwrap().eer, 0.0);
        assert_eq!(eer_sweep(&scores(&[0.3, 0.7], &[0.3, 0.7])).unwrap().eer, 0.5);
        assert_eq!(eer_sweep(&scores(&[0.4], &[0.4])).unwrap().eer, 0.5);
        // bona {0.1,0.4}, attacks {0.3,0.6}: candidates 0, .2, .35, .5, 1
        // at .35: FAR 1/2, FRR 1/2 → EER .5; at .2: FAR 0, FRR 1/2; at .5: FAR 1/2, FRR 0
        let r = eer_sweep(&scores(&[0.1, 0.4], &[0.3, 0.6])).unwrap();
        assert_eq!(r.threshold, 0.35);
        assert_eq!(r.eer, 0.5);
        assert_eq!(r.roc.len(), 5);
    }

    #[test]
    fn acer_cases() {
        let r = acer(&scores(&[0.1, 0.2], &[0.8]), 0.0).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.0, 1.0, 0.5));

        // print: 1 of 2 accepted, replay: 0 of 1 → APCER = 0.5
        let mut s = scores(&[0.1, 0.6, 0.2], &[0.9]);
        s.push(SessionScore::from_aggregate(0.3, Print));
        s.push(SessionScore::from_aggregate(0.7, Print));
        let r = acer(&s, 0.5).unwrap();
        assert_eq!(r.apcer, 0.5);
        assert_eq!(r.bpcer, 1.0 / 3.0);
        assert_eq!(r.acer, (0.5 + 1.0 / 3.0) / 2.0);
        assert_eq!(r.per_type_apcer, vec![(Print, 0.5), (Replay, 0.0)]);
    }

    #[test]
    fn oracle_threshold_beats_any_fixed_threshold() {
        let s = scores(&[0.1, 0.45, 0.5, 1.0], &[0.3, 0.5, 0.9, 1.0]);
        let best = oracle_threshold(&s).unwrap();
        for t in [0.0, 0.2, 0.5, 0.75, 1.0, 2.0] {
            assert!(best.hter <= error_rates(&s, t).unwrap().hter);
        }
    }
}
