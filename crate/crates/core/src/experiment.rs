//! The default two-domain benchmark: V1 and V2 teachers fine-tuned on
//! domain A, a student distilled from the V2 teacher, each scored intra-domain
//! (A test split) and cross-domain (B test split).

use serde::{Deserialize, Serialize};

use crate::data::{generate_domain, DomainSpec, Session};
use crate::error::Result;
use crate::eval::{run_protocol, Aggregator, ProtocolResult, ThresholdPolicy};
use crate::model::{init_student, init_teacher, ModelParams, STUDENT_FEATURE_DIM, TEACHER_FEATURE_DIM};
use crate::rng::RngStream;
use crate::train::{convergence_probe, distill, taft, ConvergenceReport, DistillRunConfig, RunRecord, TaftConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub sessions_per_domain: usize,
    pub taft: TaftConfig,
    pub distill: DistillRunConfig,
    pub policy: ThresholdPolicy,
    pub aggregator: Aggregator,
    /// Head-8 loss level used for the epochs-to-threshold statistic; both
    /// variants reach it within the default three epochs.
    pub convergence_threshold: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            sessions_per_domain: 2000,
            taft: TaftConfig::default(),
            distill: DistillRunConfig::default(),
            policy: ThresholdPolicy::EerOnCalib,
            aggregator: Aggregator::Mean,
            convergence_threshold: 0.37,
        }
    }
}

/// Source and target domains of one benchmark seed.
pub fn default_domains(seed: u64) -> (DomainSpec, DomainSpec) {
    (DomainSpec::domain_a(seed), DomainSpec::domain_b(seed.wrapping_add(1_000_003)))
}

#[derive(Clone, Debug)]
pub struct ModelOutcome {
    pub model: ModelParams,
    pub record: RunRecord,
    pub intra: ProtocolResult,
    pub cross: ProtocolResult,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub v1: ModelOutcome,
    pub v2: ModelOutcome,
    pub student: ModelOutcome,
    pub convergence: ConvergenceReport,
}

pub fn evaluate(
    model: &ModelParams,
    source: &[Session],
    target: &[Session],
    cfg: &BenchmarkConfig,
) -> Result<(ProtocolResult, ProtocolResult)> {
    Ok((
        run_protocol(model, source, source, cfg.policy, cfg.aggregator)?,
        run_protocol(model, source, target, cfg.policy, cfg.aggregator)?,
    ))
}

/// Run the full pipeline for one seed on freshly generated data.
pub fn run_seed(cfg: &BenchmarkConfig, seed: u64) -> Result<SeedOutcome> {
    let (spec_a, spec_b) = default_domains(seed);
    let source = generate_domain(&spec_a, cfg.sessions_per_domain)?;
    let target = generate_domain(&spec_b, cfg.sessions_per_domain)?;
    run_seed_on(cfg, seed, &source, &target)
}

pub fn run_seed_on(
    cfg: &BenchmarkConfig,
    seed: u64,
    source: &[Session],
    target: &[Session],
) -> Result<SeedOutcome> {
    let root = RngStream::new(seed, 0);
    let teacher_init = init_teacher(root.derive_named("teacher"), TEACHER_FEATURE_DIM)?;

    let train_variant = |variant: Variant| -> Result<ModelOutcome> {
        let taft_cfg = TaftConfig {
            head_mask: variant.head_mask(),
            seed,
            ..cfg.taft.clone()
        };
        let (model, record) = taft(source, &taft_cfg, teacher_init.clone())?;
        let (intra, cross) = evaluate(&model, source, target, cfg)?;
        Ok(ModelOutcome { model, record, intra, cross })
    };
    let v1 = train_variant(Variant::V1)?;
    let v2 = train_variant(Variant::V2)?;
    let convergence = convergence_probe(&v1.record, &v2.record, cfg.convergence_threshold)?;

    let student_init = init_student(root.derive_named("student"), STUDENT_FEATURE_DIM)?;
    let distill_cfg = DistillRunConfig {
        seed,
        ..cfg.distill.clone()
    };
    let (student, record) = distill(&v2.model, source, &distill_cfg, student_init)?;
    let (intra, cross) = evaluate(&student, source, target, cfg)?;
    Ok(SeedOutcome {
        seed,
        v1,
        v2,
        student: ModelOutcome {
            model: student,
            record,
            intra,
            cross,
        },
        convergence,
    })
}

/// Median of a non-empty sample (mean of the two middle values when even).
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
