//! Experiment configuration, read from TOML.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::eval::{Aggregator, ThresholdPolicy};
use crate::experiment::default_domains;
use crate::train::{DistillRunConfig, TaftConfig};

pub const SEED_ENV: &str = "SPOOFBENCH_SEED";

/// A domain either copies a built-in template or spells out a full spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub sessions: usize,
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub spec: Option<DomainSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub name: String,
    pub train: String,
    pub eval: String,
    #[serde(default = "default_policies")]
    pub policies: Vec<ThresholdPolicy>,
}

fn default_policies() -> Vec<ThresholdPolicy> {
    ThresholdPolicy::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub aggregator: Aggregator,
    pub domains: Vec<DomainEntry>,
    pub taft: TaftConfig,
    pub distill: DistillRunConfig,
    pub protocols: Vec<ProtocolSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let domain = |name: &str| DomainEntry {
            name: name.into(),
            sessions: 2000,
            template: Some(name.into()),
            spec: None,
        };
        let protocol = |name: &str, eval: &str| ProtocolSpec {
            name: name.into(),
            train: "domain-a".into(),
            eval: eval.into(),
            policies: default_policies(),
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            aggregator: Aggregator::Mean,
            domains: vec![domain("domain-a"), domain("domain-b")],
            taft: TaftConfig::default(),
            distill: DistillRunConfig::default(),
            protocols: vec![protocol("intra", "domain-a"), protocol("cross", "domain-b")],
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path`, or the built-in desk-scale defaults when `None`. The
    /// `SPOOFBENCH_SEED` environment variable overrides the file's seed.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("domain {:?} defined twice", d.name)));
            }
            if d.sessions == 0 {
                return Err(Error::Config(format!("domain {:?} has zero sessions", d.name)));
            }
            match (&d.template, &d.spec) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(Error::Config(format!(
                        "domain {:?} needs exactly one of `template` or `spec`",
                        d.name
                    )))
                }
                (Some(t), None) if t != "domain-a" && t != "domain-b" => {
                    return Err(Error::Config(format!("unknown domain template {t:?}")))
                }
                (None, Some(spec)) => spec.validate()?,
                _ => {}
            }
        }
        for p in &self.protocols {
            for d in [&p.train, &p.eval] {
                if !names.contains(d.as_str()) {
                    return Err(Error::Config(format!(
                        "protocol {:?} references undefined domain {d:?}",
                        p.name
                    )));
                }
            }
            if p.policies.is_empty() {
                return Err(Error::Config(format!("protocol {:?} lists no policies", p.name)));
            }
        }
        self.taft.validate()?;
        self.distill.validate()
    }

    pub fn domain(&self, name: &str) -> Result<&DomainEntry> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("no domain named {name:?}")))
    }

    /// Resolved generator spec for a domain under the global seed.
    pub fn domain_spec(&self, name: &str) -> Result<DomainSpec> {
        let entry = self.domain(name)?;
        let mut spec = match (&entry.template, &entry.spec) {
            (_, Some(spec)) => spec.clone(),
            (Some(t), None) => {
                let (a, b) = default_domains(self.seed);
                if t == "domain-a" {
                    a
                } else {
                    b
                }
            }
            (None, None) => unreachable!("validated"),
        };
        spec.name = entry.name.clone();
        Ok(spec)
    }

    pub fn protocol(&self, name: &str) -> Result<&ProtocolSpec> {
        self.protocols
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("no protocol named {name:?}")))
    }
}
