use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    acer, eer_sweep, error_rates, oracle_threshold, score_sessions, AcerReport, Aggregator,
    ErrorRates, SessionScore,
};
use crate::data::{split_of, Session, Split};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    #[serde(rename = "fixed-0.5")]
    Fixed05,
    EerOnCalib,
    /// Diagnostic: threshold picked on the evaluation labels.
    OracleBest,
}

impl ThresholdPolicy {
    pub const ALL: [ThresholdPolicy; 3] = [
        ThresholdPolicy::Fixed05,
        ThresholdPolicy::EerOnCalib,
        ThresholdPolicy::OracleBest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdPolicy::Fixed05 => "fixed-0.5",
            ThresholdPolicy::EerOnCalib => "eer-on-calib",
            ThresholdPolicy::OracleBest => "oracle-best",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown threshold policy {s:?}")))
    }
}

const HIST_BINS: usize = 10;

/// Per-class counts of aggregate scores in ten equal bins over [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub bona_fide: Vec<usize>,
    pub attack: Vec<usize>,
}

impl ScoreHistograms {
    fn of(scores: &[SessionScore]) -> Self {
        let mut h = Self {
            bona_fide: vec![0; HIST_BINS],
            attack: vec![0; HIST_BINS],
        };
        for s in scores {
            let bin = ((s.aggregate * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            if s.is_attack {
                h.attack[bin] += 1;
            } else {
                h.bona_fide[bin] += 1;
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub train_domain: String,
    pub eval_domain: String,
    pub policy: ThresholdPolicy,
    pub rates: ErrorRates,
    pub acer: AcerReport,
    /// EER of the evaluation scores and the threshold where it occurs.
    pub eer: f64,
    pub eer_threshold: f64,
    pub histograms: ScoreHistograms,
    pub n_bona_fide: usize,
    pub n_attack: usize,
    #[serde(skip)]
    pub scores: Vec<SessionScore>,
}

impl ProtocolResult {
    pub fn is_intra(&self) -> bool {
        self.train_domain == self.eval_domain
    }
}

fn domain_name(sessions: &[Session]) -> String {
    sessions
        .first()
        .map(|s| s.domain.clone())
        .unwrap_or_default()
}

/// Evaluate `model` on the test split of `eval_domain`, with the decision
/// threshold fixed by `policy`. `eer-on-calib` uses the calib split of
/// `train_domain`; the evaluation domain is never used for calibration except
/// by the diagnostic `oracle-best`.
pub fn run_protocol(
    model: &ModelParams,
    train_domain: &[Session],
    eval_domain: &[Session],
    policy: ThresholdPolicy,
    aggregator: Aggregator,
) -> Result<ProtocolResult> {
    let test = split_of(eval_domain, Split::Test);
    if test.is_empty() {
        return Err(Error::Protocol(format!(
            "domain {:?} has no test split",
            domain_name(eval_domain)
        )));
    }
    let scores = score_sessions(model, &test, aggregator)?;
    let rates = match policy {
        ThresholdPolicy::Fixed05 => error_rates(&scores, 0.5)?,
        ThresholdPolicy::EerOnCalib => {
            let calib = split_of(train_domain, Split::Calib);
            if calib.is_empty() {
                return Err(Error::Protocol(format!(
                    "domain {:?} has no calib split",
                    domain_name(train_domain)
                )));
            }
            let calib_scores = score_sessions(model, &calib, aggregator)?;
            error_rates(&scores, eer_sweep(&calib_scores)?.threshold)?
        }
        ThresholdPolicy::OracleBest => oracle_threshold(&scores)?,
    };
    let eer = eer_sweep(&scores)?;
    let n_attack = scores.iter().filter(|s| s.is_attack).count();
    Ok(ProtocolResult {
        train_domain: domain_name(train_domain),
        eval_domain: domain_name(eval_domain),
        policy,
        acer: acer(&scores, rates.threshold)?,
        rates,
        eer: eer.eer,
        eer_threshold: eer.threshold,
        histograms: ScoreHistograms::of(&scores),
        n_bona_fide: scores.len() - n_attack,
        n_attack,
        scores,
    })
}

/// `session_id,domain,label,aggregate,frame_scores` with frame scores joined by `;`.
pub fn write_scores_csv(scores: &[SessionScore], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "session_id,domain,label,aggregate,frame_scores").map_err(io)?;
    for s in scores {
        let frames: Vec<String> = s.frame_scores.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            s.session_id,
            s.domain,
            u8::from(s.is_attack),
            s.aggregate,
            frames.join(";")
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One row of a comparison table. Rates are fractions; printed as percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub protocol: String,
    pub hter: f64,
    pub acer: f64,
    pub eer: f64,
    /// Optional spread annotation, e.g. an IQR when rows aggregate seeds.
    #[serde(default)]
    pub note: String,
}

/// Aligned plain-text table with percentages to two decimals.
pub fn format_table(rows: &[TableRow]) -> String {
    let header = ["method", "protocol", "HTER%", "ACER%", "EER%"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            let pct = |v: f64| format!("{:.2}", 100.0 * v);
            let hter = if r.note.is_empty() {
                pct(r.hter)
            } else {
                format!("{} {}", pct(r.hter), r.note)
            };
            [r.method.clone(), r.protocol.clone(), hter, pct(r.acer), pct(r.eer)]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: [&str; 5]| {
        for (i, (c, w)) in row.iter().zip(widths).enumerate() {
            if i < 2 {
                out.push_str(&format!("{c:<w$}"));
            } else {
                out.push_str(&format!("{c:>w$}"));
            }
            out.push_str(if i == 4 { "\n" } else { "  " });
        }
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, [&rule[0], &rule[1], &rule[2], &rule[3], &rule[4]]);
    for row in &cells {
        line(&mut out, [&row[0], &row[1], &row[2], &row[3], &row[4]]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for p in ThresholdPolicy::ALL {
            assert_eq!(ThresholdPolicy::parse(p.as_str()).unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.as_str()));
        }
        assert!(ThresholdPolicy::parse("best").is_err());
    }

    #[test]
    fn table_shape() {
        let rows = vec![
            TableRow {
                method: "teacher-v1".into(),
                protocol: "domain-a→domain-b".into(),
                hter: 0.0354,
                acer: 0.04,
                eer: 0.031,
                note: String::new(),
            },
            TableRow {
                method: "teacher-v2".into(),
                protocol: "intra".into(),
                hter: 0.0074,
                acer: 0.01,
                eer: 0.0,
                note: String::new(),
            },
        ];
        let t = format_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("method"));
        assert!(lines[0].contains("HTER%") && lines[0].contains("ACER%") && lines[0].contains("EER%"));
        assert!(lines[2].contains("3.54") && lines[3].contains("0.74"));
    }
}
