//! Per-sample certification records and their JSON-lines wire format.

use serde::{Deserialize, Serialize};

use crate::bounds::InputRegion;
use crate::data::Dataset;
use crate::error::Result;
use crate::nn::Network;
use crate::verify_crown::{verify_crown, CrownConfig};
use crate::verify_ibp::{verify_ibp, IbpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ibp,
    Crown,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ibp" => Ok(Method::Ibp),
            "crown" => Ok(Method::Crown),
            other => Err(format!("unknown method '{other}' (expected ibp or crown)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetRecord {
    pub k: usize,
    pub bound: f64,
    pub verified: bool,
}

/// α/β/η witness for one target, emitted on demand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessRecord {
    pub k: usize,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
}

/// One JSON line of a batch verification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub y: usize,
    pub predicted: usize,
    pub overall_verified: bool,
    pub method: Method,
    pub per_target: Vec<TargetRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witnesses: Option<Vec<WitnessRecord>>,
}

/// Verification settings shared by the CLI and the batch helpers.
#[derive(Debug, Clone, Default)]
pub struct VerifySettings {
    pub ibp: IbpConfig,
    pub crown: CrownConfig,
    pub with_witness: bool,
    /// Intersect the perturbation ball with the unit box (image data).
    pub clip_unit: bool,
}

/// Certify one sample and assemble its report line.
pub fn verify_sample(
    net: &Network,
    index: usize,
    x: &[f64],
    y: usize,
    eps: f64,
    method: Method,
    settings: &VerifySettings,
) -> Result<SampleRecord> {
    let mut region = InputRegion::uniform(x.to_vec(), eps)?;
    if settings.clip_unit {
        region = region.clamped(0.0, 1.0);
    }
    let predicted = net.predict(x)?;
    let (cert, witnesses) = match method {
        Method::Ibp => (verify_ibp(net, &region, y, &settings.ibp)?, None),
        Method::Crown => {
            let (cert, w) = verify_crown(net, &region, y, &settings.crown)?;
            let witnesses = if settings.with_witness {
                Some(
                    cert.targets
                        .iter()
                        .zip(&w)
                        .map(|(t, wit)| WitnessRecord {
                            k: t.target,
                            alpha: wit.alpha.clone(),
                            beta: wit.beta.clone(),
                            eta: wit.eta.clone(),
                        })
                        .collect(),
                )
            } else {
                None
            };
            (cert, witnesses)
        }
    };
    Ok(SampleRecord {
        index,
        y,
        predicted,
        overall_verified: cert.overall_verified,
        method,
        per_target: cert
            .targets
            .iter()
            .map(|t| TargetRecord {
                k: t.target,
                bound: t.bound,
                verified: t.verified,
            })
            .collect(),
        witnesses,
    })
}

/// Sequential batch verification in dataset order.
pub fn verify_dataset(
    net: &Network,
    data: &Dataset,
    eps: f64,
    method: Method,
    settings: &VerifySettings,
) -> Result<Vec<SampleRecord>> {
    data.inputs
        .iter()
        .zip(&data.labels)
        .enumerate()
        .map(|(i, (x, &y))| verify_sample(net, i, x, y, eps, method, settings))
        .collect()
}

pub fn records_to_jsonl(records: &[SampleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialization cannot fail"));
        out.push('\n');
    }
    out
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<SampleRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

/// Aggregate statistics of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub samples: usize,
    pub standard_accuracy: f64,
    pub robust_verified_accuracy: f64,
}

pub fn summarize(records: &[SampleRecord]) -> Summary {
    let n = records.len().max(1);
    let std_hits = records.iter().filter(|r| r.predicted == r.y).count();
    let verified = records.iter().filter(|r| r.overall_verified).count();
    Summary {
        samples: records.len(),
        standard_accuracy: std_hits as f64 / n as f64,
        robust_verified_accuracy: verified as f64 / n as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{random_net, seeded_rng};

    #[test]
    fn jsonl_round_trip() {
        let mut rng = seeded_rng(5);
        let net = random_net(&mut rng, 2, &[4], 2, 1, 1.0);
        let data = crate::data::Dataset::new(
            vec![vec![0.1, 0.2], vec![-0.3, 0.4]],
            vec![1, 2],
            2,
        )
        .unwrap();
        let settings = VerifySettings::default();
        let records = verify_dataset(&net, &data, 0.05, Method::Ibp, &settings).unwrap();
        let text = records_to_jsonl(&records);
        assert_eq!(text.lines().count(), 2);
        let back = records_from_jsonl(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].index, 0);
        assert_eq!(back[0].per_target.len(), 1);
        // summary consistency: robust accuracy equals the mean of flags
        let s = summarize(&records);
        let mean = records.iter().filter(|r| r.overall_verified).count() as f64 / 2.0;
        assert_eq!(s.robust_verified_accuracy, mean);
    }

    #[test]
    fn crown_witness_emitted_on_demand() {
        let mut rng = seeded_rng(6);
        let net = random_net(&mut rng, 2, &[3], 2, 1, 1.0);
        let settings = VerifySettings {
            with_witness: true,
            ..VerifySettings::default()
        };
        let rec =
            verify_sample(&net, 0, &[0.1, -0.1], 1, 0.05, Method::Crown, &settings).unwrap();
        let w = rec.witnesses.as_ref().unwrap();
        assert_eq!(w.len(), rec.per_target.len());
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"method\":\"crown\""));
        assert!(line.contains("\"witnesses\""));
    }
}
