use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the `n_ptb` similarities measured at one step are reduced before the
/// threshold test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Crossing as soon as any sample falls below the threshold.
    Min,
    /// Crossing only when every sample falls below the threshold.
    Max,
}

impl Aggregation {
    pub fn reduce(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Parameters of an audit run. Serialized as JSON; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub delta_p: f64,
    pub tau: f64,
    pub n_ptb: u32,
    pub max_steps: u32,
    pub guidance_main: f64,
    pub guidance_low: f64,
    pub steps_t: u32,
    pub diversity_n: u32,
    pub fairness_k: u32,
    pub base_seed: u64,
    pub trigger_rate: f64,
    pub aggregation: Aggregation,
    /// Run local sweeps on every prompt, not just the step-1 unreliable ones.
    pub sweep_all_local: bool,
    pub clamp_eps: f64,
    pub grid_points: usize,
    /// Extra attempts per backend call before a prompt is marked failed.
    pub max_retries: u32,
    /// A trigger candidate counts as provenance evidence only if both its
    /// scores are at most this fraction of the runner-up's.
    pub evidence_ratio: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            delta_p: 0.05,
            tau: 0.9,
            n_ptb: 3,
            max_steps: 40,
            guidance_main: 7.5,
            guidance_low: 1.5,
            steps_t: 50,
            diversity_n: 10,
            fairness_k: 5,
            base_seed: 0,
            trigger_rate: 0.10,
            aggregation: Aggregation::Mean,
            sweep_all_local: false,
            clamp_eps: 1e-6,
            grid_points: 512,
            max_retries: 2,
            evidence_ratio: 0.5,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.delta_p > 0.0 && self.delta_p <= 1.0) {
            problems.push(format!("delta_p must be in (0, 1], got {}", self.delta_p));
        }
        // tau = -1 is accepted so that a never-crossing sweep can be configured.
        if !(self.tau >= -1.0 && self.tau < 1.0) {
            problems.push(format!("tau must be in [-1, 1), got {}", self.tau));
        }
        if self.n_ptb == 0 {
            problems.push("n_ptb must be >= 1".into());
        }
        if self.max_steps == 0 {
            problems.push("max_steps must be >= 1".into());
        }
        if !(self.guidance_main >= 0.0 && self.guidance_low >= 0.0) {
            problems.push("guidance values must be >= 0".into());
        }
        if self.steps_t == 0 {
            problems.push("steps_t must be >= 1".into());
        }
        if self.diversity_n < 2 {
            problems.push("diversity_n must be >= 2".into());
        }
        if self.fairness_k == 0 {
            problems.push("fairness_k must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.trigger_rate) {
            problems.push(format!("trigger_rate must be in [0, 1], got {}", self.trigger_rate));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 1e-3) {
            problems.push(format!("clamp_eps must be in (0, 1e-3], got {}", self.clamp_eps));
        }
        if !(self.evidence_ratio > 0.0 && self.evidence_ratio <= 1.0) {
            problems.push(format!("evidence_ratio must be in (0, 1], got {}", self.evidence_ratio));
        }
        if self.grid_points < 2 {
            problems.push("grid_points must be >= 2".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Largest perturbation a sweep can reach for a given standard deviation.
    pub fn phi_max(&self, sigma: f64) -> f64 {
        self.max_steps as f64 * self.delta_p * sigma
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.display().to_string(),
                line: j.line(),
                msg: j.to_string(),
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid() {
        let c = AuditConfig::default();
        c.validate().unwrap();
        assert_eq!(c.delta_p, 0.05);
        assert_eq!(c.tau, 0.9);
        assert_eq!(c.trigger_rate, 0.10);
        assert_eq!(c.steps_t, 50);
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = AuditConfig::from_json(r#"{"delta_p": 0.1, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = AuditConfig::from_json(r#"{"tau": 0.8, "aggregation": "min"}"#).unwrap();
        assert_eq!(c.tau, 0.8);
        assert_eq!(c.aggregation, Aggregation::Min);
        assert_eq!(c.n_ptb, 3);
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"delta_p": 0}"#,
            r#"{"delta_p": 1.5}"#,
            r#"{"tau": 1.0}"#,
            r#"{"n_ptb": 0}"#,
            r#"{"diversity_n": 1}"#,
            r#"{"trigger_rate": 1.2}"#,
            r#"{"clamp_eps": 0.01}"#,
            r#"{"evidence_ratio": 0}"#,
        ] {
            assert!(AuditConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn aggregation_reductions() {
        let v = [0.2, 0.8, 0.5];
        assert!((Aggregation::Mean.reduce(&v) - 0.5).abs() < 1e-15);
        assert_eq!(Aggregation::Min.reduce(&v), 0.2);
        assert_eq!(Aggregation::Max.reduce(&v), 0.8);
    }

    proptest! {
        #[test]
        fn json_round_trip_is_exact(
            delta_p in 1e-6f64..=1.0,
            tau in -1.0f64..0.999,
            n_ptb in 1u32..10,
            guidance_main in 0.0f64..30.0,
            guidance_low in 0.0f64..5.0,
            base_seed in any::<u64>(),
            trigger_rate in 0.0f64..=1.0,
            clamp_eps in 1e-9f64..1e-3,
        ) {
            let cfg = AuditConfig {
                delta_p, tau, n_ptb, guidance_main, guidance_low, base_seed, trigger_rate, clamp_eps,
                ..AuditConfig::default()
            };
            let back = AuditConfig::from_json(&cfg.to_json()).unwrap();
            prop_assert_eq!(back.delta_p.to_bits(), cfg.delta_p.to_bits());
            prop_assert_eq!(back.clamp_eps.to_bits(), cfg.clamp_eps.to_bits());
            prop_assert_eq!(back, cfg);
        }
    }
}
