use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{MetricError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample (n − 1) standard deviation; absent for a single seed.
    pub std: Option<f64>,
}

impl MetricSummary {
    /// `46.76 ± 0.03` style: percent scale, two decimals.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{} ± {}", format_percent(self.mean), format_percent(s)),
            None => format_percent(self.mean),
        }
    }
}

pub fn format_percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<String>,
    pub per_seed: Vec<BTreeMap<String, f64>>,
    pub summary: BTreeMap<String, MetricSummary>,
}

/// Mean and sample standard deviation of every metric across seeds.
pub fn aggregate_seeds(seeds: &[String], reports: &[BTreeMap<String, f64>]) -> Result<EvalReport> {
    if reports.is_empty() || seeds.len() != reports.len() {
        return Err(MetricError::Schema(format!(
            "{} seed labels for {} reports",
            seeds.len(),
            reports.len()
        )));
    }
    let keys: Vec<&String> = reports[0].keys().collect();
    for (label, r) in seeds.iter().zip(reports) {
        if r.keys().collect::<Vec<_>>() != keys {
            let got: Vec<&str> = r.keys().map(String::as_str).collect();
            return Err(MetricError::Schema(format!("seed {label} has [{}]", got.join(", "))));
        }
    }
    let n = reports.len() as f64;
    let summary = keys
        .into_iter()
        .map(|k| {
            let xs: Vec<f64> = reports.iter().map(|r| r[k]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            // Deviations from the first seed keep constant inputs at exactly 0.
            let d: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
            let (s1, s2) = (d.iter().sum::<f64>(), d.iter().map(|v| v * v).sum::<f64>());
            let std = (reports.len() >= 2).then(|| ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0).sqrt());
            (k.clone(), MetricSummary { mean, std })
        })
        .collect();
    Ok(EvalReport {
        seeds: seeds.to_vec(),
        per_seed: reports.to_vec(),
        summary,
    })
}

impl EvalReport {
    /// `key = value` lines: the formatted aggregate first, then raw numbers.
    pub fn to_flat(&self) -> String {
        let mut out = String::new();
        writeln!(out, "seeds = {}", self.seeds.join(",")).unwrap();
        for (k, s) in &self.summary {
            writeln!(out, "{k} = {}", s.display()).unwrap();
        }
        for (k, s) in &self.summary {
            writeln!(out, "{k}.mean = {}", s.mean).unwrap();
            if let Some(std) = s.std {
                writeln!(out, "{k}.std = {std}").unwrap();
            }
        }
        for (label, scores) in self.seeds.iter().zip(&self.per_seed) {
            for (k, v) in scores {
                writeln!(out, "seed.{label}.{k} = {v}").unwrap();
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> BTreeMap<String, f64> {
        [("bleu4".to_string(), v)].into_iter().collect()
    }

    #[test]
    fn single_seed_has_no_std() {
        let r = aggregate_seeds(&["1".into()], &[one(0.5)]).unwrap();
        assert_eq!(r.summary["bleu4"].display(), "50.00");
        assert!(!r.to_flat().contains("bleu4.std"));
    }

    #[test]
    fn constant_seeds() {
        let labels: Vec<String> = (1..=3).map(|i| i.to_string()).collect();
        let r = aggregate_seeds(&labels, &[one(0.4), one(0.4), one(0.4)]).unwrap();
        assert_eq!(r.summary["bleu4"].std, Some(0.0));
        assert_eq!(r.summary["bleu4"].display(), "40.00 ± 0.00");
    }

    #[test]
    fn mismatched_keys_are_rejected() {
        let mut other = one(0.1);
        other.insert("rougeL".into(), 0.2);
        assert!(matches!(
            aggregate_seeds(&["a".into(), "b".into()], &[one(0.1), other]),
            Err(MetricError::Schema(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let r = aggregate_seeds(&["1".into(), "2".into()], &[one(0.25), one(0.5)]).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
