//! Attack and evaluation harness: PGD on the OOD score, detection metrics,
//! corruption evaluation and post-hoc baselines.

mod attack;
mod metrics;
mod scorers;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use attack::{pgd_on_score, AttackConfig, AttackNorm, AttackOutcome};
pub use metrics::{aupr, auroc, fpr95, Metrics};
pub use scorers::{MdScorer, MspScorer, PooledGaussian, Scorer, ScorerKind};

use crate::datahub::{corrupt, CorruptionSpec, Dataset};
use crate::error::{ArosError, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
    pub metrics: Metrics,
}

impl ScoreSet {
    pub fn new(id: Vec<f64>, ood: Vec<f64>) -> Result<Self> {
        let metrics = Metrics::compute(&id, &ood)?;
        Ok(Self { id, ood, metrics })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub spec: CorruptionSpec,
    pub scores: ScoreSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: ScorerKind,
    pub seed: u64,
    pub clean: ScoreSet,
    pub attack: Option<AttackConfig>,
    pub attacked: Option<ScoreSet>,
    pub corrupted: Vec<CorruptionResult>,
    /// Kept out of the serialized report so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// One flat metric row of the CSV report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scorer: String,
    pub attack: String,
    pub epsilon: f64,
    pub norm: String,
    pub metric: String,
    pub value: f64,
}

fn push_metrics(rows: &mut Vec<MetricRow>, scorer: &str, attack: &str, epsilon: f64, norm: &str, m: &Metrics) {
    for (name, value) in [("auroc", m.auroc), ("aupr", m.aupr), ("fpr95", m.fpr95)] {
        rows.push(MetricRow {
            scorer: scorer.to_string(),
            attack: attack.to_string(),
            epsilon,
            norm: norm.to_string(),
            metric: name.to_string(),
            value,
        });
    }
}

impl EvalReport {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.metric_rows_as(&self.scorer.to_string())
    }

    /// Same as [`EvalReport::metric_rows`] under a custom scorer label.
    pub fn metric_rows_as(&self, label: &str) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        push_metrics(&mut rows, label, "clean", 0.0, "none", &self.clean.metrics);
        if let (Some(cfg), Some(att)) = (&self.attack, &self.attacked) {
            push_metrics(
                &mut rows,
                label,
                "pgd",
                cfg.epsilon,
                &cfg.norm.to_string(),
                &att.metrics,
            );
        }
        for c in &self.corrupted {
            push_metrics(&mut rows, label, &c.spec.label(), 0.0, "none", &c.scores.metrics);
        }
        rows
    }
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| ArosError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| ArosError::io(path, e))?;
    Ok(())
}

/// Clean metrics, then (optionally) metrics after attacking both sets with
/// the proper sign, then metrics under each corruption.
pub fn evaluate(
    scorer: &dyn Scorer,
    id_test: &Dataset,
    ood_test: &Dataset,
    attack: Option<&AttackConfig>,
    corruptions: &[CorruptionSpec],
    seed: u64,
) -> Result<EvalReport> {
    let started = Instant::now();
    let clean = ScoreSet::new(scorer.scores(&id_test.inputs)?, scorer.scores(&ood_test.inputs)?)?;
    let attacked = match attack {
        Some(cfg) => {
            let id = pgd_on_score(
                scorer,
                &id_test.inputs,
                &vec![true; id_test.len()],
                cfg,
                derive_seed(seed, "redteam.attack.id", 0),
            )?;
            let ood = pgd_on_score(
                scorer,
                &ood_test.inputs,
                &vec![false; ood_test.len()],
                cfg,
                derive_seed(seed, "redteam.attack.ood", 0),
            )?;
            Some(ScoreSet::new(id.scores, ood.scores)?)
        }
        None => None,
    };
    let corrupted = corruptions
        .iter()
        .enumerate()
        .map(|(k, &spec)| {
            let id = corrupt(id_test, spec, derive_seed(seed, "redteam.corrupt.id", k as u64))?;
            let ood = corrupt(ood_test, spec, derive_seed(seed, "redteam.corrupt.ood", k as u64))?;
            Ok(CorruptionResult {
                spec,
                scores: ScoreSet::new(scorer.scores(&id.inputs)?, scorer.scores(&ood.inputs)?)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        scorer: scorer.kind(),
        seed,
        clean,
        attack: attack.cloned(),
        attacked,
        corrupted,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
