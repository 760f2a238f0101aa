use std::fmt::Debug;
use std::path::Path;

use aros_core::checkpoint::{ArtifactKind, Checkpoint};
use aros_core::config::RunConfig;
use aros_core::lyapcheck::Dominance;
use aros_core::oodforge::verify_fakes;
use aros_core::pipeline::{
    craft_ood, load_data, train_classifier, train_detector, verify_stability, AblationId, CraftReport, Crafted,
    DetectorVariant, FakeSource, Pipeline, StabilityCheck,
};
use aros_core::pretrain::{encode, Classifier};
use aros_core::redteam::{evaluate, EvalReport, MdScorer, Metrics, MspScorer, PooledGaussian, Scorer, ScorerKind};
use aros_core::stabnet::{ArosModel, HeadMode, StabEpochLog};
use aros_core::{ArosError, Result};
use serde::{Deserialize, Serialize};

use crate::report::{write_csv, write_json, Report};

/// File names inside the output directory.
pub mod files {
    pub const CLASSIFIER: &str = "classifier.ckpt.json";
    pub const CLASSIFIER_CURVE: &str = "classifier_curve.csv";
    pub const EMBEDDINGS: &str = "embeddings.ckpt.json";
    pub const CRAFT_JSON: &str = "craft_ood.json";
    pub const CRAFT_CSV: &str = "craft_ood.csv";
    pub const MODEL: &str = "model.ckpt.json";
    pub const AROS_JSON: &str = "train_aros.json";
    pub const AROS_CURVE: &str = "aros_curve.csv";
    pub const EVAL_JSON: &str = "evaluate.json";
    pub const EVAL_CSV: &str = "evaluate.csv";
    pub const STABILITY_JSON: &str = "stability.json";
    pub const STABILITY_CSV: &str = "stability.csv";
    pub const SWEEP_JSON: &str = "sweep_epsilon.json";
    pub const SWEEP_CSV: &str = "sweep_epsilon.csv";
    pub const ABLATION_JSON: &str = "ablation.json";
    pub const ABLATION_CSV: &str = "ablation.csv";
    pub const ABLATION_TABLE: &str = "ablation.md";
}

/// Mahalanobis ridge for the MD baseline.
const MD_RIDGE: f64 = 1e-6;

fn same<T: PartialEq + Debug>(path: &Path, what: &str, stored: &T, current: &T) -> Result<()> {
    if stored == current {
        Ok(())
    } else {
        Err(ArosError::Compatibility(format!(
            "{} was produced with a different {what}; rerun the upstream stage",
            path.display()
        )))
    }
}

/// Config sections each artifact depends on.
fn check_upstream(path: &Path, stored: &RunConfig, cfg: &RunConfig, kind: ArtifactKind) -> Result<()> {
    same(path, "master seed", &stored.master_seed, &cfg.master_seed)?;
    same(path, "data config", &stored.data, &cfg.data)?;
    same(path, "encoder", &stored.encoder, &cfg.encoder)?;
    same(path, "pretraining config", &stored.pretrain, &cfg.pretrain)?;
    if matches!(kind, ArtifactKind::EmbeddingSet | ArtifactKind::ArosModel) {
        same(path, "fake-OOD config", &stored.forge, &cfg.forge)?;
    }
    if kind == ArtifactKind::ArosModel {
        same(path, "detector config", &stored.stabnet, &cfg.stabnet)?;
    }
    Ok(())
}

fn load_classifier(cfg: &RunConfig, out: &Path) -> Result<Classifier> {
    let path = out.join(files::CLASSIFIER);
    let ck = Checkpoint::<Classifier>::load(&path, ArtifactKind::Classifier)?;
    check_upstream(&path, &ck.config, cfg, ArtifactKind::Classifier)?;
    Ok(ck.payload)
}

fn load_crafted(cfg: &RunConfig, out: &Path, classifier: &Classifier) -> Result<Crafted> {
    let path = out.join(files::EMBEDDINGS);
    let ck = Checkpoint::<Crafted>::load(&path, ArtifactKind::EmbeddingSet)?;
    check_upstream(&path, &ck.config, cfg, ArtifactKind::EmbeddingSet)?;
    let crafted = ck.payload;
    same(
        &path,
        "embedding dimension",
        &crafted.set.dim(),
        &classifier.encoder.embed_dim(),
    )?;
    Ok(crafted)
}

fn load_model(cfg: &RunConfig, out: &Path, classifier: &Classifier) -> Result<ArosModel> {
    let path = out.join(files::MODEL);
    let ck = Checkpoint::<ArosModel>::load(&path, ArtifactKind::ArosModel)?;
    check_upstream(&path, &ck.config, cfg, ArtifactKind::ArosModel)?;
    let model = ck.payload;
    model.check_compatible()?;
    same(&path, "encoder weights", &model.encoder, &classifier.encoder)?;
    Ok(model)
}

pub fn cmd_train_classifier(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let (classifier, logs) = train_classifier(cfg, &data.train, cfg.pretrain.epsilon)?;
    if let Some(last) = logs.last() {
        eprintln!(
            "classifier: {} epochs, clean acc {:.4}, adversarial acc {:.4}",
            logs.len(),
            last.clean_accuracy,
            last.adversarial_accuracy
        );
    }
    Checkpoint::new(ArtifactKind::Classifier, cfg, classifier).save(&out.join(files::CLASSIFIER))?;
    write_csv(&out.join(files::CLASSIFIER_CURVE), &logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftSummary {
    pub report: CraftReport,
    /// Stored fakes whose density is not below β after reloading the checkpoint.
    pub reload_verify_failures: usize,
}

#[derive(Debug, Serialize)]
struct ClassCountRow {
    class: usize,
    id: usize,
    fakes: usize,
}

pub fn cmd_craft_ood(cfg: &RunConfig, out: &Path) -> Result<()> {
    let classifier = load_classifier(cfg, out)?;
    let data = load_data(cfg)?;
    let crafted = craft_ood(cfg, &classifier, &data.train, FakeSource::Gaussian, data.aux.as_ref())?;
    let path = out.join(files::EMBEDDINGS);
    Checkpoint::new(ArtifactKind::EmbeddingSet, cfg, crafted).save(&path)?;

    let crafted = load_crafted(cfg, out, &classifier)?;
    let reload_verify_failures = match &crafted.gaussian_fakes {
        Some(f) => verify_fakes(&crafted.gaussians, &cfg.forge.sampler(), f)?,
        None => 0,
    };
    if reload_verify_failures > 0 {
        return Err(ArosError::contract(format!(
            "{reload_verify_failures} stored fakes no longer have density below β"
        )));
    }
    let r = &crafted.report;
    eprintln!(
        "crafted {} ID + {} fake embeddings, acceptance rate {:?}",
        r.id_count, r.fake_count, r.acceptance_rate
    );
    let rows: Vec<ClassCountRow> = r
        .per_class_fakes
        .iter()
        .enumerate()
        .map(|(class, &fakes)| ClassCountRow {
            class,
            id: data.train.labels.iter().filter(|&&y| y == class).count(),
            fakes,
        })
        .collect();
    write_csv(&out.join(files::CRAFT_CSV), &rows)?;
    let summary = CraftSummary {
        report: crafted.report,
        reload_verify_failures,
    };
    write_json(&out.join(files::CRAFT_JSON), &Report::new("craft-ood", cfg, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CurveRow {
    epoch: usize,
    lr: f64,
    total: f64,
    cross_entropy: f64,
    field_norm: f64,
    trace_arg: f64,
    dominance_arg: f64,
    max_ortho_defect: f64,
}

impl From<&StabEpochLog> for CurveRow {
    fn from(l: &StabEpochLog) -> Self {
        Self {
            epoch: l.epoch,
            lr: l.lr,
            total: l.parts.total,
            cross_entropy: l.parts.cross_entropy,
            field_norm: l.parts.field_norm,
            trace_arg: l.parts.trace_arg,
            dominance_arg: l.parts.dominance_arg,
            max_ortho_defect: l.max_ortho_defect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_epoch: Option<StabEpochLog>,
    /// Worst `||WᵀW − I||_∞` over every step of the run.
    pub max_ortho_defect: f64,
}

pub fn cmd_train_aros(cfg: &RunConfig, out: &Path) -> Result<()> {
    let classifier = load_classifier(cfg, out)?;
    let crafted = load_crafted(cfg, out, &classifier)?;
    let (model, logs) = train_detector(cfg, &classifier, &crafted.set, &DetectorVariant::from_config(cfg))?;
    Checkpoint::new(ArtifactKind::ArosModel, cfg, model).save(&out.join(files::MODEL))?;
    let rows: Vec<CurveRow> = logs.iter().map(CurveRow::from).collect();
    write_csv(&out.join(files::AROS_CURVE), &rows)?;
    let summary = TrainSummary {
        epochs: logs.len(),
        final_epoch: logs.last().cloned(),
        max_ortho_defect: logs.iter().map(|l| l.max_ortho_defect).fold(0.0, f64::max),
    };
    if let Some(l) = &summary.final_epoch {
        eprintln!(
            "detector: final loss {:.4} (CE {:.4})",
            l.parts.total, l.parts.cross_entropy
        );
    }
    write_json(&out.join(files::AROS_JSON), &Report::new("train-aros", cfg, summary))
}

fn md_gaussian(pipeline: &Pipeline, classifier: &Classifier) -> Result<PooledGaussian> {
    let train = &pipeline.data.train;
    let z = encode(classifier, &train.inputs)?;
    PooledGaussian::fit(&z, &train.labels, train.num_classes, MD_RIDGE)
}

fn log_eval(r: &EvalReport) {
    eprintln!(
        "{}: clean AUROC {:.4}, attacked {:?} ({:.1}s)",
        r.scorer,
        r.clean.metrics.auroc,
        r.attacked.as_ref().map(|a| a.metrics.auroc),
        r.wall_clock_secs
    );
}

/// Evaluates the detector, the standard-encoder MSP baseline and MD on the
/// robust encoder, each clean, attacked and under every configured corruption.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let classifier = load_classifier(cfg, out)?;
    let model = load_model(cfg, out, &classifier)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let attack = pipeline.attack_config();
    let gaussian = md_gaussian(&pipeline, &classifier)?;
    let md = MdScorer {
        encoder: &classifier.encoder,
        gaussian: &gaussian,
    };
    let reports = vec![
        pipeline.evaluate_model(&model, Some(&attack))?,
        pipeline.evaluate_msp(Some(&attack))?,
        evaluate(
            &md,
            &pipeline.data.id_test,
            &pipeline.data.ood_test,
            Some(&attack),
            &cfg.corruptions,
            cfg.seed_for("eval"),
        )?,
    ];
    reports.iter().for_each(log_eval);
    let rows: Vec<_> = reports.iter().flat_map(EvalReport::metric_rows).collect();
    write_csv(&out.join(files::EVAL_CSV), &rows)?;
    write_json(&out.join(files::EVAL_JSON), &Report::new("evaluate", cfg, reports))
}

#[derive(Debug, Serialize)]
struct StabilityRow {
    index: usize,
    side: &'static str,
    dominance: Dominance,
    negative_diagonal: bool,
    bendixson_bound: f64,
    gershgorin_bound: f64,
    max_ratio: Option<f64>,
    diverged: bool,
}

pub fn cmd_verify_stability(cfg: &RunConfig, out: &Path) -> Result<()> {
    let classifier = load_classifier(cfg, out)?;
    let crafted = load_crafted(cfg, out, &classifier)?;
    let model = load_model(cfg, out, &classifier)?;
    let data = load_data(cfg)?;
    let check: StabilityCheck = verify_stability(cfg, &classifier, &model, &data.id_test, &crafted.gaussians)?;
    let p = &check.probe;
    eprintln!(
        "violation {:.4} -> {:.4}; strict+negative {:.3}; contracting {:.3}",
        check.violation_init, check.violation_trained, p.frac_strict_negative, p.frac_contracting
    );
    let rows: Vec<StabilityRow> = p
        .points
        .iter()
        .enumerate()
        .map(|(index, pt)| StabilityRow {
            index,
            side: if index < check.id_points { "id" } else { "fake" },
            dominance: pt.dominance,
            negative_diagonal: pt.negative_diagonal,
            bendixson_bound: pt.bendixson_bound,
            gershgorin_bound: pt.gershgorin_bound,
            max_ratio: pt.ratios.iter().copied().reduce(f64::max),
            diverged: pt.diverged,
        })
        .collect();
    write_csv(&out.join(files::STABILITY_CSV), &rows)?;
    write_json(
        &out.join(files::STABILITY_JSON),
        &Report::new("verify-stability", cfg, check),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scorer: ScorerKind,
    pub epsilon: f64,
    pub norm: String,
    pub steps: usize,
    pub restarts: usize,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

/// Budgets in ascending order without duplicates.
fn sweep_budgets(cfg: &RunConfig) -> Vec<f64> {
    let mut eps = cfg.sweep_epsilons.clone();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    eps
}

/// Attacked metrics at budget `eps`; a zero budget is the clean score.
pub fn attacked_metrics(pipeline: &Pipeline, scorer: &dyn Scorer, eps: f64) -> Result<Metrics> {
    let mut attack = pipeline.attack_config();
    attack.epsilon = eps;
    let seed = pipeline.cfg.seed_for("eval");
    let (id, ood) = (&pipeline.data.id_test, &pipeline.data.ood_test);
    let r = if eps == 0.0 {
        evaluate(scorer, id, ood, None, &[], seed)?
    } else {
        evaluate(scorer, id, ood, Some(&attack), &[], seed)?
    };
    Ok(r.attacked.unwrap_or(r.clean).metrics)
}

pub fn cmd_sweep_epsilon(cfg: &RunConfig, out: &Path) -> Result<()> {
    let classifier = load_classifier(cfg, out)?;
    let model = load_model(cfg, out, &classifier)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let standard = &pipeline.standard_classifier()?.0;
    let msp = MspScorer { classifier: standard };
    let scorers: [&dyn Scorer; 2] = [&model, &msp];
    let mut rows = Vec::new();
    for eps in sweep_budgets(cfg) {
        for &s in &scorers {
            let m = attacked_metrics(&pipeline, s, eps)?;
            eprintln!("{} ε={eps}: AUROC {:.4}", s.kind(), m.auroc);
            rows.push(SweepRow {
                scorer: s.kind(),
                epsilon: eps,
                norm: cfg.attack.norm.to_string(),
                steps: cfg.attack.steps,
                restarts: cfg.attack.restarts,
                auroc: m.auroc,
                aupr: m.aupr,
                fpr95: m.fpr95,
            });
        }
    }
    write_csv(&out.join(files::SWEEP_CSV), &rows)?;
    write_json(&out.join(files::SWEEP_JSON), &Report::new("sweep-epsilon", cfg, rows))
}

/// One line of the ablation table. `config` is `MSP` for the baseline row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub description: String,
    pub adv_trained_backbone: bool,
    pub fake_sampling: bool,
    pub orthogonal_layer: bool,
    pub extra_data: bool,
    pub loss: String,
    pub clean_auroc: f64,
    pub attacked_auroc: Option<f64>,
    pub corrupted_auroc: Option<f64>,
}

fn ablation_row(id: AblationId, cfg: &RunConfig, r: &EvalReport) -> AblationRow {
    let adv = id != AblationId::B && cfg.pretrain.epsilon > 0.0;
    let head = if id == AblationId::C {
        HeadMode::Plain
    } else {
        cfg.stabnet.head_mode
    };
    AblationRow {
        config: id.to_string(),
        description: id.describe().into(),
        adv_trained_backbone: adv,
        fake_sampling: id != AblationId::D,
        orthogonal_layer: head == HeadMode::Orthonormal,
        extra_data: id == AblationId::F,
        loss: if id == AblationId::A { "CE" } else { "SL" }.into(),
        clean_auroc: r.clean.metrics.auroc,
        attacked_auroc: r.attacked.as_ref().map(|a| a.metrics.auroc),
        corrupted_auroc: r.corrupted.first().map(|c| c.scores.metrics.auroc),
    }
}

fn tick(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "-"
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.1}", 100.0 * v))
}

/// Markdown table: components on the left, clean/attacked AUROC (%) on the right.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| Config | Adv. trained backbone | Fake sampling | Orthogonal binary layer | Extra data | Loss | Clean/PGD AUROC |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {}/{} |\n",
            r.config,
            tick(r.adv_trained_backbone),
            tick(r.fake_sampling),
            tick(r.orthogonal_layer),
            tick(r.extra_data),
            r.loss,
            pct(Some(r.clean_auroc)),
            pct(r.attacked_auroc)
        ));
    }
    s
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pipeline = Pipeline::new(cfg.clone())?;
    let attack = pipeline.attack_config();
    let mut rows = Vec::new();
    for id in AblationId::ALL {
        let run = pipeline.run_variant(id)?;
        let r = pipeline.evaluate_model(&run.model, Some(&attack))?;
        eprint!("{id} ");
        log_eval(&r);
        rows.push(ablation_row(id, cfg, &r));
    }
    let msp = pipeline.evaluate_msp(Some(&attack))?;
    log_eval(&msp);
    rows.push(AblationRow {
        config: "MSP".into(),
        description: "standard classifier, maximum softmax probability".into(),
        adv_trained_backbone: false,
        fake_sampling: false,
        orthogonal_layer: false,
        extra_data: false,
        loss: "CE".into(),
        clean_auroc: msp.clean.metrics.auroc,
        attacked_auroc: msp.attacked.as_ref().map(|a| a.metrics.auroc),
        corrupted_auroc: msp.corrupted.first().map(|c| c.scores.metrics.auroc),
    });
    let table = ablation_table(&rows);
    std::fs::write(out.join(files::ABLATION_TABLE), &table)
        .map_err(|e| ArosError::io(out.join(files::ABLATION_TABLE), e))?;
    write_csv(&out.join(files::ABLATION_CSV), &rows)?;
    write_json(&out.join(files::ABLATION_JSON), &Report::new("ablate", cfg, rows))
}
