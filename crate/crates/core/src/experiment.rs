//! Multi-arm experiment driver: one synthetic task, one shared base-stage
//! head, then one few-shot adaptation per named arm, each scored into a
//! [`MetricsReport`] and written to disk.
//!
//! Output layout under `output_dir`:
//!
//! * `base_curve.csv` — the shared base-stage accuracy curve
//! * `arm_<name>.report.json` — full per-arm metrics
//! * `arm_<name>.curve.csv` — per-evaluation adaptation curve
//! * `summary.json` — one comparison row per arm, failures included
//!
//! Arms run sequentially and in the order given; every arm starts from the
//! same base-trained weights. A failing arm is recorded in the summary and
//! does not stop its siblings. Reports are byte-identical across re-runs
//! of the same config: the only inputs are the config values and seeds.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_task, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::head::ProjectionHead;
use crate::kernel::KernelSpec;
use crate::loss::LossConfig;
use crate::metrics::{metrics_report, MetricsReport};
use crate::smi::SmiKind;
use crate::train::{
    adaptation_pool, base_train, few_shot_adapt, AdaptObjective, Stage, TrainConfig, TrainLog,
};

/// One named adaptation variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub objective: AdaptObjective,
}

fn valid_arm_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub base: TrainConfig,
    pub adapt: TrainConfig,
    pub arms: Vec<ArmSpec>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.base.validate()?;
        self.adapt.validate()?;
        if self.base.stage != Stage::Base {
            return Err(Error::Config("base config must have stage = base".into()));
        }
        if self.adapt.stage != Stage::Adapt {
            return Err(Error::Config("adapt config must have stage = adapt".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("an experiment needs at least one arm".into()));
        }
        let mut seen = BTreeSet::new();
        for arm in &self.arms {
            if !valid_arm_name(&arm.name) {
                return Err(Error::Config(format!(
                    "arm name {:?} must be nonempty and use only [A-Za-z0-9_-]",
                    arm.name
                )));
            }
            if !seen.insert(arm.name.clone()) {
                return Err(Error::Config(format!("duplicate arm name {:?}", arm.name)));
            }
            arm.objective.validate()?;
        }
        Ok(())
    }
}

/// What one arm produced: a report on success, an error string on failure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub name: String,
    pub objective: AdaptObjective,
    pub report: Option<MetricsReport>,
    pub adapt_log: Option<TrainLog>,
    pub error: Option<String>,
}

impl ArmOutcome {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub base_log: TrainLog,
    pub arms: Vec<ArmOutcome>,
}

impl ExperimentOutcome {
    pub fn arm(&self, name: &str) -> Option<&ArmOutcome> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// The report of a named arm, or an error naming what went missing.
    pub fn report_of(&self, name: &str) -> Result<&MetricsReport> {
        let arm = self
            .arm(name)
            .ok_or_else(|| Error::Config(format!("no arm named {name:?}")))?;
        arm.report.as_ref().ok_or_else(|| {
            Error::Domain(format!(
                "arm {name:?} failed: {}",
                arm.error.as_deref().unwrap_or("unknown error")
            ))
        })
    }
}

/// One row of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummaryRow {
    pub name: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub base_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
    pub combined_score: Option<f64>,
    pub forgetting_delta: Option<f64>,
    pub convergence_iters: Option<usize>,
    pub mean_base_novel_sim: Option<f64>,
    pub cross_group_confusion: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub task: SyntheticTaskSpec,
    pub base_iterations: usize,
    pub base_final_accuracy: f64,
    pub arms: Vec<ArmSummaryRow>,
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Delimited-text table of a training log, one row per evaluation.
pub fn curve_table(log: &TrainLog) -> String {
    let mut out = String::from(
        "iteration,train_loss,base_accuracy,novel_accuracy,intra_term,inter_term,\
         mean_intra_similarity,mean_base_novel_similarity\n",
    );
    for r in &log.records {
        let (intra, inter) = match r.loss_breakdown {
            Some(b) => (Some(b.intra), Some(b.inter)),
            None => (None, None),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            fmt_opt(&r.train_loss),
            r.base_accuracy,
            fmt_opt(&r.novel_accuracy),
            fmt_opt(&intra),
            fmt_opt(&inter),
            fmt_opt(&r.mean_intra_similarity),
            fmt_opt(&r.mean_base_novel_similarity),
        );
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn summary_row(outcome: &ArmOutcome) -> ArmSummaryRow {
    match &outcome.report {
        Some(r) => ArmSummaryRow {
            name: outcome.name.clone(),
            status: "ok".into(),
            error: None,
            base_accuracy: Some(r.base_accuracy),
            novel_accuracy: Some(r.novel_accuracy),
            combined_score: Some(r.combined_score),
            forgetting_delta: Some(r.forgetting_delta),
            convergence_iters: r.convergence_iters,
            mean_base_novel_sim: r.cluster_stats.mean_base_novel_sim,
            cross_group_confusion: Some(r.cross_group_confusion),
        },
        None => ArmSummaryRow {
            name: outcome.name.clone(),
            status: "failed".into(),
            error: outcome.error.clone(),
            base_accuracy: None,
            novel_accuracy: None,
            combined_score: None,
            forgetting_delta: None,
            convergence_iters: None,
            mean_base_novel_sim: None,
            cross_group_confusion: None,
        },
    }
}

/// Run every arm of an experiment and write its report files.
///
/// The base stage runs once and is shared: every arm adapts the same
/// base-trained weights, so arms differ only in their objective.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let task = generate_task(&cfg.task)?;
    let head0 = ProjectionHead::init(cfg.task.input_dim, cfg.task.embed_dim, cfg.base.seed)?;
    let (base_head, base_log) = base_train(&task, &head0, &cfg.base)?;
    write_text(
        &cfg.output_dir.join("base_curve.csv"),
        &curve_table(&base_log),
    )?;

    let novel: BTreeSet<usize> = cfg.task.novel_class_ids().collect();
    let mut arms = Vec::with_capacity(cfg.arms.len());
    for arm in &cfg.arms {
        let arm_cfg = TrainConfig {
            loss: arm.objective,
            ..cfg.adapt
        };
        let outcome = match run_arm(&task, &base_head, &arm_cfg, &novel) {
            Ok((report, log)) => {
                write_json(
                    &cfg.output_dir.join(format!("arm_{}.report.json", arm.name)),
                    &report,
                )?;
                write_text(
                    &cfg.output_dir.join(format!("arm_{}.curve.csv", arm.name)),
                    &curve_table(&log),
                )?;
                ArmOutcome {
                    name: arm.name.clone(),
                    objective: arm.objective,
                    report: Some(report),
                    adapt_log: Some(log),
                    error: None,
                }
            }
            Err(e) => ArmOutcome {
                name: arm.name.clone(),
                objective: arm.objective,
                report: None,
                adapt_log: None,
                error: Some(e.to_string()),
            },
        };
        arms.push(outcome);
    }

    let summary = ExperimentSummary {
        task: cfg.task,
        base_iterations: base_log.iterations,
        base_final_accuracy: base_log
            .final_record()
            .map(|r| r.base_accuracy)
            .unwrap_or(0.0),
        arms: arms.iter().map(summary_row).collect(),
    };
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(ExperimentOutcome { base_log, arms })
}

fn run_arm(
    task: &crate::data::FewShotTask,
    base_head: &ProjectionHead,
    arm_cfg: &TrainConfig,
    novel: &BTreeSet<usize>,
) -> Result<(MetricsReport, TrainLog)> {
    let (adapted, log) = few_shot_adapt(task, base_head, arm_cfg)?;
    let pool = adaptation_pool(task, arm_cfg.seed, arm_cfg.abundant_base)?;
    let report = metrics_report(&adapted, &pool, task.test(), novel, &log)?;
    Ok((report, log))
}

/// The six-arm reference experiment behind the regression anchors: a plain
/// fine-tuning baseline, the intra/inter/combined variants, the graph-cut
/// combined variant, and the contrastive baseline, all on one fixed task.
pub fn component_ablation_config(output_dir: &Path) -> ExperimentConfig {
    let task = SyntheticTaskSpec {
        num_base: 5,
        num_novel: 3,
        input_dim: 16,
        embed_dim: 8,
        samples_per_base: 30,
        k_shot: 5,
        intra_spread: 0.30,
        inter_overlap: 0.45,
        seed: 42,
    };
    let base = TrainConfig {
        stage: Stage::Base,
        loss: AdaptObjective::CeOnly,
        learning_rate: 0.05,
        iterations: 150,
        batch_size: 25,
        eval_every: 50,
        seed: 42,
        comb_weight: 1.0,
        abundant_base: false,
    };
    // The adaptation stage keeps the full base exemplar pool alongside the
    // K-shot novel examples; with only the shots as anchors every arm
    // forgets so fast that arm-to-arm comparisons drown in noise.
    let adapt = TrainConfig {
        stage: Stage::Adapt,
        loss: AdaptObjective::CeOnly,
        learning_rate: 0.02,
        iterations: 80,
        batch_size: 40,
        eval_every: 10,
        seed: 42,
        comb_weight: 0.65,
        abundant_base: true,
    };
    let flmi = |eta: f64| {
        AdaptObjective::Comb(LossConfig {
            eta,
            ..LossConfig::new(SmiKind::Flmi)
        })
    };
    let arms = vec![
        ArmSpec {
            name: "ce_only".into(),
            objective: AdaptObjective::CeOnly,
        },
        ArmSpec {
            name: "flmi_intra".into(),
            objective: flmi(0.0),
        },
        ArmSpec {
            name: "flmi_inter".into(),
            objective: flmi(1.0),
        },
        ArmSpec {
            name: "flmi_both".into(),
            objective: flmi(0.5),
        },
        ArmSpec {
            name: "gcmi_both".into(),
            objective: AdaptObjective::Comb(LossConfig {
                eta: 0.5,
                ..LossConfig::new(SmiKind::Gcmi)
            }),
        },
        ArmSpec {
            name: "supcon".into(),
            objective: AdaptObjective::Supcon { temperature: 0.5 },
        },
    ];
    ExperimentConfig {
        task,
        base,
        adapt,
        arms,
        output_dir: output_dir.to_path_buf(),
    }
}

/// What an ablation sweep varies. Every value becomes one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepSpec {
    /// Mixing weight η between the intra and inter terms.
    Eta { variant: SmiKind, values: Vec<f64> },
    /// Redundancy weight λ at a fixed η.
    Lambda {
        variant: SmiKind,
        eta: f64,
        values: Vec<f64>,
    },
    /// Kernel choice at fixed η and λ.
    Kernel {
        variant: SmiKind,
        kernels: Vec<KernelSpec>,
    },
    /// The four-arm component ablation plus the contrastive baseline.
    Component { variant: SmiKind },
}

fn number_tag(v: f64) -> String {
    format!("{v:.2}").replace('.', "_").replace('-', "m")
}

impl SweepSpec {
    pub fn arms(&self) -> Vec<ArmSpec> {
        match self {
            SweepSpec::Eta { variant, values } => values
                .iter()
                .map(|&eta| ArmSpec {
                    name: format!("eta_{}", number_tag(eta)),
                    objective: AdaptObjective::Comb(LossConfig {
                        eta,
                        ..LossConfig::new(*variant)
                    }),
                })
                .collect(),
            SweepSpec::Lambda {
                variant,
                eta,
                values,
            } => values
                .iter()
                .map(|&lambda| ArmSpec {
                    name: format!("lambda_{}", number_tag(lambda)),
                    objective: AdaptObjective::Comb(LossConfig {
                        eta: *eta,
                        lambda,
                        ..LossConfig::new(*variant)
                    }),
                })
                .collect(),
            SweepSpec::Kernel { variant, kernels } => kernels
                .iter()
                .enumerate()
                .map(|(i, k)| ArmSpec {
                    name: format!("kernel_{i}_{}", k.kind),
                    objective: AdaptObjective::Comb(LossConfig {
                        kernel: *k,
                        ..LossConfig::new(*variant)
                    }),
                })
                .collect(),
            SweepSpec::Component { variant } => {
                let comb = |eta: f64| {
                    AdaptObjective::Comb(LossConfig {
                        eta,
                        ..LossConfig::new(*variant)
                    })
                };
                vec![
                    ArmSpec {
                        name: "ce_only".into(),
                        objective: AdaptObjective::CeOnly,
                    },
                    ArmSpec {
                        name: "intra_only".into(),
                        objective: comb(0.0),
                    },
                    ArmSpec {
                        name: "inter_only".into(),
                        objective: comb(1.0),
                    },
                    ArmSpec {
                        name: "both".into(),
                        objective: comb(0.5),
                    },
                    ArmSpec {
                        name: "supcon".into(),
                        objective: AdaptObjective::Supcon { temperature: 0.5 },
                    },
                ]
            }
        }
    }
}

/// Config of the `ablate` driver: one task and train setup, arms generated
/// from a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub task: SyntheticTaskSpec,
    pub base: TrainConfig,
    pub adapt: TrainConfig,
    pub sweep: SweepSpec,
    pub output_dir: PathBuf,
}

impl AblateConfig {
    pub fn into_experiment(self) -> ExperimentConfig {
        ExperimentConfig {
            task: self.task,
            base: self.base,
            adapt: self.adapt,
            arms: self.sweep.arms(),
            output_dir: self.output_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let task = SyntheticTaskSpec {
            num_base: 3,
            num_novel: 2,
            input_dim: 8,
            embed_dim: 8,
            samples_per_base: 10,
            k_shot: 4,
            intra_spread: 0.2,
            inter_overlap: 0.2,
            seed: 5,
        };
        let base = TrainConfig {
            stage: Stage::Base,
            loss: AdaptObjective::CeOnly,
            learning_rate: 0.05,
            iterations: 30,
            batch_size: 10,
            eval_every: 15,
            seed: 5,
            comb_weight: 1.0,
            abundant_base: false,
        };
        let adapt = TrainConfig {
            stage: Stage::Adapt,
            iterations: 20,
            eval_every: 10,
            ..base
        };
        ExperimentConfig {
            task,
            base,
            adapt,
            arms: vec![ArmSpec {
                name: "ce_only".into(),
                objective: AdaptObjective::CeOnly,
            }],
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn single_arm_run_writes_all_files_and_summary_mirrors_the_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert_eq!(outcome.arms.len(), 1);
        let report = outcome.report_of("ce_only").unwrap();
        for file in [
            "base_curve.csv",
            "arm_ce_only.report.json",
            "arm_ce_only.curve.csv",
            "summary.json",
        ] {
            assert!(dir.path().join(file).exists(), "{file} missing");
        }
        let summary: ExperimentSummary = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(summary.arms.len(), 1);
        assert_eq!(summary.arms[0].status, "ok");
        assert_eq!(summary.arms[0].novel_accuracy, Some(report.novel_accuracy));
        assert_eq!(summary.arms[0].combined_score, Some(report.combined_score));
        // The written report parses back to the in-memory one.
        let on_disk: crate::metrics::MetricsReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("arm_ce_only.report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(&on_disk, report);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg1 = tiny_config(dir1.path());
        cfg1.arms.push(ArmSpec {
            name: "flmi_both".into(),
            objective: AdaptObjective::Comb(LossConfig::new(SmiKind::Flmi)),
        });
        let mut cfg2 = cfg1.clone();
        cfg2.output_dir = dir2.path().to_path_buf();
        run_experiment(&cfg1).unwrap();
        run_experiment(&cfg2).unwrap();
        for file in [
            "base_curve.csv",
            "arm_ce_only.report.json",
            "arm_ce_only.curve.csv",
            "arm_flmi_both.report.json",
            "arm_flmi_both.curve.csv",
            "summary.json",
        ] {
            let a = std::fs::read(dir1.path().join(file)).unwrap();
            let b = std::fs::read(dir2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between runs");
        }
    }

    #[test]
    fn invalid_arm_objective_is_rejected_before_anything_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.arms.push(ArmSpec {
            name: "broken".into(),
            objective: AdaptObjective::Comb(LossConfig {
                eta: 2.0,
                ..LossConfig::new(SmiKind::Flmi)
            }),
        });
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
        assert!(!dir.path().join("summary.json").exists());
    }

    #[test]
    fn failing_arm_is_isolated_and_marked() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        // A vanishing temperature passes validation (positive, finite) but
        // overflows the contrastive gradient at the first step, so exactly
        // one arm fails at runtime.
        cfg.arms.push(ArmSpec {
            name: "broken".into(),
            objective: AdaptObjective::Supcon {
                temperature: 1e-300,
            },
        });
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.arm("ce_only").unwrap().succeeded());
        let broken = outcome.arm("broken").unwrap();
        assert!(!broken.succeeded());
        assert!(broken.error.as_deref().unwrap().contains("diverged"));
        let summary: ExperimentSummary = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        let row = summary.arms.iter().find(|r| r.name == "broken").unwrap();
        assert_eq!(row.status, "failed");
        assert!(row.error.is_some());
        assert!(row.novel_accuracy.is_none());
        // The healthy arm's files exist; the broken arm wrote none.
        assert!(dir.path().join("arm_ce_only.report.json").exists());
        assert!(!dir.path().join("arm_broken.report.json").exists());
    }

    #[test]
    fn config_validation_catches_duplicates_and_bad_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.arms.push(cfg.arms[0].clone());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config(dir.path());
        cfg.arms[0].name = "bad name!".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config(dir.path());
        cfg.arms.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        // Swapped stages are rejected.
        let mut cfg = tiny_config(dir.path());
        std::mem::swap(&mut cfg.base, &mut cfg.adapt);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn curve_table_has_one_row_per_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        let log = outcome.arms[0].adapt_log.as_ref().unwrap();
        let table = curve_table(log);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 1 + log.records.len());
        assert!(lines[0].starts_with("iteration,train_loss,base_accuracy"));
        // Iteration 0 has an empty train_loss field.
        assert!(lines[1].starts_with("0,,"));
    }

    #[test]
    fn sweep_specs_expand_to_named_arms() {
        let eta = SweepSpec::Eta {
            variant: SmiKind::Flmi,
            values: vec![0.0, 0.5, 1.0],
        };
        let names: Vec<String> = eta.arms().into_iter().map(|a| a.name).collect();
        assert_eq!(names, vec!["eta_0_00", "eta_0_50", "eta_1_00"]);
        let comp = SweepSpec::Component {
            variant: SmiKind::Gcmi,
        };
        assert_eq!(comp.arms().len(), 5);
        let kernels = SweepSpec::Kernel {
            variant: SmiKind::Flmi,
            kernels: vec![KernelSpec::cosine(true), KernelSpec::euclidean()],
        };
        let names: Vec<String> = kernels.arms().into_iter().map(|a| a.name).collect();
        assert_eq!(names, vec!["kernel_0_cosine", "kernel_1_euclidean"]);
        // All generated arm sets validate inside a config.
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.arms = SweepSpec::Lambda {
            variant: SmiKind::Gcmi,
            eta: 0.5,
            values: vec![0.5, 1.0, 1.5],
        }
        .arms();
        cfg.validate().unwrap();
    }

    #[test]
    fn reference_config_validates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = component_ablation_config(dir.path());
        cfg.validate().unwrap();
        assert_eq!(cfg.arms.len(), 6);
        assert_eq!(cfg.task.seed, 42);
    }
}
