//! Term-by-term ablation study.
//!
//! Trains the seven standard variants (classification baseline through
//! the full objective) with one shared teacher and seed, then scores
//! each on the zero-shot test split with cosine retrieval.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::dataset::ZeroShotSplit;
use crate::edgemap::EdgeCorpus;
use crate::error::{Error, Result};
use crate::network::teacher::TeacherModel;
use crate::retrieval::{evaluate, EvalMode, Role};

use super::{encode_embeddings, train, Ablation, TrainConfig};

/// The canonical variant ladder: each row adds one ingredient.
/// `cls+kd+domain` is center and triplet together without alignment.
pub fn study_variants() -> Vec<(&'static str, Ablation)> {
    let cls = Ablation::cls_only();
    vec![
        ("cls", cls),
        ("cls+kd", Ablation { kd: true, ..cls }),
        (
            "cls+kd+align",
            Ablation {
                kd: true,
                align: true,
                ..cls
            },
        ),
        (
            "cls+kd+domain",
            Ablation {
                kd: true,
                center: true,
                triplet: true,
                ..cls
            },
        ),
        (
            "cls+kd+align+center",
            Ablation {
                kd: true,
                align: true,
                center: true,
                ..cls
            },
        ),
        (
            "cls+kd+align+triplet",
            Ablation {
                kd: true,
                align: true,
                triplet: true,
                ..cls
            },
        ),
        ("full", Ablation::full()),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub ablation: Ablation,
    #[serde(rename = "mAP_all")]
    pub map_all: f64,
    pub prec_100: f64,
}

/// Train and evaluate every variant under `out_root/variant_N`, sharing
/// `teacher` and `base.seed` so rows differ only in the enabled terms.
/// Writes `ablation.csv` and returns the rows in ladder order.
pub fn run_ablation(
    split: &ZeroShotSplit,
    edges: &EdgeCorpus,
    teacher: &TeacherModel,
    base: &TrainConfig,
    out_root: &Path,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let mut rows = Vec::new();
    for (i, (name, ablation)) in study_variants().into_iter().enumerate() {
        let mut config = base.clone();
        config.ablation = ablation;
        let dir = out_root.join(format!("variant_{}", i + 1));
        let outcome = train(split, edges, teacher, &config, &dir)?;
        let queries = encode_embeddings(&outcome.stack, &split.test_sketches, Role::Query, 64)?;
        let gallery = encode_embeddings(&outcome.stack, &split.test_images, Role::Gallery, 64)?;
        let report = evaluate(&queries, &gallery, &EvalMode::Cosine)?;
        log::info!(
            "variant {} ({name}): mAP@all {:.4}, Prec@100 {:.4}",
            i + 1,
            report.map_all,
            report.prec_100
        );
        rows.push(AblationRow {
            variant: name.into(),
            ablation,
            map_all: report.map_all,
            prec_100: report.prec_100,
        });
    }

    let csv_path = out_root.join("ablation.csv");
    let mut csv = String::from("variant,mAP_all,prec_100\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6}\n",
            row.variant, row.map_all, row.prec_100
        ));
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(rows)
}
