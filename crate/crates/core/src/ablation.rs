//! Variant-by-density sweep: every variant gets the same training budget and
//! is evaluated at each input density.

use std::fmt::Write as _;

use crate::data::{Frame, SamplerConfig};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Model, Variant};
use crate::train::{TrainConfig, TrainError, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub density: usize,
    pub report: MetricsReport,
}

/// Evaluates `model` on `frames` with `sampler` (per-frame seeds fixed by id).
pub fn evaluate_model(model: &Model, frames: &[Frame], sampler: &SamplerConfig) -> crate::Result<MetricsReport> {
    Ok(evaluate(frames, sampler, |f, sparse, mask| {
        model.predict_depth(&f.rgb, sparse, mask)
    })?
    .report)
}

/// Trains one model per variant from `base` (only the variant differs) and
/// evaluates each at every density. Rows come out grouped by variant, with
/// densities ascending.
pub fn ablate(
    train_frames: &[Frame],
    eval_frames: &[Frame],
    base: &TrainConfig,
    variants: &[Variant],
    densities: &[usize],
    eval_seed: u64,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut densities = densities.to_vec();
    densities.sort_unstable();
    densities.dedup();
    let mut rows = Vec::new();
    for &variant in variants {
        let cfg = TrainConfig {
            variant,
            ..base.clone()
        };
        let mut trainer = Trainer::new(cfg, train_frames.to_vec())?;
        trainer.run(|_| Ok(()))?;
        for &density in &densities {
            let sampler = SamplerConfig {
                samples: density,
                seed: eval_seed,
                mode: base.sample_mode(eval_frames[0].height()),
            };
            rows.push(AblationRow {
                variant,
                density,
                report: evaluate_model(&trainer.model, eval_frames, &sampler)?,
            });
        }
    }
    Ok(rows)
}

/// Tab-separated report, one row per (variant, density).
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tdensity\trmse\trel\td1\td2\td3\tpixels\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.variant, r.density, m.rmse, m.rel, m.delta1, m.delta2, m.delta3, m.pixel_count
        );
    }
    out
}
