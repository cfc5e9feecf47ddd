//! Defense-side analyses: perturbation-entropy probing, differentially
//! private fine-tuning, feature-space projection, and cross-architecture
//! transfer evaluation.

mod dpsgd;
mod strip;
mod tsne;

pub use dpsgd::{
    dpsgd_finetune, epsilon_for, noise_for_budget, DpOutcome, PrivacyConfig, PrivacySpent,
};
pub use strip::{histogram_overlap, strip_probe, strip_report, StripConfig, StripResult};
pub use tsne::{
    feature_projection, silhouette_score, tsne_embed, FeatureProjection, ProjectedPoint,
    TsneConfig,
};

use crate::error::Result;
use crate::hijack::{run_hijack_experiment, EvalReport, HijackEvalContext};
use crate::models::{ArchId, TrainCfg};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};

/// Fine-tune and evaluate one fresh victim per architecture on the same
/// training arrays. Measures how well a dataset distilled against one
/// surrogate transfers to differently shaped victims.
pub fn cross_arch_eval<F: Scalar>(
    images: &Array4<F>,
    targets: &Array2<F>,
    victim_archs: &[ArchId],
    cfg: &TrainCfg,
    ctx: &mut HijackEvalContext<'_, F>,
    fingerprint: &str,
    seed: u64,
) -> Result<Vec<(ArchId, EvalReport)>> {
    let mut out = Vec::with_capacity(victim_archs.len());
    for &arch in victim_archs {
        let (_, report) =
            run_hijack_experiment(images, targets, arch, cfg, ctx, fingerprint, seed)?;
        log::info!(
            "cross-arch {}: utility {:.4} asr {:.4}",
            arch.as_str(),
            report.utility,
            report.asr
        );
        out.push((arch, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{
        class_mean_images, load_dataset, DatasetRole, DatasetSpec, LabelMapping, MappingStrategy,
        Split,
    };
    use crate::hijack::QueryMode;
    use crate::models::{OptimizerKind, UnetConfig};
    use crate::nn::one_hot;
    use crate::transporter::build_transporter;

    const RES: usize = 16;

    #[test]
    fn every_requested_architecture_gets_a_report() {
        let o_spec =
            DatasetSpec::synth_digits("o", DatasetRole::Original, &[0, 1], 24, 12, RES, 1);
        let h_spec =
            DatasetSpec::synth_digits("h", DatasetRole::Hijacking, &[2, 3], 24, 12, RES, 2);
        let train = load_dataset::<f64>(&o_spec, Split::Train).unwrap();
        let o_test = load_dataset::<f64>(&o_spec, Split::Test).unwrap();
        let h_test = load_dataset::<f64>(&h_spec, Split::Test).unwrap();
        let mapping = LabelMapping::new(2, 2, MappingStrategy::Identity, 0).unwrap();
        let mut t =
            build_transporter::<f64>(RES, UnetConfig { depth: 2, base_width: 4 }, 0).unwrap();
        let carriers = class_mean_images(&train);
        let targets = one_hot(&train.labels, 2);
        let cfg = TrainCfg {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
        };
        let mut ctx = HijackEvalContext {
            transporter: &mut t,
            mapping: &mapping,
            original_test: &o_test,
            hijack_test: &h_test,
            carriers: &carriers,
            query_mode: QueryMode::Raw,
        };
        let reports = cross_arch_eval(
            &train.images,
            &targets,
            &[ArchId::ToyCnn, ArchId::ToyCnnWide],
            &cfg,
            &mut ctx,
            "fp-test",
            5,
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].0, ArchId::ToyCnn);
        assert_eq!(reports[1].0, ArchId::ToyCnnWide);
        for (_, r) in &reports {
            assert_eq!(r.fingerprint, "fp-test");
            assert!((0.0..=1.0).contains(&r.utility));
            assert!((0.0..=1.0).contains(&r.asr));
        }
        // the two architectures are genuinely different models
        assert_ne!(reports[0].1.utility_breakdown, reports[1].1.utility_breakdown);
    }
}
