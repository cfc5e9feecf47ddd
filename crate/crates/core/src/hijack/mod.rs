//! Victim fine-tuning and the two attack metrics: original-task utility and
//! hijacking-task attack success rate.

use crate::datasets::{DilutedSample, LabelMapping, LoadedDataset};
use crate::error::{Error, Result};
use crate::models::{build_classifier, fit, predict_probs, ArchId, Classifier, TrainCfg};
use crate::rng_for;
use crate::scalar::Scalar;
use crate::transporter::Transporter;
use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// The model under attack. The head always lives in the original-task label
/// space.
#[derive(Debug, Clone)]
pub struct VictimModel<F: Scalar> {
    pub classifier: Classifier<F>,
    pub arch: ArchId,
    /// Whether the backbone was warm-started on benign data before
    /// fine-tuning (no external pretrained weights are shipped).
    pub pretrained: bool,
}

impl<F: Scalar> VictimModel<F> {
    pub fn new(arch: ArchId, head_dim: usize, resolution: usize, seed: u64) -> Result<Self> {
        let classifier =
            build_classifier(arch, head_dim, resolution, &mut rng_for(seed, "victim-init"))?;
        Ok(Self { classifier, arch, pretrained: false })
    }

    /// Warm-start on a benign labeled set, marking the victim as pretrained.
    pub fn warm_start(
        &mut self,
        images: &Array4<F>,
        targets: &Array2<F>,
        cfg: &TrainCfg,
        seed: u64,
    ) -> Result<()> {
        fit(
            &mut self.classifier,
            images,
            targets,
            cfg,
            &mut rng_for(seed, "victim-warmup"),
            |_, _| {},
        )?;
        self.pretrained = true;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.classifier.num_classes
    }

    pub fn probs(&mut self, images: &Array4<F>) -> Array2<F> {
        predict_probs(&mut self.classifier, images)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let config = serde_json::json!({
            "kind": "victim",
            "arch": self.arch.as_str(),
            "head_dim": self.classifier.num_classes,
            "resolution": self.classifier.resolution,
            "pretrained": self.pretrained,
        });
        crate::artifacts::save_checkpoint(dir, &config, &self.classifier.named_params())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = crate::artifacts::load_config(dir)?;
        let str_of = |k: &str| config.get(k).and_then(|v| v.as_str()).map(str::to_string);
        let num_of = |k: &str| config.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let arch: ArchId = str_of("arch")
            .ok_or_else(|| Error::Artifact("victim config missing 'arch'".into()))?
            .parse()
            .map_err(|_| Error::Artifact("unknown victim arch".into()))?;
        let head_dim = num_of("head_dim").unwrap_or(0);
        let resolution = num_of("resolution").unwrap_or(0);
        let mut v = VictimModel::new(arch, head_dim, resolution, 0)?;
        v.pretrained = config.get("pretrained").and_then(|x| x.as_bool()).unwrap_or(false);
        crate::artifacts::load_params(dir, &mut v.classifier.named_params_mut())?;
        Ok(v)
    }
}

/// Stack a diluted (or pure synthetic) sample sequence into training arrays.
pub fn training_arrays<F: Scalar>(samples: &[DilutedSample<F>]) -> Result<(Array4<F>, Array2<F>)> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty training sequence".into()));
    }
    let (c, h, w) = samples[0].image.dim();
    let k = samples[0].target.len();
    let mut xs = Array4::zeros((samples.len(), c, h, w));
    let mut ys = Array2::zeros((samples.len(), k));
    for (i, s) in samples.iter().enumerate() {
        xs.index_axis_mut(Axis(0), i).assign(&s.image);
        ys.row_mut(i).assign(&s.target);
    }
    Ok((xs, ys))
}

/// Fine-tune the victim on labeled (possibly soft-labeled) images.
/// Returns per-epoch losses.
pub fn finetune_victim<F: Scalar>(
    victim: &mut VictimModel<F>,
    images: &Array4<F>,
    targets: &Array2<F>,
    cfg: &TrainCfg,
    seed: u64,
) -> Result<Vec<f64>> {
    if targets.dim().1 != victim.head_dim() {
        return Err(Error::ShapeMismatch {
            context: "victim fine-tuning targets".into(),
            expected: format!("{} columns", victim.head_dim()),
            got: format!("{}", targets.dim().1),
        });
    }
    fit(
        &mut victim.classifier,
        images,
        targets,
        cfg,
        &mut rng_for(seed, "victim-finetune"),
        |_, _| {},
    )
}

/// Top-1 accuracy on the original test set.
pub fn evaluate_utility<F: Scalar>(
    victim: &mut VictimModel<F>,
    test: &LoadedDataset<F>,
) -> Result<EvalBreakdown> {
    if test.is_empty() {
        return Err(Error::Dataset("empty original test set".into()));
    }
    let probs = victim.probs(&test.images);
    let mut per_class_hits = vec![0usize; victim.head_dim()];
    let mut per_class_counts = vec![0usize; victim.head_dim()];
    let mut hits = 0usize;
    for (row, &y) in probs.rows().into_iter().zip(&test.labels) {
        per_class_counts[y] += 1;
        if crate::distiller::argmax(&row.to_owned()) == y {
            per_class_hits[y] += 1;
            hits += 1;
        }
    }
    Ok(EvalBreakdown::new(hits, test.len(), per_class_hits, per_class_counts))
}

/// How hijack queries reach the victim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Blend each hijack sample with a fixed benign carrier through the
    /// transporter before querying.
    Transported,
    /// Query with the raw hijack sample.
    Raw,
}

/// Accuracy with a per-class breakdown, kept as exact counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalBreakdown {
    pub fraction: f64,
    pub hits: usize,
    pub total: usize,
    pub per_class: Vec<ClassStat>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassStat {
    pub class: usize,
    pub hits: usize,
    pub total: usize,
    pub fraction: f64,
}

impl EvalBreakdown {
    fn new(hits: usize, total: usize, class_hits: Vec<usize>, class_counts: Vec<usize>) -> Self {
        let per_class = class_hits
            .iter()
            .zip(&class_counts)
            .enumerate()
            .filter(|(_, (_, &n))| n > 0)
            .map(|(class, (&h, &n))| ClassStat {
                class,
                hits: h,
                total: n,
                fraction: h as f64 / n as f64,
            })
            .collect();
        Self { fraction: hits as f64 / total as f64, hits, total, per_class }
    }
}

/// Attack success rate on the hijacking test set. In transported mode each
/// query is formed as transport(carrier for the mapped original class, x_h),
/// where `carriers` holds one benign image per original class.
pub fn evaluate_asr<F: Scalar>(
    victim: &mut VictimModel<F>,
    transporter: &mut Transporter<F>,
    mapping: &LabelMapping,
    hijack_test: &LoadedDataset<F>,
    carriers: &Array4<F>,
    mode: QueryMode,
) -> Result<EvalBreakdown> {
    if hijack_test.is_empty() {
        return Err(Error::Dataset("empty hijacking test set".into()));
    }
    let k_h = hijack_test.spec.num_classes;
    for (class, idxs) in hijack_test.by_class.iter().enumerate() {
        if !idxs.is_empty() && mapping.invert(class).is_none() {
            return Err(Error::Config(format!(
                "hijack class {class} present in the test set but outside the mapping"
            )));
        }
    }
    let n = hijack_test.len();
    let mut class_hits = vec![0usize; k_h];
    let mut class_counts = vec![0usize; k_h];
    let mut hits = 0usize;
    let chunk = 64;
    let mut i = 0;
    while i < n {
        let j = (i + chunk).min(n);
        let nb = j - i;
        let res = hijack_test.spec.resolution.0;
        let mut queries = Array4::zeros((nb, 3, res, res));
        for (bi, idx) in (i..j).enumerate() {
            let y_h = hijack_test.labels[idx];
            match mode {
                QueryMode::Raw => {
                    queries
                        .index_axis_mut(Axis(0), bi)
                        .assign(&hijack_test.images.index_axis(Axis(0), idx));
                }
                QueryMode::Transported => {
                    let y_o = mapping.invert(y_h).expect("checked above");
                    let carrier = carriers.index_axis(Axis(0), y_o).to_owned();
                    let x_q = transporter
                        .transport(&carrier, &hijack_test.image(idx))?;
                    queries.index_axis_mut(Axis(0), bi).assign(&x_q);
                }
            }
        }
        let probs = victim.probs(&queries);
        for (bi, idx) in (i..j).enumerate() {
            let y_h = hijack_test.labels[idx];
            class_counts[y_h] += 1;
            let pred_o = crate::distiller::argmax(&probs.row(bi).to_owned());
            if mapping.map(pred_o) == Some(y_h) {
                class_hits[y_h] += 1;
                hits += 1;
            }
        }
        i = j;
    }
    Ok(EvalBreakdown::new(hits, n, class_hits, class_counts))
}

/// Combined metrics of one fine-tune-and-evaluate run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub utility: f64,
    pub asr: f64,
    pub fingerprint: String,
    pub utility_breakdown: EvalBreakdown,
    pub asr_breakdown: EvalBreakdown,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Everything `run_hijack_experiment` needs beyond the DOD.
pub struct HijackEvalContext<'a, F: Scalar> {
    pub transporter: &'a mut Transporter<F>,
    pub mapping: &'a LabelMapping,
    pub original_test: &'a LoadedDataset<F>,
    pub hijack_test: &'a LoadedDataset<F>,
    /// One benign carrier image per original class.
    pub carriers: &'a Array4<F>,
    pub query_mode: QueryMode,
}

/// Fine-tune a fresh victim on the given training arrays and evaluate both
/// tasks. `fingerprint` ties the report back to the producing configuration.
#[allow(clippy::too_many_arguments)]
pub fn run_hijack_experiment<F: Scalar>(
    images: &Array4<F>,
    targets: &Array2<F>,
    victim_arch: ArchId,
    cfg: &TrainCfg,
    ctx: &mut HijackEvalContext<'_, F>,
    fingerprint: &str,
    seed: u64,
) -> Result<(VictimModel<F>, EvalReport)> {
    let resolution = images.dim().2;
    let mut victim = VictimModel::new(victim_arch, targets.dim().1, resolution, seed)?;
    finetune_victim(&mut victim, images, targets, cfg, seed)?;
    let utility = evaluate_utility(&mut victim, ctx.original_test)?;
    let asr = evaluate_asr(
        &mut victim,
        ctx.transporter,
        ctx.mapping,
        ctx.hijack_test,
        ctx.carriers,
        ctx.query_mode,
    )?;
    let report = EvalReport {
        utility: utility.fraction,
        asr: asr.fraction,
        fingerprint: fingerprint.to_string(),
        utility_breakdown: utility,
        asr_breakdown: asr,
    };
    Ok((victim, report))
}

#[cfg(test)]
mod tests;
