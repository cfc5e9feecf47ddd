//! Mixing synthetic training data with real samples.

use super::LoadedDataset;
use crate::error::{Error, Result};
use crate::rng_for;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Real,
}

/// One sample of a diluted training epoch. Targets are soft for synthetic
/// samples and one-hot for real ones.
#[derive(Debug, Clone)]
pub struct DilutedSample<F: Scalar> {
    pub image: Array3<F>,
    pub target: Array1<F>,
    pub provenance: Provenance,
}

/// Merge a synthetic set with real samples into a fixed training budget of
/// twice the synthetic set size, with a fraction `ratio` of the emitted epoch
/// real (within one sample). The synthetic share is drawn from a shuffled
/// cycle over the set, so heavy dilution genuinely reduces how much of the
/// synthetic set the consumer sees. Ratio 0 returns the synthetic set
/// unchanged; ratio 1 emits only real samples.
pub fn dilute<F: Scalar>(
    syn_images: &Array4<F>,
    syn_targets: &Array2<F>,
    real: &LoadedDataset<F>,
    ratio: f64,
    seed: u64,
) -> Result<Vec<DilutedSample<F>>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("dilution ratio {ratio} outside [0,1]")));
    }
    let n_syn = syn_images.dim().0;
    if syn_targets.dim().0 != n_syn {
        return Err(Error::ShapeMismatch {
            context: "dilute".into(),
            expected: format!("{n_syn} target rows"),
            got: format!("{}", syn_targets.dim().0),
        });
    }
    let n_classes = syn_targets.dim().1;
    let total = if ratio == 0.0 { n_syn } else { 2 * n_syn };
    let n_real = (ratio * total as f64).round() as usize;
    let n_keep = total - n_real;
    if n_real > 0 && real.is_empty() {
        return Err(Error::Dataset("real pool is empty".into()));
    }
    let mut rng = rng_for(seed, "dilute");
    let mut out = Vec::with_capacity(total);
    if n_keep > 0 {
        let mut order: Vec<usize> = (0..n_syn).collect();
        order.shuffle(&mut rng);
        for k in 0..n_keep {
            let i = order[k % n_syn];
            out.push(DilutedSample {
                image: syn_images.index_axis(Axis(0), i).to_owned(),
                target: syn_targets.index_axis(Axis(0), i).to_owned(),
                provenance: Provenance::Synthetic,
            });
        }
    }
    if n_real > 0 {
        // shuffle the pool and cycle through it so small pools still fill r
        let mut pool: Vec<usize> = (0..real.len()).collect();
        pool.shuffle(&mut rng);
        for k in 0..n_real {
            let i = pool[k % pool.len()];
            let y = real.labels[i];
            if y >= n_classes {
                return Err(Error::Dataset(format!(
                    "real label {y} exceeds target width {n_classes}"
                )));
            }
            let mut target = Array1::<F>::zeros(n_classes);
            target[y] = F::one();
            out.push(DilutedSample {
                image: real.image(i),
                target,
                provenance: Provenance::Real,
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}
