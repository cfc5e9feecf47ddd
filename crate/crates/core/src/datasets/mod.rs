//! Dataset registry, loading, label mapping, pairing, and dilution.

pub mod dilute;
pub mod loaders;
pub mod mapping;
pub mod resize;
pub mod synth;

pub use dilute::{dilute, DilutedSample, Provenance};
pub use mapping::{LabelMapping, MappingStrategy};

use crate::error::{Error, Result};
use crate::rng_for;
use crate::scalar::Scalar;
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Original,
    Hijacking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Descriptor for a dataset used as either the original or hijacking task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub role: DatasetRole,
    pub num_classes: usize,
    /// (height, width, channels); channels must be 1 or 3. Grayscale data is
    /// replicated to 3 channels before any model sees it.
    pub resolution: (usize, usize, usize),
    /// (train count, test count)
    pub split_sizes: (usize, usize),
    pub source_uri: String,
    /// Class identifiers for subset-constructed datasets; empty otherwise.
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "dataset '{}' needs at least 2 classes",
                self.name
            )));
        }
        if self.resolution.2 != 1 && self.resolution.2 != 3 {
            return Err(Error::Config(format!(
                "dataset '{}' channels must be 1 or 3",
                self.name
            )));
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.split_sizes.0,
            Split::Test => self.split_sizes.1,
        }
    }

    /// Convenience spec for the built-in procedural digit corpus over the
    /// given digits (class index i <-> digits[i]).
    pub fn synth_digits(
        name: &str,
        role: DatasetRole,
        digits: &[usize],
        train: usize,
        test: usize,
        resolution: usize,
        seed: u64,
    ) -> Self {
        let list: Vec<String> = digits.iter().map(|d| d.to_string()).collect();
        Self {
            name: name.to_string(),
            role,
            num_classes: digits.len(),
            resolution: (resolution, resolution, 3),
            split_sizes: (train, test),
            source_uri: format!("synthdigits://?digits={}&seed={}", list.join(","), seed),
            class_names: list,
        }
    }
}

/// A fully materialized dataset split.
#[derive(Debug, Clone)]
pub struct LoadedDataset<F: Scalar> {
    pub spec: DatasetSpec,
    /// (n, 3, h, w) after channel replication.
    pub images: Array4<F>,
    pub labels: Vec<usize>,
    /// Sample indices grouped by class.
    pub by_class: Vec<Vec<usize>>,
    /// Count of corrupt records skipped during loading.
    pub skipped: usize,
}

impl<F: Scalar> LoadedDataset<F> {
    pub fn from_parts(spec: DatasetSpec, images: Array4<F>, labels: Vec<usize>, skipped: usize) -> Self {
        let mut by_class = vec![Vec::new(); spec.num_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        Self { spec, images, labels, by_class, skipped }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Array3<F> {
        self.images.index_axis(Axis(0), i).to_owned()
    }
}

/// Load one split of a dataset. Ordering is deterministic for a fixed spec.
pub fn load_dataset<F: Scalar>(spec: &DatasetSpec, split: Split) -> Result<LoadedDataset<F>> {
    spec.validate()?;
    if spec.split_size(split) == 0 && spec.source_uri.starts_with("synthdigits://") {
        let (h, w, _) = spec.resolution;
        return Ok(LoadedDataset::from_parts(
            spec.clone(),
            Array4::zeros((0, 3, h, w)),
            Vec::new(),
            0,
        ));
    }
    if let Some(rest) = spec.source_uri.strip_prefix("synthdigits://") {
        load_synth(spec, split, rest)
    } else if let Some(dir) = spec.source_uri.strip_prefix("idx://") {
        loaders::load_idx(spec, split, std::path::Path::new(dir))
    } else if let Some(dir) = spec.source_uri.strip_prefix("pngdir://") {
        loaders::load_pngdir(spec, split, std::path::Path::new(dir))
    } else if let Some(root) = spec.source_uri.strip_prefix("cache://") {
        loaders::load_cache(spec, split, std::path::Path::new(root))
    } else {
        Err(Error::Dataset(format!(
            "unresolvable source uri '{}'",
            spec.source_uri
        )))
    }
}

fn load_synth<F: Scalar>(spec: &DatasetSpec, split: Split, query: &str) -> Result<LoadedDataset<F>> {
    let mut digits: Vec<usize> = Vec::new();
    let mut seed = 0u64;
    for kv in query.trim_start_matches('?').split('&') {
        if let Some(v) = kv.strip_prefix("digits=") {
            digits = v
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Dataset(format!("bad digit '{s}'"))))
                .collect::<Result<_>>()?;
        } else if let Some(v) = kv.strip_prefix("seed=") {
            seed = v.parse().map_err(|_| Error::Dataset(format!("bad seed '{v}'")))?;
        }
    }
    if digits.is_empty() {
        digits = (0..spec.num_classes).collect();
    }
    if digits.len() != spec.num_classes {
        return Err(Error::Dataset(format!(
            "digit list length {} != num_classes {}",
            digits.len(),
            spec.num_classes
        )));
    }
    let n = spec.split_size(split);
    let res = spec.resolution.0;
    let mut rng = rng_for(seed, &format!("synthdigits-{}", split.as_str()));
    let mut images = Array4::<F>::zeros((n, 3, res, res));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % digits.len();
        let img = synth::render_digit::<F, _>(digits[class], res, &mut rng);
        images.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(class);
    }
    Ok(LoadedDataset::from_parts(spec.clone(), images, labels, 0))
}

/// Randomly select `classes_total` classes from an index of class names and
/// split them into two disjoint halves: (original spec, hijacking spec).
pub fn build_imagenet_subset(
    seed: u64,
    index: &[String],
    classes_total: usize,
    resolution: usize,
) -> Result<(DatasetSpec, DatasetSpec)> {
    if index.len() < classes_total {
        return Err(Error::Dataset(format!(
            "index has {} classes, need {classes_total}",
            index.len()
        )));
    }
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.shuffle(&mut rng_for(seed, "imagenet-subset"));
    let chosen: Vec<String> = order[..classes_total]
        .iter()
        .map(|&i| index[i].clone())
        .collect();
    let half = classes_total / 2;
    let mk = |name: &str, role, names: &[String]| DatasetSpec {
        name: name.to_string(),
        role,
        num_classes: names.len(),
        resolution: (resolution, resolution, 3),
        split_sizes: (0, 0),
        source_uri: format!("imagenet-subset://seed={seed}"),
        class_names: names.to_vec(),
    };
    Ok((
        mk("imagenet-subset-original", DatasetRole::Original, &chosen[..half]),
        mk("imagenet-subset-hijack", DatasetRole::Hijacking, &chosen[half..]),
    ))
}

/// One original/hijack sample pair satisfying the label mapping.
#[derive(Debug, Clone)]
pub struct SamplePair<F: Scalar> {
    pub x_o: Array3<F>,
    pub y_o: usize,
    pub x_h: Array3<F>,
    pub y_h: usize,
    pub source_ids: (usize, usize),
}

/// Pair every original sample (in a seeded shuffled epoch order) with a
/// hijack sample of the mapped class, drawn with replacement.
pub fn pair_samples<'a, F: Scalar>(
    d_o: &'a LoadedDataset<F>,
    d_h: &'a LoadedDataset<F>,
    mapping: &'a LabelMapping,
    seed: u64,
) -> Result<PairStream<'a, F>> {
    for &(y_o, y_h) in &mapping.pairs {
        if y_o < d_o.by_class.len() && !d_o.by_class[y_o].is_empty() {
            if y_h >= d_h.by_class.len() || d_h.by_class[y_h].is_empty() {
                return Err(Error::EmptyClass(y_h));
            }
        }
    }
    let mut order: Vec<usize> = (0..d_o.len())
        .filter(|&i| mapping.map(d_o.labels[i]).is_some())
        .collect();
    let mut rng = rng_for(seed, "pair-samples");
    order.shuffle(&mut rng);
    Ok(PairStream { d_o, d_h, mapping, order, pos: 0, rng })
}

/// Single-consumer stream of [`SamplePair`]s.
pub struct PairStream<'a, F: Scalar> {
    d_o: &'a LoadedDataset<F>,
    d_h: &'a LoadedDataset<F>,
    mapping: &'a LabelMapping,
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl<F: Scalar> PairStream<'_, F> {
    pub fn epoch_len(&self) -> usize {
        self.order.len()
    }
}

impl<F: Scalar> Iterator for PairStream<'_, F> {
    type Item = SamplePair<F>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let oi = self.order[self.pos];
        self.pos += 1;
        let y_o = self.d_o.labels[oi];
        let y_h = self.mapping.map(y_o).expect("filtered to mapped classes");
        let pool = &self.d_h.by_class[y_h];
        let hi = pool[self.rng.random_range(0..pool.len())];
        Some(SamplePair {
            x_o: self.d_o.image(oi),
            y_o,
            x_h: self.d_h.image(hi),
            y_h,
            source_ids: (oi, hi),
        })
    }
}

/// Replicate a single-channel image to three channels; pass 3-channel through.
pub fn to_three_channels<F: Scalar>(img: &Array3<F>) -> Array3<F> {
    match img.dim().0 {
        3 => img.clone(),
        1 => {
            let (_, h, w) = img.dim();
            let mut out = Array3::zeros((3, h, w));
            for c in 0..3 {
                out.index_axis_mut(Axis(0), c).assign(&img.index_axis(Axis(0), 0));
            }
            out
        }
        c => panic!("unsupported channel count {c}"),
    }
}

/// Per-class mean images of a dataset (the benign carrier policy).
pub fn class_mean_images<F: Scalar>(ds: &LoadedDataset<F>) -> Array4<F> {
    let (_, c, h, w) = ds.images.dim();
    let k = ds.spec.num_classes;
    let mut out = Array4::<F>::zeros((k, c, h, w));
    for class in 0..k {
        let idxs = &ds.by_class[class];
        if idxs.is_empty() {
            continue;
        }
        let mut acc = Array3::<F>::zeros((c, h, w));
        for &i in idxs {
            acc = acc + ds.images.index_axis(Axis(0), i);
        }
        let inv = F::one() / F::from_f64_(idxs.len() as f64);
        out.index_axis_mut(Axis(0), class).assign(&(acc * inv));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_specs() -> (DatasetSpec, DatasetSpec) {
        let o = DatasetSpec::synth_digits("orig", DatasetRole::Original, &[0, 1], 12, 4, 16, 1);
        let h = DatasetSpec::synth_digits("hij", DatasetRole::Hijacking, &[2, 3], 12, 4, 16, 2);
        (o, h)
    }

    #[test]
    fn synth_loading_is_deterministic() {
        let (o, _) = toy_specs();
        let a: LoadedDataset<f32> = load_dataset(&o, Split::Train).unwrap();
        let b: LoadedDataset<f32> = load_dataset(&o, Split::Train).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn empty_split_request_yields_empty_sequence() {
        let spec = DatasetSpec::synth_digits("e", DatasetRole::Original, &[0, 1], 4, 0, 16, 0);
        let ds: LoadedDataset<f32> = load_dataset(&spec, Split::Test).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn imagenet_subset_partition_is_disjoint_and_deterministic() {
        let index: Vec<String> = (0..300).map(|i| format!("class{i:03}")).collect();
        let (o1, h1) = build_imagenet_subset(0, &index, 200, 224).unwrap();
        let (o2, h2) = build_imagenet_subset(0, &index, 200, 224).unwrap();
        assert_eq!(o1.class_names, o2.class_names);
        assert_eq!(h1.class_names, h2.class_names);
        let all: std::collections::HashSet<_> =
            o1.class_names.iter().chain(h1.class_names.iter()).collect();
        assert_eq!(all.len(), 200);
        let inter: Vec<_> = o1
            .class_names
            .iter()
            .filter(|c| h1.class_names.contains(c))
            .collect();
        assert!(inter.is_empty());
    }

    #[test]
    fn imagenet_subset_needs_enough_classes() {
        let index: Vec<String> = (0..100).map(|i| i.to_string()).collect();
        assert!(build_imagenet_subset(0, &index, 200, 224).is_err());
    }

    #[test]
    fn pairs_satisfy_the_mapping_exhaustively() {
        let (o, h) = toy_specs();
        let d_o: LoadedDataset<f32> = load_dataset(&o, Split::Train).unwrap();
        let d_h: LoadedDataset<f32> = load_dataset(&h, Split::Train).unwrap();
        let m = LabelMapping::new(2, 2, MappingStrategy::Random, 3).unwrap();
        let pairs: Vec<_> = pair_samples(&d_o, &d_h, &m, 9).unwrap().collect();
        assert_eq!(pairs.len(), 12);
        for p in &pairs {
            assert_eq!(m.map(p.y_o), Some(p.y_h));
        }
    }

    #[test]
    fn self_pairing_with_identity_mapping() {
        let (o, _) = toy_specs();
        let d_o: LoadedDataset<f32> = load_dataset(&o, Split::Train).unwrap();
        let m = LabelMapping::new(2, 2, MappingStrategy::Identity, 0).unwrap();
        for p in pair_samples(&d_o, &d_o, &m, 4).unwrap() {
            assert_eq!(p.y_o, p.y_h);
        }
    }

    #[test]
    fn empty_mapped_class_fails_with_class_index() {
        let (o, h) = toy_specs();
        let d_o: LoadedDataset<f32> = load_dataset(&o, Split::Train).unwrap();
        let mut d_h: LoadedDataset<f32> = load_dataset(&h, Split::Train).unwrap();
        d_h.by_class[1].clear();
        let m = LabelMapping::new(2, 2, MappingStrategy::Identity, 0).unwrap();
        match pair_samples(&d_o, &d_h, &m, 0) {
            Err(Error::EmptyClass(1)) => {}
            Err(other) => panic!("expected EmptyClass(1), got {other:?}"),
            Ok(_) => panic!("expected EmptyClass(1), got a stream"),
        }
    }

    #[test]
    fn channel_replication() {
        let g = Array3::<f32>::from_elem((1, 4, 4), 0.5);
        let rgb = to_three_channels(&g);
        assert_eq!(rgb.dim(), (3, 4, 4));
        assert!(rgb.iter().all(|&v| v == 0.5));
    }
}
