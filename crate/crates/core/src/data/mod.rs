//! Dataset ingestion: decode, resize, label, split and batch.
//!
//! On disk a dataset is one directory per cell-type folder, each holding
//! images. Folders are mapped onto the two target classes through a
//! [`ClassMapping`].

mod image;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::image::{decode_image, decode_ppm, resize_bilinear};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// The two white-blood-cell groups the model separates. The discriminant is
/// the class index; it follows the lexicographic order of the names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CellClass {
    Mononuclear = 0,
    Polynuclear = 1,
}

impl CellClass {
    pub const ALL: [CellClass; 2] = [CellClass::Mononuclear, CellClass::Polynuclear];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Mononuclear => "MONONUCLEAR",
            CellClass::Polynuclear => "POLYNUCLEAR",
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        CellClass::ALL.get(i).copied()
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Folder name to class table. Every folder found during ingestion must
/// appear here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMapping {
    table: BTreeMap<String, CellClass>,
}

impl Default for ClassMapping {
    /// Lymphocytes and monocytes are mononuclear; neutrophils and
    /// eosinophils are polynuclear.
    fn default() -> Self {
        ClassMapping::new([
            ("LYMPHOCYTE", CellClass::Mononuclear),
            ("MONOCYTE", CellClass::Mononuclear),
            ("NEUTROPHIL", CellClass::Polynuclear),
            ("EOSINOPHIL", CellClass::Polynuclear),
        ])
    }
}

impl ClassMapping {
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, CellClass)>) -> Self {
        ClassMapping {
            table: entries.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    /// Reads `{"FOLDER": "MONONUCLEAR" | "POLYNUCLEAR", ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid class mapping: {e}")))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn class_of(&self, folder: &str) -> Option<CellClass> {
        self.table.get(folder).copied()
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[h, w, 3]` with values on the 0..=255 scale.
    pub image: Tensor<f32>,
    pub label: CellClass,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    image_shape: Shape,
    samples: Vec<Sample>,
}

fn one_hot(label: CellClass) -> [f32; 2] {
    let mut v = [0.0; 2];
    v[label.index()] = 1.0;
    v
}

impl LabeledDataset {
    pub fn new(image_shape: Shape, samples: Vec<Sample>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| s.image.shape() != &image_shape) {
            return Err(Error::shape(format!(
                "{} has shape {}, expected {image_shape}",
                bad.path.display(),
                bad.image.shape()
            )));
        }
        Ok(LabeledDataset { image_shape, samples })
    }

    pub fn image_shape(&self) -> &Shape {
        &self.image_shape
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_names(&self) -> [&'static str; 2] {
        CellClass::ALL.map(CellClass::name)
    }

    /// Sample count per class index.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    fn subset(&self, mut indices: Vec<usize>) -> LabeledDataset {
        indices.sort_unstable();
        LabeledDataset {
            image_shape: self.image_shape.clone(),
            samples: indices.into_iter().map(|i| self.samples[i].clone()).collect(),
        }
    }

    /// Splits each class proportionally after a seeded shuffle. Both halves
    /// keep the original sample order.
    pub fn split_stratified(&self, val_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0, 1), got {val_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SPLIT_STREAM);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in CellClass::ALL {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].label == class).collect();
            if idx.is_empty() && val_fraction > 0.0 {
                return Err(Error::Data(format!("class {class} has no samples to split")));
            }
            idx.shuffle(&mut rng);
            let n_val = (idx.len() as f64 * val_fraction).round() as usize;
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        Ok((self.subset(train), self.subset(val)))
    }

    /// Minibatches in a fresh order for each `(seed, epoch)` pair. The last
    /// batch holds the remainder.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Batches::new(self, order, batch_size)
    }

    /// Minibatches in storage order.
    pub fn ordered_batches(&self, batch_size: usize) -> Result<Batches<'_>> {
        Batches::new(self, (0..self.len()).collect(), batch_size)
    }
}

const SPLIT_STREAM: u64 = u64::MAX - 1;

/// Iterator of `(images [b, h, w, c], one-hot targets [b, 2])`.
pub struct Batches<'a> {
    data: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    fn new(data: &'a LabeledDataset, order: Vec<usize>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Batches {
            data,
            order,
            batch_size,
            pos: 0,
        })
    }

    /// Sample indices in the order they will be yielded.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Tensor<f32>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let per = self.data.image_shape.numel();
        let mut images = Vec::with_capacity(idx.len() * per);
        let mut targets = Vec::with_capacity(idx.len() * 2);
        for &i in idx {
            let s = &self.data.samples[i];
            images.extend_from_slice(s.image.data());
            targets.extend_from_slice(&one_hot(s.label));
        }
        let shape = self.data.image_shape.with_batch(idx.len()).expect("non-empty batch");
        Some((
            Tensor::from_shape_vec(shape, images).expect("sized by shape"),
            Tensor::from_vec(&[idx.len(), 2], targets).expect("sized by shape"),
        ))
    }
}

fn is_hidden(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !is_hidden(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads and resizes one image file to `target` (`[h, w, 3]`).
pub fn load_image(path: &Path, target: &Shape) -> Result<Tensor<f32>> {
    let &[h, w, 3] = target.dims() else {
        return Err(Error::shape(format!("target shape must be [h, w, 3], got {target}")));
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = decode_image(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    resize_bilinear(&img, [h, w])
}

/// Loads every image under `root/<FOLDER>/`, labelling it through `mapping`.
///
/// Files are processed in lexicographic path order. An unmapped folder or
/// an undecodable file aborts the whole load.
pub fn load_dataset(root: impl AsRef<Path>, mapping: &ClassMapping, target: &Shape) -> Result<LabeledDataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut files: Vec<(PathBuf, CellClass)> = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let folder = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let class = mapping
            .class_of(&folder)
            .ok_or_else(|| Error::Config(format!("folder {folder:?} is not in the class mapping")))?;
        for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()) {
            files.push((file, class));
        }
    }
    if files.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let samples = files
        .into_par_iter()
        .map(|(path, label)| {
            let image = load_image(&path, target)?;
            Ok(Sample { image, label, path })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(target.clone(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn synthetic(per_class: usize) -> LabeledDataset {
        let shape = Shape::new(vec![2, 2, 3]).unwrap();
        let samples = (0..2 * per_class)
            .map(|i| Sample {
                image: Tensor::full(&[2, 2, 3], i as f32).unwrap(),
                label: if i % 2 == 0 {
                    CellClass::Mononuclear
                } else {
                    CellClass::Polynuclear
                },
                path: PathBuf::from(format!("img{i:04}.ppm")),
            })
            .collect();
        LabeledDataset::new(shape, samples).unwrap()
    }

    #[test]
    fn default_mapping_groups() {
        let m = ClassMapping::default();
        assert_eq!(m.class_of("EOSINOPHIL"), Some(CellClass::Polynuclear));
        assert_eq!(m.class_of("NEUTROPHIL"), Some(CellClass::Polynuclear));
        assert_eq!(m.class_of("LYMPHOCYTE"), Some(CellClass::Mononuclear));
        assert_eq!(m.class_of("MONOCYTE"), Some(CellClass::Mononuclear));
        assert_eq!(m.class_of("BASOPHIL"), None);
    }

    #[test]
    fn mapping_json() {
        let m = ClassMapping::from_json(r#"{"A": "MONONUCLEAR", "B": "POLYNUCLEAR"}"#).unwrap();
        assert_eq!(m.class_of("B"), Some(CellClass::Polynuclear));
        assert!(matches!(
            ClassMapping::from_json(r#"{"A": "OTHER"}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn class_names_are_sorted() {
        let d = synthetic(1);
        let names = d.class_names();
        assert_eq!(names, ["MONONUCLEAR", "POLYNUCLEAR"]);
        assert!(names[0] < names[1]);
    }

    #[test]
    fn split_proportions() {
        let d = synthetic(100);
        let (train, val) = d.split_stratified(0.2, 7).unwrap();
        assert_eq!(train.class_counts(), [80, 80]);
        assert_eq!(val.class_counts(), [20, 20]);

        let (all, none) = d.split_stratified(0.0, 7).unwrap();
        assert_eq!(all.len(), 200);
        assert!(none.is_empty());

        assert!(matches!(d.split_stratified(1.0, 7), Err(Error::Config(_))));
        assert!(matches!(d.split_stratified(-0.1, 7), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_deterministic_disjoint_and_exhaustive() {
        let d = synthetic(50);
        let (t1, v1) = d.split_stratified(0.3, 11).unwrap();
        let (t2, v2) = d.split_stratified(0.3, 11).unwrap();
        let paths = |ds: &LabeledDataset| ds.samples().iter().map(|s| s.path.clone()).collect::<Vec<_>>();
        assert_eq!(paths(&t1), paths(&t2));
        assert_eq!(paths(&v1), paths(&v2));
        let a: HashSet<_> = paths(&t1).into_iter().collect();
        let b: HashSet<_> = paths(&v1).into_iter().collect();
        assert!(a.is_disjoint(&b));
        let all: HashSet<_> = paths(&d).into_iter().collect();
        assert_eq!(a.union(&b).cloned().collect::<HashSet<_>>(), all);
    }

    #[test]
    fn batch_sizes_and_one_hot() {
        let d = synthetic(5);
        let sizes: Vec<usize> = d.batches(4, 0, 1).unwrap().map(|(x, _)| x.dims()[0]).collect();
        assert_eq!(sizes, [4, 4, 2]);
        for (x, y) in d.ordered_batches(3).unwrap() {
            assert_eq!(x.dims()[1..], [2, 2, 3]);
            for row in y.data().chunks(2) {
                assert_eq!(row.iter().sum::<f32>(), 1.0);
            }
        }
        let (_, y) = d.ordered_batches(2).unwrap().next().unwrap();
        // sample 1 is polynuclear
        assert_eq!(&y.data()[2..4], &[0.0, 1.0]);
        assert!(matches!(d.batches(0, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn epochs_reshuffle() {
        let d = synthetic(20);
        let mut differing = 0;
        for seed in 0..100 {
            let a = d.batches(8, seed, 1).unwrap().order().to_vec();
            let b = d.batches(8, seed, 2).unwrap().order().to_vec();
            assert_eq!(a, d.batches(8, seed, 1).unwrap().order());
            if a != b {
                differing += 1;
            }
        }
        assert_eq!(differing, 100);
    }

    proptest::proptest! {
        #[test]
        fn split_partitions_the_input(per_class in 1usize..30, frac in 0.0f64..0.95, seed in proptest::prelude::any::<u64>()) {
            let d = synthetic(per_class);
            let (train, val) = d.split_stratified(frac, seed).unwrap();
            let mut paths: Vec<_> = train.samples().iter().chain(val.samples()).map(|s| s.path.clone()).collect();
            paths.sort();
            let mut all: Vec<_> = d.samples().iter().map(|s| s.path.clone()).collect();
            all.sort();
            proptest::prop_assert_eq!(paths, all);
        }

        #[test]
        fn one_hot_rows_sum_to_one(per_class in 1usize..20, batch in 1usize..9, seed in 0u64..100, epoch in 1u64..5) {
            let d = synthetic(per_class);
            let mut seen = 0;
            for (x, y) in d.batches(batch, seed, epoch).unwrap() {
                proptest::prop_assert_eq!(x.dims()[0], y.dims()[0]);
                seen += y.dims()[0];
                for row in y.data().chunks(2) {
                    proptest::prop_assert_eq!(row.iter().sum::<f32>(), 1.0);
                }
            }
            proptest::prop_assert_eq!(seen, d.len());
        }
    }
}
