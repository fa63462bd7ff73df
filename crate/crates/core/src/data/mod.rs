//! Vocabulary, composition space, feature and embedding ingestion.

mod embeddings;
mod features;
mod layout;
mod synthetic;

pub use embeddings::{parse_embedding_file, parse_embedding_files, parse_embedding_text, EmbeddingTable, EmbeddingWarning};
pub use features::{load_feature_file, read_feature_fragment, write_feature_file, write_feature_fragment, FeatureFragment};
pub use layout::{load_dataset_dir, write_dataset_dir, DatasetFiles};
pub use synthetic::{make_synthetic, synthetic_embeddings, SyntheticConfig};

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    Format {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("no embedding for: {}", .0.join(", "))]
    Coverage(Vec<String>),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("{what} index {index} out of range (< {bound})")]
    Range {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("feature file truncated: expected {expected} bytes, got {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature file has {extra} bytes beyond its {records} declared records")]
    HeaderMismatch { records: usize, extra: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown split id {0}")]
    UnknownSplit(u8),
    #[error("train record {record} has unseen composition ({attr}, {obj})")]
    UnseenInTrain { record: usize, attr: usize, obj: usize },
    #[error("feature dimension {found} differs from {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot generate dataset: {0}")]
    Generation(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or(DataError::UnknownSplit(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Attribute and object names plus the set of compositions seen in training.
///
/// Composition `(a, o)` has flat index `a * n_objs + o`, which is also the
/// order produced by [`enumerate_compositions`].
#[derive(Debug, Clone, PartialEq)]
pub struct VocabSpace {
    attributes: Vec<String>,
    objects: Vec<String>,
    seen: BTreeSet<(usize, usize)>,
    attr_index: HashMap<String, usize>,
    obj_index: HashMap<String, usize>,
}

fn index_names(kind: &str, names: &[String]) -> Result<HashMap<String, usize>> {
    if names.is_empty() {
        return Err(DataError::Vocabulary(format!("no {kind} names")));
    }
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if index.insert(name.clone(), i).is_some() {
            return Err(DataError::Vocabulary(format!("duplicate {kind} name {name:?}")));
        }
    }
    Ok(index)
}

impl VocabSpace {
    pub fn new(attributes: Vec<String>, objects: Vec<String>) -> Result<Self> {
        let attr_index = index_names("attribute", &attributes)?;
        let obj_index = index_names("object", &objects)?;
        Ok(VocabSpace {
            attributes,
            objects,
            seen: BTreeSet::new(),
            attr_index,
            obj_index,
        })
    }

    pub fn with_seen(mut self, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        for (a, o) in pairs {
            self.check_pair(a, o)?;
            self.seen.insert((a, o));
        }
        Ok(self)
    }

    fn check_pair(&self, a: usize, o: usize) -> Result<()> {
        if a >= self.n_attrs() {
            return Err(DataError::Range {
                what: "attribute",
                index: a,
                bound: self.n_attrs(),
            });
        }
        if o >= self.n_objs() {
            return Err(DataError::Range {
                what: "object",
                index: o,
                bound: self.n_objs(),
            });
        }
        Ok(())
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    /// Size of the open-world composition space, `n * m`.
    pub fn n_compositions(&self) -> usize {
        self.n_attrs() * self.n_objs()
    }

    pub fn attr_id(&self, name: &str) -> Option<usize> {
        self.attr_index.get(name).copied()
    }

    pub fn obj_id(&self, name: &str) -> Option<usize> {
        self.obj_index.get(name).copied()
    }

    pub fn composition_index(&self, attr: usize, obj: usize) -> usize {
        attr * self.n_objs() + obj
    }

    pub fn composition(&self, index: usize) -> (usize, usize) {
        (index / self.n_objs(), index % self.n_objs())
    }

    pub fn seen(&self) -> &BTreeSet<(usize, usize)> {
        &self.seen
    }

    pub fn is_seen(&self, attr: usize, obj: usize) -> bool {
        self.seen.contains(&(attr, obj))
    }

    /// Seen flag per composition, in enumeration order.
    pub fn seen_mask(&self) -> Vec<bool> {
        enumerate_compositions(self)
            .map(|(a, o)| self.is_seen(a, o))
            .collect()
    }

    pub fn validate_labels(&self, attr: usize, obj: usize) -> Result<()> {
        self.check_pair(attr, obj)
    }
}

/// Row-major enumeration of the full `A × O` space.
pub fn enumerate_compositions(vocab: &VocabSpace) -> impl ExactSizeIterator<Item = (usize, usize)> + '_ {
    let m = vocab.n_objs();
    (0..vocab.n_compositions()).map(move |i| (i / m, i % m))
}

/// Image features with primitive labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    features: Vec<f64>,
    pub attr_labels: Vec<usize>,
    pub obj_labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl FeatureDataset {
    pub fn empty(dim: usize) -> Self {
        FeatureDataset {
            dim,
            features: Vec::new(),
            attr_labels: Vec::new(),
            obj_labels: Vec::new(),
            splits: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.attr_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attr_labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, feature: &[f64], attr: usize, obj: usize, split: Split) -> Result<()> {
        if feature.len() != self.dim {
            return Err(DataError::DimensionMismatch {
                expected: self.dim,
                found: feature.len(),
            });
        }
        self.features.extend_from_slice(feature);
        self.attr_labels.push(attr);
        self.obj_labels.push(obj);
        self.splits.push(split);
        Ok(())
    }

    pub fn extend_from_fragment(&mut self, fragment: &FeatureFragment) -> Result<()> {
        if !fragment.is_empty() && fragment.dim != self.dim {
            return Err(DataError::DimensionMismatch {
                expected: self.dim,
                found: fragment.dim,
            });
        }
        for i in 0..fragment.len() {
            let row: Vec<f64> = fragment.feature(i).iter().map(|&v| v as f64).collect();
            self.push(&row, fragment.attr_labels[i], fragment.obj_labels[i], fragment.split)?;
        }
        Ok(())
    }

    /// Records of one split, as a fragment in the on-disk precision.
    pub fn fragment(&self, split: Split) -> FeatureFragment {
        let idx = self.indices(split);
        FeatureFragment {
            split,
            dim: self.dim,
            features: idx
                .iter()
                .flat_map(|&i| self.feature(i).iter().map(|&v| v as f32))
                .collect(),
            attr_labels: idx.iter().map(|&i| self.attr_labels[i]).collect(),
            obj_labels: idx.iter().map(|&i| self.obj_labels[i]).collect(),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Feature rows for `indices` as a `[len × dim]` matrix.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.feature(i).iter().copied()).collect();
        Tensor::matrix(indices.len(), self.dim, data).expect("non-empty batch")
    }

    pub fn composition_of(&self, i: usize, vocab: &VocabSpace) -> usize {
        vocab.composition_index(self.attr_labels[i], self.obj_labels[i])
    }

    /// Label ranges against `vocab` and the train ⊆ seen invariant.
    pub fn validate(&self, vocab: &VocabSpace) -> Result<()> {
        for i in 0..self.len() {
            let (a, o) = (self.attr_labels[i], self.obj_labels[i]);
            vocab.validate_labels(a, o)?;
            if self.splits[i] == Split::Train && !vocab.is_seen(a, o) {
                return Err(DataError::UnseenInTrain {
                    record: i,
                    attr: a,
                    obj: o,
                });
            }
        }
        Ok(())
    }
}
