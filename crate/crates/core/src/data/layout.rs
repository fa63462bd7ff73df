//! On-disk dataset directory: `attributes.txt`, `objects.txt`,
//! `{train,val,test}_pairs.txt` (one `attr<TAB>obj` per line) and one
//! binary feature file per split, `{train,val,test}.aspf`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::{io_err, load_feature_file, write_feature_file, DataError, FeatureDataset, Result, Split, VocabSpace};

/// File names inside a dataset directory.
pub struct DatasetFiles;

impl DatasetFiles {
    pub const ATTRIBUTES: &'static str = "attributes.txt";
    pub const OBJECTS: &'static str = "objects.txt";

    pub fn pairs(split: Split) -> String {
        format!("{}_pairs.txt", split.name())
    }

    pub fn features(split: Split) -> String {
        format!("{}.aspf", split.name())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.trim().is_empty())
        .collect())
}

pub fn read_pairs(path: &Path, vocab: &VocabSpace) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (a, o) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: i + 1,
            message: format!("{}: expected attr<TAB>obj", path.display()),
        })?;
        let attr = vocab
            .attr_id(a)
            .ok_or_else(|| DataError::Vocabulary(format!("{}:{}: unknown attribute {a:?}", path.display(), i + 1)))?;
        let obj = vocab
            .obj_id(o)
            .ok_or_else(|| DataError::Vocabulary(format!("{}:{}: unknown object {o:?}", path.display(), i + 1)))?;
        pairs.push((attr, obj));
    }
    Ok(pairs)
}

fn write_text(path: PathBuf, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(io_err(path))
}

/// Writes vocabulary, per-split pair lists and feature files into `dir`.
pub fn write_dataset_dir(dir: impl AsRef<Path>, vocab: &VocabSpace, dataset: &FeatureDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_text(dir.join(DatasetFiles::ATTRIBUTES), vocab.attributes().iter().cloned())?;
    write_text(dir.join(DatasetFiles::OBJECTS), vocab.objects().iter().cloned())?;
    for split in Split::ALL {
        let mut comps: BTreeSet<(usize, usize)> = dataset
            .indices(split)
            .into_iter()
            .map(|i| (dataset.attr_labels[i], dataset.obj_labels[i]))
            .collect();
        if split == Split::Train {
            // the seen set is defined by the train pairs file
            comps.extend(vocab.seen().iter().copied());
        }
        write_text(
            dir.join(DatasetFiles::pairs(split)),
            comps
                .into_iter()
                .map(|(a, o)| format!("{}\t{}", vocab.attributes()[a], vocab.objects()[o])),
        )?;
        write_feature_file(dir.join(DatasetFiles::features(split)), &dataset.fragment(split))?;
    }
    Ok(())
}

/// Loads a dataset directory. The seen set is the train pair list; split
/// feature files other than train are optional.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<(VocabSpace, FeatureDataset)> {
    let dir = dir.as_ref();
    let attrs = read_lines(&dir.join(DatasetFiles::ATTRIBUTES))?;
    let objs = read_lines(&dir.join(DatasetFiles::OBJECTS))?;
    let vocab = VocabSpace::new(attrs, objs)?;
    let seen = read_pairs(&dir.join(DatasetFiles::pairs(Split::Train)), &vocab)?;
    let vocab = vocab.with_seen(seen)?;

    let mut dataset: Option<FeatureDataset> = None;
    for split in Split::ALL {
        let path = dir.join(DatasetFiles::features(split));
        if split != Split::Train && !path.exists() {
            continue;
        }
        let fragment = load_feature_file(&path, &vocab)?;
        if fragment.split != split {
            return Err(DataError::Vocabulary(format!(
                "{} is tagged as the {} split",
                path.display(),
                fragment.split.name()
            )));
        }
        let ds = dataset.get_or_insert_with(|| FeatureDataset::empty(fragment.dim));
        ds.extend_from_fragment(&fragment)?;
    }
    let dataset = dataset.expect("train split is always read");
    dataset.validate(&vocab)?;
    Ok((vocab, dataset))
}
