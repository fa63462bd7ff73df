//! Synthetic attribute/object datasets with linearly recoverable primitives.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{enumerate_compositions, DataError, EmbeddingTable, FeatureDataset, Result, Split, VocabSpace};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub d_img: usize,
    pub samples_per_comp: usize,
    /// Fraction of compositions withheld from training.
    pub holdout_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_attrs: 8,
            n_objs: 10,
            d_img: 64,
            samples_per_comp: 20,
            holdout_fraction: 0.2,
            noise_sigma: 0.05,
        }
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Picks `count` compositions to withhold while keeping every attribute and
/// object in at least one seen composition.
fn choose_unseen<R: Rng + ?Sized>(n: usize, m: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let cover_len = n.max(m);
    if count > n * m - cover_len {
        return Err(DataError::Generation(format!(
            "withholding {count} of {} compositions would drop an attribute or object from training",
            n * m
        )));
    }
    let mut attrs: Vec<usize> = (0..n).collect();
    let mut objs: Vec<usize> = (0..m).collect();
    attrs.shuffle(rng);
    objs.shuffle(rng);
    // pairing the i-th attribute with the i-th object (cyclically) touches
    // every primitive with max(n, m) distinct pairs
    let cover: std::collections::BTreeSet<(usize, usize)> =
        (0..cover_len).map(|i| (attrs[i % n], objs[i % m])).collect();
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..m).map(move |o| (a, o)))
        .filter(|p| !cover.contains(p))
        .collect();
    candidates.shuffle(rng);
    candidates.truncate(count);
    candidates.sort_unstable();
    Ok(candidates)
}

/// Generates a vocabulary and a train/val/test dataset.
///
/// Attribute anchors live in the first `d_img / 2` coordinates and object
/// anchors in the rest; each sample is the concatenation of its two anchors
/// plus Gaussian noise, rounded to f32 precision so the dataset survives a
/// trip through the binary feature format unchanged. Seen compositions
/// split their samples 60/20/20 across train/val/test; withheld compositions
/// appear only in the test split.
pub fn make_synthetic<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<(VocabSpace, FeatureDataset)> {
    if cfg.n_attrs == 0 || cfg.n_objs == 0 || cfg.samples_per_comp == 0 {
        return Err(DataError::Generation("sizes must be positive".into()));
    }
    if cfg.d_img < 2 {
        return Err(DataError::Generation("d_img must be at least 2".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(DataError::Generation(format!(
            "holdout fraction {} outside [0, 1)",
            cfg.holdout_fraction
        )));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(DataError::Generation("noise sigma must be finite and non-negative".into()));
    }
    let total = cfg.n_attrs * cfg.n_objs;
    let unseen_count = (cfg.holdout_fraction * total as f64).round() as usize;
    if unseen_count >= total {
        return Err(DataError::Generation("no composition left for training".into()));
    }

    let attributes = (0..cfg.n_attrs).map(|i| format!("attr{i}")).collect();
    let objects = (0..cfg.n_objs).map(|i| format!("obj{i}")).collect();
    let vocab = VocabSpace::new(attributes, objects)?;
    let unseen = choose_unseen(cfg.n_attrs, cfg.n_objs, unseen_count, rng)?;
    let seen: Vec<(usize, usize)> = enumerate_compositions(&vocab)
        .filter(|p| unseen.binary_search(p).is_err())
        .collect();
    let vocab = vocab.with_seen(seen)?;

    let attr_block = cfg.d_img / 2;
    let obj_block = cfg.d_img - attr_block;
    let attr_anchors: Vec<Vec<f64>> = (0..cfg.n_attrs).map(|_| unit_vector(rng, attr_block)).collect();
    let obj_anchors: Vec<Vec<f64>> = (0..cfg.n_objs).map(|_| unit_vector(rng, obj_block)).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| DataError::Generation(e.to_string()))?;

    let s = cfg.samples_per_comp;
    let mut dataset = FeatureDataset::empty(cfg.d_img);
    for (a, o) in enumerate_compositions(&vocab) {
        let splits: Vec<Split> = if vocab.is_seen(a, o) {
            let (val, test) = (s / 5, s / 5);
            std::iter::repeat_n(Split::Train, s - val - test)
                .chain(std::iter::repeat_n(Split::Val, val))
                .chain(std::iter::repeat_n(Split::Test, test))
                .collect()
        } else {
            vec![Split::Test; s]
        };
        let clean: Vec<f64> = attr_anchors[a].iter().chain(&obj_anchors[o]).copied().collect();
        for split in splits {
            let sample: Vec<f64> = clean
                .iter()
                .map(|&c| {
                    let x = if cfg.noise_sigma > 0.0 { c + noise.sample(rng) } else { c };
                    x as f32 as f64
                })
                .collect();
            dataset.push(&sample, a, o, split)?;
        }
    }
    Ok((vocab, dataset))
}

/// Random Gaussian word vectors for every vocabulary name.
pub fn synthetic_embeddings<R: Rng + ?Sized>(vocab: &VocabSpace, dim: usize, rng: &mut R) -> EmbeddingTable {
    let mut table = EmbeddingTable::new(dim);
    for name in vocab.attributes().iter().chain(vocab.objects()) {
        let v = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        table.insert(name.clone(), v).expect("dimension matches");
    }
    table
}
