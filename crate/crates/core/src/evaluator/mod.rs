//! Open-world evaluation: a scalar bias added to every seen composition
//! score is swept from −∞ to +∞, tracing seen accuracy against unseen
//! accuracy. Negative bias favors unseen compositions.
//!
//! The sweep is exact. For each image only two candidates can ever win: the
//! best feasible seen composition and the best feasible unseen one. The bias
//! at which they swap is their score difference, so the curve changes only
//! at those differences and is evaluated once per distinct crossing.

mod report;

pub use report::{format_curve_csv, parse_curve_csv, read_curve_csv, report, write_curve_csv, Summary};

use std::path::PathBuf;

use crate::data::{FeatureDataset, Split, VocabSpace};
use crate::model::{composition_scores, Mode, ModelError, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feasibility mask admits no composition")]
    EmptyFeasibleSet,
    #[error("non-finite composition score for image {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    /// Ascending bias. A point at bias `b` describes every bias in
    /// `[b, next)`, where an image whose crossing equals `b` predicts seen.
    pub points: Vec<CurvePoint>,
    pub auc: f64,
    pub best_hm: f64,
    pub best_seen: f64,
    pub best_unseen: f64,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

/// Trapezoid area under unseen accuracy as a function of seen accuracy,
/// taken over consecutive points.
pub fn curve_auc(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].seen_acc - w[0].seen_acc) * (w[0].unseen_acc + w[1].unseen_acc) / 2.0)
        .sum()
}

impl EvalCurve {
    pub fn from_points(points: Vec<CurvePoint>) -> Self {
        let best_seen = points.iter().map(|p| p.seen_acc).fold(0.0, f64::max);
        let best_unseen = points.iter().map(|p| p.unseen_acc).fold(0.0, f64::max);
        let best_hm = points
            .iter()
            .map(|p| harmonic_mean(p.seen_acc, p.unseen_acc))
            .fold(0.0, f64::max);
        EvalCurve {
            auc: curve_auc(&points),
            points,
            best_hm,
            best_seen,
            best_unseen,
        }
    }

    /// The point with the highest harmonic mean; the first wins ties.
    pub fn best_hm_point(&self) -> Option<&CurvePoint> {
        let mut best: Option<&CurvePoint> = None;
        for p in &self.points {
            if best.is_none_or(|b| harmonic_mean(p.seen_acc, p.unseen_acc) > harmonic_mean(b.seen_acc, b.unseen_acc)) {
                best = Some(p);
            }
        }
        best
    }
}

/// Positions of `gt` whose composition is seen and whose composition is
/// unseen.
pub fn partition_by_ground_truth(gt: &[usize], seen_comp: &[bool]) -> (Vec<usize>, Vec<usize>) {
    (0..gt.len()).partition(|&i| seen_comp[gt[i]])
}

/// Dataset indices of `split` whose composition is seen, and those whose
/// composition is unseen.
pub fn split_seen_unseen(dataset: &FeatureDataset, split: Split, vocab: &VocabSpace) -> (Vec<usize>, Vec<usize>) {
    dataset
        .indices(split)
        .into_iter()
        .partition(|&i| vocab.is_seen(dataset.attr_labels[i], dataset.obj_labels[i]))
}

/// Best feasible column and its score among columns where `want` matches the
/// seen flag; lowest index on ties.
fn best_in(row: &[f64], seen_comp: &[bool], feasible: Option<&[bool]>, want: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (c, &s) in row.iter().enumerate() {
        if seen_comp[c] != want || feasible.is_some_and(|f| !f[c]) {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best
}

fn accuracy(correct: usize, total: usize, what: &str, warned: &mut bool) -> f64 {
    if total == 0 {
        if !*warned {
            log::warn!("no {what} images; {what} accuracy reported as 0");
            *warned = true;
        }
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Exact seen/unseen bias sweep.
///
/// `scores` is `[N × C]` composition scores, `seen_comp` flags the seen
/// columns, `gt` holds each image's ground-truth column and `feasible`, when
/// given, removes columns from the argmax. An image counts toward seen
/// accuracy if its ground truth is a seen composition.
pub fn sweep_bias(scores: &Tensor, seen_comp: &[bool], gt: &[usize], feasible: Option<&[bool]>) -> Result<EvalCurve> {
    sweep(scores, seen_comp, gt, feasible, true)
}

fn sweep(
    scores: &Tensor,
    seen_comp: &[bool],
    gt: &[usize],
    feasible: Option<&[bool]>,
    warn_empty: bool,
) -> Result<EvalCurve> {
    let (n, c) = (scores.rows(), scores.cols());
    if seen_comp.len() != c || gt.len() != n || feasible.is_some_and(|f| f.len() != c) {
        return Err(EvalError::Shape(format!(
            "{n}×{c} scores with {} seen flags, {} labels, {:?} feasibility flags",
            seen_comp.len(),
            gt.len(),
            feasible.map(<[bool]>::len)
        )));
    }
    if let Some(&bad) = gt.iter().find(|&&g| g >= c) {
        return Err(EvalError::Shape(format!("label {bad} out of range for {c} compositions")));
    }
    if feasible.is_some_and(|f| !f.iter().any(|&x| x)) {
        return Err(EvalError::EmptyFeasibleSet);
    }

    let (seen_imgs, unseen_imgs) = partition_by_ground_truth(gt, seen_comp);
    // per image: correct when predicting seen, correct when predicting
    // unseen, crossing bias (−∞: always seen, +∞: never seen)
    let mut flips: Vec<(f64, usize)> = Vec::new();
    let mut right_seen = vec![false; n];
    let mut right_unseen = vec![false; n];
    let mut predicts_seen = vec![false; n];
    for i in 0..n {
        let row = scores.row(i);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite(i));
        }
        let bs = best_in(row, seen_comp, feasible, true);
        let bu = best_in(row, seen_comp, feasible, false);
        right_seen[i] = bs.is_some_and(|(col, _)| col == gt[i]);
        right_unseen[i] = bu.is_some_and(|(col, _)| col == gt[i]);
        match (bs, bu) {
            (Some((_, s)), Some((_, u))) => flips.push((u - s, i)),
            (Some(_), None) => predicts_seen[i] = true,
            _ => {}
        }
    }
    flips.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let correct = |predicts_seen: &[bool], imgs: &[usize]| {
        imgs.iter()
            .filter(|&&i| if predicts_seen[i] { right_seen[i] } else { right_unseen[i] })
            .count()
    };
    // callers that warned already start with both flags set
    let (mut warned_seen, mut warned_unseen) = (!warn_empty, !warn_empty);
    let mut point = |bias: f64, state: &[bool]| CurvePoint {
        bias,
        seen_acc: accuracy(correct(state, &seen_imgs), seen_imgs.len(), "seen", &mut warned_seen),
        unseen_acc: accuracy(correct(state, &unseen_imgs), unseen_imgs.len(), "unseen", &mut warned_unseen),
    };

    let mut points = vec![point(f64::NEG_INFINITY, &predicts_seen)];
    let mut k = 0;
    while k < flips.len() {
        let t = flips[k].0;
        while k < flips.len() && flips[k].0 == t {
            predicts_seen[flips[k].1] = true;
            k += 1;
        }
        points.push(point(t, &predicts_seen));
    }
    points.push(point(f64::INFINITY, &predicts_seen));
    Ok(EvalCurve::from_points(points))
}

/// Composition scores for the given dataset rows, computed in eval mode in
/// independent chunks.
pub fn score_dataset(params: &ModelParams, dataset: &FeatureDataset, indices: &[usize]) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let c = params.n_attrs() * params.n_objs();
    if indices.is_empty() {
        return Err(EvalError::Shape("no images to score".into()));
    }
    let chunks: Vec<&[usize]> = indices.chunks(CHUNK).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len());
    let results: Vec<std::result::Result<Tensor, ModelError>> = if threads <= 1 {
        chunks
            .iter()
            .map(|ch| Ok(composition_scores(&params.forward(&dataset.batch(ch), Mode::Eval)?)))
            .collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| {
                    s.spawn(move || {
                        group
                            .iter()
                            .map(|ch| Ok(composition_scores(&params.forward(&dataset.batch(ch), Mode::Eval)?)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("scoring thread panicked")).collect()
        })
    };
    let mut data = Vec::with_capacity(indices.len() * c);
    for r in results {
        data.extend_from_slice(r?.data());
    }
    Ok(Tensor::matrix(indices.len(), c, data).expect("non-empty"))
}

/// Scores the `split` rows of `dataset` and sweeps the bias.
pub fn evaluate(
    params: &ModelParams,
    vocab: &VocabSpace,
    dataset: &FeatureDataset,
    split: Split,
    feasible: Option<&[bool]>,
) -> Result<EvalCurve> {
    evaluate_split(params, vocab, dataset, split, feasible, true)
}

pub(crate) fn evaluate_split(
    params: &ModelParams,
    vocab: &VocabSpace,
    dataset: &FeatureDataset,
    split: Split,
    feasible: Option<&[bool]>,
    warn_empty: bool,
) -> Result<EvalCurve> {
    let indices = dataset.indices(split);
    let scores = score_dataset(params, dataset, &indices)?;
    let gt: Vec<usize> = indices.iter().map(|&i| dataset.composition_of(i, vocab)).collect();
    sweep(&scores, &vocab.seen_mask(), &gt, feasible, warn_empty)
}
