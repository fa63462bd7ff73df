//! Knowledge-graph feasibility of compositions and the mask derived from it.
//!
//! Scores live in `[-1, 1]`; a composition is feasible when its score is
//! strictly above the threshold.

mod remote;

pub use remote::{
    cache_path, fetch_table, FetchStats, HttpResponse, RelatednessCache, RelatednessClient, ClientConfig, Transport,
    TransportError, UreqTransport, CACHE_DIR_ENV, DEFAULT_BASE_URL,
};

use std::path::{Path, PathBuf};

use crate::data::VocabSpace;

#[derive(Debug, thiserror::Error)]
pub enum FeasibilityError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown {kind} {name:?}")]
    Vocabulary { line: usize, kind: &'static str, name: String },
    #[error("line {line}: score {value} outside [-1, 1]")]
    Range { line: usize, value: f64 },
    #[error("table is {found_n}×{found_m}, vocabulary is {n}×{m}")]
    Shape { found_n: usize, found_m: usize, n: usize, m: usize },
    #[error("{url}: giving up after {attempts} attempts: {last}")]
    Network { url: String, attempts: usize, last: String },
    #[error("{url}: HTTP {status}")]
    Http { url: String, status: u16 },
    #[error("{url}: malformed response: {message}")]
    BadResponse { url: String, message: String },
    #[error("invalid base URL {0:?}")]
    BaseUrl(String),
}

pub type Result<T> = std::result::Result<T, FeasibilityError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeasibilityError + '_ {
    move |source| FeasibilityError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    OfflineFile,
    RemoteService,
    /// No knowledge source; every composition is admitted.
    AllFeasible,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::OfflineFile => "offline-file",
            Provenance::RemoteService => "remote-service",
            Provenance::AllFeasible => "all-feasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityTable {
    n: usize,
    m: usize,
    /// Row-major `[n × m]`, composition enumeration order.
    scores: Vec<f64>,
    pub provenance: Provenance,
}

impl FeasibilityTable {
    pub fn zeros(vocab: &VocabSpace, provenance: Provenance) -> Self {
        FeasibilityTable {
            n: vocab.n_attrs(),
            m: vocab.n_objs(),
            scores: vec![0.0; vocab.n_compositions()],
            provenance,
        }
    }

    /// Every score 1.
    pub fn all_feasible(vocab: &VocabSpace) -> Self {
        FeasibilityTable {
            scores: vec![1.0; vocab.n_compositions()],
            ..Self::zeros(vocab, Provenance::AllFeasible)
        }
    }

    pub fn n_attrs(&self) -> usize {
        self.n
    }

    pub fn n_objs(&self) -> usize {
        self.m
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, attr: usize, obj: usize) -> f64 {
        self.scores[attr * self.m + obj]
    }

    /// Panics if `score` is outside `[-1, 1]`.
    pub fn set(&mut self, attr: usize, obj: usize, score: f64) {
        assert!((-1.0..=1.0).contains(&score), "score {score} outside [-1, 1]");
        self.scores[attr * self.m + obj] = score;
    }

    pub fn check_vocab(&self, vocab: &VocabSpace) -> Result<()> {
        if self.n != vocab.n_attrs() || self.m != vocab.n_objs() {
            return Err(FeasibilityError::Shape {
                found_n: self.n,
                found_m: self.m,
                n: vocab.n_attrs(),
                m: vocab.n_objs(),
            });
        }
        Ok(())
    }
}

/// True where the score is strictly above `threshold`. An all-feasible
/// table admits everything regardless of threshold.
pub fn feasibility_mask(table: &FeasibilityTable, threshold: f64) -> Vec<bool> {
    match table.provenance {
        Provenance::AllFeasible => vec![true; table.scores.len()],
        _ => table.scores.iter().map(|&s| s > threshold).collect(),
    }
}

/// Reads `attribute<TAB>object<TAB>score` lines. Pairs absent from the text
/// score 0; their count is returned alongside the table.
pub fn parse_feasibility(text: &str, vocab: &VocabSpace) -> Result<(FeasibilityTable, usize)> {
    let mut table = FeasibilityTable::zeros(vocab, Provenance::OfflineFile);
    let mut present = vec![false; vocab.n_compositions()];
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(FeasibilityError::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let unknown = |kind, name: &str| FeasibilityError::Vocabulary {
            line: line_no,
            kind,
            name: name.to_string(),
        };
        let a = vocab.attr_id(fields[0]).ok_or_else(|| unknown("attribute", fields[0]))?;
        let o = vocab.obj_id(fields[1]).ok_or_else(|| unknown("object", fields[1]))?;
        let value: f64 = fields[2].trim().parse().map_err(|_| FeasibilityError::Parse {
            line: line_no,
            message: format!("bad score {:?}", fields[2]),
        })?;
        if !(-1.0..=1.0).contains(&value) {
            return Err(FeasibilityError::Range { line: line_no, value });
        }
        table.set(a, o, value);
        present[vocab.composition_index(a, o)] = true;
    }
    let missing = present.iter().filter(|&&p| !p).count();
    Ok((table, missing))
}

pub fn load_feasibility(path: impl AsRef<Path>, vocab: &VocabSpace) -> Result<(FeasibilityTable, usize)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let (table, missing) = parse_feasibility(&text, vocab)?;
    if missing > 0 {
        log::warn!(
            "{}: {missing} of {} compositions absent, scored 0",
            path.display(),
            vocab.n_compositions()
        );
    }
    Ok((table, missing))
}

/// One line per composition in enumeration order, scores in shortest
/// round-trip form.
pub fn format_feasibility(table: &FeasibilityTable, vocab: &VocabSpace) -> Result<String> {
    table.check_vocab(vocab)?;
    let mut out = String::new();
    for (a, attr) in vocab.attributes().iter().enumerate() {
        for (o, obj) in vocab.objects().iter().enumerate() {
            out.push_str(&format!("{attr}\t{obj}\t{}\n", table.get(a, o)));
        }
    }
    Ok(out)
}

pub fn save_feasibility(table: &FeasibilityTable, vocab: &VocabSpace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_feasibility(table, vocab)?).map_err(io_err(path))
}
