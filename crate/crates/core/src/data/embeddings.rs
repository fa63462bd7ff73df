//! Whitespace-delimited word embedding files (word2vec / fastText text
//! format): an optional `<count> <dim>` header line, then one `token v1 .. vd`
//! record per line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{io_err, DataError, Result, VocabSpace};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingWarning {
    /// A word occurred more than once; the record on `line` replaced it.
    DuplicateWord { word: String, line: usize },
    /// A token of a multi-word name has no vector and counts as zeros.
    MissingToken { name: String, token: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<Option<Vec<f64>>> {
        if vector.len() != self.dim {
            return Err(DataError::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        Ok(self.vectors.insert(word.into(), vector))
    }

    /// Vector for a vocabulary name. Tries the name verbatim, then with
    /// spaces joined by underscores, then the mean of its tokens (split on
    /// whitespace and underscores) where tokens without a vector count as
    /// zero vectors. `None` when no token resolves.
    pub fn lookup_name(&self, name: &str, warnings: &mut Vec<EmbeddingWarning>) -> Option<Vec<f64>> {
        if let Some(v) = self.get(name) {
            return Some(v.to_vec());
        }
        let joined = name.split_whitespace().collect::<Vec<_>>().join("_");
        if let Some(v) = self.get(&joined) {
            return Some(v.to_vec());
        }
        let tokens: Vec<&str> = name
            .split(|c: char| c.is_whitespace() || c == '_')
            .filter(|t| !t.is_empty())
            .collect();
        let mut sum = vec![0.0; self.dim];
        let mut found = 0;
        let mut missing = Vec::new();
        for t in &tokens {
            match self.get(t) {
                Some(v) => {
                    found += 1;
                    for (s, x) in sum.iter_mut().zip(v) {
                        *s += x;
                    }
                }
                None => missing.push(*t),
            }
        }
        if found == 0 {
            return None;
        }
        for token in missing {
            log::warn!("embedding for {name:?}: token {token:?} missing, using zeros");
            warnings.push(EmbeddingWarning::MissingToken {
                name: name.to_string(),
                token: token.to_string(),
            });
        }
        let count = tokens.len() as f64;
        Some(sum.into_iter().map(|s| s / count).collect())
    }

    /// Table restricted to the attribute and object names of `vocab`.
    pub fn resolve(&self, vocab: &VocabSpace) -> Result<(EmbeddingTable, Vec<EmbeddingWarning>)> {
        let mut out = EmbeddingTable::new(self.dim);
        let mut warnings = Vec::new();
        let mut uncovered = Vec::new();
        for name in vocab.attributes().iter().chain(vocab.objects()) {
            if out.vectors.contains_key(name) {
                continue;
            }
            match self.lookup_name(name, &mut warnings) {
                Some(v) => {
                    out.vectors.insert(name.clone(), v);
                }
                None => uncovered.push(name.clone()),
            }
        }
        if !uncovered.is_empty() {
            return Err(DataError::Coverage(uncovered));
        }
        Ok((out, warnings))
    }

    /// Per-word concatenation `[self | other]` over the words both share.
    pub fn concat(&self, other: &EmbeddingTable) -> Result<EmbeddingTable> {
        let missing: Vec<String> = self
            .vectors
            .keys()
            .filter(|k| !other.vectors.contains_key(*k))
            .chain(other.vectors.keys().filter(|k| !self.vectors.contains_key(*k)))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(DataError::Coverage(missing));
        }
        let mut out = EmbeddingTable::new(self.dim + other.dim);
        for (word, v) in &self.vectors {
            let mut joined = v.clone();
            joined.extend_from_slice(&other.vectors[word]);
            out.vectors.insert(word.clone(), joined);
        }
        Ok(out)
    }

    /// Stacks the vectors for `names` into a `[len × dim]` matrix.
    pub fn matrix_for(&self, names: &[String]) -> Result<Tensor> {
        let missing: Vec<String> = names.iter().filter(|n| self.get(n).is_none()).cloned().collect();
        if !missing.is_empty() {
            return Err(DataError::Coverage(missing));
        }
        let data = names.iter().flat_map(|n| self.vectors[n].iter().copied()).collect();
        Ok(Tensor::matrix(names.len(), self.dim, data).expect("vocabulary is non-empty"))
    }

    /// Writes the table with a header line. Values use the shortest
    /// representation that parses back to the same f64.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (word, v) in &self.vectors {
            write!(w, "{word}")?;
            for x in v {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_text(&mut buf).map_err(io_err(path))?;
        std::fs::write(path, buf).map_err(io_err(path))
    }
}

fn is_header(fields: &[&str]) -> bool {
    fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok())
}

/// Parses every record of an embedding file.
pub fn parse_embedding_text<R: BufRead>(reader: R) -> Result<(EmbeddingTable, Vec<EmbeddingWarning>)> {
    let mut dim: Option<usize> = None;
    let mut vectors = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut first = true;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) && is_header(&fields) {
            dim = Some(fields[1].parse().unwrap());
            continue;
        }
        if fields.len() < 2 {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("record {:?} has no values", fields[0]),
            });
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| DataError::Parse {
                    line: lineno,
                    message: format!("invalid number {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Parse {
                line: lineno,
                message: "non-finite value".into(),
            });
        }
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected {
            return Err(DataError::Format {
                line: lineno,
                expected,
                found: values.len(),
            });
        }
        let word = fields[0].to_string();
        if vectors.insert(word.clone(), values).is_some() {
            log::warn!("line {lineno}: duplicate embedding for {word:?}, keeping the later one");
            warnings.push(EmbeddingWarning::DuplicateWord { word, line: lineno });
        }
    }
    let dim = dim.ok_or_else(|| DataError::Parse {
        line: 0,
        message: "no embedding records".into(),
    })?;
    Ok((EmbeddingTable { dim, vectors }, warnings))
}

/// Loads an embedding file and resolves every vocabulary name.
pub fn parse_embedding_file(path: impl AsRef<Path>, vocab: &VocabSpace) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let (raw, _) = parse_embedding_text(BufReader::new(file))?;
    Ok(raw.resolve(vocab)?.0)
}

/// Loads several embedding files and concatenates them per name, in the
/// order given.
pub fn parse_embedding_files<P: AsRef<Path>>(paths: &[P], vocab: &VocabSpace) -> Result<EmbeddingTable> {
    let mut tables = paths.iter().map(|p| parse_embedding_file(p, vocab));
    let first = tables.next().ok_or_else(|| DataError::Parse {
        line: 0,
        message: "no embedding files given".into(),
    })??;
    tables.try_fold(first, |acc, t| acc.concat(&t?))
}
