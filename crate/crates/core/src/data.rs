//! Core containers and on-disk formats.
//!
//! Embeddings are stored as a little-endian binary blob:
//!
//! ```text
//! "EMB1" | n: u32 | d: u32 | n*d f32 values, row-major
//! ```
//!
//! Labels and clusterings are `\n`-separated CSV without quoting. Unassigned
//! samples are written as cluster id `-1`; an absent noise probability is an
//! empty third field.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"EMB1";
const HEADER_BYTES: usize = 12;
const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: bad magic, expected \"EMB1\"")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: zero dimension in header (n={n}, d={d})")]
    ZeroDimension { path: PathBuf, n: usize, d: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("index {0} appears more than once")]
    DuplicateIndex(usize),
    #[error("index {0} is missing")]
    MissingIndex(usize),
    #[error("line {line}: label {value:?} is not a non-negative integer")]
    NegativeLabel { line: usize, value: String },
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("invalid clustering: {0}")]
    InvalidClustering(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// `n` row vectors of dimension `d`, stored row-major in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    rows: Vec<f64>,
    normalized: bool,
}

impl EmbeddingSet {
    pub fn new(n: usize, d: usize, rows: Vec<f64>) -> Result<Self> {
        if n == 0 || d < 2 {
            return Err(DataError::Shape(format!("need n >= 1 and d >= 2, got n={n}, d={d}")));
        }
        if rows.len() != n * d {
            return Err(DataError::Shape(format!(
                "expected {} values for {n}x{d}, got {}",
                n * d,
                rows.len()
            )));
        }
        Ok(Self {
            n,
            d,
            rows,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(DataError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    /// Builds a set that is already unit-norm, checking the invariant.
    pub fn new_normalized(n: usize, d: usize, rows: Vec<f64>) -> Result<Self> {
        let mut set = Self::new(n, d, rows)?;
        for i in 0..n {
            let norm = norm(set.row(i));
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(DataError::Shape(format!("row {i} has norm {norm}, expected 1")));
            }
        }
        set.normalized = true;
        Ok(set)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    /// Rows at `indices`, in that order. The normalized flag carries over.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            rows.extend_from_slice(self.row(i));
        }
        let mut out = Self::new(indices.len(), self.d, rows)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    pub fn dot(&self, i: usize, j: usize) -> f64 {
        dot(self.row(i), self.row(j))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Divides every row by its L2 norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut rows = set.rows.clone();
    for (i, row) in rows.chunks_exact_mut(set.d).enumerate() {
        let nrm = norm(row);
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(DataError::ZeroNormRow(i));
        }
        row.iter_mut().for_each(|x| *x /= nrm);
    }
    Ok(EmbeddingSet {
        n: set.n,
        d: set.d,
        rows,
        normalized: true,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_BYTES {
        return Err(DataError::TruncatedFile {
            path: path.to_path_buf(),
            expected: HEADER_BYTES,
            found: bytes.len(),
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n == 0 || d == 0 {
        return Err(DataError::ZeroDimension {
            path: path.to_path_buf(),
            n,
            d,
        });
    }
    let expected = HEADER_BYTES + 4 * n * d;
    if bytes.len() != expected {
        return Err(DataError::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let rows = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingSet::new(n, d, rows)
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_BYTES + 4 * set.rows.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(set.n as u32).to_le_bytes());
    bytes.extend_from_slice(&(set.d as u32).to_le_bytes());
    for &x in &set.rows {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Per-sample identity labels, relabeled to `0..num_ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<usize>,
    num_ids: usize,
    original_ids: Vec<u64>,
}

impl LabelSet {
    /// Relabels arbitrary ids to contiguous ids in ascending order of the
    /// original id. `original_id(k)` recovers the input id of class `k`.
    pub fn from_raw(raw: &[u64]) -> Self {
        let mut map = BTreeMap::new();
        for &r in raw {
            map.insert(r, 0usize);
        }
        for (k, v) in map.values_mut().enumerate() {
            *v = k;
        }
        let labels = raw.iter().map(|r| map[r]).collect();
        let original_ids: Vec<u64> = map.keys().copied().collect();
        Self {
            labels,
            num_ids: original_ids.len(),
            original_ids,
        }
    }

    pub fn from_contiguous(labels: Vec<usize>) -> Self {
        let raw: Vec<u64> = labels.iter().map(|&l| l as u64).collect();
        Self::from_raw(&raw)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_ids(&self) -> usize {
        self.num_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn original_id(&self, k: usize) -> u64 {
        self.original_ids[k]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let raw: Vec<u64> = indices.iter().map(|&i| self.original_ids[self.labels[i]]).collect();
        Self::from_raw(&raw)
    }
}

/// Per-sample cluster assignment with an optional per-sample probability
/// that the assignment is wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    assignment: Vec<Option<usize>>,
    num_clusters: usize,
    p_minus: Option<Vec<f64>>,
}

impl Clustering {
    /// Checks that assigned ids cover `0..k` without gaps.
    pub fn new(assignment: Vec<Option<usize>>) -> Result<Self> {
        let num_clusters = assignment.iter().flatten().map(|&c| c + 1).max().unwrap_or(0);
        let mut seen = vec![false; num_clusters];
        for &c in assignment.iter().flatten() {
            seen[c] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(DataError::InvalidClustering(format!("cluster id {gap} is unused")));
        }
        Ok(Self {
            assignment,
            num_clusters,
            p_minus: None,
        })
    }

    /// Renumbers arbitrary cluster ids to `0..k` in order of first appearance.
    pub fn from_ids<I>(ids: I) -> Self
    where
        I: IntoIterator<Item = Option<usize>>,
    {
        let mut map = std::collections::HashMap::new();
        let assignment: Vec<Option<usize>> = ids
            .into_iter()
            .map(|id| {
                id.map(|c| {
                    let next = map.len();
                    *map.entry(c).or_insert(next)
                })
            })
            .collect();
        Self {
            num_clusters: map.len(),
            assignment,
            p_minus: None,
        }
    }

    /// One cluster per ground-truth identity.
    pub fn from_labels(labels: &LabelSet) -> Self {
        Self {
            assignment: labels.labels().iter().map(|&l| Some(l)).collect(),
            num_clusters: labels.num_ids(),
            p_minus: None,
        }
    }

    pub fn with_p_minus(mut self, p: Vec<f64>) -> Result<Self> {
        if p.len() != self.assignment.len() {
            return Err(DataError::InvalidClustering(format!(
                "p_minus has {} values for {} samples",
                p.len(),
                self.assignment.len()
            )));
        }
        if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::InvalidClustering(format!(
                "p_minus value {bad} outside [0,1]"
            )));
        }
        self.p_minus = Some(p);
        Ok(self)
    }

    pub fn without_p_minus(mut self) -> Self {
        self.p_minus = None;
        self
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.assignment[i]
    }

    pub fn p_minus(&self) -> Option<&[f64]> {
        self.p_minus.as_deref()
    }

    pub fn num_assigned(&self) -> usize {
        self.assignment.iter().flatten().count()
    }

    pub fn coverage(&self) -> f64 {
        if self.assignment.is_empty() {
            0.0
        } else {
            self.num_assigned() as f64 / self.assignment.len() as f64
        }
    }

    /// Member lists indexed by cluster id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, c) in self.assignment.iter().enumerate() {
            if let Some(c) = c {
                out[*c].push(i);
            }
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_clusters];
        for c in self.assignment.iter().flatten() {
            out[*c] += 1;
        }
        out
    }

    /// Restricts to `indices`, renumbering clusters that survive.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::from_ids(indices.iter().map(|&i| self.assignment[i]));
        out.p_minus = self.p_minus.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect());
        out
    }
}

fn parse_index(field: &str, line: usize) -> Result<usize> {
    field.trim().parse().map_err(|_| DataError::MalformedRow {
        line,
        reason: format!("bad index {field:?}"),
    })
}

/// Parses `index,<fields...>` rows into a dense table, rejecting duplicated
/// or missing indices.
fn read_indexed_csv(text: &str, header: &str, width: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        other => {
            return Err(DataError::MalformedRow {
                line: 1,
                reason: format!("expected header {header:?}, found {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut rows: Vec<Option<(usize, Vec<String>)>> = Vec::new();
    for (lineno, line) in lines {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(DataError::MalformedRow {
                line: line_no,
                reason: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        let idx = parse_index(fields[0], line_no)?;
        if idx >= rows.len() {
            rows.resize(idx + 1, None);
        }
        if rows[idx].is_some() {
            return Err(DataError::DuplicateIndex(idx));
        }
        rows[idx] = Some((line_no, fields[1..].iter().map(|s| s.trim().to_string()).collect()));
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or(DataError::MissingIndex(i)))
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn parse_labels(text: &str) -> Result<LabelSet> {
    let rows = read_indexed_csv(text, "index,label", 2)?;
    let raw = rows
        .iter()
        .map(|(line, f)| {
            f[0].parse::<u64>().map_err(|_| DataError::NegativeLabel {
                line: *line,
                value: f[0].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelSet::from_raw(&raw))
}

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    parse_labels(&read_text(path)?)
}

/// Writes the original (pre-relabel) ids.
pub fn save_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    let mut out = String::from("index,label\n");
    for (i, &l) in labels.labels().iter().enumerate() {
        writeln!(out, "{i},{}", labels.original_id(l)).unwrap();
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn parse_clustering(text: &str) -> Result<Clustering> {
    let rows = read_indexed_csv(text, "index,cluster_id,p_minus", 3)?;
    let mut assignment = Vec::with_capacity(rows.len());
    let mut p = Vec::with_capacity(rows.len());
    for (line, f) in &rows {
        let id: i64 = f[0].parse().map_err(|_| DataError::MalformedRow {
            line: *line,
            reason: format!("bad cluster id {:?}", f[0]),
        })?;
        assignment.push(match id {
            -1 => None,
            c if c >= 0 => Some(c as usize),
            _ => {
                return Err(DataError::MalformedRow {
                    line: *line,
                    reason: format!("cluster id {id} below -1"),
                })
            }
        });
        p.push(if f[1].is_empty() {
            None
        } else {
            Some(f[1].parse::<f64>().map_err(|_| DataError::MalformedRow {
                line: *line,
                reason: format!("bad p_minus {:?}", f[1]),
            })?)
        });
    }
    let c = Clustering::new(assignment)?;
    let present = p.iter().filter(|v| v.is_some()).count();
    match present {
        0 => Ok(c),
        n if n == p.len() => c.with_p_minus(p.into_iter().flatten().collect()),
        _ => Err(DataError::InvalidClustering(
            "p_minus must be present for every row or for none".into(),
        )),
    }
}

pub fn load_clustering(path: &Path) -> Result<Clustering> {
    parse_clustering(&read_text(path)?)
}

pub fn format_clustering(c: &Clustering) -> String {
    let mut out = String::from("index,cluster_id,p_minus\n");
    for (i, a) in c.assignment().iter().enumerate() {
        let id = a.map_or(-1, |v| v as i64);
        match c.p_minus() {
            Some(p) => writeln!(out, "{i},{id},{:.9}", p[i]).unwrap(),
            None => writeln!(out, "{i},{id},").unwrap(),
        }
    }
    out
}

pub fn save_clustering(c: &Clustering, path: &Path) -> Result<()> {
    fs::write(path, format_clustering(c)).map_err(io_err(path))
}
