//! Hierarchical label inventory, multi-hot ontology vectors and the label
//! similarity prior used to compare annotated examples.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum OntologyError {
    #[error("inventory is empty")]
    EmptyInventory,
    #[error("duplicate label identifier `{0}`")]
    Duplicate(String),
    #[error("sub-code `{sub_code}` references missing parent `{parent}`")]
    MissingParent { sub_code: String, parent: String },
    #[error("sub-code `{0}` has no parent")]
    OrphanSubCode(String),
    #[error("inventory line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error("unknown sub-code `{0}`")]
    UnknownSubCode(String),
    #[error("sub-code `{sub_code}` is not a child of `{code}`")]
    WrongParent { code: String, sub_code: String },
    #[error("no embedding for label `{0}`")]
    MissingEmbedding(String),
    #[error("embedding for `{label}` has dimension {got}, expected {expected}")]
    EmbeddingDimension { label: String, expected: usize, got: usize },
    #[error("embedding for `{0}` has zero norm")]
    ZeroEmbedding(String),
    #[error("prior matrix invalid: {0}")]
    InvalidPrior(String),
    #[error("vector dimension {got} does not match prior dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for OntologyError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Code,
    SubCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub kind: LabelKind,
    pub id: String,
    /// Parent code for sub-codes; `None` for codes.
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub description: String,
}

impl Label {
    /// Display key: `Code` or `Code/Sub-code`.
    pub fn key(&self) -> String {
        match &self.parent {
            Some(p) => format!("{p}/{}", self.id),
            None => self.id.clone(),
        }
    }
}

/// Ordered code / sub-code inventory. Sub-codes are indexed by their
/// `(parent, sub-code)` pair, so a sub-code name reused under two parents
/// occupies two vector slots.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelInventory {
    labels: Vec<Label>,
    codes: HashMap<String, usize>,
    pairs: HashMap<(String, String), usize>,
    sub_parents: HashMap<String, Vec<String>>,
}

impl LabelInventory {
    /// Builds an inventory from records in their final index order.
    pub fn new(records: Vec<Label>) -> Result<Self, OntologyError> {
        if records.is_empty() {
            return Err(OntologyError::EmptyInventory);
        }
        let mut labels = Vec::with_capacity(records.len());
        let mut codes = HashMap::new();
        let mut pairs = HashMap::new();
        let mut sub_parents: HashMap<String, Vec<String>> = HashMap::new();

        for (index, mut label) in records.into_iter().enumerate() {
            label.id = label.id.trim().to_string();
            label.parent = label.parent.map(|p| p.trim().to_string()).filter(|p| !p.is_empty());
            if label.id.is_empty() {
                return Err(OntologyError::Parse { line: index + 1, message: "empty identifier".into() });
            }
            match label.kind {
                LabelKind::Code => {
                    if codes.insert(label.id.clone(), index).is_some() {
                        return Err(OntologyError::Duplicate(label.id));
                    }
                    label.parent = None;
                }
                LabelKind::SubCode => {
                    let parent =
                        label.parent.clone().ok_or_else(|| OntologyError::OrphanSubCode(label.id.clone()))?;
                    if pairs.insert((parent.clone(), label.id.clone()), index).is_some() {
                        return Err(OntologyError::Duplicate(label.key()));
                    }
                    sub_parents.entry(label.id.clone()).or_default().push(parent);
                }
            }
            labels.push(label);
        }
        for label in &labels {
            if let Some(parent) = &label.parent {
                if !codes.contains_key(parent) {
                    return Err(OntologyError::MissingParent {
                        sub_code: label.id.clone(),
                        parent: parent.clone(),
                    });
                }
            }
        }
        Ok(Self { labels, codes, pairs, sub_parents })
    }

    /// Reads line-delimited JSON records
    /// `{"kind": "code"|"sub_code", "id": .., "parent": .., "description": ..}`.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, OntologyError> {
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let label: Label = serde_json::from_str(trimmed)
                .map_err(|e| OntologyError::Parse { line: n + 1, message: e.to_string() })?;
            records.push(label);
        }
        Self::new(records)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self, OntologyError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    /// Combined dimension `|C| + |S|`.
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &Label {
        &self.labels[index]
    }

    pub fn codes(&self) -> impl Iterator<Item = &Label> {
        self.labels.iter().filter(|l| l.kind == LabelKind::Code)
    }

    pub fn sub_codes(&self) -> impl Iterator<Item = &Label> {
        self.labels.iter().filter(|l| l.kind == LabelKind::SubCode)
    }

    pub fn code_index(&self, code: &str) -> Option<usize> {
        self.codes.get(code.trim()).copied()
    }

    pub fn pair_index(&self, code: &str, sub_code: &str) -> Option<usize> {
        self.pairs.get(&(code.trim().to_string(), sub_code.trim().to_string())).copied()
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.codes.contains_key(code.trim())
    }

    /// True if the sub-code name exists under any parent.
    pub fn has_sub_code(&self, sub_code: &str) -> bool {
        self.sub_parents.contains_key(sub_code.trim())
    }

    pub fn is_valid_pair(&self, code: &str, sub_code: &str) -> bool {
        self.pair_index(code, sub_code).is_some()
    }

    pub fn parents_of(&self, sub_code: &str) -> &[String] {
        self.sub_parents.get(sub_code.trim()).map_or(&[], Vec::as_slice)
    }

    /// Sub-code names under `code`, in inventory order.
    pub fn children_of<'a>(&'a self, code: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        let code = code.trim();
        self.labels
            .iter()
            .filter(move |l| l.parent.as_deref() == Some(code))
            .map(|l| l.id.as_str())
    }

    /// Resolves a `(kind, id, parent)` reference to its vector index.
    pub fn resolve(&self, kind: LabelKind, id: &str, parent: Option<&str>) -> Option<usize> {
        match kind {
            LabelKind::Code => self.code_index(id),
            LabelKind::SubCode => match parent {
                Some(p) => self.pair_index(p, id),
                None => match self.parents_of(id) {
                    [only] => self.pair_index(only, id),
                    _ => None,
                },
            },
        }
    }
}

/// Multi-hot indicator over the combined inventory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OntologyVector {
    bits: Vec<bool>,
}

impl OntologyVector {
    pub fn zeros(dim: usize) -> Self {
        Self { bits: vec![false; dim] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_active(dim: usize, active: &[usize]) -> Self {
        let mut v = Self::zeros(dim);
        for &i in active {
            v.bits[i] = true;
        }
        v
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize) {
        self.bits[i] = true;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_zero(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn active(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }
}

/// Builds the union multi-hot vector of every code and `(code, sub-code)` pair.
pub fn build_ontology_vector<C, S>(
    inventory: &LabelInventory,
    annotations: &[(C, S)],
) -> Result<OntologyVector, OntologyError>
where
    C: AsRef<str>,
    S: AsRef<str>,
{
    let mut v = OntologyVector::zeros(inventory.dim());
    for (code, sub_code) in annotations {
        let (code, sub_code) = (code.as_ref().trim(), sub_code.as_ref().trim());
        let ci = inventory.code_index(code).ok_or_else(|| OntologyError::UnknownCode(code.into()))?;
        if !inventory.has_sub_code(sub_code) {
            return Err(OntologyError::UnknownSubCode(sub_code.into()));
        }
        let si = inventory.pair_index(code, sub_code).ok_or_else(|| OntologyError::WrongParent {
            code: code.into(),
            sub_code: sub_code.into(),
        })?;
        v.set(ci);
        v.set(si);
    }
    Ok(v)
}

/// Nonnegative, symmetric label-similarity prior with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix<T> {
    entries: Matrix<T>,
}

impl<T: Scalar> PriorMatrix<T> {
    /// Validates entries in `[0, 1]`, symmetry (to `1e-9` relative to `T`'s epsilon) and unit diagonal.
    pub fn new(entries: Matrix<T>) -> Result<Self, OntologyError> {
        if !entries.is_square() {
            return Err(OntologyError::InvalidPrior("not square".into()));
        }
        if entries.as_slice().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(OntologyError::InvalidPrior("entries outside [0, 1]".into()));
        }
        let tol = T::epsilon() * T::lit(16.0);
        if !entries.is_symmetric(tol) {
            return Err(OntologyError::InvalidPrior("not symmetric".into()));
        }
        if (0..entries.rows()).any(|i| entries[(i, i)] != T::one()) {
            return Err(OntologyError::InvalidPrior("diagonal must be 1".into()));
        }
        Ok(Self { entries })
    }

    pub fn identity(dim: usize) -> Self {
        Self { entries: Matrix::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[(i, j)]
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.entries
    }

    pub fn is_identity(&self) -> bool {
        (0..self.dim()).all(|i| (0..self.dim()).all(|j| (i == j) || self.get(i, j) == T::zero()))
    }
}

/// Identity prior of the inventory dimension (exact label overlap).
pub fn identity_prior<T: Scalar>(inventory: &LabelInventory) -> PriorMatrix<T> {
    PriorMatrix::identity(inventory.dim())
}

/// Clipped cosine-like similarity `clip((o_i/|o_i|)^T P (o_j/|o_j|), 0, 1)`.
/// A zero vector on either side yields 0.
pub fn target_similarity<T: Scalar>(
    oi: &OntologyVector,
    oj: &OntologyVector,
    prior: &PriorMatrix<T>,
) -> Result<T, OntologyError> {
    for v in [oi, oj] {
        if v.dim() != prior.dim() {
            return Err(OntologyError::DimensionMismatch { expected: prior.dim(), got: v.dim() });
        }
    }
    Ok(target_similarity_active(&oi.active(), &oj.active(), prior))
}

/// Same as [`target_similarity`] over precomputed active-index lists.
pub(crate) fn target_similarity_active<T: Scalar>(
    ai: &[usize],
    aj: &[usize],
    prior: &PriorMatrix<T>,
) -> T {
    if ai.is_empty() || aj.is_empty() {
        return T::zero();
    }
    let mut acc = T::zero();
    for &a in ai {
        for &b in aj {
            acc += prior.get(a, b);
        }
    }
    let norm = (T::lit(ai.len() as f64) * T::lit(aj.len() as f64)).sqrt();
    (acc / norm).max(T::zero()).min(T::one())
}

/// Builds the semantic prior from per-label embeddings keyed by inventory index:
/// cosine similarity, negatives clamped to 0, diagonal forced to 1.
pub fn build_prior<T: Scalar>(
    inventory: &LabelInventory,
    embeddings: &BTreeMap<usize, Vec<T>>,
) -> Result<PriorMatrix<T>, OntologyError> {
    let n = inventory.dim();
    let mut unit: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut expected = None;
    for i in 0..n {
        let key = inventory.label(i).key();
        let e = embeddings.get(&i).ok_or_else(|| OntologyError::MissingEmbedding(key.clone()))?;
        let d = *expected.get_or_insert(e.len());
        if e.len() != d {
            return Err(OntologyError::EmbeddingDimension { label: key, expected: d, got: e.len() });
        }
        let norm = e.iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(OntologyError::ZeroEmbedding(key));
        }
        unit.push(e.iter().map(|&x| x / norm).collect());
    }
    let entries = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            return T::one();
        }
        // Computed on the ordered pair so (i, j) and (j, i) are bit-identical.
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        let cos: T = unit[a].iter().zip(&unit[b]).map(|(&x, &y)| x * y).sum();
        cos.max(T::zero()).min(T::one())
    });
    PriorMatrix::new(entries)
}

/// One line of an embedding file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub kind: LabelKind,
    pub id: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub vector: Vec<f64>,
}

/// Reads line-delimited [`EmbeddingRecord`]s and resolves them against the inventory.
pub fn read_embeddings<T: Scalar>(
    inventory: &LabelInventory,
    reader: impl BufRead,
) -> Result<BTreeMap<usize, Vec<T>>, OntologyError> {
    let mut out = BTreeMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| OntologyError::Parse { line: n + 1, message: e.to_string() })?;
        let idx = inventory.resolve(rec.kind, &rec.id, rec.parent.as_deref()).ok_or_else(|| {
            OntologyError::Parse { line: n + 1, message: format!("unknown label `{}`", rec.id) }
        })?;
        if out.insert(idx, rec.vector.into_iter().map(T::lit).collect()).is_some() {
            return Err(OntologyError::Duplicate(inventory.label(idx).key()));
        }
    }
    Ok(out)
}
