//! Latent codes, category libraries and the category-relevant dictionary.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

/// An `L × D` real matrix in row-major (layer-major) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    layers: usize,
    dims: usize,
    values: Vec<f64>,
}

/// A point in the extended latent space.
pub type LatentCode = Latent;
/// A difference between latent codes.
pub type LatentDelta = Latent;
/// The mean code of a category.
pub type ClassEmbedding = Latent;

impl Latent {
    pub fn new(layers: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if layers == 0 || dims == 0 {
            return Err(invalid("latent must have at least one layer and one dim"));
        }
        if values.len() != layers * dims {
            return Err(invalid(format!(
                "latent has {} values, expected {layers}x{dims}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("latent has non-finite values"));
        }
        Ok(Self {
            layers,
            dims,
            values,
        })
    }

    pub fn zeros(layers: usize, dims: usize) -> Self {
        Self {
            layers,
            dims,
            values: vec![0.0; layers * dims],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.layers, self.dims)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.values[l * self.dims..(l + 1) * self.dims]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.values[l * self.dims..(l + 1) * self.dims]
    }

    pub fn same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(invalid(format!(
                "latent shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn add(&self, other: &Latent) -> Result<Latent> {
        self.same_shape(other)?;
        Ok(self.map2(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Latent) -> Result<Latent> {
        self.same_shape(other)?;
        Ok(self.map2(other, |a, b| a - b))
    }

    pub fn scale(&self, a: f64) -> Latent {
        Latent {
            layers: self.layers,
            dims: self.dims,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.values)
    }

    pub fn distance(&self, other: &Latent) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn quantized(&self) -> Latent {
        Latent {
            layers: self.layers,
            dims: self.dims,
            values: self.values.iter().map(|v| *v as f32 as f64).collect(),
        }
    }

    fn map2(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Latent {
        Latent {
            layers: self.layers,
            dims: self.dims,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }
}

/// Whether a category was available for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Seen,
    Unseen,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Seen => "seen",
            Role::Unseen => "unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub role: Role,
    pub codes: Vec<LatentCode>,
}

/// Latent codes grouped by category id.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryLibrary {
    layers: usize,
    dims: usize,
    categories: BTreeMap<String, Category>,
}

impl CategoryLibrary {
    pub fn new(layers: usize, dims: usize) -> Result<Self> {
        if layers == 0 || dims == 0 {
            return Err(invalid("library needs at least one layer and one dim"));
        }
        Ok(Self {
            layers,
            dims,
            categories: BTreeMap::new(),
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn insert(&mut self, id: impl Into<String>, role: Role, codes: Vec<LatentCode>) -> Result<()> {
        let id = id.into();
        if codes.is_empty() {
            return Err(invalid(format!("category {id:?} has no codes")));
        }
        if let Some(c) = codes.iter().find(|c| c.shape() != (self.layers, self.dims)) {
            return Err(invalid(format!(
                "category {id:?}: code shape {:?} does not match library {:?}",
                c.shape(),
                (self.layers, self.dims)
            )));
        }
        if self.categories.contains_key(&id) {
            return Err(invalid(format!("duplicate category id {id:?}")));
        }
        self.categories.insert(id, Category { role, codes });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Category> {
        self.categories.get(id)
    }

    pub fn codes(&self, id: &str) -> Result<&[LatentCode]> {
        self.categories
            .get(id)
            .map(|c| c.codes.as_slice())
            .ok_or_else(|| invalid(format!("unknown category {id:?}")))
    }

    /// Categories in lexicographic id order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Category)> {
        self.categories.iter()
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<String> {
        self.categories
            .iter()
            .filter(|(_, c)| c.role == role)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Sub-library holding only categories of the given role.
    pub fn filter_role(&self, role: Role) -> CategoryLibrary {
        CategoryLibrary {
            layers: self.layers,
            dims: self.dims,
            categories: self
                .categories
                .iter()
                .filter(|(_, c)| c.role == role)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn total_codes(&self) -> usize {
        self.categories.values().map(|c| c.codes.len()).sum()
    }
}

/// Stacked class embeddings of all seen categories, one `D × S` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevantDictionary {
    ids: Vec<String>,
    layers: Vec<Matrix>,
}

impl RelevantDictionary {
    pub fn from_embeddings(ids: Vec<String>, embeddings: &[ClassEmbedding]) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(invalid("ids and embeddings differ in length"));
        }
        if ids.len() < 2 {
            return Err(invalid(format!(
                "relevant dictionary needs at least 2 seen categories, got {}",
                ids.len()
            )));
        }
        let (l, d) = embeddings[0].shape();
        for e in embeddings {
            embeddings[0].same_shape(e)?;
        }
        let layers = (0..l)
            .map(|layer| Matrix::from_fn(d, ids.len(), |i, k| embeddings[k].layer(layer)[i]))
            .collect();
        Ok(Self { ids, layers })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Rebuilds a dictionary from per-layer `D × S` matrices; ids must be
    /// strictly increasing.
    pub fn from_layers(ids: Vec<String>, layers: Vec<Matrix>) -> Result<Self> {
        if ids.len() < 2 {
            return Err(invalid(format!(
                "relevant dictionary needs at least 2 seen categories, got {}",
                ids.len()
            )));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("relevant dictionary ids must be strictly increasing"));
        }
        let first = layers.first().ok_or_else(|| invalid("relevant dictionary needs at least one layer"))?;
        let d = first.rows();
        if d == 0 || layers.iter().any(|m| m.shape() != (d, ids.len()) || !m.is_finite()) {
            return Err(invalid("relevant dictionary layers must be finite D x S matrices"));
        }
        Ok(Self { ids, layers })
    }

    /// Copy with every entry rounded to `f32`.
    pub fn quantized(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
                m
            })
            .collect();
        Self {
            ids: self.ids.clone(),
            layers,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn num_categories(&self) -> usize {
        self.ids.len()
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layer_matrices(&self) -> &[Matrix] {
        &self.layers
    }

    /// The class embedding stored in column `k`.
    pub fn embedding(&self, k: usize) -> ClassEmbedding {
        let d = self.dims();
        let mut out = Latent::zeros(self.layers.len(), d);
        for (l, m) in self.layers.iter().enumerate() {
            for i in 0..d {
                out.layer_mut(l)[i] = m.get(i, k);
            }
        }
        out
    }

    pub fn embedding_of(&self, id: &str) -> Result<ClassEmbedding> {
        let k = self
            .ids
            .binary_search_by(|x| x.as_str().cmp(id))
            .map_err(|_| invalid(format!("category {id:?} not in relevant dictionary")))?;
        Ok(self.embedding(k))
    }
}

/// Element-wise mean of the samples.
pub fn class_embedding(samples: &[LatentCode]) -> Result<ClassEmbedding> {
    let first = samples
        .first()
        .ok_or_else(|| invalid("class_embedding of an empty sample list"))?;
    let mut acc = vec![0.0; first.values.len()];
    for s in samples {
        first.same_shape(s)?;
        for (a, v) in acc.iter_mut().zip(&s.values) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Latent::new(first.layers, first.dims, acc)
}

/// `w − e`.
pub fn irrelevant_delta(w: &LatentCode, e: &ClassEmbedding) -> Result<LatentDelta> {
    w.sub(e)
}

/// One column per seen category, in lexicographic id order.
pub fn build_relevant_dictionary(library: &CategoryLibrary) -> Result<RelevantDictionary> {
    let mut ids = Vec::new();
    let mut embeddings = Vec::new();
    for (id, cat) in library.iter().filter(|(_, c)| c.role == Role::Seen) {
        ids.push(id.clone());
        embeddings.push(class_embedding(&cat.codes)?);
    }
    RelevantDictionary::from_embeddings(ids, &embeddings)
}
