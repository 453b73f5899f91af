//! Category-irrelevant dictionary learning: encoder, losses, gradients and the
//! Adam training loop.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{invalid, Error, Result};
use crate::latent::{
    build_relevant_dictionary, irrelevant_delta, CategoryLibrary, ClassEmbedding, Latent, LatentDelta,
    RelevantDictionary, Role,
};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::rng;
use crate::world::{toy_render, World};

/// Disjoint contiguous layer ranges `[start, end)` covering every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    ranges: Vec<(usize, usize)>,
}

impl GroupPartition {
    pub fn new(ranges: Vec<(usize, usize)>, layers: usize) -> Result<Self> {
        let mut next = 0;
        for &(s, e) in &ranges {
            if s != next || e <= s {
                return Err(invalid(format!("group partition {ranges:?} is not contiguous")));
            }
            next = e;
        }
        if next != layers || ranges.is_empty() {
            return Err(invalid(format!("group partition {ranges:?} does not cover {layers} layers")));
        }
        Ok(Self { ranges })
    }

    /// Bottom/middle/top split at 3/18 and 7/18 of the depth.
    pub fn scaled_default(layers: usize) -> Self {
        let mut cuts = Vec::new();
        for frac in [3.0 / 18.0, 7.0 / 18.0] {
            let c = (frac * layers as f64).round() as usize;
            let lo = cuts.last().copied().unwrap_or(0) + 1;
            let c = c.max(lo);
            if c < layers {
                cuts.push(c);
            }
        }
        let mut ranges = Vec::new();
        let mut start = 0;
        for c in cuts {
            ranges.push((start, c));
            start = c;
        }
        ranges.push((start, layers));
        Self { ranges }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn num_groups(&self) -> usize {
        self.ranges.len()
    }

    pub fn num_layers(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.1)
    }

    pub fn layers_of(&self, g: usize) -> std::ops::Range<usize> {
        self.ranges[g].0..self.ranges[g].1
    }

    pub fn group_of(&self, layer: usize) -> usize {
        self.ranges
            .iter()
            .position(|&(s, e)| layer >= s && layer < e)
            .expect("layer inside partition")
    }
}

/// Learned atoms, one `D × l` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IrrelevantDictionary {
    atoms: usize,
    partition: GroupPartition,
    layers: Vec<Matrix>,
}

impl IrrelevantDictionary {
    pub fn new(layers: Vec<Matrix>, partition: GroupPartition) -> Result<Self> {
        let first = layers.first().ok_or_else(|| invalid("dictionary needs at least one layer"))?;
        let (d, l) = first.shape();
        if layers.iter().any(|m| m.shape() != (d, l)) {
            return Err(invalid("all dictionary layers must share shape"));
        }
        if layers.len() != partition.num_layers() {
            return Err(invalid(format!(
                "dictionary has {} layers, partition covers {}",
                layers.len(),
                partition.num_layers()
            )));
        }
        if layers.iter().any(|m| !m.is_finite()) {
            return Err(invalid("dictionary has non-finite entries"));
        }
        Ok(Self {
            atoms: l,
            partition,
            layers,
        })
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn dims(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layer_matrices(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix] {
        &mut self.layers
    }

    /// Layers of group `g` stacked vertically, `(|g|·D) × l`.
    pub fn stacked_group(&self, g: usize) -> Matrix {
        let d = self.dims();
        let range = self.partition.layers_of(g);
        let n = range.len();
        let start = range.start;
        Matrix::from_fn(n * d, self.atoms, |i, j| self.layers[start + i / d].get(i % d, j))
    }
}

/// Group-shared coefficients, `G × l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    groups: usize,
    atoms: usize,
    values: Vec<f64>,
}

impl SparseCode {
    pub fn new(groups: usize, atoms: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != groups * atoms {
            return Err(invalid(format!(
                "sparse code has {} values, expected {groups}x{atoms}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("sparse code has non-finite values"));
        }
        Ok(Self { groups, atoms, values })
    }

    pub fn zeros(groups: usize, atoms: usize) -> Self {
        Self {
            groups,
            atoms,
            values: vec![0.0; groups * atoms],
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn group(&self, g: usize) -> &[f64] {
        &self.values[g * self.atoms..(g + 1) * self.atoms]
    }

    pub fn group_mut(&mut self, g: usize) -> &mut [f64] {
        &mut self.values[g * self.atoms..(g + 1) * self.atoms]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// MLP mapping a flattened delta to a sparse code.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Affine>,
    pub negative_slope: f64,
    pub groups: usize,
    pub atoms: usize,
}

impl EncoderParams {
    pub fn new(layers: Vec<Affine>, negative_slope: f64, groups: usize, atoms: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("encoder needs at least one layer"));
        }
        for (j, a) in layers.iter().enumerate() {
            if a.bias.len() != a.weights.rows() {
                return Err(invalid(format!("encoder layer {j}: bias length mismatch")));
            }
            if j > 0 && a.weights.cols() != layers[j - 1].weights.rows() {
                return Err(invalid(format!("encoder layer {j}: input size does not chain")));
            }
            if !a.weights.is_finite() || a.bias.iter().any(|b| !b.is_finite()) {
                return Err(invalid(format!("encoder layer {j}: non-finite parameters")));
            }
        }
        if layers.last().unwrap().weights.rows() != groups * atoms {
            return Err(invalid("encoder output size does not match groups x atoms"));
        }
        if !negative_slope.is_finite() {
            return Err(invalid("negative slope must be finite"));
        }
        Ok(Self {
            layers,
            negative_slope,
            groups,
            atoms,
        })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weights.cols()
    }

    /// Layer sizes `[in, h1, …, out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size()];
        s.extend(self.layers.iter().map(|a| a.weights.rows()));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecSpace {
    Feature,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub atoms: usize,
    pub negative_slope: f64,
    pub init_std: f64,
    pub rec_space: RecSpace,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0005,
            lambda2: 0.005,
            theta0: 0.5,
            theta1: -1.0,
            learning_rate: 1e-4,
            iterations: 3000,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            atoms: 24,
            negative_slope: 0.2,
            init_std: 0.01,
            rec_space: RecSpace::Feature,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("train.learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size must be at least 1"));
        }
        if self.atoms == 0 {
            return Err(invalid("train.atoms must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("train.beta1 and train.beta2 must lie in [0, 1)"));
        }
        let finite = [
            self.lambda1,
            self.lambda2,
            self.theta0,
            self.theta1,
            self.epsilon,
            self.negative_slope,
            self.init_std,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(invalid("train config values must be finite"));
        }
        if self.init_std < 0.0 || self.epsilon <= 0.0 {
            return Err(invalid("train.init_std must be >= 0 and train.epsilon > 0"));
        }
        Ok(())
    }
}

/// Mean loss components of one training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub rec: f64,
    pub orth: f64,
    pub sparse: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationModel {
    pub dictionary: IrrelevantDictionary,
    pub encoder: EncoderParams,
    pub relevant: RelevantDictionary,
    pub log: Vec<LossRecord>,
    pub config: TrainConfig,
}

impl FactorizationModel {
    pub fn partition(&self) -> &GroupPartition {
        self.dictionary.partition()
    }

    pub fn validate(&self) -> Result<()> {
        let (l, d) = (self.dictionary.num_layers(), self.dictionary.dims());
        if self.relevant.num_layers() != l || self.relevant.dims() != d {
            return Err(invalid("relevant dictionary shape does not match the irrelevant dictionary"));
        }
        if self.encoder.input_size() != l * d {
            return Err(invalid("encoder input size does not match L x D"));
        }
        if self.encoder.groups != self.partition().num_groups() || self.encoder.atoms != self.dictionary.atoms() {
            return Err(invalid("encoder output does not match the dictionary"));
        }
        Ok(())
    }
}

struct ForwardCache {
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every layer.
    pre: Vec<Vec<f64>>,
}

fn forward(params: &EncoderParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut h = x.to_vec();
    for (j, a) in params.layers.iter().enumerate() {
        let mut z = a.weights.matvec(&h)?;
        for (zi, b) in z.iter_mut().zip(&a.bias) {
            *zi += b;
        }
        inputs.push(h);
        let out = if j + 1 < n {
            z.iter()
                .map(|&v| if v > 0.0 { v } else { params.negative_slope * v })
                .collect()
        } else {
            z.clone()
        };
        pre.push(z);
        h = out;
    }
    Ok((h, ForwardCache { inputs, pre }))
}

/// Gradients for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub dictionary: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros(encoder: &EncoderParams, dictionary: &IrrelevantDictionary) -> Self {
        Self {
            weights: encoder
                .layers
                .iter()
                .map(|a| Matrix::zeros(a.weights.rows(), a.weights.cols()))
                .collect(),
            biases: encoder.layers.iter().map(|a| vec![0.0; a.bias.len()]).collect(),
            dictionary: dictionary
                .layer_matrices()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.weights.iter().map(|m| m.data()).collect();
        v.extend(self.biases.iter().map(|b| b.as_slice()));
        v.extend(self.dictionary.iter().map(|m| m.data()));
        v
    }
}

fn backward(params: &EncoderParams, cache: &ForwardCache, grad_out: &[f64], grads: &mut Gradients) -> Result<()> {
    let n = params.layers.len();
    let mut g = grad_out.to_vec();
    for j in (0..n).rev() {
        if j + 1 < n {
            for (gi, z) in g.iter_mut().zip(&cache.pre[j]) {
                if *z <= 0.0 {
                    *gi *= params.negative_slope;
                }
            }
        }
        let gw = &mut grads.weights[j];
        let cols = gw.cols();
        let input = &cache.inputs[j];
        for (i, gi) in g.iter().enumerate() {
            if *gi != 0.0 {
                axpy(*gi, input, &mut gw.data_mut()[i * cols..(i + 1) * cols]);
            }
        }
        for (b, gi) in grads.biases[j].iter_mut().zip(&g) {
            *b += gi;
        }
        if j > 0 {
            g = params.layers[j].weights.tr_matvec(&g)?;
        }
    }
    Ok(())
}

/// Deterministic forward pass of the encoder.
pub fn encode(delta: &LatentDelta, params: &EncoderParams) -> Result<SparseCode> {
    if delta.values().len() != params.input_size() {
        return Err(invalid(format!(
            "encode: delta has {} values, encoder expects {}",
            delta.values().len(),
            params.input_size()
        )));
    }
    let (out, _) = forward(params, delta.values())?;
    SparseCode::new(params.groups, params.atoms, out)
}

fn check_code(a: &IrrelevantDictionary, n: &SparseCode) -> Result<()> {
    if n.atoms() != a.atoms() || n.groups() != a.partition().num_groups() {
        return Err(invalid(format!(
            "code shape {}x{} does not match dictionary {}x{}",
            n.groups(),
            n.atoms(),
            a.partition().num_groups(),
            a.atoms()
        )));
    }
    Ok(())
}

/// `delta[ℓ] = A[ℓ] · n[g(ℓ)]`.
pub fn expand_edit(a: &IrrelevantDictionary, n: &SparseCode) -> Result<LatentDelta> {
    check_code(a, n)?;
    let mut out = Latent::zeros(a.num_layers(), a.dims());
    for g in 0..a.partition().num_groups() {
        for l in a.partition().layers_of(g) {
            let v = a.layer(l).matvec(n.group(g))?;
            out.layer_mut(l).copy_from_slice(&v);
        }
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `Σ sigmoid(θ0·n − θ1)`.
pub fn sparsity_loss(n: &SparseCode, theta0: f64, theta1: f64) -> f64 {
    n.values().iter().map(|&v| sigmoid(theta0 * v - theta1)).sum()
}

pub fn sparsity_grad(n: &SparseCode, theta0: f64, theta1: f64) -> SparseCode {
    let values = n
        .values()
        .iter()
        .map(|&v| {
            let s = sigmoid(theta0 * v - theta1);
            theta0 * s * (1.0 - s)
        })
        .collect();
    SparseCode {
        groups: n.groups(),
        atoms: n.atoms(),
        values,
    }
}

/// `‖toy_render(e + A·n) − target‖₂`.
pub fn reconstruction_loss(
    world: &World,
    e: &ClassEmbedding,
    a: &IrrelevantDictionary,
    n: &SparseCode,
    target: &[f64],
) -> Result<f64> {
    let x = e.add(&expand_edit(a, n)?)?;
    let f = toy_render(world, &x)?;
    if f.len() != target.len() {
        return Err(invalid("reconstruction target length mismatch"));
    }
    Ok(f.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>().sqrt())
}

/// `‖e + A·n − w‖₂`, the latent-space alternative.
pub fn latent_reconstruction_loss(
    e: &ClassEmbedding,
    a: &IrrelevantDictionary,
    n: &SparseCode,
    w: &Latent,
) -> Result<f64> {
    let x = e.add(&expand_edit(a, n)?)?;
    Ok(x.distance(w))
}

/// Gradient of a residual norm with respect to `n` and `A`, given the
/// gradient with respect to the latent delta.
fn delta_grad_to_params(
    a: &IrrelevantDictionary,
    n: &SparseCode,
    gdelta: &Latent,
    grad_a: &mut [Matrix],
    scale: f64,
) -> Result<SparseCode> {
    let mut gn = SparseCode::zeros(n.groups(), n.atoms());
    let atoms = a.atoms();
    for g in 0..a.partition().num_groups() {
        let code = n.group(g);
        for l in a.partition().layers_of(g) {
            let gd = gdelta.layer(l);
            let t = a.layer(l).tr_matvec(gd)?;
            for (o, v) in gn.group_mut(g).iter_mut().zip(&t) {
                *o += v;
            }
            let ga = grad_a[l].data_mut();
            for (i, gi) in gd.iter().enumerate() {
                if *gi != 0.0 {
                    axpy(scale * gi, code, &mut ga[i * atoms..(i + 1) * atoms]);
                }
            }
        }
    }
    Ok(gn)
}

/// Reconstruction loss with gradients with respect to `n` and every `A[ℓ]`.
pub fn reconstruction_grad(
    world: &World,
    e: &ClassEmbedding,
    a: &IrrelevantDictionary,
    n: &SparseCode,
    target: &[f64],
) -> Result<(f64, SparseCode, Vec<Matrix>)> {
    let x = e.add(&expand_edit(a, n)?)?;
    let f = toy_render(world, &x)?;
    let res: Vec<f64> = f.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = norm(&res);
    let unit: Vec<f64> = if loss > 0.0 { res.iter().map(|r| r / loss).collect() } else { vec![0.0; res.len()] };
    let gdelta = crate::world::toy_render_adjoint(world, &unit)?;
    let mut ga: Vec<Matrix> = a.layer_matrices().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let gn = delta_grad_to_params(a, n, &gdelta, &mut ga, 1.0)?;
    Ok((loss, gn, ga))
}

/// `Σ_ℓ ‖B[ℓ]ᵀ A[ℓ]‖²_F`.
pub fn orthogonality_loss(b: &RelevantDictionary, a: &IrrelevantDictionary) -> Result<f64> {
    check_orth_shapes(b, a)?;
    let mut total = 0.0;
    for l in 0..a.num_layers() {
        let p = b.layer(l).tr_matmul(a.layer(l))?;
        total += dot(p.data(), p.data());
    }
    Ok(total)
}

/// `∂/∂A[ℓ] = 2·B[ℓ]·(B[ℓ]ᵀ A[ℓ])`.
pub fn orthogonality_grad(b: &RelevantDictionary, a: &IrrelevantDictionary) -> Result<Vec<Matrix>> {
    check_orth_shapes(b, a)?;
    (0..a.num_layers())
        .map(|l| {
            let p = b.layer(l).tr_matmul(a.layer(l))?;
            Ok(b.layer(l).matmul(&p)?.scale(2.0))
        })
        .collect()
}

fn check_orth_shapes(b: &RelevantDictionary, a: &IrrelevantDictionary) -> Result<()> {
    if b.num_layers() != a.num_layers() || b.dims() != a.dims() {
        return Err(invalid(format!(
            "orthogonality: B is {}x{} per layer stack, A is {}x{}",
            b.num_layers(),
            b.dims(),
            a.num_layers(),
            a.dims()
        )));
    }
    Ok(())
}

/// `rec + λ1·orth + λ2·sparse`.
pub fn total_loss(rec: f64, orth: f64, sparse: f64, lambda1: f64, lambda2: f64) -> f64 {
    rec + lambda1 * orth + lambda2 * sparse
}

/// One training example: a code and the class embedding of its category.
pub struct Example<'a> {
    pub code: &'a Latent,
    pub embedding: &'a ClassEmbedding,
    pub embedding_features: &'a [f64],
    pub target_features: &'a [f64],
}

/// Batch objective of the training loop and its gradients, averaged over the
/// batch in index order.
pub fn batch_objective(
    world: &World,
    encoder: &EncoderParams,
    dictionary: &IrrelevantDictionary,
    relevant: &RelevantDictionary,
    batch: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<(LossRecord, Gradients)> {
    let mut grads = Gradients::zeros(encoder, dictionary);
    let bsz = batch.len() as f64;
    let inv_b = 1.0 / bsz;
    let mut rec_sum = 0.0;
    let mut sparse_sum = 0.0;
    for ex in batch {
        let delta = irrelevant_delta(ex.code, ex.embedding)?;
        let (out, cache) = forward(encoder, delta.values())?;
        let n = SparseCode::new(encoder.groups, encoder.atoms, out)
            .map_err(|_| invalid("encoder produced non-finite output"))?;
        let edit = expand_edit(dictionary, &n)?;
        let (rec, gdelta) = match cfg.rec_space {
            RecSpace::Feature => {
                let fe = world.renderer.matvec(edit.values())?;
                let res: Vec<f64> = fe
                    .iter()
                    .zip(ex.embedding_features)
                    .zip(ex.target_features)
                    .map(|((a, e), t)| a + e - t)
                    .collect();
                let r = norm(&res);
                let unit: Vec<f64> = if r > 0.0 { res.iter().map(|v| v / r).collect() } else { vec![0.0; res.len()] };
                (r, crate::world::toy_render_adjoint(world, &unit)?)
            }
            RecSpace::Latent => {
                let res = edit.sub(&delta)?;
                let r = res.norm();
                let unit = if r > 0.0 { res.scale(1.0 / r) } else { Latent::zeros(res.layers(), res.dims()) };
                (r, unit)
            }
        };
        let sparse = sparsity_loss(&n, cfg.theta0, cfg.theta1);
        rec_sum += rec;
        sparse_sum += sparse;

        let mut gn = delta_grad_to_params(dictionary, &n, &gdelta, &mut grads.dictionary, inv_b)?;
        let gs = sparsity_grad(&n, cfg.theta0, cfg.theta1);
        for (o, s) in gn.values_mut().iter_mut().zip(gs.values()) {
            *o = (*o + cfg.lambda2 * s) * inv_b;
        }
        backward(encoder, &cache, gn.values(), &mut grads)?;
    }
    let orth = orthogonality_loss(relevant, dictionary)?;
    let og = orthogonality_grad(relevant, dictionary)?;
    for (ga, go) in grads.dictionary.iter_mut().zip(&og) {
        axpy(cfg.lambda1, go.data(), ga.data_mut());
    }
    let rec = rec_sum * inv_b;
    let sparse = sparse_sum * inv_b;
    Ok((
        LossRecord {
            rec,
            orth,
            sparse,
            total: total_loss(rec, orth, sparse, cfg.lambda1, cfg.lambda2),
        },
        grads,
    ))
}

fn quantize(xs: &mut [f64]) {
    for x in xs {
        *x = *x as f32 as f64;
    }
}

fn quantize_params(encoder: &mut EncoderParams, dictionary: &mut IrrelevantDictionary) {
    for a in &mut encoder.layers {
        quantize(a.weights.data_mut());
        quantize(&mut a.bias);
    }
    for m in dictionary.layers_mut() {
        quantize(m.data_mut());
    }
    encoder.negative_slope = encoder.negative_slope as f32 as f64;
}

/// Seeded initial encoder (hidden width `4·l`, five layers) and dictionary.
pub fn init_params(
    layers: usize,
    dims: usize,
    partition: &GroupPartition,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, IrrelevantDictionary)> {
    let l = cfg.atoms;
    let g = partition.num_groups();
    let hidden = 4 * l;
    let sizes = [layers * dims, hidden, hidden, hidden, hidden, g * l];
    let mut r = rng::substream(cfg.seed, &[0]);
    let mut aff = Vec::new();
    for w in sizes.windows(2) {
        let weights = Matrix::from_fn(w[1], w[0], |_, _| cfg.init_std * r.sample::<f64, _>(StandardNormal));
        aff.push(Affine {
            weights,
            bias: vec![0.0; w[1]],
        });
    }
    let mut enc = EncoderParams::new(aff, cfg.negative_slope, g, l)?;
    let mut r = rng::substream(cfg.seed, &[1]);
    let mats = (0..layers)
        .map(|_| Matrix::from_fn(dims, l, |_, _| cfg.init_std * r.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut dict = IrrelevantDictionary::new(mats, partition.clone())?;
    quantize_params(&mut enc, &mut dict);
    Ok((enc, dict))
}

/// Trains the encoder and dictionary on the seen categories of `library`.
///
/// Parameters are rounded to `f32` after initialization and after the last
/// update so the model file roundtrip is exact.
pub fn train(library: &CategoryLibrary, world: &World, cfg: &TrainConfig) -> Result<FactorizationModel> {
    cfg.validate()?;
    let seen = library.filter_role(Role::Seen);
    if seen.is_empty() {
        return Err(invalid("train: library has no seen categories"));
    }
    let (layers, dims) = (library.layers(), library.dims());
    if (layers, dims) != (world.spec.layers, world.spec.dims) {
        return Err(invalid("train: library and world shapes differ"));
    }
    if cfg.atoms >= dims {
        return Err(invalid(format!(
            "train.atoms = {} must be smaller than dims = {dims}",
            cfg.atoms
        )));
    }
    let relevant = build_relevant_dictionary(&seen)?.quantized();
    let partition = GroupPartition::scaled_default(layers);
    let (mut encoder, mut dictionary) = init_params(layers, dims, &partition, cfg)?;

    let embeddings: Vec<ClassEmbedding> = (0..relevant.num_categories()).map(|k| relevant.embedding(k)).collect();
    let embedding_features: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| toy_render(world, e))
        .collect::<Result<_>>()?;
    let mut pool: Vec<(usize, &Latent)> = Vec::new();
    for (k, id) in relevant.ids().iter().enumerate() {
        for c in seen.codes(id)? {
            pool.push((k, c));
        }
    }
    let pool_features: Vec<Vec<f64>> = pool
        .iter()
        .map(|(_, c)| toy_render(world, c))
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = Gradients::zeros(&encoder, &dictionary)
        .slices()
        .iter()
        .map(|s| s.len())
        .collect();
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, &sizes);
    let mut batch_rng = rng::substream(cfg.seed, &[2]);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| batch_rng.random_range(0..pool.len())).collect();
        let batch: Vec<Example<'_>> = picks
            .iter()
            .map(|&i| Example {
                code: pool[i].1,
                embedding: &embeddings[pool[i].0],
                embedding_features: &embedding_features[pool[i].0],
                target_features: &pool_features[i],
            })
            .collect();
        let (rec, grads) = match batch_objective(world, &encoder, &dictionary, &relevant, &batch, cfg) {
            Ok(v) => v,
            Err(Error::InvalidInput(_)) if !params_finite(&encoder, &dictionary) => {
                return Err(Error::TrainingDiverged { iteration: it })
            }
            Err(e) => return Err(e),
        };
        if !rec.total.is_finite() {
            return Err(Error::TrainingDiverged { iteration: it });
        }
        log.push(rec);
        let gslices = grads.slices();
        let mut params: Vec<&mut [f64]> = Vec::new();
        let (enc_layers, dict_layers) = (&mut encoder.layers, dictionary.layers_mut());
        let mut weights: Vec<&mut [f64]> = Vec::new();
        let mut biases: Vec<&mut [f64]> = Vec::new();
        for a in enc_layers.iter_mut() {
            weights.push(a.weights.data_mut());
            biases.push(a.bias.as_mut_slice());
        }
        params.extend(weights);
        params.extend(biases);
        params.extend(dict_layers.iter_mut().map(|m| m.data_mut()));
        opt.update(&mut params, &gslices);
    }
    quantize_params(&mut encoder, &mut dictionary);
    for r in &mut log {
        r.rec = r.rec as f32 as f64;
        r.orth = r.orth as f32 as f64;
        r.sparse = r.sparse as f32 as f64;
        r.total = r.total as f32 as f64;
    }
    Ok(FactorizationModel {
        dictionary,
        encoder,
        relevant,
        log,
        config: cfg.clone(),
    })
}

fn params_finite(encoder: &EncoderParams, dictionary: &IrrelevantDictionary) -> bool {
    encoder
        .layers
        .iter()
        .all(|a| a.weights.is_finite() && a.bias.iter().all(|b| b.is_finite()))
        && dictionary.layer_matrices().iter().all(Matrix::is_finite)
}
