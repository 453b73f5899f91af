//! Stable generation: class embedding mapping, adaptive editing, Gaussian code
//! sampling and the AGE baseline.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::factorization::{FactorizationModel, GroupPartition, IrrelevantDictionary, SparseCode};
use crate::latent::{irrelevant_delta, CategoryLibrary, ClassEmbedding, Latent, LatentCode, LatentDelta, RelevantDictionary, Role};
use crate::linalg::{pseudo_inverse, thin_svd, Matrix};
use crate::rng;

/// Orthonormal top-`t_B` left singular vectors of `B`, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedRelevant {
    pub t_b: usize,
    pub layers: Vec<Matrix>,
}

impl ReducedRelevant {
    /// `B_f B_fᵀ w`, per layer.
    pub fn project(&self, w: &Latent) -> Result<Latent> {
        self.check(w)?;
        let mut out = Latent::zeros(w.layers(), w.dims());
        for (l, bf) in self.layers.iter().enumerate() {
            let c = bf.tr_matvec(w.layer(l))?;
            let p = bf.matvec(&c)?;
            out.layer_mut(l).copy_from_slice(&p);
        }
        Ok(out)
    }

    /// `‖B_fᵀ w‖` over all layers.
    pub fn coordinate_norm(&self, w: &Latent) -> Result<f64> {
        self.check(w)?;
        let mut s = 0.0;
        for (l, bf) in self.layers.iter().enumerate() {
            let c = bf.tr_matvec(w.layer(l))?;
            s += c.iter().map(|x| x * x).sum::<f64>();
        }
        Ok(s.sqrt())
    }

    fn check(&self, w: &Latent) -> Result<()> {
        if w.layers() != self.layers.len() || w.dims() != self.layers[0].rows() {
            return Err(invalid("latent shape does not match the reduced relevant basis"));
        }
        Ok(())
    }
}

pub fn reduce_relevant(b: &RelevantDictionary, t_b: usize) -> Result<ReducedRelevant> {
    let s = b.num_categories();
    let max = s.min(b.dims());
    if t_b == 0 || t_b > max {
        return Err(invalid(format!("t_B = {t_b} outside 1..={max}")));
    }
    let layers = b
        .layer_matrices()
        .iter()
        .map(|m| Ok(thin_svd(m)?.0.leading_columns(t_b)))
        .collect::<Result<_>>()?;
    Ok(ReducedRelevant { t_b, layers })
}

/// `(1/N) Σ_i B_f B_fᵀ w_i`.
pub fn estimate_class_embedding(samples: &[LatentCode], bf: &ReducedRelevant) -> Result<ClassEmbedding> {
    let first = samples.first().ok_or_else(|| invalid("estimate_class_embedding of no samples"))?;
    let mut acc = Latent::zeros(first.layers(), first.dims());
    for w in samples {
        let p = bf.project(w)?;
        for (a, v) in acc.values_mut().iter_mut().zip(p.values()) {
            *a += v;
        }
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// Pseudo-inverses of the group-stacked dictionaries.
#[derive(Debug, Clone)]
pub struct BackProjector {
    partition: GroupPartition,
    dims: usize,
    atoms: usize,
    pinvs: Vec<Matrix>,
}

impl BackProjector {
    pub fn new(a: &IrrelevantDictionary) -> Result<Self> {
        let pinvs = (0..a.partition().num_groups())
            .map(|g| pseudo_inverse(&a.stacked_group(g)))
            .collect::<Result<_>>()?;
        Ok(Self {
            partition: a.partition().clone(),
            dims: a.dims(),
            atoms: a.atoms(),
            pinvs,
        })
    }

    pub fn project(&self, delta: &LatentDelta) -> Result<SparseCode> {
        if delta.layers() != self.partition.num_layers() || delta.dims() != self.dims {
            return Err(invalid(format!(
                "back_project: delta shape {:?} does not match dictionary {:?}",
                delta.shape(),
                (self.partition.num_layers(), self.dims)
            )));
        }
        let mut out = SparseCode::zeros(self.partition.num_groups(), self.atoms);
        for (g, p) in self.pinvs.iter().enumerate() {
            let r = self.partition.layers_of(g);
            let x = &delta.values()[r.start * self.dims..r.end * self.dims];
            let n = p.matvec(x)?;
            out.group_mut(g).copy_from_slice(&n);
        }
        Ok(out)
    }
}

/// Least-squares code of a delta: for each group, the pseudo-inverse of the
/// group's stacked layers applied to the stacked delta.
pub fn back_project(a: &IrrelevantDictionary, delta: &LatentDelta) -> Result<SparseCode> {
    BackProjector::new(a)?.project(delta)
}

/// Seen-category ids by ascending distance to `query`, ties lexicographic.
pub fn nearest_seen(query: &Latent, b: &RelevantDictionary, t_c: usize) -> Result<Vec<String>> {
    let s = b.num_categories();
    if t_c == 0 || t_c > s {
        return Err(invalid(format!("t_C = {t_c} outside 1..={s}")));
    }
    let mut scored: Vec<(f64, &String)> = (0..s)
        .map(|k| Ok((b.embedding(k).sub(query)?.norm(), &b.ids()[k])))
        .collect::<Result<_>>()?;
    scored.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(y.1)));
    Ok(scored.into_iter().take(t_c).map(|(_, id)| id.clone()).collect())
}

/// Back-projected codes of every seen sample, keyed by category.
#[derive(Debug, Clone)]
pub struct CodeBank {
    codes: BTreeMap<String, Vec<SparseCode>>,
}

impl CodeBank {
    /// Codes `n̂(w − e_k)` with `e_k` taken from the model's relevant dictionary.
    pub fn build(model: &FactorizationModel, library: &CategoryLibrary) -> Result<Self> {
        let bp = BackProjector::new(&model.dictionary)?;
        let mut codes = BTreeMap::new();
        for (id, cat) in library.iter().filter(|(_, c)| c.role == Role::Seen) {
            let e = model.relevant.embedding_of(id)?;
            let cs = cat
                .codes
                .iter()
                .map(|w| bp.project(&irrelevant_delta(w, &e)?))
                .collect::<Result<Vec<_>>>()?;
            codes.insert(id.clone(), cs);
        }
        Ok(Self { codes })
    }

    pub fn codes(&self, id: &str) -> Result<&[SparseCode]> {
        self.codes
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("no seen category {id:?}")))
    }

    pub fn all_codes(&self) -> Vec<SparseCode> {
        self.codes.values().flatten().cloned().collect()
    }

    pub fn codes_of(&self, cats: &[String]) -> Result<Vec<SparseCode>> {
        let mut out = Vec::new();
        for c in cats {
            out.extend(self.codes(c)?.iter().cloned());
        }
        Ok(out)
    }

    /// Mean over categories of the mean absolute code of each category.
    pub fn saliency(&self, cats: &[String]) -> Result<SparseCode> {
        saliency_of(&cats.iter().map(|c| self.codes(c)).collect::<Result<Vec<_>>>()?)
    }
}

fn saliency_of(per_cat: &[&[SparseCode]]) -> Result<SparseCode> {
    let first = per_cat
        .first()
        .and_then(|c| c.first())
        .ok_or_else(|| invalid("saliency needs at least one category with codes"))?;
    let mut out = SparseCode::zeros(first.groups(), first.atoms());
    for codes in per_cat {
        let mut inner = vec![0.0; out.values().len()];
        for c in codes.iter() {
            for (a, v) in inner.iter_mut().zip(c.values()) {
                *a += v.abs();
            }
        }
        let n = codes.len() as f64;
        for (o, a) in out.values_mut().iter_mut().zip(&inner) {
            *o += a / n;
        }
    }
    let m = per_cat.len() as f64;
    for o in out.values_mut() {
        *o /= m;
    }
    Ok(out)
}

/// Per-group saliency of every atom over the given seen categories.
pub fn direction_saliency(
    a: &IrrelevantDictionary,
    library: &CategoryLibrary,
    model: &FactorizationModel,
    cats: &[String],
) -> Result<SparseCode> {
    if cats.is_empty() {
        return Err(invalid("direction_saliency needs at least one category"));
    }
    let bp = BackProjector::new(a)?;
    let mut per_cat = Vec::with_capacity(cats.len());
    for id in cats {
        let cat = library
            .get(id)
            .filter(|c| c.role == Role::Seen)
            .ok_or_else(|| invalid(format!("unknown seen category {id:?}")))?;
        let e = model.relevant.embedding_of(id)?;
        let codes = cat
            .codes
            .iter()
            .map(|w| bp.project(&irrelevant_delta(w, &e)?))
            .collect::<Result<Vec<_>>>()?;
        per_cat.push(codes);
    }
    saliency_of(&per_cat.iter().map(Vec::as_slice).collect::<Vec<_>>())
}

/// Atom subsets per group and the matching sliced dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveDictionary {
    pub indices: Vec<Vec<usize>>,
    pub layers: Vec<Matrix>,
    pub partition: GroupPartition,
}

impl AdaptiveDictionary {
    pub fn t_a(&self) -> usize {
        self.indices[0].len()
    }
}

pub fn adapt_dictionary(a: &IrrelevantDictionary, saliency: &SparseCode, t_a: usize) -> Result<AdaptiveDictionary> {
    let l = a.atoms();
    if t_a == 0 || t_a > l {
        return Err(invalid(format!("t_A = {t_a} outside 1..={l}")));
    }
    let p = a.partition();
    if saliency.groups() != p.num_groups() || saliency.atoms() != l {
        return Err(invalid("saliency shape does not match the dictionary"));
    }
    let mut indices = Vec::with_capacity(p.num_groups());
    for g in 0..p.num_groups() {
        let s = saliency.group(g);
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&x, &y| s[y].total_cmp(&s[x]).then(x.cmp(&y)));
        let mut pick = order[..t_a].to_vec();
        pick.sort_unstable();
        indices.push(pick);
    }
    let layers = (0..a.num_layers())
        .map(|layer| a.layer(layer).select_columns(&indices[p.group_of(layer)]))
        .collect();
    Ok(AdaptiveDictionary {
        indices,
        layers,
        partition: p.clone(),
    })
}

/// Diagonal Gaussian over sparse codes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub mean: SparseCode,
    pub variance: SparseCode,
    pub count: usize,
}

/// Per-coordinate mean and unbiased variance.
pub fn fit_code_gaussian(codes: &[SparseCode]) -> Result<GaussianModel> {
    if codes.len() < 2 {
        return Err(invalid(format!("fit_code_gaussian needs at least 2 codes, got {}", codes.len())));
    }
    let (g, l) = (codes[0].groups(), codes[0].atoms());
    if codes.iter().any(|c| (c.groups(), c.atoms()) != (g, l)) {
        return Err(invalid("codes differ in shape"));
    }
    let n = codes.len() as f64;
    let mut mean = SparseCode::zeros(g, l);
    for c in codes {
        for (m, v) in mean.values_mut().iter_mut().zip(c.values()) {
            *m += v;
        }
    }
    for m in mean.values_mut() {
        *m /= n;
    }
    let mut var = SparseCode::zeros(g, l);
    for c in codes {
        for ((s, v), m) in var.values_mut().iter_mut().zip(c.values()).zip(mean.values()) {
            *s += (v - m) * (v - m);
        }
    }
    for s in var.values_mut() {
        *s /= n - 1.0;
    }
    Ok(GaussianModel {
        mean,
        variance: var,
        count: codes.len(),
    })
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(invalid("count must be at least 1"));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    Ok(())
}

/// `ê + α·A_{c_u}·ñ` with `ñ` from the selected marginals of `gm`.
///
/// Output `i` draws from the sub-stream `(seed, i)`.
pub fn sage_generate(
    e_hat: &ClassEmbedding,
    ad: &AdaptiveDictionary,
    gm: &GaussianModel,
    alpha: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<LatentCode>> {
    check_count(count)?;
    check_alpha(alpha)?;
    if e_hat.layers() != ad.layers.len() || e_hat.dims() != ad.layers[0].rows() {
        return Err(invalid("embedding shape does not match the adaptive dictionary"));
    }
    if gm.mean.groups() != ad.indices.len() {
        return Err(invalid("Gaussian model does not match the adaptive dictionary"));
    }
    (0..count)
        .map(|i| {
            let mut r = rng::substream(seed, &[i as u64]);
            let codes: Vec<Vec<f64>> = ad
                .indices
                .iter()
                .enumerate()
                .map(|(g, idx)| {
                    idx.iter()
                        .map(|&j| {
                            let z: f64 = r.sample(StandardNormal);
                            gm.mean.group(g)[j] + gm.variance.group(g)[j].sqrt() * z
                        })
                        .collect()
                })
                .collect();
            let mut out = e_hat.clone();
            for (layer, m) in ad.layers.iter().enumerate() {
                let d = m.matvec(&codes[ad.partition.group_of(layer)])?;
                for (o, v) in out.layer_mut(layer).iter_mut().zip(&d) {
                    *o += alpha * v;
                }
            }
            Ok(out)
        })
        .collect()
}

/// `w + α·A·ñ` with `ñ` drawn from `gm` over all atoms.
pub fn age_generate(
    w: &LatentCode,
    a: &IrrelevantDictionary,
    gm: &GaussianModel,
    alpha: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<LatentCode>> {
    check_count(count)?;
    check_alpha(alpha)?;
    if gm.mean.groups() != a.partition().num_groups() || gm.mean.atoms() != a.atoms() {
        return Err(invalid("Gaussian model does not match the dictionary"));
    }
    (0..count)
        .map(|i| {
            let mut r = rng::substream(seed, &[i as u64]);
            let mut n = SparseCode::zeros(gm.mean.groups(), gm.mean.atoms());
            for (k, v) in n.values_mut().iter_mut().enumerate() {
                let z: f64 = r.sample(StandardNormal);
                *v = gm.mean.values()[k] + gm.variance.values()[k].sqrt() * z;
            }
            let d = crate::factorization::expand_edit(a, &n)?;
            apply_direction(w, &d, alpha)
        })
        .collect()
}

/// AGE over several shots: `count` split round-robin over the samples, each
/// sample using the sub-seed `(seed, sample index)`.
pub fn age_generate_from_shots(
    samples: &[LatentCode],
    a: &IrrelevantDictionary,
    gm: &GaussianModel,
    alpha: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<LatentCode>> {
    check_count(count)?;
    if samples.is_empty() {
        return Err(invalid("AGE needs at least one sample"));
    }
    let mut out = Vec::with_capacity(count);
    for (s, w) in samples.iter().enumerate() {
        let n = split_count(count, samples.len(), s);
        if n > 0 {
            out.extend(age_generate(w, a, gm, alpha, n, rng::derive_seed(seed, &[s as u64]))?);
        }
    }
    Ok(out)
}

/// Number of round-robin slots `k < count` with `k % parts == slot`.
pub fn split_count(count: usize, parts: usize, slot: usize) -> usize {
    count / parts + usize::from(slot < count % parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub alpha: f64,
    pub t_b: Vec<usize>,
    /// `None`: scaled default for the shot count.
    pub t_c: Option<usize>,
    /// `None`: half the atom count.
    pub t_a: Option<usize>,
    pub shots: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            t_b: vec![10],
            t_c: None,
            t_a: None,
            shots: 1,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.t_b.is_empty() || self.t_b.contains(&0) {
            return Err(invalid("edit.t_b must be a non-empty list of positive counts"));
        }
        if self.t_c == Some(0) || self.t_a == Some(0) || self.shots == 0 {
            return Err(invalid("edit.t_c, edit.t_a and edit.shots must be at least 1"));
        }
        Ok(())
    }

    /// Nearest-category count: 30/119 of the seen classes for one shot, 20/119
    /// otherwise, unless set explicitly.
    pub fn resolved_t_c(&self, seen: usize) -> usize {
        self.t_c.unwrap_or_else(|| {
            let frac = if self.shots == 1 { 30.0 / 119.0 } else { 20.0 / 119.0 };
            ((seen as f64 * frac).round() as usize).clamp(1, seen.max(1))
        })
    }

    pub fn resolved_t_a(&self, atoms: usize) -> usize {
        self.t_a.unwrap_or((atoms / 2).max(1))
    }
}

/// Intermediate products of one SAGE run.
#[derive(Debug, Clone)]
pub struct SageRun {
    pub reduced: ReducedRelevant,
    pub e_hat: ClassEmbedding,
    pub neighbors: Vec<String>,
    pub adaptive: AdaptiveDictionary,
    pub gaussian: GaussianModel,
    pub outputs: Vec<LatentCode>,
}

/// Full SAGE pipeline for one `t_B`.
pub fn sage_pipeline(
    samples: &[LatentCode],
    model: &FactorizationModel,
    bank: &CodeBank,
    cfg: &EditConfig,
    t_b: usize,
    count: usize,
    seed: u64,
) -> Result<SageRun> {
    cfg.validate()?;
    let reduced = reduce_relevant(&model.relevant, t_b)?;
    let e_hat = estimate_class_embedding(samples, &reduced)?;
    let t_c = cfg.resolved_t_c(model.relevant.num_categories());
    let neighbors = nearest_seen(&e_hat, &model.relevant, t_c)?;
    let sal = bank.saliency(&neighbors)?;
    let adaptive = adapt_dictionary(&model.dictionary, &sal, cfg.resolved_t_a(model.dictionary.atoms()))?;
    let gaussian = fit_code_gaussian(&bank.codes_of(&neighbors)?)?;
    let outputs = sage_generate(&e_hat, &adaptive, &gaussian, cfg.alpha, count, seed)?;
    Ok(SageRun {
        reduced,
        e_hat,
        neighbors,
        adaptive,
        gaussian,
        outputs,
    })
}

/// SAGE over every `t_B` in `cfg.t_b`: `count` split round-robin, slot `i`
/// seeded with `(seed, i)`, outputs concatenated by slot.
pub fn multi_tb_generate(
    samples: &[LatentCode],
    model: &FactorizationModel,
    library: &CategoryLibrary,
    cfg: &EditConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<LatentCode>> {
    check_count(count)?;
    cfg.validate()?;
    let bank = CodeBank::build(model, library)?;
    multi_tb_generate_with_bank(samples, model, &bank, cfg, count, seed)
}

pub fn multi_tb_generate_with_bank(
    samples: &[LatentCode],
    model: &FactorizationModel,
    bank: &CodeBank,
    cfg: &EditConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<LatentCode>> {
    let m = cfg.t_b.len();
    let mut out = Vec::with_capacity(count);
    for (slot, &t_b) in cfg.t_b.iter().enumerate() {
        let n = split_count(count, m, slot);
        if n == 0 {
            continue;
        }
        let run = sage_pipeline(samples, model, bank, cfg, t_b, n, slot_seed(seed, slot))?;
        out.extend(run.outputs);
    }
    Ok(out)
}

pub fn slot_seed(seed: u64, slot: usize) -> u64 {
    rng::derive_seed(seed, &[slot as u64])
}

/// Left singular vectors of every `A[ℓ]`, by decreasing singular value.
pub fn salient_editing_directions(a: &IrrelevantDictionary) -> Result<Vec<Matrix>> {
    a.layer_matrices().iter().map(|m| Ok(thin_svd(m)?.0)).collect()
}

/// `w + α·direction`.
pub fn apply_direction(w: &LatentCode, direction: &LatentDelta, alpha: f64) -> Result<LatentCode> {
    w.same_shape(direction)?;
    let mut out = w.clone();
    for (o, d) in out.values_mut().iter_mut().zip(direction.values()) {
        *o += alpha * d;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::expand_edit;
    use crate::linalg::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn dict(layers: usize, d: usize, l: usize, seed: u64) -> IrrelevantDictionary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IrrelevantDictionary::new(
            (0..layers).map(|_| rand_matrix(d, l, &mut rng)).collect(),
            GroupPartition::scaled_default(layers),
        )
        .unwrap()
    }

    fn relevant_from_columns(cols: &[Vec<f64>]) -> RelevantDictionary {
        let ids = (0..cols.len()).map(|k| format!("c{k}")).collect();
        let embs: Vec<Latent> = cols.iter().map(|c| Latent::new(1, c.len(), c.clone()).unwrap()).collect();
        RelevantDictionary::from_embeddings(ids, &embs).unwrap()
    }

    #[test]
    fn reduce_keeps_largest_columns() {
        let b = relevant_from_columns(&[
            vec![0.0, 3.0, 0.0, 0.0],
            vec![5.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let bf = reduce_relevant(&b, 2).unwrap();
        let m = &bf.layers[0];
        assert!((m.get(0, 0).abs() - 1.0).abs() < 1e-12);
        assert!((m.get(1, 1).abs() - 1.0).abs() < 1e-12);
        assert!(m.get(2, 0).abs() + m.get(2, 1).abs() + m.get(3, 0).abs() < 1e-12);
        assert!(reduce_relevant(&b, 0).is_err());
        assert!(reduce_relevant(&b, 4).is_err());
    }

    #[test]
    fn rank_one_dictionary_gives_unit_parallel_direction() {
        let b = relevant_from_columns(&[vec![1.0, 2.0, 2.0], vec![2.0, 4.0, 4.0]]);
        let bf = reduce_relevant(&b, 1).unwrap();
        let u = bf.layers[0].col(0);
        assert!((crate::linalg::norm(&u) - 1.0).abs() < 1e-12);
        assert!((dot(&u, &[1.0, 2.0, 2.0]).abs() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_is_identity_on_span_and_zero_off_it() {
        let b = relevant_from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let bf = reduce_relevant(&b, 2).unwrap();
        let w1 = Latent::new(1, 3, vec![0.3, -1.2, 0.0]).unwrap();
        let w2 = Latent::new(1, 3, vec![1.1, 0.5, 0.0]).unwrap();
        let e = estimate_class_embedding(&[w1.clone(), w2.clone()], &bf).unwrap();
        let mean = crate::latent::class_embedding(&[w1, w2]).unwrap();
        assert!(e.distance(&mean) < 1e-15);
        let off = Latent::new(1, 3, vec![0.0, 0.0, 7.0]).unwrap();
        assert!(estimate_class_embedding(&[off], &bf).unwrap().norm() < 1e-15);
        assert!(estimate_class_embedding(&[], &bf).is_err());
    }

    #[test]
    fn back_projection_recovers_planted_codes() {
        let a = dict(6, 32, 24, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = a.partition().num_groups();
        let n = SparseCode::new(g, 24, (0..g * 24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let d = expand_edit(&a, &n).unwrap();
        let back = back_project(&a, &d).unwrap();
        for (x, y) in back.values().iter().zip(n.values()) {
            assert!((x - y).abs() < 1e-5);
        }
        let z = back_project(&a, &Latent::zeros(6, 32)).unwrap();
        assert!(z.values().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn back_projection_ignores_null_space() {
        let a = dict(2, 6, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Latent::new(2, 6, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut perp = d.clone();
        for l in 0..2 {
            let (u, _, _) = thin_svd(a.layer(l)).unwrap();
            let x = perp.layer(l).to_vec();
            let c = u.tr_matvec(&x).unwrap();
            let p = u.matvec(&c).unwrap();
            for (o, v) in perp.layer_mut(l).iter_mut().zip(&p) {
                *o -= v;
            }
        }
        let noise = perp.scale(3.0);
        let with = back_project(&a, &d.add(&noise).unwrap()).unwrap();
        let without = back_project(&a, &d).unwrap();
        for (x, y) in with.values().iter().zip(without.values()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn nearest_seen_ordering() {
        let b = relevant_from_columns(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![5.0, 5.0]]);
        let q = b.embedding(3);
        assert_eq!(nearest_seen(&q, &b, 1).unwrap(), vec!["c3".to_string()]);
        let origin = Latent::zeros(1, 2);
        assert_eq!(nearest_seen(&origin, &b, 4).unwrap(), vec!["c0", "c1", "c2", "c3"]);
        assert!(nearest_seen(&origin, &b, 0).is_err());
        assert!(nearest_seen(&origin, &b, 5).is_err());
    }

    #[test]
    fn saliency_averaging() {
        let c = |v: &[f64]| SparseCode::new(1, 2, v.to_vec()).unwrap();
        let single = [c(&[1.0, -2.0])];
        assert_eq!(saliency_of(&[&single]).unwrap().values(), &[1.0, 2.0]);
        let a = [c(&[1.0, 0.0])];
        let b = [c(&[0.0, 1.0])];
        assert_eq!(saliency_of(&[&a, &b]).unwrap().values(), &[0.5, 0.5]);
        let uneven = [c(&[2.0, 0.0]), c(&[0.0, 0.0])];
        assert_eq!(saliency_of(&[&uneven, &b]).unwrap().values(), &[0.5, 0.5]);
    }

    #[test]
    fn adapt_selects_top_indices() {
        let a = IrrelevantDictionary::new(
            vec![Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64)],
            GroupPartition::new(vec![(0, 1)], 1).unwrap(),
        )
        .unwrap();
        let s = SparseCode::new(1, 3, vec![0.1, 5.0, 0.3]).unwrap();
        let ad = adapt_dictionary(&a, &s, 1).unwrap();
        assert_eq!(ad.indices, vec![vec![1]]);
        assert_eq!(ad.layers[0].col(0), a.layer(0).col(1));
        let full = adapt_dictionary(&a, &s, 3).unwrap();
        assert_eq!(full.layers[0], *a.layer(0));
        let scaled = SparseCode::new(1, 3, vec![0.7, 35.0, 2.1]).unwrap();
        assert_eq!(adapt_dictionary(&a, &scaled, 2).unwrap().indices, adapt_dictionary(&a, &s, 2).unwrap().indices);
        let tied = SparseCode::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(adapt_dictionary(&a, &tied, 2).unwrap().indices, vec![vec![0, 1]]);
        assert!(adapt_dictionary(&a, &s, 0).is_err());
        assert!(adapt_dictionary(&a, &s, 4).is_err());
    }

    #[test]
    fn gaussian_fit_values() {
        let c = |v: &[f64]| SparseCode::new(1, 2, v.to_vec()).unwrap();
        let gm = fit_code_gaussian(&[c(&[0.0, 0.0]), c(&[2.0, 2.0])]).unwrap();
        assert_eq!(gm.mean.values(), &[1.0, 1.0]);
        assert_eq!(gm.variance.values(), &[2.0, 2.0]);
        let same = fit_code_gaussian(&[c(&[0.3, 1.0]), c(&[0.3, 1.0]), c(&[0.3, 1.0])]).unwrap();
        assert!(same.variance.values().iter().all(|v| *v == 0.0));
        assert!(fit_code_gaussian(&[c(&[1.0, 1.0])]).is_err());
    }

    #[test]
    fn gaussian_fit_recovers_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = [1.5, -2.0, 0.5];
        let sd = [0.5, 2.0, 1.0];
        let codes: Vec<SparseCode> = (0..10_000)
            .map(|_| {
                let v = (0..3).map(|j| mu[j] + sd[j] * rng.sample::<f64, _>(StandardNormal)).collect();
                SparseCode::new(1, 3, v).unwrap()
            })
            .collect();
        let gm = fit_code_gaussian(&codes).unwrap();
        for j in 0..3 {
            assert!((gm.mean.values()[j] - mu[j]).abs() < 0.05 * mu[j].abs());
            assert!((gm.variance.values()[j] - sd[j] * sd[j]).abs() < 0.05 * sd[j] * sd[j]);
        }
    }

    fn toy_setup() -> (IrrelevantDictionary, AdaptiveDictionary, GaussianModel, Latent) {
        let a = dict(3, 5, 3, 6);
        let g = a.partition().num_groups();
        let s = SparseCode::new(g, 3, (0..g * 3).map(|i| (i % 3) as f64).collect()).unwrap();
        let ad = adapt_dictionary(&a, &s, 2).unwrap();
        let gm = GaussianModel {
            mean: SparseCode::new(g, 3, (0..g * 3).map(|i| i as f64 * 0.1).collect()).unwrap(),
            variance: SparseCode::new(g, 3, vec![0.25; g * 3]).unwrap(),
            count: 10,
        };
        let e = Latent::new(3, 5, (0..15).map(|i| i as f64).collect()).unwrap();
        (a, ad, gm, e)
    }

    #[test]
    fn sage_with_zero_alpha_returns_embedding() {
        let (_, ad, gm, e) = toy_setup();
        for o in sage_generate(&e, &ad, &gm, 0.0, 5, 1).unwrap() {
            assert_eq!(o, e);
        }
    }

    #[test]
    fn sage_with_zero_variance_uses_mean() {
        let (_, ad, mut gm, e) = toy_setup();
        for v in gm.variance.values_mut() {
            *v = 0.0;
        }
        let outs = sage_generate(&e, &ad, &gm, 2.0, 3, 1).unwrap();
        let mut want = e.clone();
        for layer in 0..3 {
            let g = ad.partition.group_of(layer);
            let mu: Vec<f64> = ad.indices[g].iter().map(|&j| gm.mean.group(g)[j]).collect();
            let d = ad.layers[layer].matvec(&mu).unwrap();
            for (o, v) in want.layer_mut(layer).iter_mut().zip(&d) {
                *o += 2.0 * v;
            }
        }
        for o in outs {
            assert!(o.distance(&want) < 1e-12);
        }
    }

    #[test]
    fn generation_is_seeded_per_index() {
        let (a, ad, gm, e) = toy_setup();
        let five = sage_generate(&e, &ad, &gm, 1.0, 5, 9).unwrap();
        assert_eq!(five, sage_generate(&e, &ad, &gm, 1.0, 5, 9).unwrap());
        assert_eq!(&five[..3], sage_generate(&e, &ad, &gm, 1.0, 3, 9).unwrap().as_slice());
        assert_ne!(five, sage_generate(&e, &ad, &gm, 1.0, 5, 10).unwrap());
        let age = age_generate(&e, &a, &gm, 1.0, 4, 2).unwrap();
        assert_eq!(age, age_generate(&e, &a, &gm, 1.0, 4, 2).unwrap());
        assert!(age_generate(&e, &a, &gm, 0.0, 3, 2).unwrap().iter().all(|o| *o == e));
        assert!(sage_generate(&e, &ad, &gm, 1.0, 0, 9).is_err());
    }

    #[test]
    fn age_mean_matches_expected_edit() {
        let (a, _, gm, e) = toy_setup();
        let n = 10_000;
        let outs = age_generate(&e, &a, &gm, 1.5, n, 3).unwrap();
        let mean = crate::latent::class_embedding(&outs).unwrap();
        let want = apply_direction(&e, &expand_edit(&a, &gm.mean).unwrap(), 1.5).unwrap();
        for i in 0..want.values().len() {
            let xs: Vec<f64> = outs.iter().map(|o| o.values()[i]).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!((mean.values()[i] - want.values()[i]).abs() <= 3.0 * se + 1e-12);
        }
    }

    #[test]
    fn round_robin_counts() {
        assert_eq!((0..2).map(|s| split_count(4, 2, s)).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!((0..3).map(|s| split_count(7, 3, s)).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert_eq!(split_count(1, 3, 2), 0);
    }

    #[test]
    fn edit_config_defaults() {
        let cfg = EditConfig::default();
        assert_eq!(cfg.resolved_t_c(119), 30);
        assert_eq!(EditConfig { shots: 3, ..cfg.clone() }.resolved_t_c(119), 20);
        assert_eq!(cfg.resolved_t_c(20), 5);
        assert_eq!(EditConfig { shots: 3, ..cfg.clone() }.resolved_t_c(20), 3);
        assert_eq!(cfg.resolved_t_a(24), 12);
        assert_eq!(cfg.resolved_t_a(1), 1);
        assert!(EditConfig { t_b: vec![], ..cfg.clone() }.validate().is_err());
        assert!(EditConfig { alpha: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn editing_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = rand_matrix(8, 4, &mut rng);
        for i in 0..8 {
            m.set(i, 2, 100.0 * m.get(i, 2));
        }
        let a = IrrelevantDictionary::new(vec![m.clone()], GroupPartition::new(vec![(0, 1)], 1).unwrap()).unwrap();
        let u = &salient_editing_directions(&a).unwrap()[0];
        let col = m.col(2);
        let c = dot(&u.col(0), &col) / crate::linalg::norm(&col);
        assert!(c.abs() > 0.99);
        let g = u.tr_matmul(u).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((g.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
        let r1 = Matrix::from_fn(5, 3, |i, j| (i + 1) as f64 * (j + 1) as f64);
        let a1 = IrrelevantDictionary::new(vec![r1.clone()], GroupPartition::new(vec![(0, 1)], 1).unwrap()).unwrap();
        let (_, s, _) = thin_svd(a1.layer(0)).unwrap();
        assert!(s[0] > 1.0 && s[1] < 1e-10 * s[0] && s[2] < 1e-10 * s[0]);
        assert!(salient_editing_directions(&a1).is_ok());
    }

    #[test]
    fn direction_moves() {
        let w = Latent::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let d = Latent::new(1, 3, vec![0.5, -0.25, 0.125]).unwrap();
        assert_eq!(apply_direction(&w, &d, 0.0).unwrap(), w);
        let there = apply_direction(&w, &d, 0.7).unwrap();
        let back = apply_direction(&there, &d, -0.7).unwrap();
        assert!(back.distance(&w) < 1e-12);
        let one = apply_direction(&w, &d, 0.3).unwrap().sub(&w).unwrap();
        let two = apply_direction(&w, &d, 0.6).unwrap().sub(&w).unwrap();
        assert!(two.distance(&one.scale(2.0)) < 1e-12);
        assert!(apply_direction(&w, &Latent::zeros(1, 2), 1.0).is_err());
    }
}
