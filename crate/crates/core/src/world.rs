//! Synthetic generative world with known ground truth.
//!
//! Every layer `ℓ` gets a random orthonormal basis `Q_ℓ` split into a relevant
//! block `R_ℓ` (class centers live here), an irrelevant block `I_ℓ` and a
//! nuisance block. The shared basis `V` is an orthonormalized random mix of the
//! irrelevant blocks, so it is orthogonal to every center layer by layer.
//!
//! The renderer maps latent basis directions onto 2-D cosine modes of a
//! `H × W` grid: nuisance directions to the lowest frequencies, the relevant
//! block (attenuated by `relevant_gain`) above them and `V` to the highest
//! frequencies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fusion::ImageGrid;
use crate::latent::{CategoryLibrary, Latent, LatentCode, Role};
use crate::linalg::{axpy, dot, orthonormalize_columns, Matrix};
use crate::rng;

/// Pixel value of a zero feature in [`render_image`].
pub const IMAGE_OFFSET: f64 = 0.5;
/// Pixel change per unit feature in [`render_image`].
pub const IMAGE_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub seed: u64,
    pub seen: usize,
    pub unseen: usize,
    pub layers: usize,
    pub dims: usize,
    pub irrelevant_rank: usize,
    pub relevant_rank: usize,
    pub families: usize,
    pub center_scale: f64,
    pub family_spread: f64,
    pub activation_scale: f64,
    pub active_per_family: usize,
    pub noise_scale: f64,
    pub relevant_gain: f64,
    pub feature_dim: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            seen: 20,
            unseen: 5,
            layers: 6,
            dims: 48,
            irrelevant_rank: 8,
            relevant_rank: 10,
            families: 5,
            center_scale: 5.0,
            family_spread: 0.3,
            activation_scale: 1.0,
            active_per_family: 3,
            noise_scale: 0.1,
            relevant_gain: 0.01,
            feature_dim: 288,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("dims", self.dims),
            ("seen", self.seen),
            ("families", self.families),
            ("irrelevant_rank", self.irrelevant_rank),
            ("relevant_rank", self.relevant_rank),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("world.{name} must be at least 1")));
            }
        }
        if self.relevant_rank + self.irrelevant_rank > self.dims {
            return Err(invalid(format!(
                "relevant_rank + irrelevant_rank = {} exceeds dims = {}",
                self.relevant_rank + self.irrelevant_rank,
                self.dims
            )));
        }
        let needed = self.layers * self.relevant_rank + self.irrelevant_rank;
        if self.feature_dim < needed {
            return Err(invalid(format!(
                "feature_dim {} too small: need layers*relevant_rank + irrelevant_rank = {needed}",
                self.feature_dim
            )));
        }
        if self.active_per_family > self.irrelevant_rank {
            return Err(invalid("active_per_family exceeds irrelevant_rank"));
        }
        let scales = [
            ("center_scale", self.center_scale),
            ("family_spread", self.family_spread),
            ("activation_scale", self.activation_scale),
            ("noise_scale", self.noise_scale),
            ("relevant_gain", self.relevant_gain),
        ];
        for (name, v) in scales {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("world.{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn total_categories(&self) -> usize {
        self.seen + self.unseen
    }

    /// `(H, W)` with `H` the largest divisor of `feature_dim` not above its root.
    pub fn grid_shape(&self) -> (usize, usize) {
        let p = self.feature_dim;
        let mut h = 1;
        let mut k = 1;
        while k * k <= p {
            if p.is_multiple_of(k) {
                h = k;
            }
            k += 1;
        }
        (h, p / h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldCategory {
    pub id: String,
    pub role: Role,
    pub family: usize,
    pub center: LatentCode,
    /// Length-`q` activation profile, shared within a family.
    pub profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub categories: Vec<WorldCategory>,
    /// Orthonormal irrelevant basis, `L·D × q`.
    pub basis: Matrix,
    /// Renderer `W_G`, `P × L·D`.
    pub renderer: Matrix,
    /// Ground-truth relevant basis per layer, `D × relevant_rank`.
    pub relevant: Vec<Matrix>,
}

/// Category id of the `k`-th category of a role.
pub fn category_id(role: Role, index: usize, count: usize) -> String {
    let width = format!("{}", count.saturating_sub(1)).len().max(2);
    format!("{}_{index:0width$}", role.as_str())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn embed_layer(layer: usize, dims: usize, layers: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layers * dims];
    out[layer * dims..(layer + 1) * dims].copy_from_slice(v);
    out
}

fn cosine_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos())
                .collect()
        })
        .collect()
}

/// 2-D orthonormal cosine modes of an `h × w` grid, lowest frequency first.
fn frequency_modes(h: usize, w: usize) -> Vec<Vec<f64>> {
    let ch = cosine_basis(h);
    let cw = cosine_basis(w);
    let mut keys: Vec<(f64, usize, usize)> = (0..h)
        .flat_map(|a| (0..w).map(move |b| (a, b)))
        .map(|(a, b)| ((a as f64 / h as f64).powi(2) + (b as f64 / w as f64).powi(2), a, b))
        .collect();
    keys.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    keys.iter()
        .map(|&(_, a, b)| {
            let mut m = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    m.push(ch[a][i] * cw[b][j]);
                }
            }
            m
        })
        .collect()
}

/// Builds a world deterministically from its spec.
pub fn make_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (l, d, q, r) = (spec.layers, spec.dims, spec.irrelevant_rank, spec.relevant_rank);
    let ld = l * d;
    let mut rng = rng::stream(spec.seed);

    let mut bases = Vec::with_capacity(l);
    for _ in 0..l {
        let raw: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
            .collect();
        let q_l = orthonormalize_columns(&raw, 1e-10);
        if q_l.len() != d {
            return Err(invalid("degenerate random basis"));
        }
        bases.push(q_l);
    }

    let fam_means: Vec<Vec<Vec<f64>>> = (0..spec.families)
        .map(|_| {
            (0..l)
                .map(|_| (0..r).map(|_| spec.center_scale * normal(&mut rng)).collect())
                .collect()
        })
        .collect();

    let total = spec.total_categories();
    let mut centers = Vec::with_capacity(total);
    for k in 0..total {
        let f = k % spec.families;
        let mut c = Latent::zeros(l, d);
        for layer in 0..l {
            let out = c.layer_mut(layer);
            for j in 0..r {
                let z = fam_means[f][layer][j] + spec.family_spread * spec.center_scale * normal(&mut rng);
                axpy(z, &bases[layer][j], out);
            }
        }
        centers.push(c);
    }

    let mut raw_v: Vec<Vec<f64>> = vec![vec![0.0; ld]; q];
    for layer in 0..l {
        for col in raw_v.iter_mut() {
            let mut block = vec![0.0; d];
            for j in 0..q {
                axpy(normal(&mut rng), &bases[layer][r + j], &mut block);
            }
            col[layer * d..(layer + 1) * d].copy_from_slice(&block);
        }
    }
    let v_cols = orthonormalize_columns(&raw_v, 1e-10);
    if v_cols.len() != q {
        return Err(invalid("degenerate irrelevant basis"));
    }

    for c in &mut centers {
        for vc in &v_cols {
            let p = dot(vc, c.values());
            axpy(-p, vc, c.values_mut());
        }
    }

    let mut fam_profiles = Vec::with_capacity(spec.families);
    for _ in 0..spec.families {
        let mut idx: Vec<usize> = (0..q).collect();
        for i in 0..spec.active_per_family {
            let j = rng.random_range(i..q);
            idx.swap(i, j);
        }
        let mut prof = vec![0.0; q];
        for &i in &idx[..spec.active_per_family] {
            prof[i] = spec.activation_scale * rng.random_range(0.5..1.5);
        }
        fam_profiles.push(prof);
    }

    let mut nuisance: Vec<Vec<f64>> = Vec::new();
    for (layer, b) in bases.iter().enumerate() {
        for col in &b[r + q..] {
            nuisance.push(embed_layer(layer, d, l, col));
        }
    }
    let mut irr_rest_raw: Vec<Vec<f64>> = Vec::new();
    for (layer, b) in bases.iter().enumerate() {
        for col in &b[r..r + q] {
            let mut v = embed_layer(layer, d, l, col);
            for vc in &v_cols {
                let p = dot(vc, &v);
                axpy(-p, vc, &mut v);
            }
            irr_rest_raw.push(v);
        }
    }
    let mut irr_rest = orthonormalize_columns(&irr_rest_raw, 1e-8);
    irr_rest.truncate(l * q - q);
    nuisance.extend(irr_rest);

    let mut relevant_cols: Vec<Vec<f64>> = Vec::new();
    for (layer, b) in bases.iter().enumerate() {
        for col in &b[..r] {
            relevant_cols.push(embed_layer(layer, d, l, col));
        }
    }

    let p = spec.feature_dim;
    let (h, w) = spec.grid_shape();
    let modes = frequency_modes(h, w);
    let kept = nuisance.len().min(p - l * r - q);
    let mut assignments: Vec<(usize, f64, &[f64])> = Vec::new();
    for (i, col) in nuisance[..kept].iter().enumerate() {
        assignments.push((i, 1.0, col));
    }
    for (j, col) in relevant_cols.iter().enumerate() {
        assignments.push((kept + j, spec.relevant_gain, col));
    }
    for (j, col) in v_cols.iter().enumerate() {
        assignments.push((p - q + j, 1.0, col));
    }
    let mut renderer = Matrix::zeros(p, ld);
    for (mode, gain, col) in assignments {
        let phi = &modes[mode];
        for (pix, &ph) in phi.iter().enumerate() {
            let a = gain * ph;
            if a == 0.0 {
                continue;
            }
            let row = &mut renderer.data_mut()[pix * ld..(pix + 1) * ld];
            axpy(a, col, row);
        }
    }

    let basis = Matrix::from_fn(ld, q, |i, j| v_cols[j][i]);
    let relevant = bases
        .iter()
        .map(|b| Matrix::from_fn(d, r, |i, j| b[j][i]))
        .collect();

    let categories = (0..total)
        .map(|k| {
            let (role, index, count) = if k < spec.seen {
                (Role::Seen, k, spec.seen)
            } else {
                (Role::Unseen, k - spec.seen, spec.unseen)
            };
            WorldCategory {
                id: category_id(role, index, count),
                role,
                family: k % spec.families,
                center: centers[k].clone(),
                profile: fam_profiles[k % spec.families].clone(),
            }
        })
        .collect();

    Ok(World {
        spec: spec.clone(),
        categories,
        basis,
        renderer,
        relevant,
    })
}

impl World {
    pub fn category(&self, id: &str) -> Result<&WorldCategory> {
        self.categories
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| invalid(format!("world has no category {id:?}")))
    }

    pub fn category_index(&self, id: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| invalid(format!("world has no category {id:?}")))
    }

    /// `V · diag(s) · ε` for a category profile and standard-normal `ε`.
    pub fn irrelevant_offset(&self, profile: &[f64], eps: &[f64]) -> Latent {
        let s = &self.spec;
        let mut out = Latent::zeros(s.layers, s.dims);
        let coeffs: Vec<f64> = profile.iter().zip(eps).map(|(a, b)| a * b).collect();
        let v = self.basis.matvec(&coeffs).expect("profile length matches basis");
        out.values_mut().copy_from_slice(&v);
        out
    }

    /// Draws `n` codes of category `k` from a seeded stream (full precision).
    pub fn sample_category(&self, k: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<LatentCode> {
        let s = &self.spec;
        let cat = &self.categories[k];
        (0..n)
            .map(|_| {
                let eps: Vec<f64> = (0..s.irrelevant_rank).map(|_| normal(rng)).collect();
                let mut w = cat.center.add(&self.irrelevant_offset(&cat.profile, &eps)).expect("shapes");
                for v in w.values_mut() {
                    *v += s.noise_scale * normal(rng);
                }
                w
            })
            .collect()
    }
}

/// Samples a library with `n_per_seen` / `n_per_unseen` codes per category.
///
/// Category `k` draws from the sub-stream `(seed, k)`. Codes are rounded to
/// `f32` so the library survives an archive roundtrip unchanged.
pub fn sample_library(world: &World, n_per_seen: usize, n_per_unseen: usize, seed: u64) -> Result<CategoryLibrary> {
    if n_per_seen == 0 || (n_per_unseen == 0 && world.spec.unseen > 0) {
        return Err(invalid("sample counts must be at least 1"));
    }
    let mut lib = CategoryLibrary::new(world.spec.layers, world.spec.dims)?;
    for (k, cat) in world.categories.iter().enumerate() {
        let n = match cat.role {
            Role::Seen => n_per_seen,
            Role::Unseen => n_per_unseen,
        };
        let mut r = rng::substream(seed, &[k as u64]);
        let codes = world
            .sample_category(k, n, &mut r)
            .into_iter()
            .map(|c| c.quantized())
            .collect();
        lib.insert(cat.id.clone(), cat.role, codes)?;
    }
    Ok(lib)
}

/// `W_G · vec(w)`.
pub fn toy_render(world: &World, w: &LatentCode) -> Result<Vec<f64>> {
    let s = &world.spec;
    if w.shape() != (s.layers, s.dims) {
        return Err(invalid(format!(
            "toy_render: latent shape {:?} does not match world {:?}",
            w.shape(),
            (s.layers, s.dims)
        )));
    }
    world.renderer.matvec(w.values())
}

/// `reshape(W_Gᵀ · r)`.
pub fn toy_render_adjoint(world: &World, r: &[f64]) -> Result<Latent> {
    let s = &world.spec;
    if r.len() != s.feature_dim {
        return Err(invalid(format!(
            "toy_render_adjoint: feature length {} vs {}",
            r.len(),
            s.feature_dim
        )));
    }
    Latent::new(s.layers, s.dims, world.renderer.tr_matvec(r)?)
}

/// `w + eta·g` with seeded standard-normal `g`.
pub fn simulate_inversion(w: &LatentCode, eta: f64, seed: u64) -> Result<LatentCode> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(invalid(format!("eta must be non-negative, got {eta}")));
    }
    if eta == 0.0 {
        return Ok(w.clone());
    }
    let mut r = rng::stream(seed);
    let mut out = w.clone();
    for v in out.values_mut() {
        *v += eta * normal(&mut r);
    }
    Ok(out)
}

/// Renders a latent to a single-channel grid, `clamp(0.5 + 0.1·feature)`.
pub fn render_image(world: &World, w: &LatentCode) -> Result<ImageGrid> {
    let f = toy_render(world, w)?;
    features_to_image(world, &f)
}

pub fn features_to_image(world: &World, f: &[f64]) -> Result<ImageGrid> {
    let (h, wd) = world.spec.grid_shape();
    let data = f
        .iter()
        .map(|x| (IMAGE_OFFSET + IMAGE_GAIN * x).clamp(0.0, 1.0))
        .collect();
    ImageGrid::new(h, wd, 1, data)
}
