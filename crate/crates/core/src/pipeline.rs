//! End-to-end helpers shared by the command line and the experiments.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Result};
use crate::factorization::FactorizationModel;
use crate::io::config::FeatureSpace;
use crate::latent::{CategoryLibrary, LatentCode};
use crate::rng;
use crate::stable::{
    age_generate_from_shots, fit_code_gaussian, multi_tb_generate_with_bank, sage_pipeline, CodeBank, EditConfig,
    GaussianModel,
};
use crate::world::{toy_render, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Age,
    Sage,
    SageMulti,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Age => "age",
            Method::Sage => "sage",
            Method::SageMulti => "sage-multi",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "age" => Ok(Method::Age),
            "sage" => Ok(Method::Sage),
            "sage-multi" => Ok(Method::SageMulti),
            _ => Err(invalid(format!("unknown method {s:?} (age | sage | sage-multi)"))),
        }
    }
}

/// A trained model with its seen-code bank and the AGE code distribution.
#[derive(Debug, Clone)]
pub struct Generator<'a> {
    pub model: &'a FactorizationModel,
    pub bank: CodeBank,
    /// Gaussian over the codes of every seen sample.
    pub age_gaussian: GaussianModel,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a FactorizationModel, library: &CategoryLibrary) -> Result<Self> {
        model.validate()?;
        if (library.layers(), library.dims()) != (model.dictionary.num_layers(), model.dictionary.dims()) {
            return Err(invalid("library shape does not match the model"));
        }
        let bank = CodeBank::build(model, library)?;
        let age_gaussian = fit_code_gaussian(&bank.all_codes())?;
        Ok(Self {
            model,
            bank,
            age_gaussian,
        })
    }

    pub fn generate(
        &self,
        shots: &[LatentCode],
        method: Method,
        cfg: &EditConfig,
        count: usize,
        seed: u64,
    ) -> Result<Vec<LatentCode>> {
        cfg.validate()?;
        match method {
            Method::Age => {
                age_generate_from_shots(shots, &self.model.dictionary, &self.age_gaussian, cfg.alpha, count, seed)
            }
            Method::Sage => {
                Ok(sage_pipeline(shots, self.model, &self.bank, cfg, cfg.t_b[0], count, seed)?.outputs)
            }
            Method::SageMulti => multi_tb_generate_with_bank(shots, self.model, &self.bank, cfg, count, seed),
        }
    }

    /// Generates `count` codes for every category of `targets`, using the
    /// first `cfg.shots` codes of each; category `k` (in id order) is seeded
    /// with `(seed, k)`.
    pub fn generate_library(
        &self,
        targets: &CategoryLibrary,
        method: Method,
        cfg: &EditConfig,
        count: usize,
        seed: u64,
    ) -> Result<CategoryLibrary> {
        let mut out = CategoryLibrary::new(targets.layers(), targets.dims())?;
        for (k, (id, cat)) in targets.iter().enumerate() {
            if cat.codes.len() < cfg.shots {
                return Err(invalid(format!(
                    "category {id:?} has {} codes, {} shots requested",
                    cat.codes.len(),
                    cfg.shots
                )));
            }
            let gen = self.generate(&cat.codes[..cfg.shots], method, cfg, count, rng::derive_seed(seed, &[k as u64]))?;
            out.insert(id.clone(), cat.role, gen.iter().map(|c| c.quantized()).collect())?;
        }
        Ok(out)
    }
}

/// Metric features of codes: toy-rendered or flattened.
pub fn features(world: Option<&World>, codes: &[LatentCode], space: FeatureSpace) -> Result<Vec<Vec<f64>>> {
    match space {
        FeatureSpace::Latent => Ok(codes.iter().map(|c| c.values().to_vec()).collect()),
        FeatureSpace::Feature => {
            let w = world.ok_or_else(|| invalid("feature-space metrics need a world"))?;
            codes.iter().map(|c| toy_render(w, c)).collect()
        }
    }
}
