//! Parameter initialization: sparse hidden-to-hidden weights rescaled to a
//! unit largest singular value, Gaussian input/output weights with
//! per-dataset standard deviations, and warm starts from a shallower model.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{gaussian_matrix, largest_singular_value, Matrix, Nonlinearity, Rng, SPECTRAL_TOL};
use crate::model::{build, ModelConfig, ParamSet, Role};

/// Nonzero incoming connections per unit in hidden-to-hidden matrices.
pub const SPARSE_FAN_IN: usize = 20;
/// Learning-rate multiplier for tensors copied from a pretrained parent.
pub const PRETRAINED_LR_MULTIPLIER: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitPreset {
    Music,
    Char,
    Word,
}

impl InitPreset {
    pub fn input_std(self) -> f64 {
        match self {
            InitPreset::Music => 0.1,
            InitPreset::Char => 0.01,
            InitPreset::Word => 0.1,
        }
    }

    pub fn output_std(self) -> f64 {
        match self {
            InitPreset::Music => 0.01,
            InitPreset::Char => 0.001,
            InitPreset::Word => 0.1,
        }
    }

    /// Hidden state to the deep-output intermediate layer.
    pub fn deep_output_std(self) -> f64 {
        0.01
    }

    /// Bias of layers built from rectifier units.
    pub fn rectifier_bias(self) -> f64 {
        0.1
    }

    pub fn name(self) -> &'static str {
        match self {
            InitPreset::Music => "music",
            InitPreset::Char => "char",
            InitPreset::Word => "word",
        }
    }
}

impl fmt::Display for InitPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "music" => Ok(InitPreset::Music),
            "char" => Ok(InitPreset::Char),
            "word" => Ok(InitPreset::Word),
            _ => Err(Error::config(format!("unknown initialization preset `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitRule {
    /// `nnz` Gaussian entries per column, then divided by the largest
    /// singular value.
    SparseUnitSpectral { nnz: usize, std: f64 },
    Gaussian { std: f64 },
    Constant(f64),
}

/// Exactly one rule per parameter of a skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct InitRecipe {
    rules: Vec<(String, InitRule)>,
}

impl InitRecipe {
    pub fn for_model(config: &ModelConfig, preset: InitPreset) -> Result<Self> {
        let (skeleton, _) = build(config)?;
        let rules = skeleton
            .iter()
            .map(|p| {
                let rule = match p.role {
                    Role::HiddenToHidden => InitRule::SparseUnitSpectral {
                        nnz: SPARSE_FAN_IN,
                        std: 1.0,
                    },
                    Role::InputToHidden => InitRule::Gaussian {
                        std: preset.input_std(),
                    },
                    Role::HiddenToOutput | Role::OutputInterToOutput => InitRule::Gaussian {
                        std: preset.output_std(),
                    },
                    Role::HiddenToOutputInter => InitRule::Gaussian {
                        std: preset.deep_output_std(),
                    },
                    Role::Bias {
                        nl: Some(Nonlinearity::Rectifier),
                        ..
                    } => InitRule::Constant(preset.rectifier_bias()),
                    Role::Bias { .. } => InitRule::Constant(0.0),
                };
                (p.name.clone(), rule)
            })
            .collect();
        Ok(InitRecipe { rules })
    }

    pub fn rule(&self, name: &str) -> Option<InitRule> {
        self.rules.iter().find(|(n, _)| n == name).map(|(_, r)| *r)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, InitRule)> {
        self.rules.iter().map(|(n, r)| (n.as_str(), *r))
    }

    /// Fills every tensor of `skeleton` according to its rule.
    pub fn apply(&self, skeleton: &ParamSet, rng: &mut Rng) -> Result<ParamSet> {
        let mut out = skeleton.clone();
        for p in out.iter_mut() {
            let rule = self
                .rule(&p.name)
                .ok_or_else(|| Error::config(format!("no initialization rule for `{}`", p.name)))?;
            let (rows, cols) = p.value.shape();
            p.value = match rule {
                InitRule::SparseUnitSpectral { nnz, std } => {
                    let m = sparse_init(rng, rows, cols, nnz, std);
                    rescale_to_unit_spectral(&m).map_err(|e| match e {
                        Error::Numeric(msg) | Error::Config(msg) => {
                            Error::Numeric(format!("`{}`: {msg}", p.name))
                        }
                        other => other,
                    })?
                }
                InitRule::Gaussian { std } => gaussian_matrix(rng, rows, cols, std),
                InitRule::Constant(c) => Matrix::new(rows, cols, vec![c; rows * cols])?,
            };
        }
        Ok(out)
    }
}

/// Dense `rows x cols` matrix where each column (output unit) has
/// `min(nnz_per_unit, rows)` Gaussian entries at uniformly chosen rows.
pub fn sparse_init(rng: &mut Rng, rows: usize, cols: usize, nnz_per_unit: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    let k = nnz_per_unit.max(1).min(rows);
    for c in 0..cols {
        for r in rng.sample_indices(rows, k) {
            m.set(r, c, std * rng.normal());
        }
    }
    m
}

pub fn rescale_to_unit_spectral(m: &Matrix) -> Result<Matrix> {
    if m.as_slice().iter().all(|&v| v == 0.0) {
        return Err(Error::config(format!(
            "cannot rescale a zero {}x{} matrix to unit spectral norm",
            m.rows(),
            m.cols()
        )));
    }
    let sigma = largest_singular_value(m, SPECTRAL_TOL)?;
    let mut out = m.clone();
    out.scale(1.0 / sigma);
    Ok(out)
}

pub fn init_model(config: &ModelConfig, preset: InitPreset, rng: &mut Rng) -> Result<ParamSet> {
    let (skeleton, _) = build(config)?;
    InitRecipe::for_model(config, preset)?.apply(&skeleton, rng)
}

/// Copies every transition tensor the deep model shares (by name) with its
/// pretrained parent and marks it with the reduced learning rate. Output
/// tensors and tensors the parent lacks keep their fresh values.
pub fn warm_start(
    deep_config: &ModelConfig,
    deep_params: &ParamSet,
    source_config: &ModelConfig,
    source_params: &ParamSet,
) -> Result<ParamSet> {
    let parent = deep_config.architecture.warm_start_parent();
    if parent != Some(source_config.architecture) {
        return Err(Error::config(format!(
            "{} cannot be warm-started from {}",
            deep_config.architecture, source_config.architecture
        )));
    }
    if source_config.input_dim != deep_config.input_dim {
        return Err(Error::config(format!(
            "input size {} of the source does not match {}",
            source_config.input_dim, deep_config.input_dim
        )));
    }
    let mut out = deep_params.clone();
    for p in out.iter_mut().filter(|p| p.role.is_transition()) {
        let Some(src) = source_params.get(&p.name) else {
            continue;
        };
        if src.value.shape() != p.value.shape() {
            return Err(Error::config(format!(
                "`{}` is {:?} in the source but {:?} in the target",
                p.name,
                src.value.shape(),
                p.value.shape()
            )));
        }
        p.value = src.value.clone();
        p.lr_multiplier = PRETRAINED_LR_MULTIPLIER;
    }
    Ok(out)
}
