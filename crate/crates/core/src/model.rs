//! Learnable parameters and the forward computations that read them.

use serde::{Deserialize, Serialize};

use crate::error::{DplError, Result};
use crate::math::{self, softplus, DenseMatrix, DenseVector};
use crate::rng::SeededRng;

/// Default prototype-space dimension.
pub const DEFAULT_EMBED_DIM: usize = 128;
pub const DEFAULT_SIGMA2_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub d: usize,
    pub num_classes: usize,
    /// Width of the variance network's hidden layer.
    pub hidden: usize,
}

impl ModelDims {
    pub fn new(d_in: usize, d: usize, num_classes: usize) -> Self {
        ModelDims {
            d_in,
            d,
            num_classes,
            hidden: d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d == 0 || self.num_classes == 0 || self.hidden == 0 {
            return Err(DplError::Config(format!(
                "all model dimensions must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Linear map from raw features into prototype space: `z = W r + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
}

/// One unit-norm prototype per class, stored as matrix rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub centers: DenseMatrix,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.centers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.rows() == 0
    }

    pub fn get(&self, i: usize) -> &[f64] {
        self.centers.row(i)
    }

    /// Largest `| ‖cᵢ‖ − 1 |` over the bank.
    pub fn max_norm_deviation(&self) -> f64 {
        self.centers
            .row_iter()
            .map(|r| (math::norm(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Two-layer MLP mapping a prototype to its per-coordinate variance:
/// `softplus(w2 · relu(w1 c + b1) + b2) + floor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceNet {
    pub w1: DenseMatrix,
    pub b1: DenseVector,
    pub w2: DenseMatrix,
    pub b2: DenseVector,
    pub sigma2_floor: f64,
}

/// Intermediate values of one variance-net evaluation, kept for backprop.
#[derive(Clone, Debug)]
pub struct VarianceForward {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output_pre: Vec<f64>,
    pub variance: DenseVector,
}

impl VarianceNet {
    pub fn forward(&self, c: &[f64]) -> Result<VarianceForward> {
        let mut hidden_pre = self.w1.matvec(c)?.into_vec();
        for (h, b) in hidden_pre.iter_mut().zip(self.b1.iter()) {
            *h += b;
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|&x| x.max(0.0)).collect();
        let mut output_pre = self.w2.matvec(&hidden)?.into_vec();
        for (u, b) in output_pre.iter_mut().zip(self.b2.iter()) {
            *u += b;
        }
        let variance = output_pre
            .iter()
            .map(|&u| softplus(u) + self.sigma2_floor)
            .collect::<Vec<_>>()
            .into();
        Ok(VarianceForward {
            hidden_pre,
            hidden,
            output_pre,
            variance,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    /// Distance temperature.
    pub a: f64,
    /// Shared logit offset.
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub dims: ModelDims,
    pub step: u64,
    pub projector: ProjectorParams,
    pub prototypes: PrototypeBank,
    pub variance_net: VarianceNet,
    pub scales: ScaleParams,
}

/// Named view of one parameter array; used by the optimizer and gradient
/// checks to treat every parameter uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    ProjectorWeight,
    ProjectorBias,
    Prototypes,
    VarianceW1,
    VarianceB1,
    VarianceW2,
    VarianceB2,
    ScaleA,
    ScaleB,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::ProjectorWeight,
        ParamGroup::ProjectorBias,
        ParamGroup::Prototypes,
        ParamGroup::VarianceW1,
        ParamGroup::VarianceB1,
        ParamGroup::VarianceW2,
        ParamGroup::VarianceB2,
        ParamGroup::ScaleA,
        ParamGroup::ScaleB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::ProjectorWeight => "projector.weight",
            ParamGroup::ProjectorBias => "projector.bias",
            ParamGroup::Prototypes => "prototypes",
            ParamGroup::VarianceW1 => "variance.w1",
            ParamGroup::VarianceB1 => "variance.b1",
            ParamGroup::VarianceW2 => "variance.w2",
            ParamGroup::VarianceB2 => "variance.b2",
            ParamGroup::ScaleA => "scale.a",
            ParamGroup::ScaleB => "scale.b",
        }
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.values_mut() {
        *v = std * rng.standard_normal();
    }
    m
}

/// Fresh model: weights ~ N(0, 1/fan_in), zero biases, standard-normal
/// prototypes normalized to unit length, `a = 1`, `b = 0`.
///
/// Draw order is projector weight, prototypes, w1, w2.
pub fn init_model(dims: ModelDims, sigma2_floor: f64, rng: &mut SeededRng) -> Result<ModelState> {
    dims.validate()?;
    if !(sigma2_floor > 0.0 && sigma2_floor.is_finite()) {
        return Err(DplError::Config(format!(
            "variance floor must be positive, got {sigma2_floor}"
        )));
    }
    let ModelDims {
        d_in,
        d,
        num_classes,
        hidden,
    } = dims;
    let weight = gaussian_matrix(d, d_in, (1.0 / d_in as f64).sqrt(), rng);
    let mut centers = gaussian_matrix(num_classes, d, 1.0, rng);
    let w1 = gaussian_matrix(hidden, d, (1.0 / d as f64).sqrt(), rng);
    let w2 = gaussian_matrix(d, hidden, (1.0 / hidden as f64).sqrt(), rng);
    for i in 0..num_classes {
        let unit = math::l2_normalize(centers.row(i))?;
        centers.row_mut(i).copy_from_slice(&unit);
    }
    Ok(ModelState {
        dims,
        step: 0,
        projector: ProjectorParams {
            weight,
            bias: DenseVector::zeros(d),
        },
        prototypes: PrototypeBank { centers },
        variance_net: VarianceNet {
            w1,
            b1: DenseVector::zeros(hidden),
            w2,
            b2: DenseVector::zeros(d),
            sigma2_floor,
        },
        scales: ScaleParams { a: 1.0, b: 0.0 },
    })
}

impl ModelState {
    pub fn param(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::ProjectorWeight => self.projector.weight.values(),
            ParamGroup::ProjectorBias => &self.projector.bias,
            ParamGroup::Prototypes => self.prototypes.centers.values(),
            ParamGroup::VarianceW1 => self.variance_net.w1.values(),
            ParamGroup::VarianceB1 => &self.variance_net.b1,
            ParamGroup::VarianceW2 => self.variance_net.w2.values(),
            ParamGroup::VarianceB2 => &self.variance_net.b2,
            ParamGroup::ScaleA => std::slice::from_ref(&self.scales.a),
            ParamGroup::ScaleB => std::slice::from_ref(&self.scales.b),
        }
    }

    pub fn param_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::ProjectorWeight => self.projector.weight.values_mut(),
            ParamGroup::ProjectorBias => &mut self.projector.bias,
            ParamGroup::Prototypes => self.prototypes.centers.values_mut(),
            ParamGroup::VarianceW1 => self.variance_net.w1.values_mut(),
            ParamGroup::VarianceB1 => &mut self.variance_net.b1,
            ParamGroup::VarianceW2 => self.variance_net.w2.values_mut(),
            ParamGroup::VarianceB2 => &mut self.variance_net.b2,
            ParamGroup::ScaleA => std::slice::from_mut(&mut self.scales.a),
            ParamGroup::ScaleB => std::slice::from_mut(&mut self.scales.b),
        }
    }

    /// Check that every array matches `dims` and every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let ModelDims {
            d_in,
            d,
            num_classes,
            hidden,
        } = self.dims;
        let shapes: [(&str, (usize, usize), (usize, usize)); 4] = [
            ("projector.weight", self.projector.weight.shape(), (d, d_in)),
            (
                "prototypes",
                self.prototypes.centers.shape(),
                (num_classes, d),
            ),
            ("variance.w1", self.variance_net.w1.shape(), (hidden, d)),
            ("variance.w2", self.variance_net.w2.shape(), (d, hidden)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(DplError::Checkpoint(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        let lens = [
            ("projector.bias", self.projector.bias.len(), d),
            ("variance.b1", self.variance_net.b1.len(), hidden),
            ("variance.b2", self.variance_net.b2.len(), d),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(DplError::Checkpoint(format!(
                    "{name} has length {got}, expected {want}"
                )));
            }
        }
        for g in ParamGroup::ALL {
            if self.param(g).iter().any(|v| !v.is_finite()) {
                return Err(DplError::Checkpoint(format!(
                    "{g} contains non-finite values"
                )));
            }
        }
        if !(self.variance_net.sigma2_floor > 0.0 && self.variance_net.sigma2_floor.is_finite()) {
            return Err(DplError::Checkpoint(
                "variance floor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn project(&self, r: &[f64]) -> Result<DenseVector> {
        if r.len() != self.dims.d_in {
            return Err(DplError::Dimension {
                context: "projector input",
                expected: self.dims.d_in,
                found: r.len(),
            });
        }
        let mut z = self.projector.weight.matvec(r)?;
        for (zi, bi) in z.iter_mut().zip(self.projector.bias.iter()) {
            *zi += bi;
        }
        Ok(z)
    }

    fn check_embedding(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dims.d {
            return Err(DplError::Dimension {
                context: "embedding",
                expected: self.dims.d,
                found: z.len(),
            });
        }
        Ok(())
    }

    /// `‖z − cᵢ‖` for every class.
    pub fn distances(&self, z: &[f64]) -> Result<DenseVector> {
        self.check_embedding(z)?;
        self.prototypes
            .centers
            .row_iter()
            .map(|c| math::euclidean_distance(z, c))
            .collect::<Result<Vec<_>>>()
            .map(DenseVector::from)
    }

    /// Pre-softmax scores `−a‖z − cᵢ‖ + b`.
    pub fn distance_logits(&self, z: &[f64]) -> Result<DenseVector> {
        let ScaleParams { a, b } = self.scales;
        let mut d = self.distances(z)?;
        for v in d.iter_mut() {
            *v = -a * *v + b;
        }
        Ok(d)
    }

    /// Per-coordinate variance `σᵢ²` of class `i`'s sampling distribution.
    pub fn variance_of(&self, i: usize) -> Result<DenseVector> {
        let c = self.class_prototype(i)?;
        Ok(self.variance_net.forward(c)?.variance)
    }

    /// `σᵢ²` for every class, in class order.
    pub fn class_variances(&self) -> Result<Vec<DenseVector>> {
        (0..self.dims.num_classes)
            .map(|i| self.variance_of(i))
            .collect()
    }

    pub fn class_prototype(&self, i: usize) -> Result<&[f64]> {
        if i >= self.dims.num_classes {
            return Err(DplError::Index {
                context: "prototype bank",
                index: i,
                len: self.dims.num_classes,
            });
        }
        Ok(self.prototypes.get(i))
    }

    /// Divide each prototype row by its norm.
    pub fn renormalize_prototypes(&mut self) -> Result<()> {
        let centers = &mut self.prototypes.centers;
        for i in 0..centers.rows() {
            let unit = math::l2_normalize(centers.row(i)).map_err(|_| {
                DplError::Degenerate(format!("prototype {i} collapsed to the zero vector"))
            })?;
            centers.row_mut(i).copy_from_slice(&unit);
        }
        Ok(())
    }
}
