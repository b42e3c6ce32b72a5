//! Training objective and its analytic gradients.
//!
//! For a batch of `B` raw features `r` with labels `y`:
//!
//! ```text
//! z      = W r + bias
//! L_ce   = mean_n  −log softmax(−a‖z − cᵢ‖ + b)[y]
//! L_orth = Σ_{i≠j} |cᵢ·cⱼ| / (P(P−1))
//! L_mat  = mean_n  max(0, minⱼ ‖z − s_y⁽ʲ⁾‖ − R)²,   s = c + √f_σ(c) ⊙ ε
//! L      = L_ce + L_orth + α L_mat
//! ```
//!
//! Gradients are derived by hand. `gradcheck` compares them with central
//! finite differences of [`evaluate`], which shares no code with the
//! backward pass beyond the forward primitives.

use serde::{Deserialize, Serialize};

use crate::diversity::{
    self, find_set, LossBreakdown, SampleSet, DEFAULT_NUM_SAMPLES, DEFAULT_RADIUS,
};
use crate::error::{DplError, Result};
use crate::math::{self, sigmoid, DenseMatrix, DenseVector};
use crate::model::{ModelState, ParamGroup};

/// Added to distances used as denominators so `z = cᵢ` does not divide by 0.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Default weight of the matching loss.
pub const DEFAULT_ALPHA: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub radius: f64,
    /// When set, the matching loss treats prototypes as constants: no
    /// gradient reaches them through the sample mean or the variance-net
    /// input. The variance net itself is still trained.
    pub detach_prototype_in_sampling: bool,
    pub num_samples: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            radius: DEFAULT_RADIUS,
            detach_prototype_in_sampling: false,
            num_samples: DEFAULT_NUM_SAMPLES,
        }
    }
}

/// One labeled raw feature in a training batch.
pub type BatchItem<'a> = (&'a [f64], usize);

/// Gradient arrays laid out exactly like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub projector_weight: DenseMatrix,
    pub projector_bias: DenseVector,
    pub prototypes: DenseMatrix,
    pub variance_w1: DenseMatrix,
    pub variance_b1: DenseVector,
    pub variance_w2: DenseMatrix,
    pub variance_b2: DenseVector,
    pub a: f64,
    pub b: f64,
}

impl GradientBuffer {
    pub fn zeros_like(model: &ModelState) -> Self {
        let dims = model.dims;
        GradientBuffer {
            projector_weight: DenseMatrix::zeros(dims.d, dims.d_in),
            projector_bias: DenseVector::zeros(dims.d),
            prototypes: DenseMatrix::zeros(dims.num_classes, dims.d),
            variance_w1: DenseMatrix::zeros(dims.hidden, dims.d),
            variance_b1: DenseVector::zeros(dims.hidden),
            variance_w2: DenseMatrix::zeros(dims.d, dims.hidden),
            variance_b2: DenseVector::zeros(dims.d),
            a: 0.0,
            b: 0.0,
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::ProjectorWeight => self.projector_weight.values(),
            ParamGroup::ProjectorBias => &self.projector_bias,
            ParamGroup::Prototypes => self.prototypes.values(),
            ParamGroup::VarianceW1 => self.variance_w1.values(),
            ParamGroup::VarianceB1 => &self.variance_b1,
            ParamGroup::VarianceW2 => self.variance_w2.values(),
            ParamGroup::VarianceB2 => &self.variance_b2,
            ParamGroup::ScaleA => std::slice::from_ref(&self.a),
            ParamGroup::ScaleB => std::slice::from_ref(&self.b),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::ProjectorWeight => self.projector_weight.values_mut(),
            ParamGroup::ProjectorBias => &mut self.projector_bias,
            ParamGroup::Prototypes => self.prototypes.values_mut(),
            ParamGroup::VarianceW1 => self.variance_w1.values_mut(),
            ParamGroup::VarianceB1 => &mut self.variance_b1,
            ParamGroup::VarianceW2 => self.variance_w2.values_mut(),
            ParamGroup::VarianceB2 => &mut self.variance_b2,
            ParamGroup::ScaleA => std::slice::from_mut(&mut self.a),
            ParamGroup::ScaleB => std::slice::from_mut(&mut self.b),
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, scale: f64, other: &GradientBuffer) {
        for g in ParamGroup::ALL {
            for (x, y) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *x += scale * y;
            }
        }
    }

    pub fn max_abs(&self, g: ParamGroup) -> f64 {
        self.group(g).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// First group holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .find(|&g| self.group(g).iter().any(|v| !v.is_finite()))
    }
}

/// Per-component gradients of one batch.
#[derive(Clone, Debug)]
pub struct ComponentGradients {
    pub breakdown: LossBreakdown,
    pub ce: GradientBuffer,
    pub ortho: GradientBuffer,
    /// Gradient of the unweighted matching loss.
    pub matching: GradientBuffer,
}

impl ComponentGradients {
    pub fn total(&self, alpha: f64) -> GradientBuffer {
        let mut g = self.ce.clone();
        g.add_scaled(1.0, &self.ortho);
        g.add_scaled(alpha, &self.matching);
        g
    }
}

/// `L_ce + L_ortho + α·L_match`
pub fn total_loss(ce: f64, ortho: f64, matching: f64, alpha: f64) -> f64 {
    ce + ortho + alpha * matching
}

/// `−log p(label | z)` under the distance softmax.
///
/// The shared offset `b` cancels inside the softmax and is left out of the
/// computation, so the value does not move at all when `b` changes.
pub fn ce_loss(z: &[f64], label: usize, model: &ModelState) -> Result<f64> {
    if label >= model.dims.num_classes {
        return Err(DplError::Index {
            context: "class label",
            index: label,
            len: model.dims.num_classes,
        });
    }
    let a = model.scales.a;
    let scaled: Vec<f64> = model.distances(z)?.iter().map(|d| -a * d).collect();
    Ok(-math::log_softmax(&scaled)?[label])
}

fn check_batch(batch: &[BatchItem<'_>], model: &ModelState) -> Result<()> {
    if batch.is_empty() {
        return Err(DplError::Config("empty batch".into()));
    }
    for &(r, y) in batch {
        if r.len() != model.dims.d_in {
            return Err(DplError::Dimension {
                context: "batch feature",
                expected: model.dims.d_in,
                found: r.len(),
            });
        }
        if y >= model.dims.num_classes {
            return Err(DplError::Index {
                context: "batch label",
                index: y,
                len: model.dims.num_classes,
            });
        }
    }
    Ok(())
}

/// Rebuild class `k`'s samples from the current parameters and the stored
/// noise.
fn rebuild_samples(model: &ModelState, set: &SampleSet) -> Result<SampleSet> {
    let c = model.class_prototype(set.class_index)?;
    let var = model.variance_of(set.class_index)?;
    SampleSet::from_parts(set.class_index, c, &var, set.epsilons.clone())
}

/// Forward pass only: the loss values for `batch` with the noise in `sets`
/// held fixed.
pub fn evaluate(
    batch: &[BatchItem<'_>],
    model: &ModelState,
    sets: &[SampleSet],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_batch(batch, model)?;
    let rebuilt = sets
        .iter()
        .map(|s| rebuild_samples(model, s))
        .collect::<Result<Vec<_>>>()?;
    let mut ce = 0.0;
    let mut embedded = Vec::with_capacity(batch.len());
    for &(r, y) in batch {
        let z = model.project(r)?;
        ce += ce_loss(&z, y, model)?;
        embedded.push((z, y));
    }
    ce /= batch.len() as f64;
    let matching = diversity::matching_loss(&embedded, &rebuilt, cfg.radius)?;
    let ortho = diversity::orthogonal_loss(&model.prototypes)?;
    Ok(LossBreakdown::compose(ce, ortho, matching, cfg.alpha))
}

/// Loss values and the gradient of the total loss.
pub fn backward(
    batch: &[BatchItem<'_>],
    model: &ModelState,
    sets: &[SampleSet],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, GradientBuffer)> {
    let parts = backward_components(batch, model, sets, cfg)?;
    Ok((parts.breakdown, parts.total(cfg.alpha)))
}

/// Loss values and separate gradients of each loss term.
pub fn backward_components(
    batch: &[BatchItem<'_>],
    model: &ModelState,
    sets: &[SampleSet],
    cfg: &LossConfig,
) -> Result<ComponentGradients> {
    check_batch(batch, model)?;
    if !(cfg.radius > 0.0) {
        return Err(DplError::Config(format!(
            "matching radius must be positive, got {}",
            cfg.radius
        )));
    }
    let zs = batch
        .iter()
        .map(|&(r, _)| model.project(r))
        .collect::<Result<Vec<_>>>()?;

    let mut ce_grad = GradientBuffer::zeros_like(model);
    let ce = ce_backward(batch, &zs, model, &mut ce_grad)?;

    let mut ortho_grad = GradientBuffer::zeros_like(model);
    let ortho = ortho_backward(model, &mut ortho_grad)?;

    let mut match_grad = GradientBuffer::zeros_like(model);
    let matching = match_backward(batch, &zs, model, sets, cfg, &mut match_grad)?;

    Ok(ComponentGradients {
        breakdown: LossBreakdown::compose(ce, ortho, matching, cfg.alpha),
        ce: ce_grad,
        ortho: ortho_grad,
        matching: match_grad,
    })
}

/// Push an embedding gradient back through `z = W r + bias`.
fn projector_backward(grad: &mut GradientBuffer, gz: &[f64], r: &[f64]) {
    grad.projector_weight.add_outer(1.0, gz, r);
    for (b, g) in grad.projector_bias.iter_mut().zip(gz) {
        *b += g;
    }
}

fn ce_backward(
    batch: &[BatchItem<'_>],
    zs: &[DenseVector],
    model: &ModelState,
    grad: &mut GradientBuffer,
) -> Result<f64> {
    let a = model.scales.a;
    let inv_b = 1.0 / batch.len() as f64;
    let p_count = model.dims.num_classes;
    let mut loss = 0.0;
    let mut gz = vec![0.0; model.dims.d];
    for (&(r, y), z) in batch.iter().zip(zs) {
        let dist = model.distances(z)?;
        let scaled: Vec<f64> = dist.iter().map(|d| -a * d).collect();
        let logp = math::log_softmax(&scaled)?;
        loss += -logp[y];

        gz.fill(0.0);
        for i in 0..p_count {
            // ∂L/∂logitᵢ = pᵢ − yᵢ
            let g = logp[i].exp() - if i == y { 1.0 } else { 0.0 };
            grad.a += inv_b * g * -dist[i];
            grad.b += inv_b * g;
            // logitᵢ = −a dᵢ + b, ∂dᵢ/∂z = (z − cᵢ)/dᵢ = −∂dᵢ/∂cᵢ
            let coef = inv_b * -a * g / (dist[i] + DISTANCE_EPS);
            let c = model.prototypes.get(i);
            let gc = grad.prototypes.row_mut(i);
            for k in 0..z.len() {
                let diff = z[k] - c[k];
                gz[k] += coef * diff;
                gc[k] -= coef * diff;
            }
        }
        projector_backward(grad, &gz, r);
    }
    Ok(loss * inv_b)
}

fn ortho_backward(model: &ModelState, grad: &mut GradientBuffer) -> Result<f64> {
    let loss = diversity::orthogonal_loss(&model.prototypes)?;
    let p = model.dims.num_classes;
    // Each unordered pair appears twice in the ordered sum.
    let scale = 2.0 / (p * (p - 1)) as f64;
    for i in 0..p {
        for j in (i + 1)..p {
            let ci = model.prototypes.get(i);
            let cj = model.prototypes.get(j);
            let s = scale * sign(math::dot(ci, cj));
            if s == 0.0 {
                continue;
            }
            for k in 0..ci.len() {
                let (vi, vj) = (ci[k], cj[k]);
                grad.prototypes.row_mut(i)[k] += s * vj;
                grad.prototypes.row_mut(j)[k] += s * vi;
            }
        }
    }
    Ok(loss)
}

/// Subgradient of `|x|`, taking 0 at 0.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn match_backward(
    batch: &[BatchItem<'_>],
    zs: &[DenseVector],
    model: &ModelState,
    sets: &[SampleSet],
    cfg: &LossConfig,
    grad: &mut GradientBuffer,
) -> Result<f64> {
    let d = model.dims.d;
    let inv_b = 1.0 / batch.len() as f64;
    let track_prototype = !cfg.detach_prototype_in_sampling;

    // Per class: variance-net forward and accumulated ∂L/∂σ².
    let mut per_class: Vec<Option<(crate::model::VarianceForward, Vec<f64>, Vec<f64>)>> =
        vec![None; model.dims.num_classes];
    let mut loss = 0.0;
    let mut gz = vec![0.0; d];
    for (&(r, y), z) in batch.iter().zip(zs) {
        let set = find_set(sets, y)?;
        if per_class[y].is_none() {
            let fwd = model.variance_net.forward(model.prototypes.get(y))?;
            let sigma: Vec<f64> = fwd.variance.iter().map(|v| v.sqrt()).collect();
            per_class[y] = Some((fwd, sigma, vec![0.0; d]));
        }
        let (_, sigma, g_var) = per_class[y].as_mut().expect("filled above");
        let c = model.prototypes.get(y);

        // Nearest rebuilt sample, lowest index on ties.
        let mut best = (0usize, f64::INFINITY);
        for j in 0..set.epsilons.rows() {
            let eps = set.epsilons.row(j);
            let dist2: f64 = (0..d)
                .map(|k| {
                    let diff = z[k] - (c[k] + sigma[k] * eps[k]);
                    diff * diff
                })
                .sum();
            let dist = dist2.sqrt();
            if dist < best.1 {
                best = (j, dist);
            }
        }
        let (j, dist) = best;
        let hinge = dist - cfg.radius;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge * hinge;

        // ∂/∂dist (hinge²) = 2·hinge; ∂dist/∂z = (z − s)/dist = −∂dist/∂s.
        let coef = inv_b * 2.0 * hinge / (dist + DISTANCE_EPS);
        let eps = set.epsilons.row(j);
        for k in 0..d {
            let diff = z[k] - (c[k] + sigma[k] * eps[k]);
            gz[k] = coef * diff;
            let gs = -coef * diff;
            if track_prototype {
                grad.prototypes.row_mut(y)[k] += gs;
            }
            // s = c + σ ε, σ = √v  ⇒  ∂s/∂v = ε / (2σ)
            g_var[k] += gs * eps[k] / (2.0 * sigma[k]);
        }
        projector_backward(grad, &gz, r);
    }

    for (class, entry) in per_class.into_iter().enumerate() {
        let Some((fwd, _, g_var)) = entry else {
            continue;
        };
        let c = model.prototypes.get(class);
        variance_net_backward(model, &fwd, &g_var, c, track_prototype, class, grad)?;
    }
    Ok(loss * inv_b)
}

/// Backprop `∂L/∂σ²` through `softplus(w2 relu(w1 c + b1) + b2) + floor`.
fn variance_net_backward(
    model: &ModelState,
    fwd: &crate::model::VarianceForward,
    g_var: &[f64],
    c: &[f64],
    track_prototype: bool,
    class: usize,
    grad: &mut GradientBuffer,
) -> Result<()> {
    let net = &model.variance_net;
    let g_out: Vec<f64> = g_var
        .iter()
        .zip(&fwd.output_pre)
        .map(|(g, &u)| g * sigmoid(u))
        .collect();
    grad.variance_w2.add_outer(1.0, &g_out, &fwd.hidden);
    for (b, g) in grad.variance_b2.iter_mut().zip(&g_out) {
        *b += g;
    }
    let mut g_hidden = net.w2.matvec_transposed(&g_out)?.into_vec();
    for (g, &pre) in g_hidden.iter_mut().zip(&fwd.hidden_pre) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    grad.variance_w1.add_outer(1.0, &g_hidden, c);
    for (b, g) in grad.variance_b1.iter_mut().zip(&g_hidden) {
        *b += g;
    }
    if track_prototype {
        let g_c = net.w1.matvec_transposed(&g_hidden)?;
        for (gc, g) in grad.prototypes.row_mut(class).iter_mut().zip(g_c.iter()) {
            *gc += g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelDims};
    use crate::rng::SeededRng;

    fn two_class_model() -> ModelState {
        let mut m = init_model(ModelDims::new(2, 2, 2), 1e-3, &mut SeededRng::new(1)).unwrap();
        m.prototypes.centers = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        m
    }

    #[test]
    fn ce_examples() {
        let mut m = two_class_model();
        // Distances (0, 1): z = c₀ and ‖c₀ − c₁‖ would be √2, so place z where
        // the distances are exactly 0 and 1.
        m.prototypes.centers = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let l = ce_loss(&[0.0, 0.0], 0, &m).unwrap();
        assert!((l - 0.3132617).abs() < 1e-6, "{l}");
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12, "{l}");

        // Equidistant from four prototypes gives ln 4.
        let mut m4 = init_model(ModelDims::new(2, 2, 4), 1e-3, &mut SeededRng::new(1)).unwrap();
        m4.prototypes.centers = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let l = ce_loss(&[0.0, 0.0], 2, &m4).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3862944).abs() < 1e-7);

        // Saturated probability.
        m.scales.a = 1e4;
        assert_eq!(ce_loss(&[0.0, 0.0], 0, &m).unwrap(), 0.0);
        assert!(ce_loss(&[0.0, 0.0], 2, &m).is_err());
    }

    #[test]
    fn ce_exactly_invariant_to_offset() {
        let mut m = two_class_model();
        let z = [0.3, -1.2];
        let base = ce_loss(&z, 1, &m).unwrap();
        for b in [-7.5, 0.1, 1e3] {
            m.scales.b = b;
            assert_eq!(ce_loss(&z, 1, &m).unwrap(), base);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0, 0.5, 0.2, 10.0) - 3.5).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 0.5, 0.2, 0.0), 1.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 10.0), 0.0);
        assert_eq!(DEFAULT_ALPHA, 10.0);
    }

    #[test]
    fn saturated_ce_has_zero_logit_gradient() {
        let mut m = two_class_model();
        m.projector.weight = DenseMatrix::identity(2);
        m.scales.a = 1e4;
        let r = [1.0, 0.0];
        let mut g = GradientBuffer::zeros_like(&m);
        let zs = vec![m.project(&r).unwrap()];
        ce_backward(&[(&r, 0)], &zs, &m, &mut g).unwrap();
        assert_eq!(g.a, 0.0);
        assert_eq!(g.b, 0.0);
        assert!(g.projector_weight.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let mut m = two_class_model();
        m.projector.weight = DenseMatrix::identity(2);
        let r = [0.9, 0.1];
        let set =
            SampleSet::from_parts(0, &[1.0, 0.0], &[0.0, 0.0], DenseMatrix::zeros(3, 2)).unwrap();
        let cfg = LossConfig::default();
        let parts = backward_components(&[(&r, 0)], &m, &[set], &cfg).unwrap();
        assert_eq!(parts.breakdown.matching, 0.0);
        for g in ParamGroup::ALL {
            assert!(parts.matching.group(g).iter().all(|v| *v == 0.0), "{g}");
        }
    }

    #[test]
    fn breakdown_total_consistent() {
        let mut rng = SeededRng::new(3);
        let m = init_model(ModelDims::new(4, 3, 3), 1e-3, &mut rng).unwrap();
        let r: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| 2.0 * rng.standard_normal()).collect())
            .collect();
        let batch: Vec<BatchItem> = r
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_slice(), i % 3))
            .collect();
        let sets: Vec<SampleSet> = (0..3)
            .map(|k| diversity::draw_samples(&m, k, 5, &mut rng).unwrap())
            .collect();
        let cfg = LossConfig::default();
        let (bd, _) = backward(&batch, &m, &sets, &cfg).unwrap();
        assert!((bd.total - (bd.ce + bd.ortho + cfg.alpha * bd.matching)).abs() < 1e-12);
        let fwd = evaluate(&batch, &m, &sets, &cfg).unwrap();
        assert!((fwd.total - bd.total).abs() < 1e-12);
    }

    #[test]
    fn detached_sampling_leaves_prototypes_alone() {
        let mut rng = SeededRng::new(5);
        let m = init_model(ModelDims::new(4, 3, 2), 1e-3, &mut rng).unwrap();
        let r = vec![5.0, -4.0, 3.0, 6.0];
        let sets = vec![diversity::draw_samples(&m, 1, 3, &mut rng).unwrap()];
        let cfg = LossConfig {
            detach_prototype_in_sampling: true,
            ..LossConfig::default()
        };
        let parts = backward_components(&[(&r, 1)], &m, &sets, &cfg).unwrap();
        assert!(parts.breakdown.matching > 0.0);
        assert!(parts.matching.prototypes.values().iter().all(|v| *v == 0.0));
        assert!(parts.matching.variance_b2.iter().any(|v| *v != 0.0));
    }
}
