//! Flat parameter vectors in unconstrained coordinates, objective gradients
//! and the finite-difference harness.
//!
//! Positive quantities (kernel variance, lengthscales, noise variance, the
//! diagonal of `L`) are stored as logs. `Z`, `M` and the strictly lower part
//! of `L` are stored as is, row by row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deep::{self, DeepGpModel, LayerGradient, Mode};
use crate::error::{DeepGpError, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::linalg::LowerTriangular;
use crate::report::BoundReport;
use crate::sparse::{svi_bound, VariationalLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    KernelVarianceLog,
    LengthscalesLog,
    Z,
    M,
    LPacked,
    NoiseVarLog,
}

/// A contiguous run of entries belonging to one layer and role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Zero-based layer index.
    pub layer: usize,
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub family: KernelFamily,
    pub num_inducing: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub mode: Mode,
    pub shapes: Vec<LayerShape>,
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn for_model(model: &DeepGpModel) -> Self {
        let shapes: Vec<LayerShape> = model
            .layers
            .iter()
            .map(|l| LayerShape {
                family: l.kernel.family(),
                num_inducing: l.num_inducing(),
                input_dim: l.input_dim(),
                output_dim: l.output_dim(),
            })
            .collect();
        Self::from_shapes(model.mode, shapes)
    }

    pub fn from_shapes(mode: Mode, shapes: Vec<LayerShape>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (layer, s) in shapes.iter().enumerate() {
            let m = s.num_inducing;
            let ls = match s.family {
                KernelFamily::ExponentiatedQuadratic => s.input_dim,
                KernelFamily::Linear => 0,
            };
            let parts = [
                (ParamRole::KernelVarianceLog, 1),
                (ParamRole::LengthscalesLog, ls),
                (ParamRole::Z, m * s.input_dim),
                (ParamRole::M, m * s.output_dim),
                (ParamRole::LPacked, m * (m + 1) / 2),
                (ParamRole::NoiseVarLog, 1),
            ];
            for (role, len) in parts {
                if len > 0 {
                    segments.push(Segment {
                        layer,
                        role,
                        offset,
                        len,
                    });
                    offset += len;
                }
            }
        }
        Self { mode, shapes, segments }
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, layer: usize, role: ParamRole) -> Option<&Segment> {
        self.segments.iter().find(|s| s.layer == layer && s.role == role)
    }

    /// Human-readable name of entry `index`, e.g. `layer 2 Z[3]`.
    pub fn describe(&self, index: usize) -> String {
        match self
            .segments
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len)
        {
            Some(s) => format!("layer {} {:?}[{}]", s.layer + 1, s.role, index - s.offset),
            None => format!("entry {index}"),
        }
    }
}

/// Flat unconstrained parameters with their layout and a mask of frozen entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: DVector<f64>,
    pub layout: Layout,
    pub fixed_mask: Vec<bool>,
}

impl ParameterVector {
    pub fn new(values: DVector<f64>, layout: Layout, fixed_mask: Vec<bool>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(DeepGpError::LayoutMismatch(format!(
                "{} values for a layout of {} entries",
                values.len(),
                layout.len()
            )));
        }
        if fixed_mask.len() != values.len() {
            return Err(DeepGpError::LayoutMismatch(format!(
                "mask has {} entries, expected {}",
                fixed_mask.len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            layout,
            fixed_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout and mask, different values.
    pub fn with_values(&self, values: DVector<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone(), self.fixed_mask.clone())
    }

    /// Freezes (or unfreezes) every entry with the given role, optionally in one layer only.
    pub fn set_fixed(&mut self, role: ParamRole, layer: Option<usize>, fixed: bool) {
        for s in &self.layout.segments {
            if s.role == role && layer.is_none_or(|l| l == s.layer) {
                for f in &mut self.fixed_mask[s.offset..s.offset + s.len] {
                    *f = fixed;
                }
            }
        }
    }

    /// Freezes every entry of one layer.
    pub fn fix_layer(&mut self, layer: usize) {
        for s in &self.layout.segments {
            if s.layer == layer {
                for f in &mut self.fixed_mask[s.offset..s.offset + s.len] {
                    *f = true;
                }
            }
        }
    }

    fn apply_mask(&mut self) {
        for (v, &f) in self.values.iter_mut().zip(&self.fixed_mask) {
            if f {
                *v = 0.0;
            }
        }
    }
}

pub fn pack(model: &DeepGpModel) -> ParameterVector {
    let layout = Layout::for_model(model);
    let mut values = Vec::with_capacity(layout.len());
    for layer in &model.layers {
        values.push(layer.kernel.variance().ln());
        if layer.kernel.family() == KernelFamily::ExponentiatedQuadratic {
            values.extend(layer.kernel.lengthscales().iter().map(|l| l.ln()));
        }
        push_rows(&mut values, &layer.z);
        push_rows(&mut values, &layer.mean);
        for i in 0..layer.num_inducing() {
            for j in 0..i {
                values.push(layer.chol[(i, j)]);
            }
            values.push(layer.chol[(i, i)].ln());
        }
        values.push(layer.noise_var.ln());
    }
    let n = values.len();
    ParameterVector {
        values: DVector::from_vec(values),
        layout,
        fixed_mask: vec![false; n],
    }
}

fn push_rows(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn read_rows(values: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, values)
}

pub fn unpack(pv: &ParameterVector) -> Result<DeepGpModel> {
    let layout = &pv.layout;
    if pv.values.len() != layout.len() || Layout::from_shapes(layout.mode, layout.shapes.clone()) != *layout {
        return Err(DeepGpError::LayoutMismatch(
            "values do not match the layout descriptor".into(),
        ));
    }
    let v = pv.values.as_slice();
    let mut layers = Vec::with_capacity(layout.shapes.len());
    for (li, shape) in layout.shapes.iter().enumerate() {
        let seg = |role| layout.segment(li, role).map(|s| &v[s.offset..s.offset + s.len]);
        let m = shape.num_inducing;
        let variance = seg(ParamRole::KernelVarianceLog).expect("always present")[0].exp();
        let kernel = match shape.family {
            KernelFamily::ExponentiatedQuadratic => {
                let ls = seg(ParamRole::LengthscalesLog)
                    .unwrap_or(&[])
                    .iter()
                    .map(|x| x.exp())
                    .collect();
                KernelSpec::exponentiated_quadratic(variance, ls)?
            }
            KernelFamily::Linear => KernelSpec::linear(variance, shape.input_dim)?,
        };
        let z = read_rows(seg(ParamRole::Z).expect("always present"), m, shape.input_dim);
        let mean = read_rows(seg(ParamRole::M).expect("always present"), m, shape.output_dim);
        let packed = seg(ParamRole::LPacked).expect("always present");
        let mut chol = DMatrix::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in 0..i {
                chol[(i, j)] = packed[k];
                k += 1;
            }
            chol[(i, i)] = packed[k].exp();
            k += 1;
        }
        let noise = seg(ParamRole::NoiseVarLog).expect("always present")[0].exp();
        layers.push(VariationalLayer::new(
            kernel,
            z,
            mean,
            LowerTriangular::new(chol)?,
            noise,
        )?);
    }
    DeepGpModel::new(layers, layout.mode)
}

/// Borrowed training data. `x` is ignored in autoencoder mode.
#[derive(Debug, Clone, Copy)]
pub struct Data<'a> {
    pub x: Option<&'a DMatrix<f64>>,
    pub y: &'a DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Single-layer uncollapsed bound.
    Svi,
    Deep,
    Minibatch {
        batch: Vec<usize>,
        n_total: usize,
    },
}

/// Evaluates the objective directly.
pub fn evaluate(objective: &Objective, model: &DeepGpModel, data: Data<'_>) -> Result<BoundReport> {
    match objective {
        Objective::Svi => {
            let layer = single_layer(model)?;
            svi_bound(layer, model.inputs(data.x, data.y)?, data.y)
        }
        Objective::Deep => deep::deep_bound(model, data.x, data.y),
        Objective::Minibatch { batch, n_total } => deep::deep_bound_minibatch(model, batch, data.x, data.y, *n_total),
    }
}

fn single_layer(model: &DeepGpModel) -> Result<&VariationalLayer> {
    if model.depth() != 1 {
        return Err(DeepGpError::InvalidModel(format!(
            "the single-layer bound needs one layer, model has {}",
            model.depth()
        )));
    }
    Ok(&model.layers[0])
}

/// Rows and scale an objective evaluates on.
pub(crate) fn objective_rows(
    objective: &Objective,
    model: &DeepGpModel,
    data: Data<'_>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let inputs = model.inputs(data.x, data.y)?;
    match objective {
        Objective::Svi => {
            single_layer(model)?;
            Ok((inputs.clone(), data.y.clone(), 1.0))
        }
        Objective::Deep => Ok((inputs.clone(), data.y.clone(), 1.0)),
        Objective::Minibatch { batch, n_total } => {
            deep::check_batch(batch, data.y.nrows())?;
            Ok((
                inputs.select_rows(batch),
                data.y.select_rows(batch),
                *n_total as f64 / batch.len() as f64,
            ))
        }
    }
}

/// Objective value and gradient in unconstrained coordinates; entries in
/// `fixed_mask` are reported as zero.
pub fn value_and_grad(
    objective: &Objective,
    params: &ParameterVector,
    data: Data<'_>,
) -> Result<(f64, ParameterVector)> {
    let model = unpack(params)?;
    let (inputs, y, scale) = objective_rows(objective, &model, data)?;
    let caches = model.caches()?;
    let (terms, raws) = deep::gradient_rows(&model, &caches, &inputs, &y, scale)?;
    let grads = deep::finalize_all(&model, &caches, &raws)?;
    let value = match objective {
        Objective::Svi => evaluate(objective, &model, data)?.total,
        _ => deep::assemble_report(&caches, &terms, scale).total,
    };
    Ok((value, gradient_vector(params, &model, &grads)))
}

/// Gradient of `-Σ KL` alone.
pub fn kl_gradient(params: &ParameterVector) -> Result<ParameterVector> {
    let model = unpack(params)?;
    let caches = model.caches()?;
    let grads = model
        .layers
        .iter()
        .zip(&caches)
        .map(|(layer, cache)| deep::finalize(layer, cache, &deep::RawLayerGrad::zeros(layer), -1.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(gradient_vector(params, &model, &grads))
}

/// Maps natural-parameter gradients onto the unconstrained layout.
pub(crate) fn gradient_vector(
    params: &ParameterVector,
    model: &DeepGpModel,
    grads: &[LayerGradient],
) -> ParameterVector {
    let mut out = Vec::with_capacity(params.len());
    for (layer, g) in model.layers.iter().zip(grads) {
        out.push(g.variance * layer.kernel.variance());
        if layer.kernel.family() == KernelFamily::ExponentiatedQuadratic {
            out.extend(
                g.lengthscales
                    .iter()
                    .zip(layer.kernel.lengthscales())
                    .map(|(d, l)| d * l),
            );
        }
        push_rows(&mut out, &g.z);
        push_rows(&mut out, &g.mean);
        for i in 0..layer.num_inducing() {
            for j in 0..i {
                out.push(g.chol[(i, j)]);
            }
            out.push(g.chol[(i, i)] * layer.chol[(i, i)]);
        }
        out.push(g.noise_var * layer.noise_var);
    }
    let mut pv = ParameterVector {
        values: DVector::from_vec(out),
        layout: params.layout.clone(),
        fixed_mask: params.fixed_mask.clone(),
    };
    pv.apply_mask();
    pv
}

/// One coordinate of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdEntry {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub value: f64,
    pub entries: Vec<FdEntry>,
    pub worst_rel_error: f64,
    pub failing: Vec<usize>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Default relative step for [`finite_difference_check`].
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Relative error with a floor tied to the objective's scale, so that entries
/// which are zero up to roundoff are not reported as failures.
pub fn fd_relative_error(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = 1e-5 * value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares an analytic gradient with central differences of `f`, using the
/// step `step · max(1, |θ_i|)` per coordinate. Masked entries are skipped.
pub fn check_gradient<F>(
    f: F,
    params: &ParameterVector,
    analytic: &DVector<f64>,
    value: f64,
    step: f64,
    tolerance: f64,
) -> FdReport
where
    F: Fn(&DVector<f64>) -> Option<f64>,
{
    let mut entries = Vec::new();
    let mut failing = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        if params.fixed_mask[i] {
            continue;
        }
        let h = step * params.values[i].abs().max(1.0);
        let mut plus = params.values.clone();
        plus[i] += h;
        let mut minus = params.values.clone();
        minus[i] -= h;
        let numeric = match (f(&plus), f(&minus)) {
            (Some(a), Some(b)) => (a - b) / (2.0 * h),
            _ => f64::NAN,
        };
        let rel = fd_relative_error(analytic[i], numeric, value);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        worst = worst.max(rel);
        if rel > tolerance {
            failing.push(i);
        }
        entries.push(FdEntry {
            index: i,
            name: params.layout.describe(i),
            analytic: analytic[i],
            numeric,
            rel_error: rel,
        });
    }
    FdReport {
        value,
        entries,
        worst_rel_error: worst,
        failing,
        tolerance,
    }
}

/// Central-difference check of [`value_and_grad`] for `objective`.
pub fn finite_difference_check(
    objective: &Objective,
    params: &ParameterVector,
    data: Data<'_>,
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(DeepGpError::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (value, grad) = value_and_grad(objective, params, data)?;
    let eval = |v: &DVector<f64>| {
        let pv = params.with_values(v.clone()).ok()?;
        let model = unpack(&pv).ok()?;
        evaluate(objective, &model, data).ok().map(|r| r.total)
    };
    Ok(check_gradient(eval, params, &grad.values, value, step, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_layer;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, q_in: usize, q_out: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
        crate::testing::random_data(n, q_in, q_out, rng)
    }

    fn random_model(dims: &[usize], m: usize, rng: &mut ChaCha8Rng) -> DeepGpModel {
        crate::testing::random_model(dims, m, KernelFamily::ExponentiatedQuadratic, rng)
    }

    #[test]
    fn layout_count_matches_hand_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = random_model(&[1, 1, 1], 3, &mut rng);
        let per_layer = 1 + 1 + 3 + 3 + 6 + 1;
        assert_eq!(pack(&model).len(), 2 * per_layer);
        let model = random_model(&[2, 3], 4, &mut rng);
        assert_eq!(pack(&model).len(), 1 + 2 + 8 + 12 + 10 + 1);
    }

    #[test]
    fn round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = random_model(&[2, 1, 2], 4, &mut rng);
        let pv = pack(&model);
        let back = unpack(&pv).unwrap();
        let again = pack(&back);
        for (a, b) in pv.values.iter().zip(again.values.iter()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(pv.layout, again.layout);
        for (la, lb) in model.layers.iter().zip(&back.layers) {
            assert_eq!(la.z, lb.z);
            assert_eq!(la.mean, lb.mean);
            assert_relative_eq!(la.noise_var, lb.noise_var, max_relative = 1e-15);
        }
    }

    #[test]
    fn wrong_layout_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pv = pack(&random_model(&[1, 1], 3, &mut rng));
        let other = pack(&random_model(&[1, 1], 4, &mut rng));
        let bad = ParameterVector {
            values: pv.values.clone(),
            layout: other.layout.clone(),
            fixed_mask: pv.fixed_mask.clone(),
        };
        assert!(matches!(unpack(&bad), Err(DeepGpError::LayoutMismatch(_))));
        assert!(pv.with_values(DVector::zeros(3)).is_err());
    }

    #[test]
    fn masked_entries_report_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let model = random_model(&[1, 1], 3, &mut rng);
        let (x, y) = data(6, 1, 1, &mut rng);
        let mut pv = pack(&model);
        pv.set_fixed(ParamRole::NoiseVarLog, None, true);
        let (_, g) = value_and_grad(&Objective::Deep, &pv, Data { x: Some(&x), y: &y }).unwrap();
        let s = pv.layout.segment(0, ParamRole::NoiseVarLog).unwrap();
        assert_eq!(g.values[s.offset], 0.0);
        assert!(g.values.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn value_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let model = random_model(&[1, 1, 1], 3, &mut rng);
        let (x, y) = data(8, 1, 1, &mut rng);
        let d = Data { x: Some(&x), y: &y };
        let pv = pack(&model);
        for obj in [
            Objective::Deep,
            Objective::Minibatch {
                batch: vec![0, 3, 5],
                n_total: 8,
            },
        ] {
            let (v, _) = value_and_grad(&obj, &pv, d).unwrap();
            let direct = evaluate(&obj, &model, d).unwrap().total;
            assert_relative_eq!(v, direct, max_relative = 1e-12);
        }
        let single = random_model(&[1, 1], 3, &mut rng);
        let pv = pack(&single);
        let (v, _) = value_and_grad(&Objective::Svi, &pv, d).unwrap();
        assert_relative_eq!(
            v,
            evaluate(&Objective::Svi, &single, d).unwrap().total,
            max_relative = 1e-12
        );
    }

    #[test]
    fn kl_gradient_vanishes_at_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut layer = random_layer(KernelFamily::ExponentiatedQuadratic, 4, 1, 2, &mut rng);
        let kuu = layer.kuu().unwrap();
        layer.mean = DMatrix::zeros(4, 2);
        layer.chol = kuu.chol().as_matrix().clone();
        let model = DeepGpModel::new(vec![layer], Mode::Regression).unwrap();
        let pv = pack(&model);
        let g = kl_gradient(&pv).unwrap();
        for role in [ParamRole::M, ParamRole::LPacked] {
            let s = pv.layout.segment(0, role).unwrap();
            for i in s.offset..s.offset + s.len {
                assert!(g.values[i].abs() < 1e-8, "{}: {}", pv.layout.describe(i), g.values[i]);
            }
        }
    }

    #[test]
    fn target_scale_leaves_kl_gradient_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let model = random_model(&[1, 1, 1], 3, &mut rng);
        let (x, y) = data(8, 1, 1, &mut rng);
        let pv = pack(&model);
        let y2 = &y * 2.0;
        let (_, g1) = value_and_grad(&Objective::Deep, &pv, Data { x: Some(&x), y: &y }).unwrap();
        let (_, g2) = value_and_grad(&Objective::Deep, &pv, Data { x: Some(&x), y: &y2 }).unwrap();
        let kl = kl_gradient(&pv).unwrap();
        let d1 = &g1.values - &kl.values;
        let d2 = &g2.values - &kl.values;
        assert!((d1 - d2).amax() > 1e-6);
        assert_eq!(kl, kl_gradient(&pv).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        for depth in 1..=3 {
            for q in 1..=2 {
                let mut dims = vec![q];
                dims.extend(std::iter::repeat(q).take(depth - 1));
                dims.push(1);
                let model = random_model(&dims, 3, &mut rng);
                let (x, y) = data(8, q, 1, &mut rng);
                let pv = pack(&model);
                let report = finite_difference_check(
                    &Objective::Deep,
                    &pv,
                    Data { x: Some(&x), y: &y },
                    DEFAULT_FD_STEP,
                    1e-4,
                )
                .unwrap();
                let worst = report
                    .entries
                    .iter()
                    .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                    .unwrap();
                assert!(report.passed(), "depth {depth} q {q}: worst {worst:?}");
            }
        }
    }

    #[test]
    fn minibatch_and_linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let layers = vec![
            random_layer(KernelFamily::Linear, 2, 2, 2, &mut rng),
            random_layer(KernelFamily::ExponentiatedQuadratic, 3, 2, 1, &mut rng),
        ];
        let model = DeepGpModel::new(layers, Mode::Regression).unwrap();
        let (x, y) = data(7, 2, 1, &mut rng);
        let pv = pack(&model);
        let obj = Objective::Minibatch {
            batch: vec![1, 4, 6],
            n_total: 7,
        };
        let report = finite_difference_check(&obj, &pv, Data { x: Some(&x), y: &y }, DEFAULT_FD_STEP, 1e-4).unwrap();
        assert!(report.passed(), "worst {}", report.worst_rel_error);
    }

    #[test]
    fn sabotaged_gradient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let model = random_model(&[1, 1, 1], 3, &mut rng);
        let (x, y) = data(8, 1, 1, &mut rng);
        let d = Data { x: Some(&x), y: &y };
        let pv = pack(&model);
        let (value, grad) = value_and_grad(&Objective::Deep, &pv, d).unwrap();
        let target = grad.values.iamax();
        let mut bad = grad.values.clone();
        bad[target] *= 1.01;
        let eval = |v: &DVector<f64>| {
            evaluate(&Objective::Deep, &unpack(&pv.with_values(v.clone()).ok()?).ok()?, d)
                .ok()
                .map(|r| r.total)
        };
        let report = check_gradient(eval, &pv, &bad, value, DEFAULT_FD_STEP, 1e-4);
        assert_eq!(report.failing, vec![target]);
    }

    #[test]
    fn quadratic_toy_is_exact() {
        let shapes = vec![LayerShape {
            family: KernelFamily::Linear,
            num_inducing: 1,
            input_dim: 1,
            output_dim: 1,
        }];
        let layout = Layout::from_shapes(Mode::Regression, shapes);
        let n = layout.len();
        let pv =
            ParameterVector::new(DVector::from_fn(n, |i, _| 0.3 * i as f64 - 0.5), layout, vec![false; n]).unwrap();
        let f = |v: &DVector<f64>| Some(v.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum::<f64>());
        let grad = DVector::from_fn(n, |i, _| 2.0 * (i as f64 + 1.0) * pv.values[i]);
        let report = check_gradient(f, &pv, &grad, f(&pv.values).unwrap(), DEFAULT_FD_STEP, 1e-8);
        assert!(report.passed(), "{}", report.worst_rel_error);
    }

    #[test]
    fn non_positive_step_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = random_model(&[1, 1], 3, &mut rng);
        let (x, y) = data(4, 1, 1, &mut rng);
        let pv = pack(&model);
        assert!(finite_difference_check(&Objective::Deep, &pv, Data { x: Some(&x), y: &y }, 0.0, 1e-4).is_err());
    }
}
