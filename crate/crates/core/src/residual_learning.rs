//! Residual dynamics learning: data generation from a true-dynamics
//! oracle, ridge regression on Random Fourier Features, the hybrid model
//! `f̂(x,u) = Ax + Bu + Wᵀφ(x,u)` and its validation error bound.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel_features::{row_major, BasisRecord, RffBasis};
use crate::linalg::max_abs;
use crate::scalar::Real;

/// Default ridge parameter.
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Default multiplier applied to the worst validation error.
pub const DEFAULT_SAFETY_FACTOR: f64 = 1.2;
pub const DEFAULT_TRAINING_COUNT: usize = 20_000;
pub const DEFAULT_VALIDATION_COUNT: usize = 5_000;

/// Linear model `x⁺ = Ax + Bu` with output map `r = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c: DMatrix<T>,
    pub d: DMatrix<T>,
}

impl<T: Real> LinearBaseline<T> {
    /// State-feedback configuration: `C = I`, `D = 0`.
    pub fn new(a: DMatrix<T>, b: DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        Self::with_output(a, b, DMatrix::identity(n, n), DMatrix::zeros(n, m))
    }

    pub fn with_output(a: DMatrix<T>, b: DMatrix<T>, c: DMatrix<T>, d: DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return invalid("A must be square and non-empty");
        }
        if b.nrows() != n || b.ncols() == 0 {
            return invalid(format!("B is {}x{}, expected {n} rows and at least one column", b.nrows(), b.ncols()));
        }
        if c.ncols() != n || d.ncols() != b.ncols() || d.nrows() != c.nrows() {
            return invalid("C/D dimensions disagree with A/B");
        }
        Ok(Self { a, b, c, d })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn predict(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.a * x + &self.b * u
    }
}

/// Axis-aligned box of states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain<T: Real> {
    pub state_lower: DVector<T>,
    pub state_upper: DVector<T>,
    pub input_lower: DVector<T>,
    pub input_upper: DVector<T>,
}

impl<T: Real> Domain<T> {
    pub fn new(
        state_lower: DVector<T>,
        state_upper: DVector<T>,
        input_lower: DVector<T>,
        input_upper: DVector<T>,
    ) -> Result<Self> {
        if state_lower.len() != state_upper.len() || input_lower.len() != input_upper.len() {
            return invalid("domain bound vectors have mismatched lengths");
        }
        if state_lower.is_empty() || input_lower.is_empty() {
            return invalid("domain needs at least one state and one input coordinate");
        }
        let ordered = |lo: &DVector<T>, hi: &DVector<T>| lo.iter().zip(hi.iter()).all(|(l, h)| l < h);
        if !ordered(&state_lower, &state_upper) || !ordered(&input_lower, &input_upper) {
            return invalid("every domain lower bound must be strictly below its upper bound");
        }
        Ok(Self { state_lower, state_upper, input_lower, input_upper })
    }

    pub fn state_dim(&self) -> usize {
        self.state_lower.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_lower.len()
    }

    pub fn contains(&self, x: &DVector<T>, u: &DVector<T>) -> bool {
        let inside = |v: &DVector<T>, lo: &DVector<T>, hi: &DVector<T>| {
            v.len() == lo.len() && v.iter().zip(lo.iter().zip(hi.iter())).all(|(x, (l, h))| x >= l && x <= h)
        };
        inside(x, &self.state_lower, &self.state_upper) && inside(u, &self.input_lower, &self.input_upper)
    }

    /// One uniform draw: states first, then inputs.
    fn sample(&self, rng: &mut ChaCha20Rng) -> (DVector<T>, DVector<T>) {
        let mut draw = |lo: &DVector<T>, hi: &DVector<T>| {
            DVector::from_iterator(
                lo.len(),
                lo.iter().zip(hi.iter()).map(|(l, h)| {
                    let u: f64 = rng.random();
                    T::lit(l.as_f64() + (h.as_f64() - l.as_f64()) * u)
                }),
            )
        };
        let x = draw(&self.state_lower, &self.state_upper);
        let u = draw(&self.input_lower, &self.input_upper);
        (x, u)
    }
}

/// Inputs `z = (x, u)` (one row per sample) and residual targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset<T: Real> {
    pub inputs: DMatrix<T>,
    pub targets: DMatrix<T>,
    pub seed: u64,
    pub domain: Domain<T>,
}

impl<T: Real> ResidualDataset<T> {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Samples `count` points uniformly over `domain` and records
/// `f(x,u) − (Ax + Bu)` for each.
pub fn generate_dataset<T, F>(
    true_dynamics: F,
    baseline: &LinearBaseline<T>,
    domain: &Domain<T>,
    count: usize,
    seed: u64,
) -> Result<ResidualDataset<T>>
where
    T: Real,
    F: Fn(&DVector<T>, &DVector<T>) -> DVector<T>,
{
    if count == 0 {
        return invalid("sample count must be at least 1");
    }
    let n = baseline.state_dim();
    let m = baseline.input_dim();
    if domain.state_dim() != n || domain.input_dim() != m {
        return invalid("domain dimensions disagree with the baseline");
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut inputs = DMatrix::zeros(count, n + m);
    let mut targets = DMatrix::zeros(count, n);
    for i in 0..count {
        let (x, u) = domain.sample(&mut rng);
        let next = true_dynamics(&x, &u);
        if next.len() != n {
            return Err(Error::DataGeneration { index: i, reason: format!("oracle returned {} values, expected {n}", next.len()) });
        }
        if let Some(bad) = next.iter().find(|v| !v.is_finite()) {
            return Err(Error::DataGeneration {
                index: i,
                reason: format!("oracle returned non-finite value {bad} at x={:?}, u={:?}", x.as_slice(), u.as_slice()),
            });
        }
        let r = next - baseline.predict(&x, &u);
        for j in 0..n {
            inputs[(i, j)] = x[j];
            targets[(i, j)] = r[j];
        }
        for j in 0..m {
            inputs[(i, n + j)] = u[j];
        }
    }
    Ok(ResidualDataset { inputs, targets, seed, domain: domain.clone() })
}

/// Feature matrix with one row `φ(zᵢ)ᵀ` per sample (`M × D`).
pub fn feature_matrix<T: Real>(basis: &RffBasis<T>, inputs: &DMatrix<T>) -> Result<DMatrix<T>> {
    if inputs.ncols() != basis.input_dim() {
        return invalid(format!("inputs have {} columns, basis expects {}", inputs.ncols(), basis.input_dim()));
    }
    let d = basis.feature_count();
    let mut out = DMatrix::zeros(inputs.nrows(), d);
    let mut z = vec![T::zero(); inputs.ncols()];
    let mut row = vec![T::zero(); d];
    for i in 0..inputs.nrows() {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = inputs[(i, j)];
        }
        basis.features_into(&z, &mut row)?;
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// Closed-form ridge solution `W = (ΦΦᵀ + λI)⁻¹ ΦR` via Cholesky.
pub fn fit_ridge<T: Real>(dataset: &ResidualDataset<T>, basis: &RffBasis<T>, lambda: T) -> Result<DMatrix<T>> {
    if !(lambda > T::zero()) {
        return invalid(format!("ridge parameter must be positive, got {lambda}"));
    }
    let features = feature_matrix(basis, &dataset.inputs)?;
    let d = basis.feature_count();
    let mut gram = features.tr_mul(&features);
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = features.tr_mul(&dataset.targets);
    let chol = nalgebra::Cholesky::new(gram)
        .ok_or_else(|| Error::Training("normal-equation matrix lost positive definiteness".into()))?;
    let w = chol.solve(&rhs);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("ridge solve produced non-finite weights".into()));
    }
    Ok(w)
}

/// Learned residual `Wᵀφ(z)` plus its validated error bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel<T: Real> {
    pub basis: RffBasis<T>,
    pub weights: DMatrix<T>,
    pub ridge: T,
    pub d_max: T,
    pub safety_factor: T,
    pub validation_count: usize,
}

impl<T: Real> ResidualModel<T> {
    pub fn new(basis: RffBasis<T>, weights: DMatrix<T>, ridge: T, bound: &ErrorBound<T>) -> Result<Self> {
        if weights.nrows() != basis.feature_count() {
            return invalid(format!("W has {} rows, basis has {} features", weights.nrows(), basis.feature_count()));
        }
        Ok(Self {
            basis,
            weights,
            ridge,
            d_max: bound.d_max,
            safety_factor: bound.safety_factor,
            validation_count: bound.count,
        })
    }
}

/// Output of [`quantify_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBound<T: Real> {
    pub d_max: T,
    pub max_error: T,
    pub safety_factor: T,
    pub count: usize,
}

/// `d_max = β · maxⱼ ‖rⱼ − Wᵀφ(zⱼ)‖₂` over a fresh uniform validation
/// sample. `model = None` bounds the linear baseline alone.
pub fn quantify_error<T, F>(
    model: Option<(&RffBasis<T>, &DMatrix<T>)>,
    true_dynamics: F,
    baseline: &LinearBaseline<T>,
    domain: &Domain<T>,
    count: usize,
    safety_factor: T,
    seed: u64,
) -> Result<ErrorBound<T>>
where
    T: Real,
    F: Fn(&DVector<T>, &DVector<T>) -> DVector<T>,
{
    if !(safety_factor > T::one()) {
        return invalid(format!("safety factor must exceed 1, got {safety_factor}"));
    }
    let data = generate_dataset(true_dynamics, baseline, domain, count, seed)?;
    let errors = validation_errors(model, &data)?;
    let max_error = errors.iter().fold(T::zero(), |a, e| a.max(*e));
    Ok(ErrorBound { d_max: safety_factor * max_error, max_error, safety_factor, count })
}

/// Per-sample prediction errors `‖rⱼ − Wᵀφ(zⱼ)‖₂`.
pub fn validation_errors<T: Real>(model: Option<(&RffBasis<T>, &DMatrix<T>)>, data: &ResidualDataset<T>) -> Result<Vec<T>> {
    let mut residual = data.targets.clone();
    if let Some((basis, w)) = model {
        if w.ncols() != data.targets.ncols() {
            return invalid("weight matrix column count disagrees with the state dimension");
        }
        residual -= feature_matrix(basis, &data.inputs)? * w;
    }
    Ok(residual.row_iter().map(|r| r.norm()).collect())
}

/// Root-mean-square training error `√(mean ‖rᵢ − Wᵀφ(zᵢ)‖²)`.
pub fn fit_rmse<T: Real>(basis: &RffBasis<T>, w: &DMatrix<T>, data: &ResidualDataset<T>) -> Result<T> {
    let errs = validation_errors(Some((basis, w)), data)?;
    let ms = errs.iter().fold(T::zero(), |a, e| a + *e * *e) / T::lit(errs.len() as f64);
    Ok(ms.sqrt())
}

/// Scratch buffers for repeated hybrid-model evaluation.
#[derive(Debug, Clone)]
pub struct ModelWorkspace<T: Real> {
    z: Vec<T>,
    phi: Vec<T>,
    dphi: DMatrix<T>,
}

/// `f̂(x,u) = Ax + Bu + Wᵀφ(x,u)`; the residual may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel<T: Real> {
    pub baseline: LinearBaseline<T>,
    pub residual: Option<ResidualModel<T>>,
}

impl<T: Real> HybridModel<T> {
    pub fn linear(baseline: LinearBaseline<T>) -> Self {
        Self { baseline, residual: None }
    }

    pub fn new(baseline: LinearBaseline<T>, residual: Option<ResidualModel<T>>) -> Result<Self> {
        if let Some(r) = &residual {
            let nz = baseline.state_dim() + baseline.input_dim();
            if r.basis.input_dim() != nz {
                return invalid(format!("basis input dimension {} differs from n+m = {nz}", r.basis.input_dim()));
            }
            if r.weights.ncols() != baseline.state_dim() {
                return invalid("weight matrix columns must equal the state dimension");
            }
        }
        Ok(Self { baseline, residual })
    }

    pub fn state_dim(&self) -> usize {
        self.baseline.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.baseline.input_dim()
    }

    /// Error bound attached to the residual, if any.
    pub fn d_max(&self) -> Option<T> {
        self.residual.as_ref().map(|r| r.d_max)
    }

    pub fn workspace(&self) -> ModelWorkspace<T> {
        let nz = self.state_dim() + self.input_dim();
        let d = self.residual.as_ref().map_or(0, |r| r.basis.feature_count());
        ModelWorkspace { z: vec![T::zero(); nz], phi: vec![T::zero(); d], dphi: DMatrix::zeros(d, nz) }
    }

    pub fn predict(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return invalid(format!(
                "predict got x of length {} and u of length {}, model is {}x{}",
                x.len(),
                u.len(),
                self.state_dim(),
                self.input_dim()
            ));
        }
        let mut out = DVector::zeros(self.state_dim());
        let mut ws = self.workspace();
        self.eval_into(x.as_slice(), u.as_slice(), out.as_mut_slice(), None, &mut ws)?;
        Ok(out)
    }

    /// Evaluates `f̂(x,u)` into `out` and optionally its Jacobian
    /// `[∂f̂/∂x  ∂f̂/∂u]` (`n × (n+m)`).
    pub fn eval_into(
        &self,
        x: &[T],
        u: &[T],
        out: &mut [T],
        jac: Option<&mut DMatrix<T>>,
        ws: &mut ModelWorkspace<T>,
    ) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        if x.len() != n || u.len() != m || out.len() != n {
            return invalid("dimension mismatch in model evaluation");
        }
        let a = &self.baseline.a;
        let b = &self.baseline.b;
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..n {
                acc += a[(i, j)] * x[j];
            }
            for j in 0..m {
                acc += b[(i, j)] * u[j];
            }
            out[i] = acc;
        }
        let want_jac = jac.is_some();
        if let Some(jac) = jac {
            for i in 0..n {
                for j in 0..n {
                    jac[(i, j)] = a[(i, j)];
                }
                for j in 0..m {
                    jac[(i, n + j)] = b[(i, j)];
                }
            }
        }
        let Some(res) = &self.residual else {
            return Ok(());
        };
        ws.z[..n].copy_from_slice(x);
        ws.z[n..].copy_from_slice(u);
        if want_jac {
            res.basis.features_with_jacobian_into(&ws.z, &mut ws.phi, &mut ws.dphi)?;
        } else {
            res.basis.features_into(&ws.z, &mut ws.phi)?;
        }
        let w = &res.weights;
        for (k, phi_k) in ws.phi.iter().enumerate() {
            for i in 0..n {
                out[i] += w[(k, i)] * *phi_k;
            }
        }
        Ok(())
    }

    /// Same as [`Self::eval_into`] but always fills the Jacobian.
    pub fn eval_with_jacobian(
        &self,
        x: &[T],
        u: &[T],
        out: &mut [T],
        jac: &mut DMatrix<T>,
        ws: &mut ModelWorkspace<T>,
    ) -> Result<()> {
        self.eval_into(x, u, out, Some(jac), ws)?;
        if let Some(res) = &self.residual {
            let n = self.state_dim();
            let nz = ws.z.len();
            let w = &res.weights;
            for i in 0..n {
                for j in 0..nz {
                    let mut acc = T::zero();
                    for k in 0..ws.phi.len() {
                        acc += w[(k, i)] * ws.dphi[(k, j)];
                    }
                    jac[(i, j)] += acc;
                }
            }
        }
        Ok(())
    }
}

/// Everything needed to rebuild a trained model, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub basis: BasisRecord,
    pub weights: Vec<f64>,
    pub ridge: f64,
    pub safety_factor: f64,
    pub d_max: f64,
    pub max_validation_error: f64,
    pub d_max_linear: f64,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub basis_seed: u64,
    pub training_seed: u64,
    pub validation_seed: u64,
    pub training_count: usize,
    pub validation_count: usize,
}

fn mat_from<T: Real>(rows: usize, cols: usize, data: &[f64], what: &str) -> Result<DMatrix<T>> {
    if data.len() != rows * cols {
        return Err(Error::Artifact(format!("{what} has {} entries, expected {rows}x{cols}", data.len())));
    }
    Ok(DMatrix::from_row_iterator(rows, cols, data.iter().map(|v| T::lit(*v))))
}

fn vec_from<T: Real>(data: &[f64]) -> DVector<T> {
    DVector::from_iterator(data.len(), data.iter().map(|v| T::lit(*v)))
}

/// Components passed to [`ModelArtifact::build`].
pub struct ArtifactParts<'a, T: Real> {
    pub model: &'a HybridModel<T>,
    pub domain: &'a Domain<T>,
    pub max_validation_error: T,
    pub d_max_linear: T,
    pub training_seed: u64,
    pub validation_seed: u64,
    pub training_count: usize,
}

impl ModelArtifact {
    pub fn build<T: Real>(parts: ArtifactParts<'_, T>) -> Result<Self> {
        let model = parts.model;
        let res = model
            .residual
            .as_ref()
            .ok_or_else(|| Error::Artifact("model artifact requires a learned residual".into()))?;
        let bl = &model.baseline;
        let vecf = |v: &DVector<T>| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Ok(Self {
            state_dim: bl.state_dim(),
            input_dim: bl.input_dim(),
            output_dim: bl.c.nrows(),
            a: row_major(&bl.a),
            b: row_major(&bl.b),
            c: row_major(&bl.c),
            d: row_major(&bl.d),
            basis: res.basis.to_record(),
            weights: row_major(&res.weights),
            ridge: res.ridge.as_f64(),
            safety_factor: res.safety_factor.as_f64(),
            d_max: res.d_max.as_f64(),
            max_validation_error: parts.max_validation_error.as_f64(),
            d_max_linear: parts.d_max_linear.as_f64(),
            state_lower: vecf(&parts.domain.state_lower),
            state_upper: vecf(&parts.domain.state_upper),
            input_lower: vecf(&parts.domain.input_lower),
            input_upper: vecf(&parts.domain.input_upper),
            basis_seed: res.basis.seed(),
            training_seed: parts.training_seed,
            validation_seed: parts.validation_seed,
            training_count: parts.training_count,
            validation_count: res.validation_count,
        })
    }

    pub fn baseline<T: Real>(&self) -> Result<LinearBaseline<T>> {
        let (n, m, p) = (self.state_dim, self.input_dim, self.output_dim);
        LinearBaseline::with_output(
            mat_from(n, n, &self.a, "A")?,
            mat_from(n, m, &self.b, "B")?,
            mat_from(p, n, &self.c, "C")?,
            mat_from(p, m, &self.d, "D")?,
        )
    }

    pub fn domain<T: Real>(&self) -> Result<Domain<T>> {
        Domain::new(
            vec_from(&self.state_lower),
            vec_from(&self.state_upper),
            vec_from(&self.input_lower),
            vec_from(&self.input_upper),
        )
    }

    /// The RFF-augmented model.
    pub fn hybrid_model<T: Real>(&self) -> Result<HybridModel<T>> {
        let basis = RffBasis::from_record(&self.basis)?;
        let weights = mat_from(self.basis.feature_count, self.state_dim, &self.weights, "W")?;
        let bound = ErrorBound {
            d_max: T::lit(self.d_max),
            max_error: T::lit(self.max_validation_error),
            safety_factor: T::lit(self.safety_factor),
            count: self.validation_count,
        };
        let residual = ResidualModel::new(basis, weights, T::lit(self.ridge), &bound)?;
        HybridModel::new(self.baseline()?, Some(residual))
    }

    /// The linear baseline as a model, with its own bound.
    pub fn linear_model<T: Real>(&self) -> Result<(HybridModel<T>, T)> {
        Ok((HybridModel::linear(self.baseline()?), T::lit(self.d_max_linear)))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Artifact(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Artifact(e.to_string()))
    }
}

/// Max-abs entry of the ridge optimality residual `(ΦΦᵀ + λI)W − ΦR`.
pub fn ridge_gradient_residual<T: Real>(dataset: &ResidualDataset<T>, basis: &RffBasis<T>, lambda: T, w: &DMatrix<T>) -> Result<T> {
    let f = feature_matrix(basis, &dataset.inputs)?;
    let g = f.tr_mul(&f) * w + w * lambda - f.tr_mul(&dataset.targets);
    Ok(max_abs(&g) * T::lit(2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_baseline() -> LinearBaseline<f64> {
        LinearBaseline::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.2]),
        )
        .unwrap()
    }

    fn toy_domain() -> Domain<f64> {
        Domain::new(
            DVector::from_vec(vec![-1.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![-0.5]),
            DVector::from_vec(vec![0.5]),
        )
        .unwrap()
    }

    #[test]
    fn domain_rejects_misordered_bounds() {
        let d = Domain::new(
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![-1.0]),
            DVector::from_vec(vec![1.0]),
        );
        assert!(d.is_err());
    }

    #[test]
    fn linear_oracle_gives_zero_targets() {
        let bl = toy_baseline();
        let bl2 = bl.clone();
        let data = generate_dataset(move |x, u| bl2.predict(x, u), &bl, &toy_domain(), 50, 3).unwrap();
        assert_eq!(data.len(), 50);
        assert!(data.targets.iter().all(|v| *v == 0.0));
        for i in 0..50 {
            let x = DVector::from_vec(vec![data.inputs[(i, 0)], data.inputs[(i, 1)]]);
            let u = DVector::from_vec(vec![data.inputs[(i, 2)]]);
            assert!(toy_domain().contains(&x, &u));
        }
    }

    #[test]
    fn dataset_is_deterministic_in_seed() {
        let bl = toy_baseline();
        let oracle = |x: &DVector<f64>, u: &DVector<f64>| DVector::from_vec(vec![x[0].sin(), u[0] * u[0]]);
        let a = generate_dataset(oracle, &bl, &toy_domain(), 20, 9).unwrap();
        let b = generate_dataset(oracle, &bl, &toy_domain(), 20, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_oracle_names_the_sample() {
        let bl = toy_baseline();
        let err = generate_dataset(|_x, _u| DVector::from_vec(vec![f64::NAN, 0.0]), &bl, &toy_domain(), 5, 1).unwrap_err();
        assert!(matches!(err, Error::DataGeneration { index: 0, .. }));
        assert!(generate_dataset(|x, _u| x.clone(), &bl, &toy_domain(), 0, 1).is_err());
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        let bl = toy_baseline();
        let bl2 = bl.clone();
        let data = generate_dataset(move |x, u| bl2.predict(x, u), &bl, &toy_domain(), 40, 3).unwrap();
        let basis = RffBasis::sample(3, 10, 1.0, 4).unwrap();
        for lambda in [1e-6, 1.0, 1e3] {
            let w = fit_ridge(&data, &basis, lambda).unwrap();
            assert!(w.iter().all(|v| *v == 0.0));
        }
        assert!(fit_ridge(&data, &basis, 0.0).is_err());
    }

    #[test]
    fn huge_ridge_shrinks_weights() {
        let bl = toy_baseline();
        let oracle = |x: &DVector<f64>, u: &DVector<f64>| DVector::from_vec(vec![x[0] + 0.3 * x[1].sin(), 0.9 * x[1] + 0.2 * u[0] + 0.1 * u[0].powi(3)]);
        let data = generate_dataset(oracle, &bl, &toy_domain(), 60, 3).unwrap();
        let basis = RffBasis::sample(3, 8, 1.0, 4).unwrap();
        let w = fit_ridge(&data, &basis, 1e9).unwrap();
        let f = feature_matrix(&basis, &data.inputs).unwrap();
        let bound = f.tr_mul(&data.targets).norm() / 1e9;
        assert!(w.norm() <= bound * (1.0 + 1e-9));
        assert!(w.norm() < 1e-6);
    }

    #[test]
    fn linear_only_model_reproduces_baseline() {
        let bl = toy_baseline();
        let model = HybridModel::linear(bl.clone());
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let u = DVector::from_vec(vec![0.25]);
        assert_eq!(model.predict(&x, &u).unwrap(), bl.predict(&x, &u));
        assert!(model.predict(&u, &u).is_err());
    }

    #[test]
    fn residual_vanishing_at_origin_leaves_feature_term() {
        let bl = toy_baseline();
        let basis = RffBasis::sample(3, 6, 1.0, 2).unwrap();
        let w = DMatrix::from_fn(6, 2, |i, j| (i as f64 + 1.0) * if j == 0 { 0.1 } else { -0.05 });
        let bound = ErrorBound { d_max: 0.0, max_error: 0.0, safety_factor: 1.2, count: 1 };
        let res = ResidualModel::new(basis.clone(), w.clone(), 1e-6, &bound).unwrap();
        let model = HybridModel::new(bl, Some(res)).unwrap();
        let zero = DVector::zeros(2);
        let y = model.predict(&zero, &DVector::zeros(1)).unwrap();
        let expect = w.transpose() * basis.features(&[0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(y, expect, epsilon = 1e-15);
    }

    #[test]
    fn model_jacobian_matches_central_differences() {
        let bl = toy_baseline();
        let basis = RffBasis::sample(3, 20, 0.8, 2).unwrap();
        let w = DMatrix::from_fn(20, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.01 - 0.02);
        let bound = ErrorBound { d_max: 0.0, max_error: 0.0, safety_factor: 1.2, count: 1 };
        let model = HybridModel::new(bl, Some(ResidualModel::new(basis, w, 1e-6, &bound).unwrap())).unwrap();
        let mut ws = model.workspace();
        let x = [0.2, -0.4];
        let u = [0.1];
        let mut f = [0.0; 2];
        let mut jac = DMatrix::zeros(2, 3);
        model.eval_with_jacobian(&x, &u, &mut f, &mut jac, &mut ws).unwrap();
        let h = 1e-6;
        let z = [x[0], x[1], u[0]];
        for j in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let fp = model.predict(&DVector::from_vec(zp[..2].to_vec()), &DVector::from_vec(vec![zp[2]])).unwrap();
            let fm = model.predict(&DVector::from_vec(zm[..2].to_vec()), &DVector::from_vec(vec![zm[2]])).unwrap();
            for i in 0..2 {
                assert_relative_eq!(jac[(i, j)], (fp[i] - fm[i]) / (2.0 * h), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn validation_errors_respect_bound() {
        let bl = toy_baseline();
        let oracle = |x: &DVector<f64>, u: &DVector<f64>| DVector::from_vec(vec![x[0] + 0.1 * x[1] + 0.05 * x[0].sin(), 0.9 * x[1] + 0.2 * u[0].tanh()]);
        let basis = RffBasis::sample(3, 40, 1.0, 8).unwrap();
        let train = generate_dataset(oracle, &bl, &toy_domain(), 400, 1).unwrap();
        let w = fit_ridge(&train, &basis, 1e-6).unwrap();
        let bound = quantify_error(Some((&basis, &w)), oracle, &bl, &toy_domain(), 300, 1.2, 2).unwrap();
        let val = generate_dataset(oracle, &bl, &toy_domain(), 300, 2).unwrap();
        for e in validation_errors(Some((&basis, &w)), &val).unwrap() {
            assert!(e <= bound.d_max / 1.2 * (1.0 + 1e-12));
        }
        let lin = quantify_error(None, oracle, &bl, &toy_domain(), 300, 1.2, 2).unwrap();
        assert!(bound.d_max < lin.d_max);
        assert!(quantify_error(None, oracle, &bl, &toy_domain(), 10, 1.0, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn data(seed: u64) -> ResidualDataset<f64> {
            let bl = toy_baseline();
            let oracle = |x: &DVector<f64>, u: &DVector<f64>| DVector::from_vec(vec![x[0] + 0.3 * x[1].sin(), 0.9 * x[1] + 0.2 * u[0] + 0.1 * u[0].powi(3)]);
            generate_dataset(oracle, &bl, &toy_domain(), 40, seed).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn stronger_ridge_never_grows_weights(seed in 0u64..500, l1 in -8.0..2.0f64, step in 0.0..4.0f64) {
                let d = data(seed);
                let basis = RffBasis::sample(3, 12, 0.9, seed + 1).unwrap();
                let (lam1, lam2) = (10f64.powf(l1), 10f64.powf(l1 + step));
                let w1 = fit_ridge(&d, &basis, lam1).unwrap();
                let w2 = fit_ridge(&d, &basis, lam2).unwrap();
                prop_assert!(w2.norm() <= w1.norm() * (1.0 + 1e-9));
            }

            #[test]
            fn ridge_gradient_vanishes(seed in 0u64..500, l in -6.0..1.0f64) {
                let d = data(seed);
                let basis = RffBasis::sample(3, 12, 0.9, seed + 1).unwrap();
                let lambda = 10f64.powf(l);
                let w = fit_ridge(&d, &basis, lambda).unwrap();
                let scale = 1.0 + max_abs(&d.targets) * d.len() as f64;
                prop_assert!(ridge_gradient_residual(&d, &basis, lambda, &w).unwrap() <= 1e-6 * scale);
            }
        }
    }
}
