//! Random Fourier Feature map approximating the Gaussian (RBF) kernel.
//!
//! A basis holds `D` frequency rows `ωᵢ ~ N(0, σ⁻² I)` and phases
//! `bᵢ ~ U[0, 2π)`. The map is `φ(z)ᵢ = √(2/D) cos(ωᵢᵀz + bᵢ)` and
//! `φ(z)ᵀφ(z′)` is an unbiased estimate of `exp(−‖z−z′‖²/(2σ²))`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Seeded standard normal stream using the Box–Muller transform over a
/// ChaCha20 uniform stream. Both outputs of each transform are used.
pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha20Rng::seed_from_u64(seed), spare: None }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Sampled frequencies and phases defining one feature map. Immutable once
/// built.
#[derive(Debug, Clone, PartialEq)]
pub struct RffBasis<T: Real> {
    frequencies: DMatrix<T>,
    phases: DVector<T>,
    length_scale: T,
    seed: u64,
    scale: T,
}

impl<T: Real> RffBasis<T> {
    /// Draws a basis: `ωᵢ` i.i.d. `N(0, σ⁻² I)` (row-major order), then
    /// `bᵢ` i.i.d. uniform on `[0, 2π)`.
    pub fn sample(input_dim: usize, feature_count: usize, length_scale: T, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return invalid("input dimension must be at least 1");
        }
        if feature_count == 0 {
            return invalid("feature count must be at least 1");
        }
        if !(length_scale > T::zero()) || !length_scale.is_finite() {
            return invalid(format!("length scale must be positive and finite, got {length_scale}"));
        }
        let sigma = length_scale.as_f64();
        let mut stream = GaussianStream::new(seed);
        let mut freq = Vec::with_capacity(feature_count * input_dim);
        for _ in 0..feature_count * input_dim {
            freq.push(T::lit(stream.next_normal() / sigma));
        }
        let two_pi = T::two_pi();
        let phases = (0..feature_count)
            .map(|_| {
                let b = T::lit(std::f64::consts::TAU * stream.uniform());
                // Rounding to a narrow type can land exactly on 2π.
                if b >= two_pi {
                    T::zero()
                } else {
                    b
                }
            })
            .collect::<Vec<_>>();
        Self::from_parts(
            DMatrix::from_row_slice(feature_count, input_dim, &freq),
            DVector::from_vec(phases),
            length_scale,
            seed,
        )
    }

    /// Builds a basis from explicit frequencies (one row per feature) and
    /// phases, checking every invariant.
    pub fn from_parts(frequencies: DMatrix<T>, phases: DVector<T>, length_scale: T, seed: u64) -> Result<Self> {
        let d = frequencies.nrows();
        if d == 0 || frequencies.ncols() == 0 {
            return invalid("basis needs at least one feature and one input");
        }
        if phases.len() != d {
            return invalid(format!("{} phases for {d} frequency rows", phases.len()));
        }
        if !(length_scale > T::zero()) {
            return invalid("length scale must be positive");
        }
        if let Some(b) = phases.iter().find(|b| !(**b >= T::zero() && **b < T::two_pi())) {
            return invalid(format!("phase {b} outside [0, 2π)"));
        }
        if frequencies.iter().any(|w| !w.is_finite()) {
            return invalid("non-finite frequency");
        }
        let scale = (T::lit(2.0) / T::lit(d as f64)).sqrt();
        Ok(Self { frequencies, phases, length_scale, seed, scale })
    }

    pub fn feature_count(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn frequencies(&self) -> &DMatrix<T> {
        &self.frequencies
    }

    pub fn phases(&self) -> &DVector<T> {
        &self.phases
    }

    pub fn length_scale(&self) -> T {
        self.length_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Amplitude `√(2/D)` shared by every component.
    pub fn amplitude(&self) -> T {
        self.scale
    }

    fn check_input(&self, z: &[T]) -> Result<()> {
        if z.len() != self.input_dim() {
            return invalid(format!("input has length {}, basis expects {}", z.len(), self.input_dim()));
        }
        Ok(())
    }

    #[inline]
    fn argument(&self, i: usize, z: &[T]) -> T {
        let mut acc = self.phases[i];
        for (j, zj) in z.iter().enumerate() {
            acc += self.frequencies[(i, j)] * *zj;
        }
        acc
    }

    /// Writes `φ(z)` into `out` without allocating.
    pub fn features_into(&self, z: &[T], out: &mut [T]) -> Result<()> {
        self.check_input(z)?;
        if out.len() != self.feature_count() {
            return invalid(format!("output buffer has length {}, need {}", out.len(), self.feature_count()));
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.scale * self.argument(i, z).cos();
        }
        Ok(())
    }

    pub fn features(&self, z: &[T]) -> Result<DVector<T>> {
        let mut out = DVector::zeros(self.feature_count());
        self.features_into(z, out.as_mut_slice())?;
        Ok(out)
    }

    /// Writes `φ(z)` and its Jacobian `∂φ/∂z` (`D × input_dim`, row `i` is
    /// `−√(2/D) sin(ωᵢᵀz + bᵢ) ωᵢᵀ`).
    pub fn features_with_jacobian_into(&self, z: &[T], out: &mut [T], jac: &mut DMatrix<T>) -> Result<()> {
        self.check_input(z)?;
        if out.len() != self.feature_count() || jac.shape() != self.frequencies.shape() {
            return invalid("feature or Jacobian buffer has the wrong shape");
        }
        for i in 0..self.feature_count() {
            let arg = self.argument(i, z);
            let (s, c) = arg.sin_cos();
            out[i] = self.scale * c;
            let g = -self.scale * s;
            for j in 0..self.input_dim() {
                jac[(i, j)] = g * self.frequencies[(i, j)];
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> BasisRecord {
        BasisRecord {
            seed: self.seed,
            length_scale: self.length_scale.as_f64(),
            feature_count: self.feature_count(),
            input_dim: self.input_dim(),
            frequencies: row_major(&self.frequencies),
            phases: self.phases.iter().map(|b| b.as_f64()).collect(),
        }
    }

    pub fn from_record(rec: &BasisRecord) -> Result<Self> {
        if rec.frequencies.len() != rec.feature_count * rec.input_dim {
            return Err(Error::Artifact(format!(
                "basis record has {} frequencies, expected {}x{}",
                rec.frequencies.len(),
                rec.feature_count,
                rec.input_dim
            )));
        }
        let freq: Vec<T> = rec.frequencies.iter().map(|w| T::lit(*w)).collect();
        Self::from_parts(
            DMatrix::from_row_slice(rec.feature_count, rec.input_dim, &freq),
            DVector::from_iterator(rec.phases.len(), rec.phases.iter().map(|b| T::lit(*b))),
            T::lit(rec.length_scale),
            rec.seed,
        )
    }
}

/// Serialized form of a basis. Frequencies are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisRecord {
    pub seed: u64,
    pub length_scale: f64,
    pub feature_count: usize,
    pub input_dim: usize,
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
}

pub(crate) fn row_major<T: Real>(m: &DMatrix<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)].as_f64());
        }
    }
    out
}

/// `exp(−‖z−z′‖²/(2σ²))`.
pub fn exact_kernel<T: Real>(z: &[T], z2: &[T], length_scale: T) -> Result<T> {
    if z.len() != z2.len() {
        return invalid(format!("kernel arguments have lengths {} and {}", z.len(), z2.len()));
    }
    if !(length_scale > T::zero()) {
        return invalid("length scale must be positive");
    }
    let sq: T = z.iter().zip(z2).fold(T::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b));
    Ok((-sq / (T::lit(2.0) * length_scale * length_scale)).exp())
}

/// Median pairwise Euclidean distance among the first `max_points` rows of
/// `points`.
pub fn median_heuristic<T: Real>(points: &DMatrix<T>, max_points: usize) -> Result<T> {
    let m = points.nrows().min(max_points);
    if m < 2 {
        return invalid("median heuristic needs at least two points");
    }
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let d = (points.row(i) - points.row(j)).norm();
            dists.push(d.as_f64());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let k = dists.len();
    let med = if k % 2 == 1 { dists[k / 2] } else { 0.5 * (dists[k / 2 - 1] + dists[k / 2]) };
    if !(med > 0.0) {
        return invalid("median pairwise distance is zero");
    }
    Ok(T::lit(med))
}
