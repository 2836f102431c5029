//! Pairwise similarity kernels over embedding rows, with analytic gradients.
//!
//! Three kernels are supported:
//!
//! * `cosine`: `S_ij = z_i·z_j / (‖z_i‖‖z_j‖)`, optionally shifted to
//!   `(1 + cos)/2` so downstream set functions see nonnegative entries;
//! * `euclidean`: `S_ij = 1 / (1 + ‖z_i − z_j‖)`, mapping distance 0 to 1
//!   and keeping values in (0, 1];
//! * `rbf`: `S_ij = exp(−‖z_i − z_j‖² / (2σ²))` with σ either fixed or the
//!   median pairwise distance of the batch.
//!
//! Gradients are hand-derived and treat an auto-selected rbf bandwidth as a
//! constant; callers that need exact finite-difference agreement must resolve
//! the bandwidth first (see [`KernelSpec::resolve`]).

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating symmetry of a similarity matrix.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Tolerance on row norms when a matrix claims to be unit-normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Cosine,
    Euclidean,
    Rbf,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelKind::Cosine => write!(f, "cosine"),
            KernelKind::Euclidean => write!(f, "euclidean"),
            KernelKind::Rbf => write!(f, "rbf"),
        }
    }
}

/// RBF bandwidth: a fixed positive value, or `auto` for the median pairwise
/// distance of the data the kernel is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Auto(AutoWord),
}

/// The literal string `"auto"` in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoWord {
    Auto,
}

impl Bandwidth {
    pub const AUTO: Bandwidth = Bandwidth::Auto(AutoWord::Auto);

    pub fn fixed(&self) -> Option<f64> {
        match self {
            Bandwidth::Fixed(v) => Some(*v),
            Bandwidth::Auto(_) => None,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_bandwidth() -> Bandwidth {
    Bandwidth::AUTO
}

/// Which kernel to use and how.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Only consulted for `rbf`.
    #[serde(default = "default_bandwidth")]
    pub rbf_bandwidth: Bandwidth,
    /// Map similarities through `(1 + S)/2`. Defaults on, so cosine output
    /// is safe to feed into the set functions, which assume `S ≥ 0`.
    #[serde(default = "default_true")]
    pub nonneg_shift: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::cosine(true)
    }
}

impl KernelSpec {
    pub fn cosine(nonneg_shift: bool) -> Self {
        KernelSpec {
            kind: KernelKind::Cosine,
            rbf_bandwidth: Bandwidth::AUTO,
            nonneg_shift,
        }
    }

    pub fn euclidean() -> Self {
        KernelSpec {
            kind: KernelKind::Euclidean,
            rbf_bandwidth: Bandwidth::AUTO,
            nonneg_shift: false,
        }
    }

    pub fn rbf(bandwidth: Bandwidth) -> Self {
        KernelSpec {
            kind: KernelKind::Rbf,
            rbf_bandwidth: bandwidth,
            nonneg_shift: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(v) = self.rbf_bandwidth {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "rbf bandwidth must be a positive finite number, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Replace an `auto` rbf bandwidth with the median pairwise distance of
    /// `z`. Gradients always treat the bandwidth as a constant, so anything
    /// differentiating through this kernel should resolve it once up front.
    pub fn resolve(&self, z: &EmbeddingMatrix) -> Result<KernelSpec> {
        self.validate()?;
        if self.kind != KernelKind::Rbf || self.rbf_bandwidth.fixed().is_some() {
            return Ok(*self);
        }
        let sigma = median_pairwise_distance(z)?;
        if !(sigma > 0.0) {
            return Err(Error::Config(
                "cannot auto-select rbf bandwidth: median pairwise distance is zero".into(),
            ));
        }
        Ok(KernelSpec {
            rbf_bandwidth: Bandwidth::Fixed(sigma),
            ..*self
        })
    }

    fn bandwidth_or_err(&self) -> Result<f64> {
        self.rbf_bandwidth.fixed().ok_or_else(|| {
            Error::Config("rbf bandwidth is unresolved; call KernelSpec::resolve first".into())
        })
    }
}

/// Median (upper median for even counts) of all pairwise Euclidean
/// distances. Needs at least two rows.
pub fn median_pairwise_distance(z: &EmbeddingMatrix) -> Result<f64> {
    let n = z.n();
    if n < 2 {
        return Err(Error::Config(
            "auto rbf bandwidth needs at least two embedding rows".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(euclidean_distance(z.row(i), z.row(j)));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    Ok(dists[dists.len() / 2])
}

/// An n×d matrix of embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
    unit_normalized: bool,
}

impl EmbeddingMatrix {
    /// Wrap a matrix, checking shape and finiteness.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "embedding matrix must be at least 1x1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding matrix".into(),
            });
        }
        Ok(EmbeddingMatrix {
            data,
            unit_normalized: false,
        })
    }

    /// L2-normalize every row. Fails on zero-norm rows.
    pub fn into_unit_normalized(mut self) -> Result<Self> {
        for (row, mut r) in self.data.rows_mut().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if norm <= 0.0 {
                return Err(Error::ZeroNormRow { row });
            }
            r.mapv_inplace(|v| v / norm);
        }
        self.unit_normalized = true;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn is_unit_normalized(&self) -> bool {
        self.unit_normalized
    }

    /// Check the unit-norm invariant explicitly (within [`UNIT_NORM_TOL`]).
    pub fn check_unit_norms(&self) -> Result<()> {
        for (row, r) in self.data.rows().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Domain(format!(
                    "row {row} has norm {norm}, expected 1 within {UNIT_NORM_TOL}"
                )));
            }
        }
        Ok(())
    }
}

/// Symmetric matrix of pairwise similarities plus the (resolved) kernel that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    kernel: KernelSpec,
}

impl SimilarityMatrix {
    /// Wrap raw values, validating squareness, symmetry and finiteness.
    pub fn from_values(values: Array2<f64>, kernel: KernelSpec) -> Result<Self> {
        if values.nrows() != values.ncols() || values.nrows() == 0 {
            return Err(Error::Shape(format!(
                "similarity matrix must be square and nonempty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "similarity matrix".into(),
            });
        }
        for i in 0..values.nrows() {
            for j in (i + 1)..values.ncols() {
                if (values[[i, j]] - values[[j, i]]).abs() > SYMMETRY_TOL {
                    return Err(Error::Domain(format!(
                        "similarity matrix not symmetric at ({i},{j}): {} vs {}",
                        values[[i, j]],
                        values[[j, i]]
                    )));
                }
            }
        }
        Ok(SimilarityMatrix { values, kernel })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped into [−1, 1].
///
/// The row indices are only used for error reporting; pass 0 and 1 when the
/// vectors do not come from a matrix.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    cosine_similarity_rows(a, b, 0, 1)
}

fn cosine_similarity_rows(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    row_a: usize,
    row_b: usize,
) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    if na <= 0.0 {
        return Err(Error::ZeroNormRow { row: row_a });
    }
    let nb = b.dot(&b).sqrt();
    if nb <= 0.0 {
        return Err(Error::ZeroNormRow { row: row_b });
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

fn euclidean_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn shift(value: f64, on: bool) -> f64 {
    if on {
        (1.0 + value) / 2.0
    } else {
        value
    }
}

/// Raw (unshifted) kernel value for a pair of rows.
fn raw_similarity(z: &EmbeddingMatrix, k: &KernelSpec, i: usize, j: usize) -> Result<f64> {
    match k.kind {
        KernelKind::Cosine => cosine_similarity_rows(z.row(i), z.row(j), i, j),
        KernelKind::Euclidean => Ok(1.0 / (1.0 + euclidean_distance(z.row(i), z.row(j)))),
        KernelKind::Rbf => {
            let sigma = k.bandwidth_or_err()?;
            let d = euclidean_distance(z.row(i), z.row(j));
            Ok((-d * d / (2.0 * sigma * sigma)).exp())
        }
    }
}

/// Build the full pairwise similarity matrix of `z` under kernel `k`.
///
/// The diagonal is the kernel's self-similarity (exactly 1.0 for all three
/// kernels, shifted or not). An `auto` rbf bandwidth is resolved against `z`
/// and recorded in the returned matrix's kernel.
pub fn build_similarity_matrix(z: &EmbeddingMatrix, k: &KernelSpec) -> Result<SimilarityMatrix> {
    let k = k.resolve(z)?;
    let n = z.n();
    let mut values = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let s = shift(raw_similarity(z, &k, i, j)?, k.nonneg_shift);
            if !s.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("similarity entry ({i},{j})"),
                });
            }
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    Ok(SimilarityMatrix { values, kernel: k })
}

/// Analytic gradients `(∂S_ij/∂z_i, ∂S_ij/∂z_j)` for a single pair, chained
/// through the nonnegative shift when enabled.
///
/// Requires `i != j` (self-similarity is constant, its gradient is zero and
/// never needed). For `euclidean` the gradient at coincident rows is the zero
/// subgradient.
pub fn kernel_gradient(
    z: &EmbeddingMatrix,
    k: &KernelSpec,
    i: usize,
    j: usize,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if i == j {
        return Err(Error::Domain(
            "kernel_gradient requires distinct indices".into(),
        ));
    }
    let n = z.n();
    if i >= n || j >= n {
        let index = if i >= n { i } else { j };
        return Err(Error::OutOfBounds { index, size: n });
    }
    let scale = if k.nonneg_shift { 0.5 } else { 1.0 };
    let (gi, gj) = raw_kernel_gradient(z, k, i, j)?;
    Ok((gi * scale, gj * scale))
}

/// Analytic gradient of `cos(a, b)` w.r.t. both vectors:
/// `∂c/∂a = b/(‖a‖‖b‖) − c·a/‖a‖²` and symmetrically for `b`.
pub fn cosine_gradient(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let na = a.dot(&a).sqrt();
    if na <= 0.0 {
        return Err(Error::ZeroNormRow { row: 0 });
    }
    let nb = b.dot(&b).sqrt();
    if nb <= 0.0 {
        return Err(Error::ZeroNormRow { row: 1 });
    }
    let c = a.dot(&b) / (na * nb);
    let ga = b.mapv(|x| x / (na * nb)) - a.mapv(|x| c * x / (na * na));
    let gb = a.mapv(|x| x / (na * nb)) - b.mapv(|x| c * x / (nb * nb));
    Ok((ga, gb))
}

fn raw_kernel_gradient(
    z: &EmbeddingMatrix,
    k: &KernelSpec,
    i: usize,
    j: usize,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let u = z.row(i);
    let v = z.row(j);
    match k.kind {
        KernelKind::Cosine => cosine_gradient(u, v).map_err(|e| match e {
            // Re-key the placeholder rows onto the real matrix rows.
            Error::ZeroNormRow { row } => Error::ZeroNormRow {
                row: if row == 0 { i } else { j },
            },
            other => other,
        }),
        KernelKind::Euclidean => {
            let r = euclidean_distance(u, v);
            if r == 0.0 {
                return Ok((Array1::zeros(u.len()), Array1::zeros(v.len())));
            }
            // S = 1/(1+r); dS/du = −(u−v) / (r (1+r)²)
            let coef = -1.0 / (r * (1.0 + r) * (1.0 + r));
            let diff = &u.to_owned() - &v;
            let gu = diff.mapv(|x| coef * x);
            let gv = gu.mapv(|x| -x);
            Ok((gu, gv))
        }
        KernelKind::Rbf => {
            let sigma = k.bandwidth_or_err()?;
            let r = euclidean_distance(u, v);
            let s = (-r * r / (2.0 * sigma * sigma)).exp();
            // dS/du = −S (u−v)/σ²
            let coef = -s / (sigma * sigma);
            let diff = &u.to_owned() - &v;
            let gu = diff.mapv(|x| coef * x);
            let gv = gu.mapv(|x| -x);
            Ok((gu, gv))
        }
    }
}
