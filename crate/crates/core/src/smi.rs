//! Closed-form pairwise mutual-information functions between index sets.
//!
//! Two instantiations are provided:
//!
//! * [`flmi`]: `I(Q, A) = Σ_{i∈Q} max_{j∈A} S_ij + λ Σ_{i∈A} max_{j∈Q} S_ij`
//!   — rewards either set containing a close match for each member of the
//!   other; symmetric in its arguments exactly when λ = 1;
//! * [`gcmi`]: `I(Q, A) = 2λ Σ_{i∈Q} Σ_{j∈A} S_ij` — the graph-cut form,
//!   which coincides *exactly* with the generic definition
//!   `f(Q) + f(A) − f(Q∪A)` for the full-sum graph cut on disjoint sets.
//!
//! The facility-location analog of the generic definition expands to
//! `Σ_{i∈T} min(max_{j∈A} S_ij, max_{j∈Q} S_ij)`, which is *not* the same
//! quantity as [`flmi`]; it is exposed as [`fl_generic_mi`] for diagnostics
//! and never substituted for the closed form.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::SimilarityMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmiKind {
    Flmi,
    Gcmi,
}

impl std::fmt::Display for SmiKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SmiKind::Flmi => write!(f, "flmi"),
            SmiKind::Gcmi => write!(f, "gcmi"),
        }
    }
}

fn default_lambda() -> f64 {
    1.0
}

/// A mutual-information function choice plus its λ weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmiSpec {
    pub kind: SmiKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl SmiSpec {
    pub fn new(kind: SmiKind, lambda: f64) -> Result<Self> {
        let spec = SmiSpec { kind, lambda };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "smi lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn evaluate(
        &self,
        s: &SimilarityMatrix,
        a: &BTreeSet<usize>,
        q: &BTreeSet<usize>,
    ) -> Result<f64> {
        self.validate()?;
        match self.kind {
            SmiKind::Flmi => flmi(s, a, q, self.lambda),
            SmiKind::Gcmi => gcmi(s, a, q, self.lambda),
        }
    }
}

fn check_bounds(s: &SimilarityMatrix, set: &BTreeSet<usize>) -> Result<()> {
    for &i in set {
        if i >= s.n() {
            return Err(Error::OutOfBounds {
                index: i,
                size: s.n(),
            });
        }
    }
    Ok(())
}

fn max_to_set(s: &SimilarityMatrix, i: usize, set: &BTreeSet<usize>) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &j in set {
        let v = s.get(i, j);
        if v > best {
            best = v;
        }
    }
    best
}

/// Facility-location mutual information
/// `I(Q, A) = Σ_{i∈Q} max_{j∈A} S_ij + λ Σ_{i∈A} max_{j∈Q} S_ij`.
///
/// Both sets must be nonempty (a max over nothing is undefined). Note the
/// argument order: `a` is the set under the inner max of the first sum.
pub fn flmi(
    s: &SimilarityMatrix,
    a: &BTreeSet<usize>,
    q: &BTreeSet<usize>,
    lambda: f64,
) -> Result<f64> {
    if a.is_empty() || q.is_empty() {
        return Err(Error::EmptySet {
            context: "flmi".into(),
        });
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "smi lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    check_bounds(s, a)?;
    check_bounds(s, q)?;
    let mut first = 0.0;
    for &i in q {
        first += max_to_set(s, i, a);
    }
    let mut second = 0.0;
    for &i in a {
        second += max_to_set(s, i, q);
    }
    Ok(first + lambda * second)
}

/// Graph-cut mutual information `I(Q, A) = 2λ Σ_{i∈Q} Σ_{j∈A} S_ij`.
///
/// Empty sets are allowed and give 0. The summation order is canonicalized
/// over the unordered pair `{A, Q}`, so swapping the arguments returns a
/// bit-identical value.
pub fn gcmi(
    s: &SimilarityMatrix,
    a: &BTreeSet<usize>,
    q: &BTreeSet<usize>,
    lambda: f64,
) -> Result<f64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "smi lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    check_bounds(s, a)?;
    check_bounds(s, q)?;
    // Fix the iteration order by the sets themselves, not the argument
    // order: S is symmetric, so the value is the same either way, and this
    // makes the symmetry exact in floating point too.
    let (outer, inner) = if a <= q { (a, q) } else { (q, a) };
    let mut total = 0.0;
    for &i in outer {
        for &j in inner {
            total += s.get(i, j);
        }
    }
    Ok(2.0 * lambda * total)
}

/// Diagnostic only: the generic `f(A) + f(Q) − f(A∪Q)` expansion for the
/// plain facility-location function, which simplifies to
/// `Σ_{i∈T} min(max_{j∈A} S_ij, max_{j∈Q} S_ij)`.
///
/// This is a different quantity from [`flmi`] and the two must never be
/// asserted equal.
pub fn fl_generic_mi(
    s: &SimilarityMatrix,
    a: &BTreeSet<usize>,
    q: &BTreeSet<usize>,
) -> Result<f64> {
    if a.is_empty() || q.is_empty() {
        return Err(Error::EmptySet {
            context: "fl_generic_mi".into(),
        });
    }
    check_bounds(s, a)?;
    check_bounds(s, q)?;
    let mut total = 0.0;
    for i in 0..s.n() {
        total += max_to_set(s, i, a).min(max_to_set(s, i, q));
    }
    Ok(total)
}
