//! Combinatorial losses over embedding batches, with analytic gradients.
//!
//! All losses are built from pairwise similarities `S = k(z)` and reduce,
//! once argmax witnesses are fixed, to weighted sums `Σ w·S_ij`. Gradients
//! are therefore assembled coefficient-by-coefficient through the kernel's
//! analytic gradient — no automatic differentiation anywhere.
//!
//! Terms, over a batch partitioned into classes `A_k` (base and novel):
//!
//! * [`l_intra`]: per-class compactness. The `flmi` variant charges each
//!   outside point its best similarity into the class,
//!   `Σ_k Σ_{i∈T∖A_k} max_{j∈A_k} S_ij`; the `gcmi` variant charges the
//!   class boundary, `Σ_k [Σ_{i∈A_k} Σ_{j∈T∖A_k} S_ij − λ Σ_{i,j∈A_k} S_ij]`.
//! * [`l_inter`]: cross-class redundancy. Sums the pairwise mutual
//!   information `I(A_k, A_l)` over ordered pairs with `l` novel and
//!   `k ≠ l`, so novel–novel pairs count twice and base classes never
//!   occupy the second slot.
//! * [`l_comb`]: `(1−η)·intra + η·inter`. At `η = 0` the inter term is not
//!   even evaluated (and vice versa at `η = 1`), so the extremes reproduce
//!   the individual losses exactly.
//!
//! `normalize_terms` (default on) divides every pairwise double sum by the
//! product of the two set sizes and every max-sum by its outer count,
//! keeping magnitudes stable across batch compositions. Raw mode is what
//! the hand-value and oracle-equality tests use.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    build_similarity_matrix, cosine_similarity, kernel_gradient, EmbeddingMatrix, KernelSpec,
    SimilarityMatrix,
};
use crate::setfn::ClassPartition;
use crate::smi::SmiKind;

fn default_eta() -> f64 {
    0.5
}

fn default_lambda() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Configuration of the combinatorial loss family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Which mutual-information family instantiates both terms.
    pub variant: SmiKind,
    /// Mixing weight between the intra (1−η) and inter (η) terms.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Redundancy weight inside the graph-cut / max-sum forms.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub kernel: KernelSpec,
    /// Divide each term by its index-set sizes; see the module docs.
    #[serde(default = "default_true")]
    pub normalize_terms: bool,
}

impl LossConfig {
    pub fn new(variant: SmiKind) -> Self {
        LossConfig {
            variant,
            eta: default_eta(),
            lambda: default_lambda(),
            kernel: KernelSpec::default(),
            normalize_terms: true,
        }
    }

    /// Raw-mode config for value-level tests and oracle comparisons.
    pub fn raw(variant: SmiKind) -> Self {
        LossConfig {
            normalize_terms: false,
            ..LossConfig::new(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        self.kernel.validate()
    }
}

/// The intra/inter split of a combinatorial loss value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub intra: f64,
    pub inter: f64,
}

/// A loss value with its gradient w.r.t. every embedding row.
#[derive(Clone, Debug)]
pub struct LossResult {
    pub value: f64,
    /// `grad[[i, t]] = ∂L/∂z[i, t]`.
    pub grad: Array2<f64>,
    pub term_breakdown: TermBreakdown,
}

impl LossResult {
    fn check_finite(self, what: &str) -> Result<Self> {
        if !self.value.is_finite() || self.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: what.to_string(),
            });
        }
        Ok(self)
    }
}

/// One `w · S_ij` term of a linearized loss.
#[derive(Clone, Copy, Debug)]
struct Coeff {
    i: usize,
    j: usize,
    w: f64,
}

fn value_of(s: &SimilarityMatrix, coeffs: &[Coeff]) -> f64 {
    coeffs.iter().map(|c| c.w * s.get(c.i, c.j)).sum()
}

/// Accumulate `Σ w · ∂S_ij/∂z` through the kernel. Diagonal terms are
/// constants (self-similarity is 1) and contribute nothing.
fn grad_of(z: &EmbeddingMatrix, kernel: &KernelSpec, coeffs: &[Coeff]) -> Result<Array2<f64>> {
    let mut grad = Array2::zeros((z.n(), z.dim()));
    // Merge repeated pairs first so each kernel gradient is computed once.
    let mut merged: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    for c in coeffs {
        if c.i == c.j {
            continue;
        }
        let key = (c.i.min(c.j), c.i.max(c.j));
        *merged.entry(key).or_insert(0.0) += c.w;
    }
    for (&(i, j), &w) in &merged {
        if w == 0.0 {
            continue;
        }
        let (gi, gj) = kernel_gradient(z, kernel, i, j)?;
        grad.row_mut(i).scaled_add(w, &gi);
        grad.row_mut(j).scaled_add(w, &gj);
    }
    Ok(grad)
}

/// Lowest-index argmax of `S_ij` over `j ∈ set`; `set` must be nonempty.
fn argmax_in(s: &SimilarityMatrix, i: usize, set: &std::collections::BTreeSet<usize>) -> usize {
    let mut best_j = *set.iter().next().expect("argmax over empty set");
    let mut best = s.get(i, best_j);
    for &j in set.iter().skip(1) {
        let v = s.get(i, j);
        if v > best {
            best = v;
            best_j = j;
        }
    }
    best_j
}

fn check_partition(s: &SimilarityMatrix, p: &ClassPartition) -> Result<()> {
    if p.ground_size() != s.n() {
        return Err(Error::Shape(format!(
            "partition is over {} elements but the batch has {} rows",
            p.ground_size(),
            s.n()
        )));
    }
    Ok(())
}

fn intra_coeffs(s: &SimilarityMatrix, p: &ClassPartition, cfg: &LossConfig) -> Result<Vec<Coeff>> {
    cfg.validate()?;
    check_partition(s, p)?;
    let n = s.n();
    let mut coeffs = Vec::new();
    for (_, members) in p.iter() {
        let complement: Vec<usize> = (0..n).filter(|i| !members.contains(i)).collect();
        match cfg.variant {
            SmiKind::Flmi => {
                if complement.is_empty() {
                    continue;
                }
                let w = if cfg.normalize_terms {
                    1.0 / complement.len() as f64
                } else {
                    1.0
                };
                for &i in &complement {
                    coeffs.push(Coeff {
                        i,
                        j: argmax_in(s, i, members),
                        w,
                    });
                }
            }
            SmiKind::Gcmi => {
                let m = members.len() as f64;
                if !complement.is_empty() {
                    let w = if cfg.normalize_terms {
                        1.0 / (m * complement.len() as f64)
                    } else {
                        1.0
                    };
                    for &i in members {
                        for &j in &complement {
                            coeffs.push(Coeff { i, j, w });
                        }
                    }
                }
                let w = if cfg.normalize_terms {
                    -cfg.lambda / (m * m)
                } else {
                    -cfg.lambda
                };
                for &i in members {
                    for &j in members {
                        coeffs.push(Coeff { i, j, w });
                    }
                }
            }
        }
    }
    Ok(coeffs)
}

fn inter_coeffs(s: &SimilarityMatrix, p: &ClassPartition, cfg: &LossConfig) -> Result<Vec<Coeff>> {
    cfg.validate()?;
    check_partition(s, p)?;
    if !p.has_novel() {
        return Err(Error::NoInterPairs(
            "no novel classes in the batch partition".into(),
        ));
    }
    let mut coeffs = Vec::new();
    let mut pairs = 0usize;
    for k in p.class_ids() {
        for l in p.novel_ids() {
            if k == l {
                continue;
            }
            pairs += 1;
            let a_k = p.members(k).expect("class id came from the partition");
            let a_l = p.members(l).expect("novel id came from the partition");
            match cfg.variant {
                SmiKind::Flmi => {
                    // I(A_k, A_l) = Σ_{i∈A_k} max_{j∈A_l} + λ Σ_{i∈A_l} max_{j∈A_k}
                    let w1 = if cfg.normalize_terms {
                        1.0 / a_k.len() as f64
                    } else {
                        1.0
                    };
                    for &i in a_k {
                        coeffs.push(Coeff {
                            i,
                            j: argmax_in(s, i, a_l),
                            w: w1,
                        });
                    }
                    let w2 = if cfg.normalize_terms {
                        cfg.lambda / a_l.len() as f64
                    } else {
                        cfg.lambda
                    };
                    for &i in a_l {
                        coeffs.push(Coeff {
                            i,
                            j: argmax_in(s, i, a_k),
                            w: w2,
                        });
                    }
                }
                SmiKind::Gcmi => {
                    let w = if cfg.normalize_terms {
                        2.0 * cfg.lambda / (a_k.len() * a_l.len()) as f64
                    } else {
                        2.0 * cfg.lambda
                    };
                    for &i in a_k {
                        for &j in a_l {
                            coeffs.push(Coeff { i, j, w });
                        }
                    }
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::NoInterPairs(
            "the batch holds a single (novel) class, so no class pairs exist".into(),
        ));
    }
    Ok(coeffs)
}

/// Intra-class term value on a prebuilt similarity matrix. The config's
/// kernel field is ignored here — `s` is taken as given.
pub fn l_intra_value(s: &SimilarityMatrix, p: &ClassPartition, cfg: &LossConfig) -> Result<f64> {
    Ok(value_of(s, &intra_coeffs(s, p, cfg)?))
}

/// Inter-class term value on a prebuilt similarity matrix.
pub fn l_inter_value(s: &SimilarityMatrix, p: &ClassPartition, cfg: &LossConfig) -> Result<f64> {
    Ok(value_of(s, &inter_coeffs(s, p, cfg)?))
}

/// Intra-class compactness loss with gradient; see the module docs.
pub fn l_intra(z: &EmbeddingMatrix, p: &ClassPartition, cfg: &LossConfig) -> Result<LossResult> {
    let kernel = cfg.kernel.resolve(z)?;
    let s = build_similarity_matrix(z, &kernel)?;
    let coeffs = intra_coeffs(&s, p, cfg)?;
    let value = value_of(&s, &coeffs);
    let grad = grad_of(z, &kernel, &coeffs)?;
    LossResult {
        value,
        grad,
        term_breakdown: TermBreakdown {
            intra: value,
            inter: 0.0,
        },
    }
    .check_finite("l_intra")
}

/// Inter-class redundancy loss with gradient; see the module docs.
pub fn l_inter(z: &EmbeddingMatrix, p: &ClassPartition, cfg: &LossConfig) -> Result<LossResult> {
    let kernel = cfg.kernel.resolve(z)?;
    let s = build_similarity_matrix(z, &kernel)?;
    let coeffs = inter_coeffs(&s, p, cfg)?;
    let value = value_of(&s, &coeffs);
    let grad = grad_of(z, &kernel, &coeffs)?;
    LossResult {
        value,
        grad,
        term_breakdown: TermBreakdown {
            intra: 0.0,
            inter: value,
        },
    }
    .check_finite("l_inter")
}

/// Weighted combination `(1−η)·l_intra + η·l_inter`.
///
/// At the extremes only the active term is evaluated, so `η = 0` works on
/// batches with no novel classes and reproduces [`l_intra`] exactly.
pub fn l_comb(z: &EmbeddingMatrix, p: &ClassPartition, cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate()?;
    if cfg.eta == 0.0 {
        return l_intra(z, p, cfg);
    }
    if cfg.eta == 1.0 {
        return l_inter(z, p, cfg);
    }
    let intra = l_intra(z, p, cfg)?;
    let inter = l_inter(z, p, cfg)?;
    let value = (1.0 - cfg.eta) * intra.value + cfg.eta * inter.value;
    let grad = &intra.grad * (1.0 - cfg.eta) + &inter.grad * cfg.eta;
    LossResult {
        value,
        grad,
        term_breakdown: TermBreakdown {
            intra: intra.value,
            inter: inter.value,
        },
    }
    .check_finite("l_comb")
}

/// Supervised-contrastive baseline over the batch.
///
/// For each anchor `i` with positive set `P(i)` (same label, other index):
/// `L_i = −(1/|P(i)|) Σ_{p∈P(i)} s_ip + log Σ_{a≠i} exp(s_ia)` with
/// `s_ia = cos(z_i, z_a)/τ`; the loss is the mean over anchors that have at
/// least one positive. Anchors without positives are skipped; a batch where
/// every row is its own class has no anchors at all and is rejected.
pub fn supcon_baseline(
    z: &EmbeddingMatrix,
    labels: &[usize],
    temperature: f64,
) -> Result<LossResult> {
    if labels.len() != z.n() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            z.n()
        )));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = z.n();
    let mut cos = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let c = cosine_similarity(z.row(i), z.row(j))?;
            cos[[i, j]] = c;
            cos[[j, i]] = c;
        }
    }
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|a| a != i && labels[a] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::Domain(
            "supcon needs at least one class with two samples; every row is a singleton".into(),
        ));
    }
    let m = anchors.len() as f64;
    let mut value = 0.0;
    // d(loss)/d(cos_ij), accumulated over both anchor roles of each pair.
    let mut dcos = Array2::<f64>::zeros((n, n));
    for &i in &anchors {
        let others: Vec<usize> = (0..n).filter(|&a| a != i).collect();
        let positives: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&a| labels[a] == labels[i])
            .collect();
        let np = positives.len() as f64;
        // Stable log-sum-exp over s_ia = cos_ia / τ.
        let smax = others
            .iter()
            .map(|&a| cos[[i, a]] / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let zsum: f64 = others
            .iter()
            .map(|&a| (cos[[i, a]] / temperature - smax).exp())
            .sum();
        let log_z = smax + zsum.ln();
        let mean_pos: f64 = positives
            .iter()
            .map(|&p| cos[[i, p]] / temperature)
            .sum::<f64>()
            / np;
        value += (log_z - mean_pos) / m;
        for &a in &others {
            let p_ia = (cos[[i, a]] / temperature - smax).exp() / zsum;
            let indicator = if labels[a] == labels[i] {
                1.0 / np
            } else {
                0.0
            };
            dcos[[i, a]] += (p_ia - indicator) / (m * temperature);
        }
    }
    // Push d(loss)/d(cos) through the cosine kernel, once per unordered pair.
    let plain_cos = KernelSpec::cosine(false);
    let mut grad = Array2::zeros((n, z.dim()));
    for i in 0..n {
        for j in (i + 1)..n {
            let w = dcos[[i, j]] + dcos[[j, i]];
            if w == 0.0 {
                continue;
            }
            let (gi, gj) = kernel_gradient(z, &plain_cos, i, j)?;
            grad.row_mut(i).scaled_add(w, &gi);
            grad.row_mut(j).scaled_add(w, &gj);
        }
    }
    LossResult {
        value,
        grad,
        term_breakdown: TermBreakdown::default(),
    }
    .check_finite("supcon_baseline")
}

/// Sum a classification loss and a (weighted) combinatorial loss.
pub fn total_objective(
    clf: &LossResult,
    comb: &LossResult,
    comb_weight: f64,
) -> Result<LossResult> {
    if clf.grad.dim() != comb.grad.dim() {
        return Err(Error::Shape(format!(
            "gradient shapes differ: {:?} vs {:?}",
            clf.grad.dim(),
            comb.grad.dim()
        )));
    }
    if !comb_weight.is_finite() {
        return Err(Error::Config(format!(
            "combinatorial loss weight must be finite, got {comb_weight}"
        )));
    }
    LossResult {
        value: clf.value + comb_weight * comb.value,
        grad: &clf.grad + &(&comb.grad * comb_weight),
        term_breakdown: comb.term_breakdown,
    }
    .check_finite("total_objective")
}

/// Which loss a finite-difference check exercises.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossOp {
    Intra,
    Inter,
    Comb,
    Supcon { temperature: f64 },
}

fn eval_op(
    op: LossOp,
    z: &EmbeddingMatrix,
    p: &ClassPartition,
    cfg: &LossConfig,
) -> Result<LossResult> {
    match op {
        LossOp::Intra => l_intra(z, p, cfg),
        LossOp::Inter => l_inter(z, p, cfg),
        LossOp::Comb => l_comb(z, p, cfg),
        LossOp::Supcon { temperature } => {
            let labels = labels_from_partition(z.n(), p)?;
            supcon_baseline(z, &labels, temperature)
        }
    }
}

fn labels_from_partition(n: usize, p: &ClassPartition) -> Result<Vec<usize>> {
    let mut labels = vec![usize::MAX; n];
    for (id, members) in p.iter() {
        for &i in members {
            labels[i] = id;
        }
    }
    if let Some(row) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(Error::Domain(format!(
            "row {row} belongs to no class; a fully covering partition is required here"
        )));
    }
    Ok(labels)
}

/// Smallest gap between the best and second-best candidate inside any max
/// group the configured loss would take. Infinite when no maxes occur.
fn min_argmax_gap(s: &SimilarityMatrix, p: &ClassPartition, cfg: &LossConfig, op: LossOp) -> f64 {
    let mut gap = f64::INFINITY;
    let mut consider = |i: usize, set: &std::collections::BTreeSet<usize>| {
        if set.len() < 2 {
            return;
        }
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &j in set {
            let v = s.get(i, j);
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        }
        gap = gap.min(best - second);
    };
    if cfg.variant != SmiKind::Flmi || matches!(op, LossOp::Supcon { .. }) {
        return gap;
    }
    let n = s.n();
    if matches!(op, LossOp::Intra | LossOp::Comb) {
        for (_, members) in p.iter() {
            for i in (0..n).filter(|i| !members.contains(i)) {
                consider(i, members);
            }
        }
    }
    if matches!(op, LossOp::Inter | LossOp::Comb) {
        for k in p.class_ids() {
            for l in p.novel_ids() {
                if k == l {
                    continue;
                }
                let a_k = p.members(k).unwrap();
                let a_l = p.members(l).unwrap();
                for &i in a_k {
                    consider(i, a_l);
                }
                for &i in a_l {
                    consider(i, a_k);
                }
            }
        }
    }
    gap
}

/// Maximum attempts to jitter a batch away from argmax ties.
const TIE_RESAMPLE_ATTEMPTS: usize = 50;

/// Compare the analytic gradient of `op` against central finite differences
/// over every coordinate, returning the maximum relative error.
///
/// Batches whose argmax decisions sit within `10·step` of a tie are jittered
/// (deterministically) and re-tried, because finite differences straddle
/// such kinks.
pub fn finite_difference_check(
    op: LossOp,
    z: &EmbeddingMatrix,
    p: &ClassPartition,
    cfg: &LossConfig,
    step: f64,
) -> Result<f64> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    // Freeze any auto bandwidth against the unperturbed batch so the same σ
    // is used at every probe point.
    let cfg = LossConfig {
        kernel: cfg.kernel.resolve(z)?,
        ..*cfg
    };
    let mut z = z.clone();
    let mut attempt = 0;
    loop {
        let s = build_similarity_matrix(&z, &cfg.kernel)?;
        if min_argmax_gap(&s, p, &cfg, op) > 10.0 * step {
            break;
        }
        attempt += 1;
        if attempt > TIE_RESAMPLE_ATTEMPTS {
            return Err(Error::TiesUnresolved {
                attempts: TIE_RESAMPLE_ATTEMPTS,
            });
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xF1D0 + attempt as u64);
        let mut data = z.values().clone();
        data.mapv_inplace(|v| v + rng.random_range(-1e-3..1e-3));
        z = EmbeddingMatrix::new(data)?;
    }

    let analytic = eval_op(op, &z, p, &cfg)?.grad;
    let gmax = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut max_rel = 0.0f64;
    for row in 0..z.n() {
        for t in 0..z.dim() {
            let mut plus = z.values().clone();
            plus[[row, t]] += step;
            let vp = eval_op(op, &EmbeddingMatrix::new(plus)?, p, &cfg)?.value;
            let mut minus = z.values().clone();
            minus[[row, t]] -= step;
            let vm = eval_op(op, &EmbeddingMatrix::new(minus)?, p, &cfg)?.value;
            let numeric = (vp - vm) / (2.0 * step);
            let a = analytic[[row, t]];
            let denom = a.abs().max(numeric.abs()).max(1e-3 * gmax).max(1e-12);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Bandwidth, KernelKind};
    use ndarray::arr2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    fn sim(values: ndarray::Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix::from_values(values, KernelSpec::cosine(true)).unwrap()
    }

    fn two_point_fixture() -> SimilarityMatrix {
        sim(arr2(&[[1.0, 0.8], [0.8, 1.0]]))
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = ndarray::Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        EmbeddingMatrix::new(data).unwrap()
    }

    /// 12 rows in 3 classes of 4 (class 2 novel), the workhorse partition.
    fn random_instance(seed: u64) -> (EmbeddingMatrix, ClassPartition) {
        let z = random_batch(12, 8, seed);
        let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let p = ClassPartition::from_labels(&labels)
            .unwrap()
            .with_novel_ids([2]);
        (z, p)
    }

    #[test]
    fn intra_flmi_two_singletons_raw() {
        // Classes {0}, {1} on S with S01 = 0.8: each point's best match in
        // the other class is 0.8, so the raw value is 2·0.8.
        let s = two_point_fixture();
        let p = ClassPartition::from_labels(&[0, 1]).unwrap();
        let v = l_intra_value(&s, &p, &LossConfig::raw(SmiKind::Flmi)).unwrap();
        assert!((v - 1.6).abs() < 1e-12);
    }

    #[test]
    fn intra_flmi_single_class_is_zero() {
        let s = two_point_fixture();
        let p = ClassPartition::from_labels(&[0, 0]).unwrap();
        let v = l_intra_value(&s, &p, &LossConfig::raw(SmiKind::Flmi)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn intra_gcmi_two_singletons_raw() {
        // (0.8 − 1) + (0.8 − 1) = −0.4 at λ = 1.
        let s = two_point_fixture();
        let p = ClassPartition::from_labels(&[0, 1]).unwrap();
        let v = l_intra_value(&s, &p, &LossConfig::raw(SmiKind::Gcmi)).unwrap();
        assert!((v - (-0.4)).abs() < 1e-12);
    }

    #[test]
    fn inter_gcmi_base_novel_pair_raw() {
        // One base {0}, one novel {1}, S01 = 0.5, λ = 1: single ordered
        // pair, value 2λ·S01 = 1.0.
        let s = sim(arr2(&[[1.0, 0.5], [0.5, 1.0]]));
        let p = ClassPartition::from_labels(&[0, 1])
            .unwrap()
            .with_novel_ids([1]);
        let v = l_inter_value(&s, &p, &LossConfig::raw(SmiKind::Gcmi)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inter_counts_ordered_pairs_once_per_direction() {
        // Two novel singletons: both (0,1) and (1,0) contribute, doubling
        // the single-pair value.
        let s = two_point_fixture();
        let both_novel = ClassPartition::from_labels(&[0, 1])
            .unwrap()
            .with_novel_ids([0, 1]);
        let one_novel = ClassPartition::from_labels(&[0, 1])
            .unwrap()
            .with_novel_ids([1]);
        for cfg in [
            LossConfig::raw(SmiKind::Gcmi),
            LossConfig::raw(SmiKind::Flmi),
        ] {
            let double = l_inter_value(&s, &both_novel, &cfg).unwrap();
            let single = l_inter_value(&s, &one_novel, &cfg).unwrap();
            assert!(
                (double - 2.0 * single).abs() < 1e-12,
                "{:?}: {double} vs 2×{single}",
                cfg.variant
            );
        }
        // And the gcmi numbers themselves: 2·(2λ·0.8) = 3.2.
        let v = l_inter_value(&s, &both_novel, &LossConfig::raw(SmiKind::Gcmi)).unwrap();
        assert!((v - 3.2).abs() < 1e-12);
    }

    #[test]
    fn inter_requires_novel_classes_and_pairs() {
        let s = two_point_fixture();
        let no_novel = ClassPartition::from_labels(&[0, 1]).unwrap();
        assert!(matches!(
            l_inter_value(&s, &no_novel, &LossConfig::raw(SmiKind::Gcmi)),
            Err(Error::NoInterPairs(_))
        ));
        let lone_novel = ClassPartition::from_labels(&[0, 0])
            .unwrap()
            .with_novel_ids([0]);
        assert!(matches!(
            l_inter_value(&s, &lone_novel, &LossConfig::raw(SmiKind::Gcmi)),
            Err(Error::NoInterPairs(_))
        ));
    }

    #[test]
    fn inter_gcmi_agrees_with_smi_sum() {
        // The loss layer adds only summation over pairs: compare against
        // explicit smi::gcmi calls on the same sets (raw mode).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = ndarray::Array2::from_shape_fn((9, 4), |_| rng.random_range(-1.0..1.0));
        let z = EmbeddingMatrix::new(data).unwrap();
        let s = build_similarity_matrix(&z, &KernelSpec::cosine(true)).unwrap();
        let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let p = ClassPartition::from_labels(&labels)
            .unwrap()
            .with_novel_ids([1, 2]);
        let cfg = LossConfig::raw(SmiKind::Gcmi);
        let v = l_inter_value(&s, &p, &cfg).unwrap();
        let mut expect = 0.0;
        for k in p.class_ids() {
            for l in p.novel_ids() {
                if k != l {
                    expect +=
                        crate::smi::gcmi(&s, p.members(k).unwrap(), p.members(l).unwrap(), 1.0)
                            .unwrap();
                }
            }
        }
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn comb_breakdown_on_two_point_fixture() {
        // Raw gcmi λ=1 on S01=0.8, base {0} novel {1}: intra −0.4, inter
        // 1.6, η=0.5 → 0.5·(−0.4) + 0.5·1.6 = 0.6.
        let z = {
            // rows engineered so the shifted cosine is exactly 0.8 is not
            // attempted; instead verify the arithmetic on whatever S the
            // kernel yields, then pin the fixture arithmetic separately.
            random_batch(2, 3, 8)
        };
        let p = ClassPartition::from_labels(&[0, 1])
            .unwrap()
            .with_novel_ids([1]);
        let mut cfg = LossConfig::raw(SmiKind::Gcmi);
        cfg.eta = 0.5;
        let comb = l_comb(&z, &p, &cfg).unwrap();
        let intra = l_intra(&z, &p, &cfg).unwrap();
        let inter = l_inter(&z, &p, &cfg).unwrap();
        assert_eq!(comb.term_breakdown.intra, intra.value);
        assert_eq!(comb.term_breakdown.inter, inter.value);
        assert!((comb.value - (0.5 * intra.value + 0.5 * inter.value)).abs() < 1e-15);
        // The worked arithmetic: intra −0.4 and inter 1.0 mix to 0.3.
        assert!((0.5 * (-0.4) + 0.5 * 1.0 - 0.3_f64).abs() < 1e-15);
    }

    #[test]
    fn comb_decomposition_identity_random() {
        for seed in 0..20u64 {
            let (z, p) = random_instance(seed);
            for variant in [SmiKind::Flmi, SmiKind::Gcmi] {
                for eta in [0.25, 0.5, 0.9] {
                    for normalize in [false, true] {
                        let cfg = LossConfig {
                            eta,
                            normalize_terms: normalize,
                            ..LossConfig::new(variant)
                        };
                        let comb = l_comb(&z, &p, &cfg).unwrap();
                        let expect = (1.0 - eta) * comb.term_breakdown.intra
                            + eta * comb.term_breakdown.inter;
                        assert!((comb.value - expect).abs() <= 1e-12);
                        let intra = l_intra(&z, &p, &cfg).unwrap().value;
                        let inter = l_inter(&z, &p, &cfg).unwrap().value;
                        assert!((comb.term_breakdown.intra - intra).abs() <= 1e-12);
                        assert!((comb.term_breakdown.inter - inter).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn comb_extremes_reproduce_individual_losses_exactly() {
        let (z, p) = random_instance(3);
        for variant in [SmiKind::Flmi, SmiKind::Gcmi] {
            let mut cfg = LossConfig::new(variant);
            cfg.eta = 0.0;
            let comb = l_comb(&z, &p, &cfg).unwrap();
            let intra = l_intra(&z, &p, &cfg).unwrap();
            assert_eq!(comb.value.to_bits(), intra.value.to_bits());
            assert_eq!(comb.grad, intra.grad);
            cfg.eta = 1.0;
            let comb = l_comb(&z, &p, &cfg).unwrap();
            let inter = l_inter(&z, &p, &cfg).unwrap();
            assert_eq!(comb.value.to_bits(), inter.value.to_bits());
            assert_eq!(comb.grad, inter.grad);
        }
        // η = 0 must not require novel classes at all.
        let no_novel = ClassPartition::from_labels(&[0, 0, 1, 1]).unwrap();
        let z4 = random_batch(4, 5, 9);
        let mut cfg = LossConfig::new(SmiKind::Flmi);
        cfg.eta = 0.0;
        assert!(l_comb(&z4, &no_novel, &cfg).is_ok());
    }

    #[test]
    fn losses_invariant_to_row_permutation_and_relabeling() {
        let (z, p) = random_instance(11);
        let cfg = LossConfig::new(SmiKind::Flmi);
        let base = l_comb(&z, &p, &cfg).unwrap().value;

        // Permute rows and carry the partition along.
        let perm: Vec<usize> = vec![5, 0, 7, 11, 2, 9, 1, 3, 10, 6, 4, 8];
        let mut data = ndarray::Array2::zeros((12, 8));
        for (new_i, &old_i) in perm.iter().enumerate() {
            data.row_mut(new_i).assign(&z.row(old_i));
        }
        let zp = EmbeddingMatrix::new(data).unwrap();
        // new index of old row i is perm.position(i)
        let mut relabeled = vec![0usize; 12];
        for (new_i, &old_i) in perm.iter().enumerate() {
            relabeled[new_i] = old_i / 4;
        }
        let pp = ClassPartition::from_labels(&relabeled)
            .unwrap()
            .with_novel_ids([2]);
        let permuted = l_comb(&zp, &pp, &cfg).unwrap().value;
        assert!((base - permuted).abs() < 1e-12);

        // Relabel class ids (0,1,2) -> (10,20,30) keeping membership.
        let mut classes = BTreeMap::new();
        for (id, members) in p.iter() {
            classes.insert(10 * (id + 1), members.clone());
        }
        let pr = ClassPartition::from_classes(classes, 12)
            .unwrap()
            .with_novel_ids([30]);
        let relabeled = l_comb(&z, &pr, &cfg).unwrap().value;
        assert!((base - relabeled).abs() < 1e-12);
    }

    #[test]
    fn nonnegativity_under_shifted_kernel() {
        for seed in 40..48u64 {
            let (z, p) = random_instance(seed);
            for variant in [SmiKind::Flmi, SmiKind::Gcmi] {
                let cfg = LossConfig::new(variant);
                assert!(l_inter(&z, &p, &cfg).unwrap().value >= 0.0, "{variant}");
            }
            let cfg = LossConfig::new(SmiKind::Flmi);
            assert!(l_intra(&z, &p, &cfg).unwrap().value >= 0.0);
        }
    }

    #[test]
    fn inter_gradient_skips_uncovered_rows() {
        // Row 6 belongs to no class: the inter loss never touches it.
        let z = random_batch(7, 5, 21);
        let mut classes = BTreeMap::new();
        classes.insert(0, set(&[0, 1, 2]));
        classes.insert(1, set(&[3, 4, 5]));
        let p = ClassPartition::from_classes(classes, 7)
            .unwrap()
            .with_novel_ids([1]);
        let cfg = LossConfig::new(SmiKind::Flmi);
        let res = l_inter(&z, &p, &cfg).unwrap();
        assert!(res.grad.row(6).iter().all(|&g| g == 0.0));
        // Sanity: covered rows do receive gradient.
        assert!(res.grad.row(0).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn one_descent_step_reduces_cross_similarity() {
        // Two singleton classes, gcmi inter: the loss is 2λ·S01, so a small
        // step against the gradient must strictly lower S01.
        let z = random_batch(2, 6, 33);
        let p = ClassPartition::from_labels(&[0, 1])
            .unwrap()
            .with_novel_ids([1]);
        let cfg = LossConfig::new(SmiKind::Gcmi);
        let before = build_similarity_matrix(&z, &cfg.kernel).unwrap().get(0, 1);
        let res = l_inter(&z, &p, &cfg).unwrap();
        let eps = 1e-3;
        let stepped = EmbeddingMatrix::new(z.values() - &(&res.grad * eps)).unwrap();
        let after = build_similarity_matrix(&stepped, &cfg.kernel)
            .unwrap()
            .get(0, 1);
        assert!(after < before, "S01 did not decrease: {before} -> {after}");
    }

    #[test]
    fn normalization_divides_by_set_sizes() {
        // Intra flmi: every class complement has 8 rows, so normalized
        // mode is exactly raw/8 per class — and the sum scales the same.
        let (z, p) = random_instance(50);
        let raw = l_intra(&z, &p, &LossConfig::raw(SmiKind::Flmi))
            .unwrap()
            .value;
        let norm = l_intra(&z, &p, &LossConfig::new(SmiKind::Flmi))
            .unwrap()
            .value;
        assert!((norm - raw / 8.0).abs() < 1e-12);
        // Inter gcmi: all classes have 4 members, every pair divides by 16.
        let raw = l_inter(&z, &p, &LossConfig::raw(SmiKind::Gcmi))
            .unwrap()
            .value;
        let norm = l_inter(&z, &p, &LossConfig::new(SmiKind::Gcmi))
            .unwrap()
            .value;
        assert!((norm - raw / 16.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let step = 1e-5;
        for seed in 0..4u64 {
            let (z, p) = random_instance(seed);
            for variant in [SmiKind::Flmi, SmiKind::Gcmi] {
                let cfg = LossConfig::new(variant);
                let bound = match variant {
                    SmiKind::Flmi => 1e-4,
                    SmiKind::Gcmi => 1e-6,
                };
                for op in [LossOp::Intra, LossOp::Inter, LossOp::Comb] {
                    let err = finite_difference_check(op, &z, &p, &cfg, step).unwrap();
                    assert!(err < bound, "seed {seed} {variant} {op:?}: rel err {err}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_other_kernels() {
        let (z, p) = random_instance(7);
        for kernel in [
            KernelSpec::euclidean(),
            KernelSpec::rbf(Bandwidth::AUTO),
            KernelSpec::cosine(false),
        ] {
            let cfg = LossConfig {
                kernel,
                ..LossConfig::new(SmiKind::Gcmi)
            };
            let err = finite_difference_check(LossOp::Comb, &z, &p, &cfg, 1e-5).unwrap();
            assert!(err < 1e-5, "{kernel:?}: rel err {err}");
        }
    }

    #[test]
    fn supcon_hand_fixture() {
        // Two classes, two identical unit vectors each, cross-class
        // orthogonal, τ=1: every anchor contributes ln(1 + 2/e).
        let data = arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        let z = EmbeddingMatrix::new(data).unwrap();
        let res = supcon_baseline(&z, &[0, 0, 1, 1], 1.0).unwrap();
        let expect = (1.0 + 2.0 * (-1.0_f64).exp()).ln();
        assert!((res.value - expect).abs() < 1e-12);
        assert!((res.value - 0.5514447139320509).abs() < 1e-12);
    }

    #[test]
    fn supcon_invariant_to_joint_permutation() {
        let z = random_batch(8, 5, 60);
        let labels = [0, 1, 0, 2, 1, 2, 0, 1];
        let base = supcon_baseline(&z, &labels, 0.5).unwrap().value;
        let perm = [3usize, 7, 1, 0, 5, 2, 6, 4];
        let mut data = ndarray::Array2::zeros((8, 5));
        let mut plabels = [0usize; 8];
        for (new_i, &old_i) in perm.iter().enumerate() {
            data.row_mut(new_i).assign(&z.row(old_i));
            plabels[new_i] = labels[old_i];
        }
        let zp = EmbeddingMatrix::new(data).unwrap();
        let permuted = supcon_baseline(&zp, &plabels, 0.5).unwrap().value;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let z = random_batch(10, 6, 61);
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let p = ClassPartition::from_labels(&labels).unwrap();
        let err = finite_difference_check(
            LossOp::Supcon { temperature: 0.7 },
            &z,
            &p,
            &LossConfig::new(SmiKind::Gcmi),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn supcon_rejects_all_singletons() {
        let z = random_batch(3, 4, 62);
        assert!(matches!(
            supcon_baseline(&z, &[0, 1, 2], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn supcon_skips_singleton_anchors_but_keeps_the_rest() {
        // Class 1 is a singleton; only the two class-0 anchors count.
        let data = arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let z = EmbeddingMatrix::new(data).unwrap();
        let res = supcon_baseline(&z, &[0, 0, 1], 1.0).unwrap();
        // Each class-0 anchor: positives {other}, s_pos = 1, negatives one
        // orthogonal row: L = ln(e + 1) − 1.
        let expect = (1.0_f64.exp() + 1.0).ln() - 1.0;
        assert!((res.value - expect).abs() < 1e-12);
    }

    #[test]
    fn total_objective_adds_values_and_gradients() {
        let (z, p) = random_instance(70);
        let cfg = LossConfig::new(SmiKind::Gcmi);
        let comb = l_comb(&z, &p, &cfg).unwrap();
        let clf = LossResult {
            value: 1.25,
            grad: ndarray::Array2::from_elem((12, 8), 0.5),
            term_breakdown: TermBreakdown::default(),
        };
        let total = total_objective(&clf, &comb, 1.0).unwrap();
        assert!((total.value - (1.25 + comb.value)).abs() < 1e-12);
        assert!((total.grad[[0, 0]] - (0.5 + comb.grad[[0, 0]])).abs() < 1e-12);
        // Zero combinatorial part: total is the classification loss.
        let zero = LossResult {
            value: 0.0,
            grad: ndarray::Array2::zeros((12, 8)),
            term_breakdown: TermBreakdown::default(),
        };
        let total = total_objective(&clf, &zero, 1.0).unwrap();
        assert_eq!(total.value, 1.25);
        // Shape mismatch is rejected.
        let bad = LossResult {
            value: 0.0,
            grad: ndarray::Array2::zeros((3, 8)),
            term_breakdown: TermBreakdown::default(),
        };
        assert!(total_objective(&clf, &bad, 1.0).is_err());
    }

    #[test]
    fn loss_config_serde_defaults() {
        let cfg: LossConfig = serde_json::from_str(r#"{"variant":"flmi"}"#).unwrap();
        assert_eq!(cfg.eta, 0.5);
        assert_eq!(cfg.lambda, 1.0);
        assert!(cfg.normalize_terms);
        assert_eq!(cfg.kernel.kind, KernelKind::Cosine);
        assert!(cfg.kernel.nonneg_shift);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: LossConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn loss_config_rejects_bad_eta() {
        let mut cfg = LossConfig::new(SmiKind::Flmi);
        cfg.eta = 1.5;
        assert!(cfg.validate().is_err());
        let (z, p) = random_instance(80);
        assert!(l_comb(&z, &p, &cfg).is_err());
    }
}
