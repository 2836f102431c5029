//! The aggregated property suite: every exhaustive and randomized law this
//! crate promises, bundled into one runnable report. The `check` CLI
//! subcommand executes it and the acceptance tests re-run the same checks,
//! so "the build is healthy" has exactly one definition.
//!
//! All randomized checks derive their instances from a caller-supplied
//! seed (default 0), so failures reproduce exactly.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{arr2, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel::{build_similarity_matrix, EmbeddingMatrix, KernelSpec, SimilarityMatrix};
use crate::loss::{
    finite_difference_check, l_comb, l_inter_value, l_intra_value, supcon_baseline, LossConfig,
    LossOp,
};
use crate::setfn::{
    check_monotonicity, check_submodularity, check_submodularity_fn, facility_location,
    generic_mutual_information, graph_cut, ClassPartition, GraphCutForm, SetFunctionSpec,
};
use crate::smi::{flmi, gcmi, SmiKind};

/// Tolerance of the closed-form-vs-generic mutual-information agreement.
pub const GCMI_AGREEMENT_TOL: f64 = 1e-9;

/// Tolerance of the combination-decomposition identity.
pub const DECOMPOSITION_TOL: f64 = 1e-12;

/// Tolerance of the hand-value fixtures.
pub const FIXTURE_TOL: f64 = 1e-12;

/// Gradient-check bounds: losses with max terms vs smooth losses.
pub const GRAD_TOL_PIECEWISE: f64 = 1e-4;
pub const GRAD_TOL_SMOOTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub millis: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub seed: u64,
    pub checks: Vec<PropertyCheck>,
    pub total_millis: u128,
}

impl PropertyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&PropertyCheck> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn find(&self, name: &str) -> Option<&PropertyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn random_embedding(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
    let data = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    EmbeddingMatrix::new(data).expect("finite random data")
}

fn random_similarity(rng: &mut ChaCha8Rng, n: usize) -> SimilarityMatrix {
    let z = random_embedding(rng, n, 6);
    build_similarity_matrix(&z, &KernelSpec::cosine(true)).expect("valid embedding")
}

/// Two disjoint nonempty subsets of `0..n`.
fn random_disjoint_pair(rng: &mut ChaCha8Rng, n: usize) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let a_len = rng.random_range(1..=(n / 2).max(1));
    let q_len = rng.random_range(1..=(n - a_len));
    let a: BTreeSet<usize> = idx[..a_len].iter().copied().collect();
    let q: BTreeSet<usize> = idx[a_len..a_len + q_len].iter().copied().collect();
    (a, q)
}

/// Compare a closed-form graph-cut mutual information against the generic
/// `f(A) + f(B) − f(A∪B)` construction over seeded random instances.
/// Returns the maximum absolute discrepancy, or a witness description on
/// the first disagreement beyond [`GCMI_AGREEMENT_TOL`].
///
/// Taking the closed form as a parameter lets tests prove the check has
/// teeth: a sign-flipped implementation must fail with a witness.
pub fn gcmi_agreement<F>(
    closed_form: F,
    seed: u64,
    cases: usize,
) -> std::result::Result<f64, String>
where
    F: Fn(&SimilarityMatrix, &BTreeSet<usize>, &BTreeSet<usize>, f64) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0_f64;
    for case in 0..cases {
        let n = rng.random_range(4..=10);
        let s = random_similarity(&mut rng, n);
        let (a, q) = random_disjoint_pair(&mut rng, n);
        for &lambda in &[0.0, 0.5, 1.0, 2.0] {
            let spec = SetFunctionSpec::graph_cut(lambda, GraphCutForm::FullSum);
            let generic = generic_mutual_information(&s, &spec, &a, &q)
                .map_err(|e| format!("case {case}: generic form failed: {e}"))?;
            let closed = closed_form(&s, &a, &q, lambda)
                .map_err(|e| format!("case {case}: closed form failed: {e}"))?;
            let err = (closed - generic).abs();
            max_err = max_err.max(err);
            if err > GCMI_AGREEMENT_TOL {
                return Err(format!(
                    "case {case}: closed {closed} vs generic {generic} \
                     (|Δ| = {err:.3e}) at λ = {lambda}, A = {a:?}, Q = {q:?}"
                ));
            }
        }
    }
    Ok(max_err)
}

fn timed<F: FnOnce() -> (bool, String)>(name: &str, body: F) -> PropertyCheck {
    let start = Instant::now();
    let (pass, detail) = body();
    PropertyCheck {
        name: name.to_string(),
        pass,
        detail,
        millis: start.elapsed().as_millis(),
    }
}

fn check_gcmi_agreement(seed: u64) -> (bool, String) {
    match gcmi_agreement(gcmi, seed, 50) {
        Ok(max_err) => (
            true,
            format!("50 instances × 4 λ values, max |closed − generic| = {max_err:.3e}"),
        ),
        Err(witness) => (false, witness),
    }
}

fn check_facility_location_laws(seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut worst_margin = f64::INFINITY;
    for case in 0..10 {
        let s = random_similarity(&mut rng, 6);
        let spec = SetFunctionSpec::facility_location();
        let sub = match check_submodularity(&s, &spec) {
            Ok(r) => r,
            Err(e) => return (false, format!("case {case}: {e}")),
        };
        let mono = match check_monotonicity(&s, &spec) {
            Ok(r) => r,
            Err(e) => return (false, format!("case {case}: {e}")),
        };
        worst_margin = worst_margin.min(sub.margin).min(mono.margin);
        if !sub.pass {
            return (
                false,
                format!(
                    "case {case}: submodularity violated at X = {:?}, Y = {:?} (margin {})",
                    sub.witness_x, sub.witness_y, sub.margin
                ),
            );
        }
        if !mono.pass {
            return (
                false,
                format!(
                    "case {case}: monotonicity violated at X = {:?}, Y = {:?} (margin {})",
                    mono.witness_x, mono.witness_y, mono.margin
                ),
            );
        }
    }
    (
        true,
        format!("10 matrices, |T| = 6, exhaustive; worst margin {worst_margin:.3e}"),
    )
}

fn check_graph_cut_submodular(seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut worst_margin = f64::INFINITY;
    for case in 0..5 {
        let s = random_similarity(&mut rng, 6);
        for &lambda in &[0.0, 0.5, 1.0, 1.5] {
            let spec = SetFunctionSpec::graph_cut(lambda, GraphCutForm::FullSum);
            let sub = match check_submodularity(&s, &spec) {
                Ok(r) => r,
                Err(e) => return (false, format!("case {case}, λ = {lambda}: {e}")),
            };
            worst_margin = worst_margin.min(sub.margin);
            if !sub.pass {
                return (
                    false,
                    format!(
                        "case {case}, λ = {lambda}: violated at X = {:?}, Y = {:?} (margin {})",
                        sub.witness_x, sub.witness_y, sub.margin
                    ),
                );
            }
        }
    }
    (
        true,
        format!(
            "5 matrices × λ ∈ {{0, 0.5, 1.0, 1.5}}, exhaustive; worst margin {worst_margin:.3e}"
        ),
    )
}

fn check_planted_counterexample(seed: u64) -> (bool, String) {
    // f(A) = (Σ_{i∈A} c_i)² with positive weights is strictly supermodular,
    // so the checker must reject it and produce a witness.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let c: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..2.0)).collect();
    let f = |set: &BTreeSet<usize>| -> Result<f64> {
        let total: f64 = set.iter().map(|&i| c[i]).sum();
        Ok(total * total)
    };
    match check_submodularity_fn(5, "squared_sum", 0.0, f) {
        Ok(report) => {
            if report.pass {
                (false, "supermodular plant was not detected".into())
            } else if report.witness_x.is_none() || report.witness_y.is_none() {
                (false, "violation reported without a witness pair".into())
            } else {
                (
                    true,
                    format!(
                        "rejected with witness X = {:?}, Y = {:?}, margin {:.3e}",
                        report.witness_x.unwrap(),
                        report.witness_y.unwrap(),
                        report.margin
                    ),
                )
            }
        }
        Err(e) => (false, format!("checker errored: {e}")),
    }
}

/// A 12-row, 8-dim batch with three classes of four, the last class novel.
fn gradient_instance(seed: u64) -> (EmbeddingMatrix, ClassPartition) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_embedding(&mut rng, 12, 8);
    let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
    let p = ClassPartition::from_labels(&labels)
        .expect("valid labels")
        .with_novel_ids([2usize]);
    (z, p)
}

fn check_gradients(seed: u64) -> (bool, String) {
    let mut worst_piecewise = 0.0_f64;
    let mut worst_smooth = 0.0_f64;
    for i in 0..20 {
        let (z, p) = gradient_instance(seed.wrapping_add(40 + i));
        for variant in [SmiKind::Flmi, SmiKind::Gcmi] {
            let cfg = LossConfig::new(variant);
            let err = match finite_difference_check(LossOp::Comb, &z, &p, &cfg, 1e-5) {
                Ok(e) => e,
                Err(e) => return (false, format!("instance {i}, {variant:?}: {e}")),
            };
            let (bound, worst) = match variant {
                SmiKind::Flmi => (GRAD_TOL_PIECEWISE, &mut worst_piecewise),
                SmiKind::Gcmi => (GRAD_TOL_SMOOTH, &mut worst_smooth),
            };
            *worst = worst.max(err);
            if err > bound {
                return (
                    false,
                    format!("instance {i}, {variant:?}: rel err {err:.3e} > {bound:.0e}"),
                );
            }
        }
    }
    (
        true,
        format!(
            "20 instances (n = 12, d = 8); max rel err: max-based {worst_piecewise:.3e} \
             (bound {GRAD_TOL_PIECEWISE:.0e}), smooth {worst_smooth:.3e} (bound {GRAD_TOL_SMOOTH:.0e})"
        ),
    )
}

fn check_decomposition(seed: u64) -> (bool, String) {
    let mut max_err = 0.0_f64;
    for i in 0..20 {
        let (z, p) = gradient_instance(seed.wrapping_add(80 + i));
        for variant in [SmiKind::Flmi, SmiKind::Gcmi] {
            for &eta in &[0.25, 0.5, 0.75] {
                let cfg = LossConfig {
                    eta,
                    ..LossConfig::new(variant)
                };
                let comb = match l_comb(&z, &p, &cfg) {
                    Ok(r) => r,
                    Err(e) => return (false, format!("instance {i}: {e}")),
                };
                let expected =
                    (1.0 - eta) * comb.term_breakdown.intra + eta * comb.term_breakdown.inter;
                let err = (comb.value - expected).abs();
                max_err = max_err.max(err);
                if err > DECOMPOSITION_TOL {
                    return (
                        false,
                        format!(
                            "instance {i}, {variant:?}, η = {eta}: |comb − recombined| = {err:.3e}"
                        ),
                    );
                }
            }
            // Extremes must be bitwise equal to the single-term losses.
            for (eta, take_intra) in [(0.0, true), (1.0, false)] {
                let cfg = LossConfig {
                    eta,
                    ..LossConfig::new(variant)
                };
                let comb = match l_comb(&z, &p, &cfg) {
                    Ok(r) => r,
                    Err(e) => return (false, format!("instance {i}: {e}")),
                };
                let single = if take_intra {
                    crate::loss::l_intra(&z, &p, &cfg)
                } else {
                    crate::loss::l_inter(&z, &p, &cfg)
                };
                let single = match single {
                    Ok(r) => r,
                    Err(e) => return (false, format!("instance {i}: {e}")),
                };
                if comb.value.to_bits() != single.value.to_bits() {
                    return (
                        false,
                        format!(
                            "instance {i}, {variant:?}, η = {eta}: extreme is not bitwise exact"
                        ),
                    );
                }
            }
        }
    }
    (
        true,
        format!("20 instances × 2 variants × η grid; max |Δ| = {max_err:.3e}, extremes bitwise"),
    )
}

fn fixture_matrix() -> SimilarityMatrix {
    SimilarityMatrix::from_values(
        arr2(&[[1.0, 0.8, 0.1], [0.8, 1.0, 0.2], [0.1, 0.2, 1.0]]),
        KernelSpec::cosine(true),
    )
    .expect("fixture is symmetric")
}

fn check_hand_fixtures() -> (bool, String) {
    let s = fixture_matrix();
    let set01: BTreeSet<usize> = [0, 1].into_iter().collect();
    let set0: BTreeSet<usize> = [0].into_iter().collect();
    let set1: BTreeSet<usize> = [1].into_iter().collect();
    let set2: BTreeSet<usize> = [2].into_iter().collect();
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: Result<f64>, want: f64| match got {
        Ok(v) if (v - want).abs() <= FIXTURE_TOL => {}
        Ok(v) => failures.push(format!("{name}: got {v}, want {want}")),
        Err(e) => failures.push(format!("{name}: {e}")),
    };
    expect(
        "facility_location({0,1})",
        facility_location(&s, &set01),
        2.2,
    );
    expect(
        "graph_cut({0}, λ=1, full_sum)",
        graph_cut(&s, &set0, 1.0, GraphCutForm::FullSum),
        0.9,
    );
    expect(
        "graph_cut({0}, λ=1, cut)",
        graph_cut(&s, &set0, 1.0, GraphCutForm::Cut),
        -0.1,
    );
    expect(
        "graph_cut({0,1}, λ=1, full_sum)",
        graph_cut(&s, &set01, 1.0, GraphCutForm::FullSum),
        0.3,
    );
    expect(
        "generic_mi(graph_cut, {0}, {1})",
        generic_mutual_information(
            &s,
            &SetFunctionSpec::graph_cut(1.0, GraphCutForm::FullSum),
            &set0,
            &set1,
        ),
        1.6,
    );
    expect("flmi({0,1}, {2}, λ=1)", flmi(&s, &set01, &set2, 1.0), 0.5);
    expect("gcmi({0}, {1}, λ=1)", gcmi(&s, &set0, &set1, 1.0), 1.6);
    expect(
        "graph_cut({0}) + graph_cut({1})",
        graph_cut(&s, &set0, 1.0, GraphCutForm::FullSum)
            .and_then(|a| Ok(a + graph_cut(&s, &set1, 1.0, GraphCutForm::FullSum)?)),
        1.9,
    );
    // Two-point loss fixtures in raw (unnormalized) mode.
    let s2 =
        SimilarityMatrix::from_values(arr2(&[[1.0, 0.8], [0.8, 1.0]]), KernelSpec::cosine(true))
            .expect("fixture is symmetric");
    let p2 = ClassPartition::from_labels(&[0, 1]).expect("two singletons");
    expect(
        "l_intra(gcmi, raw, two singletons)",
        l_intra_value(&s2, &p2, &LossConfig::raw(SmiKind::Gcmi)),
        -0.4,
    );
    expect(
        "l_intra(flmi, raw, two singletons)",
        l_intra_value(&s2, &p2, &LossConfig::raw(SmiKind::Flmi)),
        1.6,
    );
    let p2n = ClassPartition::from_labels(&[0, 1])
        .expect("two singletons")
        .with_novel_ids([1usize]);
    expect(
        "l_inter(gcmi, raw, base–novel singletons)",
        l_inter_value(&s2, &p2n, &LossConfig::raw(SmiKind::Gcmi)),
        1.6,
    );
    // Contrastive fixture: two identical pairs, orthogonal across classes,
    // τ = 1 → every anchor contributes ln(1 + 2e⁻¹).
    let z = EmbeddingMatrix::new(arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
        .expect("finite");
    match supcon_baseline(&z, &[0, 0, 1, 1], 1.0) {
        Ok(r) => {
            let want = (1.0 + 2.0 * (-1.0_f64).exp()).ln();
            if (r.value - want).abs() > FIXTURE_TOL {
                failures.push(format!("supcon fixture: got {}, want {want}", r.value));
            }
        }
        Err(e) => failures.push(format!("supcon fixture: {e}")),
    }
    if failures.is_empty() {
        (true, "12 hand-computed values, all within 1e-12".into())
    } else {
        (false, failures.join("; "))
    }
}

fn check_kernel_matrix_laws(seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(9));
    for case in 0..10 {
        let z = random_embedding(&mut rng, 8, 5);
        let s = match build_similarity_matrix(&z, &KernelSpec::cosine(true)) {
            Ok(s) => s,
            Err(e) => return (false, format!("case {case}: {e}")),
        };
        for i in 0..8 {
            if s.get(i, i) != 1.0 {
                return (
                    false,
                    format!("case {case}: diagonal ({i},{i}) = {}", s.get(i, i)),
                );
            }
            for j in 0..8 {
                let v = s.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return (false, format!("case {case}: S[{i},{j}] = {v} out of [0,1]"));
                }
                if s.get(i, j).to_bits() != s.get(j, i).to_bits() {
                    return (false, format!("case {case}: asymmetry at ({i},{j})"));
                }
            }
        }
    }
    (
        true,
        "10 matrices: unit diagonal, range [0,1], bitwise symmetry".into(),
    )
}

/// Run every check with instances derived from `seed`.
pub fn run_property_suite(seed: u64) -> PropertyReport {
    let start = Instant::now();
    let checks = vec![
        timed("gcmi_matches_generic", || check_gcmi_agreement(seed)),
        timed("facility_location_laws", || {
            check_facility_location_laws(seed)
        }),
        timed("graph_cut_full_sum_submodular", || {
            check_graph_cut_submodular(seed)
        }),
        timed("planted_counterexample_rejected", || {
            check_planted_counterexample(seed)
        }),
        timed("gradient_finite_difference", || check_gradients(seed)),
        timed("comb_decomposition", || check_decomposition(seed)),
        timed("hand_fixtures", check_hand_fixtures),
        timed("kernel_matrix_laws", || check_kernel_matrix_laws(seed)),
    ];
    PropertyReport {
        seed,
        checks,
        total_millis: start.elapsed().as_millis(),
    }
}
