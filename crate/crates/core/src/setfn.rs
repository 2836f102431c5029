//! Submodular set functions over a similarity matrix, and exhaustive
//! verification of their defining inequalities on small ground sets.
//!
//! Both functions are parameterized by a symmetric similarity matrix `S`
//! whose rows index a ground set `T = {0, …, n−1}`:
//!
//! * facility location: `f(A) = Σ_{i∈T} max_{j∈A} S_ij` — monotone
//!   submodular for `S ≥ 0`;
//! * graph cut (`full_sum` form): `f(A) = Σ_{i∈A} Σ_{j∈T} S_ij −
//!   λ Σ_{i∈A} Σ_{j∈A} S_ij` — submodular for `λ ≥ 0`, monotone only for
//!   small enough λ. The classical `cut` form replaces the first term with
//!   `Σ_{i∈A} Σ_{j∈T∖A} S_ij`; the two differ exactly by
//!   `(1−λ)/… Σ_{i,j∈A} S_ij`-style within-set mass and are both exposed.
//!
//! [`check_submodularity`] and [`check_monotonicity`] enumerate *all* subset
//! pairs of ground sets up to [`MAX_ENUM_GROUND`] elements, so a pass is a
//! proof for the given instance rather than a spot check.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::SimilarityMatrix;

/// Largest ground set the exhaustive checks will enumerate (2^n subsets).
pub const MAX_ENUM_GROUND: usize = 10;

/// Tolerance for the submodularity / monotonicity inequalities.
pub const CHECK_TOL: f64 = 1e-9;

/// The ground set: element indices into the similarity matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundSet {
    n: usize,
}

impl GroundSet {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySet {
                context: "ground set".into(),
            });
        }
        Ok(GroundSet { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        0..self.n
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.n
    }
}

/// A labeling of ground-set elements into disjoint classes, each class
/// belonging to either the base group or the novel group.
///
/// Classes are keyed by an integer id; iteration order is always ascending
/// id (`BTreeMap`), which keeps every sum over classes deterministic. The
/// partition need not cover every ground-set element — a mini-batch may
/// contain rows outside all tracked classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    classes: BTreeMap<usize, BTreeSet<usize>>,
    novel_ids: BTreeSet<usize>,
    ground_size: usize,
}

impl ClassPartition {
    /// Build from per-element labels; element `i` gets label `labels[i]`.
    /// All classes start in the base group; see [`Self::with_novel_ids`].
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptySet {
                context: "partition labels".into(),
            });
        }
        let mut classes: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (i, &lab) in labels.iter().enumerate() {
            classes.entry(lab).or_default().insert(i);
        }
        Ok(ClassPartition {
            classes,
            novel_ids: BTreeSet::new(),
            ground_size: labels.len(),
        })
    }

    /// Build from explicit per-class member sets. Classes must be disjoint
    /// and members must lie in `0..ground_size`.
    pub fn from_classes(
        classes: BTreeMap<usize, BTreeSet<usize>>,
        ground_size: usize,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (&id, members) in &classes {
            if members.is_empty() {
                return Err(Error::EmptySet {
                    context: format!("class {id}"),
                });
            }
            for &m in members {
                if m >= ground_size {
                    return Err(Error::OutOfBounds {
                        index: m,
                        size: ground_size,
                    });
                }
                if !seen.insert(m) {
                    return Err(Error::Domain(format!(
                        "element {m} appears in more than one class"
                    )));
                }
            }
        }
        Ok(ClassPartition {
            classes,
            novel_ids: BTreeSet::new(),
            ground_size,
        })
    }

    /// Mark the given class ids as novel; all others stay base. Ids that
    /// name no class in this partition are ignored, since a mini-batch may
    /// simply not contain every novel class.
    pub fn with_novel_ids<I: IntoIterator<Item = usize>>(mut self, ids: I) -> Self {
        self.novel_ids = ids
            .into_iter()
            .filter(|id| self.classes.contains_key(id))
            .collect();
        self
    }

    pub fn ground_size(&self) -> usize {
        self.ground_size
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    /// Class ids in the base group, ascending.
    pub fn base_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes
            .keys()
            .copied()
            .filter(move |id| !self.novel_ids.contains(id))
    }

    /// Class ids in the novel group, ascending.
    pub fn novel_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.novel_ids.iter().copied()
    }

    pub fn is_novel(&self, class: usize) -> bool {
        self.novel_ids.contains(&class)
    }

    pub fn has_novel(&self) -> bool {
        !self.novel_ids.is_empty()
    }

    pub fn members(&self, class: usize) -> Option<&BTreeSet<usize>> {
        self.classes.get(&class)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Ascending iterator over `(class id, members)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &BTreeSet<usize>)> {
        self.classes.iter().map(|(&k, v)| (k, v))
    }

    /// Label of element `i`, if it belongs to any class.
    pub fn label_of(&self, i: usize) -> Option<usize> {
        self.classes
            .iter()
            .find(|(_, members)| members.contains(&i))
            .map(|(&id, _)| id)
    }
}

/// Which graph-cut variant to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphCutForm {
    /// `Σ_{i∈A} Σ_{j∈T} S_ij − λ Σ_{i,j∈A} S_ij`. Submodular for all λ ≥ 0.
    #[default]
    FullSum,
    /// `Σ_{i∈A} Σ_{j∈T∖A} S_ij − λ Σ_{i,j∈A} S_ij`. The classical cut;
    /// non-monotone already at moderate λ.
    Cut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetFunctionKind {
    FacilityLocation,
    GraphCut,
}

impl std::fmt::Display for SetFunctionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SetFunctionKind::FacilityLocation => write!(f, "facility_location"),
            SetFunctionKind::GraphCut => write!(f, "graph_cut"),
        }
    }
}

fn default_lambda() -> f64 {
    1.0
}

/// A concrete set-function choice: which family, its λ, and (for graph cut)
/// which form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetFunctionSpec {
    pub kind: SetFunctionKind,
    /// Redundancy penalty for graph cut; ignored by facility location.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub gc_form: GraphCutForm,
}

impl SetFunctionSpec {
    pub fn facility_location() -> Self {
        SetFunctionSpec {
            kind: SetFunctionKind::FacilityLocation,
            lambda: default_lambda(),
            gc_form: GraphCutForm::default(),
        }
    }

    pub fn graph_cut(lambda: f64, gc_form: GraphCutForm) -> Self {
        SetFunctionSpec {
            kind: SetFunctionKind::GraphCut,
            lambda,
            gc_form,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "graph-cut lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Evaluate this function on `set`.
    pub fn evaluate(&self, s: &SimilarityMatrix, set: &BTreeSet<usize>) -> Result<f64> {
        self.validate()?;
        match self.kind {
            SetFunctionKind::FacilityLocation => facility_location(s, set),
            SetFunctionKind::GraphCut => graph_cut(s, set, self.lambda, self.gc_form),
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

/// Facility location `f(A) = Σ_{i∈T} max_{j∈A} S_ij`.
///
/// Errors on the empty set: the natural extension `f(∅) = 0` is applied only
/// inside the enumeration checks, where the empty set is a legitimate subset.
pub fn facility_location(s: &SimilarityMatrix, set: &BTreeSet<usize>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet {
            context: "facility_location".into(),
        });
    }
    check_bounds(s, set)?;
    let mut total = 0.0;
    for i in 0..s.n() {
        let mut best = f64::NEG_INFINITY;
        for &j in set {
            let v = s.get(i, j);
            if v > best {
                best = v;
            }
        }
        total += best;
    }
    Ok(total)
}

/// Graph cut in either form; see [`GraphCutForm`]. `f(∅) = 0` exactly.
pub fn graph_cut(
    s: &SimilarityMatrix,
    set: &BTreeSet<usize>,
    lambda: f64,
    form: GraphCutForm,
) -> Result<f64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "graph-cut lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    check_bounds(s, set)?;
    let mut cross = 0.0;
    for &i in set {
        for j in 0..s.n() {
            let include = match form {
                GraphCutForm::FullSum => true,
                GraphCutForm::Cut => !set.contains(&j),
            };
            if include {
                cross += s.get(i, j);
            }
        }
    }
    let mut within = 0.0;
    for &i in set {
        for &j in set {
            within += s.get(i, j);
        }
    }
    Ok(cross - lambda * within)
}

/// Total information of a partition under `spec`: `Σ_k f(A_k)` over classes.
pub fn total_information(
    s: &SimilarityMatrix,
    partition: &ClassPartition,
    spec: &SetFunctionSpec,
) -> Result<f64> {
    if partition.ground_size() != s.n() {
        return Err(Error::Shape(format!(
            "partition covers ground size {} but similarity matrix has {} rows",
            partition.ground_size(),
            s.n()
        )));
    }
    let mut total = 0.0;
    for (_, members) in partition.iter() {
        total += spec.evaluate(s, members)?;
    }
    Ok(total)
}

/// Generic submodular mutual information `I_f(A; B) = f(A) + f(B) − f(A∪B)`.
///
/// Empty sets are legal exactly where the underlying function permits them:
/// graph cut extends to `f(∅) = 0` (so `I(A, ∅) = 0`), while facility
/// location propagates its empty-set error.
pub fn generic_mutual_information(
    s: &SimilarityMatrix,
    spec: &SetFunctionSpec,
    a: &BTreeSet<usize>,
    b: &BTreeSet<usize>,
) -> Result<f64> {
    let union: BTreeSet<usize> = a.union(b).copied().collect();
    Ok(spec.evaluate(s, a)? + spec.evaluate(s, b)? - spec.evaluate(s, &union)?)
}

/// Outcome of one exhaustive inequality check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    /// Human-readable function label, e.g. `graph_cut(full_sum)`.
    pub function: String,
    pub lambda: f64,
    pub ground_size: usize,
    pub pass: bool,
    /// Violating pair (X, Y) when `pass` is false.
    pub witness_x: Option<Vec<usize>>,
    pub witness_y: Option<Vec<usize>>,
    /// Worst signed slack observed: `min f(X)+f(Y)−f(X∪Y)−f(X∩Y)` for
    /// submodularity, `min f(Y)−f(X)` over nested pairs for monotonicity.
    /// Negative beyond tolerance means violation.
    pub margin: f64,
}

fn mask_to_set(mask: u32) -> BTreeSet<usize> {
    let mut s = BTreeSet::new();
    for b in 0..32 {
        if mask & (1 << b) != 0 {
            s.insert(b as usize);
        }
    }
    s
}

fn table_of_values<F>(n: usize, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&BTreeSet<usize>) -> Result<f64>,
{
    let mut table = vec![0.0; 1 << n];
    for mask in 1..(1u32 << n) {
        table[mask as usize] = f(&mask_to_set(mask))?;
    }
    // Empty set: every function here extends naturally to 0.
    table[0] = 0.0;
    Ok(table)
}

/// Exhaustively verify `f(X) + f(Y) ≥ f(X∪Y) + f(X∩Y)` for *all* subset
/// pairs of a ground set with `n` elements. `f(∅)` is taken to be 0.
pub fn check_submodularity_fn<F>(n: usize, label: &str, lambda: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&BTreeSet<usize>) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::EmptySet {
            context: "submodularity check".into(),
        });
    }
    if n > MAX_ENUM_GROUND {
        return Err(Error::GroundSetTooLarge {
            size: n,
            limit: MAX_ENUM_GROUND,
        });
    }
    let table = table_of_values(n, &f)?;
    let mut margin = f64::INFINITY;
    let mut witness = None;
    for x in 0..(1u32 << n) {
        for y in 0..(1u32 << n) {
            let slack = table[x as usize] + table[y as usize]
                - table[(x | y) as usize]
                - table[(x & y) as usize];
            if slack < margin {
                margin = slack;
                if slack < -CHECK_TOL {
                    witness = Some((x, y));
                }
            }
        }
    }
    let pass = margin >= -CHECK_TOL;
    let (witness_x, witness_y) = match witness {
        Some((x, y)) if !pass => (
            Some(mask_to_set(x).into_iter().collect()),
            Some(mask_to_set(y).into_iter().collect()),
        ),
        _ => (None, None),
    };
    Ok(CheckReport {
        function: label.to_string(),
        lambda,
        ground_size: n,
        pass,
        witness_x,
        witness_y,
        margin,
    })
}

/// Exhaustively verify `f(X) ≤ f(Y)` for all nested pairs `X ⊆ Y`.
pub fn check_monotonicity_fn<F>(n: usize, label: &str, lambda: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&BTreeSet<usize>) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::EmptySet {
            context: "monotonicity check".into(),
        });
    }
    if n > MAX_ENUM_GROUND {
        return Err(Error::GroundSetTooLarge {
            size: n,
            limit: MAX_ENUM_GROUND,
        });
    }
    let table = table_of_values(n, &f)?;
    let mut margin = f64::INFINITY;
    let mut witness = None;
    for y in 0..(1u32 << n) {
        // Enumerate strict submasks of y, plus the empty set.
        let mut x = y;
        loop {
            x = x.wrapping_sub(1) & y;
            let slack = table[y as usize] - table[x as usize];
            if slack < margin {
                margin = slack;
                if slack < -CHECK_TOL {
                    witness = Some((x, y));
                }
            }
            if x == 0 {
                break;
            }
        }
    }
    let pass = margin >= -CHECK_TOL;
    let (witness_x, witness_y) = match witness {
        Some((x, y)) if !pass => (
            Some(mask_to_set(x).into_iter().collect()),
            Some(mask_to_set(y).into_iter().collect()),
        ),
        _ => (None, None),
    };
    Ok(CheckReport {
        function: label.to_string(),
        lambda,
        ground_size: n,
        pass,
        witness_x,
        witness_y,
        margin,
    })
}

/// [`check_submodularity_fn`] specialized to a [`SetFunctionSpec`] over a
/// similarity matrix.
pub fn check_submodularity(s: &SimilarityMatrix, spec: &SetFunctionSpec) -> Result<CheckReport> {
    spec.validate()?;
    let label = match spec.kind {
        SetFunctionKind::FacilityLocation => "facility_location".to_string(),
        SetFunctionKind::GraphCut => format!(
            "graph_cut({})",
            match spec.gc_form {
                GraphCutForm::FullSum => "full_sum",
                GraphCutForm::Cut => "cut",
            }
        ),
    };
    check_submodularity_fn(s.n(), &label, spec.lambda, |set| {
        if set.is_empty() {
            Ok(0.0)
        } else {
            spec.evaluate(s, set)
        }
    })
}

/// [`check_monotonicity_fn`] specialized to a [`SetFunctionSpec`].
pub fn check_monotonicity(s: &SimilarityMatrix, spec: &SetFunctionSpec) -> Result<CheckReport> {
    spec.validate()?;
    let label = match spec.kind {
        SetFunctionKind::FacilityLocation => "facility_location".to_string(),
        SetFunctionKind::GraphCut => format!(
            "graph_cut({})",
            match spec.gc_form {
                GraphCutForm::FullSum => "full_sum",
                GraphCutForm::Cut => "cut",
            }
        ),
    };
    check_monotonicity_fn(s.n(), &label, spec.lambda, |set| {
        if set.is_empty() {
            Ok(0.0)
        } else {
            spec.evaluate(s, set)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_similarity_matrix, EmbeddingMatrix, KernelSpec};
    use ndarray::{arr2, Array2};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    /// 3×3 fixture used across the value tests.
    fn fixture() -> SimilarityMatrix {
        let values = arr2(&[[1.0, 0.8, 0.1], [0.8, 1.0, 0.2], [0.1, 0.2, 1.0]]);
        SimilarityMatrix::from_values(values, KernelSpec::cosine(true)).unwrap()
    }

    fn random_similarity(n: usize, seed: u64) -> SimilarityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
        let z = EmbeddingMatrix::new(data).unwrap();
        build_similarity_matrix(&z, &KernelSpec::cosine(true)).unwrap()
    }

    #[test]
    fn facility_location_hand_value() {
        // A = {0,1}: row maxes are max(1,.8)=1, max(.8,1)=1, max(.1,.2)=.2
        let s = fixture();
        let v = facility_location(&s, &set(&[0, 1])).unwrap();
        assert!((v - 2.2).abs() < 1e-12);
    }

    #[test]
    fn facility_location_full_ground_sums_row_maxima() {
        let s = fixture();
        let v = facility_location(&s, &set(&[0, 1, 2])).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn facility_location_rejects_empty_set() {
        let s = fixture();
        assert!(matches!(
            facility_location(&s, &BTreeSet::new()),
            Err(Error::EmptySet { .. })
        ));
    }

    #[test]
    fn facility_location_of_full_set_is_trace() {
        let s = random_similarity(6, 40);
        let all: BTreeSet<usize> = (0..6).collect();
        let v = facility_location(&s, &all).unwrap();
        assert!((v - 6.0).abs() < 1e-12, "diagonal is 1.0 and maximal");
    }

    #[test]
    fn facility_location_unchanged_by_duplicate_point() {
        let mut values = fixture().values().clone();
        // Make row/col 2 a duplicate of row/col 1.
        for t in 0..3 {
            values[[2, t]] = values[[1, t]];
            values[[t, 2]] = values[[t, 1]];
        }
        values[[2, 2]] = 1.0;
        values[[2, 1]] = 1.0;
        values[[1, 2]] = 1.0;
        let s = SimilarityMatrix::from_values(values, KernelSpec::cosine(true)).unwrap();
        let with = facility_location(&s, &set(&[0, 1, 2])).unwrap();
        let without = facility_location(&s, &set(&[0, 1])).unwrap();
        assert!((with - without).abs() < 1e-12);
    }

    #[test]
    fn graph_cut_of_empty_set_is_zero() {
        let s = fixture();
        for form in [GraphCutForm::FullSum, GraphCutForm::Cut] {
            assert_eq!(graph_cut(&s, &BTreeSet::new(), 1.0, form).unwrap(), 0.0);
        }
    }

    #[test]
    fn graph_cut_hand_values() {
        // f({0}) full_sum λ=1: row sum (1+.8+.1) − 1·1 = 0.9
        let s = fixture();
        let v = graph_cut(&s, &set(&[0]), 1.0, GraphCutForm::FullSum).unwrap();
        assert!((v - 0.9).abs() < 1e-12);
        // cut form drops the within-set mass from the cross sum:
        // (.8+.1) − 1·1 = −0.1
        let v = graph_cut(&s, &set(&[0]), 1.0, GraphCutForm::Cut).unwrap();
        assert!((v - (-0.1)).abs() < 1e-12);
        // f({0,1}) full_sum λ=1: cross (1.9+2.0) − within (1+.8+.8+1) = 0.3
        let v = graph_cut(&s, &set(&[0, 1]), 1.0, GraphCutForm::FullSum).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
    }

    #[test]
    fn graph_cut_forms_differ_by_within_set_mass() {
        let s = random_similarity(6, 2);
        for lambda in [0.0, 0.5, 1.0, 1.5] {
            for items in [vec![0], vec![1, 3], vec![0, 2, 4, 5]] {
                let a = set(&items);
                let full = graph_cut(&s, &a, lambda, GraphCutForm::FullSum).unwrap();
                let cut = graph_cut(&s, &a, lambda, GraphCutForm::Cut).unwrap();
                let mut within = 0.0;
                for &i in &a {
                    for &j in &a {
                        within += s.get(i, j);
                    }
                }
                assert!((full - cut - within).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn graph_cut_rejects_negative_lambda() {
        let s = fixture();
        assert!(graph_cut(&s, &set(&[0]), -0.5, GraphCutForm::FullSum).is_err());
    }

    #[test]
    fn total_information_sums_over_classes() {
        let s = fixture();
        let p = ClassPartition::from_labels(&[0, 0, 1]).unwrap();
        let spec = SetFunctionSpec::facility_location();
        let ti = total_information(&s, &p, &spec).unwrap();
        let f01 = facility_location(&s, &set(&[0, 1])).unwrap();
        let f2 = facility_location(&s, &set(&[2])).unwrap();
        assert!((ti - (f01 + f2)).abs() < 1e-12);
    }

    #[test]
    fn total_information_graph_cut_hand_value() {
        // Singleton classes {0} and {1} on a 2-element slice of the fixture:
        // f({0}) = 0.9, f({1}) = 1.0, total 1.9 over the 3-point ground set.
        let s = fixture();
        let mut classes = BTreeMap::new();
        classes.insert(0, set(&[0]));
        classes.insert(1, set(&[1]));
        classes.insert(2, set(&[2]));
        let p = ClassPartition::from_classes(classes, 3).unwrap();
        let spec = SetFunctionSpec::graph_cut(1.0, GraphCutForm::FullSum);
        let f0 = graph_cut(&s, &set(&[0]), 1.0, GraphCutForm::FullSum).unwrap();
        let f1 = graph_cut(&s, &set(&[1]), 1.0, GraphCutForm::FullSum).unwrap();
        assert!((f0 - 0.9).abs() < 1e-12);
        assert!((f1 - 1.0).abs() < 1e-12);
        let ti = total_information(&s, &p, &spec).unwrap();
        let f2 = graph_cut(&s, &set(&[2]), 1.0, GraphCutForm::FullSum).unwrap();
        assert!((ti - (1.9 + f2)).abs() < 1e-12);
    }

    #[test]
    fn facility_location_is_submodular_and_monotone() {
        for seed in 0..5u64 {
            let s = random_similarity(7, seed);
            let spec = SetFunctionSpec::facility_location();
            let sub = check_submodularity(&s, &spec).unwrap();
            assert!(sub.pass, "seed {seed}: margin {}", sub.margin);
            let mono = check_monotonicity(&s, &spec).unwrap();
            assert!(mono.pass, "seed {seed}: margin {}", mono.margin);
        }
    }

    #[test]
    fn graph_cut_full_sum_is_submodular_for_nonneg_lambda() {
        for seed in 0..3u64 {
            let s = random_similarity(6, 10 + seed);
            for lambda in [0.0, 0.5, 1.0, 1.5] {
                let spec = SetFunctionSpec::graph_cut(lambda, GraphCutForm::FullSum);
                let rep = check_submodularity(&s, &spec).unwrap();
                assert!(rep.pass, "seed {seed} λ={lambda}: margin {}", rep.margin);
            }
        }
    }

    #[test]
    fn graph_cut_cut_form_is_submodular_but_not_monotone() {
        let s = random_similarity(6, 20);
        let spec = SetFunctionSpec::graph_cut(1.0, GraphCutForm::Cut);
        let sub = check_submodularity(&s, &spec).unwrap();
        assert!(sub.pass, "margin {}", sub.margin);
        let mono = check_monotonicity(&s, &spec).unwrap();
        // With λ=1 and unit diagonal, adding an element to the full ground
        // set's complement always loses its self-similarity: f drops.
        assert!(!mono.pass, "cut form unexpectedly monotone");
        assert!(mono.witness_x.is_some() && mono.witness_y.is_some());
    }

    #[test]
    fn planted_supermodular_function_fails_the_check() {
        // f(A) = (Σ_{i∈A} c_i)² with positive weights is strictly
        // supermodular, so the exhaustive check must find a witness.
        let c = [1.0, 2.0, 0.5, 1.5];
        let rep = check_submodularity_fn(4, "planted_square", 0.0, |a| {
            Ok(a.iter().map(|&i| c[i]).sum::<f64>().powi(2))
        })
        .unwrap();
        assert!(!rep.pass);
        assert!(rep.margin < -CHECK_TOL);
        let x: BTreeSet<usize> = rep.witness_x.unwrap().into_iter().collect();
        let y: BTreeSet<usize> = rep.witness_y.unwrap().into_iter().collect();
        // Replay the witness against the inequality.
        let f = |a: &BTreeSet<usize>| a.iter().map(|&i| c[i]).sum::<f64>().powi(2);
        let union: BTreeSet<usize> = x.union(&y).copied().collect();
        let inter: BTreeSet<usize> = x.intersection(&y).copied().collect();
        assert!(f(&x) + f(&y) < f(&union) + f(&inter) - CHECK_TOL);
    }

    #[test]
    fn check_rejects_oversized_ground_set() {
        assert!(matches!(
            check_submodularity_fn(MAX_ENUM_GROUND + 1, "too_big", 0.0, |_| Ok(0.0)),
            Err(Error::GroundSetTooLarge { .. })
        ));
    }

    #[test]
    fn generic_mi_hand_value_graph_cut() {
        // I({0};{1}) under GC full_sum λ=1: 0.9 + 1.0 − 0.3 = 1.6.
        let s = fixture();
        let spec = SetFunctionSpec::graph_cut(1.0, GraphCutForm::FullSum);
        let mi = generic_mutual_information(&s, &spec, &set(&[0]), &set(&[1])).unwrap();
        assert!((mi - 1.6).abs() < 1e-12);
    }

    #[test]
    fn generic_mi_of_disjoint_singletons() {
        // I({0};{1}) under FL: f({0})+f({1})−f({0,1})
        let s = fixture();
        let spec = SetFunctionSpec::facility_location();
        let mi = generic_mutual_information(&s, &spec, &set(&[0]), &set(&[1])).unwrap();
        let expect = facility_location(&s, &set(&[0])).unwrap()
            + facility_location(&s, &set(&[1])).unwrap()
            - facility_location(&s, &set(&[0, 1])).unwrap();
        assert!((mi - expect).abs() < 1e-12);
        assert!(mi >= -1e-12, "MI of a monotone submodular f is nonnegative");
    }

    #[test]
    fn generic_mi_is_symmetric() {
        let s = random_similarity(6, 30);
        let spec = SetFunctionSpec::graph_cut(1.0, GraphCutForm::FullSum);
        let a = set(&[0, 2]);
        let b = set(&[1, 4, 5]);
        let ab = generic_mutual_information(&s, &spec, &a, &b).unwrap();
        let ba = generic_mutual_information(&s, &spec, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn generic_mi_with_empty_set_is_zero_for_graph_cut() {
        let s = fixture();
        let spec = SetFunctionSpec::graph_cut(1.0, GraphCutForm::FullSum);
        let mi = generic_mutual_information(&s, &spec, &set(&[0, 2]), &BTreeSet::new()).unwrap();
        assert_eq!(mi, 0.0);
        // Facility location has no empty-set extension outside the checks.
        let fl = SetFunctionSpec::facility_location();
        assert!(generic_mutual_information(&s, &fl, &set(&[0]), &BTreeSet::new()).is_err());
    }

    #[test]
    fn partition_from_labels_groups_indices() {
        let p = ClassPartition::from_labels(&[2, 0, 2, 1]).unwrap();
        assert_eq!(p.n_classes(), 3);
        assert_eq!(p.members(2).unwrap(), &set(&[0, 2]));
        let ids: Vec<usize> = p.class_ids().collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(p.label_of(3), Some(1));
        assert_eq!(p.label_of(4), None);
    }

    #[test]
    fn novel_group_membership() {
        let p = ClassPartition::from_labels(&[0, 0, 1, 2])
            .unwrap()
            .with_novel_ids([2, 9]);
        assert!(p.is_novel(2));
        assert!(!p.is_novel(0));
        // Id 9 names no class here, so it is dropped.
        let novel: Vec<usize> = p.novel_ids().collect();
        assert_eq!(novel, vec![2]);
        let base: Vec<usize> = p.base_ids().collect();
        assert_eq!(base, vec![0, 1]);
    }

    #[test]
    fn partition_rejects_overlapping_classes() {
        let mut classes = BTreeMap::new();
        classes.insert(0, set(&[0, 1]));
        classes.insert(1, set(&[1, 2]));
        assert!(ClassPartition::from_classes(classes, 3).is_err());
    }

    #[test]
    fn set_function_spec_json_round_trip() {
        let spec = SetFunctionSpec::graph_cut(0.5, GraphCutForm::Cut);
        let text = serde_json::to_string(&spec).unwrap();
        let back: SetFunctionSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        // Defaults: lambda 1.0, full_sum.
        let d: SetFunctionSpec = serde_json::from_str(r#"{"kind":"facility_location"}"#).unwrap();
        assert_eq!(d.lambda, 1.0);
        assert_eq!(d.gc_form, GraphCutForm::FullSum);
    }
}
