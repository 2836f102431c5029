//! Seeded two-stage training: base training on abundant base-class data,
//! then few-shot adaptation on K-shot pools of every class, with an
//! optional combinatorial or contrastive loss next to the classifier.
//!
//! The classifier is a prototype softmax: logits are shifted-cosine
//! similarities between an embedding and per-class mean embeddings, scaled
//! by a fixed temperature. During training the prototypes are batch-local
//! and gradients flow through them; at evaluation time they are recomputed
//! from the full training pool of the stage.
//!
//! Everything is deterministic: batches come from a seeded generator, the
//! loop is single-threaded, and re-running any configuration reproduces
//! identical weights and logs.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample as index_sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FewShotTask, Split};
use crate::error::{Error, Result};
use crate::head::{Forward, ProjectionHead};
use crate::kernel::{build_similarity_matrix, cosine_gradient, cosine_similarity, KernelSpec};
use crate::loss::{
    l_comb, supcon_baseline, total_objective, LossConfig, LossResult, TermBreakdown,
};
use crate::setfn::ClassPartition;

/// Softmax temperature of the prototype classifier.
pub const CLASSIFIER_TEMPERATURE: f64 = 0.1;

/// Fixed kernel for classification scores and cluster statistics, so these
/// numbers are comparable across arms regardless of each arm's loss kernel.
pub fn metrics_kernel() -> KernelSpec {
    KernelSpec::cosine(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Adapt,
}

/// What the adaptation stage optimizes next to the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptObjective {
    /// Plain fine-tuning: classification loss only.
    #[default]
    CeOnly,
    /// Classification plus a supervised-contrastive term.
    Supcon { temperature: f64 },
    /// Classification plus the combinatorial loss.
    Comb(LossConfig),
}

impl AdaptObjective {
    pub fn validate(&self) -> Result<()> {
        match self {
            AdaptObjective::CeOnly => Ok(()),
            AdaptObjective::Supcon { temperature } => {
                if !(*temperature > 0.0) || !temperature.is_finite() {
                    return Err(Error::Config(format!(
                        "supcon temperature must be positive, got {temperature}"
                    )));
                }
                Ok(())
            }
            AdaptObjective::Comb(cfg) => cfg.validate(),
        }
    }
}

fn default_comb_weight() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Ignored (must be `ce_only`) in the base stage.
    #[serde(default)]
    pub loss: AdaptObjective,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Scale on the non-classifier loss term.
    #[serde(default = "default_comb_weight")]
    pub comb_weight: f64,
    /// Adaptation only: keep every base-class row in the pool instead of
    /// subsampling base classes down to K shots.
    #[serde(default)]
    pub abundant_base: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (losses and prototypes need company)".into(),
            ));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !self.comb_weight.is_finite() || self.comb_weight < 0.0 {
            return Err(Error::Config(format!(
                "comb_weight must be finite and nonnegative, got {}",
                self.comb_weight
            )));
        }
        self.loss.validate()
    }
}

/// Per-class mean embeddings, keyed by class id.
#[derive(Clone, Debug)]
pub struct Prototypes {
    map: std::collections::BTreeMap<usize, Array1<f64>>,
}

impl Prototypes {
    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.keys().copied()
    }

    pub fn get(&self, class: usize) -> Option<&Array1<f64>> {
        self.map.get(&class)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Mean embedding of every class in `split`, under `head`.
pub fn class_prototypes(head: &ProjectionHead, split: &Split) -> Result<Prototypes> {
    if split.is_empty() {
        return Err(Error::EmptySet {
            context: "prototype pool".into(),
        });
    }
    let fwd = head.forward(&split.x)?;
    let mut map = std::collections::BTreeMap::new();
    for (class, rows) in split.by_class() {
        let mut mean = Array1::zeros(head.embed_dim());
        for &r in &rows {
            mean += &fwd.z.row(r);
        }
        mean /= rows.len() as f64;
        map.insert(class, mean);
    }
    Ok(Prototypes { map })
}

/// Classify one input row: winner and the per-class shifted-cosine scores
/// (ascending class-id order). Ties go to the lowest class id.
pub fn classify(
    head: &ProjectionHead,
    x: ArrayView1<'_, f64>,
    protos: &Prototypes,
) -> Result<(usize, Vec<f64>)> {
    if protos.is_empty() {
        return Err(Error::EmptySet {
            context: "prototype set".into(),
        });
    }
    let mut row = Array2::zeros((1, x.len()));
    row.row_mut(0).assign(&x);
    let fwd = head.forward(&row)?;
    let z = fwd.z.row(0);
    let mut best_class = usize::MAX;
    let mut best_score = f64::NEG_INFINITY;
    let mut scores = Vec::with_capacity(protos.len());
    for (&class, proto) in &protos.map {
        let score = (1.0 + cosine_similarity(z, proto.view())?) / 2.0;
        scores.push(score);
        if score > best_score {
            best_score = score;
            best_class = class;
        }
    }
    Ok((best_class, scores))
}

/// Classify every row of a matrix against fixed prototypes.
pub fn classify_rows(
    head: &ProjectionHead,
    x: &Array2<f64>,
    protos: &Prototypes,
) -> Result<Vec<usize>> {
    if protos.is_empty() {
        return Err(Error::EmptySet {
            context: "prototype set".into(),
        });
    }
    let fwd = head.forward(x)?;
    let mut out = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let z = fwd.z.row(i);
        let mut best_class = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for (&class, proto) in &protos.map {
            let score = (1.0 + cosine_similarity(z, proto.view())?) / 2.0;
            if score > best_score {
                best_score = score;
                best_class = class;
            }
        }
        out.push(best_class);
    }
    Ok(out)
}

/// Prototype-softmax cross-entropy over a batch, with the prototypes
/// computed from the batch itself so the gradient flows through them.
///
/// Returns the loss and `∂L/∂z` for the *normalized* embeddings `z`.
pub(crate) fn prototype_ce(z: &Array2<f64>, labels: &[usize]) -> Result<LossResult> {
    let n = z.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Domain(
            "prototype cross-entropy needs at least two classes in the batch".into(),
        ));
    }
    let mut protos: Vec<Array1<f64>> = Vec::with_capacity(classes.len());
    for &c in &classes {
        let rows = &by_class[&c];
        let mut mean = Array1::zeros(z.ncols());
        for &r in rows {
            mean += &z.row(r);
        }
        mean /= rows.len() as f64;
        protos.push(mean);
    }
    let tau = CLASSIFIER_TEMPERATURE;
    // logits[i][c] = (1 + cos(z_i, p_c)) / (2τ)
    let mut logits = Array2::zeros((n, classes.len()));
    for i in 0..n {
        for (ci, proto) in protos.iter().enumerate() {
            let cos = cosine_similarity(z.row(i), proto.view())?;
            logits[[i, ci]] = (1.0 + cos) / (2.0 * tau);
        }
    }
    let mut value = 0.0;
    let mut dlogits = Array2::zeros((n, classes.len()));
    for i in 0..n {
        let yi = classes
            .iter()
            .position(|&c| c == labels[i])
            .expect("label is one of the batch classes");
        let lmax = logits
            .row(i)
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let zsum: f64 = logits.row(i).iter().map(|&v| (v - lmax).exp()).sum();
        value += (lmax + zsum.ln() - logits[[i, yi]]) / n as f64;
        for ci in 0..classes.len() {
            let p = (logits[[i, ci]] - lmax).exp() / zsum;
            let indicator = if ci == yi { 1.0 } else { 0.0 };
            dlogits[[i, ci]] = (p - indicator) / n as f64;
        }
    }
    // Chain to the embeddings: through z_i directly and through every
    // prototype mean that z_j participates in.
    let mut grad = Array2::zeros((n, z.ncols()));
    for i in 0..n {
        for (ci, proto) in protos.iter().enumerate() {
            let w = dlogits[[i, ci]] / (2.0 * tau);
            if w == 0.0 {
                continue;
            }
            let (gi, gp) = cosine_gradient(z.row(i), proto.view())?;
            grad.row_mut(i).scaled_add(w, &gi);
            let members = &by_class[&classes[ci]];
            let share = w / members.len() as f64;
            for &j in members {
                grad.row_mut(j).scaled_add(share, &gp);
            }
        }
    }
    Ok(LossResult {
        value,
        grad,
        term_breakdown: TermBreakdown::default(),
    })
}

/// One evaluation snapshot in a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub base_accuracy: f64,
    /// Absent in the base stage, where novel classes have no prototypes.
    pub novel_accuracy: Option<f64>,
    /// Training loss at the most recent iteration; absent at iteration 0.
    pub train_loss: Option<f64>,
    pub loss_breakdown: Option<TermBreakdown>,
    /// Mean within-class pairwise similarity on test embeddings.
    pub mean_intra_similarity: Option<f64>,
    /// Mean base↔novel cross-class pairwise similarity on test embeddings.
    pub mean_base_novel_similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub iterations: usize,
    pub records: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn final_record(&self) -> Option<&EvalRecord> {
        self.records.last()
    }
}

/// Draw a constraint-satisfying batch: distinct rows, at least two classes
/// (when the pool has them), and at least one novel row when adapting.
fn sample_batch(
    pool: &Split,
    batch_size: usize,
    novel_labels: &BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let n = pool.len();
    let want = batch_size.min(n);
    let pool_classes: BTreeSet<usize> = pool.labels.iter().copied().collect();
    let need_two = pool_classes.len() >= 2;
    let has_novel = pool.labels.iter().any(|l| novel_labels.contains(l));
    for _ in 0..100 {
        let mut idx: Vec<usize> = index_sample(rng, n, want).into_iter().collect();
        idx.sort_unstable();
        let classes: BTreeSet<usize> = idx.iter().map(|&i| pool.labels[i]).collect();
        if need_two && classes.len() < 2 {
            continue;
        }
        if has_novel && !classes.iter().any(|c| novel_labels.contains(c)) {
            continue;
        }
        return Ok(idx);
    }
    Err(Error::Domain(
        "could not draw a batch with two classes and a novel row; batch_size is too small \
         for this pool"
            .into(),
    ))
}

/// Pick `k` of a class's rows, deterministically for a given generator.
fn choose_k(rows: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rows.len() <= k {
        return rows.to_vec();
    }
    let mut picked: Vec<usize> = index_sample(rng, rows.len(), k)
        .into_iter()
        .map(|i| rows[i])
        .collect();
    picked.sort_unstable();
    picked
}

struct StagePlan<'a> {
    pool: Split,
    novel_labels: BTreeSet<usize>,
    test: &'a Split,
    objective: AdaptObjective,
}

/// Accuracy over the test rows whose label is in `group`, given
/// predictions aligned with the test split.
fn group_accuracy(test: &Split, predictions: &[usize], group: &BTreeSet<usize>) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (i, &label) in test.labels.iter().enumerate() {
        if group.contains(&label) {
            total += 1;
            if predictions[i] == label {
                correct += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Mean within-class and mean base↔novel cross-class pairwise similarity
/// of the training-pool embeddings under the metrics kernel. The pool is
/// the split the loss actually shapes, so separation shows up here first.
fn cluster_scalars(
    head: &ProjectionHead,
    pool: &Split,
    novel_labels: &BTreeSet<usize>,
) -> Result<(Option<f64>, Option<f64>)> {
    let fwd = head.forward(&pool.x)?;
    let s = build_similarity_matrix(&fwd.z, &metrics_kernel())?;
    let by_class = pool.by_class();
    let mut intra_terms = Vec::new();
    for rows in by_class.values() {
        if rows.len() < 2 {
            continue;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (a, &i) in rows.iter().enumerate() {
            for &j in rows.iter().skip(a + 1) {
                total += s.get(i, j);
                count += 1;
            }
        }
        intra_terms.push(total / count as f64);
    }
    let mean_intra = if intra_terms.is_empty() {
        None
    } else {
        Some(intra_terms.iter().sum::<f64>() / intra_terms.len() as f64)
    };
    let mut cross_terms = Vec::new();
    for (&b, base_rows) in by_class.iter().filter(|(c, _)| !novel_labels.contains(c)) {
        for (&v, novel_rows) in by_class.iter().filter(|(c, _)| novel_labels.contains(c)) {
            debug_assert_ne!(b, v);
            let mut total = 0.0;
            for &i in base_rows {
                for &j in novel_rows {
                    total += s.get(i, j);
                }
            }
            cross_terms.push(total / (base_rows.len() * novel_rows.len()) as f64);
        }
    }
    let mean_cross = if cross_terms.is_empty() {
        None
    } else {
        Some(cross_terms.iter().sum::<f64>() / cross_terms.len() as f64)
    };
    Ok((mean_intra, mean_cross))
}

fn evaluate(
    head: &ProjectionHead,
    plan: &StagePlan<'_>,
    iteration: usize,
    train_loss: Option<f64>,
    loss_breakdown: Option<TermBreakdown>,
) -> Result<EvalRecord> {
    let protos = class_prototypes(head, &plan.pool)?;
    let predictions = classify_rows(head, &plan.test.x, &protos)?;
    let base_group: BTreeSet<usize> = plan
        .pool
        .labels
        .iter()
        .copied()
        .filter(|l| !plan.novel_labels.contains(l))
        .collect();
    let base_accuracy = group_accuracy(plan.test, &predictions, &base_group);
    let adapting = !plan.novel_labels.is_empty();
    let novel_accuracy = if adapting {
        Some(group_accuracy(plan.test, &predictions, &plan.novel_labels))
    } else {
        None
    };
    let (mean_intra, mean_cross) = if adapting {
        cluster_scalars(head, &plan.pool, &plan.novel_labels)?
    } else {
        (None, None)
    };
    Ok(EvalRecord {
        iteration,
        base_accuracy,
        novel_accuracy,
        train_loss,
        loss_breakdown,
        mean_intra_similarity: mean_intra,
        mean_base_novel_similarity: mean_cross,
    })
}

/// Shared SGD loop for both stages.
fn run_loop(
    head: &mut ProjectionHead,
    plan: &StagePlan<'_>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(100);
    let mut records = vec![evaluate(head, plan, 0, None, None)?];
    for it in 1..=cfg.iterations {
        let idx = sample_batch(&plan.pool, cfg.batch_size, &plan.novel_labels, &mut rng)?;
        let batch = plan.pool.gather(&idx);
        let (loss, breakdown) = training_step(head, &batch, plan, cfg).map_err(|e| match e {
            Error::NonFinite { context } => Error::Divergence {
                iteration: it,
                what: context,
            },
            Error::ZeroNormRow { row } => Error::Divergence {
                iteration: it,
                what: format!("embedding row {row} collapsed to zero norm"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                what: "training loss".into(),
            });
        }
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            records.push(evaluate(head, plan, it, Some(loss), Some(breakdown))?);
        }
    }
    Ok(TrainLog {
        stage: cfg.stage,
        iterations: cfg.iterations,
        records,
    })
}

/// One SGD step; returns (loss value, breakdown).
fn training_step(
    head: &mut ProjectionHead,
    batch: &Split,
    plan: &StagePlan<'_>,
    cfg: &TrainConfig,
) -> Result<(f64, TermBreakdown)> {
    let fwd: Forward = head.forward(&batch.x)?;
    let clf = prototype_ce(fwd.z.values(), &batch.labels)?;
    let total = match &plan.objective {
        AdaptObjective::CeOnly => clf,
        AdaptObjective::Supcon { temperature } => {
            let con = supcon_baseline(&fwd.z, &batch.labels, *temperature)?;
            total_objective(&clf, &con, cfg.comb_weight)?
        }
        AdaptObjective::Comb(loss_cfg) => {
            let partition = ClassPartition::from_labels(&batch.labels)?
                .with_novel_ids(plan.novel_labels.iter().copied());
            let comb = l_comb(&fwd.z, &partition, loss_cfg)?;
            total_objective(&clf, &comb, cfg.comb_weight)?
        }
    };
    let grads = head.backward(&fwd, &total.grad)?;
    head.sgd_step(&grads, cfg.learning_rate)?;
    Ok((total.value, total.term_breakdown))
}

/// Stage one: train the head on the abundant base split with the
/// classification loss alone. Never touches the novel split.
pub fn base_train(
    task: &FewShotTask,
    head: &ProjectionHead,
    cfg: &TrainConfig,
) -> Result<(ProjectionHead, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != Stage::Base {
        return Err(Error::Config("base_train requires stage = base".into()));
    }
    if cfg.loss != AdaptObjective::CeOnly {
        return Err(Error::Config(
            "the base stage trains with the classification loss only; set loss to ce_only".into(),
        ));
    }
    let plan = StagePlan {
        pool: task.base().clone(),
        novel_labels: BTreeSet::new(),
        test: task.test(),
        objective: AdaptObjective::CeOnly,
    };
    let mut head = head.clone();
    let log = run_loop(&mut head, &plan, cfg)?;
    Ok((head, log))
}

/// The K-shot adaptation pool: K rows per base class (or all of them with
/// `abundant_base`) plus the novel split. The seed governs which K rows
/// each base class contributes.
pub fn adaptation_pool(task: &FewShotTask, seed: u64, abundant_base: bool) -> Result<Split> {
    let base = task.base();
    let novel = task.novel();
    let k = task.spec.k_shot;
    let mut rows_x = Vec::new();
    let mut labels = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(200);
    for (_, rows) in base.by_class() {
        let chosen = if abundant_base {
            rows
        } else {
            choose_k(&rows, k, &mut rng)
        };
        for r in chosen {
            rows_x.push(base.x.row(r).to_owned());
            labels.push(base.labels[r]);
        }
    }
    for i in 0..novel.len() {
        rows_x.push(novel.x.row(i).to_owned());
        labels.push(novel.labels[i]);
    }
    let mut x = Array2::zeros((rows_x.len(), base.x.ncols()));
    for (i, row) in rows_x.iter().enumerate() {
        x.row_mut(i).assign(row);
    }
    Ok(Split { x, labels })
}

/// Stage two: adapt a base-trained head on the K-shot pool of all classes,
/// with the configured objective next to the classifier.
pub fn few_shot_adapt(
    task: &FewShotTask,
    head: &ProjectionHead,
    cfg: &TrainConfig,
) -> Result<(ProjectionHead, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != Stage::Adapt {
        return Err(Error::Config(
            "few_shot_adapt requires stage = adapt".into(),
        ));
    }
    if !cfg.abundant_base && task.spec.k_shot > task.spec.samples_per_base {
        return Err(Error::Config(format!(
            "k_shot {} exceeds samples_per_base {}; base classes cannot provide K shots",
            task.spec.k_shot, task.spec.samples_per_base
        )));
    }
    let pool = adaptation_pool(task, cfg.seed, cfg.abundant_base)?;
    let plan = StagePlan {
        pool,
        novel_labels: task.spec.novel_class_ids().collect(),
        test: task.test(),
        objective: cfg.loss,
    };
    let mut head = head.clone();
    let log = run_loop(&mut head, &plan, cfg)?;
    Ok((head, log))
}
