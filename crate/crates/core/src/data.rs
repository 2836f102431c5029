//! Synthetic few-shot classification tasks: Gaussian clusters around class
//! centers on the unit sphere, split into an abundant base-class pool, a
//! K-shot novel-class pool, and a held-out test pool.
//!
//! Center placement starts from signed coordinate axes (`+e_0, −e_0, +e_1,
//! …`), which are maximally separated, and interpolates every center toward
//! one shared random direction as `inter_overlap` grows: at 0 the classes
//! are as far apart as the dimension allows, at 1 they coincide. Class ids
//! `0..num_base` are base, the rest novel.
//!
//! Tasks serialize to a little-endian binary file that round-trips
//! bit-exactly, so a saved task is as reproducible as its seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_embed_dim() -> usize {
    128
}

/// Parameters of a generated task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// Number of abundantly sampled base classes.
    pub num_base: usize,
    /// Number of K-shot novel classes.
    pub num_novel: usize,
    /// Dimension of the raw feature vectors.
    pub input_dim: usize,
    /// Output dimension of the projection head trained on this task.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Training rows per base class (the test split reuses this count for
    /// every class).
    pub samples_per_base: usize,
    /// Training rows per novel class.
    pub k_shot: usize,
    /// Isotropic standard deviation of each class cluster.
    pub intra_spread: f64,
    /// 0 = maximally separated centers, 1 = all centers coincide.
    pub inter_overlap: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn num_classes(&self) -> usize {
        self.num_base + self.num_novel
    }

    pub fn base_class_ids(&self) -> impl Iterator<Item = usize> {
        0..self.num_base
    }

    pub fn novel_class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.num_base..self.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_base < 1 || self.num_novel < 1 {
            return Err(Error::Config(
                "need at least one base and one novel class".into(),
            ));
        }
        if self.input_dim < 1 || self.embed_dim < 1 {
            return Err(Error::Config("dimensions must be at least 1".into()));
        }
        if self.samples_per_base < 1 || self.k_shot < 1 {
            return Err(Error::Config(
                "samples_per_base and k_shot must be at least 1".into(),
            ));
        }
        if !(self.intra_spread > 0.0) || !self.intra_spread.is_finite() {
            return Err(Error::Config(format!(
                "intra_spread must be positive, got {}",
                self.intra_spread
            )));
        }
        if !self.inter_overlap.is_finite() || !(0.0..=1.0).contains(&self.inter_overlap) {
            return Err(Error::Config(format!(
                "inter_overlap must lie in [0, 1], got {}",
                self.inter_overlap
            )));
        }
        // Each class takes one signed axis; beyond 2·input_dim the placement
        // scheme cannot keep centers distinct.
        if self.num_classes() > 2 * self.input_dim {
            return Err(Error::Config(format!(
                "{} classes cannot be separated in {} dimensions (limit {})",
                self.num_classes(),
                self.input_dim,
                2 * self.input_dim
            )));
        }
        Ok(())
    }
}

/// One labeled split: row `i` of `x` has class `labels[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of each distinct label, ascending by label.
    pub fn by_class(&self) -> std::collections::BTreeMap<usize, Vec<usize>> {
        let mut map: std::collections::BTreeMap<usize, Vec<usize>> =
            std::collections::BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    /// Copy the given rows into a new matrix + label list.
    pub fn gather(&self, rows: &[usize]) -> Split {
        let mut x = Array2::zeros((rows.len(), self.x.ncols()));
        let mut labels = Vec::with_capacity(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            x.row_mut(out).assign(&self.x.row(r));
            labels.push(self.labels[r]);
        }
        Split { x, labels }
    }
}

/// A generated task: base / novel / test splits plus the spec that made it.
///
/// Reads of the novel split are tracked so the trainer can assert that the
/// base stage never saw a K-shot row.
#[derive(Debug)]
pub struct FewShotTask {
    pub spec: SyntheticTaskSpec,
    base: Split,
    novel: Split,
    test: Split,
    novel_accessed: AtomicBool,
}

impl Clone for FewShotTask {
    fn clone(&self) -> Self {
        FewShotTask {
            spec: self.spec,
            base: self.base.clone(),
            novel: self.novel.clone(),
            test: self.test.clone(),
            novel_accessed: AtomicBool::new(self.novel_accessed.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for FewShotTask {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.base == other.base
            && self.novel == other.novel
            && self.test == other.test
    }
}

impl FewShotTask {
    pub fn base(&self) -> &Split {
        &self.base
    }

    /// The K-shot novel training split. Reading it flips the access flag.
    pub fn novel(&self) -> &Split {
        self.novel_accessed.store(true, Ordering::Relaxed);
        &self.novel
    }

    pub fn test(&self) -> &Split {
        &self.test
    }

    pub fn novel_was_accessed(&self) -> bool {
        self.novel_accessed.load(Ordering::Relaxed)
    }

    pub fn reset_access_tracking(&self) {
        self.novel_accessed.store(false, Ordering::Relaxed);
    }
}

fn unit_gaussian_vector(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Class centers: signed axes pulled toward one shared random direction.
fn place_centers(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Array1<f64>>> {
    let d = spec.input_dim;
    let o = spec.inter_overlap;
    'attempt: for _ in 0..100 {
        let shared = unit_gaussian_vector(d, rng);
        let mut centers = Vec::with_capacity(spec.num_classes());
        for c in 0..spec.num_classes() {
            let mut axis = Array1::zeros(d);
            axis[c / 2] = if c % 2 == 0 { 1.0 } else { -1.0 };
            let mixed = axis * (1.0 - o) + &shared * o;
            let norm = mixed.dot(&mixed).sqrt();
            if norm < 1e-6 && o < 1.0 {
                // The shared direction nearly cancelled an axis; try a new one.
                continue 'attempt;
            }
            if norm < 1e-6 {
                // o == 1: all centers are the shared direction itself.
                centers.push(shared.clone());
            } else {
                centers.push(mixed / norm);
            }
        }
        return Ok(centers);
    }
    Err(Error::Config(
        "could not place class centers: the overlap direction keeps cancelling an axis".into(),
    ))
}

fn sample_split(
    centers: &[Array1<f64>],
    class_ids: &[usize],
    per_class: usize,
    spread: f64,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Split {
    let n = class_ids.len() * per_class;
    let mut x = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for &c in class_ids {
        for _ in 0..per_class {
            for t in 0..dim {
                let noise: f64 = StandardNormal.sample(rng);
                x[[row, t]] = centers[c][t] + spread * noise;
            }
            labels.push(c);
            row += 1;
        }
    }
    Split { x, labels }
}

/// Generate a task from its spec. Deterministic: the same spec (including
/// seed) always produces the identical task.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<FewShotTask> {
    spec.validate()?;
    let mut center_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    center_rng.set_stream(0);
    let centers = place_centers(spec, &mut center_rng)?;

    let base_ids: Vec<usize> = spec.base_class_ids().collect();
    let novel_ids: Vec<usize> = spec.novel_class_ids().collect();
    let all_ids: Vec<usize> = (0..spec.num_classes()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let base = sample_split(
        &centers,
        &base_ids,
        spec.samples_per_base,
        spec.intra_spread,
        spec.input_dim,
        &mut rng,
    );
    rng.set_stream(2);
    let novel = sample_split(
        &centers,
        &novel_ids,
        spec.k_shot,
        spec.intra_spread,
        spec.input_dim,
        &mut rng,
    );
    rng.set_stream(3);
    let test = sample_split(
        &centers,
        &all_ids,
        spec.samples_per_base,
        spec.intra_spread,
        spec.input_dim,
        &mut rng,
    );
    Ok(FewShotTask {
        spec: *spec,
        base,
        novel,
        test,
        novel_accessed: AtomicBool::new(false),
    })
}

const TASK_MAGIC: &[u8; 4] = b"CLTK";
const TASK_VERSION: u32 = 1;

fn write_split<W: Write>(w: &mut W, split: &Split) -> Result<()> {
    w.write_u64::<LittleEndian>(split.x.nrows() as u64)?;
    w.write_u64::<LittleEndian>(split.x.ncols() as u64)?;
    for &l in &split.labels {
        w.write_u64::<LittleEndian>(l as u64)?;
    }
    for v in split.x.iter() {
        w.write_u64::<LittleEndian>(v.to_bits())?;
    }
    Ok(())
}

fn read_split<R: Read>(r: &mut R) -> Result<Split> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let mut x = Array2::zeros((rows, cols));
    for v in x.iter_mut() {
        *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
    }
    Ok(Split { x, labels })
}

impl FewShotTask {
    /// Write the task as a little-endian binary file. Bit-exact round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TASK_MAGIC)?;
        w.write_u32::<LittleEndian>(TASK_VERSION)?;
        for v in [
            self.spec.num_base as u64,
            self.spec.num_novel as u64,
            self.spec.input_dim as u64,
            self.spec.embed_dim as u64,
            self.spec.samples_per_base as u64,
            self.spec.k_shot as u64,
        ] {
            w.write_u64::<LittleEndian>(v)?;
        }
        w.write_u64::<LittleEndian>(self.spec.intra_spread.to_bits())?;
        w.write_u64::<LittleEndian>(self.spec.inter_overlap.to_bits())?;
        w.write_u64::<LittleEndian>(self.spec.seed)?;
        write_split(&mut w, &self.base)?;
        write_split(&mut w, &self.novel)?;
        write_split(&mut w, &self.test)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FewShotTask> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TASK_MAGIC {
            return Err(Error::Format(format!(
                "not a task file: bad magic {magic:?}"
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != TASK_VERSION {
            return Err(Error::Format(format!(
                "unsupported task file version {version} (expected {TASK_VERSION})"
            )));
        }
        let num_base = r.read_u64::<LittleEndian>()? as usize;
        let num_novel = r.read_u64::<LittleEndian>()? as usize;
        let input_dim = r.read_u64::<LittleEndian>()? as usize;
        let embed_dim = r.read_u64::<LittleEndian>()? as usize;
        let samples_per_base = r.read_u64::<LittleEndian>()? as usize;
        let k_shot = r.read_u64::<LittleEndian>()? as usize;
        let intra_spread = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let inter_overlap = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let seed = r.read_u64::<LittleEndian>()?;
        let spec = SyntheticTaskSpec {
            num_base,
            num_novel,
            input_dim,
            embed_dim,
            samples_per_base,
            k_shot,
            intra_spread,
            inter_overlap,
            seed,
        };
        spec.validate()?;
        let base = read_split(&mut r)?;
        let novel = read_split(&mut r)?;
        let test = read_split(&mut r)?;
        Ok(FewShotTask {
            spec,
            base,
            novel,
            test,
            novel_accessed: AtomicBool::new(false),
        })
    }
}
