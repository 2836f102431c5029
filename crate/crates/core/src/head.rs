//! A small projection head: `input → hidden (tanh) → embed`, with the
//! output rows L2-normalized so every downstream similarity sees unit
//! vectors. Backpropagation is written out by hand, matching the rest of
//! the crate's no-autodiff policy.
//!
//! Row convention: data matrices are `n × dim`, so a layer computes
//! `x · Wᵀ + b` with `W` stored as `out_dim × in_dim`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::EmbeddingMatrix;

/// Hidden width as a multiple of the embedding dimension.
const HIDDEN_FACTOR: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

/// Activations cached by [`ProjectionHead::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// The input batch, `n × input_dim`.
    pub x: Array2<f64>,
    /// Hidden activations after tanh, `n × hidden`.
    hidden: Array2<f64>,
    /// Pre-normalization output, `n × embed`.
    raw_out: Array2<f64>,
    /// Unit-normalized embeddings.
    pub z: EmbeddingMatrix,
}

/// Parameter gradients produced by [`ProjectionHead::backward`].
#[derive(Clone, Debug)]
pub struct HeadGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadGradients {
    /// Squared Frobenius norm over all parameter blocks.
    pub fn norm_sq(&self) -> f64 {
        self.w1.iter().map(|g| g * g).sum::<f64>()
            + self.b1.iter().map(|g| g * g).sum::<f64>()
            + self.w2.iter().map(|g| g * g).sum::<f64>()
            + self.b2.iter().map(|g| g * g).sum::<f64>()
    }
}

fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

impl ProjectionHead {
    /// Seeded Xavier-uniform initialization; biases start at zero.
    pub fn init(input_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if input_dim < 1 || embed_dim < 1 {
            return Err(Error::Config("head dimensions must be at least 1".into()));
        }
        let hidden = HIDDEN_FACTOR * embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ProjectionHead {
            w1: xavier_uniform(hidden, input_dim, &mut rng),
            b1: Array1::zeros(hidden),
            w2: xavier_uniform(embed_dim, hidden, &mut rng),
            b2: Array1::zeros(embed_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Forward pass over a batch, caching what backward needs.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Forward> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, head expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let hidden = (x.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        let raw_out = hidden.dot(&self.w2.t()) + &self.b2;
        let z = EmbeddingMatrix::new(raw_out.clone())?.into_unit_normalized()?;
        Ok(Forward {
            x: x.clone(),
            hidden,
            raw_out,
            z,
        })
    }

    /// Backpropagate `∂L/∂z` (gradient w.r.t. the *normalized* embeddings)
    /// to parameter gradients.
    pub fn backward(&self, fwd: &Forward, grad_z: &Array2<f64>) -> Result<HeadGradients> {
        let n = fwd.x.nrows();
        if grad_z.dim() != (n, self.embed_dim()) {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match embeddings ({}, {})",
                grad_z.dim(),
                n,
                self.embed_dim()
            )));
        }
        // Through row normalization z = e/‖e‖:
        // ∂L/∂e = (g − (g·z) z) / ‖e‖.
        let mut grad_raw = Array2::zeros((n, self.embed_dim()));
        for i in 0..n {
            let e = fwd.raw_out.row(i);
            let z = fwd.z.row(i);
            let g = grad_z.row(i);
            let norm = e.dot(&e).sqrt();
            let gz = g.dot(&z);
            let gi = (&g.to_owned() - &(z.to_owned() * gz)) / norm;
            grad_raw.row_mut(i).assign(&gi);
        }
        // Affine layer 2: e = h·W2ᵀ + b2.
        let gw2 = grad_raw.t().dot(&fwd.hidden);
        let gb2 = grad_raw.sum_axis(Axis(0));
        let ghidden = grad_raw.dot(&self.w2);
        // tanh: dh/dpre = 1 − h².
        let gpre = &ghidden * &fwd.hidden.mapv(|h| 1.0 - h * h);
        let gw1 = gpre.t().dot(&fwd.x);
        let gb1 = gpre.sum_axis(Axis(0));
        Ok(HeadGradients {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        })
    }

    /// Plain SGD: `w ← w − lr·g`.
    pub fn sgd_step(&mut self, grads: &HeadGradients, lr: f64) -> Result<()> {
        if !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite, got {lr}"
            )));
        }
        self.w1.scaled_add(-lr, &grads.w1);
        self.b1.scaled_add(-lr, &grads.b1);
        self.w2.scaled_add(-lr, &grads.w2);
        self.b2.scaled_add(-lr, &grads.b2);
        if self.w1.iter().any(|w| !w.is_finite())
            || self.w2.iter().any(|w| !w.is_finite())
            || self.b1.iter().any(|w| !w.is_finite())
            || self.b2.iter().any(|w| !w.is_finite())
        {
            return Err(Error::NonFinite {
                context: "head weights after SGD step".into(),
            });
        }
        Ok(())
    }
}

const HEAD_MAGIC: &[u8; 4] = b"CLHD";
const HEAD_VERSION: u32 = 1;

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    for v in m.iter() {
        w.write_u64::<LittleEndian>(v.to_bits())?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
    }
    Ok(m)
}

impl ProjectionHead {
    /// Write weights as a versioned little-endian binary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(HEAD_MAGIC)?;
        w.write_u32::<LittleEndian>(HEAD_VERSION)?;
        w.write_u64::<LittleEndian>(self.input_dim() as u64)?;
        w.write_u64::<LittleEndian>(self.hidden_dim() as u64)?;
        w.write_u64::<LittleEndian>(self.embed_dim() as u64)?;
        write_matrix(&mut w, &self.w1)?;
        for v in self.b1.iter() {
            w.write_u64::<LittleEndian>(v.to_bits())?;
        }
        write_matrix(&mut w, &self.w2)?;
        for v in self.b2.iter() {
            w.write_u64::<LittleEndian>(v.to_bits())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ProjectionHead> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != HEAD_MAGIC {
            return Err(Error::Format(format!(
                "not a head weight file: bad magic {magic:?}"
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != HEAD_VERSION {
            return Err(Error::Format(format!(
                "unsupported head file version {version} (expected {HEAD_VERSION})"
            )));
        }
        let input_dim = r.read_u64::<LittleEndian>()? as usize;
        let hidden = r.read_u64::<LittleEndian>()? as usize;
        let embed = r.read_u64::<LittleEndian>()? as usize;
        let w1 = read_matrix(&mut r, hidden, input_dim)?;
        let mut b1 = Array1::zeros(hidden);
        for v in b1.iter_mut() {
            *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
        }
        let w2 = read_matrix(&mut r, embed, hidden)?;
        let mut b2 = Array1::zeros(embed);
        for v in b2.iter_mut() {
            *v = f64::from_bits(r.read_u64::<LittleEndian>()?);
        }
        let head = ProjectionHead { w1, b1, w2, b2 };
        if head.w1.iter().any(|v| !v.is_finite()) || head.w2.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "loaded head weights".into(),
            });
        }
        Ok(head)
    }
}
