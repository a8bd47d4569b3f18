//! Spatial auxiliary tasks. The positional task predicts each patch's grid
//! cell from its encoded embedding; the consistency task discriminates real
//! embeddings from ones computed on row-shuffled features over the same graph.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diff::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, Binder};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const BIN_EDGE: f64 = 1e-12;

/// Row-major (y-major) grid cell of each centroid in `[0,1]²`.
pub fn assign_bins(centroids: &[[f64; 2]], grid: usize) -> Result<Vec<usize>> {
    if grid == 0 {
        return Err(Error::Config("grid must be at least 1".into()));
    }
    let g = grid as f64;
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]) {
                return Err(Error::Data(format!(
                    "centroid {i} ({}, {}) outside [0,1]²",
                    c[0], c[1]
                )));
            }
            let col = (c[0].min(1.0 - BIN_EDGE) * g).floor() as usize;
            let row = (c[1].min(1.0 - BIN_EDGE) * g).floor() as usize;
            Ok(row * grid + col)
        })
        .collect()
}

/// Keeps each index with probability `keep_rate`; never returns an empty set.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, keep_rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::Config(format!(
            "mask keep rate must lie in (0,1], got {keep_rate}"
        )));
    }
    if n == 0 {
        return Err(Error::Contract("cannot mask an empty bag".into()));
    }
    let mut kept: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < keep_rate).collect();
    if kept.is_empty() {
        kept.push(rng.random_range(0..n));
    }
    Ok(kept)
}

/// Affine location head over `grid²` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct JigsawHeadParams {
    /// G²×d2.
    pub w_aux: Tensor,
    /// 1×G².
    pub b_aux: Tensor,
}

impl JigsawHeadParams {
    pub fn init<R: Rng + ?Sized>(d2: usize, grid: usize, rng: &mut R) -> Self {
        let bins = grid * grid;
        JigsawHeadParams {
            w_aux: glorot(bins, d2, rng),
            b_aux: Tensor::zeros(1, bins),
        }
    }

    pub fn bins(&self) -> usize {
        self.w_aux.rows()
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> Result<BoundJigsawHead> {
        Ok(BoundJigsawHead {
            w_aux: b.leaf(&self.w_aux)?,
            b_aux: b.leaf(&self.b_aux)?,
        })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_aux, &self.b_aux]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_aux, &mut self.b_aux]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundJigsawHead {
    pub w_aux: Var,
    pub b_aux: Var,
}

/// Row-wise softmax over bins: N×G² location probabilities.
pub fn jigsaw_forward(tape: &mut Tape, h: Var, head: &BoundJigsawHead) -> Result<Var> {
    let wt = tape.transpose(head.w_aux)?;
    let logits = tape.matmul(h, wt)?;
    let logits = tape.add_row(logits, head.b_aux)?;
    tape.softmax_rows(logits)
}

/// Mean negative log-probability of the true bin over the supervised subset.
pub fn jigsaw_loss(tape: &mut Tape, probs: Var, labels: &[usize], mask: &[usize]) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::Contract("jigsaw supervision mask is empty".into()));
    }
    let (rows, bins) = tape.value(probs).shape();
    if labels.len() != rows {
        return Err(Error::dim("jigsaw_loss", (rows, bins), (labels.len(), 1)));
    }
    let mut picks = Vec::with_capacity(mask.len());
    for &j in mask {
        if j >= rows || labels[j] >= bins {
            return Err(Error::Contract(format!(
                "mask entry {j} or its label is out of range"
            )));
        }
        picks.push((j, labels[j]));
    }
    let p = tape.gather_elements(probs, picks.into())?;
    let logp = tape.clamped_log(p, PROB_FLOOR)?;
    let mean = tape.mean(logp)?;
    tape.scale(mean, -1.0)
}

/// Share of patches whose most probable bin is the true one.
pub fn bin_accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = (0..probs.rows())
        .filter(|&r| {
            let row = probs.row(r);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == labels[r]
        })
        .count();
    hits as f64 / probs.rows() as f64
}

/// Rows of `x` reordered by a uniformly random permutation π: row `j` of the
/// result is row `π(j)` of the input.
pub fn corrupt_features<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> (Tensor, Vec<usize>) {
    let mut perm: Vec<usize> = (0..x.rows()).collect();
    perm.shuffle(rng);
    (permute_rows(x, &perm), perm)
}

pub fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for (j, &p) in perm.iter().enumerate() {
        out.row_mut(j).copy_from_slice(x.row(p));
    }
    out
}

/// Logistic discriminator over embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    /// d2×1.
    pub w_d: Tensor,
    /// 1×1.
    pub b_d: Tensor,
}

impl DiscriminatorParams {
    pub fn init<R: Rng + ?Sized>(d2: usize, rng: &mut R) -> Self {
        DiscriminatorParams {
            w_d: glorot(d2, 1, rng),
            b_d: Tensor::zeros(1, 1),
        }
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> Result<BoundDiscriminator> {
        Ok(BoundDiscriminator {
            w_d: b.leaf(&self.w_d)?,
            b_d: b.leaf(&self.b_d)?,
        })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_d, &self.b_d]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_d, &mut self.b_d]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDiscriminator {
    pub w_d: Var,
    pub b_d: Var,
}

/// N×1 probabilities that each embedding row is coherent.
pub fn discriminate(tape: &mut Tape, h: Var, disc: &BoundDiscriminator) -> Result<Var> {
    let s = tape.matmul(h, disc.w_d)?;
    let s = tape.add_row(s, disc.b_d)?;
    tape.activation(Activation::Sigmoid, s)
}

/// `−(1/N) Σ [log D(real) + log(1 − D(fake))]`.
pub fn consistency_loss(
    tape: &mut Tape,
    h_real: Var,
    h_fake: Var,
    disc: &BoundDiscriminator,
) -> Result<Var> {
    let (sr, sf) = (tape.value(h_real).shape(), tape.value(h_fake).shape());
    if sr != sf {
        return Err(Error::dim("consistency_loss", sr, sf));
    }
    let n = sr.0;
    let d_real = discriminate(tape, h_real, disc)?;
    let d_fake = discriminate(tape, h_fake, disc)?;
    let real = tape.bce(d_real, Arc::from(vec![1.0; n]), PROB_FLOOR)?;
    let fake = tape.bce(d_fake, Arc::from(vec![0.0; n]), PROB_FLOOR)?;
    tape.add(real, fake)
}
