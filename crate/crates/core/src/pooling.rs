//! Slide-level aggregation and the logistic slide classifier.

use std::sync::Arc;

use rand::Rng;

use crate::diff::{bce_mean, order_free_sum, sigmoid, Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::jigsaw::PROB_FLOOR;
use crate::params::{glorot, Binder};

/// Attention scorer `a = softmax(tanh(H Vᵀ) μ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// d4×d2.
    pub v: Tensor,
    /// d4×1.
    pub mu: Tensor,
}

/// Pooling and classifier head. Without `attention` the bag is mean-pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    pub attention: Option<AttentionParams>,
    /// 1×1.
    pub beta0: Tensor,
    /// d2×1.
    pub beta: Tensor,
}

impl PoolParams {
    pub fn init<R: Rng + ?Sized>(d2: usize, d4: Option<usize>, rng: &mut R) -> Result<Self> {
        if d2 == 0 || d4 == Some(0) {
            return Err(Error::Config("pooling widths must be positive".into()));
        }
        let attention = d4.map(|d4| AttentionParams {
            v: glorot(d4, d2, rng),
            mu: glorot(d4, 1, rng),
        });
        Ok(PoolParams {
            attention,
            beta0: Tensor::zeros(1, 1),
            beta: glorot(d2, 1, rng),
        })
    }

    pub fn d2(&self) -> usize {
        self.beta.rows()
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> Result<BoundPool> {
        let attention = match &self.attention {
            Some(a) => Some((b.leaf(&a.v)?, b.leaf(&a.mu)?)),
            None => None,
        };
        Ok(BoundPool {
            attention,
            beta0: b.leaf(&self.beta0)?,
            beta: b.leaf(&self.beta)?,
        })
    }

    pub(crate) fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.extend([&a.v, &a.mu]);
        }
        out.extend([&self.beta0, &self.beta]);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(a) = &mut self.attention {
            out.extend([&mut a.v, &mut a.mu]);
        }
        out.extend([&mut self.beta0, &mut self.beta]);
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundPool {
    /// `(V, μ)` when attention pooling is used.
    pub attention: Option<(Var, Var)>,
    pub beta0: Var,
    pub beta: Var,
}

/// Output of the pooling head on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PoolOutput {
    /// N×1 attention, absent for mean pooling.
    pub attention: Option<Var>,
    /// 1×d2 slide embedding.
    pub z: Var,
    /// 1×1 probability of the positive class.
    pub prob: Var,
}

/// N×1 attention weights.
pub fn attention_on_tape(tape: &mut Tape, h: Var, v: Var, mu: Var) -> Result<Var> {
    let vt = tape.transpose(v)?;
    let hidden = tape.matmul(h, vt)?;
    let hidden = tape.activation(Activation::Tanh, hidden)?;
    let logits = tape.matmul(hidden, mu)?;
    tape.softmax_column(logits)
}

pub fn pool_on_tape(tape: &mut Tape, h: Var, pool: &BoundPool) -> Result<PoolOutput> {
    let (attention, z) = match pool.attention {
        Some((v, mu)) => {
            let a = attention_on_tape(tape, h, v, mu)?;
            (Some(a), tape.weighted_rows(a, h)?)
        }
        None => (None, tape.mean_rows(h)?),
    };
    let score = tape.matmul(z, pool.beta)?;
    let score = tape.add(score, pool.beta0)?;
    let prob = tape.activation(Activation::Sigmoid, score)?;
    Ok(PoolOutput { attention, z, prob })
}

/// Cross-entropy of one slide probability against its label.
pub fn mil_loss_on_tape(tape: &mut Tape, prob: Var, label: u8) -> Result<Var> {
    tape.bce(prob, Arc::from(vec![f64::from(label)]), PROB_FLOOR)
}

/// Attention weights for the rows of `h`. Fails for a mean-pooling head.
pub fn abmil_attention(h: &Tensor, params: &PoolParams) -> Result<Vec<f64>> {
    let Some(att) = &params.attention else {
        return Err(Error::Unsupported(
            "mean pooling has no attention weights".into(),
        ));
    };
    if h.rows() == 0 {
        return Err(Error::Contract("attention over an empty bag".into()));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let v = tape.constant(att.v.clone())?;
    let mu = tape.constant(att.mu.clone())?;
    let a = attention_on_tape(&mut tape, hv, v, mu)?;
    Ok(tape.value(a).data().to_vec())
}

/// `z = Σ_j a_j h_j`; the weights must sum to 1.
pub fn slide_embedding(h: &Tensor, a: &[f64]) -> Result<Vec<f64>> {
    if a.len() != h.rows() {
        return Err(Error::dim("slide_embedding", h.shape(), (a.len(), 1)));
    }
    let total: f64 = a.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "attention weights sum to {total}, not 1"
        )));
    }
    Ok((0..h.cols())
        .map(|k| order_free_sum(a.iter().enumerate().map(|(j, w)| w * h.get(j, k)).collect()))
        .collect())
}

/// Unweighted row mean.
pub fn mean_pool(h: &Tensor) -> Result<Vec<f64>> {
    if h.rows() == 0 {
        return Err(Error::Contract("mean pool of an empty bag".into()));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let z = tape.mean_rows(hv)?;
    Ok(tape.value(z).data().to_vec())
}

/// `σ(β0 + βᵀz)`.
pub fn classify(z: &[f64], params: &PoolParams) -> Result<f64> {
    if z.len() != params.d2() {
        return Err(Error::dim("classify", (1, z.len()), params.beta.shape()));
    }
    let score = params.beta0.item()
        + z.iter()
            .zip(params.beta.data())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    Ok(sigmoid(score))
}

/// Mean cross-entropy over slides with probabilities clamped at 1e-12.
pub fn mil_loss(p: &[f64], y: &[u8]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::dim("mil_loss", (p.len(), 1), (y.len(), 1)));
    }
    let labels: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    Ok(bce_mean(p, &labels, PROB_FLOOR))
}

/// Full pooling pass without gradients: attention (if any), embedding and probability.
pub fn pool_forward(h: &Tensor, params: &PoolParams) -> Result<(Option<Vec<f64>>, Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let bound = params.bind(&mut Binder::constants(&mut tape))?;
    let out = pool_on_tape(&mut tape, hv, &bound)?;
    Ok((
        out.attention.map(|a| tape.value(a).data().to_vec()),
        tape.value(out.z).data().to_vec(),
        tape.value(out.prob).item(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check_many;
    use crate::rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[11]);
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn params(d2: usize, d4: usize, seed: u64) -> PoolParams {
        let mut r = rng::stream(seed, &[12]);
        PoolParams::init(d2, Some(d4), &mut r).unwrap()
    }

    #[test]
    fn attention_examples() {
        let p = params(4, 3, 0);
        assert_eq!(abmil_attention(&random(1, 4, 0), &p).unwrap(), vec![1.0]);

        let same = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9, 0.1]; 5]).unwrap();
        let a = abmil_attention(&same, &p).unwrap();
        assert!(a.iter().all(|&w| (w - 0.2).abs() < 1e-15));

        let mut zero_v = p.clone();
        zero_v.attention.as_mut().unwrap().v = Tensor::zeros(3, 4);
        let a = abmil_attention(&random(7, 4, 1), &zero_v).unwrap();
        assert!(a.iter().all(|&w| (w - 1.0 / 7.0).abs() < 1e-15));

        let mean = PoolParams::init(4, None, &mut rng::stream(0, &[])).unwrap();
        assert!(matches!(
            abmil_attention(&same, &mean),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn embedding_examples() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            slide_embedding(&h, &[0.25, 0.75]).unwrap(),
            vec![0.25, 0.75]
        );
        assert_eq!(slide_embedding(&h, &[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(
            slide_embedding(&h, &[0.5, 0.5]).unwrap(),
            mean_pool(&h).unwrap()
        );
        assert!(matches!(
            slide_embedding(&h, &[0.5, 0.6]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mean_pool_examples() {
        let x = random(1, 3, 4);
        assert_eq!(mean_pool(&x).unwrap(), x.data().to_vec());
        let mut both = Vec::from(x.data());
        both.extend(x.data().iter().map(|v| -v));
        let pair = Tensor::from_vec(2, 3, both).unwrap();
        assert!(mean_pool(&pair).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_examples() {
        let mut p = params(2, 2, 1);
        p.beta = Tensor::zeros(2, 1);
        assert_eq!(classify(&[3.0, -1.0], &p).unwrap(), 0.5);

        p.beta = Tensor::column(vec![1.0, 0.0]);
        p.beta0 = Tensor::scalar(0.0);
        assert!((classify(&[3f64.ln(), 9.0], &p).unwrap() - 0.75).abs() < 1e-15);

        let mut neg = p.clone();
        p.beta0 = Tensor::scalar(0.4);
        neg.beta = p.beta.map(|v| -v);
        neg.beta0 = Tensor::scalar(-0.4);
        let z = [0.7, -2.0];
        assert!((classify(&z, &p).unwrap() + classify(&z, &neg).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mil_loss_examples() {
        assert!(mil_loss(&[1.0, 0.0], &[1, 0]).unwrap() < 1e-11);
        assert!((mil_loss(&[0.5; 3], &[1, 0, 1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let l1 = mil_loss(&[0.3], &[1]).unwrap();
        let l2 = mil_loss(&[0.8], &[0]).unwrap();
        assert!((mil_loss(&[0.3, 0.8], &[1, 0]).unwrap() - (l1 + l2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mil_loss_minimized_at_label() {
        for y in [0u8, 1] {
            let at = mil_loss(&[f64::from(y)], &[y]).unwrap();
            for i in 1..100 {
                let p = i as f64 / 100.0;
                assert!(mil_loss(&[p], &[y]).unwrap() > at);
            }
        }
        // Loss falls monotonically as p approaches the label.
        let ps: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let pos: Vec<f64> = ps.iter().map(|&p| mil_loss(&[p], &[1]).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let p = params(5, 4, 2);
        let h = random(9, 5, 3);
        let perm = [4, 2, 8, 0, 1, 7, 3, 6, 5];
        let hp = crate::jigsaw::permute_rows(&h, &perm);
        let a = abmil_attention(&h, &p).unwrap();
        let ap = abmil_attention(&hp, &p).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            assert_eq!(ap[j], a[src]);
        }
        let z = slide_embedding(&h, &a).unwrap();
        let zp = slide_embedding(&hp, &ap).unwrap();
        assert_eq!(z, zp);
        let (_, z_tape, _) = pool_forward(&h, &p).unwrap();
        let (_, zp_tape, _) = pool_forward(&hp, &p).unwrap();
        assert_eq!(z_tape, zp_tape);
    }

    #[test]
    fn pool_forward_agrees_with_parts() {
        let p = params(5, 3, 8);
        let h = random(6, 5, 8);
        let (a, z, prob) = pool_forward(&h, &p).unwrap();
        let a = a.unwrap();
        assert_eq!(a, abmil_attention(&h, &p).unwrap());
        let z2 = slide_embedding(&h, &a).unwrap();
        assert!(z.iter().zip(&z2).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!((prob - classify(&z, &p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn classifier_gradient() {
        let z = random(1, 4, 5);
        let beta = random(4, 1, 6);
        let beta0 = Tensor::scalar(0.3);
        let report = grad_check_many(
            |tape, v| {
                let s = tape.matmul(v[0], v[1])?;
                let s = tape.add(s, v[2])?;
                let p = tape.activation(Activation::Sigmoid, s)?;
                mil_loss_on_tape(tape, p, 1)
            },
            &[z, beta, beta0],
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
