//! Consumers for the measurement loop: a trainable linear softmax classifier
//! and a fixed-delay stand-in.

use std::thread;
use std::time::Duration;

use num_traits::Float;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// `logits = W x + b` with `W` stored row-major as `classes x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub dim: usize,
    pub classes: usize,
    pub learning_rate: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> LinearModel<T> {
    pub fn zeros(dim: usize, classes: usize, learning_rate: T) -> Self {
        Self {
            weights: vec![T::zero(); dim * classes],
            bias: vec![T::zero(); classes],
            dim,
            classes,
            learning_rate,
        }
    }

    fn batch_len(&self, x: &[T]) -> Result<usize> {
        if self.dim == 0 || !x.len().is_multiple_of(self.dim) {
            return Err(ModelError::Shape(format!(
                "{} inputs are not a whole number of rows of width {}",
                x.len(),
                self.dim
            )));
        }
        Ok(x.len() / self.dim)
    }

    /// Row-major `batch x classes` logits for row-major `batch x dim` inputs.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let batch = self.batch_len(x)?;
        let mut logits = Vec::with_capacity(batch * self.classes);
        for row in x.chunks_exact(self.dim) {
            for (w, &b) in self.weights.chunks_exact(self.dim).zip(&self.bias) {
                let dot = w
                    .iter()
                    .zip(row)
                    .fold(T::zero(), |acc, (&wi, &xi)| acc + wi * xi);
                logits.push(dot + b);
            }
        }
        Ok(logits)
    }

    /// Mean softmax cross-entropy and its gradients.
    pub fn loss_and_grads(&self, x: &[T], labels: &[u32]) -> Result<(T, Gradients<T>)> {
        let batch = self.batch_len(x)?;
        if batch != labels.len() {
            return Err(ModelError::Shape(format!(
                "{batch} rows but {} labels",
                labels.len()
            )));
        }
        if batch == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        let logits = self.forward(x)?;
        let inv_batch = T::one() / T::from(batch).expect("batch fits in float");
        let mut loss = T::zero();
        let mut grads = Gradients {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.classes],
        };
        let mut probs = vec![T::zero(); self.classes];
        for ((row, z), &label) in x
            .chunks_exact(self.dim)
            .zip(logits.chunks_exact(self.classes))
            .zip(labels)
        {
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &zk) in probs.iter_mut().zip(z) {
                *p = (zk - max).exp();
                sum = sum + *p;
            }
            // -log softmax(z)[y] = log(sum) - (z_y - max)
            loss = loss + sum.ln() - (z[label as usize] - max);
            for (k, p) in probs.iter_mut().enumerate() {
                *p = *p / sum;
                let delta = if k == label as usize {
                    *p - T::one()
                } else {
                    *p
                };
                let scaled = delta * inv_batch;
                grads.bias[k] = grads.bias[k] + scaled;
                let gw = &mut grads.weights[k * self.dim..(k + 1) * self.dim];
                for (g, &xi) in gw.iter_mut().zip(row) {
                    *g = *g + scaled * xi;
                }
            }
        }
        Ok((loss * inv_batch, grads))
    }

    pub fn sgd_step(&mut self, grads: &Gradients<T>) -> Result<()> {
        if grads.weights.len() != self.weights.len() || grads.bias.len() != self.bias.len() {
            return Err(ModelError::Shape(
                "gradient shapes do not match parameters".into(),
            ));
        }
        let lr = self.learning_rate;
        for (w, &g) in self.weights.iter_mut().zip(&grads.weights) {
            *w = *w - lr * g;
        }
        for (b, &g) in self.bias.iter_mut().zip(&grads.bias) {
            *b = *b - lr * g;
        }
        Ok(())
    }

    /// Forward, loss, backward and update; returns the pre-update loss.
    pub fn train_step(&mut self, x: &[T], labels: &[u32]) -> Result<T> {
        let (loss, grads) = self.loss_and_grads(x, labels)?;
        self.sgd_step(&grads)?;
        Ok(loss)
    }

    pub fn predict(&self, x: &[T]) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(logits
            .chunks_exact(self.classes)
            .map(|z| {
                z.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (k, &v)| {
                        if v > best.1 {
                            (k, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}

/// Touches every element once, then waits a fixed delay.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticConsumer {
    pub delay: Duration,
}

impl SyntheticConsumer {
    pub fn new(delay: Duration) -> Self {
        Self { delay }
    }

    /// Returns the sum of `data`.
    pub fn consume(&self, data: &[f32]) -> f64 {
        let checksum = data.iter().map(|&v| f64::from(v)).sum();
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        checksum
    }
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use super::*;
    use crate::rng::SplitMix64;

    fn random_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect()
    }

    #[test]
    fn forward_examples() {
        let m = LinearModel::<f64>::zeros(3, 4, 0.1);
        assert!(m
            .forward(&[1.0, 2.0, 3.0])
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let m = LinearModel {
            weights: vec![2.0],
            bias: vec![1.0],
            dim: 1,
            classes: 1,
            learning_rate: 0.1,
        };
        assert_eq!(m.forward(&[3.0]).unwrap(), vec![7.0]);
        assert!(m.forward(&[]).unwrap().is_empty());
        let m2 = LinearModel::<f64>::zeros(3, 2, 0.1);
        assert!(matches!(m2.forward(&[1.0, 2.0]), Err(ModelError::Shape(_))));
    }

    #[test]
    fn forward_matches_naive_triple_loop() {
        let mut rng = SplitMix64::new(21);
        let (d, k, b) = (7, 5, 4);
        let m = LinearModel {
            weights: random_vec(&mut rng, d * k),
            bias: random_vec(&mut rng, k),
            dim: d,
            classes: k,
            learning_rate: 0.1,
        };
        let x = random_vec(&mut rng, b * d);
        let got = m.forward(&x).unwrap();
        for i in 0..b {
            for j in 0..k {
                let mut acc = m.bias[j];
                for t in 0..d {
                    acc += m.weights[j * d + t] * x[i * d + t];
                }
                assert!((got[i * k + j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_loss_is_ln_k() {
        let m = LinearModel::<f64>::zeros(6, 20, 0.1);
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let (loss, _) = m.loss_and_grads(&x, &[3, 19]).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-9);
        assert!((loss - 2.9957).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut m = LinearModel::<f64>::zeros(1, 3, 0.1);
        m.bias = vec![0.0, 60.0, 0.0];
        let (loss, _) = m.loss_and_grads(&[1.0], &[1]).unwrap();
        assert!((0.0..1e-20).contains(&loss));
        // Large logits must not overflow.
        m.bias = vec![1e4, 0.0, -1e4];
        let (loss, _) = m.loss_and_grads(&[1.0], &[1]).unwrap();
        assert!((loss - 1e4).abs() < 1e-6);
    }

    #[test]
    fn loss_errors() {
        let m = LinearModel::<f64>::zeros(2, 3, 0.1);
        assert_eq!(
            m.loss_and_grads(&[1.0, 1.0], &[3]).unwrap_err(),
            ModelError::LabelOutOfRange {
                label: 3,
                classes: 3
            }
        );
        assert_eq!(
            m.loss_and_grads(&[], &[]).unwrap_err(),
            ModelError::EmptyBatch
        );
        assert!(m.loss_and_grads(&[1.0, 1.0], &[0, 1]).is_err());
    }

    /// Central finite differences over every parameter.
    fn numeric_grads(m: &LinearModel<f64>, x: &[f64], y: &[u32]) -> Gradients<f64> {
        let h = 1e-6;
        let loss = |m: &LinearModel<f64>| m.loss_and_grads(x, y).unwrap().0;
        let mut g = Gradients {
            weights: vec![0.0; m.weights.len()],
            bias: vec![0.0; m.bias.len()],
        };
        for i in 0..m.weights.len() {
            let mut p = m.clone();
            p.weights[i] += h;
            let mut q = m.clone();
            q.weights[i] -= h;
            g.weights[i] = (loss(&p) - loss(&q)) / (2.0 * h);
        }
        for i in 0..m.bias.len() {
            let mut p = m.clone();
            p.bias[i] += h;
            let mut q = m.clone();
            q.bias[i] -= h;
            g.bias[i] = (loss(&p) - loss(&q)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(99);
        let (d, k, b) = (6, 3, 4);
        let m = LinearModel {
            weights: random_vec(&mut rng, d * k),
            bias: random_vec(&mut rng, k),
            dim: d,
            classes: k,
            learning_rate: 0.1,
        };
        let x = random_vec(&mut rng, b * d);
        let y: Vec<u32> = (0..b).map(|_| rng.below(k as u64) as u32).collect();
        let (_, analytic) = m.loss_and_grads(&x, &y).unwrap();
        let numeric = numeric_grads(&m, &x, &y);
        for (a, n) in analytic
            .weights
            .iter()
            .zip(&numeric.weights)
            .chain(analytic.bias.iter().zip(&numeric.bias))
        {
            assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn sgd_examples() {
        let mut m = LinearModel::<f64> {
            weights: vec![1.0, -2.0],
            bias: vec![0.5],
            dim: 2,
            classes: 1,
            learning_rate: 1.0,
        };
        let before = m.clone();
        m.sgd_step(&Gradients {
            weights: vec![0.0; 2],
            bias: vec![0.0],
        })
        .unwrap();
        assert_eq!(m, before);
        let g = Gradients {
            weights: m.weights.clone(),
            bias: m.bias.clone(),
        };
        m.sgd_step(&g).unwrap();
        assert!(m.weights.iter().chain(&m.bias).all(|&v| v == 0.0));
        assert!(m
            .sgd_step(&Gradients {
                weights: vec![0.0],
                bias: vec![0.0]
            })
            .is_err());
    }

    #[test]
    fn learns_separable_toy_problem() {
        // Two Gaussian-ish blobs separated along the first axis.
        let mut rng = SplitMix64::new(5);
        let n = 40;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let class = (i % 2) as u32;
            let centre = if class == 0 { -2.0 } else { 2.0 };
            x.push(centre + rng.next_f64() - 0.5);
            x.push(rng.next_f64() * 2.0 - 1.0);
            y.push(class);
        }
        let mut m = LinearModel::<f64>::zeros(2, 2, 0.1);
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(m.train_step(&x, &y).unwrap());
        }
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "loss not strictly decreasing"
        );
        let pred = m.predict(&x).unwrap();
        let correct = pred
            .iter()
            .zip(&y)
            .filter(|(p, t)| **p == **t as usize)
            .count();
        assert_eq!(correct, n);
    }

    #[test]
    fn loss_is_bitwise_deterministic() {
        let mut rng = SplitMix64::new(3);
        let m = LinearModel {
            weights: random_vec(&mut rng, 12),
            bias: random_vec(&mut rng, 3),
            dim: 4,
            classes: 3,
            learning_rate: 0.1,
        };
        let x = random_vec(&mut rng, 8);
        let a = m.loss_and_grads(&x, &[0, 2]).unwrap().0;
        let b = m.loss_and_grads(&x, &[0, 2]).unwrap().0;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn synthetic_consumer_checksum_and_delay() {
        let data: Vec<f32> = (0..100).map(|i| i as f32 * 0.5).collect();
        let expected: f64 = (0..100).map(|i| i as f64 * 0.5).sum();
        assert_eq!(SyntheticConsumer::default().consume(&data), expected);

        let c = SyntheticConsumer::new(Duration::from_millis(50));
        let start = Instant::now();
        for _ in 0..10 {
            c.consume(&data);
        }
        assert!(start.elapsed() >= Duration::from_millis(500));
    }
}
