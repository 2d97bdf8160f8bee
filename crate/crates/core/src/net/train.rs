//! Cross-entropy training with plain minibatch SGD.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{forward_frames, layers, NetError, NetworkParams};
use crate::config::KvConfig;
use crate::dsp::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random crop length used for each training example (`None` = whole utterance).
    pub chunk_frames: Option<usize>,
    /// Rescale the batch gradient to at most this L2 norm (`None` = off).
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            chunk_frames: None,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, NetError> {
        let e = |e: crate::config::ConfigError| NetError::InvalidConfig(e.to_string());
        let d = Self::default();
        let chunk: usize = kv.get_or("train.chunk_frames", 0).map_err(e)?;
        let clip: f64 = kv.get_or("train.max_grad_norm", 0.0).map_err(e)?;
        let cfg = Self {
            learning_rate: kv.get_or("train.learning_rate", d.learning_rate).map_err(e)?,
            batch_size: kv.get_or("train.batch_size", d.batch_size).map_err(e)?,
            epochs: kv.get_or("train.epochs", d.epochs).map_err(e)?,
            seed: kv.get_or("seed", d.seed).map_err(e)?,
            chunk_frames: (chunk > 0).then_some(chunk),
            max_grad_norm: (clip > 0.0).then_some(clip),
        };
        if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) {
            return Err(NetError::InvalidConfig("batch_size must be positive, learning_rate nonnegative".into()));
        }
        Ok(cfg)
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

fn example_gradient(params: &NetworkParams, frames: ArrayView2<f64>, label: usize) -> Result<(f64, NetworkParams), NetError> {
    let cache = forward_frames(params, frames)?;
    let k = params.config.frame_layers.len();
    let mut grads = NetworkParams::zeros(params.config.clone());

    let (loss, dlogits) = layers::softmax_xent(cache.logits.view(), label);

    let out = &params.layers[k + 2];
    grads.layers[k + 2].weight = outer(dlogits.view(), cache.segment7_out.view());
    grads.layers[k + 2].bias = dlogits.clone();
    let mut d7: Array1<f64> = out.weight.t().dot(&dlogits);
    layers::relu_backward(&mut d7, &cache.segment7_out);

    let seg7 = &params.layers[k + 1];
    grads.layers[k + 1].weight = outer(d7.view(), cache.segment6_out.view());
    let mut d6: Array1<f64> = seg7.weight.t().dot(&d7);
    grads.layers[k + 1].bias = d7;
    layers::relu_backward(&mut d6, &cache.segment6_out);

    let seg6 = &params.layers[k];
    grads.layers[k].weight = outer(d6.view(), cache.pooled.view());
    let dpooled = seg6.weight.t().dot(&d6);
    grads.layers[k].bias = d6;

    let mut dh = layers::stats_pool_backward(cache.frame_out[k - 1].view(), &cache.pool, dpooled.view());
    for i in (0..k).rev() {
        layers::relu_backward(&mut dh, &cache.frame_out[i]);
        let g = layers::affine_rows_backward(cache.spliced[i].view(), params.layers[i].weight.view(), dh.view(), i > 0);
        grads.layers[i].weight = g.weight;
        grads.layers[i].bias = g.bias;
        if i > 0 {
            let t_in = cache.frame_out[i - 1].nrows();
            dh = layers::unsplice(g.input.view(), &params.config.frame_layers[i].context, t_in);
        }
    }
    Ok((loss, grads))
}

fn batch_gradient(params: &NetworkParams, batch: &[(ArrayView2<f64>, usize)]) -> Result<(f64, NetworkParams), NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let n = params.num_classes();
    if let Some(&(_, label)) = batch.iter().find(|(_, l)| *l >= n) {
        return Err(NetError::InvalidLabel { label, num_classes: n });
    }
    // per-example work may run in parallel; the reduction order is fixed
    let parts: Vec<(f64, NetworkParams)> = batch
        .par_iter()
        .map(|(f, l)| example_gradient(params, f.view(), *l))
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = NetworkParams::zeros(params.config.clone());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(g, scale);
    }
    Ok((loss * scale, total))
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_gradient(params: &NetworkParams, batch: &[(&FeatureMatrix, usize)]) -> Result<(f64, NetworkParams), NetError> {
    let views: Vec<_> = batch.iter().map(|(f, l)| (f.frames.view(), *l)).collect();
    batch_gradient(params, &views)
}

fn apply_step(params: &mut NetworkParams, loss: f64, mut grad: NetworkParams, config: &TrainConfig) -> Result<f64, NetError> {
    if !loss.is_finite() {
        return Err(NetError::NonFiniteLoss);
    }
    if let Some(max) = config.max_grad_norm {
        let norm = grad.squared_norm().sqrt();
        if norm > max {
            let factor = max / norm;
            for l in &mut grad.layers {
                l.weight *= factor;
                l.bias *= factor;
            }
        }
    }
    if config.learning_rate != 0.0 {
        params.add_scaled(&grad, -config.learning_rate);
    }
    Ok(loss)
}

/// One SGD update on `batch`; returns the loss before the update.
pub fn train_step(params: &mut NetworkParams, batch: &[(&FeatureMatrix, usize)], config: &TrainConfig) -> Result<f64, NetError> {
    let (loss, grad) = loss_and_gradient(params, batch)?;
    apply_step(params, loss, grad, config)
}

/// Runs `config.epochs` passes over `data` in seeded shuffled minibatches,
/// calling `on_step(step, loss)` after every update. Returns the per-step
/// losses.
pub fn train(
    params: &mut NetworkParams,
    data: &[(FeatureMatrix, usize)],
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, NetError> {
    if data.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let min_frames = params.config.receptive_field();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(ArrayView2<f64>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let (f, label) = &data[i];
                    let t = f.num_frames();
                    let view = match config.chunk_frames {
                        Some(c) if t > c.max(min_frames) => {
                            let len = c.max(min_frames);
                            let start = rng.random_range(0..=t - len);
                            f.frames.slice(s![start..start + len, ..])
                        }
                        _ => f.frames.view(),
                    };
                    (view, *label)
                })
                .collect();
            let (loss, grad) = batch_gradient(params, &batch)?;
            let loss = apply_step(params, loss, grad, config)?;
            losses.push(loss);
            log::info!("step {} loss {:.6}", losses.len(), loss);
            on_step(losses.len(), loss);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::super::{init_network, NetConfig};
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn tiny() -> NetworkParams {
        init_network(NetConfig::with_dims(4, [6, 6, 5, 5, 7], 6, 5, 3), 11).unwrap()
    }

    fn random_features(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(Array2::from_shape_fn((t, d), |_| rng.random_range(-2.0..2.0)), 0.01)
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut p = tiny();
        let before = p.clone();
        let f = random_features(20, 4, 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let loss = train_step(&mut p, &[(&f, 1)], &cfg).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn bad_batches() {
        let mut p = tiny();
        let f = random_features(20, 4, 1);
        let cfg = TrainConfig::default();
        assert_eq!(train_step(&mut p, &[], &cfg), Err(NetError::EmptyBatch));
        assert!(matches!(train_step(&mut p, &[(&f, 3)], &cfg), Err(NetError::InvalidLabel { .. })));
        let mut blown = p.clone();
        blown.layers.last_mut().unwrap().bias[0] = f64::NAN;
        assert_eq!(train_step(&mut blown, &[(&f, 0)], &cfg), Err(NetError::NonFiniteLoss));
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let p = tiny();
        let f = random_features(22, 4, 5);
        let label = 2;
        let (_, grad) = loss_and_gradient(&p, &[(&f, label)]).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for li in 0..p.layers.len() {
            for idx in (0..p.layers[li].weight.len()).step_by(3) {
                let (r, c) = (idx / p.layers[li].weight.ncols(), idx % p.layers[li].weight.ncols());
                let mut plus = p.clone();
                plus.layers[li].weight[[r, c]] += h;
                let mut minus = p.clone();
                minus.layers[li].weight[[r, c]] -= h;
                let lp = loss_and_gradient(&plus, &[(&f, label)]).unwrap().0;
                let lm = loss_and_gradient(&minus, &[(&f, label)]).unwrap().0;
                worst = worst.max(rel_err(grad.layers[li].weight[[r, c]], (lp - lm) / (2.0 * h)));
            }
            for b in 0..p.layers[li].bias.len() {
                let mut plus = p.clone();
                plus.layers[li].bias[b] += h;
                let mut minus = p.clone();
                minus.layers[li].bias[b] -= h;
                let lp = loss_and_gradient(&plus, &[(&f, label)]).unwrap().0;
                let lm = loss_and_gradient(&minus, &[(&f, label)]).unwrap().0;
                worst = worst.max(rel_err(grad.layers[li].bias[b], (lp - lm) / (2.0 * h)));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn separable_training_reduces_loss() {
        let mut p = init_network(NetConfig::with_dims(4, [8, 8, 8, 8, 8], 8, 8, 2), 3).unwrap();
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<(FeatureMatrix, usize)> = (0..20)
            .map(|i| {
                let label = i % 2;
                let shift = if label == 0 { 1.0 } else { -1.0 };
                let frames = Array2::from_shape_fn((20, 4), |(_, d)| shift * (d as f64 + 1.0) * 0.5 + noise.sample(&mut rng));
                (FeatureMatrix::new(frames, 0.01), label)
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 4,
            epochs: 10,
            seed: 1,
            ..TrainConfig::default()
        };
        let batch: Vec<(&FeatureMatrix, usize)> = data.iter().map(|(f, l)| (f, *l)).collect();
        let initial = loss_and_gradient(&p, &batch).unwrap().0;
        let losses = train(&mut p, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(losses.len(), 50);
        let after = loss_and_gradient(&p, &batch).unwrap().0;
        assert!(after < initial, "{after} >= {initial}");
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<(FeatureMatrix, usize)> = (0..6).map(|i| (random_features(30, 4, i), (i % 3) as usize)).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 2,
            chunk_frames: Some(18),
            ..TrainConfig::default()
        };
        let mut a = tiny();
        let mut b = tiny();
        let la = train(&mut a, &data, &cfg, |_, _| {}).unwrap();
        let lb = train(&mut b, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }
}
