use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BatchNorm, MlpModel, BN_EPSILON};
use crate::error::{Error, Result};

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn add_bias(a: &mut Array2<f64>, b: &Array1<f64>) {
    *a += b;
}

fn bn_infer(bn: &BatchNorm, a: &mut Array2<f64>) {
    let scale: Array1<f64> = bn.running_var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt()) * &bn.gamma;
    let shift: Array1<f64> = &bn.beta - &(&bn.running_mean * &scale);
    *a *= &scale;
    *a += &shift;
}

/// Inference pass on standardized inputs.
pub(crate) fn infer(model: &MlpModel, mut h: Array2<f64>) -> Array2<f64> {
    let last = model.layers.len() - 1;
    for (i, layer) in model.layers.iter().enumerate() {
        let mut a = h.dot(&layer.w);
        add_bias(&mut a, &layer.b);
        if i < last {
            if let Some(bn) = &model.norms[i] {
                bn_infer(bn, &mut a);
            }
            a.mapv_inplace(relu);
        }
        h = a;
    }
    h
}

pub(crate) enum Mode<'a> {
    /// Batch statistics in batch norm, dropout on.
    Train(&'a mut ChaCha8Rng),
    /// Batch statistics, no dropout.
    BatchStats,
    /// Running statistics, no dropout.
    Eval,
}

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    training: bool,
}

struct HiddenCache {
    input: Array2<f64>,
    /// Value entering the ReLU.
    pre: Array2<f64>,
    bn: Option<BnCache>,
    /// Inverted-dropout multipliers.
    drop: Option<Array2<f64>>,
}

pub(crate) struct Cache {
    hidden: Vec<HiddenCache>,
    last_input: Array2<f64>,
}

impl Cache {
    /// Batch means and variances of each batch-normed layer.
    pub(crate) fn batch_stats(&self) -> impl Iterator<Item = Option<(&Array1<f64>, &Array1<f64>)>> {
        self.hidden.iter().map(|h| {
            h.bn.as_ref()
                .filter(|b| b.training)
                .map(|b| (&b.batch_mean, &b.batch_var))
        })
    }
}

pub(crate) fn forward(
    model: &MlpModel,
    x: ArrayView2<'_, f64>,
    mut mode: Mode<'_>,
) -> (Array2<f64>, Cache) {
    let last = model.layers.len() - 1;
    let mut h = x.to_owned();
    let mut hidden = Vec::with_capacity(last);
    for (i, layer) in model.layers[..last].iter().enumerate() {
        let mut a = h.dot(&layer.w);
        add_bias(&mut a, &layer.b);
        let bn = model.norms[i].as_ref().map(|bn| match mode {
            Mode::Train(_) | Mode::BatchStats => {
                let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
                let var = a.var_axis(Axis(0), 0.0);
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
                let xhat = (&a - &mean) * &inv_std;
                BnCache {
                    xhat,
                    inv_std,
                    batch_mean: mean,
                    batch_var: var,
                    training: true,
                }
            }
            Mode::Eval => {
                let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
                let xhat = (&a - &bn.running_mean) * &inv_std;
                BnCache {
                    xhat,
                    inv_std,
                    batch_mean: Array1::zeros(0),
                    batch_var: Array1::zeros(0),
                    training: false,
                }
            }
        });
        let pre = match (&bn, &model.norms[i]) {
            (Some(c), Some(p)) => &c.xhat * &p.gamma + &p.beta,
            _ => a,
        };
        let mut out = pre.mapv(relu);
        let drop = match &mut mode {
            Mode::Train(rng) if model.config.dropout > 0.0 => {
                let p = model.config.dropout;
                let keep = 1.0 / (1.0 - p);
                let mask = Array2::from_shape_simple_fn(out.dim(), || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                out *= &mask;
                Some(mask)
            }
            _ => None,
        };
        hidden.push(HiddenCache {
            input: h,
            pre,
            bn,
            drop,
        });
        h = out;
    }
    let layer = &model.layers[last];
    let mut y = h.dot(&layer.w);
    add_bias(&mut y, &layer.b);
    (
        y,
        Cache {
            hidden,
            last_input: h,
        },
    )
}

/// Parameter gradients, laid out like the model.
#[derive(Clone, Debug)]
pub(crate) struct Grads {
    pub dense: Vec<(Array2<f64>, Array1<f64>)>,
    pub bn: Vec<Option<(Array1<f64>, Array1<f64>)>>,
}

impl Grads {
    pub(crate) fn views(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.dense.iter().enumerate() {
            out.push(w.view().into_dyn());
            out.push(b.view().into_dyn());
            if let Some(Some((g, be))) = self.bn.get(i) {
                out.push(g.view().into_dyn());
                out.push(be.view().into_dyn());
            }
        }
        out
    }
}

impl MlpModel {
    /// Trainable parameters in the same order as [`Grads::views`].
    pub(crate) fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for layer in self.layers.iter_mut() {
            out.push(layer.w.view_mut().into_dyn());
            out.push(layer.b.view_mut().into_dyn());
            if let Some(Some(bn)) = norms.next() {
                out.push(bn.gamma.view_mut().into_dyn());
                out.push(bn.beta.view_mut().into_dyn());
            }
        }
        out
    }
}

/// Backpropagates `d_out`, the loss gradient at the network output.
pub(crate) fn backward(model: &MlpModel, cache: &Cache, d_out: Array2<f64>) -> Grads {
    let last = model.layers.len() - 1;
    let mut dense = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); model.layers.len()];
    let mut bn = vec![None; last];

    let out_layer = &model.layers[last];
    dense[last] = (cache.last_input.t().dot(&d_out), d_out.sum_axis(Axis(0)));
    let mut dh = d_out.dot(&out_layer.w.t());

    for i in (0..last).rev() {
        let c = &cache.hidden[i];
        if let Some(mask) = &c.drop {
            dh *= mask;
        }
        ndarray::Zip::from(&mut dh).and(&c.pre).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let da = match (&c.bn, &model.norms[i]) {
            (Some(bc), Some(p)) => {
                let dgamma = (&dh * &bc.xhat).sum_axis(Axis(0));
                let dbeta = dh.sum_axis(Axis(0));
                let dxhat = &dh * &p.gamma;
                let da = if bc.training {
                    let b = dxhat.nrows() as f64;
                    let s1 = dxhat.sum_axis(Axis(0));
                    let s2 = (&dxhat * &bc.xhat).sum_axis(Axis(0));
                    ((&dxhat * b) - &s1 - &(&bc.xhat * &s2)) * &(&bc.inv_std / b)
                } else {
                    dxhat * &bc.inv_std
                };
                bn[i] = Some((dgamma, dbeta));
                da
            }
            _ => dh,
        };
        dense[i] = (c.input.t().dot(&da), da.sum_axis(Axis(0)));
        dh = if i > 0 {
            da.dot(&model.layers[i].w.t())
        } else {
            Array2::zeros((0, 0))
        };
    }
    Grads { dense, bn }
}

/// Mean squared error and its gradient with respect to `pred`.
pub(crate) fn mse(pred: &Array2<f64>, target: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let diff = pred - &target;
    let n = diff.len().max(1) as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Largest relative discrepancy between backpropagated and central
/// finite-difference gradients of the loss at one sample, in inference
/// mode. `z` and `x` are raw (unstandardized) features and state.
pub fn grad_check(model: &MlpModel, z: &[f64], x: &[f64], epsilon: f64) -> Result<f64> {
    if z.len() != model.n_inputs() || x.len() != model.n_outputs() {
        return Err(Error::Dimension(format!(
            "gradient check needs {} features and {} states, got {} and {}",
            model.n_inputs(),
            model.n_outputs(),
            z.len(),
            x.len()
        )));
    }
    let zin = model
        .input_norm
        .forward(ArrayView2::from_shape((1, z.len()), z).expect("row"));
    let target = model
        .output_norm
        .forward(ArrayView2::from_shape((1, x.len()), x).expect("row"));
    Ok(grad_check_batch(
        model,
        zin.view(),
        target.view(),
        epsilon,
        false,
    ))
}

/// Gradient check on standardized inputs and targets, optionally with batch
/// statistics in the batch-norm layers.
pub(crate) fn grad_check_batch(
    model: &MlpModel,
    z: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    epsilon: f64,
    batch_stats: bool,
) -> f64 {
    let mut scratch = model.clone();
    let mode = |m: &MlpModel| {
        forward(
            m,
            z,
            if batch_stats {
                Mode::BatchStats
            } else {
                Mode::Eval
            },
        )
    };
    let (pred, cache) = mode(&scratch);
    let (_, d_out) = mse(&pred, target);
    let grads = backward(&scratch, &cache, d_out);
    let analytic: Vec<Vec<f64>> = grads
        .views()
        .iter()
        .map(|v| v.iter().copied().collect())
        .collect();

    let loss = |m: &MlpModel| mse(&mode(m).0, target).0;
    // Entries below this are lost in the rounding of the central difference.
    let floor = 1e-5 * loss(&scratch).abs().max(1.0);
    let mut worst: f64 = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        for (j, &ga) in g.iter().enumerate() {
            let set = |m: &mut MlpModel, v: f64| {
                let mut p = m.param_views_mut().swap_remove(k);
                let slot = &mut p.as_slice_mut().expect("standard layout")[j];
                std::mem::replace(slot, v)
            };
            let orig = set(&mut scratch, 0.0);
            set(&mut scratch, orig + epsilon);
            let up = loss(&scratch);
            set(&mut scratch, orig - epsilon);
            let down = loss(&scratch);
            set(&mut scratch, orig);
            let fd = (up - down) / (2.0 * epsilon);
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Standardizer;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(g: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(g)
    }

    fn unif(g: &mut ChaCha8Rng) -> f64 {
        rand::Rng::random(g)
    }

    fn random_net(sizes: &[usize], batch_norm: bool, seed: u64) -> MlpModel {
        let mut g = rng::stream(seed, "test-net");
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let w_ = Array2::from_shape_simple_fn((w[0], w[1]), || {
                normal(&mut g) / (w[0] as f64).sqrt()
            });
            let b = Array1::from_shape_simple_fn(w[1], || 0.1 * normal(&mut g));
            layers.push((w_, b));
        }
        let mut m = MlpModel::from_layers(layers).unwrap();
        if batch_norm {
            for i in 0..m.norms.len() {
                let n = m.layers[i].w.ncols();
                m.norms[i] = Some(BatchNorm {
                    gamma: Array1::from_shape_simple_fn(n, || 1.0 + 0.2 * unif(&mut g)),
                    beta: Array1::from_shape_simple_fn(n, || 0.1 * normal(&mut g)),
                    running_mean: Array1::from_shape_simple_fn(n, || 0.1 * normal(&mut g)),
                    running_var: Array1::from_shape_simple_fn(n, || 0.5 + unif(&mut g)),
                });
            }
            m.config.batch_norm = true;
        }
        m
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut g = rng::stream(seed, "test-vec");
        (0..n).map(|_| normal(&mut g)).collect()
    }

    #[test]
    fn linear_model_gradient_is_exact() {
        let net = random_net(&[3, 2], false, 1);
        let err = grad_check(&net, &random_vec(3, 2), &random_vec(2, 3), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_network_has_zero_gradients_past_dead_layer() {
        let layers = vec![
            (Array2::zeros((3, 4)), Array1::zeros(4)),
            (Array2::zeros((4, 4)), Array1::zeros(4)),
            (Array2::zeros((4, 2)), Array1::zeros(2)),
        ];
        let net = MlpModel::from_layers(layers).unwrap();
        let z = Array2::from_shape_vec((1, 3), vec![0.3, -0.2, 1.0]).unwrap();
        let (pred, cache) = forward(&net, z.view(), Mode::Eval);
        let (_, d) = mse(&pred, Array2::zeros((1, 2)).view());
        let g = backward(&net, &cache, d);
        for (w, b) in &g.dense[1..] {
            assert!(w.iter().all(|&v| v == 0.0));
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn inference_matches_eval_forward() {
        let net = random_net(&[4, 6, 5, 3], true, 5);
        let z = Array2::from_shape_vec((2, 4), random_vec(8, 6)).unwrap();
        let a = infer(&net, z.clone());
        let (b, _) = forward(&net, z.view(), Mode::Eval);
        assert!((a - b).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn batch_norm_training_mode_gradient() {
        let net = random_net(&[3, 5, 4, 2], true, 11);
        let z = Array2::from_shape_vec((6, 3), random_vec(18, 12)).unwrap();
        let y = Array2::from_shape_vec((6, 2), random_vec(12, 13)).unwrap();
        let err = grad_check_batch(&net, z.view(), y.view(), 1e-6, true);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn dropout_masks_are_inverted() {
        let mut net = random_net(&[4, 200, 2], false, 3);
        net.config.dropout = 0.3;
        let z = Array2::from_shape_vec((50, 4), random_vec(200, 4)).unwrap();
        let mut g = rng::stream(9, "dropout");
        let (_, cache) = forward(&net, z.view(), Mode::Train(&mut g));
        let mask = cache.hidden[0].drop.as_ref().unwrap();
        let keep = 1.0 / 0.7;
        assert!(mask.iter().all(|&m| m == 0.0 || m == keep));
        let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64;
        assert!((dropped - 0.3).abs() < 0.02, "{dropped}");
    }

    #[test]
    fn standardized_check_matches_raw_check() {
        let mut net = random_net(&[2, 3, 1], false, 21);
        net.input_norm = Standardizer {
            mean: vec![1.0, -2.0],
            std: vec![0.5, 3.0],
            floored: vec![false; 2],
        };
        net.output_norm = Standardizer {
            mean: vec![4.0],
            std: vec![2.0],
            floored: vec![false],
        };
        let err = grad_check(&net, &[1.3, -1.0], &[4.5], 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn backprop_matches_finite_differences(
            depth in 1usize..=5,
            width in 2usize..6,
            batch_norm in any::<bool>(),
            seed in 0u64..10_000,
        ) {
            let mut sizes = vec![3];
            sizes.extend(std::iter::repeat_n(width, depth - 1));
            sizes.push(2);
            let net = random_net(&sizes, batch_norm, seed);
            let z = random_vec(3, seed + 1);
            let x = random_vec(2, seed + 2);
            // Skip draws where a hidden unit sits on the ReLU kink.
            let zin = Array2::from_shape_vec((1, 3), z.clone()).unwrap();
            let (_, cache) = forward(&net, zin.view(), Mode::Eval);
            prop_assume!(cache.hidden.iter().all(|h| h.pre.iter().all(|p| p.abs() > 1e-4)));
            let err = grad_check(&net, &z, &x, 1e-6).unwrap();
            prop_assert!(err < 1e-4, "relative error {}", err);
        }
    }
}
