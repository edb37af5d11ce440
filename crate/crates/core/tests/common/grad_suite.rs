//! Finite-difference checks of every differentiable operation. Each check
//! returns `(label, max relative error)` pairs; callers decide on tolerance.

use drowsy_core::model::{Network, NetworkConfig, Variant};
use drowsy_core::numerics::ops::*;
use drowsy_core::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fd_check, probe};

pub type Report = Vec<(String, f64)>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn conv2d_gradients() -> Report {
    let mut out = Vec::new();
    for (seed, padding, kshape) in [
        (1, Padding::Same, [3, 2, 2, 3]),
        (2, Padding::Valid, [3, 2, 2, 3]),
        (3, Padding::Same, [4, 2, 1, 1]),
    ] {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[2, 2, 4, 6], 1.0, &mut r);
        let k = Tensor::uniform(&kshape, 1.0, &mut r);
        let b = Tensor::uniform(&[kshape[0]], 1.0, &mut r);
        let y = conv2d(&x, &k, Some(&b), padding).unwrap();
        let w = Tensor::uniform(y.shape(), 1.0, &mut r);
        let g = conv2d_backward(&x, &k, padding, &w).unwrap();
        let err = fd_check(
            &[x, k, b],
            &[g.input, g.kernel, g.bias],
            |t| probe(&conv2d(&t[0], &t[1], Some(&t[2]), padding).unwrap(), &w),
            None,
            &mut r,
        );
        out.push((format!("conv2d {padding:?} {kshape:?}"), err));
    }
    out
}

pub fn depthwise_gradients() -> Report {
    let mut out = Vec::new();
    let mut r = rng(10);
    let x = Tensor::uniform(&[2, 3, 5, 6], 1.0, &mut r);
    let k = Tensor::uniform(&[3, 5, 1], 0.5, &mut r);
    let b = Tensor::uniform(&[3], 0.5, &mut r);
    for padding in [Padding::Valid, Padding::Same] {
        let y = depthwise_conv2d(&x, &k, Some(&b), padding, Activation::Tanh).unwrap();
        let w = Tensor::uniform(y.shape(), 1.0, &mut r);
        let g = depthwise_conv2d_backward(&x, &k, padding, Activation::Tanh, &y, &w).unwrap();
        let err = fd_check(
            &[x.clone(), k.clone(), b.clone()],
            &[g.input, g.kernel, g.bias],
            |t| probe(&depthwise_conv2d(&t[0], &t[1], Some(&t[2]), padding, Activation::Tanh).unwrap(), &w),
            None,
            &mut r,
        );
        out.push((format!("depthwise {padding:?}"), err));
    }
    out
}

pub fn separable_gradients() -> Report {
    let mut r = rng(20);
    let x = Tensor::uniform(&[2, 3, 1, 8], 1.0, &mut r);
    let d = Tensor::uniform(&[3, 1, 4], 0.5, &mut r);
    let p = Tensor::uniform(&[4, 3, 1, 1], 0.5, &mut r);
    let b = Tensor::uniform(&[4], 0.5, &mut r);
    let y = separable_conv2d(&x, &d, &p, Some(&b), Padding::Same, Activation::Tanh).unwrap();
    let w = Tensor::uniform(y.shape(), 1.0, &mut r);
    let g = separable_conv2d_backward(&x, &d, &p, Padding::Same, Activation::Tanh, &y, &w).unwrap();
    let err = fd_check(
        &[x, d, p, b],
        &[g.input, g.depth_kernel, g.point_kernel, g.bias],
        |t| {
            probe(
                &separable_conv2d(&t[0], &t[1], &t[2], Some(&t[3]), Padding::Same, Activation::Tanh).unwrap(),
                &w,
            )
        },
        None,
        &mut r,
    );
    vec![("separable".into(), err)]
}

pub fn avgpool_gradients() -> Report {
    let mut r = rng(30);
    let x = Tensor::uniform(&[2, 2, 3, 5], 1.0, &mut r);
    let y = avgpool2d(&x).unwrap();
    let w = Tensor::uniform(y.shape(), 1.0, &mut r);
    let g = avgpool2d_backward(x.shape(), &w).unwrap();
    let err = fd_check(&[x], &[g], |t| probe(&avgpool2d(&t[0]).unwrap(), &w), None, &mut r);
    vec![("avgpool".into(), err)]
}

pub fn linear_gradients() -> Report {
    let mut r = rng(40);
    let x = Tensor::uniform(&[3, 7], 1.0, &mut r);
    let wt = Tensor::uniform(&[5, 7], 1.0, &mut r);
    let b = Tensor::uniform(&[5], 1.0, &mut r);
    let y = linear(&x, &wt, &b).unwrap();
    let w = Tensor::uniform(y.shape(), 1.0, &mut r);
    let g = linear_backward(&x, &wt, &w).unwrap();
    let err = fd_check(
        &[x, wt, b],
        &[g.input, g.weight, g.bias],
        |t| probe(&linear(&t[0], &t[1], &t[2]).unwrap(), &w),
        None,
        &mut r,
    );
    vec![("linear".into(), err)]
}

pub fn conv_lstm_gradients() -> Report {
    let mut r = rng(50);
    let (n, cx, ch, w) = (2, 3, 2, 6);
    let x = Tensor::uniform(&[n, cx, 1, w], 1.0, &mut r);
    let h = Tensor::uniform(&[n, ch, 1, w], 1.0, &mut r);
    let c = Tensor::uniform(&[n, ch, 1, w], 1.0, &mut r);
    let k = Tensor::uniform(&[4 * ch, cx + ch, 1, 4], 0.5, &mut r);
    let b = Tensor::uniform(&[4 * ch], 0.5, &mut r);
    let (hn, cn, cache) = conv_lstm_step(&x, &h, &c, &k, &b).unwrap();
    let wh = Tensor::uniform(hn.shape(), 1.0, &mut r);
    let wc = Tensor::uniform(cn.shape(), 1.0, &mut r);
    let g = conv_lstm_step_backward(&cache, &k, &wh, &wc).unwrap();
    let err = fd_check(
        &[x, h, c, k, b],
        &[g.x, g.h, g.c, g.kernel, g.bias],
        |t| {
            let (hn, cn, _) = conv_lstm_step(&t[0], &t[1], &t[2], &t[3], &t[4]).unwrap();
            probe(&hn, &wh) + probe(&cn, &wc)
        },
        None,
        &mut r,
    );
    vec![("conv-lstm step".into(), err)]
}

pub fn squared_error_gradient() -> Report {
    let mut r = rng(60);
    let p = Tensor::uniform(&[6], 2.0, &mut r);
    let target = Tensor::uniform(&[6], 2.0, &mut r);
    let (_, g) = squared_error_loss(&p, &target).unwrap();
    let err = fd_check(&[p], &[g], |t| squared_error_loss(&t[0], &target).unwrap().0, None, &mut r);
    vec![("squared-error loss".into(), err)]
}

pub fn temporal_spatial_gradients() -> Report {
    let mut r = rng(71);
    let x = Tensor::<f64>::uniform(&[2, 1, 4, 9], 1.0, &mut r);
    let k1 = Tensor::uniform(&[3, 1, 1, 4], 0.5, &mut r);
    let b1 = Tensor::uniform(&[3], 0.5, &mut r);
    let dw = Tensor::uniform(&[3, 4, 1], 0.5, &mut r);
    let b2 = Tensor::uniform(&[3], 0.5, &mut r);
    let y = temporal_spatial_conv(&x, &k1, &b1, &dw, &b2, Activation::Tanh).unwrap();
    let w = Tensor::uniform(y.shape(), 1.0, &mut r);
    let g = temporal_spatial_conv_backward(&x, &k1, &b1, &dw, Activation::Tanh, &y, &w).unwrap();
    let err = fd_check(
        &[k1, b1, dw, b2],
        &[g.temporal, g.temporal_bias, g.spatial, g.spatial_bias],
        |t| probe(&temporal_spatial_conv(&x, &t[0], &t[1], &t[2], &t[3], Activation::Tanh).unwrap(), &w),
        None,
        &mut r,
    );
    vec![("temporal-spatial conv".into(), err)]
}

pub fn small_network(variant: Variant, seed: u64) -> Network<f64> {
    let config = NetworkConfig {
        variant,
        n_actions: 3,
        channels: 4,
        samples_per_subsecond: 16,
        hidden: 6,
        ..NetworkConfig::default()
    };
    Network::new(config, &mut rng(seed)).unwrap()
}

/// Full backbone plus head, every parameter tensor, for every variant.
pub fn full_network_gradients() -> Report {
    let mut out = Vec::new();
    for (seed, variant) in [(80, Variant::Supervised), (81, Variant::Dqn), (82, Variant::Double), (83, Variant::Dueling)] {
        let mut r = rng(seed);
        let mut net = small_network(variant, seed);
        let input = Tensor::uniform(&[6, 1, 4, 16], 1.0, &mut r);
        let cache = net.forward_train(input.clone()).unwrap();
        let w = Tensor::uniform(cache.output().shape(), 1.0, &mut r);
        net.params.zero_grad();
        net.backward(&cache, &w).unwrap();

        let values: Vec<Tensor<f64>> = net.params.iter().iter().map(|p| p.value.clone()).collect();
        let grads: Vec<Tensor<f64>> = net.params.iter().iter().map(|p| p.grad.clone().unwrap()).collect();
        let template = net.clone();
        let err = fd_check(
            &values,
            &grads,
            |t| {
                let mut n = template.clone();
                for (p, v) in n.params.iter_mut().into_iter().zip(t) {
                    p.value = v.clone();
                }
                let f = n.features_from_input(&input).unwrap();
                probe(&n.head_output(&f).unwrap(), &w)
            },
            Some(8),
            &mut r,
        );
        out.push((format!("network {variant}"), err));
    }
    out
}

/// Gradient of `max_a Q(s, a)` with respect to the features.
pub fn max_q_feature_gradient() -> Report {
    let mut out = Vec::new();
    for (seed, variant) in [(84, Variant::Dqn), (85, Variant::Dueling)] {
        let mut r = rng(seed);
        let net = small_network(variant, seed);
        let input = Tensor::uniform(&[3, 1, 4, 16], 1.0, &mut r);
        let cache = net.forward_train(input).unwrap();
        let q = cache.output().data().to_vec();
        let best = (0..q.len()).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap();
        let mut onehot = Tensor::zeros(cache.output().shape());
        onehot.data_mut()[best] = 1.0;
        let mut head = net.clone();
        let d_features = head.head_backward(&cache, &onehot).unwrap();
        let err = fd_check(
            &[cache.features().clone()],
            &[d_features],
            |t| net.q_values(&t[0]).unwrap().data().iter().copied().fold(f64::MIN, f64::max),
            None,
            &mut r,
        );
        out.push((format!("max-Q features {variant}"), err));
    }
    out
}

/// Every check in the suite.
pub fn all() -> Report {
    [
        conv2d_gradients(),
        depthwise_gradients(),
        separable_gradients(),
        avgpool_gradients(),
        linear_gradients(),
        conv_lstm_gradients(),
        squared_error_gradient(),
        temporal_spatial_gradients(),
        full_network_gradients(),
        max_q_feature_gradient(),
    ]
    .concat()
}
