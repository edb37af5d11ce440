#![allow(dead_code)]

pub mod grad_suite;
pub mod oracles;

use drowsy_core::numerics::Tensor;
use rand::seq::index::sample;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Maximum relative error accepted by gradient checks.
pub const TOL_FD: f64 = 1e-4;

/// Relative error with a floor on the denominator so that entries where
/// both gradients vanish do not dominate.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite differences of `f` over the listed tensors, compared with
/// `analytic`. Checks at most `max_per_tensor` randomly chosen entries per
/// tensor (all entries when `None`). Returns the maximum relative error.
pub fn fd_check<R: Rng>(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> f64,
    max_per_tensor: Option<usize>,
    rng: &mut R,
) -> f64 {
    assert_eq!(inputs.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[ti].shape());
        let n = inputs[ti].len();
        let idx: Vec<usize> = match max_per_tensor {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + FD_STEP;
            let up = f(&work);
            work[ti].data_mut()[i] = orig - FD_STEP;
            let down = f(&work);
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    worst
}

/// Weighted sum `sum(w * y)`: a scalar probe whose output gradient is `w`.
pub fn probe(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Re-run the network's per-second stack with the unfused reference ops,
/// returning each stage's per-plane shape `[C, H, W]` and the final features.
pub fn reference_chain(
    net: &drowsy_core::model::Network<f64>,
    input: &Tensor<f64>,
) -> (Vec<Vec<usize>>, Tensor<f64>) {
    use drowsy_core::numerics::ops::*;
    let p = &net.params;
    let mut shapes = vec![input.shape()[1..].to_vec()];
    let wide = conv2d(input, &p.temporal.value, Some(&p.temporal_bias.value), Padding::Same).unwrap();
    shapes.push(wide.shape()[1..].to_vec());
    let spatial = depthwise_conv2d(&wide, &p.spatial.value, Some(&p.spatial_bias.value), Padding::Valid, Activation::Tanh)
        .unwrap();
    shapes.push(spatial.shape()[1..].to_vec());
    let pool1 = avgpool2d(&spatial).unwrap();
    shapes.push(pool1.shape()[1..].to_vec());
    let sep = separable_conv2d(
        &pool1,
        &p.separable_depth.value,
        &p.separable_point.value,
        Some(&p.separable_bias.value),
        Padding::Same,
        Activation::Tanh,
    )
    .unwrap();
    shapes.push(sep.shape()[1..].to_vec());
    let pool2 = avgpool2d(&sep).unwrap();
    shapes.push(pool2.shape()[1..].to_vec());

    let (n, c, h, w) = pool2.dims4("reference").unwrap();
    let batch = n / 3;
    let hidden = p.lstm_bias.value.len() / 4;
    let mut hs = Tensor::zeros(&[batch, hidden, h, w]);
    let mut cs = Tensor::zeros(&[batch, hidden, h, w]);
    for t in 0..3 {
        let mut x = Tensor::zeros(&[batch, c, h, w]);
        for b in 0..batch {
            x.slice_outer_mut(b).copy_from_slice(pool2.slice_outer(3 * b + t));
        }
        let (hn, cn, _) = conv_lstm_step(&x, &hs, &cs, &p.lstm_kernel.value, &p.lstm_bias.value).unwrap();
        hs = hn;
        cs = cn;
    }
    let features = hs.reshape(&[batch, hidden * h * w]).unwrap();
    shapes.push(features.shape()[1..].to_vec());
    (shapes, features)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The Table I per-plane shape chain, from input to flattened features.
pub const TABLE_CHAIN: [&[usize]; 7] = [
    &[1, 30, 128],
    &[32, 30, 128],
    &[32, 1, 128],
    &[32, 1, 64],
    &[32, 1, 64],
    &[32, 1, 32],
    &[1024],
];

/// Check the default-geometry network of `variant` against the Table I
/// chain and its head layout; returns a description of the first mismatch.
pub fn check_shape_chain(variant: drowsy_core::model::Variant, seed: u64) -> Result<(), String> {
    use drowsy_core::model::{Network, NetworkConfig, Variant};
    use drowsy_core::preproc::SegmentState;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let net = Network::<f64>::new(NetworkConfig { variant, ..NetworkConfig::default() }, &mut rng).unwrap();
    let seg = SegmentState {
        index: 0,
        t_start_s: 0.0,
        channels: 30,
        samples_per_plane: 128,
        planes: Tensor::<f64>::uniform(&[3 * 30 * 128], 1.0, &mut rng).into_data(),
        measured_rt: None,
    };
    let input = net.batch_input(&[&seg]).map_err(|e| e.to_string())?;
    if input.shape() != [3, 1, 30, 128] {
        return Err(format!("input {:?}", input.shape()));
    }
    let (shapes, reference) = reference_chain(&net, &input);
    let expected: Vec<Vec<usize>> = TABLE_CHAIN.iter().map(|s| s.to_vec()).collect();
    if shapes != expected {
        return Err(format!("chain {shapes:?}"));
    }
    let features = net.forward_features(&[&seg]).map_err(|e| e.to_string())?;
    if features.shape() != [1, 1024] || max_abs_diff(features.data(), reference.data()) > 1e-12 {
        return Err("fused features differ from the reference chain".into());
    }
    let hidden_ok = net.params.streams.iter().all(|s| s.hidden_w.shape() == [512, 1024]);
    let outs: Vec<usize> = net.params.streams.iter().map(|s| s.out_w.shape()[0]).collect();
    let want = match variant {
        Variant::Supervised => vec![1],
        Variant::Dueling => vec![1, 16],
        _ => vec![16],
    };
    if !hidden_ok || outs != want {
        return Err(format!("head streams {outs:?}"));
    }
    let out = net.forward(&[&seg]).map_err(|e| e.to_string())?;
    if out.shape() != [1, *want.last().unwrap()] {
        return Err(format!("output {:?}", out.shape()));
    }
    Ok(())
}
