//! Central finite-difference checks of the analytic gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-4;

/// Deterministic values in `[-1, 1)` (SplitMix64).
pub fn pseudo_random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed;
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Builds `loss = sum(f(inputs) * r)` for a fixed pseudo-random `r` and
/// compares the gradient of every input against central differences.
///
/// Returns the worst relative error over the inputs, measured as
/// `|analytic - numeric| / |numeric|` in the L2 norm.
pub fn relative_error<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars);
        g.shape(y).to_vec()
    };
    let weights = pseudo_random(&out_shape, seed);

    let loss_of = |ins: &[Tensor<f64>], track: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let y = f(&mut g, &vars);
        let r = g.constant(weights.clone());
        let prod = g.mul(y, r).expect("weights match the output shape");
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0];
        if !track {
            return (value, Vec::new());
        }
        g.backward(loss).expect("scalar loss");
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    };

    let (_, analytic) = loss_of(inputs, true);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        let mut shifted = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = input.data()[i];
            shifted[k].data_mut()[i] = x + FD_STEP;
            let plus = loss_of(&shifted, false).0;
            shifted[k].data_mut()[i] = x - FD_STEP;
            let minus = loss_of(&shifted, false).0;
            shifted[k].data_mut()[i] = x;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let diff = analytic[k].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    worst
}

/// Relative gradient error of every differentiable primitive on fixed inputs.
pub fn primitive_suite() -> Vec<(&'static str, f64)> {
    let r = pseudo_random;
    let mut out = Vec::new();
    let (x, w, b) = (r(&[2, 3, 8, 8], 1), r(&[4, 3, 3, 3], 2), r(&[4], 3));
    out.push(("conv2d", relative_error(&[x, w, b], 4, |g, v| g.conv2d(v[0], v[1], v[2], 1, 1).unwrap())));
    let (x, w, b) = (r(&[1, 2, 7, 6], 5), r(&[3, 2, 3, 3], 6), r(&[3], 7));
    out.push(("conv2d_strided", relative_error(&[x, w, b], 8, |g, v| g.conv2d(v[0], v[1], v[2], 2, 1).unwrap())));
    let (x, w, b) = (r(&[2, 5, 4, 4], 9), r(&[6, 5, 1, 1], 10), r(&[6], 11));
    out.push(("conv2d_pointwise", relative_error(&[x, w, b], 12, |g, v| g.conv2d(v[0], v[1], v[2], 1, 0).unwrap())));
    let (x, w, b) = (r(&[5, 7], 13), r(&[4, 7], 14), r(&[4], 15));
    out.push(("linear", relative_error(&[x, w, b], 16, |g, v| g.linear(v[0], v[1], v[2]).unwrap())));
    let (x, w, b) = (r(&[2, 3, 7], 17), r(&[4, 7], 18), r(&[4], 19));
    out.push(("linear_batched", relative_error(&[x, w, b], 20, |g, v| g.linear(v[0], v[1], v[2]).unwrap())));

    let x = r(&[2, 3, 4, 6], 21);
    out.push(("relu", relative_error(std::slice::from_ref(&x), 22, |g, v| g.relu(v[0]))));
    out.push(("max_pool2d", relative_error(std::slice::from_ref(&x), 23, |g, v| g.max_pool2d(v[0]).unwrap())));
    out.push(("avg_pool2d", relative_error(std::slice::from_ref(&x), 24, |g, v| g.avg_pool2d(v[0]).unwrap())));
    out.push(("upsample2x", relative_error(std::slice::from_ref(&x), 25, |g, v| g.upsample2x(v[0]).unwrap())));
    let y = r(&[2, 2, 4, 6], 26);
    out.push(("concat", relative_error(&[x, y], 27, |g, v| g.concat(v[0], v[1], 1).unwrap())));

    let f = r(&[2, 3, 5, 6], 28);
    let offsets = r(&[2, 9, 2], 29);
    let coords = Tensor::from_fn(&[2, 9, 2], |i| {
        if i % 7 == 0 {
            -3.0
        } else {
            2.0 + 1.9 * offsets.data()[i]
        }
    });
    out.push(("grid_sample_bilinear", relative_error(&[f], 30, move |g, v| g.grid_sample_bilinear(v[0], &coords).unwrap())));

    let x = r(&[3, 4, 5], 31);
    for axis in 0..3 {
        let name = ["max_axis0", "max_axis1", "max_axis2"][axis];
        out.push((name, relative_error(std::slice::from_ref(&x), 32, |g, v| g.max_axis(v[0], axis).unwrap())));
        let name = ["mean_axis0", "mean_axis1", "mean_axis2"][axis];
        out.push((name, relative_error(std::slice::from_ref(&x), 33, |g, v| g.mean_axis(v[0], axis).unwrap())));
    }
    out.push(("permute", relative_error(std::slice::from_ref(&x), 34, |g, v| g.permute(v[0], &[2, 0, 1]).unwrap())));
    out.push(("reshape", relative_error(std::slice::from_ref(&x), 35, |g, v| g.reshape(v[0], &[12, 5]).unwrap())));
    let y = r(&[3, 4, 5], 36);
    out.push(("mul", relative_error(&[x.clone(), y.clone()], 38, |g, v| g.mul(v[0], v[1]).unwrap())));
    out.push((
        "sum",
        relative_error(std::slice::from_ref(&x), 39, |g, v| {
            let s = g.sum(v[0]);
            g.reshape(s, &[1]).unwrap()
        }),
    ));
    out.push((
        "mse_loss",
        relative_error(&[x, y], 40, |g, v| {
            let l = g.mse_loss(v[0], v[1]).unwrap();
            g.reshape(l, &[1]).unwrap()
        }),
    ));
    out
}
