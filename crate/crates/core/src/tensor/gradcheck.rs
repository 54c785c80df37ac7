//! Central finite-difference gradient verification.
//!
//! Used by the test suites to pin every differentiable operation against an
//! independent numeric oracle (f64, central differences). Lives in the
//! library because f64 verification is part of the engine contract.

use super::{backward, GradientTape, Scalar, Tensor};

/// Result of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs()))
}

/// Compare analytic gradients of `f` (a scalar-valued graph over `inputs`)
/// against central finite differences with step `h`.
///
/// Every input is treated as trainable. `f` must be deterministic and free
/// of internal state for the comparison to be meaningful; batch-norm running
/// stats, which the forward pass mutates, do not affect its output.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> GradCheck
where
    F: Fn(&GradientTape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.data().to_vec()).unwrap())
        .collect();

    let tape = GradientTape::new();
    let loss = f(&tape, &params);
    backward(&loss, tape).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> f64 {
        let tape = GradientTape::disabled();
        f(&tape, probe).scalar().expect("scalar loss")
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let mut probe: Vec<Tensor<f64>> = params.iter().map(Tensor::detach).collect();
            let mut plus = p.data().to_vec();
            plus[j] += h;
            probe[pi] = Tensor::from_vec(p.shape(), plus).unwrap();
            let lp = eval(&probe);

            let mut minus = p.data().to_vec();
            minus[j] -= h;
            probe[pi] = Tensor::from_vec(p.shape(), minus).unwrap();
            let lm = eval(&probe);

            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[pi][j], numeric));
            checked += 1;
        }
    }
    GradCheck {
        max_rel_err: worst,
        checked,
    }
}

/// Deterministic pseudo-random tensor in [-1, 1), seeded; independent of the
/// engine's training RNG so oracle inputs stay stable.
pub fn seeded_tensor<T: Scalar>(shape: super::Shape, seed: u64) -> Tensor<T> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0xD1B54A32D192ED03);
    let data = (0..shape.numel())
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            T::cast(((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, Shape};

    #[test]
    fn relu_sum_pipeline_passes() {
        let x = seeded_tensor::<f64>(Shape::new(1, 2, 3, 3), 42);
        let res = check_gradients(&[x], |tape, ins| ops::sum_all(tape, &ops::relu(tape, &ins[0])), 1e-5);
        assert!(res.max_rel_err < 1e-4, "{res:?}");
    }

    #[test]
    fn conv_bn_relu_sum_pipeline_passes() {
        let x = seeded_tensor::<f64>(Shape::new(2, 2, 4, 4), 1);
        let w = seeded_tensor::<f64>(Shape::new(3, 2, 3, 3), 2);
        let b = seeded_tensor::<f64>(Shape::new(1, 3, 1, 1), 3);
        let gamma = seeded_tensor::<f64>(Shape::new(1, 3, 1, 1), 4);
        let beta = seeded_tensor::<f64>(Shape::new(1, 3, 1, 1), 5);
        let res = check_gradients(
            &[x, w, b, gamma, beta],
            |tape, ins| {
                let stats = ops::RunningStats::new(3);
                let y = ops::conv2d(tape, &ins[0], &ins[1], Some(&ins[2]), 1, 1, 1).unwrap();
                let y = ops::batch_norm(tape, &y, &ins[3], &ins[4], &stats, true).unwrap();
                ops::sum_all(tape, &ops::relu(tape, &y))
            },
            1e-5,
        );
        assert!(res.max_rel_err < 1e-4, "{res:?}");
    }
}
