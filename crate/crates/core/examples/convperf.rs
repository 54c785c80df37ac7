use dce_core::tensor::{ops, GradientTape, Shape, Tensor};
use std::time::Instant;

fn main() {
    let cases = [
        ("l4 widest", 4usize, 445usize, 32usize, 32usize, 32usize),
        ("l4 first", 4, 29, 128, 32, 32),
        ("l4 mid", 4, 285, 96, 32, 32),
        ("l3 widest", 4, 443, 32, 16, 16),
        ("refine4 d16", 4, 96, 64, 32, 32),
    ];
    for (name, n, cin, cout, h, w) in cases {
        let x = Tensor::param(Shape::new(n, cin, h, w), vec![0.1f32; n * cin * h * w]).unwrap();
        let wt = Tensor::param(
            Shape::new(cout, cin, 3, 3),
            vec![0.01f32; cout * cin * 9],
        )
        .unwrap();
        let macs = (n * cout * h * w * 9 * cin) as f64;

        let t0 = Instant::now();
        let reps = 6;
        for _ in 0..reps {
            let tape = GradientTape::disabled();
            let y = ops::conv2d(&tape, &x, &wt, None, 1, 1, 1).unwrap();
            std::hint::black_box(y.data()[0]);
        }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64;

        let t0 = Instant::now();
        for _ in 0..reps {
            let tape = GradientTape::new();
            let y = ops::conv2d(&tape, &x, &wt, None, 1, 1, 1).unwrap();
            let loss = ops::sum_all(&tape, &y);
            dce_core::tensor::backward(&loss, tape).unwrap();
            x.clear_grad();
            wt.clear_grad();
        }
        let total = t0.elapsed().as_secs_f64() / reps as f64;

        println!(
            "{name:12} fwd {:7.2} ms ({:6.2} GFLOP/s) | fwd+bwd {:7.2} ms ({:6.2} GFLOP/s eff)",
            fwd * 1e3,
            2.0 * macs / fwd / 1e9,
            total * 1e3,
            3.0 * 2.0 * macs / total / 1e9,
        );
    }
}
