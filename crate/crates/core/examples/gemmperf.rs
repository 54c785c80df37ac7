use ndarray::{Array2, ArrayView2};
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize) {
    let a = Array2::<f32>::from_elem((m, k), 0.01);
    let b = Array2::<f32>::from_elem((k, n), 0.02);
    let mut c = Array2::<f32>::zeros((m, n));
    let reps = 8;
    let t0 = Instant::now();
    for _ in 0..reps {
        ndarray::linalg::general_mat_mul(
            1.0,
            &ArrayView2::from(&a),
            &ArrayView2::from(&b),
            0.0,
            &mut c,
        );
        std::hint::black_box(c[[0, 0]]);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * (m * k * n) as f64;
    println!(
        "gemm {m}x{k}x{n}: {:8.2} ms  {:6.2} GFLOP/s",
        dt * 1e3,
        flops / dt / 1e9
    );
}

fn main() {
    bench(32, 445 * 9, 1024); // l4 widest conv as GEMM
    bench(128, 29 * 9, 1024); // l4 first conv
    bench(96, 285 * 9, 1024);
    bench(32, 443 * 9, 256); // l3 widest
    bench(64, 96 * 9, 1024); // refine
    bench(512, 512, 512);
}
