use frf_shm::scalar::Scalar;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    // warmup
    f32::gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
    let t0 = Instant::now();
    for _ in 0..reps {
        f32::gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let gflops = 2.0 * (m * k * n) as f64 / dt / 1e9;
    println!("gemm {}x{}x{}: {:.1} ms, {:.1} GFLOP/s", m, k, n, dt * 1e3, gflops);
}

fn main() {
    // conv shapes at batch 64 (rows = 64*28 = 1792)
    bench(1792 * 150, 3, 32, 5);    // conv1
    bench(1792 * 75, 96, 64, 5);    // conv2
    bench(1792 * 37, 192, 128, 5);  // conv3
    bench(1792 * 18, 384, 128, 5);  // conv4
    bench(1792, 128, 128, 20);      // linear-ish
    bench(512, 512, 512, 20);       // generic
}
