use frf_shm::rng::RngStream;
use frf_shm::tensor::ops::*;
use frf_shm::tensor::Tensor;
use std::time::Instant;

fn time<F: FnMut()>(name: &str, mut f: F) {
    let t0 = Instant::now();
    let reps = 3;
    for _ in 0..reps { f(); }
    println!("{name}: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    let rows = 1792usize; // batch 64 × 28 sensors
    let mut rng = RngStream::new(1);
    // conv2-sized tensors: [1792, 75, 32] -> 64 channels
    let x = Tensor::<f32>::from_fn(&[rows, 75, 32], |_| rng.uniform_in(-1.0, 1.0) as f32);
    let w = Tensor::<f32>::from_fn(&[64, 32, 3], |_| rng.uniform_in(-0.1, 0.1) as f32);
    let b = Tensor::<f32>::zeros(&[64]);
    let y = conv1d_rlc_forward(&x, &w, &b);
    time("conv2 fwd", || { let _ = conv1d_rlc_forward(&x, &w, &b); });
    time("conv2 bwd", || { let _ = conv1d_rlc_backward(&x, &w, &y); });

    let gamma = Tensor::<f32>::full(&[64], 1.0);
    let beta = Tensor::<f32>::zeros(&[64]);
    let mut running = BnRunning::new(64);
    time("bn2 fwd (train)", || { let _ = batchnorm_rlc_forward(&y, &gamma, &beta, &mut running, true, 0.1, 1e-5); });
    let (_, cache) = batchnorm_rlc_forward(&y, &gamma, &beta, &mut running, true, 0.1, 1e-5);
    time("bn2 bwd", || { let _ = batchnorm_rlc_backward(&y, &gamma, &cache, &y); });
    time("relu", || { let _ = relu(&y); });
    time("relu bwd", || { let _ = relu_backward(&y, &y); });
    time("maxpool fwd", || { let _ = maxpool2_rlc_forward(&y); });
    time("maxpool bwd", || { let p = maxpool2_rlc_forward(&y); let _ = maxpool2_rlc_backward(&y, &p); });

    // conv3-sized: [1792, 37, 64] -> 128
    let x3 = Tensor::<f32>::from_fn(&[rows, 37, 64], |_| rng.uniform_in(-1.0, 1.0) as f32);
    let w3 = Tensor::<f32>::from_fn(&[128, 64, 3], |_| rng.uniform_in(-0.1, 0.1) as f32);
    let b3 = Tensor::<f32>::zeros(&[128]);
    let y3 = conv1d_rlc_forward(&x3, &w3, &b3);
    time("conv3 fwd", || { let _ = conv1d_rlc_forward(&x3, &w3, &b3); });
    time("conv3 bwd", || { let _ = conv1d_rlc_backward(&x3, &w3, &y3); });

    // conv4-sized: [1792, 18, 128] -> 128
    let x4 = Tensor::<f32>::from_fn(&[rows, 18, 128], |_| rng.uniform_in(-1.0, 1.0) as f32);
    let w4 = Tensor::<f32>::from_fn(&[128, 128, 3], |_| rng.uniform_in(-0.1, 0.1) as f32);
    let b4 = Tensor::<f32>::zeros(&[128]);
    let y4 = conv1d_rlc_forward(&x4, &w4, &b4);
    time("conv4 fwd", || { let _ = conv1d_rlc_forward(&x4, &w4, &b4); });
    time("conv4 bwd", || { let _ = conv1d_rlc_backward(&x4, &w4, &y4); });

    // conv1-sized: [1792, 150, 1] -> 32
    let x1 = Tensor::<f32>::from_fn(&[rows, 150, 1], |_| rng.uniform_in(-1.0, 1.0) as f32);
    let w1 = Tensor::<f32>::from_fn(&[32, 1, 3], |_| rng.uniform_in(-0.1, 0.1) as f32);
    let b1 = Tensor::<f32>::zeros(&[32]);
    let y1 = conv1d_rlc_forward(&x1, &w1, &b1);
    time("conv1 fwd", || { let _ = conv1d_rlc_forward(&x1, &w1, &b1); });
    time("conv1 bwd", || { let _ = conv1d_rlc_backward(&x1, &w1, &y1); });
}
