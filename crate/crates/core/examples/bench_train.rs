use frf_shm::model::{init_params, model_forward, ModelConfig};
use frf_shm::rng::RngStream;
use frf_shm::tensor::tape::{Mode, Tape};
use frf_shm::tensor::Tensor;
use frf_shm::train::{adam_step, AdamState};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let mut params = init_params::<f32>(&cfg, 1).unwrap();
    let total = params.param_count();
    let mut adam = AdamState::<f32>::new(total);
    let batch = 64usize;
    let mut rng = RngStream::new(2);
    let x = Tensor::<f32>::from_fn(&[batch, 28, 150], |_| rng.uniform_in(-1.0, 1.0) as f32);
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    let weights = [1.0f32, 1.0, 1.0];

    // warmup + timed steps
    let steps = 6;
    let mut dropout_rng = RngStream::new(3);
    let t0 = Instant::now();
    for _ in 0..steps {
        let mut tape = Tape::new(Mode::Train);
        let pass = model_forward(&mut tape, &x, &mut params, &mut dropout_rng).unwrap();
        let ce = tape.cross_entropy(pass.logits, &labels, &weights);
        let l1 = tape.l1_penalty(&pass.classifier_attention_weights, 1e-4);
        let loss = tape.add(ce, l1);
        let grads = tape.backward(loss);
        let mut flat_grads: Vec<f32> = Vec::with_capacity(total);
        for (&var, slot) in pass.param_vars.iter().zip(params.learnable_mut()) {
            match grads.get(var) {
                Some(g) => flat_grads.extend_from_slice(g.data()),
                None => flat_grads.extend(std::iter::repeat(0.0f32).take(slot.numel())),
            }
        }
        let mut flat_params: Vec<f32> = Vec::with_capacity(total);
        for slot in params.learnable_mut() {
            flat_params.extend_from_slice(slot.data());
        }
        adam_step(&mut flat_params, &flat_grads, &mut adam, 1e-4, 0.9, 0.999, 1e-8).unwrap();
        let mut offset = 0;
        for slot in params.learnable_mut() {
            let n = slot.numel();
            slot.data_mut().copy_from_slice(&flat_params[offset..offset + n]);
            offset += n;
        }
    }
    let per_step = t0.elapsed().as_secs_f64() / steps as f64;
    let samples_per_sec = batch as f64 / per_step;
    println!("fwd+bwd+adam: {:.0} ms/step (batch {batch}), {:.0} samples/s", per_step * 1e3, samples_per_sec);
    // criterion-5 projection: 5 folds x 60 epochs x 6300 samples
    let total_samples = 5.0 * 60.0 * 6300.0;
    println!("criterion-5 worst case: {:.0} min", total_samples / samples_per_sec / 60.0);

    // eval-only throughput
    let t0 = Instant::now();
    for _ in 0..steps {
        let _ = frf_shm::model::forward_eval(&x, &params).unwrap();
    }
    let eval_step = t0.elapsed().as_secs_f64() / steps as f64;
    println!("eval: {:.0} ms/step, {:.0} samples/s", eval_step * 1e3, batch as f64 / eval_step);
}
