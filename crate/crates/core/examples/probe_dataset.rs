use frf_shm::dataset::FEATURE_DIM;
use frf_shm::shadow::{generate_dataset, GeneratorConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let ds = generate_dataset(&GeneratorConfig { seed, ..GeneratorConfig::default() }).unwrap();
    println!("generated {} samples in {:.2}s", ds.len(), t0.elapsed().as_secs_f64());
    println!("class counts: {:?}", ds.class_counts());

    let max = ds.features.iter().cloned().fold(0.0f32, f32::max);
    println!("max magnitude: {max:.1}");

    // per-class mean/std over all entries + per-feature class means
    for cls in 0..3 {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == cls as u8).collect();
        let n = idx.len() * FEATURE_DIM;
        let mean: f64 = idx.iter().map(|&i| ds.features_of(i).iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / n as f64;
        let var: f64 = idx.iter().map(|&i| ds.features_of(i).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()).sum::<f64>() / n as f64;
        println!("class {cls}: n={}, amplitude mean {:.1}, std {:.2}, 10% sigma {:.2}", idx.len(), mean, var.sqrt(), 0.1 * var.sqrt());
    }

    // separability: RMS distance between class means vs within-class RMS std
    let mut means = vec![vec![0.0f64; FEATURE_DIM]; 3];
    let mut counts = [0usize; 3];
    for i in 0..ds.len() {
        let c = ds.labels[i] as usize;
        counts[c] += 1;
        for (m, &v) in means[c].iter_mut().zip(ds.features_of(i)) {
            *m += v as f64;
        }
    }
    for c in 0..3 {
        for m in means[c].iter_mut() { *m /= counts[c] as f64; }
    }
    let mut within = [0.0f64; 3];
    for i in 0..ds.len() {
        let c = ds.labels[i] as usize;
        for (m, &v) in means[c].iter().zip(ds.features_of(i)) {
            within[c] += (v as f64 - m).powi(2);
        }
    }
    let rms_std: Vec<f64> = (0..3).map(|c| (within[c] / (counts[c] * FEATURE_DIM) as f64).sqrt()).collect();
    println!("within-class RMS std: {:?}", rms_std.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>());
    for a in 0..3 {
        for b in (a+1)..3 {
            let d2: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / FEATURE_DIM as f64;
            let d = d2.sqrt();
            let envelope = rms_std[a].max(rms_std[b]);
            println!("classes {a}-{b}: RMS mean gap {:.1}, envelope {:.1}, ratio {:.2}", d, envelope, d / envelope);
        }
    }
}
