use frf_shm::shadow::{generate_dataset, GeneratorConfig, PlantedConfig};
use frf_shm::{FREQ_POINTS, SENSOR_COUNT};

fn main() {
    let planted = vec![4usize, 11, 22];
    let config = GeneratorConfig {
        planted: Some(PlantedConfig { sensors: planted.clone(), gain: 2.5 }),
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(&config).unwrap();
    let dim = SENSOR_COUNT * FREQ_POINTS;
    let mut means = vec![vec![0.0f64; dim]; 3];
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
    let sensor_gap = |a: usize, b: usize, j: usize| -> f64 {
        (0..FREQ_POINTS).map(|f| (means[a][j*FREQ_POINTS+f] - means[b][j*FREQ_POINTS+f]).powi(2)).sum::<f64>().sqrt()
    };
    let mut max_np = 0.0f64;
    let mut min_p = f64::INFINITY;
    for j in 0..SENSOR_COUNT {
        let gap = sensor_gap(0,1,j) + sensor_gap(0,2,j) + sensor_gap(1,2,j);
        if planted.contains(&j) { min_p = min_p.min(gap); println!("planted {j}: {gap:.1}"); }
        else { max_np = max_np.max(gap); }
    }
    println!("max non-planted gap: {max_np:.2}, min planted gap: {min_p:.1}, dominance {:.0}x", min_p / max_np);
}
