//! Synthetic digital shadow of the probe head.
//!
//! Generates FRF datasets whose structure mirrors finite-element data:
//! a modal basis (natural frequencies, damping, per-sensor participation)
//! is perturbed per scenario — material/temperature/load variations scale
//! all frequencies, damage shifts a class-specific mode subset and amplifies
//! participation around the damaged region — and the frequency response is
//! evaluated by modal superposition over a 150-point 400-4000 Hz grid.

pub mod signature;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result, FREQ_POINTS, SENSOR_COUNT};

use signature::{
    crack_modes, crack_neighborhood, crack_shift, screw_modes, screw_nearest_sensors,
    screw_shift, CRACK_COUNT, SCREW_COUNT,
};

/// Health-state classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DamageClass {
    Baseline,
    LooseScrew,
    Crack,
}

impl DamageClass {
    pub const ALL: [DamageClass; 3] = [DamageClass::Baseline, DamageClass::LooseScrew, DamageClass::Crack];

    pub fn index(self) -> usize {
        match self {
            DamageClass::Baseline => 0,
            DamageClass::LooseScrew => 1,
            DamageClass::Crack => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(DamageClass::Baseline),
            1 => Ok(DamageClass::LooseScrew),
            2 => Ok(DamageClass::Crack),
            _ => Err(Error::Data(format!("class index {i} out of range"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DamageClass::Baseline => "baseline",
            DamageClass::LooseScrew => "loose_screw",
            DamageClass::Crack => "crack",
        }
    }
}

/// Environmental temperatures simulated per scenario, in °C.
pub const TEMPERATURES: [f64; 5] = [25.0, 100.0, 150.0, 200.0, 250.0];
/// Distributed chuck loads simulated per scenario, in MPa.
pub const LOADS: [f64; 5] = [0.1, 0.5, 1.0, 1.5, 2.0];

/// One simulated physical condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDescriptor {
    pub damage_class: DamageClass,
    /// Screw 1-21 or crack 1-8; absent for the baseline.
    pub damage_index: Option<u8>,
    /// Material case 1-5.
    pub material_case: u8,
    /// °C, one of [`TEMPERATURES`].
    pub temperature: f64,
    /// MPa, one of [`LOADS`].
    pub load: f64,
}

impl ScenarioDescriptor {
    pub fn validate(&self) -> Result<()> {
        match (self.damage_class, self.damage_index) {
            (DamageClass::Baseline, None) => {}
            (DamageClass::Baseline, Some(i)) => {
                return Err(Error::Data(format!("baseline scenario carries damage index {i}")))
            }
            (DamageClass::LooseScrew, Some(i)) if (1..=SCREW_COUNT as u8).contains(&i) => {}
            (DamageClass::Crack, Some(i)) if (1..=CRACK_COUNT as u8).contains(&i) => {}
            (cls, idx) => {
                return Err(Error::Data(format!("damage index {idx:?} invalid for {cls:?}")))
            }
        }
        if !(1..=5).contains(&self.material_case) {
            return Err(Error::Data(format!("material case {} out of 1..=5", self.material_case)));
        }
        if !TEMPERATURES.contains(&self.temperature) {
            return Err(Error::Data(format!("temperature {} not in the simulated set", self.temperature)));
        }
        if !LOADS.contains(&self.load) {
            return Err(Error::Data(format!("load {} not in the simulated set", self.load)));
        }
        Ok(())
    }
}

/// Material properties of one simulated case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialCase {
    /// Silicon-nitride guide-plate density, kg/m³.
    pub sin_density: f64,
    /// Silicon-nitride Young's modulus, GPa.
    pub sin_young: f64,
    /// Metal-alloy housing density, kg/m³.
    pub meal_density: f64,
    /// Metal-alloy Young's modulus, GPa.
    pub meal_young: f64,
}

/// The five simulated material cases: nominal, all-min, all-max and the two
/// mixed extremes.
pub const MATERIAL_CASES: [MaterialCase; 5] = [
    MaterialCase { sin_density: 3230.0, sin_young: 310.0, meal_density: 8150.0, meal_young: 145.0 },
    MaterialCase { sin_density: 3069.0, sin_young: 279.0, meal_density: 7987.0, meal_young: 138.0 },
    MaterialCase { sin_density: 3392.0, sin_young: 341.0, meal_density: 8313.0, meal_young: 152.0 },
    MaterialCase { sin_density: 3069.0, sin_young: 341.0, meal_density: 8313.0, meal_young: 138.0 },
    MaterialCase { sin_density: 3392.0, sin_young: 279.0, meal_density: 7987.0, meal_young: 152.0 },
];

/// Modal surrogate for the probe head: a bank of damped single-degree-of-
/// freedom modes observed through per-sensor participation coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalBasis {
    /// Hz, strictly positive, ascending.
    pub natural_frequencies: Vec<f64>,
    /// Dimensionless, in (0, 1).
    pub damping_ratios: Vec<f64>,
    /// `[sensor][mode]`, m/s² per unit excitation.
    pub participation: Vec<f64>,
    pub sensor_count: usize,
}

impl ModalBasis {
    pub fn mode_count(&self) -> usize {
        self.natural_frequencies.len()
    }

    pub fn participation_at(&self, sensor: usize, mode: usize) -> f64 {
        self.participation[sensor * self.mode_count() + mode]
    }

    pub fn validate(&self) -> Result<()> {
        if self.natural_frequencies.is_empty() {
            return Err(Error::Data("modal basis has no modes".into()));
        }
        let mut prev = 0.0;
        for &f in &self.natural_frequencies {
            if f <= prev {
                return Err(Error::Data(format!("natural frequencies not ascending at {f} Hz")));
            }
            prev = f;
        }
        if self.damping_ratios.iter().any(|&z| z <= 0.0 || z >= 1.0) {
            return Err(Error::Data("damping ratios must lie in (0, 1)".into()));
        }
        if self.participation.len() != self.sensor_count * self.mode_count() {
            return Err(Error::Data("participation matrix shape mismatch".into()));
        }
        Ok(())
    }
}

/// Planted-signal mode: damage manifests only as participation changes at
/// the listed sensors, with no global frequency shifts, so those sensors are
/// the only class-informative ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    pub sensors: Vec<usize>,
    /// Participation gain applied at the planted sensors.
    #[serde(default = "default_planted_gain")]
    pub gain: f64,
}

fn default_planted_gain() -> f64 {
    2.5
}

/// Generator configuration. Condition-shift coefficients are module
/// constants surfaced here; defaults keep condition-induced variation below
/// damage-induced variation so classes stay separable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub mode_count: usize,
    /// SiN fraction in the effective-property blends.
    pub blend_weight: f64,
    /// Stiffness softening per °C above 25.
    pub temp_softening: f64,
    /// Stiffness gain per MPa of chuck load.
    pub load_stiffening: f64,
    /// Class-common participation boost on screw-affected modes, applied at
    /// every sensor. Drives the between-class contrast.
    pub screw_common_gain: f64,
    /// Extra participation gain at the 3 sensors nearest the loose screw.
    pub screw_local_gain: f64,
    /// Damping multiplier on screw-affected modes; friction at a loosened
    /// joint dissipates energy, broadening those resonances.
    pub screw_damping_scale: f64,
    /// Class-common participation boost on crack-affected modes.
    pub crack_common_gain: f64,
    /// Extra participation gain on the cracked plate's sensor neighborhood.
    pub crack_local_gain: f64,
    /// Damping multiplier on crack-affected modes.
    pub crack_damping_scale: f64,
    /// Relative per-sample participation jitter.
    pub sample_jitter: f64,
    /// Overall participation amplitude scale (sets the m/s² range).
    pub participation_scale: f64,
    pub planted: Option<PlantedConfig>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 1,
            mode_count: 12,
            blend_weight: 0.5,
            temp_softening: 5e-5,
            load_stiffening: 5e-3,
            screw_common_gain: 7.0,
            screw_local_gain: 0.6,
            screw_damping_scale: 4.0,
            crack_common_gain: 14.0,
            crack_local_gain: 0.7,
            crack_damping_scale: 5.0,
            sample_jitter: 0.005,
            participation_scale: 1.0e9,
            planted: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode_count < 1 {
            return Err(Error::Config("mode_count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.blend_weight) {
            return Err(Error::Config("blend_weight must be in [0, 1]".into()));
        }
        if let Some(p) = &self.planted {
            if p.sensors.is_empty() {
                return Err(Error::Config("planted sensor set must be non-empty".into()));
            }
            if p.sensors.iter().any(|&j| j >= SENSOR_COUNT) {
                return Err(Error::Config("planted sensor index out of range".into()));
            }
        }
        Ok(())
    }
}

/// All 3750 scenarios: one baseline, 21 loose screws and 8 cracks, each
/// crossed with 5 material × 5 temperature × 5 load variants. Ordering is
/// deterministic: baseline, screws 1-21, cracks 1-8; within each base,
/// material-major, then temperature, then load.
pub fn enumerate_scenarios() -> Vec<ScenarioDescriptor> {
    let mut bases: Vec<(DamageClass, Option<u8>)> = vec![(DamageClass::Baseline, None)];
    for s in 1..=SCREW_COUNT as u8 {
        bases.push((DamageClass::LooseScrew, Some(s)));
    }
    for c in 1..=CRACK_COUNT as u8 {
        bases.push((DamageClass::Crack, Some(c)));
    }

    let mut out = Vec::with_capacity(bases.len() * 125);
    for (damage_class, damage_index) in bases {
        for material_case in 1..=5u8 {
            for &temperature in &TEMPERATURES {
                for &load in &LOADS {
                    out.push(ScenarioDescriptor {
                        damage_class,
                        damage_index,
                        material_case,
                        temperature,
                        load,
                    });
                }
            }
        }
    }
    out
}

/// The uniform 150-point frequency grid spanning 400-4000 Hz inclusive.
pub fn frequency_grid() -> Vec<f64> {
    let step = (4000.0 - 400.0) / (FREQ_POINTS - 1) as f64;
    (0..FREQ_POINTS).map(|i| 400.0 + step * i as f64).collect()
}

/// Deterministic modal basis for the undamaged nominal structure.
///
/// Frequencies are stratified across the 400-4000 Hz band so every draw
/// yields distinct, ascending resonances; damping ratios sit in the lightly
/// damped 0.01-0.05 range; participation combines a smooth spatial harmonic
/// per mode with small per-coefficient jitter.
pub fn synthesize_modal_basis(seed: u64, mode_count: usize) -> Result<ModalBasis> {
    if mode_count < 1 {
        return Err(Error::Config(format!("mode_count must be >= 1, got {mode_count}")));
    }
    let mut rng = RngStream::new(seed).derive_named("modal-basis", 0);
    let band = (430.0, 3960.0); // margin keeps shifted modes inside 400-4000
    let slot = (band.1 - band.0) / mode_count as f64;
    let natural_frequencies: Vec<f64> = (0..mode_count)
        .map(|k| band.0 + slot * (k as f64 + 0.15 + 0.7 * rng.uniform()))
        .collect();
    let damping_ratios: Vec<f64> = (0..mode_count).map(|_| rng.uniform_in(0.01, 0.05)).collect();

    let mut participation = vec![0.0; SENSOR_COUNT * mode_count];
    let tau = std::f64::consts::TAU;
    for k in 0..mode_count {
        let lobes = 1.0 + (k % 5) as f64;
        let phase = rng.uniform_in(0.0, tau);
        let amp = rng.uniform_in(0.5, 1.0);
        for j in 0..SENSOR_COUNT {
            let theta = tau * j as f64 / SENSOR_COUNT as f64;
            let shape = (lobes * theta + phase).cos();
            let jitter = 0.1 * rng.normal();
            participation[j * mode_count + k] = amp * (shape + jitter);
        }
    }

    let basis = ModalBasis {
        natural_frequencies,
        damping_ratios,
        participation,
        sensor_count: SENSOR_COUNT,
    };
    basis.validate()?;
    Ok(basis)
}

/// Frequency scale factor of a material case relative to nominal:
/// sqrt of the effective stiffness-to-density ratio change.
pub fn material_factor(case: &MaterialCase, blend_weight: f64) -> f64 {
    let nominal = &MATERIAL_CASES[0];
    let blend = |sin: f64, meal: f64| blend_weight * sin + (1.0 - blend_weight) * meal;
    let e_ratio = blend(case.sin_young, case.meal_young) / blend(nominal.sin_young, nominal.meal_young);
    let rho_ratio =
        blend(case.sin_density, case.meal_density) / blend(nominal.sin_density, nominal.meal_density);
    (e_ratio / rho_ratio).sqrt()
}

/// Monotone softening factor for temperatures above the 25 °C reference.
pub fn temperature_factor(temperature: f64, softening: f64) -> f64 {
    1.0 - softening * (temperature - 25.0)
}

/// Monotone stiffening factor for the applied chuck load.
pub fn load_factor(load: f64, stiffening: f64) -> f64 {
    1.0 + stiffening * load
}

/// Applies a scenario's condition and damage signature to the nominal basis.
///
/// Condition effects scale every natural frequency by a common factor.
/// Damage shifts its class mode subset down and rescales participation with
/// the focus-sensor profile from [`signature`]. In planted mode the damage
/// leaves frequencies untouched and perturbs participation only at the
/// planted sensors.
pub fn apply_condition_shift(
    basis: &ModalBasis,
    scenario: &ScenarioDescriptor,
    config: &GeneratorConfig,
) -> Result<ModalBasis> {
    basis.validate()?;
    scenario.validate()?;
    let mode_count = basis.mode_count();

    let case = &MATERIAL_CASES[(scenario.material_case - 1) as usize];
    let condition = material_factor(case, config.blend_weight)
        * temperature_factor(scenario.temperature, config.temp_softening)
        * load_factor(scenario.load, config.load_stiffening);

    let mut out = basis.clone();
    for f in &mut out.natural_frequencies {
        *f *= condition;
    }

    let planted = config.planted.as_ref();
    match (scenario.damage_class, scenario.damage_index) {
        (DamageClass::Baseline, _) => {}
        (DamageClass::LooseScrew, Some(s)) => {
            let s = s as usize;
            let modes = screw_modes(mode_count);
            if let Some(p) = planted {
                apply_planted(&mut out, &modes, &p.sensors, p.gain * (0.6 + 0.4 * s as f64 / SCREW_COUNT as f64));
            } else {
                let shift = screw_shift(s);
                for &k in &modes {
                    out.natural_frequencies[k] *= 1.0 - shift;
                    out.damping_ratios[k] = (out.damping_ratios[k] * config.screw_damping_scale).min(0.6);
                }
                apply_participation_gain(
                    &mut out,
                    &modes,
                    &screw_nearest_sensors(s),
                    config.screw_common_gain,
                    config.screw_local_gain,
                );
            }
        }
        (DamageClass::Crack, Some(c)) => {
            let c = c as usize;
            let modes = crack_modes(mode_count);
            if let Some(p) = planted {
                apply_planted(&mut out, &modes, &p.sensors, p.gain * (0.6 + 0.4 * c as f64 / CRACK_COUNT as f64));
            } else {
                let shift = crack_shift(c);
                for &k in &modes {
                    out.natural_frequencies[k] *= 1.0 - shift;
                    out.damping_ratios[k] = (out.damping_ratios[k] * config.crack_damping_scale).min(0.6);
                }
                apply_participation_gain(
                    &mut out,
                    &modes,
                    &crack_neighborhood(c),
                    config.crack_common_gain,
                    config.crack_local_gain,
                );
            }
        }
        _ => unreachable!("validated scenario"),
    }

    out.natural_frequencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Scales the class mode-subset participation by (1 + common) everywhere
/// and by an additional (1 + local) at the focus sensors, so the strongest
/// perturbation sits at the sensors nearest the defect.
fn apply_participation_gain(
    basis: &mut ModalBasis,
    modes: &[usize],
    focus: &[usize],
    common: f64,
    local: f64,
) {
    let mc = basis.mode_count();
    for j in 0..basis.sensor_count {
        let factor = (1.0 + common) * if focus.contains(&j) { 1.0 + local } else { 1.0 };
        for &k in modes {
            basis.participation[j * mc + k] *= factor;
        }
    }
}

fn apply_planted(basis: &mut ModalBasis, modes: &[usize], sensors: &[usize], gain: f64) {
    let mc = basis.mode_count();
    for &j in sensors {
        for &k in modes {
            basis.participation[j * mc + k] *= 1.0 + gain;
        }
    }
}

/// Modal-superposition FRF magnitudes over the grid: per sensor j,
/// |Σ_k P_jk / (ω_k² − ω² + 2iζ_k ω_k ω)| with ω = 2πf.
pub fn compute_frf(basis: &ModalBasis, grid: &[f64]) -> Result<Tensor<f64>> {
    basis.validate()?;
    if grid.iter().any(|&f| f <= 0.0) {
        return Err(Error::Data("frequency grid must be strictly positive".into()));
    }
    let mc = basis.mode_count();
    let omegas: Vec<f64> = grid.iter().map(|f| std::f64::consts::TAU * f).collect();
    let omega_k: Vec<f64> = basis
        .natural_frequencies
        .iter()
        .map(|f| std::f64::consts::TAU * f)
        .collect();

    let mut out = vec![0.0f64; basis.sensor_count * grid.len()];
    for (j, row) in out.chunks_exact_mut(grid.len()).enumerate() {
        let part = &basis.participation[j * mc..(j + 1) * mc];
        for (i, &omega) in omegas.iter().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for k in 0..mc {
                let wk = omega_k[k];
                let zk = basis.damping_ratios[k];
                let a = wk * wk - omega * omega;
                let b = 2.0 * zk * wk * omega;
                let denom = a * a + b * b;
                re += part[k] * a / denom;
                im -= part[k] * b / denom;
            }
            row[i] = (re * re + im * im).sqrt();
        }
    }
    Ok(Tensor::new(&[basis.sensor_count, grid.len()], out))
}

/// Generates the full 3750-sample dataset, deterministically in the seed.
///
/// Samples follow [`enumerate_scenarios`] order; per-sample participation
/// jitter is keyed by (seed, scenario index) so parallel generation cannot
/// change results.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<crate::dataset::Dataset> {
    config.validate()?;
    let scenarios = enumerate_scenarios();
    let grid = frequency_grid();
    let base = synthesize_modal_basis(config.seed, config.mode_count)?;
    let root = RngStream::new(config.seed);

    let feature_dim = SENSOR_COUNT * FREQ_POINTS;
    let results: Result<Vec<Vec<f32>>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(idx, scenario)| {
            let mut shifted = apply_condition_shift(&base, scenario, config)?;
            if config.sample_jitter > 0.0 {
                let mut rng = root.derive_named("sample-jitter", idx as u64);
                for p in &mut shifted.participation {
                    *p *= 1.0 + config.sample_jitter * rng.normal();
                }
            }
            for p in &mut shifted.participation {
                *p *= config.participation_scale;
            }
            let frf = compute_frf(&shifted, &grid)?;
            Ok(frf.data().iter().map(|&v| v as f32).collect())
        })
        .collect();
    let per_sample = results?;

    let mut features = Vec::with_capacity(scenarios.len() * feature_dim);
    for row in per_sample {
        features.extend_from_slice(&row);
    }
    let labels: Vec<u8> = scenarios.iter().map(|s| s.damage_class.index() as u8).collect();

    Ok(crate::dataset::Dataset {
        frequency_grid: grid,
        features,
        labels,
        scenarios,
        seed: config.seed,
        mode_count: config.mode_count,
        planted_sensors: config.planted.as_ref().map(|p| p.sensors.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_grid_has_expected_counts_and_order() {
        let all = enumerate_scenarios();
        assert_eq!(all.len(), 3750);
        let count = |cls: DamageClass| all.iter().filter(|s| s.damage_class == cls).count();
        assert_eq!(count(DamageClass::Baseline), 125);
        assert_eq!(count(DamageClass::LooseScrew), 2625);
        assert_eq!(count(DamageClass::Crack), 1000);

        // Baseline block first, then screws in index order, then cracks.
        assert_eq!(all[0].damage_class, DamageClass::Baseline);
        assert_eq!(all[125].damage_class, DamageClass::LooseScrew);
        assert_eq!(all[125].damage_index, Some(1));
        assert_eq!(all[125 + 21 * 125].damage_class, DamageClass::Crack);
        // Within a base: material-major, then temperature, then load.
        assert_eq!(all[0].material_case, 1);
        assert_eq!(all[0].temperature, 25.0);
        assert_eq!(all[0].load, 0.1);
        assert_eq!(all[1].load, 0.5);
        assert_eq!(all[5].temperature, 100.0);
        assert_eq!(all[25].material_case, 2);
        for s in &all {
            s.validate().unwrap();
        }
    }

    #[test]
    fn modal_basis_is_deterministic_and_in_band() {
        let a = synthesize_modal_basis(7, 12).unwrap();
        let b = synthesize_modal_basis(7, 12).unwrap();
        assert_eq!(a, b);
        for &f in &a.natural_frequencies {
            assert!((400.0..=4000.0).contains(&f));
        }
        for &z in &a.damping_ratios {
            assert!((0.01..=0.05).contains(&z));
        }

        let single = synthesize_modal_basis(7, 1).unwrap();
        assert_eq!(single.mode_count(), 1);
        assert!((400.0..=4000.0).contains(&single.natural_frequencies[0]));
    }

    #[test]
    fn different_seeds_give_different_frequencies() {
        let a = synthesize_modal_basis(7, 12).unwrap();
        let b = synthesize_modal_basis(8, 12).unwrap();
        assert_ne!(a.natural_frequencies, b.natural_frequencies);
    }

    #[test]
    fn modal_basis_rejects_zero_modes() {
        assert!(synthesize_modal_basis(7, 0).is_err());
    }

    #[test]
    fn nominal_conditions_scale_only_by_load() {
        let basis = synthesize_modal_basis(3, 6).unwrap();
        let config = GeneratorConfig::default();
        let scenario = ScenarioDescriptor {
            damage_class: DamageClass::Baseline,
            damage_index: None,
            material_case: 1,
            temperature: 25.0,
            load: 1.5,
        };
        let shifted = apply_condition_shift(&basis, &scenario, &config).unwrap();
        let expected = 1.0 + config.load_stiffening * 1.5;
        for (orig, new) in basis.natural_frequencies.iter().zip(&shifted.natural_frequencies) {
            assert!((new / orig - expected).abs() < 1e-12);
        }
        assert_eq!(shifted.participation, basis.participation);
    }

    #[test]
    fn material_factor_closed_form() {
        // E_eff scaled by 1.1 with densities nominal: factor = sqrt(1.1).
        let nominal = MATERIAL_CASES[0];
        let case = MaterialCase {
            sin_young: nominal.sin_young * 1.1,
            meal_young: nominal.meal_young * 1.1,
            ..nominal
        };
        let f = material_factor(&case, 0.5);
        assert!((f - 1.1f64.sqrt()).abs() < 1e-12);
        assert!((f - 1.0488).abs() < 1e-4);
    }

    #[test]
    fn loose_screw_shifts_at_least_one_frequency_by_a_percent() {
        let basis = synthesize_modal_basis(11, 12).unwrap();
        let config = GeneratorConfig::default();
        let scenario = ScenarioDescriptor {
            damage_class: DamageClass::LooseScrew,
            damage_index: Some(5),
            material_case: 1,
            temperature: 25.0,
            load: 0.1,
        };
        let baseline = ScenarioDescriptor {
            damage_class: DamageClass::Baseline,
            damage_index: None,
            ..scenario.clone()
        };
        let damaged = apply_condition_shift(&basis, &scenario, &config).unwrap();
        let undamaged = apply_condition_shift(&basis, &baseline, &config).unwrap();
        let max_rel: f64 = damaged
            .natural_frequencies
            .iter()
            .zip(&undamaged.natural_frequencies)
            .map(|(d, u)| (d - u).abs() / u)
            .fold(0.0, f64::max);
        assert!(max_rel >= 0.01, "max relative shift {max_rel}");
    }

    #[test]
    fn temperature_never_raises_and_load_never_lowers_frequencies() {
        let basis = synthesize_modal_basis(5, 12).unwrap();
        let config = GeneratorConfig::default();
        let mut prev: Option<Vec<f64>> = None;
        for &t in &TEMPERATURES {
            let s = ScenarioDescriptor {
                damage_class: DamageClass::Baseline,
                damage_index: None,
                material_case: 1,
                temperature: t,
                load: 0.1,
            };
            let freqs = apply_condition_shift(&basis, &s, &config).unwrap().natural_frequencies;
            if let Some(p) = &prev {
                for (now, before) in freqs.iter().zip(p) {
                    assert!(now <= before, "temperature increase raised a frequency");
                }
            }
            prev = Some(freqs);
        }
        prev = None;
        for &l in &LOADS {
            let s = ScenarioDescriptor {
                damage_class: DamageClass::Baseline,
                damage_index: None,
                material_case: 1,
                temperature: 25.0,
                load: l,
            };
            let freqs = apply_condition_shift(&basis, &s, &config).unwrap().natural_frequencies;
            if let Some(p) = &prev {
                for (now, before) in freqs.iter().zip(p) {
                    assert!(now >= before, "load increase lowered a frequency");
                }
            }
            prev = Some(freqs);
        }
    }

    #[test]
    fn frf_zero_participation_is_zero() {
        let basis = ModalBasis {
            natural_frequencies: vec![1000.0, 2000.0],
            damping_ratios: vec![0.02, 0.03],
            participation: vec![0.0; SENSOR_COUNT * 2],
            sensor_count: SENSOR_COUNT,
        };
        let frf = compute_frf(&basis, &frequency_grid()).unwrap();
        assert!(frf.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frf_single_mode_closed_form_at_resonance() {
        // |H(omega_k)| = P / (2 zeta omega_k^2)
        let f_k = 1000.0;
        let zeta = 0.02;
        let mut participation = vec![0.0; SENSOR_COUNT];
        participation[0] = 1.0;
        let basis = ModalBasis {
            natural_frequencies: vec![f_k],
            damping_ratios: vec![zeta],
            participation,
            sensor_count: SENSOR_COUNT,
        };
        let frf = compute_frf(&basis, &[f_k]).unwrap();
        let omega_k = std::f64::consts::TAU * f_k;
        let expected = 1.0 / (2.0 * zeta * omega_k * omega_k);
        let got = frf.data()[0];
        assert!((got - expected).abs() / expected < 1e-10, "got {got}, expected {expected}");
        assert!((expected - 6.333e-7).abs() < 1e-9);
    }

    #[test]
    fn frf_off_resonance_below_nearest_peak() {
        let basis = synthesize_modal_basis(2, 6).unwrap();
        let grid = frequency_grid();
        let frf = compute_frf(&basis, &grid).unwrap();
        // Brute-force scan: global max across the grid must occur near one of
        // the natural frequencies, and far-field values must sit below it.
        for j in 0..SENSOR_COUNT {
            let row = &frf.data()[j * FREQ_POINTS..(j + 1) * FREQ_POINTS];
            let (max_i, max_v) = row
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            let peak_freq = grid[max_i];
            let nearest = basis
                .natural_frequencies
                .iter()
                .map(|f| (f - peak_freq).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 60.0, "sensor {j}: peak at {peak_freq} Hz far from any mode");
            // A point far from every mode is strictly below the peak.
            let far_i = grid
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| {
                    let da = basis.natural_frequencies.iter().map(|f| (*f - **a).abs()).fold(f64::INFINITY, f64::min);
                    let db = basis.natural_frequencies.iter().map(|f| (*f - **b).abs()).fold(f64::INFINITY, f64::min);
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            assert!(row[far_i] < max_v);
        }
    }

    #[test]
    fn frf_rejects_non_positive_grid() {
        let basis = synthesize_modal_basis(1, 3).unwrap();
        assert!(compute_frf(&basis, &[0.0, 100.0]).is_err());
        assert!(compute_frf(&basis, &[-5.0]).is_err());
    }

    #[test]
    fn dataset_counts_shapes_and_determinism() {
        let config = GeneratorConfig::default();
        let a = generate_dataset(&config).unwrap();
        assert_eq!(a.len(), 3750);
        assert_eq!(a.class_counts(), [125, 2625, 1000]);
        assert_eq!(a.features.len(), 3750 * SENSOR_COUNT * FREQ_POINTS);
        a.validate().unwrap();

        let b = generate_dataset(&config).unwrap();
        assert_eq!(a.features, b.features, "same seed must be bit-identical");
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn class_means_separate_beyond_three_sigma_envelope() {
        // RMS distance between class-mean FRFs must exceed 3x the larger
        // within-class RMS standard deviation, for every class pair.
        let ds = generate_dataset(&GeneratorConfig::default()).unwrap();
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
            for m in means[c].iter_mut() {
                *m /= counts[c] as f64;
            }
        }
        let mut within = [0.0f64; 3];
        for i in 0..ds.len() {
            let c = ds.labels[i] as usize;
            for (m, &v) in means[c].iter().zip(ds.features_of(i)) {
                within[c] += (v as f64 - m).powi(2);
            }
        }
        let rms_std: Vec<f64> =
            (0..3).map(|c| (within[c] / (counts[c] * dim) as f64).sqrt()).collect();
        for a in 0..3 {
            for b in (a + 1)..3 {
                let gap = (means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    / dim as f64)
                    .sqrt();
                let envelope = rms_std[a].max(rms_std[b]);
                assert!(
                    gap > 3.0 * envelope,
                    "classes {a}/{b}: gap {gap:.1} vs 3x envelope {:.1}",
                    3.0 * envelope
                );
            }
        }
    }

    #[test]
    fn planted_mode_confines_class_signal_to_planted_sensors() {
        let planted = vec![4usize, 11, 22];
        let config = GeneratorConfig {
            planted: Some(PlantedConfig { sensors: planted.clone(), gain: 2.5 }),
            mode_count: 12,
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(&config).unwrap();
        // Per-sensor class-mean difference: non-planted sensors must carry
        // essentially no class contrast relative to planted ones.
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
            for m in means[c].iter_mut() {
                *m /= counts[c] as f64;
            }
        }
        let sensor_gap = |a: usize, b: usize, j: usize| -> f64 {
            (0..FREQ_POINTS)
                .map(|f| (means[a][j * FREQ_POINTS + f] - means[b][j * FREQ_POINTS + f]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut min_planted = f64::INFINITY;
        let mut max_other = 0.0f64;
        for j in 0..SENSOR_COUNT {
            let gap = sensor_gap(0, 1, j) + sensor_gap(0, 2, j) + sensor_gap(1, 2, j);
            if planted.contains(&j) {
                min_planted = min_planted.min(gap);
            } else {
                max_other = max_other.max(gap);
            }
        }
        // Non-planted sensors see only jitter residue; planted sensors must
        // dominate by orders of magnitude.
        assert!(
            min_planted > 100.0 * max_other,
            "planted contrast {min_planted:.1} vs leak {max_other:.2}"
        );
    }

    #[test]
    fn grid_is_uniform_with_pinned_endpoints() {
        let g = frequency_grid();
        assert_eq!(g.len(), FREQ_POINTS);
        assert_eq!(g[0], 400.0);
        assert_eq!(*g.last().unwrap(), 4000.0);
        let step = g[1] - g[0];
        for w in g.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-9);
        }
    }
}
