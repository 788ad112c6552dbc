//! On-disk dataset: `manifest.json` + `frf.bin` + `labels.csv`.
//!
//! `frf.bin` holds little-endian f32 values, row-major
//! `[sample][sensor][frequency]`. The manifest records the schema version,
//! class counts, generator seed, frequency grid, the full scenario table and
//! the resolved damage-signature tables.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::shadow::signature::SignatureTable;
use crate::shadow::{DamageClass, ScenarioDescriptor};
use crate::{Error, Result, CLASS_COUNT, FREQ_POINTS, SENSOR_COUNT};

pub const SCHEMA_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = SENSOR_COUNT * FREQ_POINTS;

/// In-memory dataset, stored feature-major for cache-friendly access.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frequency_grid: Vec<f64>,
    /// `[sample][sensor][frequency]`, n × 4200.
    pub features: Vec<f32>,
    /// Class index per sample.
    pub labels: Vec<u8>,
    pub scenarios: Vec<ScenarioDescriptor>,
    pub seed: u64,
    pub mode_count: usize,
    pub planted_sensors: Option<Vec<usize>>,
}

/// Borrowed view of one sample.
#[derive(Debug, Clone, Copy)]
pub struct FrfSample<'a> {
    /// 28 × 150 magnitudes in m/s², flattened sensor-major.
    pub magnitudes: &'a [f32],
    pub label: DamageClass,
    pub scenario: &'a ScenarioDescriptor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features_of(&self, idx: usize) -> &[f32] {
        &self.features[idx * FEATURE_DIM..(idx + 1) * FEATURE_DIM]
    }

    pub fn sample(&self, idx: usize) -> FrfSample<'_> {
        FrfSample {
            magnitudes: self.features_of(idx),
            label: DamageClass::from_index(self.labels[idx] as usize).expect("stored label valid"),
            scenario: &self.scenarios[idx],
        }
    }

    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0usize; CLASS_COUNT];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Structural invariants every dataset must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.len() * FEATURE_DIM {
            return Err(Error::Data(format!(
                "feature buffer holds {} values, expected {} samples × {}",
                self.features.len(),
                self.len(),
                FEATURE_DIM
            )));
        }
        if self.scenarios.len() != self.len() {
            return Err(Error::Data("scenario table length mismatch".into()));
        }
        if self.frequency_grid.len() != FREQ_POINTS {
            return Err(Error::Data(format!(
                "frequency grid has {} points, expected {FREQ_POINTS}",
                self.frequency_grid.len()
            )));
        }
        if self.features.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("FRF magnitudes must be finite and non-negative".into()));
        }
        for (i, (&l, s)) in self.labels.iter().zip(&self.scenarios).enumerate() {
            if l as usize != s.damage_class.index() {
                return Err(Error::Data(format!("label/scenario mismatch at sample {i}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let counts = self.class_counts();
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            samples: self.len(),
            sensors: SENSOR_COUNT,
            frequency_points: FREQ_POINTS,
            class_counts: ClassCounts {
                baseline: counts[0],
                loose_screw: counts[1],
                crack: counts[2],
            },
            seed: self.seed,
            mode_count: self.mode_count,
            planted_sensors: self.planted_sensors.clone(),
            frequency_grid: self.frequency_grid.clone(),
            signature: SignatureTable::resolve(self.mode_count),
            scenarios: self.scenarios.clone(),
        };
        let file = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;

        let mut bin = BufWriter::new(fs::File::create(dir.join("frf.bin"))?);
        let mut bytes = Vec::with_capacity(self.features.len() * 4);
        for &v in &self.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bin.write_all(&bytes)?;

        let mut csv = BufWriter::new(fs::File::create(dir.join("labels.csv"))?);
        writeln!(csv, "sample_index,class,damage_index,material_case,temperature,load")?;
        for (i, s) in self.scenarios.iter().enumerate() {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                i,
                s.damage_class.name(),
                s.damage_index.map(|d| d.to_string()).unwrap_or_default(),
                s.material_case,
                s.temperature,
                s.load
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_reader(
            fs::File::open(&manifest_path)
                .map_err(|e| Error::Data(format!("cannot open {}: {e}", manifest_path.display())))?,
        )?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported dataset schema version {}",
                manifest.schema_version
            )));
        }
        if manifest.sensors != SENSOR_COUNT || manifest.frequency_points != FREQ_POINTS {
            return Err(Error::Data(format!(
                "dataset shape {}×{} does not match expected {SENSOR_COUNT}×{FREQ_POINTS}",
                manifest.sensors, manifest.frequency_points
            )));
        }

        let mut raw = Vec::new();
        fs::File::open(dir.join("frf.bin"))
            .map_err(|e| Error::Data(format!("cannot open frf.bin: {e}")))?
            .read_to_end(&mut raw)?;
        let expected = manifest.samples * FEATURE_DIM * 4;
        if raw.len() != expected {
            return Err(Error::Data(format!(
                "frf.bin holds {} bytes, expected {expected}",
                raw.len()
            )));
        }
        let features: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        let labels: Vec<u8> = manifest
            .scenarios
            .iter()
            .map(|s| s.damage_class.index() as u8)
            .collect();

        let dataset = Dataset {
            frequency_grid: manifest.frequency_grid,
            features,
            labels,
            scenarios: manifest.scenarios,
            seed: manifest.seed,
            mode_count: manifest.mode_count,
            planted_sensors: manifest.planted_sensors,
        };
        dataset.validate()?;
        Ok(dataset)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassCounts {
    baseline: usize,
    loose_screw: usize,
    crack: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    samples: usize,
    sensors: usize,
    frequency_points: usize,
    class_counts: ClassCounts,
    seed: u64,
    mode_count: usize,
    planted_sensors: Option<Vec<usize>>,
    frequency_grid: Vec<f64>,
    #[serde(skip_deserializing, default = "default_signature")]
    signature: SignatureTable,
    scenarios: Vec<ScenarioDescriptor>,
}

fn default_signature() -> SignatureTable {
    SignatureTable::resolve(12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shadow::{generate_dataset, GeneratorConfig};

    #[test]
    fn save_load_roundtrip_is_lossless() {
        let config = GeneratorConfig { mode_count: 4, ..GeneratorConfig::default() };
        let ds = generate_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.features, loaded.features);
        assert_eq!(ds.labels, loaded.labels);
        assert_eq!(ds.scenarios, loaded.scenarios);
        assert_eq!(ds.frequency_grid, loaded.frequency_grid);
    }

    #[test]
    fn truncated_bin_is_rejected() {
        let config = GeneratorConfig { mode_count: 4, ..GeneratorConfig::default() };
        let ds = generate_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let bin = dir.path().join("frf.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}
