//! Fixed damage-signature tables.
//!
//! Each damage class leaves two fingerprints on the modal basis: a class
//! subset of modes whose natural frequencies drop, and a participation
//! (amplitude) perturbation focused on the sensors closest to the physical
//! defect. The tables below are pure functions of fixed geometry constants,
//! so every run of the generator plants identical signatures; the resolved
//! tables are also written into the dataset manifest for inspection.
//!
//! Geometry: lower-side sensors 0..14 sit on a ring, upper-side sensors
//! 14..28 on a second ring rotated half a slot. The 21 screws sit on the
//! housing ring between the two, so their nearest sensors are mostly on the
//! lower side. Cracks 1-4 live in the upper plate, cracks 5-8 in the lower
//! plate, each touching a contiguous arc of four same-side sensors.

use serde::Serialize;

use crate::SENSOR_COUNT;

pub const SCREW_COUNT: usize = 21;
pub const CRACK_COUNT: usize = 8;

/// Sensors per side ring.
const SIDE: usize = SENSOR_COUNT / 2;

/// Angular position of a sensor on its ring, with the upper ring offset by
/// half a slot.
fn sensor_angle(j: usize) -> f64 {
    let tau = std::f64::consts::TAU;
    if j < SIDE {
        tau * j as f64 / SIDE as f64
    } else {
        tau * (j - SIDE) as f64 / SIDE as f64 + tau / (2.0 * SIDE as f64)
    }
}

fn is_upper(j: usize) -> bool {
    j >= SIDE
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let d = (a - b).rem_euclid(tau);
    d.min(tau - d)
}

/// The 3 sensors nearest screw `s` (1-based). Screws join the lower frame to
/// the housing, so upper-side sensors carry a plane penalty.
pub fn screw_nearest_sensors(s: usize) -> [usize; 3] {
    assert!((1..=SCREW_COUNT).contains(&s), "screw index {s} out of 1..=21");
    let tau = std::f64::consts::TAU;
    let screw_angle = tau * (s - 1) as f64 / SCREW_COUNT as f64;
    let mut by_dist: Vec<(f64, usize)> = (0..SENSOR_COUNT)
        .map(|j| {
            let mut d = angular_distance(screw_angle, sensor_angle(j));
            if is_upper(j) {
                d += 0.5;
            }
            (d, j)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    [by_dist[0].1, by_dist[1].1, by_dist[2].1]
}

/// The 4-sensor arc touched by crack `c` (1-based). Cracks 1-4 sit in the
/// upper plate, 5-8 in the lower plate.
pub fn crack_neighborhood(c: usize) -> [usize; 4] {
    assert!((1..=CRACK_COUNT).contains(&c), "crack index {c} out of 1..=8");
    let upper = c <= 4;
    let slot = (c - 1) % 4;
    // Arc start in ring coordinates: four evenly spaced cracks per plate.
    let start = slot * SIDE / 4 + 1;
    let base = if upper { SIDE } else { 0 };
    [
        base + start % SIDE,
        base + (start + 1) % SIDE,
        base + (start + 2) % SIDE,
        base + (start + 3) % SIDE,
    ]
}

/// Modes whose frequencies shift when a screw loosens: the fundamental
/// housing mode plus two mid-band modes (a loose joint softens the global
/// assembly stiffness and the local housing modes).
pub fn screw_modes(mode_count: usize) -> Vec<usize> {
    let mut m: Vec<usize> = [0, mode_count / 2, mode_count / 2 + 1]
        .into_iter()
        .filter(|&k| k < mode_count)
        .collect();
    m.sort_unstable();
    m.dedup();
    m
}

/// Modes whose frequencies shift when a plate cracks: low-order plate
/// bending modes, disjoint from the screw subset for mode counts >= 8.
pub fn crack_modes(mode_count: usize) -> Vec<usize> {
    let mut m: Vec<usize> = [1usize, 2, 3].into_iter().filter(|&k| k < mode_count).collect();
    m.dedup();
    if m.is_empty() {
        m.push(0);
    }
    m
}

/// Fractional downward frequency shift for screw `s`: 1% to 3% across the
/// screw range.
pub fn screw_shift(s: usize) -> f64 {
    0.01 + 0.02 * (s - 1) as f64 / (SCREW_COUNT - 1) as f64
}

/// Fractional downward frequency shift for crack `c`: 1.5% to 4%.
pub fn crack_shift(c: usize) -> f64 {
    0.015 + 0.025 * (c - 1) as f64 / (CRACK_COUNT - 1) as f64
}

/// Serializable copy of all resolved signature tables, embedded in the
/// dataset manifest so planted-sensor experiments are reproducible from the
/// artifact alone.
#[derive(Debug, Clone, Serialize)]
pub struct SignatureTable {
    pub screw_modes: Vec<usize>,
    pub crack_modes: Vec<usize>,
    pub screw_nearest_sensors: Vec<[usize; 3]>,
    pub crack_neighborhoods: Vec<[usize; 4]>,
    pub screw_shifts: Vec<f64>,
    pub crack_shifts: Vec<f64>,
}

impl SignatureTable {
    pub fn resolve(mode_count: usize) -> Self {
        SignatureTable {
            screw_modes: screw_modes(mode_count),
            crack_modes: crack_modes(mode_count),
            screw_nearest_sensors: (1..=SCREW_COUNT).map(screw_nearest_sensors).collect(),
            crack_neighborhoods: (1..=CRACK_COUNT).map(crack_neighborhood).collect(),
            screw_shifts: (1..=SCREW_COUNT).map(screw_shift).collect(),
            crack_shifts: (1..=CRACK_COUNT).map(crack_shift).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn screw_tables_are_stable_and_in_range() {
        for s in 1..=SCREW_COUNT {
            let near = screw_nearest_sensors(s);
            assert_eq!(near, screw_nearest_sensors(s));
            assert!(near.iter().all(|&j| j < SENSOR_COUNT));
            assert!(near[0] != near[1] && near[1] != near[2] && near[0] != near[2]);
        }
    }

    #[test]
    fn neighboring_screws_have_overlapping_but_distinct_sensors() {
        let all: Vec<[usize; 3]> = (1..=SCREW_COUNT).map(screw_nearest_sensors).collect();
        let distinct: std::collections::HashSet<[usize; 3]> = all.iter().cloned().collect();
        assert!(distinct.len() > SCREW_COUNT / 2, "screw signatures collapse: {distinct:?}");
    }

    #[test]
    fn crack_neighborhoods_stay_on_their_plate() {
        for c in 1..=4 {
            assert!(crack_neighborhood(c).iter().all(|&j| j >= SIDE), "crack {c} not upper");
        }
        for c in 5..=8 {
            assert!(crack_neighborhood(c).iter().all(|&j| j < SIDE), "crack {c} not lower");
        }
    }

    #[test]
    fn mode_subsets_disjoint_at_default_count() {
        let sm = screw_modes(12);
        let cm = crack_modes(12);
        for k in &sm {
            assert!(!cm.contains(k), "mode subsets overlap at {k}");
        }
    }

    #[test]
    fn shifts_within_documented_ranges() {
        for s in 1..=SCREW_COUNT {
            let v = screw_shift(s);
            assert!((0.01..=0.03).contains(&v));
        }
        for c in 1..=CRACK_COUNT {
            let v = crack_shift(c);
            assert!((0.015..=0.04).contains(&v));
        }
    }
}
