//! Minkowski (power-mean) pooling of gate maps into scalar quality estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolingSpec {
    /// Minkowski exponent.
    pub p: f64,
    /// One-based gate map index (`gamma_n`).
    pub map_index: usize,
}

impl Default for PoolingSpec {
    fn default() -> Self {
        PoolingSpec { p: 2.0, map_index: 2 }
    }
}

impl PoolingSpec {
    pub fn validate(&self, num_maps: usize) -> Result<()> {
        if !(self.p > 0.0) || !self.p.is_finite() {
            return Err(Error::Config(format!("Minkowski exponent {} must be positive", self.p)));
        }
        if self.map_index == 0 || self.map_index > num_maps {
            return Err(Error::Config(format!(
                "map index {} outside 1..={num_maps}",
                self.map_index
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityEstimate {
    pub q: f64,
    pub map_index: usize,
    pub p: f64,
    pub image: String,
}

/// `(mean(gamma^p))^(1/p)` over every value of the map.
pub fn minkowski_pool(map: &[f32], p: f64) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::Input("cannot pool an empty map".into()));
    }
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::Config(format!("Minkowski exponent {p} must be positive")));
    }
    if let Some(bad) = map.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("map value {bad} outside [0, 1]")));
    }
    let mean = map.iter().map(|&v| (v as f64).powf(p)).sum::<f64>() / map.len() as f64;
    Ok(mean.powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!((minkowski_pool(&[0.3; 17], 3.5).unwrap() - 0.3).abs() < 1e-7);
        let m = [0.1, 0.4, 0.7, 1.0];
        assert!((minkowski_pool(&m, 1.0).unwrap() - 0.55).abs() < 1e-7);
        let half = [0.0, 1.0, 0.0, 1.0];
        assert!((minkowski_pool(&half, 2.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(minkowski_pool(&[], 2.0), Err(Error::Input(_))));
        assert!(matches!(minkowski_pool(&[0.5], 0.0), Err(Error::Config(_))));
        assert!(matches!(minkowski_pool(&[1.5], 2.0), Err(Error::Validation(_))));
        assert!(PoolingSpec { p: 2.0, map_index: 4 }.validate(3).is_err());
        assert!(PoolingSpec::default().validate(3).is_ok());
    }
}
