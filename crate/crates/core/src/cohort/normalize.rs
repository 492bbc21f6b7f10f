//! Per-feature z-normalization fitted on the training split only.
//!
//! Statistics are pooled over every timestep row of the fitting episodes
//! (population variance). Constant features get a standard deviation floor
//! of 1.0 so normalization stays invertible. The statistics travel with
//! trained policies inside checkpoints as `norm.*` tensors.

use crate::cohort::Episode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    dyn_mean: Vec<f64>,
    dyn_std: Vec<f64>,
    static_mean: Vec<f64>,
    static_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-12;

fn moments(sums: &[f64], sq_sums: &[f64], n: f64) -> (Vec<f64>, Vec<f64>) {
    let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sq_sums
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            let s = var.sqrt();
            if s < STD_FLOOR {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn fit(episodes: &[Episode]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::contract("cannot fit a normalizer on zero episodes"))?;
        let d = first
            .rows
            .first()
            .ok_or_else(|| Error::contract("cannot fit a normalizer on an empty episode"))?
            .dynamics
            .len();
        let s = first.statics.len();

        let mut dyn_sum = vec![0.0; d];
        let mut dyn_sq = vec![0.0; d];
        let mut static_sum = vec![0.0; s];
        let mut static_sq = vec![0.0; s];
        let mut n_rows = 0.0;
        for ep in episodes {
            if ep.statics.len() != s {
                return Err(Error::contract(format!(
                    "episode {:?} has {} statics, expected {s}",
                    ep.id,
                    ep.statics.len()
                )));
            }
            for (k, &v) in ep.statics.iter().enumerate() {
                static_sum[k] += v;
                static_sq[k] += v * v;
            }
            for row in &ep.rows {
                if row.dynamics.len() != d {
                    return Err(Error::contract(format!(
                        "episode {:?} has a row with {} dynamics, expected {d}",
                        ep.id,
                        row.dynamics.len()
                    )));
                }
                for (k, &v) in row.dynamics.iter().enumerate() {
                    dyn_sum[k] += v;
                    dyn_sq[k] += v * v;
                }
                n_rows += 1.0;
            }
        }
        let (dyn_mean, dyn_std) = moments(&dyn_sum, &dyn_sq, n_rows);
        let (static_mean, static_std) = moments(&static_sum, &static_sq, episodes.len() as f64);
        Ok(Normalizer {
            dyn_mean,
            dyn_std,
            static_mean,
            static_std,
        })
    }

    /// Identity transform with the given dimensions (used when a cohort is
    /// already normalized or normalization is disabled).
    pub fn identity(num_dynamics: usize, num_statics: usize) -> Self {
        Normalizer {
            dyn_mean: vec![0.0; num_dynamics],
            dyn_std: vec![1.0; num_dynamics],
            static_mean: vec![0.0; num_statics],
            static_std: vec![1.0; num_statics],
        }
    }

    pub fn num_dynamics(&self) -> usize {
        self.dyn_mean.len()
    }

    pub fn num_statics(&self) -> usize {
        self.static_mean.len()
    }

    fn check(&self, len: usize, expected: usize, what: &str) -> Result<()> {
        if len != expected {
            return Err(Error::contract(format!(
                "{what} vector has length {len}, expected {expected}"
            )));
        }
        Ok(())
    }

    pub fn normalize_dynamics(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check(raw.len(), self.dyn_mean.len(), "dynamics")?;
        Ok(raw
            .iter()
            .zip(self.dyn_mean.iter().zip(&self.dyn_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize_dynamics(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len(), self.dyn_mean.len(), "dynamics")?;
        Ok(z.iter()
            .zip(self.dyn_mean.iter().zip(&self.dyn_std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    pub fn normalize_statics(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check(raw.len(), self.static_mean.len(), "statics")?;
        Ok(raw
            .iter()
            .zip(self.static_mean.iter().zip(&self.static_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize_statics(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z.len(), self.static_mean.len(), "statics")?;
        Ok(z.iter()
            .zip(self.static_mean.iter().zip(&self.static_std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    /// Serializes the statistics as named tensors for checkpoint storage.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mk = |name: &str, data: &[f64]| {
            (
                name.to_string(),
                Tensor::new(vec![data.len()], data.to_vec()).unwrap(),
            )
        };
        vec![
            mk("norm.dyn_mean", &self.dyn_mean),
            mk("norm.dyn_std", &self.dyn_std),
            mk("norm.static_mean", &self.static_mean),
            mk("norm.static_std", &self.static_std),
        ]
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<Vec<f64>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
        };
        let n = Normalizer {
            dyn_mean: get("norm.dyn_mean")?,
            dyn_std: get("norm.dyn_std")?,
            static_mean: get("norm.static_mean")?,
            static_std: get("norm.static_std")?,
        };
        if n.dyn_mean.len() != n.dyn_std.len() || n.static_mean.len() != n.static_std.len() {
            return Err(Error::Checkpoint(
                "normalizer tensors have inconsistent lengths".into(),
            ));
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::TimestepRow;
    use approx::assert_abs_diff_eq;

    fn episode(id: &str, statics: Vec<f64>, rows: Vec<Vec<f64>>) -> Episode {
        Episode {
            id: id.into(),
            statics,
            rows: rows
                .into_iter()
                .map(|dynamics| TimestepRow {
                    dynamics,
                    action: 0,
                    reward: 0.0,
                    markers: vec![],
                })
                .collect(),
            outcome: false,
        }
    }

    #[test]
    fn fit_computes_pooled_population_moments() {
        let eps = vec![
            episode("a", vec![10.0], vec![vec![1.0, 4.0], vec![3.0, 4.0]]),
            episode("b", vec![20.0], vec![vec![5.0, 4.0], vec![7.0, 4.0]]),
        ];
        let n = Normalizer::fit(&eps).unwrap();
        // Dynamics column 0: values 1,3,5,7 → mean 4, population std sqrt(5).
        let z = n.normalize_dynamics(&[4.0, 4.0]).unwrap();
        assert_abs_diff_eq!(z[0], 0.0, epsilon = 1e-12);
        let z = n.normalize_dynamics(&[4.0 + 5.0f64.sqrt(), 4.0]).unwrap();
        assert_abs_diff_eq!(z[0], 1.0, epsilon = 1e-12);
        // Column 1 is constant → floored std 1.0, centered values 0.
        assert_abs_diff_eq!(z[1], 0.0, epsilon = 1e-12);
        // Statics: 10, 20 → mean 15, std 5.
        let s = n.normalize_statics(&[20.0]).unwrap();
        assert_abs_diff_eq!(s[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalization_is_invertible() {
        let eps = vec![episode(
            "a",
            vec![3.0, -2.0],
            vec![vec![1.5, -0.25, 9.0], vec![-4.0, 0.5, 2.0], vec![0.0, 1.0, 7.5]],
        )];
        let n = Normalizer::fit(&eps).unwrap();
        for raw in [[1.5, -0.25, 9.0], [-123.0, 0.125, 55.5]] {
            let z = n.normalize_dynamics(&raw).unwrap();
            let back = n.denormalize_dynamics(&z).unwrap();
            for (a, b) in raw.iter().zip(&back) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        let z = n.normalize_statics(&[3.0, -2.0]).unwrap();
        let back = n.denormalize_statics(&z).unwrap();
        assert_abs_diff_eq!(back[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn tensor_roundtrip_is_exact() {
        let eps = vec![episode(
            "a",
            vec![0.3],
            vec![vec![1.0, 2.0], vec![4.0, -1.0]],
        )];
        let n = Normalizer::fit(&eps).unwrap();
        let tensors = n.to_tensors();
        let back = Normalizer::from_tensors(&tensors).unwrap();
        assert_eq!(n, back);
    }

    #[test]
    fn identity_passes_values_through() {
        let n = Normalizer::identity(3, 1);
        assert_eq!(
            n.normalize_dynamics(&[5.0, -1.0, 0.5]).unwrap(),
            vec![5.0, -1.0, 0.5]
        );
    }

    #[test]
    fn dimension_errors() {
        let n = Normalizer::identity(2, 1);
        assert!(n.normalize_dynamics(&[1.0]).is_err());
        assert!(n.normalize_statics(&[1.0, 2.0]).is_err());
        assert!(Normalizer::fit(&[]).is_err());
        assert!(Normalizer::from_tensors(&[]).is_err());
    }
}
