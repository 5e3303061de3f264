//! JSON instance files.
//!
//! ```json
//! {"d": 2, "S": 3, "A": 2, "mode": "discounted", "gamma": 0.6,
//!  "phi": [[[1, 0], [0, 1]], ...], "theta": [0.9, 0.1], "mu": [[0.6, 0.2], ...]}
//! ```
//!
//! `phi` is indexed `[s][a][k]` and `mu` is `[s'][k]`. Episodic files carry
//! `"H"` instead of `"gamma"`, and `theta` / `mu` may either be given once
//! (shared by every step) or as per-step lists.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DiscountedLinearMdp, EpisodicLinearMdp, FeatureMap, LinearMdp, LinearModel, LinearStep};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceMode {
    Discounted,
    Episodic,
}

impl fmt::Display for InstanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Discounted => "discounted",
            Self::Episodic => "episodic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaField {
    Shared(Vec<f64>),
    PerStep(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuField {
    Shared(Vec<Vec<f64>>),
    PerStep(Vec<Vec<Vec<f64>>>),
}

/// On-disk representation of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub d: usize,
    #[serde(rename = "S")]
    pub n_states: usize,
    #[serde(rename = "A")]
    pub n_actions: usize,
    pub mode: InstanceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub phi: Vec<Vec<Vec<f64>>>,
    pub theta: ThetaField,
    pub mu: MuField,
}

fn mu_matrix(rows: &[Vec<f64>], n_states: usize, d: usize, step: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n_states || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidModel(format!(
            "step {step}: mu must be {n_states} rows of length {d}"
        )));
    }
    Ok(DMatrix::from_fn(n_states, d, |s, k| rows[s][k]))
}

fn mu_rows(mu: &DMatrix<f64>) -> Vec<Vec<f64>> {
    mu.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl InstanceFile {
    /// Builds and validates the model described by the file.
    pub fn to_mdp(&self) -> Result<LinearMdp> {
        let (s_n, a_n, d) = (self.n_states, self.n_actions, self.d);
        if self.phi.len() != s_n || self.phi.iter().any(|row| row.len() != a_n) {
            return Err(Error::InvalidModel(format!(
                "phi must be indexed [S={s_n}][A={a_n}][d={d}]"
            )));
        }
        let phi = self
            .phi
            .iter()
            .flatten()
            .map(|f| DVector::from_column_slice(f))
            .collect();
        let features = Arc::new(FeatureMap::new(s_n, a_n, d, phi)?);
        match self.mode {
            InstanceMode::Discounted => {
                let gamma = self
                    .gamma
                    .ok_or_else(|| Error::InvalidModel("discounted instance needs gamma".into()))?;
                let theta = match &self.theta {
                    ThetaField::Shared(t) => DVector::from_column_slice(t),
                    ThetaField::PerStep(_) => {
                        return Err(Error::InvalidModel(
                            "discounted instance takes a single theta".into(),
                        ))
                    }
                };
                let mu = match &self.mu {
                    MuField::Shared(m) => mu_matrix(m, s_n, d, 0)?,
                    MuField::PerStep(_) => {
                        return Err(Error::InvalidModel(
                            "discounted instance takes a single mu".into(),
                        ))
                    }
                };
                Ok(DiscountedLinearMdp::new(features, gamma, theta, mu)?.into())
            }
            InstanceMode::Episodic => {
                let h = self
                    .horizon
                    .ok_or_else(|| Error::InvalidModel("episodic instance needs H".into()))?;
                let thetas: Vec<DVector<f64>> = match &self.theta {
                    ThetaField::Shared(t) => vec![DVector::from_column_slice(t); h],
                    ThetaField::PerStep(ts) => ts.iter().map(|t| DVector::from_column_slice(t)).collect(),
                };
                let mus: Vec<DMatrix<f64>> = match &self.mu {
                    MuField::Shared(m) => vec![mu_matrix(m, s_n, d, 0)?; h],
                    MuField::PerStep(ms) => ms
                        .iter()
                        .enumerate()
                        .map(|(i, m)| mu_matrix(m, s_n, d, i))
                        .collect::<Result<_>>()?,
                };
                if thetas.len() != h || mus.len() != h {
                    return Err(Error::InvalidModel(format!(
                        "H = {h} but theta has {} steps and mu has {}",
                        thetas.len(),
                        mus.len()
                    )));
                }
                Ok(EpisodicLinearMdp::new(features, thetas.into_iter().zip(mus).collect())?.into())
            }
        }
    }

    pub fn from_mdp(mdp: &LinearMdp) -> Self {
        let features = mdp.features();
        let phi = (0..features.n_states())
            .map(|s| {
                (0..features.n_actions())
                    .map(|a| features.phi(s, a).iter().copied().collect())
                    .collect()
            })
            .collect();
        let theta_of = |st: &LinearStep| st.theta().iter().copied().collect::<Vec<_>>();
        let (gamma, horizon, theta, mu) = match mdp {
            LinearMdp::Discounted(m) => (
                Some(m.gamma()),
                None,
                ThetaField::Shared(theta_of(m.step())),
                MuField::Shared(mu_rows(m.mu())),
            ),
            LinearMdp::Episodic(m) => (
                None,
                Some(m.horizon()),
                ThetaField::PerStep(m.steps().iter().map(theta_of).collect()),
                MuField::PerStep(m.steps().iter().map(|st| mu_rows(st.mu())).collect()),
            ),
        };
        Self {
            d: features.dim(),
            n_states: features.n_states(),
            n_actions: features.n_actions(),
            mode: mdp.mode(),
            gamma,
            horizon,
            phi,
            theta,
            mu,
        }
    }
}

pub fn parse_instance(json: &str) -> Result<LinearMdp> {
    let file: InstanceFile = serde_json::from_str(json)?;
    file.to_mdp()
}

pub fn load_instance(path: impl AsRef<Path>) -> Result<LinearMdp> {
    parse_instance(&std::fs::read_to_string(path)?)
}

pub fn save_instance(mdp: &LinearMdp, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(&InstanceFile::from_mdp(mdp))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}
