//! Explicit fixed-step integrators on flat state vectors.

use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Heun,
    Rk4,
}

impl Integrator {
    pub fn parse(s: &str) -> Option<Integrator> {
        match s {
            "euler" => Some(Integrator::Euler),
            "heun" => Some(Integrator::Heun),
            "rk4" => Some(Integrator::Rk4),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Heun => "heun",
            Integrator::Rk4 => "rk4",
        }
    }
}

fn comb(x: &[f64], k: &[f64], a: f64) -> Vec<f64> {
    x.iter().zip(k).map(|(x, k)| x + a * k).collect()
}

/// One step of `x' = f(x)`.
pub fn step<F>(integrator: Integrator, x: &[f64], dt: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    Ok(match integrator {
        Integrator::Euler => comb(x, &f(x)?, dt),
        Integrator::Heun => {
            let k1 = f(x)?;
            let k2 = f(&comb(x, &k1, dt))?;
            x.iter().zip(k1.iter().zip(&k2)).map(|(x, (a, b))| x + 0.5 * dt * (a + b)).collect()
        }
        Integrator::Rk4 => {
            let k1 = f(x)?;
            let k2 = f(&comb(x, &k1, 0.5 * dt))?;
            let k3 = f(&comb(x, &k2, 0.5 * dt))?;
            let k4 = f(&comb(x, &k3, dt))?;
            (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
        }
    })
}
