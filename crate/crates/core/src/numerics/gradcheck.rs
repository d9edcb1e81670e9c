//! Central finite-difference gradient checking.
//!
//! Only evaluates the loss; it never looks at the tape, so it stays an
//! independent check of the backward pass.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::params::ParamSet;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` at `samples`
/// randomly chosen coordinates among the parameters named in `analytic`.
pub fn check<F, R>(
    params: &ParamSet,
    analytic: &std::collections::BTreeMap<String, super::Tensor>,
    mut loss: F,
    samples: usize,
    h: f64,
    rng: &mut R,
) -> Result<Vec<Probe>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
    R: Rng + ?Sized,
{
    let coords: Vec<(String, usize)> = analytic
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
        .collect();
    let mut probes = Vec::with_capacity(samples);
    for _ in 0..samples {
        let Some((name, index)) = coords.choose(rng).cloned() else { break };
        let mut p = params.clone();
        let orig = p.get(&name).expect("named in analytic").data()[index];
        p.get_mut(&name).unwrap().data_mut()[index] = orig + h;
        let up = loss(&p)?;
        p.get_mut(&name).unwrap().data_mut()[index] = orig - h;
        let down = loss(&p)?;
        probes.push(Probe {
            analytic: analytic[&name].data()[index],
            numeric: (up - down) / (2.0 * h),
            name,
            index,
        });
    }
    Ok(probes)
}
