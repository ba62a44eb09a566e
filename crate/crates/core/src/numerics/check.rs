//! Central finite-difference probes against analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::GradientMap;
use super::tensor::NamedTensors;

/// One probed coordinate: a tensor name, flat index, both derivative
/// estimates, and their relative error.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug, Default)]
pub struct FiniteDiffReport {
    pub probes: Vec<ProbeResult>,
}

impl FiniteDiffReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    /// The probe with the largest relative error, if any were run.
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Central differences carry cancellation noise of roughly
/// eps * |f| / step (~1e-10 for losses of order ten at step 1e-5), so
/// disagreements inside that band count as exact agreement. Without the
/// dead zone a coordinate whose true derivative is zero would divide
/// noise by the tiny denominator floor and report a spurious error.
const AGREEMENT_ATOL: f64 = 1e-8;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= AGREEMENT_ATOL {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` gradients of `f` against central differences on
/// `n_probes` coordinates drawn without replacement from `params` (seeded,
/// so reruns probe the same coordinates). `f` is evaluated twice per probe
/// at `±step` around the given parameter point.
pub fn finite_diff_check<F, E>(
    mut f: F,
    params: &NamedTensors,
    analytic: &GradientMap,
    n_probes: usize,
    step: f64,
    seed: u64,
) -> Result<FiniteDiffReport, E>
where
    F: FnMut(&NamedTensors) -> Result<f64, E>,
{
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, tensor) in params.iter() {
        for i in 0..tensor.len() {
            coords.push((name.clone(), i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = n_probes.min(coords.len());
    let picked = sample(&mut rng, coords.len(), amount);

    let mut report = FiniteDiffReport::default();
    for c in picked.iter() {
        let (name, index) = &coords[c];
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().values_mut()[*index] += step;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().values_mut()[*index] -= step;
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * step);
        let a = analytic
            .get(name)
            .map(|t| t.values()[*index])
            .unwrap_or(0.0);
        report.probes.push(ProbeResult {
            name: name.clone(),
            index: *index,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
        });
    }
    Ok(report)
}
