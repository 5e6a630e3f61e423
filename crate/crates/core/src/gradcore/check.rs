use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape's gradient and a central
/// finite difference, over `probes` parameter coordinates drawn without
/// replacement (every coordinate when there are fewer).
///
/// `loss_fn` must rebuild the same deterministic graph for whatever
/// parameter values it is handed. The per-coordinate error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, epsilon: f64, probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::Domain(format!("epsilon must lie in (0, 1e-3], got {epsilon}")));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, p)?;
        let v = tape
            .value(loss)
            .item()
            .ok_or_else(|| Error::Contract("loss is not scalar".into()))?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v} while probing")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let analytic = tape.param_grads(loss, params)?;

    // (parameter index, flat offset) for every coordinate
    let coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|i| (0..params.by_index(i).len()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if probes >= coords.len() {
        (0..coords.len()).collect()
    } else {
        sample(&mut rng, coords.len(), probes).into_vec()
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for c in chosen {
        let (i, j) = coords[c];
        let original = params.by_index(i).data()[j];
        probe.by_index_mut(i).data_mut()[j] = original + epsilon;
        let up = eval(&probe)?;
        probe.by_index_mut(i).data_mut()[j] = original - epsilon;
        let down = eval(&probe)?;
        probe.by_index_mut(i).data_mut()[j] = original;

        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.get(i).data()[j];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
