//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;

use super::graph::{Graph, Mode, Var};
use super::rng::seeded;
use super::{NumericsError, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step, must lie in `[1e-7, 1e-3]`.
    pub perturbation: f64,
    /// Check at most this many seeded entries per parameter; `None` checks all.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { perturbation: 1e-5, max_entries_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.entries_checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares analytic gradients of a scalar `forward` against central differences.
///
/// `forward` builds the loss on a fresh eval-mode graph; it must be deterministic.
/// When a perturbed evaluation flips any ReLU relative to the unperturbed one,
/// the difference straddles a kink and is retried with a step ten times smaller,
/// down to `1e-7`.
pub fn grad_check<F>(store: &mut ParamStore, forward: F, opts: &GradCheckOptions) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph) -> Result<Var, NumericsError>,
{
    let h = opts.perturbation;
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumericsError::Contract(format!("perturbation {h} outside [1e-7, 1e-3]")));
    }
    let eval = |store: &ParamStore| -> Result<(f64, u64), NumericsError> {
        let mut g = Graph::new(store, Mode::Eval);
        let loss = forward(&mut g)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(NumericsError::Contract("grad_check forward must return a scalar".into()));
        }
        Ok((v.item(), g.relu_pattern()))
    };

    let (first, pattern) = eval(store)?;
    let (second, _) = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::Contract(format!("forward is not deterministic: {first} vs {second}")));
    }

    let grads = {
        let mut g = Graph::new(store, Mode::Eval);
        let loss = forward(&mut g)?;
        g.backward(loss)?
    };

    let mut rng = seeded(opts.seed);
    let mut params = Vec::with_capacity(store.len());
    for pi in 0..store.len() {
        let id = super::params::ParamId(pi);
        let n = store.get(id).value.len();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0_f64;
        for &i in &entries {
            let orig = store.get(id).value.data()[i];
            let mut step = h;
            let numeric = loop {
                store.get_mut(id).value.data_mut()[i] = orig + step;
                let plus = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig - step;
                let minus = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                let ((fp, pp), (fm, pm)) = (plus?, minus?);
                if (pp == pattern && pm == pattern) || step / 10.0 < 1e-7 {
                    break (fp - fm) / (2.0 * step);
                }
                step /= 10.0;
            };
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        params.push(ParamCheck { name: store.get(id).name.clone(), entries_checked: entries.len(), max_rel_error: worst });
    }
    Ok(GradCheckReport { params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn steps_across_a_relu_kink_are_shrunk() {
        // relu(w) at w = 5e-6: a step of 1e-5 straddles the kink, 1e-6 does not
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(5e-6)).unwrap();
        let report = grad_check(
            &mut store,
            |g| {
                let w = g.param_by_name("w")?;
                let r = g.relu(w);
                Ok(g.sum(r))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() <= 1e-9, "{}", report.max_rel_error());
    }
}
