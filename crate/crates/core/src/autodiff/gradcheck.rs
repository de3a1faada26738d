//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, Mode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Debug)]
pub struct ParamError {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    /// Step actually used; smaller than requested after a kink retry.
    pub step: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub per_parameter_errors: Vec<ParamError>,
    /// Probes re-run with a smaller step because ±ε straddled a kink.
    pub kink_retries: usize,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.per_parameter_errors.len()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_relative_error > self.max_relative_error || self.per_parameter_errors.is_empty() {
            self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
            self.worst_parameter = other.worst_parameter.clone();
        }
        self.per_parameter_errors.extend(other.per_parameter_errors);
        self.kink_retries += other.kink_retries;
    }
}

/// Which trainable scalars to perturb.
#[derive(Copy, Clone, Debug)]
pub enum Probe {
    All,
    Random { count: usize, seed: u64 },
}

/// Each kink retry divides the step by this, at most `KINK_RETRIES` times.
const KINK_SHRINK: f64 = 10.0;
const KINK_RETRIES: usize = 3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the analytic gradient of `loss_fn` with
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for the probed parameter entries.
///
/// When the two evaluations see a leaky-ReLU input on different sides of
/// zero the difference quotient mixes two slopes, so that entry is retried
/// with a smaller step.
///
/// `loss_fn` must build a scalar loss on the graph it is handed and be a
/// pure function of the store's values.
pub fn finite_diff_gradcheck<T, F>(
    store: &mut ParamStore<T>,
    mode: Mode,
    probe: Probe,
    epsilon: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Float,
    F: FnMut(&mut Graph<T>) -> Result<Var>,
{
    let trainable = store.trainable_ids();
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new(&*store, mode);
        let loss = loss_fn(&mut g)?;
        let grads = g.backward(loss)?;
        trainable
            .iter()
            .map(|&id| {
                let n = store.tensor(id).len();
                let g = grads
                    .param(id)
                    .map(|g| g.iter().map(|v| v.as_f64()).collect())
                    .unwrap_or_else(|| vec![0.0; n]);
                (id, g)
            })
            .collect()
    };

    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    let flat: Vec<usize> = match probe {
        Probe::All => (0..total).collect(),
        Probe::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = sample(&mut rng, total, count.min(total)).into_vec();
            picks.sort_unstable();
            picks
        }
    };

    let mut report = GradCheckReport::default();
    let mut eval = |store: &ParamStore<T>| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::new(store, mode);
        g.track_kinks();
        let loss = loss_fn(&mut g)?;
        Ok((g.value(loss).item().as_f64(), g.kink_signature()))
    };
    let mut cursor = 0;
    let mut offset = 0;
    for f in flat {
        while f >= offset + analytic[cursor].1.len() {
            offset += analytic[cursor].1.len();
            cursor += 1;
        }
        let (id, grad) = &analytic[cursor];
        let index = f - offset;
        let original = store.tensor(*id).data()[index];
        let mut step = epsilon;
        let mut retries = 0;
        let numeric = loop {
            store.tensor_mut(*id).data_mut()[index] = T::from_f64_lossy(original.as_f64() + step);
            let plus = eval(store)?;
            store.tensor_mut(*id).data_mut()[index] = T::from_f64_lossy(original.as_f64() - step);
            let minus = eval(store)?;
            store.tensor_mut(*id).data_mut()[index] = original;
            if plus.1 == minus.1 || retries == KINK_RETRIES {
                break (plus.0 - minus.0) / (2.0 * step);
            }
            step /= KINK_SHRINK;
            retries += 1;
        };
        report.kink_retries += retries;
        let err = relative_error(grad[index], numeric);
        let name = store.name(*id).to_string();
        if err > report.max_relative_error || report.per_parameter_errors.is_empty() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst_parameter = format!("{name}[{index}]");
        }
        report.per_parameter_errors.push(ParamError {
            parameter: name,
            index,
            analytic: grad[index],
            numeric,
            relative_error: err,
            step,
        });
    }
    Ok(report)
}
