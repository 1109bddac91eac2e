use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::numcore::{stream_rng, Parameters, Stream, Tape, Var};

/// Minimum number of coordinates probed per parameter (all of them if fewer).
pub const MIN_SAMPLES_PER_PARAM: usize = 20;

/// Worst coordinate found by [`finite_difference_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
}

/// Compares tape gradients with central finite differences.
///
/// `loss` builds a scalar on the tape it is handed; it is called once on a
/// training tape for the analytic gradient and twice per probed coordinate.
/// Anything stochastic inside it (dropout) must be re-seeded per call.
/// Returns the max of `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_difference_check<F>(
    params: &mut Parameters,
    epsilon: f64,
    samples_per_param: usize,
    seed: u64,
    loss: F,
) -> Result<f64>
where
    F: FnMut(&Parameters, &mut Tape) -> Result<Var>,
{
    finite_difference_report(params, epsilon, samples_per_param, seed, loss).map(|r| r.max_relative_error)
}

/// Like [`finite_difference_check`], also naming the worst coordinate.
pub fn finite_difference_report<F>(
    params: &mut Parameters,
    epsilon: f64,
    samples_per_param: usize,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&Parameters, &mut Tape) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} not in (0, 1e-2]")));
    }
    let samples_per_param = samples_per_param.max(MIN_SAMPLES_PER_PARAM);

    params.zero_grads();
    let mut tape = Tape::training();
    let out = loss(params, &mut tape)?;
    check_finite(tape.value(out).item())?;
    tape.backward(out, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();
    params.zero_grads();

    let mut eval = |params: &Parameters| -> Result<f64> {
        let mut tape = Tape::training();
        let out = loss(params, &mut tape)?;
        let v = tape.value(out).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut rng = stream_rng(seed, Stream::Sample, 0);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).value.numel();
        let coords: Vec<usize> =
            if n <= samples_per_param { (0..n).collect() } else { sample(&mut rng, n, samples_per_param).into_vec() };
        for c in coords {
            let orig = params.get(id).value.data()[c];
            params.get_mut(id).value.data_mut()[c] = orig + epsilon;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[c] = orig - epsilon;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[id.index()][c];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.coordinates_checked += 1;
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = c;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("finite-difference loss evaluation".into()))
    }
}
