//! Central finite-difference verification of tape gradients.

use super::{NumericsError, ParamStore, Rng, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are numerically zero
    /// are compared in absolute terms.
    pub floor: f64,
    /// Upper bound on checked entries per parameter; larger tensors are sampled.
    pub max_entries: usize,
    /// Build training-mode tapes (dropout active, same mask on every evaluation).
    pub training: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-6, max_entries: 64, training: false, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    /// Set when the graph builder failed; the report is then a failure.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(store: &ParamStore, build: &F, opts: &GradCheckOptions) -> Result<f64, NumericsError>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var, NumericsError>,
{
    let mut tape = if opts.training { Tape::training(store, Rng::new(opts.seed)) } else { Tape::new(store) };
    let loss = build(&mut tape)?;
    Ok(tape.value(loss).item())
}

/// Compares the tape gradient of the scalar built by `build` against central differences
/// for every unfrozen parameter in `store`. Never fails: builder errors land in the report.
pub fn finite_difference_check<F>(store: &mut ParamStore, build: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var, NumericsError>,
{
    let mut report = GradCheckReport { tolerance: opts.tolerance, params: Vec::new(), error: None };
    let grads = {
        let mut tape = if opts.training { Tape::training(store, Rng::new(opts.seed)) } else { Tape::new(store) };
        match build(&mut tape).and_then(|loss| tape.backward(loss)) {
            Ok(g) => g,
            Err(e) => {
                report.error = Some(e.to_string());
                return report;
            }
        }
    };
    let mut sampler = Rng::new(opts.seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().filter(|&id| !store.get(id).frozen).collect();
    for id in ids {
        let n = store.get(id).tensor.numel();
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            sampler.shuffle(&mut all);
            all.truncate(opts.max_entries);
            all.sort_unstable();
            all
        };
        let mut worst: f64 = 0.0;
        for &e in &entries {
            let orig = store.get(id).tensor.data()[e];
            store.get_mut(id).tensor.data_mut()[e] = orig + opts.step;
            let plus = evaluate(store, &build, opts);
            store.get_mut(id).tensor.data_mut()[e] = orig - opts.step;
            let minus = evaluate(store, &build, opts);
            store.get_mut(id).tensor.data_mut()[e] = orig;
            match (plus, minus) {
                (Ok(p), Ok(m)) => {
                    let numeric = (p - m) / (2.0 * opts.step);
                    worst = worst.max(relative_error(analytic[e], numeric, opts.floor));
                }
                (Err(err), _) | (_, Err(err)) => {
                    report.error = Some(err.to_string());
                    return report;
                }
            }
        }
        report.params.push(ParamCheck { name: store.get(id).name.clone(), checked: entries.len(), max_rel_error: worst });
    }
    report
}
