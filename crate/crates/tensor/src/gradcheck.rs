//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::array::Array;
use crate::error::TensorError;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many components per input (random subset).
    pub max_per_input: Option<usize>,
    /// Components whose magnitude is below `floor * max_gradient` are compared
    /// against that floor instead of their own magnitude.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_per_input: None,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// (input, component) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub analytic_norm: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Compares the reverse-mode gradient of `f` at `inputs` with central
/// differences of its value.
///
/// `f` may use any error type that tensor errors convert into.
pub fn check_gradients<F, E>(
    f: F,
    inputs: &[Array],
    opts: GradCheckOptions,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Array> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |xs: &[Array]| -> std::result::Result<f64, E> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.constant(a.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut numeric = Vec::new();
    let mut work: Vec<Array> = inputs.to_vec();
    for (i, a) in inputs.iter().enumerate() {
        let idx: Vec<usize> = match opts.max_per_input {
            Some(m) if m < a.len() => sample(&mut rng, a.len(), m).into_vec(),
            _ => (0..a.len()).collect(),
        };
        for j in idx {
            let x0 = a.data()[j];
            work[i].data_mut()[j] = x0 + opts.step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - opts.step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric.push((i, j, (fp - fm) / (2.0 * opts.step)));
        }
    }

    let scale = numeric
        .iter()
        .map(|&(i, j, n)| n.abs().max(analytic[i].data()[j].abs()))
        .fold(0.0, f64::max);
    let floor = (opts.floor * scale).max(1e-300);
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: numeric.len(),
        analytic_norm: analytic
            .iter()
            .map(|a| a.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt(),
    };
    for (i, j, n) in numeric {
        let a = analytic[i].data()[j];
        let err = (a - n).abs();
        let rel = err / a.abs().max(n.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(err);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (i, j);
        }
    }
    Ok(report)
}
