//! Central finite-difference gradient checking (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    floored_error(analytic, numeric, 1e-8)
}

/// Gradient magnitude below which central differences at `eps = 1e-5` are
/// dominated by rounding; smaller coordinates are judged on absolute error.
pub const ROUNDING_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn floored_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Maximum relative error between `analytic` and central differences of `f` at `x`.
pub fn finite_difference_check<F>(mut f: F, x: &Array<f64>, analytic: &Array<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Array<f64>) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    if x.shape() != analytic.shape() {
        return Err(Error::Invalid(format!(
            "analytic gradient shape {:?} differs from input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let f0 = f(x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {f0}")));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Relative error with denominator floor 1e-8.
    pub max_rel_error: f64,
    /// Relative error with denominator floor [`ROUNDING_FLOOR`].
    pub max_floored_error: f64,
    pub coords_checked: usize,
    /// Parameter name, flat index, analytic value, numeric value at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.coords_checked += other.coords_checked;
        self.max_floored_error = self.max_floored_error.max(other.max_floored_error);
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() && other.max_rel_error >= self.max_rel_error {
                self.worst = other.worst;
            }
        }
    }
}

/// Check every parameter gradient of the scalar built by `build`.
///
/// Parameters with more than `max_coords` entries are checked on a seeded
/// random subset of coordinates.
pub fn check_param_gradients<F>(
    params: &mut ParamSet<f64>,
    eps: f64,
    max_coords: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss = {v}")));
        }
        Ok(v)
    };
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?.params
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.value(id).len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + eps;
            let fp = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig - eps;
            let fm = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[id.index()].data()[i];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            report.max_floored_error = report.max_floored_error.max(floored_error(a, numeric, ROUNDING_FLOOR));
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.get(id).name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Distance of the built graph from its nearest ReLU/abs kink; instances
/// closer than the finite-difference reach are not meaningful to check.
pub fn kink_margin<F>(params: &ParamSet<f64>, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    build(&mut tape)?;
    Ok(tape.kink_margin().unwrap_or(f64::INFINITY))
}

/// Redraw every parameter named `*.b` uniformly from `[lo, hi]`.
pub fn randomize_biases<R: rand::Rng + ?Sized>(params: &mut ParamSet<f64>, lo: f64, hi: f64, rng: &mut R) {
    for p in params.iter_mut().filter(|p| p.name.ends_with(".b")) {
        for v in p.value.data_mut() {
            *v = rng.random_range(lo..=hi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_closed_form() {
        let x = Array::new(&[2], vec![1.0, 2.0]).unwrap();
        let f = |x: &Array<f64>| Ok(x.data().iter().map(|v| v * v).sum());
        let analytic = Array::new(&[2], vec![2.0, 4.0]).unwrap();
        let err = finite_difference_check(f, &x, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Array::new(&[3], vec![0.3, -1.0, 4.0]).unwrap();
        let err = finite_difference_check(|_| Ok(7.0), &x, &Array::zeros(&[3]), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Array::new(&[1], vec![1.0]).unwrap();
        let g = Array::zeros(&[1]);
        assert!(finite_difference_check(|_| Ok(0.0), &x, &g, 0.0).is_err());
        assert!(matches!(
            finite_difference_check(|_| Ok(f64::NAN), &x, &g, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
