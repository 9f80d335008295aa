use super::{AdError, NdArray, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(|analytic|, |numeric|, floor),
    /// where `floor` is 1e-3 of the largest gradient magnitude seen (and at least 1e-12)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function against central differences
/// at every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &NdArray, step: f64) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AdError>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// Same as [`grad_check`], restricted to the listed flat coordinates.
///
/// A coordinate whose central difference changes materially when the step is
/// halved is reported as [`AdError::NotDifferentiable`] instead of being scored.
pub fn grad_check_coords<F>(f: F, x: &NdArray, step: f64, coords: &[usize]) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AdError>,
{
    if !(step > 0.0) {
        return Err(AdError::Invalid(format!("grad_check step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.get(xv)?;

    let eval = |i: usize, delta: f64| -> Result<f64, AdError> {
        let mut shifted = x.clone();
        shifted.data_mut()[i] += delta;
        let mut t = Tape::new();
        let v = t.param(shifted)?;
        let out = f(&mut t, v)?;
        let val = t.value(out);
        if val.len() != 1 {
            return Err(AdError::NonScalar(val.shape().to_vec()));
        }
        Ok(val.item())
    };

    let mut scored = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.len() {
            return Err(AdError::Shape(format!("coordinate {i} out of range for {}", x.len())));
        }
        let coarse = (eval(i, step)? - eval(i, -step)?) / (2.0 * step);
        let fine = (eval(i, step / 2.0)? - eval(i, -step / 2.0)?) / step;
        let spread = (coarse - fine).abs();
        if spread > 1e-3 * coarse.abs().max(fine.abs()) + 1e-6 {
            return Err(AdError::NotDifferentiable { index: i, coarse, fine });
        }
        // Richardson: cancels the O(h²) term of the central difference
        scored.push((i, analytic.data()[i], (4.0 * fine - coarse) / 3.0));
    }
    let scale = scored.iter().fold(0.0f64, |m, &(_, a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for (i, a, n) in scored {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
        report.checked += 1;
    }
    Ok(report)
}
