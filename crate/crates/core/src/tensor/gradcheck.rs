use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
///
/// This is the independent oracle the tape is checked against; it evaluates
/// `f` only through values and never touches a tape's backward rules.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::numeric(format!(
                "f is not finite around coordinate {i}: f(x+h)={up}, f(x-h)={down}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Largest [`relative_error`] over matching entries of two tensors.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "compared tensors differ in shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.5]).unwrap();
        let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        assert!(matches!(
            finite_diff_grad(|_| Ok(0.0), &x, 0.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
