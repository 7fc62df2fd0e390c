use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// Returns the largest relative error, measured as
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let input = tape.leaf(&x.clone().with_requires_grad(true));
        let out = f(&mut tape, input)?;
        let grads = tape.backward(out)?;
        grads
            .get(input)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(x.shape().to_vec(), values.to_vec())?;
        let input = tape.constant(&t);
        let out = f(&mut tape, input)?;
        Ok(tape.value(out)[0])
    };
    let mut probe = x.values().to_vec();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(
            |t, v| {
                let y = t.scale(v, 3.0);
                Ok(t.sum(y))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }
}
