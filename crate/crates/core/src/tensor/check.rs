use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Two-point central differences at step `h` lose small gradients to
/// roundoff in `f`. Estimates that disagree with `analytic` beyond this are
/// redone with the fourth-order stencil at step `10h`, whatever that
/// estimate turns out to be.
pub const REFINE: f64 = 1e-6;

/// Derivative at 0 of `f(delta)`, checked against `analytic` as described
/// under [`REFINE`].
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, analytic: f64, h: f64) -> Result<f64> {
    let d = (f(h)? - f(-h)?) / (2.0 * h);
    if relative_error(analytic, d) <= REFINE {
        return Ok(d);
    }
    let s = 10.0 * h;
    Ok((-f(2.0 * s)? + 8.0 * f(s)? - 8.0 * f(-s)? + f(-2.0 * s)?) / (12.0 * s))
}

/// Autograd gradient of a scalar function next to its
/// [`central_difference`] estimate, one pair per element of `x`.
pub fn grad_pairs<F>(f: F, x: &Tensor, h: f64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("grad_check step must be > 0, got {h}")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::no_grad();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or(zeros);

    (0..x.numel())
        .map(|i| {
            let shifted = |delta: f64| {
                let mut t = x.clone();
                t.data_mut()[i] += delta;
                eval(t)
            };
            Ok((analytic[i], central_difference(shifted, analytic[i], h)?))
        })
        .collect()
}

/// Largest [`relative_error`] over [`grad_pairs`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let pairs = grad_pairs(f, x, h)?;
    Ok(pairs.iter().map(|&(a, n)| relative_error(a, n)).fold(0.0, f64::max))
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::shape("grad_check", t.shape(), &[1]));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::Numeric(format!("function value is not finite: {y}")));
    }
    Ok(y)
}
