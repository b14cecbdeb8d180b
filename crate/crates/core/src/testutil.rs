//! Finite-difference oracles shared by unit tests.

use crate::rng::RngStream;

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn uniform_pm1(rng: &mut RngStream, n: usize) -> Vec<f64> {
    rng.uniform(n).into_iter().map(|u| 2.0 * u - 1.0).collect()
}

/// Coordinate-wise derivative estimates that respect the kink signature
/// returned alongside each evaluation.
pub fn kink_diff(mut f: impl FnMut(&[f64]) -> (f64, u64), x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let d = crate::gradcheck::partial(
                |v| {
                    xs[i] = v;
                    f(&xs)
                },
                x[i],
                h,
            );
            xs[i] = x[i];
            d
        })
        .collect()
}
