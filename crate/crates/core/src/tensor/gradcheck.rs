use super::Real;

/// Central-difference gradient estimate of `f` at `point`:
/// `(f(p + h·e_i) − f(p − h·e_i)) / 2h` for every coordinate `i`.
///
/// `f` must be deterministic (no dropout).
pub fn finite_diff_grad<F>(mut f: F, point: &[Real], h: Real) -> Vec<Real>
where
    F: FnMut(&[Real]) -> Real,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let plus = f(&p);
            p[i] = orig - h;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// max_i |a_i − b_i| / max(|a_i|, |b_i|, floor).
///
/// The floor keeps entries that are zero up to rounding from dominating.
pub fn max_relative_error(analytic: &[Real], numeric: &[Real], floor: Real) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, Real::max)
}
