use rand::Rng;

/// One univariate slice-sampling update with stepping out and shrinkage.
///
/// `log_density` may return `-inf` outside its support; `lo`/`hi` clip the
/// bracket.
pub fn slice_sample<R, F>(rng: &mut R, x0: f64, log_density: F, width: f64, lo: f64, hi: f64) -> f64
where
    R: Rng + ?Sized,
    F: Fn(f64) -> f64,
{
    const MAX_STEPS: usize = 50;
    let f0 = log_density(x0);
    if !f0.is_finite() {
        return x0;
    }
    let level = f0 + rng.random::<f64>().max(1e-300).ln();
    let mut left = x0 - width * rng.random::<f64>();
    let mut right = left + width;
    let mut j = (MAX_STEPS as f64 * rng.random::<f64>()) as usize;
    let mut k = MAX_STEPS - 1 - j;
    while j > 0 && left > lo && log_density(left) > level {
        left -= width;
        j -= 1;
    }
    while k > 0 && right < hi && log_density(right) > level {
        right += width;
        k -= 1;
    }
    left = left.max(lo);
    right = right.min(hi);
    for _ in 0..200 {
        let x1 = left + rng.random::<f64>() * (right - left);
        if log_density(x1) > level {
            return x1;
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
    }
    x0
}
