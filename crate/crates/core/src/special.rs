//! Special functions and small samplers: incomplete gamma in log space,
//! truncated Gamma draws, modified Bessel K, Matérn correlation, and a
//! Kolmogorov-Smirnov helper used by the distributional checks.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

fn log_sum_series(a: f64, x: f64) -> f64 {
    // sum_{n>=0} x^n / ((a+1)...(a+n))
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut ap = a;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum.ln()
}

fn log_cont_frac(a: f64, x: f64) -> f64 {
    // modified Lentz for the continued fraction of Q(a, x)
    let fpmin = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / fpmin;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < fpmin {
            d = fpmin;
        }
        c = b + an / c;
        if c.abs() < fpmin {
            c = fpmin;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h.ln()
}

/// Log of the regularized lower incomplete gamma function `P(a, x)`.
pub fn ln_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if x.is_infinite() {
        return 0.0;
    }
    if x < a + 1.0 {
        a * x.ln() - x - ln_gamma(a + 1.0) + log_sum_series(a, x)
    } else {
        let lq = ln_gamma_q_cf(a, x);
        ln1m_exp(lq)
    }
}

/// Log of the regularized upper incomplete gamma function `Q(a, x)`.
pub fn ln_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return f64::NEG_INFINITY;
    }
    if x < a + 1.0 {
        ln1m_exp(ln_gamma_p(a, x))
    } else {
        ln_gamma_q_cf(a, x)
    }
}

fn ln_gamma_q_cf(a: f64, x: f64) -> f64 {
    a * x.ln() - x - ln_gamma(a) + log_cont_frac(a, x)
}

/// `ln(1 - exp(l))` for `l <= 0`, accurate at both ends.
pub fn ln1m_exp(l: f64) -> f64 {
    if l > -std::f64::consts::LN_2 {
        (-l.exp_m1()).ln()
    } else {
        (-l.exp()).ln_1p()
    }
}

/// `ln(exp(a) + exp(b))`.
pub fn ln_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidParameter(format!("gamma({shape}, {rate}): {e}")))?;
    Ok(g.sample(rng))
}

/// Draw from `Gamma(shape, rate)` restricted to `(lo, hi)` by inverse CDF.
///
/// The CDF is handled in log space on whichever tail the interval sits in, so
/// intervals far in either tail stay accurate.
pub fn sample_truncated_gamma<R: Rng + ?Sized>(
    rng: &mut R,
    shape: f64,
    rate: f64,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !(hi > lo) || lo < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "truncated gamma shape={shape} rate={rate} on ({lo}, {hi})"
        )));
    }
    let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
    truncated_gamma_quantile(shape, rate, lo, hi, u)
}

/// Quantile `u` of `Gamma(shape, rate)` restricted to `(lo, hi)`.
pub fn truncated_gamma_quantile(shape: f64, rate: f64, lo: f64, hi: f64, u: f64) -> Result<f64> {
    let (xl, xh) = (rate * lo, rate * hi);
    let lp_lo = ln_gamma_p(shape, xl);
    let lp_hi = ln_gamma_p(shape, xh);
    let lq_lo = ln_gamma_q(shape, xl);
    let lq_hi = ln_gamma_q(shape, xh);
    // Pick the tail with more resolution.
    let use_upper = lq_lo < lp_hi;
    let target;
    if use_upper {
        // survival S(x) = Q; want S = S_lo - u (S_lo - S_hi)
        let d = if lq_hi == f64::NEG_INFINITY {
            0.0
        } else {
            (lq_hi - lq_lo).exp()
        };
        target = lq_lo + (1.0 - u * (1.0 - d)).ln();
    } else {
        let w = if lp_lo == f64::NEG_INFINITY {
            0.0
        } else {
            (lp_lo - lp_hi).exp()
        };
        target = lp_hi + (w + u * (1.0 - w)).ln();
    }
    if !target.is_finite() && target != f64::NEG_INFINITY {
        return Err(Error::Numerical("truncated gamma target".into()));
    }
    let f = |x: f64| -> f64 {
        if use_upper {
            // decreasing in x; negate to make increasing
            -ln_gamma_q(shape, x)
        } else {
            ln_gamma_p(shape, x)
        }
    };
    let goal = if use_upper { -target } else { target };
    // Bisection on log x.
    let mut a = if xl > 0.0 { xl.ln() } else { -50.0 };
    let mut b = if xh.is_finite() {
        xh.ln()
    } else {
        let mut bb = (shape + 10.0 * shape.sqrt() + 10.0).max(xl * 2.0 + 1.0).ln();
        while f(bb.exp()) < goal && bb < 700.0 {
            bb += 1.0;
        }
        bb
    };
    if xl <= 0.0 {
        while f(a.exp()) > goal && a > -7000.0 {
            a -= 50.0;
        }
    }
    for _ in 0..300 {
        let m = 0.5 * (a + b);
        if f(m.exp()) < goal {
            a = m;
        } else {
            b = m;
        }
        if (b - a).abs() < 1e-15 {
            break;
        }
    }
    let x = (0.5 * (a + b)).exp() / rate;
    Ok(x.clamp(lo, hi))
}

/// Modified Bessel function of the second kind via its integral representation
/// `K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt` (trapezoid, exponentially convergent).
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return f64::INFINITY;
    }
    let h = 0.01;
    let mut sum = 0.5 * (-x).exp();
    let mut t: f64 = h;
    loop {
        let v = (-x * f64::cosh(t) + nu * t).exp() * 0.5 * (1.0 + (-2.0 * nu * t).exp());
        sum += v;
        if v < 1e-18 * sum && x * f64::cosh(t) > nu * t + 40.0 {
            break;
        }
        t += h;
        if t > 50.0 {
            break;
        }
    }
    sum * h
}

/// Matérn correlation with smoothness `nu` at scaled distance `x = d / range`:
/// `R = {2^{nu-1} Gamma(nu)}^{-1} x^nu K_nu(x)`.
pub fn matern_corr(nu: f64, x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        return 1.0;
    }
    if (nu - 0.5).abs() < 1e-12 {
        return (-x).exp();
    }
    if (nu - 1.5).abs() < 1e-12 {
        return (1.0 + x) * (-x).exp();
    }
    if (nu - 2.5).abs() < 1e-12 {
        return (1.0 + x + x * x / 3.0) * (-x).exp();
    }
    let twice = 2.0 * nu;
    if (twice - twice.round()).abs() < 1e-12 && twice.round() as i64 % 2 == 1 {
        // half-integer nu = n + 1/2 closed form
        let n = (nu - 0.5).round() as i64;
        let mut s = 0.0;
        for k in 0..=n {
            let lf = ln_gamma((n + k + 1) as f64)
                - ln_gamma((k + 1) as f64)
                - ln_gamma((n - k + 1) as f64)
                - k as f64 * (2.0 * x).ln();
            s += lf.exp();
        }
        let lk = 0.5 * (std::f64::consts::PI / (2.0 * x)).ln() - x + s.ln();
        return ((1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln() + lk).exp();
    }
    if x > 700.0 {
        return 0.0;
    }
    let k = bessel_k(nu, x);
    ((1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln()).exp() * k
}

/// Two-sided Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic p-value of the one-sample KS statistic `d` with `n` samples.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    let mut s: Vec<f64> = xs.iter().copied().filter(|v| !v.is_nan()).collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&s, 0.5)
}
