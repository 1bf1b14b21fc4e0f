//! Scalar float math for `no_std` builds. Thin wrappers over `libm` plus the
//! handful of closed forms the model needs (Gaussian CDF/PDF, stable
//! softplus).

pub const PI: f64 = core::f64::consts::PI;
pub const SQRT_2: f64 = core::f64::consts::SQRT_2;

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

/// Standard normal CDF via the error function.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Standard normal PDF.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    exp(-0.5 * x * x) / sqrt(2.0 * PI)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large x.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        exp(x)
    } else {
        ln_1p(exp(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry() {
        assert!(abs(sigmoid(0.0) - 0.5) < 1e-15);
        assert!(abs(sigmoid(3.0) + sigmoid(-3.0) - 1.0) < 1e-12);
    }

    #[test]
    fn softplus_stable_at_extremes() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-800.0) < 1e-300);
    }

    #[test]
    fn norm_cdf_anchors() {
        assert!(abs(norm_cdf(0.0) - 0.5) < 1e-15);
        assert!(norm_cdf(10.0) > 1.0 - 1e-12);
        assert!(norm_cdf(-10.0) < 1e-12);
    }
}
