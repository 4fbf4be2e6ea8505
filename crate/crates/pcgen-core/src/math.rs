//! Scalar float helpers routed through `libm` so results are identical with
//! and without `std`.

pub const PI: f32 = core::f32::consts::PI;

#[inline]
pub fn expf(x: f32) -> f32 {
    libm::expf(x)
}

#[inline]
pub fn ln_1p(x: f32) -> f32 {
    libm::log1pf(x)
}

#[inline]
pub fn sqrtf(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[inline]
pub fn sqrt64(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn cosf(x: f32) -> f32 {
    libm::cosf(x)
}

#[inline]
pub fn sinf(x: f32) -> f32 {
    libm::sinf(x)
}

#[inline]
pub fn tanhf(x: f32) -> f32 {
    libm::tanhf(x)
}

#[inline]
pub fn cos64(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin64(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cbrt64(x: f64) -> f64 {
    libm::cbrt(x)
}

#[inline]
pub fn floor64(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn pow64(base: f64, exp: f64) -> f64 {
    libm::pow(base, exp)
}

#[inline]
pub fn floorf(x: f32) -> f32 {
    libm::floorf(x)
}

/// Numerically stable softplus: ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|).
#[inline]
pub fn softplus(x: f32) -> f32 {
    let m = if x > 0.0 { x } else { 0.0 };
    m + ln_1p(expf(-fabsf(x)))
}

/// d/dx softplus(x) = sigmoid(x).
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + expf(-x))
    } else {
        let e = expf(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn fabsf(x: f32) -> f32 {
    libm::fabsf(x)
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³))).
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + tanhf(C * (x + 0.044715 * x * x * x)))
}

/// Derivative of the tanh-approximated GELU.
#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = tanhf(inner);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!(softplus(100.0).is_finite());
        assert!((softplus(100.0) - 100.0).abs() < 1e-4);
        assert!(softplus(-100.0) >= 0.0);
        assert!(softplus(-100.0) < 1e-6);
        assert!((softplus(0.0) - core::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_matches_definition() {
        for &x in &[-5.0f32, -0.3, 0.0, 0.7, 9.0] {
            let direct = 1.0 / (1.0 + (-x as f64).exp());
            assert!((sigmoid(x) as f64 - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let eps = 1e-3f64;
        for &x in &[-2.0f32, -0.5, 0.1, 1.3, 2.7] {
            let f = |v: f64| {
                let v = v as f32;
                gelu(v) as f64
            };
            let fd = (f(x as f64 + eps) - f(x as f64 - eps)) / (2.0 * eps);
            assert!(
                (gelu_grad(x) as f64 - fd).abs() < 1e-3,
                "x={x}: analytic {} vs fd {fd}",
                gelu_grad(x)
            );
        }
    }
}
