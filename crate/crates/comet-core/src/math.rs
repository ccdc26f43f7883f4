//! Transcendental helpers routed through libm so the crate stays no_std.

pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub(crate) fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

pub(crate) fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub(crate) fn pow(base: f64, exp: f64) -> f64 {
    libm::pow(base, exp)
}

pub(crate) const TAU: f64 = 6.283185307179586476925286766559;
pub(crate) const LN_2PI: f64 = 1.8378770664093454835606594728112;
