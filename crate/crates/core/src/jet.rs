//! Truncated Taylor series in time.
//!
//! A [`Jet`] stores `f(t), f'(t), f''(t)/2!, …` up to a runtime order and
//! propagates them exactly through arithmetic and the few elementary
//! functions the flatness map needs. This is how time derivatives of
//! heading, reduced attitude and the attitude matrix are obtained from
//! polynomial flat outputs without numeric differencing.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Highest supported order.
pub const MAX_ORDER: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    coeffs: [f64; MAX_ORDER + 1],
    order: usize,
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

impl Jet {
    pub fn constant(value: f64, order: usize) -> Self {
        let mut coeffs = [0.0; MAX_ORDER + 1];
        coeffs[0] = value;
        Self { coeffs, order: order.min(MAX_ORDER) }
    }

    /// Builds a jet from successive derivatives `[f, f', f'', …]`.
    pub fn from_derivatives(derivs: &[f64]) -> Self {
        assert!(!derivs.is_empty() && derivs.len() <= MAX_ORDER + 1);
        let mut coeffs = [0.0; MAX_ORDER + 1];
        for (k, d) in derivs.iter().enumerate() {
            coeffs[k] = d / factorial(k);
        }
        Self { coeffs, order: derivs.len() - 1 }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// k-th time derivative at the expansion point.
    pub fn derivative_value(&self, k: usize) -> f64 {
        if k > self.order {
            0.0
        } else {
            self.coeffs[k] * factorial(k)
        }
    }

    /// The jet of `f'`, one order shorter.
    pub fn derivative(&self) -> Self {
        assert!(self.order > 0, "cannot differentiate an order-0 jet");
        let mut coeffs = [0.0; MAX_ORDER + 1];
        for k in 0..self.order {
            coeffs[k] = (k + 1) as f64 * self.coeffs[k + 1];
        }
        Self { coeffs, order: self.order - 1 }
    }

    pub fn truncate(&self, order: usize) -> Self {
        let order = order.min(self.order);
        let mut coeffs = [0.0; MAX_ORDER + 1];
        coeffs[..=order].copy_from_slice(&self.coeffs[..=order]);
        Self { coeffs, order }
    }

    fn integrate_from(&self, value: f64) -> Self {
        let order = (self.order + 1).min(MAX_ORDER);
        let mut coeffs = [0.0; MAX_ORDER + 1];
        coeffs[0] = value;
        for k in 1..=order {
            coeffs[k] = self.coeffs[k - 1] / k as f64;
        }
        Self { coeffs, order }
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        for c in out.coeffs.iter_mut() {
            *c *= s;
        }
        out
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        let mut out = *self;
        out.coeffs[0] += s;
        out
    }

    pub fn recip(&self) -> Self {
        Jet::constant(1.0, self.order) / *self
    }

    pub fn sqrt(&self) -> Self {
        let n = self.order;
        let mut s = [0.0; MAX_ORDER + 1];
        s[0] = self.coeffs[0].sqrt();
        for k in 1..=n {
            let cross: f64 = (1..k).map(|j| s[j] * s[k - j]).sum();
            s[k] = (self.coeffs[k] - cross) / (2.0 * s[0]);
        }
        Self { coeffs: s, order: n }
    }

    /// `sgn(f)·f²`, analytic away from `f = 0` and C¹ through it.
    pub fn signed_square(&self) -> Self {
        let sq = *self * *self;
        if self.coeffs[0] > 0.0 {
            sq
        } else if self.coeffs[0] < 0.0 {
            -sq
        } else {
            Jet::constant(0.0, self.order)
        }
    }

    pub fn sin_cos(&self) -> (Self, Self) {
        let n = self.order;
        let mut s = [0.0; MAX_ORDER + 1];
        let mut c = [0.0; MAX_ORDER + 1];
        (s[0], c[0]) = self.coeffs[0].sin_cos();
        for k in 1..=n {
            let mut ds = 0.0;
            let mut dc = 0.0;
            for j in 1..=k {
                let w = j as f64 * self.coeffs[j];
                ds += w * c[k - j];
                dc -= w * s[k - j];
            }
            s[k] = ds / k as f64;
            c[k] = dc / k as f64;
        }
        (Self { coeffs: s, order: n }, Self { coeffs: c, order: n })
    }

    /// Four-quadrant arctangent `atan2(y, x)` as a jet.
    pub fn atan2(y: &Jet, x: &Jet) -> Self {
        let n = y.order.min(x.order);
        let y = y.truncate(n);
        let x = x.truncate(n);
        let angle = y.value().atan2(x.value());
        if n == 0 {
            return Jet::constant(angle, 0);
        }
        let rate = (x.truncate(n - 1) * y.derivative() - y.truncate(n - 1) * x.derivative())
            / (x * x + y * y).truncate(n - 1);
        rate.integrate_from(angle)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        let order = self.order.min(rhs.order);
        let mut coeffs = [0.0; MAX_ORDER + 1];
        for k in 0..=order {
            coeffs[k] = self.coeffs[k] + rhs.coeffs[k];
        }
        Jet { coeffs, order }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        self + (-rhs)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let order = self.order.min(rhs.order);
        let mut coeffs = [0.0; MAX_ORDER + 1];
        for k in 0..=order {
            coeffs[k] = (0..=k).map(|j| self.coeffs[j] * rhs.coeffs[k - j]).sum();
        }
        Jet { coeffs, order }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        let order = self.order.min(rhs.order);
        let mut q = [0.0; MAX_ORDER + 1];
        for k in 0..=order {
            let acc: f64 = (1..=k).map(|j| rhs.coeffs[j] * q[k - j]).sum();
            q[k] = (self.coeffs[k] - acc) / rhs.coeffs[0];
        }
        Jet { coeffs: q, order }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, rhs: f64) -> Jet {
        self.scale(rhs)
    }
}

/// 3×3 matrix of jets, row-major.
pub type JetMatrix = [[Jet; 3]; 3];

pub fn jet_matmul(a: &JetMatrix, b: &JetMatrix) -> JetMatrix {
    let zero = Jet::constant(0.0, MAX_ORDER);
    let mut out = [[zero; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn jet_transpose(a: &JetMatrix) -> JetMatrix {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn jet_matrix_derivative(a: &JetMatrix) -> JetMatrix {
    let mut out = *a;
    for row in out.iter_mut() {
        for e in row.iter_mut() {
            *e = e.derivative();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Oracle: central finite differences of the closed-form function.
    fn fd(f: impl Fn(f64) -> f64, t: f64, k: usize) -> f64 {
        let h: f64 = 1e-2;
        match k {
            1 => (f(t + h) - f(t - h)) / (2.0 * h),
            2 => (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h),
            _ => unreachable!(),
        }
    }

    fn t_jet(t: f64) -> Jet {
        Jet::from_derivatives(&[t, 1.0, 0.0, 0.0])
    }

    #[test]
    fn composite_function_matches_finite_differences() {
        let t0 = 0.4;
        let f = |t: f64| ((t * t + 1.0).sqrt() * (2.0 * t).sin() / (1.0 + t)).atan2(t.cos());
        let t = t_jet(t0);
        let (s, _) = (t.scale(2.0)).sin_cos();
        let (_, c) = t.sin_cos();
        let num = (t * t).add_scalar(1.0).sqrt() * s / t.add_scalar(1.0);
        let j = Jet::atan2(&num, &c);
        assert_relative_eq!(j.value(), f(t0), epsilon = 1e-14);
        assert_relative_eq!(j.derivative_value(1), fd(f, t0, 1), epsilon = 1e-3);
        assert_relative_eq!(j.derivative_value(2), fd(f, t0, 2), epsilon = 1e-2);
    }

    #[test]
    fn polynomial_product_is_exact() {
        // (1 + t)^2 * t at t = 2: value 18, d1 = 21, d2 = 16, d3 = 6.
        let t = t_jet(2.0);
        let p = t.add_scalar(1.0) * t.add_scalar(1.0) * t;
        assert_relative_eq!(p.derivative_value(0), 18.0);
        assert_relative_eq!(p.derivative_value(1), 21.0);
        assert_relative_eq!(p.derivative_value(2), 16.0);
        assert_relative_eq!(p.derivative_value(3), 6.0);
    }

    #[test]
    fn circle_heading_rate() {
        // Velocity of the unit circle: (-sin t, cos t); heading rate is exactly 1.
        let t0: f64 = 1.3;
        let vx = Jet::from_derivatives(&[-t0.sin(), -t0.cos(), t0.sin(), t0.cos()]);
        let vy = Jet::from_derivatives(&[t0.cos(), -t0.sin(), -t0.cos(), t0.sin()]);
        let psi = Jet::atan2(&vy, &vx);
        assert_relative_eq!(psi.derivative_value(1), 1.0, epsilon = 1e-14);
        assert_relative_eq!(psi.derivative_value(2), 0.0, epsilon = 1e-14);
        assert_relative_eq!(psi.derivative_value(3), 0.0, epsilon = 1e-13);
    }
}
