//! Forward-mode dual numbers used to differentiate the per-pixel shading
//! code with respect to one face's nine vertex coordinates.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(&self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn sigmoid(self) -> Self;
    /// Value clamped to [lo, hi]; zero derivative outside.
    fn clamp(self, lo: f64, hi: f64) -> Self;
    fn floor_val(&self) -> f64 {
        self.val().floor()
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(&self) -> f64 {
        *self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        f64::clamp(self, lo, hi)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Jet<N> {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Jet { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Jet {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] += o.d[i];
        }
        Jet { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] -= o.d[i];
        }
        Jet { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + o.d[i] * self.v;
        }
        Jet { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * o.d[i]) * inv;
        }
        Jet { v, d }
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Jet {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl<const N: usize> Add<f64> for Jet<N> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        Jet { v: self.v + c, d: self.d }
    }
}

impl<const N: usize> Mul<f64> for Jet<N> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        Jet {
            v: self.v * c,
            d: self.d.map(|x| x * c),
        }
    }
}

impl<const N: usize> Scalar for Jet<N> {
    fn cst(v: f64) -> Self {
        Jet { v, d: [0.0; N] }
    }
    fn val(&self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.v);
        self.chain(s, s * (1.0 - s))
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        // ties take the inside branch: the left-hand derivative at `hi`
        // and the right-hand one at `lo` are both the identity
        if self.v < lo {
            Jet::cst(lo)
        } else if self.v > hi {
            Jet::cst(hi)
        } else {
            self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_of_a_small_expression() {
        // f(x, y) = exp(x) * sqrt(y) / (x + y)
        let f = |x: f64, y: f64| x.exp() * y.sqrt() / (x + y);
        let (x, y) = (0.3, 1.7);
        let jx = Jet::<2>::var(x, 0);
        let jy = Jet::<2>::var(y, 1);
        let j = jx.exp() * jy.sqrt() / (jx + jy);
        let h = 1e-6;
        assert!((j.v - f(x, y)).abs() < 1e-15);
        assert!((j.d[0] - (f(x + h, y) - f(x - h, y)) / (2.0 * h)).abs() < 1e-8);
        assert!((j.d[1] - (f(x, y + h) - f(x, y - h)) / (2.0 * h)).abs() < 1e-8);
        let s = Jet::<1>::var(0.4, 0).sigmoid();
        assert!((s.d[0] - sigmoid(0.4) * (1.0 - sigmoid(0.4))).abs() < 1e-15);
    }
}
