//! Forward-mode dual numbers.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::gemm::{gemm_f64, MatRef};
use crate::Real;

/// `v + d * eps` with `eps^2 = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub const fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }

    pub const fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual::new(q, (self.d - q * o.d) / o.v)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.v += o.v;
        self.d += o.d;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.v -= o.v;
        self.d -= o.d;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Real for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn primal(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual::new(s, self.d / (2.0 * s))
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        Dual::new(self.v * s, self.d * s)
    }

    fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: &mut [Self], accumulate: bool) {
        let (av, ad) = split(a.data);
        let (bv, bd) = split(b.data);
        let view = |d, like: &MatRef<'_, Self>| MatRef { data: d, rs: like.rs, cs: like.cs };
        let mut cv = vec![0.0; m * n];
        let mut cd = vec![0.0; m * n];
        gemm_f64(m, k, n, view(&av, &a), view(&bv, &b), &mut cv, false);
        gemm_f64(m, k, n, view(&ad, &a), view(&bv, &b), &mut cd, false);
        gemm_f64(m, k, n, view(&av, &a), view(&bd, &b), &mut cd, true);
        for (i, out) in c.iter_mut().take(m * n).enumerate() {
            let r = Dual::new(cv[i], cd[i]);
            if accumulate {
                *out += r;
            } else {
                *out = r;
            }
        }
    }
}

fn split(a: &[Dual]) -> (Vec<f64>, Vec<f64>) {
    (a.iter().map(|x| x.v).collect(), a.iter().map(|x| x.d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = Dual::new(3.0, 1.0);
        let y = x * x * x;
        assert_eq!(y.v, 27.0);
        assert_eq!(y.d, 27.0);
    }

    #[test]
    fn transcendental_tangents() {
        let x = Dual::new(2.0, 1.0);
        assert!((x.exp().d - 2f64.exp()).abs() < 1e-12);
        assert!((x.ln().d - 0.5).abs() < 1e-12);
        assert!((x.sqrt().d - 0.5 / 2f64.sqrt()).abs() < 1e-12);
        assert!(((Dual::one() / x).d + 0.25).abs() < 1e-12);
    }
}
