//! Truncated multivariate Taylor arithmetic ("jets").
//!
//! A [`Jet`] carries a polynomial in deviation variables truncated at a fixed
//! total degree. Evaluating a smooth function with jet arguments yields its
//! Taylor expansion to that degree with machine-precision coefficients, which
//! is how the non-polynomial walker dynamics are turned into the polynomial
//! data consumed by the SoS programs.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::polynomial::Polynomial;

/// Scalar abstraction so the system dynamics can be evaluated both on plain
/// floats (simulation) and on jets (Taylor expansion).
pub trait Scalar:
    Clone
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Builds a constant with the same shape (variable count, truncation
    /// order) as `self`.
    fn like(&self, v: f64) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn sqrt(&self) -> Self;
}

impl Scalar for f64 {
    fn like(&self, v: f64) -> Self {
        v
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
}

/// Truncated multivariate Taylor series.
#[derive(Debug, Clone)]
pub struct Jet {
    poly: Polynomial,
    order: u32,
}

impl Jet {
    pub fn constant(nvars: usize, order: u32, c: f64) -> Self {
        Jet {
            poly: Polynomial::constant(nvars, c),
            order,
        }
    }

    /// The jet `c + delta_i` representing variable `i` expanded about `c`.
    pub fn variable(index: usize, nvars: usize, order: u32, c: f64) -> Self {
        let mut poly = Polynomial::constant(nvars, c);
        poly = &poly + &Polynomial::variable(index, nvars);
        Jet { poly, order }
    }

    pub fn from_poly(poly: Polynomial, order: u32) -> Self {
        Jet {
            poly: poly.truncate(order),
            order,
        }
    }

    pub fn poly(&self) -> &Polynomial {
        &self.poly
    }

    pub fn into_poly(self) -> Polynomial {
        self.poly
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn nvars(&self) -> usize {
        self.poly.nvars()
    }

    fn value(&self) -> f64 {
        self.poly
            .coeff(&crate::polynomial::Monomial::one(self.nvars()))
    }

    /// The non-constant part (zero constant coefficient).
    fn fractional(&self) -> Polynomial {
        let mut p = self.poly.clone();
        p.add_term(
            crate::polynomial::Monomial::one(self.nvars()),
            -self.value(),
        );
        p
    }

    /// Applies a univariate analytic function given its derivatives at the
    /// constant part: f(a0 + r) = sum_k d_k r^k with d_k = f^(k)(a0) / k!.
    fn compose(&self, coeffs: &[f64]) -> Jet {
        let nvars = self.nvars();
        let r = self.fractional();
        // Horner over the nilpotent part.
        let mut acc = Polynomial::constant(nvars, *coeffs.last().unwrap());
        for &c in coeffs.iter().rev().skip(1) {
            acc = (&acc * &r).truncate(self.order);
            acc.add_term(crate::polynomial::Monomial::one(nvars), c);
        }
        Jet {
            poly: acc,
            order: self.order,
        }
    }

    pub fn recip(&self) -> Jet {
        let a0 = self.value();
        assert!(a0 != 0.0, "jet reciprocal at zero constant part");
        let mut coeffs = Vec::with_capacity(self.order as usize + 1);
        let mut c = 1.0 / a0;
        for _ in 0..=self.order {
            coeffs.push(c);
            c *= -1.0 / a0;
        }
        self.compose(&coeffs)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        Jet {
            poly: &self.poly + &rhs.poly,
            order: self.order,
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        Jet {
            poly: &self.poly - &rhs.poly,
            order: self.order,
        }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        Jet {
            poly: (&self.poly * &rhs.poly).truncate(self.order),
            order: self.order,
        }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        self * rhs.recip()
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet {
            poly: -&self.poly,
            order: self.order,
        }
    }
}

impl Scalar for Jet {
    fn like(&self, v: f64) -> Self {
        Jet::constant(self.nvars(), self.order, v)
    }
    fn sin(&self) -> Self {
        let a0 = self.value();
        let (s, c) = a0.sin_cos();
        let derivs = [s, c, -s, -c];
        let mut coeffs = Vec::with_capacity(self.order as usize + 1);
        let mut fact = 1.0;
        for k in 0..=self.order as usize {
            if k > 0 {
                fact *= k as f64;
            }
            coeffs.push(derivs[k % 4] / fact);
        }
        self.compose(&coeffs)
    }
    fn cos(&self) -> Self {
        let a0 = self.value();
        let (s, c) = a0.sin_cos();
        let derivs = [c, -s, -c, s];
        let mut coeffs = Vec::with_capacity(self.order as usize + 1);
        let mut fact = 1.0;
        for k in 0..=self.order as usize {
            if k > 0 {
                fact *= k as f64;
            }
            coeffs.push(derivs[k % 4] / fact);
        }
        self.compose(&coeffs)
    }
    fn sqrt(&self) -> Self {
        let a0 = self.value();
        assert!(a0 > 0.0, "jet sqrt requires positive constant part");
        let s = a0.sqrt();
        // binomial series for (a0 + r)^(1/2)
        let mut coeffs = Vec::with_capacity(self.order as usize + 1);
        let mut c = s;
        coeffs.push(c);
        let mut alpha = 0.5;
        for k in 1..=self.order as usize {
            c = c * alpha / (k as f64) / a0;
            coeffs.push(c);
            alpha -= 1.0;
        }
        self.compose(&coeffs)
    }
}

/// Taylor-expands `f` about `center` to total degree `order`.
///
/// The returned polynomials are in the deviation variables `x - center`.
pub fn taylor<F>(f: F, center: &[f64], order: u32) -> Vec<Polynomial>
where
    F: Fn(&[Jet]) -> Vec<Jet>,
{
    let nvars = center.len();
    let args: Vec<Jet> = center
        .iter()
        .enumerate()
        .map(|(i, &c)| Jet::variable(i, nvars, order, c))
        .collect();
    f(&args).into_iter().map(Jet::into_poly).collect()
}

/// Evaluates a polynomial with jet arguments (used to expand polynomial
/// vector fields exactly).
pub fn eval_poly_on_jets(p: &Polynomial, args: &[Jet]) -> Jet {
    assert_eq!(p.nvars(), args.len());
    let nvars = args[0].nvars();
    let order = args[0].order();
    let mut acc = Jet::constant(nvars, order, 0.0);
    for (m, &c) in p.terms() {
        let mut t = Jet::constant(nvars, order, c);
        for (i, &e) in m.exps().iter().enumerate() {
            for _ in 0..e {
                t = t * args[i].clone();
            }
        }
        acc = acc + t;
    }
    acc
}
