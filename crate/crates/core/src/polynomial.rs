//! Sparse multivariate polynomials over f64 with graded-lexicographic term
//! ordering, plus the monomial-basis enumeration used by the Gram
//! parameterizations of the SoS programs.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A monomial, stored as one exponent per ambient variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial {
    exps: Vec<u32>,
}

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Monomial { exps }
    }

    pub fn one(nvars: usize) -> Self {
        Monomial {
            exps: vec![0; nvars],
        }
    }

    pub fn variable(index: usize, nvars: usize) -> Self {
        let mut exps = vec![0; nvars];
        exps[index] = 1;
        Monomial { exps }
    }

    pub fn exps(&self) -> &[u32] {
        &self.exps
    }

    pub fn nvars(&self) -> usize {
        self.exps.len()
    }

    pub fn degree(&self) -> u32 {
        self.exps.iter().sum()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.exps.len(), other.exps.len());
        Monomial {
            exps: self
                .exps
                .iter()
                .zip(&other.exps)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.exps
            .iter()
            .zip(point)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

// Graded lex: lower total degree first; within a degree, higher power of the
// earliest variable first (so the degree-2 basis in two variables reads
// x1^2, x1 x2, x2^2).
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.exps.cmp(&self.exps))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials in `nvars` variables of total degree <= `max_degree`,
/// in graded-lexicographic order.
pub fn monomial_basis(nvars: usize, max_degree: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    let mut current = vec![0u32; nvars];
    collect_monomials(nvars, max_degree, 0, &mut current, &mut out);
    out.sort();
    out
}

fn collect_monomials(
    nvars: usize,
    budget: u32,
    var: usize,
    current: &mut Vec<u32>,
    out: &mut Vec<Monomial>,
) {
    if var == nvars {
        out.push(Monomial::new(current.clone()));
        return;
    }
    for e in 0..=budget {
        current[var] = e;
        collect_monomials(nvars, budget - e, var + 1, current, out);
    }
    current[var] = 0;
}

/// Sparse multivariate polynomial with real coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(nvars);
        p.add_term(Monomial::one(nvars), c);
        p
    }

    pub fn variable(index: usize, nvars: usize) -> Self {
        let mut p = Polynomial::zero(nvars);
        p.add_term(Monomial::variable(index, nvars), 1.0);
        p
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Monomial, f64)>) -> Self {
        let mut p = Polynomial::zero(nvars);
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &f64)> {
        self.terms.iter()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// Adds `c` to the coefficient of `m`, dropping the term if it cancels to
    /// exactly zero.
    pub fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.nvars(), self.nvars);
        if c == 0.0 && !self.terms.contains_key(&m) {
            return;
        }
        let entry = self.terms.entry(m.clone()).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.remove(&m);
        }
    }

    /// Removes terms with |coefficient| below `eps`.
    pub fn prune(&mut self, eps: f64) {
        self.terms.retain(|_, c| c.abs() > eps);
    }

    /// Drops terms of total degree above `max_degree`.
    pub fn truncate(&self, max_degree: u32) -> Polynomial {
        Polynomial {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .filter(|(m, _)| m.degree() <= max_degree)
                .map(|(m, c)| (m.clone(), *c))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        if s == 0.0 {
            return Polynomial::zero(self.nvars);
        }
        Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect(),
        }
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.nvars {
            return Err(Error::DimensionMismatch {
                expected: self.nvars,
                got: point.len(),
                context: "polynomial evaluation point",
            });
        }
        Ok(self
            .terms
            .iter()
            .map(|(m, c)| c * m.eval(point))
            .sum())
    }

    pub fn differentiate(&self, var: usize) -> Result<Polynomial> {
        if var >= self.nvars {
            return Err(Error::DimensionMismatch {
                expected: self.nvars,
                got: var,
                context: "differentiation variable index",
            });
        }
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in &self.terms {
            let e = m.exps()[var];
            if e > 0 {
                let mut exps = m.exps().to_vec();
                exps[var] -= 1;
                out.add_term(Monomial::new(exps), c * e as f64);
            }
        }
        Ok(out)
    }

    /// Largest absolute coefficient; zero polynomial gives 0.
    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    /// Text form "coeff * x1^a x2^b + ...".
    pub fn to_text(&self) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut parts = Vec::new();
        for (m, c) in &self.terms {
            let mut s = format!("{c:.17e}");
            for (i, &e) in m.exps().iter().enumerate() {
                if e == 1 {
                    s.push_str(&format!(" * x{}", i + 1));
                } else if e > 1 {
                    s.push_str(&format!(" * x{}^{}", i + 1, e));
                }
            }
            parts.push(s);
        }
        parts.join(" + ")
    }

    /// JSON-friendly list of (exponents, coefficient) pairs.
    pub fn to_pairs(&self) -> Vec<(Vec<u32>, f64)> {
        self.terms
            .iter()
            .map(|(m, c)| (m.exps().to_vec(), *c))
            .collect()
    }

    pub fn from_pairs(nvars: usize, pairs: &[(Vec<u32>, f64)]) -> Self {
        Polynomial::from_terms(
            nvars,
            pairs.iter().map(|(e, c)| (Monomial::new(e.clone()), *c)),
        )
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        debug_assert_eq!(self.nvars, rhs.nvars);
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(m.clone(), *c);
        }
        out
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        debug_assert_eq!(self.nvars, rhs.nvars);
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(m.clone(), -*c);
        }
        out
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        debug_assert_eq!(self.nvars, rhs.nvars);
        let mut out = Polynomial::zero(self.nvars);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_text())
    }
}

#[cfg(test)]
fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut r = 1u64;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}
