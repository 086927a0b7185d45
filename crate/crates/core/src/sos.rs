//! Sum-of-squares certification of regions of orbital attraction.
//!
//! The certified set is {x'P(tau)x <= rho(tau)} in transverse coordinates,
//! with P from the periodic Lyapunov/Riccati solvers and rho a positive
//! rescaling polynomial. Three families of conditions are verified at the
//! sampled phases by S-procedure SoS programs solved as SDPs:
//! a denominator-cleared decrease condition for V = x'Px / rho, positivity
//! of the phase-rate denominator (well-posedness of the coordinates), and
//! the impact condition V+ <= V- at the switching phase. A bilinear
//! alternation (L-step over multipliers, V-step over rho) grows the
//! certified tube; audits re-check the result against the true dynamics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hybrid::HybridSystem;
use crate::jet::Jet;
use crate::orbit::PeriodicOrbit;
use crate::plqr::{
    jump_riccati, periodic_lyapunov, PeriodicMatrixFunction, TransverseController,
};
use crate::polynomial::{monomial_basis, Monomial, Polynomial};
use crate::sdp::{SdpConstraint, SdpOptions, SdpProblem, SdpStatus};
use crate::transverse::{
    from_transverse, linearize, transverse_flow, TransversalFamily,
};
use crate::{Error, Result};

/// A positive scaling polynomial in Bernstein form on [0, T].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhoPoly {
    pub basis: String,
    pub degree: usize,
    pub coeffs: Vec<f64>,
    pub t_end: f64,
}

impl RhoPoly {
    pub fn constant(value: f64, degree: usize, t_end: f64) -> Self {
        RhoPoly {
            basis: "bernstein".into(),
            degree,
            coeffs: vec![value; degree + 1],
            t_end,
        }
    }

    fn bernstein(degree: usize, i: usize, s: f64) -> f64 {
        let mut binom = 1.0;
        for k in 0..i {
            binom *= (degree - k) as f64 / (k + 1) as f64;
        }
        binom * s.powi(i as i32) * (1.0 - s).powi((degree - i) as i32)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let s = (t / self.t_end).clamp(0.0, 1.0);
        (0..=self.degree)
            .map(|i| self.coeffs[i] * Self::bernstein(self.degree, i, s))
            .sum()
    }

    pub fn deriv(&self, t: f64) -> f64 {
        if self.degree == 0 {
            return 0.0;
        }
        let s = (t / self.t_end).clamp(0.0, 1.0);
        let d = self.degree;
        (0..d)
            .map(|i| {
                (self.coeffs[i + 1] - self.coeffs[i])
                    * d as f64
                    * Self::bernstein(d - 1, i, s)
            })
            .sum::<f64>()
            / self.t_end
    }

    /// Weights of the decision coefficients in rho(t): rho = sum_i w_i c_i.
    fn eval_weights(&self, t: f64) -> Vec<f64> {
        let s = (t / self.t_end).clamp(0.0, 1.0);
        (0..=self.degree)
            .map(|i| Self::bernstein(self.degree, i, s))
            .collect()
    }

    fn deriv_weights(&self, t: f64) -> Vec<f64> {
        let mut w = vec![0.0; self.degree + 1];
        if self.degree == 0 {
            return w;
        }
        let s = (t / self.t_end).clamp(0.0, 1.0);
        let d = self.degree;
        for i in 0..d {
            let b = d as f64 * Self::bernstein(d - 1, i, s) / self.t_end;
            w[i + 1] += b;
            w[i] -= b;
        }
        w
    }

    /// Exact integral over [0, t_end].
    pub fn integral(&self) -> f64 {
        self.t_end * self.coeffs.iter().sum::<f64>() / (self.degree + 1) as f64
    }
}

/// Polynomial model of the transverse dynamics at one phase sample, in the
/// transverse deviation variables.
#[derive(Debug, Clone)]
pub struct SampleDynamics {
    pub tau: f64,
    /// Numerator of tau_dot: z'f(x* + Pi'x_perp), Taylor order `order`.
    pub num: Polynomial,
    /// Denominator of tau_dot: z'f* - dz'Pi'x_perp (degree one).
    pub den: Polynomial,
    /// den * (d/dt x_perp), componentwise.
    pub xdot_den: Vec<Polynomial>,
}

/// Per-sample polynomial dynamics plus the Taylor-expanded impact update.
#[derive(Debug, Clone)]
pub struct PolyDynamics {
    pub samples: Vec<SampleDynamics>,
    /// Transverse impact map x_perp+ as polynomials in x_perp-, with the
    /// (closure-level) constant part removed; present for hybrid systems.
    pub impact: Option<Vec<Polynomial>>,
    pub order: u32,
    pub dim: usize,
}

fn quad_form_poly(p: &DMatrix<f64>) -> Polynomial {
    let d = p.nrows();
    let mut terms = Vec::new();
    for i in 0..d {
        for j in i..d {
            let mut e = vec![0u32; d];
            e[i] += 1;
            e[j] += 1;
            let c = if i == j { p[(i, i)] } else { p[(i, j)] + p[(j, i)] };
            terms.push((Monomial::new(e), c));
        }
    }
    Polynomial::from_terms(d, terms)
}

fn linear_poly(coeffs: &DVector<f64>) -> Polynomial {
    let d = coeffs.len();
    Polynomial::from_terms(
        d,
        (0..d).map(|k| (Monomial::variable(k, d), coeffs[k])),
    )
}

/// Taylor-expands the transverse dynamics (Eqs. 5 and 6 with the denominator
/// cleared) around each phase sample. With a controller the feedback
/// u = -K(tau) x_perp is substituted before expansion, so the model is the
/// closed loop.
pub fn polynomial_transverse_dynamics(
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
    controller: Option<&TransverseController>,
    order: u32,
) -> Result<PolyDynamics> {
    if order < 2 {
        return Err(Error::InvalidParams(
            "Taylor order must be at least 2".into(),
        ));
    }
    let n = sys.state_dim();
    let m = sys.input_dim();
    let d = n - 1;
    let k = orbit.taus.len();
    let last = if orbit.hybrid { k } else { k - 1 };
    let mut samples = Vec::with_capacity(last);
    for idx in 0..last {
        let tau = orbit.taus[idx];
        let (z, dz) = family.z_at(tau);
        let proj = family.projection(tau);
        let xs = &orbit.states[idx];
        let gains = controller.map(|c| c.gain_at(tau));
        // jets of the full state x = x* + Pi' x_perp and input u = -K x_perp
        let x_jets: Vec<Jet> = (0..n)
            .map(|i| {
                let mut p = Polynomial::constant(d, xs[i]);
                for kk in 0..d {
                    p.add_term(Monomial::variable(kk, d), proj.pi[(kk, i)]);
                }
                Jet::from_poly(p, order)
            })
            .collect();
        let u_jets: Vec<Jet> = (0..m)
            .map(|r| {
                let mut p = Polynomial::zero(d);
                if let Some(km) = &gains {
                    for kk in 0..d {
                        p.add_term(Monomial::variable(kk, d), -km[(r, kk)]);
                    }
                }
                Jet::from_poly(p, order)
            })
            .collect();
        let f_polys: Vec<Polynomial> = sys
            .dynamics
            .eval(&x_jets, &u_jets)
            .into_iter()
            .map(Jet::into_poly)
            .collect();
        let f0: Vec<f64> = f_polys
            .iter()
            .map(|p| p.coeff(&Monomial::one(d)))
            .collect();
        let mut num = Polynomial::zero(d);
        for i in 0..n {
            num = &num + &f_polys[i].scale(z[i]);
        }
        // den shares its constant with num exactly so that the flow has no
        // spurious constant term
        let mut den = Polynomial::constant(d, num.coeff(&Monomial::one(d)));
        let dz_pit = proj.pi.clone() * &dz; // (Pi dz), then den -= (dz'Pi') x
        for kk in 0..d {
            den.add_term(Monomial::variable(kk, d), -dz_pit[kk]);
        }
        // drift = dPi Pi' x_perp - Pi f*
        let dpi_pit = &proj.dpi * proj.pi.transpose();
        let pi_f0 = &proj.pi * DVector::from_column_slice(&f0);
        let mut xdot_den = Vec::with_capacity(d);
        for i in 0..d {
            let mut drift_i = linear_poly(&DVector::from_iterator(
                d,
                (0..d).map(|j| dpi_pit[(i, j)]),
            ));
            drift_i.add_term(Monomial::one(d), -pi_f0[i]);
            // Pi f(x), component i
            let mut pif_i = Polynomial::zero(d);
            for j in 0..n {
                pif_i = &pif_i + &f_polys[j].scale(proj.pi[(i, j)]);
            }
            let mut out = &(&num * &drift_i) + &(&den * &pif_i);
            out.prune(0.0);
            xdot_den.push(out);
        }
        samples.push(SampleDynamics {
            tau,
            num,
            den,
            xdot_den,
        });
    }
    let impact = if orbit.hybrid {
        let t = orbit.period;
        let proj_t = family.projection(t);
        let proj_0 = family.projection(0.0);
        let xs_t = orbit.state(t);
        let xs_0 = orbit.state(0.0);
        let x_jets: Vec<Jet> = (0..n)
            .map(|i| {
                let mut p = Polynomial::constant(d, xs_t[i]);
                for kk in 0..d {
                    p.add_term(Monomial::variable(kk, d), proj_t.pi[(kk, i)]);
                }
                Jet::from_poly(p, order)
            })
            .collect();
        let delta: Vec<Polynomial> = sys
            .dynamics
            .impact(&x_jets)
            .into_iter()
            .map(Jet::into_poly)
            .collect();
        let mut g = Vec::with_capacity(d);
        for i in 0..d {
            let mut gi = Polynomial::zero(d);
            for j in 0..n {
                gi = &gi + &delta[j].scale(proj_0.pi[(i, j)]);
                if delta[j].is_zero() {
                    continue;
                }
            }
            let shift: f64 = (0..n).map(|j| proj_0.pi[(i, j)] * xs_0[j]).sum();
            gi.add_term(Monomial::one(d), -shift);
            // the residual constant is the orbit closure error; fold it away
            let c0 = gi.coeff(&Monomial::one(d));
            gi.add_term(Monomial::one(d), -c0);
            gi.prune(0.0);
            g.push(gi);
        }
        Some(g)
    } else {
        None
    };
    Ok(PolyDynamics {
        samples,
        impact,
        order,
        dim: d,
    })
}

// ---------------------------------------------------------------------------
// Affine-in-decision-variables polynomial assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Var {
    /// Entry (r, c) with r <= c of PSD block `0`.
    Block(usize, usize, usize),
    Scalar(usize),
}

/// An affine expression in the SDP decision variables. For `Block` variables
/// the coefficient is on the matrix entry itself, i.e. a term `g * X[r, c]`
/// with r < c refers to the single (upper-triangle) entry; symmetric
/// doubling is made explicit by the caller.
#[derive(Debug, Clone, Default)]
struct LinExpr {
    c: f64,
    terms: BTreeMap<Var, f64>,
}

impl LinExpr {
    fn add_var(&mut self, v: Var, w: f64) {
        if w != 0.0 {
            *self.terms.entry(v).or_insert(0.0) += w;
        }
    }
}

/// A polynomial with affine coefficients.
#[derive(Debug, Clone)]
struct ParamPoly {
    map: BTreeMap<Monomial, LinExpr>,
}

impl ParamPoly {
    fn new() -> Self {
        ParamPoly {
            map: BTreeMap::new(),
        }
    }

    fn entry(&mut self, m: Monomial) -> &mut LinExpr {
        self.map.entry(m).or_default()
    }

    /// Adds w * p with constant weight.
    fn add_poly(&mut self, p: &Polynomial, w: f64) {
        for (m, &c) in p.terms() {
            self.entry(m.clone()).c += w * c;
        }
    }

    /// Adds w * lin * p where lin is affine in the decision variables.
    fn add_poly_lin(&mut self, p: &Polynomial, lin: &LinExpr, w: f64) {
        for (m, &c) in p.terms() {
            let e = self.entry(m.clone());
            e.c += w * c * lin.c;
            for (&v, &lw) in &lin.terms {
                e.add_var(v, w * c * lw);
            }
        }
    }

    /// Adds sign * (w(x)' L w(x)) * mult where L is PSD block `block` with
    /// basis `basis` and mult is a fixed polynomial.
    fn add_gram_product(
        &mut self,
        block: usize,
        basis: &[Monomial],
        mult: &Polynomial,
        sign: f64,
    ) {
        for i in 0..basis.len() {
            for j in i..basis.len() {
                let pair = basis[i].mul(&basis[j]);
                let w = if i == j { sign } else { 2.0 * sign };
                for (m, &c) in mult.terms() {
                    self.entry(pair.mul(m))
                        .add_var(Var::Block(block, i, j), w * c);
                }
            }
        }
    }

    fn max_scale(&self) -> f64 {
        let mut s = 0.0f64;
        for e in self.map.values() {
            s = s.max(e.c.abs());
            for w in e.terms.values() {
                s = s.max(w.abs());
            }
        }
        s.max(1.0)
    }
}

/// One SoS condition ready for emission: a target ParamPoly that must equal
/// basis' G basis (+ slack * q) for a PSD Gram G.
#[derive(Debug, Clone)]
struct Condition {
    tag: (String, usize),
    target: ParamPoly,
    basis: Vec<Monomial>,
    /// Lowest admissible monomial degree; lower-degree residue below the
    /// drop tolerance is discarded, anything larger is an assembly error.
    min_degree: u32,
}

/// Provenance record linking an emitted condition to its Gram block, used to
/// re-validate the Gram reconstruction identity after a solve.
#[derive(Debug, Clone)]
pub struct CondRecord {
    pub tag: (String, usize),
    pub gram_block: usize,
    basis: Vec<Monomial>,
    target: ParamPoly,
    slack: Option<usize>,
}

/// An assembled SoS program: the SDP plus provenance for each condition.
#[derive(Debug, Clone)]
pub struct SosProgram {
    pub sdp: SdpProblem,
    pub records: Vec<CondRecord>,
}

impl SosProgram {
    fn new() -> Self {
        SosProgram {
            sdp: SdpProblem::default(),
            records: Vec::new(),
        }
    }

    fn add_scalar(&mut self) -> usize {
        self.sdp.num_scalars += 1;
        self.sdp.obj_scalars.push(0.0);
        self.sdp.num_scalars - 1
    }

    fn add_block(&mut self, size: usize) -> usize {
        self.sdp.block_sizes.push(size);
        self.sdp.block_sizes.len() - 1
    }

    /// Emits the coefficient-matching equality constraints for `cond`,
    /// introducing its Gram block. With `slack = Some(t)` the identity
    /// becomes target = basis'G basis + t * sum(basis_i^2).
    fn emit(&mut self, cond: Condition, slack: Option<usize>) -> Result<()> {
        let gram_block = self.add_block(cond.basis.len());
        // products of basis pairs, grouped by monomial
        let mut pairs: BTreeMap<Monomial, Vec<(usize, usize)>> = BTreeMap::new();
        for i in 0..cond.basis.len() {
            for j in i..cond.basis.len() {
                pairs
                    .entry(cond.basis[i].mul(&cond.basis[j]))
                    .or_default()
                    .push((i, j));
            }
        }
        let scale = cond.target.max_scale();
        let drop_tol = 1e-9 * scale;
        let mut support: std::collections::BTreeSet<Monomial> =
            cond.target.map.keys().cloned().collect();
        support.extend(pairs.keys().cloned());
        for mono in support {
            let expr = cond.target.map.get(&mono);
            let pair_list = pairs.get(&mono);
            if pair_list.is_none() {
                // monomial outside the Gram support: must be negligible
                let bad = match expr {
                    Some(e) => e.c.abs() > drop_tol || !e.terms.is_empty(),
                    None => false,
                };
                if bad {
                    return Err(Error::Other(format!(
                        "SoS assembly for {} sample {}: monomial {:?} of degree {} \
                         outside the Gram support (coefficient {:e})",
                        cond.tag.0,
                        cond.tag.1,
                        mono.exps(),
                        mono.degree(),
                        expr.map(|e| e.c).unwrap_or(0.0)
                    )));
                }
                continue;
            }
            if mono.degree() < cond.min_degree {
                let ok = match expr {
                    Some(e) => e.c.abs() <= drop_tol && e.terms.is_empty(),
                    None => true,
                };
                if !ok {
                    return Err(Error::Other(format!(
                        "SoS assembly for {} sample {}: low-degree residue {:e} at {:?}",
                        cond.tag.0,
                        cond.tag.1,
                        expr.map(|e| e.c).unwrap_or(0.0),
                        mono.exps()
                    )));
                }
                continue;
            }
            // gram + t*q - target_vars = target_const
            let mut entries = Vec::new();
            for &(i, j) in pair_list.unwrap() {
                entries.push((i, j, 1.0));
            }
            let mut blocks = vec![(gram_block, entries)];
            let mut scalars: Vec<(usize, f64)> = Vec::new();
            if let Some(t) = slack {
                // q = sum basis_i^2 contributes on diagonal pair monomials
                let qw = pair_list
                    .unwrap()
                    .iter()
                    .filter(|(i, j)| i == j)
                    .count() as f64;
                if qw > 0.0 {
                    scalars.push((t, qw));
                }
            }
            let mut rhs = 0.0;
            if let Some(e) = expr {
                rhs = e.c;
                for (&v, &w) in &e.terms {
                    match v {
                        Var::Scalar(s) => scalars.push((s, -w)),
                        Var::Block(b, r, c) => {
                            let coeff = if r == c { -w } else { -w / 2.0 };
                            blocks.push((b, vec![(r, c, coeff)]));
                        }
                    }
                }
            }
            // merge repeated block references
            blocks.sort_by_key(|(b, _)| *b);
            let mut merged: Vec<(usize, Vec<(usize, usize, f64)>)> = Vec::new();
            for (b, mut es) in blocks {
                if let Some(last) = merged.last_mut() {
                    if last.0 == b {
                        last.1.append(&mut es);
                        continue;
                    }
                }
                merged.push((b, es));
            }
            // normalize the row for conditioning
            let row_scale = merged
                .iter()
                .flat_map(|(_, es)| es.iter().map(|e| e.2.abs()))
                .chain(scalars.iter().map(|(_, w)| w.abs()))
                .chain(std::iter::once(rhs.abs()))
                .fold(0.0f64, f64::max)
                .max(1e-12);
            for (_, es) in merged.iter_mut() {
                for e in es.iter_mut() {
                    e.2 /= row_scale;
                }
            }
            for s in scalars.iter_mut() {
                s.1 /= row_scale;
            }
            self.sdp.constraints.push(SdpConstraint {
                blocks: merged,
                scalars,
                rhs: rhs / row_scale,
            });
        }
        self.records.push(CondRecord {
            tag: cond.tag,
            gram_block,
            basis: cond.basis,
            target: cond.target,
            slack,
        });
        Ok(())
    }
}

impl CondRecord {
    /// Reconstructs basis' G basis (+ t q) minus the target evaluated at the
    /// solution, returning the worst coefficient mismatch.
    pub fn gram_mismatch(
        &self,
        blocks: &[DMatrix<f64>],
        scalars: &[f64],
    ) -> f64 {
        let d = self.basis[0].nvars();
        let mut recon = Polynomial::zero(d);
        let g = &blocks[self.gram_block];
        for i in 0..self.basis.len() {
            for j in 0..self.basis.len() {
                recon.add_term(self.basis[i].mul(&self.basis[j]), g[(i, j)]);
            }
        }
        if let Some(t) = self.slack {
            for b in &self.basis {
                recon.add_term(b.mul(b), scalars[t]);
            }
        }
        let mut target = Polynomial::zero(d);
        for (m, e) in &self.target.map {
            let mut v = e.c;
            for (&var, &w) in &e.terms {
                v += w * match var {
                    Var::Scalar(s) => scalars[s],
                    Var::Block(b, r, c) => blocks[b][(r, c)],
                };
            }
            target.add_term(m.clone(), v);
        }
        let diff = &recon - &target;
        let scale = self.target.max_scale();
        diff.max_abs_coeff() / scale
    }
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

/// Metrics of one V/L alternation round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationMetric {
    pub iteration: usize,
    pub rho_integral: f64,
    pub min_slack: f64,
}

/// Summary of the early-impact sampling audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyImpactSummary {
    pub trajectories: usize,
    pub violations: usize,
}

/// A certified region of orbital attraction: {x'P(tau)x <= rho(tau)}.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub p: PeriodicMatrixFunction,
    pub rho: RhoPoly,
    /// Seed scaling: the bisection optimum as sigma0 = 1 / rho_const.
    pub sigma0: f64,
    pub delta0: f64,
    pub taylor_order: u32,
    /// Phase samples at which the conditions were imposed.
    pub taus: Vec<f64>,
    pub history: Vec<IterationMetric>,
    pub early_impact: Option<EarlyImpactSummary>,
}

impl Certificate {
    pub fn v0(&self, x_perp: &DVector<f64>, tau: f64) -> f64 {
        (x_perp.transpose() * self.p.at(tau) * x_perp)[(0, 0)]
    }

    /// The Lyapunov value V = x'Px / rho; the certified set is V <= 1.
    pub fn value(&self, x_perp: &DVector<f64>, tau: f64) -> f64 {
        self.v0(x_perp, tau) / self.rho.eval(tau)
    }

    pub fn contains(&self, x_perp: &DVector<f64>, tau: f64) -> bool {
        self.value(x_perp, tau) <= 1.0
    }
}

/// Serialized form of a certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateFile {
    pub schema: u32,
    pub period: f64,
    pub hybrid: bool,
    pub dim: usize,
    pub taus: Vec<f64>,
    pub p_taus: Vec<f64>,
    pub p_rows: Vec<Vec<f64>>,
    pub pdot_rows: Vec<Vec<f64>>,
    pub rho: RhoPoly,
    pub sigma0: f64,
    pub delta0: f64,
    pub taylor_order: u32,
    pub history: Vec<IterationMetric>,
    pub early_impact: Option<EarlyImpactSummary>,
}

impl Certificate {
    pub fn to_file(&self) -> CertificateFile {
        let rows = |mats: &[DMatrix<f64>]| -> Vec<Vec<f64>> {
            mats.iter()
                .map(|m| {
                    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
                    for i in 0..m.nrows() {
                        for j in 0..m.ncols() {
                            out.push(m[(i, j)]);
                        }
                    }
                    out
                })
                .collect()
        };
        CertificateFile {
            schema: 1,
            period: self.p.period,
            hybrid: self.p.hybrid,
            dim: self.p.dim(),
            taus: self.taus.clone(),
            p_taus: self.p.taus.clone(),
            p_rows: rows(&self.p.p),
            pdot_rows: rows(&self.p.pdot),
            rho: self.rho.clone(),
            sigma0: self.sigma0,
            delta0: self.delta0,
            taylor_order: self.taylor_order,
            history: self.history.clone(),
            early_impact: self.early_impact.clone(),
        }
    }

    pub fn from_file(f: &CertificateFile) -> Result<Certificate> {
        let n = f.dim;
        let mats = |rows: &[Vec<f64>]| -> Result<Vec<DMatrix<f64>>> {
            rows.iter()
                .map(|r| {
                    if r.len() != n * n {
                        return Err(Error::DimensionMismatch {
                            expected: n * n,
                            got: r.len(),
                            context: "certificate P rows",
                        });
                    }
                    Ok(DMatrix::from_row_slice(n, n, r))
                })
                .collect()
        };
        Ok(Certificate {
            p: PeriodicMatrixFunction {
                taus: f.p_taus.clone(),
                p: mats(&f.p_rows)?,
                pdot: mats(&f.pdot_rows)?,
                period: f.period,
                hybrid: f.hybrid,
            },
            rho: f.rho.clone(),
            sigma0: f.sigma0,
            delta0: f.delta0,
            taylor_order: f.taylor_order,
            taus: f.taus.clone(),
            history: f.history.clone(),
            early_impact: f.early_impact.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Condition builders
// ---------------------------------------------------------------------------

/// How the S-procedure multiplier enters a condition: as a free PSD block
/// (L-step) or as a fixed polynomial from a previous L-step (V-step).
enum MultSpec<'a> {
    Block(usize),
    Fixed(&'a Polynomial),
}

/// Degrees for one condition family given the raw target degree: the target
/// is padded to even degree and the multiplier top term lambda_top * V0
/// supplies the dominating even leading form.
fn condition_degrees(raw_degree: u32) -> (u32, u32) {
    let target = 2 * raw_degree.div_ceil(2);
    let mult_half = ((target - 2) / 2).max(1);
    (target, mult_half)
}

fn basis_range(d: usize, lo: u32, hi: u32) -> Vec<Monomial> {
    monomial_basis(d, hi)
        .into_iter()
        .filter(|m| m.degree() >= lo && m.degree() <= hi)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn decrease_condition(
    sample_idx: usize,
    dynamics: &SampleDynamics,
    p: &DMatrix<f64>,
    pdot: &DMatrix<f64>,
    rho: &LinExpr,
    drho: &LinExpr,
    mult: MultSpec,
    mult_basis: &[Monomial],
    delta0: f64,
) -> Condition {
    let d = p.nrows();
    let v0 = quad_form_poly(p);
    let v0_dot_num = quad_form_poly(pdot);
    // D = 2 x'P xdot_den + num * x'Pdot x  (equals den * dV0/dt)
    let mut big_d = &dynamics.num * &v0_dot_num;
    for i in 0..d {
        let pi_row = linear_poly(&DVector::from_iterator(
            d,
            (0..d).map(|j| p[(i, j)] + p[(j, i)]),
        ));
        big_d = &big_d + &(&pi_row * &dynamics.xdot_den[i]);
    }
    let mut target = ParamPoly::new();
    // -(rho * D - drho * num * V0)
    target.add_poly_lin(&big_d, rho, -1.0);
    target.add_poly_lin(&(&dynamics.num * &v0), drho, 1.0);
    // - delta0 |x|^2 den
    let norm2 = {
        let mut q = Polynomial::zero(d);
        for i in 0..d {
            let mut e = vec![0u32; d];
            e[i] = 2;
            q.add_term(Monomial::new(e), 1.0);
        }
        q
    };
    target.add_poly(&(&norm2 * &dynamics.den), -delta0);
    // - lambda (rho - V0)
    match mult {
        MultSpec::Block(b) => {
            // rho is constant in the L-step
            let mut set = v0.scale(-1.0);
            set.add_term(Monomial::one(d), rho.c);
            target.add_gram_product(b, mult_basis, &set, -1.0);
        }
        MultSpec::Fixed(lam) => {
            target.add_poly_lin(lam, rho, -1.0);
            target.add_poly(&(lam * &v0), 1.0);
        }
    }
    let raw = target
        .map
        .keys()
        .map(|m| m.degree())
        .max()
        .unwrap_or(2)
        .max(2 * (mult_basis.iter().map(|m| m.degree()).max().unwrap_or(1)) + 2);
    let gram_hi = raw.div_ceil(2);
    Condition {
        tag: ("decrease".into(), sample_idx),
        target,
        basis: basis_range(d, 1, gram_hi),
        min_degree: 2,
    }
}

fn wellposed_condition(
    sample_idx: usize,
    dynamics: &SampleDynamics,
    p: &DMatrix<f64>,
    rho: &LinExpr,
    eps: f64,
    mult: MultSpec,
) -> Condition {
    let d = p.nrows();
    let v0 = quad_form_poly(p);
    let mut target = ParamPoly::new();
    target.add_poly(&dynamics.den, 1.0);
    target.entry(Monomial::one(d)).c -= eps;
    match mult {
        MultSpec::Block(b) => {
            let mut set = v0.scale(-1.0);
            set.add_term(Monomial::one(d), rho.c);
            target.add_gram_product(b, &[Monomial::one(d)], &set, -1.0);
        }
        MultSpec::Fixed(lam) => {
            let w = lam.coeff(&Monomial::one(d));
            let one = Polynomial::constant(d, 1.0);
            target.add_poly_lin(&one, rho, -w);
            target.add_poly(&v0, w);
        }
    }
    Condition {
        tag: ("wellposed".into(), sample_idx),
        target,
        basis: basis_range(d, 0, 1),
        min_degree: 0,
    }
}

#[allow(clippy::too_many_arguments)]
fn impact_condition(
    sample_idx: usize,
    impact: &[Polynomial],
    p0: &DMatrix<f64>,
    pt: &DMatrix<f64>,
    rho0: &LinExpr,
    rho_t: &LinExpr,
    mult: MultSpec,
    mult_basis: &[Monomial],
) -> Condition {
    let d = p0.nrows();
    let v0t = quad_form_poly(pt);
    // g' P(0) g
    let mut vplus = Polynomial::zero(d);
    for i in 0..d {
        for j in 0..d {
            if p0[(i, j)] != 0.0 {
                vplus = &vplus + &(&impact[i] * &impact[j]).scale(p0[(i, j)]);
            }
        }
    }
    let mut target = ParamPoly::new();
    // rho0 * V0(T) - rhoT * V+(g)
    target.add_poly_lin(&v0t, rho0, 1.0);
    target.add_poly_lin(&vplus, rho_t, -1.0);
    match mult {
        MultSpec::Block(b) => {
            let mut set = v0t.scale(-1.0);
            set.add_term(Monomial::one(d), rho_t.c);
            target.add_gram_product(b, mult_basis, &set, -1.0);
        }
        MultSpec::Fixed(lam) => {
            target.add_poly_lin(lam, rho_t, -1.0);
            target.add_poly(&(lam * &v0t), 1.0);
        }
    }
    let raw = target
        .map
        .keys()
        .map(|m| m.degree())
        .max()
        .unwrap_or(2)
        .max(2 * (mult_basis.iter().map(|m| m.degree()).max().unwrap_or(1)) + 2);
    Condition {
        tag: ("impact".into(), sample_idx),
        target,
        basis: basis_range(d, 1, raw.div_ceil(2)),
        min_degree: 2,
    }
}

// ---------------------------------------------------------------------------
// Verification driver
// ---------------------------------------------------------------------------

/// Options for `verify_roa` and its sub-steps.
#[derive(Debug, Clone)]
pub struct RoaOptions {
    pub taylor_order: u32,
    /// Degree of the Bernstein rescaling polynomial; 0 keeps a constant
    /// level (pure bisection).
    pub rho_degree: usize,
    pub max_iters: usize,
    /// Relative integral-improvement threshold that stops the alternation.
    pub improvement_tol: f64,
    /// Decrease margin; defaults to 1e-6 * trace(Q) when zero.
    pub delta0: f64,
    /// Fraction of the on-orbit denominator kept as well-posedness margin.
    pub eps_den_frac: f64,
    /// Lower bound for the Bernstein coefficients, relative to the seed.
    pub rho_min_frac: f64,
    pub q: Option<DMatrix<f64>>,
    pub qi: Option<DMatrix<f64>>,
    /// Override for the S-procedure multiplier half-degree; `None` derives
    /// it from the condition degree. Higher values tighten the certified
    /// region at extra solver cost.
    pub mult_half_degree: Option<u32>,
    pub seed: u64,
    pub sdp: SdpOptions,
}

impl Default for RoaOptions {
    fn default() -> Self {
        RoaOptions {
            taylor_order: 3,
            rho_degree: 0,
            max_iters: 10,
            improvement_tol: 5e-3,
            delta0: 0.0,
            eps_den_frac: 0.1,
            rho_min_frac: 1e-3,
            q: None,
            qi: None,
            mult_half_degree: None,
            seed: 12345,
            sdp: SdpOptions::default(),
        }
    }
}

/// The multipliers of one feasible L-step.
#[derive(Debug, Clone)]
pub struct MultiplierSet {
    /// Per continuous sample: the decrease multiplier polynomial and the
    /// scalar well-posedness multiplier.
    pub decrease: Vec<Polynomial>,
    pub wellposed: Vec<f64>,
    pub impact: Option<Polynomial>,
    /// Slack achieved per subproblem (continuous samples, then impact).
    pub slacks: Vec<f64>,
}

/// Feasibility report of `verify_level`.
#[derive(Debug, Clone)]
pub struct LevelReport {
    pub slacks: Vec<f64>,
    pub feasible: bool,
    pub worst_sample: usize,
}

/// Fixed data shared by all verification steps.
pub struct VerifierContext<'a> {
    pub family: &'a TransversalFamily,
    pub orbit: &'a PeriodicOrbit,
    pub sys: &'a HybridSystem,
    pub dynamics: PolyDynamics,
    pub p: PeriodicMatrixFunction,
    pub delta0: f64,
    pub eps_den: Vec<f64>,
    pub sdp_opts: SdpOptions,
    mult_half: u32,
}

impl<'a> VerifierContext<'a> {
    pub fn build(
        family: &'a TransversalFamily,
        orbit: &'a PeriodicOrbit,
        sys: &'a HybridSystem,
        controller: Option<&TransverseController>,
        opts: &RoaOptions,
    ) -> Result<VerifierContext<'a>> {
        let d = sys.state_dim() - 1;
        let ltv = linearize(family, orbit, sys)?;
        let q = opts
            .q
            .clone()
            .unwrap_or_else(|| DMatrix::identity(d, d));
        let qi = opts
            .qi
            .clone()
            .unwrap_or_else(|| DMatrix::identity(d, d) * 0.1);
        let p = match controller {
            Some(c) => jump_riccati(&ltv, &c.q, &c.r, &c.qi)?,
            None => periodic_lyapunov(&ltv, &q, &qi)?,
        };
        let dynamics =
            polynomial_transverse_dynamics(family, orbit, sys, controller, opts.taylor_order)?;
        let delta0 = if opts.delta0 > 0.0 {
            opts.delta0
        } else {
            1e-6 * q.trace()
        };
        let eps_den = dynamics
            .samples
            .iter()
            .map(|s| opts.eps_den_frac * s.den.coeff(&Monomial::one(d)))
            .collect();
        // raw decrease degree: order + 2 (den * dV0/dt), padded even, the
        // multiplier supplying the leading form
        let mult_half = opts
            .mult_half_degree
            .unwrap_or_else(|| condition_degrees(dynamics.order + 2).1);
        Ok(VerifierContext {
            family,
            orbit,
            sys,
            dynamics,
            p,
            delta0,
            eps_den,
            mult_half,
            sdp_opts: opts.sdp,
        })
    }

    fn lin_const(v: f64) -> LinExpr {
        LinExpr {
            c: v,
            terms: BTreeMap::new(),
        }
    }

    fn mult_half_degree(&self) -> u32 {
        self.mult_half
    }

    /// Solves the per-sample multiplier subproblem at fixed rho; returns the
    /// achieved slack and the multipliers.
    fn sample_subproblem(
        &self,
        idx: usize,
        rho: &RhoPoly,
    ) -> Result<(f64, Polynomial, f64)> {
        let d = self.dynamics.dim;
        let sample = &self.dynamics.samples[idx];
        let pk = self.p.at(sample.tau);
        let pdk = self.p.deriv_at(sample.tau);
        let rho_k = Self::lin_const(rho.eval(sample.tau));
        let drho_k = Self::lin_const(rho.deriv(sample.tau));
        let h = self.mult_half_degree();
        let mult_basis = basis_range(d, 1, h);
        let mut prog = SosProgram::new();
        let t = prog.add_scalar();
        prog.sdp.obj_scalars[t] = -1.0; // maximize slack
        let s = level_scale(&pk, rho_k.c);
        let lam_block = prog.add_block(mult_basis.len());
        let mut dec = decrease_condition(
            idx,
            sample,
            &pk,
            &pdk,
            &rho_k,
            &drho_k,
            MultSpec::Block(lam_block),
            &mult_basis,
            self.delta0,
        );
        scale_condition(&mut dec, s);
        let wp_block = prog.add_block(1);
        let mut wp = wellposed_condition(
            idx,
            sample,
            &pk,
            &rho_k,
            self.eps_den[idx],
            MultSpec::Block(wp_block),
        );
        scale_condition(&mut wp, s);
        prog.emit(dec, Some(t))?;
        prog.emit(wp, Some(t))?;
        let sol = crate::sdp::solve(&prog.sdp, &self.sdp_opts)?;
        if sol.status != SdpStatus::Optimal {
            return Err(Error::SdpFailure(format!(
                "sample {idx} multiplier solve ended with {:?}",
                sol.status
            )));
        }
        let slack = sol.scalars[t];
        // the substitution also rescales the multiplier basis products, so
        // the Gram already represents the multiplier in original coordinates
        let lam = gram_poly(&sol.blocks[lam_block], &mult_basis);
        let wp_mult = sol.blocks[wp_block][(0, 0)];
        Ok((slack, lam, wp_mult))
    }

    fn impact_subproblem(&self, rho: &RhoPoly) -> Result<(f64, Polynomial)> {
        let d = self.dynamics.dim;
        let g = self
            .dynamics
            .impact
            .as_ref()
            .expect("impact subproblem requires a hybrid system");
        let p0 = self.p.at(0.0);
        let pt = self.p.at(self.orbit.period);
        let rho0 = Self::lin_const(rho.eval(0.0));
        let rho_t = Self::lin_const(rho.eval(self.orbit.period));
        let h = condition_degrees(2 * self.dynamics.order).1;
        let mult_basis = basis_range(d, 1, h);
        let mut prog = SosProgram::new();
        let t = prog.add_scalar();
        prog.sdp.obj_scalars[t] = -1.0;
        let s = level_scale(&pt, rho0.c.max(rho_t.c));
        let lam_block = prog.add_block(mult_basis.len());
        let mut cond = impact_condition(
            self.dynamics.samples.len(),
            g,
            &p0,
            &pt,
            &rho0,
            &rho_t,
            MultSpec::Block(lam_block),
            &mult_basis,
        );
        scale_condition(&mut cond, s);
        prog.emit(cond, Some(t))?;
        let sol = crate::sdp::solve(&prog.sdp, &self.sdp_opts)?;
        if sol.status != SdpStatus::Optimal {
            return Err(Error::SdpFailure(format!(
                "impact multiplier solve ended with {:?}",
                sol.status
            )));
        }
        let lam = gram_poly(&sol.blocks[lam_block], &mult_basis);
        Ok((sol.scalars[t], lam))
    }

    /// Checks feasibility of a fixed certificate level by searching
    /// multipliers at every sample (the L-step programs).
    pub fn verify_level(&self, rho: &RhoPoly) -> Result<LevelReport> {
        let per_sample: Vec<Result<f64>> = (0..self.dynamics.samples.len())
            .into_par_iter()
            .map(|idx| self.sample_subproblem(idx, rho).map(|(s, _, _)| s))
            .collect();
        let mut slacks = Vec::with_capacity(per_sample.len() + 1);
        for r in per_sample {
            slacks.push(r?);
        }
        if self.dynamics.impact.is_some() {
            slacks.push(self.impact_subproblem(rho)?.0);
        }
        let (worst_sample, &worst) = slacks
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        Ok(LevelReport {
            feasible: worst >= -SLACK_TOL,
            slacks,
            worst_sample,
        })
    }

    /// The L-step: per-sample multiplier optimization, maximizing slack.
    pub fn l_step(&self, rho: &RhoPoly) -> Result<MultiplierSet> {
        let per_sample: Vec<Result<(f64, Polynomial, f64)>> =
            (0..self.dynamics.samples.len())
                .into_par_iter()
                .map(|idx| self.sample_subproblem(idx, rho))
                .collect();
        let mut decrease = Vec::new();
        let mut wellposed = Vec::new();
        let mut slacks = Vec::new();
        for (idx, r) in per_sample.into_iter().enumerate() {
            let (s, lam, wp) = r.map_err(|e| Error::AlternationAborted {
                sample: idx,
                reason: e.to_string(),
            })?;
            if s < -SLACK_TOL {
                return Err(Error::AlternationAborted {
                    sample: idx,
                    reason: format!("decrease condition infeasible (slack {s:e})"),
                });
            }
            decrease.push(lam);
            wellposed.push(wp);
            slacks.push(s);
        }
        let impact = if self.dynamics.impact.is_some() {
            let (s, lam) = self.impact_subproblem(rho).map_err(|e| {
                Error::AlternationAborted {
                    sample: self.dynamics.samples.len(),
                    reason: e.to_string(),
                }
            })?;
            if s < -SLACK_TOL {
                return Err(Error::AlternationAborted {
                    sample: self.dynamics.samples.len(),
                    reason: format!("impact condition infeasible (slack {s:e})"),
                });
            }
            slacks.push(s);
            Some(lam)
        } else {
            None
        };
        Ok(MultiplierSet {
            decrease,
            wellposed,
            impact,
            slacks,
        })
    }

    /// The V-step: with multipliers fixed, maximize the integral of rho over
    /// the period subject to all conditions, rho in Bernstein form with
    /// coefficients bounded below by rho_min.
    pub fn v_step(
        &self,
        mults: &MultiplierSet,
        degree: usize,
        rho_min: f64,
        template: &RhoPoly,
    ) -> Result<RhoPoly> {
        let mut prog = SosProgram::new();
        let ncoef = degree + 1;
        let coef_vars: Vec<usize> = (0..ncoef).map(|_| prog.add_scalar()).collect();
        let rho_shape = RhoPoly::constant(0.0, degree, template.t_end);
        for &v in &coef_vars {
            prog.sdp.obj_scalars[v] = -template.t_end / ncoef as f64;
        }
        let lin_at = |t: f64, weights: fn(&RhoPoly, f64) -> Vec<f64>| -> LinExpr {
            let w = weights(&rho_shape, t);
            let mut e = LinExpr::default();
            for (i, &wi) in w.iter().enumerate() {
                e.add_var(Var::Scalar(coef_vars[i]), wi);
            }
            e
        };
        for (idx, sample) in self.dynamics.samples.iter().enumerate() {
            let pk = self.p.at(sample.tau);
            let pdk = self.p.deriv_at(sample.tau);
            let rho_k = lin_at(sample.tau, RhoPoly::eval_weights);
            let drho_k = lin_at(sample.tau, RhoPoly::deriv_weights);
            let s = level_scale(&pk, template.eval(sample.tau));
            let dummy_basis = basis_range(self.dynamics.dim, 1, self.mult_half_degree());
            let mut dec = decrease_condition(
                idx,
                sample,
                &pk,
                &pdk,
                &rho_k,
                &drho_k,
                MultSpec::Fixed(&mults.decrease[idx]),
                &dummy_basis,
                self.delta0,
            );
            scale_condition(&mut dec, s);
            prog.emit(dec, None)?;
            let lam_wp = Polynomial::constant(self.dynamics.dim, mults.wellposed[idx]);
            let mut wp = wellposed_condition(
                idx,
                sample,
                &pk,
                &rho_k,
                self.eps_den[idx],
                MultSpec::Fixed(&lam_wp),
            );
            scale_condition(&mut wp, s);
            prog.emit(wp, None)?;
        }
        if let (Some(g), Some(lam)) = (&self.dynamics.impact, &mults.impact) {
            let p0 = self.p.at(0.0);
            let pt = self.p.at(self.orbit.period);
            let rho0 = lin_at(0.0, RhoPoly::eval_weights);
            let rho_t = lin_at(self.orbit.period, RhoPoly::eval_weights);
            let s = level_scale(&pt, template.eval(0.0).max(template.eval(self.orbit.period)));
            let dummy_basis =
                basis_range(self.dynamics.dim, 1, condition_degrees(2 * self.dynamics.order).1);
            let mut cond = impact_condition(
                self.dynamics.samples.len(),
                g,
                &p0,
                &pt,
                &rho0,
                &rho_t,
                MultSpec::Fixed(lam),
                &dummy_basis,
            );
            scale_condition(&mut cond, s);
            prog.emit(cond, None)?;
        }
        // positivity: c_i - rho_min >= 0 via 1x1 blocks
        for &v in &coef_vars {
            let b = prog.add_block(1);
            prog.sdp.constraints.push(SdpConstraint {
                blocks: vec![(b, vec![(0, 0, 1.0)])],
                scalars: vec![(v, -1.0)],
                rhs: -rho_min,
            });
        }
        // periodicity: c_0 = c_d
        prog.sdp.constraints.push(SdpConstraint {
            blocks: vec![],
            scalars: vec![(coef_vars[0], 1.0), (coef_vars[degree], -1.0)],
            rhs: 0.0,
        });
        let sol = crate::sdp::solve(&prog.sdp, &self.sdp_opts)?;
        if sol.status != SdpStatus::Optimal {
            return Err(Error::SdpFailure(format!(
                "V-step solve ended with {:?}",
                sol.status
            )));
        }
        Ok(RhoPoly {
            basis: "bernstein".into(),
            degree,
            coeffs: coef_vars.iter().map(|&v| sol.scalars[v]).collect(),
            t_end: template.t_end,
        })
    }

    /// Bisection search for the largest feasible constant level.
    pub fn bisect_level(&self) -> Result<f64> {
        let check = |rho_val: f64| -> Result<LevelReport> {
            self.verify_level(&RhoPoly::constant(rho_val, 0, self.orbit.period))
        };
        let mut lo = 1e-4;
        let mut report = check(lo)?;
        while !report.feasible {
            lo *= 0.25;
            if lo < 1e-8 {
                return Err(Error::SeedInfeasible {
                    sample: report.worst_sample,
                    reason: format!(
                        "constant level {lo:e} still infeasible (slack {:e})",
                        report.slacks[report.worst_sample]
                    ),
                });
            }
            report = check(lo)?;
        }
        let mut hi = lo;
        for _ in 0..60 {
            let next = hi * 2.0;
            if check(next)?.feasible {
                lo = next;
                hi = next;
            } else {
                hi = next;
                break;
            }
        }
        if hi == lo {
            return Ok(lo);
        }
        while (hi - lo) > 1e-3 * hi {
            let mid = 0.5 * (lo + hi);
            if check(mid)?.feasible {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // level monotonicity spot check: half the accepted level stays
        // feasible (nested level sets)
        if !check(0.5 * lo)?.feasible {
            return Err(Error::Other(
                "level monotonicity violated: rho/2 infeasible after accepting rho".into(),
            ));
        }
        Ok(lo)
    }
}

/// Substitutes x = s x_tilde into an assembled condition, so the SoS program
/// is posed on the (near) unit level set. Without this the multiplier and
/// Gram magnitudes scale like inverse powers of rho, which floors the
/// interior-point residuals.
fn scale_condition(cond: &mut Condition, s: f64) {
    for (m, e) in cond.target.map.iter_mut() {
        let f = s.powi(m.degree() as i32);
        e.c *= f;
        for w in e.terms.values_mut() {
            *w *= f;
        }
    }
    // normalize to unit coefficient scale so the slack magnitude (and its
    // sign near the feasibility boundary) is solver-resolvable
    let mut mx = 0.0f64;
    for e in cond.target.map.values() {
        mx = mx.max(e.c.abs());
        for w in e.terms.values() {
            mx = mx.max(w.abs());
        }
    }
    if mx > 0.0 && mx.is_finite() {
        let inv = 1.0 / mx;
        for e in cond.target.map.values_mut() {
            e.c *= inv;
            for w in e.terms.values_mut() {
                *w *= inv;
            }
        }
    }
}

/// Slack tolerance deciding SoS feasibility of a normalized condition.
const SLACK_TOL: f64 = 1e-7;

/// Coordinate scale putting the level set {x'Px <= rho_val} near unit size.
fn level_scale(p: &DMatrix<f64>, rho_val: f64) -> f64 {
    let pbar = (p.trace() / p.nrows() as f64).max(1e-12);
    (rho_val.max(1e-12) / pbar).sqrt()
}

fn gram_poly(g: &DMatrix<f64>, basis: &[Monomial]) -> Polynomial {
    let d = basis[0].nvars();
    let mut p = Polynomial::zero(d);
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            p.add_term(basis[i].mul(&basis[j]), g[(i, j)]);
        }
    }
    p.prune(1e-300);
    p
}

/// Full verification pipeline: seed by bisection, then (optionally) grow the
/// certificate with the V/L alternation, then run the early-impact audit.
pub fn verify_roa(
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
    controller: Option<&TransverseController>,
    opts: &RoaOptions,
) -> Result<Certificate> {
    let ctx = VerifierContext::build(family, orbit, sys, controller, opts)?;
    let rho_star = ctx.bisect_level()?;
    log::info!("seed level rho = {rho_star:.6e} (sigma0 = {:.6e})", 1.0 / rho_star);
    let mut history = Vec::new();
    let mut rho = RhoPoly::constant(rho_star, opts.rho_degree, orbit.period);
    if opts.rho_degree > 0 {
        let rho_min = opts.rho_min_frac * rho_star;
        let mut integral = rho.integral();
        for iter in 0..opts.max_iters {
            let mults = ctx.l_step(&rho)?;
            let min_slack = mults
                .slacks
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let candidate = match ctx.v_step(&mults, opts.rho_degree, rho_min, &rho) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("V-step failed ({e}); keeping previous rho");
                    history.push(IterationMetric {
                        iteration: iter,
                        rho_integral: integral,
                        min_slack,
                    });
                    break;
                }
            };
            let new_integral = candidate.integral();
            let improvement = (new_integral - integral) / integral;
            log::info!(
                "alternation {iter}: integral {integral:.6e} -> {new_integral:.6e} \
                 ({improvement:.3e}), min slack {min_slack:.3e}"
            );
            if new_integral >= integral {
                rho = candidate;
            }
            history.push(IterationMetric {
                iteration: iter,
                rho_integral: rho.integral(),
                min_slack,
            });
            if improvement < opts.improvement_tol {
                break;
            }
            integral = rho.integral();
        }
        // final feasibility pass with the grown rho
        let report = ctx.verify_level(&rho)?;
        if !report.feasible {
            return Err(Error::AlternationAborted {
                sample: report.worst_sample,
                reason: "grown certificate failed re-verification".into(),
            });
        }
    }
    let taus: Vec<f64> = ctx.dynamics.samples.iter().map(|s| s.tau).collect();
    let mut cert = Certificate {
        p: ctx.p.clone(),
        rho,
        sigma0: 1.0 / rho_star,
        delta0: ctx.delta0,
        taylor_order: opts.taylor_order,
        taus,
        history,
        early_impact: None,
    };
    if orbit.hybrid {
        let summary = early_impact_audit(&cert, family, orbit, sys, controller, 10, opts.seed)?;
        if summary.violations > 0 {
            log::warn!(
                "early-impact audit: {} of {} sampled trajectories crossed the \
                 switching surface at an unexpected phase",
                summary.violations,
                summary.trajectories
            );
        }
        cert.early_impact = Some(summary);
    }
    Ok(cert)
}

// ---------------------------------------------------------------------------
// Audits and exports
// ---------------------------------------------------------------------------

/// One boundary-audit record: the decrease rate under the true dynamics and
/// the Taylor-model approximation error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRow {
    pub tau: f64,
    pub vdot_true: f64,
    pub approx_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    pub violations: usize,
    pub max_violation: f64,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn fraction_negative(&self) -> f64 {
        1.0 - self.violations as f64 / self.samples.max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,vdot_true,approx_error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e}\n",
                r.tau, r.vdot_true, r.approx_error
            ));
        }
        out
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| {
            // Box-Muller from two uniforms
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Time derivative of V = x'Px / rho along the given transverse velocity.
fn vdot(
    cert: &Certificate,
    x_perp: &DVector<f64>,
    tau: f64,
    x_perp_dot: &DVector<f64>,
    tau_dot: f64,
) -> f64 {
    let p = cert.p.at(tau);
    let pd = cert.p.deriv_at(tau);
    let v0 = (x_perp.transpose() * &p * x_perp)[(0, 0)];
    let dv0 = 2.0 * (x_perp.transpose() * &p * x_perp_dot)[(0, 0)]
        + tau_dot * (x_perp.transpose() * &pd * x_perp)[(0, 0)];
    let rho = cert.rho.eval(tau);
    let drho = cert.rho.deriv(tau);
    (dv0 * rho - drho * tau_dot * v0) / (rho * rho)
}

/// Samples the boundary {V = 1} at every certificate phase and compares
/// d/dt V under the true dynamics against the Taylor model.
pub fn boundary_audit(
    cert: &Certificate,
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
    controller: Option<&TransverseController>,
    dynamics: &PolyDynamics,
    samples_per_phase: usize,
    seed: u64,
) -> AuditReport {
    let d = dynamics.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut violations = 0usize;
    let mut max_violation = 0.0f64;
    let mut total = 0usize;
    for (idx, sample) in dynamics.samples.iter().enumerate() {
        let tau = sample.tau;
        let p = cert.p.at(tau);
        let rho = cert.rho.eval(tau);
        let gains = controller.map(|c| c.gain_at(tau));
        for _ in 0..samples_per_phase {
            let dir = unit_direction(&mut rng, d);
            let q = (dir.transpose() * &p * &dir)[(0, 0)];
            if q <= 0.0 {
                continue;
            }
            let x_perp = &dir * (rho / q).sqrt();
            let u: Vec<f64> = match &gains {
                Some(k) => (-(k * &x_perp)).as_slice().to_vec(),
                None => vec![0.0; sys.input_dim()],
            };
            // true dynamics
            let flow = transverse_flow(family, orbit, sys, &x_perp, tau, &u);
            let (xdot_true, tdot_true) = match flow {
                Ok(f) => f,
                Err(_) => {
                    // coordinate singularity inside the sampled set counts
                    // as a violation of the certificate
                    violations += 1;
                    total += 1;
                    continue;
                }
            };
            let vdot_true = vdot(cert, &x_perp, tau, &xdot_true, tdot_true);
            // Taylor model
            let xp = x_perp.as_slice();
            let den = sample.den.evaluate(xp).unwrap();
            let num = sample.num.evaluate(xp).unwrap();
            let vdot_poly = if den > 1e-12 {
                let xdot = DVector::from_iterator(
                    d,
                    sample
                        .xdot_den
                        .iter()
                        .map(|pq| pq.evaluate(xp).unwrap() / den),
                );
                vdot(cert, &x_perp, tau, &xdot, num / den)
            } else {
                f64::NAN
            };
            if vdot_true >= 0.0 {
                violations += 1;
                max_violation = max_violation.max(vdot_true);
            }
            total += 1;
            rows.push(AuditRow {
                tau,
                vdot_true,
                approx_error: vdot_poly - vdot_true,
            });
            let _ = idx;
        }
    }
    AuditReport {
        samples: total,
        violations,
        max_violation,
        rows,
    }
}

/// Simulates boundary states of the certified set forward to the next impact
/// and checks that the switching surface is only reached near the expected
/// phase (no early impact while the certificate assumes continuous flow).
pub fn early_impact_audit(
    cert: &Certificate,
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
    controller: Option<&TransverseController>,
    samples_per_phase: usize,
    seed: u64,
) -> Result<EarlyImpactSummary> {
    let d = cert.p.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ee7);
    let mut trajectories = 0usize;
    let mut violations = 0usize;
    // the slowest admissible phase rate bounds how much earlier (in time)
    // the impact may legitimately arrive; flag impacts whose remaining
    // phase-to-go was more than one grid segment
    let seg = cert
        .taus
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0f64, f64::max);
    for &tau in cert.taus.iter() {
        if orbit.period - tau < 2.0 * seg {
            // phases at the tail impact immediately by construction
            continue;
        }
        let p = cert.p.at(tau);
        let rho = cert.rho.eval(tau);
        for _ in 0..samples_per_phase {
            let dir = unit_direction(&mut rng, d);
            let q = (dir.transpose() * &p * &dir)[(0, 0)];
            if q <= 0.0 {
                continue;
            }
            let x_perp = &dir * (rho / q).sqrt();
            let x0 = from_transverse(family, orbit, &x_perp, tau);
            let law: Option<Box<dyn Fn(&[f64]) -> Vec<f64>>> = controller.map(|c| {
                Box::new(move |x: &[f64]| c.control(family, orbit, x).0)
                    as Box<dyn Fn(&[f64]) -> Vec<f64>>
            });
            let horizon = 2.5 * orbit.period;
            let step = sys.step_to_impact(&x0, law.as_deref(), horizon);
            let (t_impact, _pre, _post) = match step {
                Ok(v) => v,
                Err(_) => continue, // no impact in the horizon: nothing early
            };
            trajectories += 1;
            // minimum time the phase needs to reach T given the certified
            // phase-rate bound tau_dot <= num/den with den >= eps margin:
            // conservatively, flag only impacts far earlier than the
            // nominal remaining time allows
            let remaining = orbit.period - tau;
            if t_impact < 0.25 * remaining {
                violations += 1;
            }
        }
    }
    Ok(EarlyImpactSummary {
        trajectories,
        violations,
    })
}

/// Exports boundary points of the certified set per phase, mapped to the
/// full state space (enough to regenerate the region figures).
pub fn export_region(
    cert: &Certificate,
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    points_per_phase: usize,
) -> String {
    let d = cert.p.dim();
    let n = d + 1;
    let mut out = String::from("tau");
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for &tau in &cert.taus {
        let p = cert.p.at(tau);
        let rho = cert.rho.eval(tau);
        for k in 0..points_per_phase {
            // deterministic directions: a circle for d = 2, golden-angle
            // spiral for d = 3, endpoints for d = 1
            let dir: DVector<f64> = match d {
                1 => DVector::from_column_slice(&[if k % 2 == 0 { 1.0 } else { -1.0 }]),
                2 => {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / points_per_phase as f64;
                    DVector::from_column_slice(&[a.cos(), a.sin()])
                }
                _ => {
                    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
                    let frac = (k as f64 + 0.5) / points_per_phase as f64;
                    let z = 1.0 - 2.0 * frac;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let a = golden * k as f64;
                    let mut v = DVector::zeros(d);
                    v[0] = r * a.cos();
                    v[1] = r * a.sin();
                    v[2] = z;
                    v
                }
            };
            let q = (dir.transpose() * &p * &dir)[(0, 0)];
            if q <= 0.0 {
                continue;
            }
            let x_perp = &dir * (rho / q).sqrt();
            let x = from_transverse(family, orbit, &x_perp, tau);
            out.push_str(&format!("{tau:.17e}"));
            for v in &x {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::builtin;
    use crate::orbit::{find_limit_cycle, CycleOptions};
    use crate::transverse::{make_surfaces, to_transverse, Strategy};

    fn vdp_pieces() -> (HybridSystem, PeriodicOrbit, TransversalFamily) {
        let sys = builtin("van-der-pol", None).unwrap();
        let orbit = find_limit_cycle(&sys, &[2.0, 0.0], &CycleOptions::default()).unwrap();
        let family = make_surfaces(&orbit, &sys, Strategy::Orthogonal).unwrap();
        (sys, orbit, family)
    }

    fn rimless_pieces() -> (HybridSystem, PeriodicOrbit, TransversalFamily) {
        let p = crate::hybrid::RimlessWheelParams::default();
        let sys = builtin("rimless-wheel", None).unwrap();
        let orbit =
            find_limit_cycle(&sys, &[p.gamma - p.alpha, 0.8], &CycleOptions::default()).unwrap();
        let family = make_surfaces(&orbit, &sys, Strategy::Vertical).unwrap();
        (sys, orbit, family)
    }

    #[test]
    fn bernstein_rho_basics() {
        let rho = RhoPoly {
            basis: "bernstein".into(),
            degree: 3,
            coeffs: vec![1.0, 2.0, 2.0, 1.0],
            t_end: 2.0,
        };
        assert!((rho.eval(0.0) - 1.0).abs() < 1e-14);
        assert!((rho.eval(2.0) - 1.0).abs() < 1e-14);
        // finite-difference derivative oracle
        let h = 1e-6;
        let fd = (rho.eval(1.0 + h) - rho.eval(1.0 - h)) / (2.0 * h);
        assert!((rho.deriv(1.0) - fd).abs() < 1e-8);
        // integral oracle by quadrature
        let m = 20000;
        let quad: f64 = (0..m)
            .map(|i| rho.eval((i as f64 + 0.5) * 2.0 / m as f64) * 2.0 / m as f64)
            .sum();
        assert!((rho.integral() - quad).abs() < 1e-6);
        // weight representation matches eval
        let w = rho.eval_weights(0.7);
        let via_w: f64 = w.iter().zip(&rho.coeffs).map(|(a, b)| a * b).sum();
        assert!((via_w - rho.eval(0.7)).abs() < 1e-14);
        let dw = rho.deriv_weights(0.7);
        let via_dw: f64 = dw.iter().zip(&rho.coeffs).map(|(a, b)| a * b).sum();
        assert!((via_dw - rho.deriv(0.7)).abs() < 1e-12);
    }

    #[test]
    fn vdp_polynomial_dynamics_exact() {
        // f is polynomial (degree 3), surfaces planar: order-3 expansion is
        // exact, so the polynomial flow matches the true flow to roundoff
        let (sys, orbit, family) = vdp_pieces();
        let dynamics =
            polynomial_transverse_dynamics(&family, &orbit, &sys, None, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for idx in [0usize, 7, 23] {
            let s = &dynamics.samples[idx];
            for _ in 0..5 {
                let xp = DVector::from_column_slice(&[rng.gen_range(-0.3..0.3)]);
                let (flow, tdot) =
                    transverse_flow(&family, &orbit, &sys, &xp, s.tau, &[]).unwrap();
                let den = s.den.evaluate(xp.as_slice()).unwrap();
                let num = s.num.evaluate(xp.as_slice()).unwrap();
                let xd = s.xdot_den[0].evaluate(xp.as_slice()).unwrap() / den;
                assert!((tdot - num / den).abs() < 1e-10, "{}", tdot - num / den);
                assert!((flow[0] - xd).abs() < 1e-9, "{}", flow[0] - xd);
            }
        }
    }

    #[test]
    fn compass_taylor_matches_true_flow() {
        let sys = builtin("compass-gait", None).unwrap();
        let orbit =
            find_limit_cycle(&sys, &[-0.32, 0.22, -0.38, -1.09], &CycleOptions::default())
                .unwrap();
        let family = make_surfaces(&orbit, &sys, Strategy::Orthogonal).unwrap();
        let dynamics =
            polynomial_transverse_dynamics(&family, &orbit, &sys, None, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst = 0.0f64;
        for idx in [3usize, 15, 30] {
            let s = &dynamics.samples[idx];
            for _ in 0..10 {
                let dir = unit_direction(&mut rng, 3);
                let xp = dir * 0.05;
                let (flow, _) =
                    transverse_flow(&family, &orbit, &sys, &xp, s.tau, &[0.0]).unwrap();
                let den = s.den.evaluate(xp.as_slice()).unwrap();
                for i in 0..3 {
                    let approx = s.xdot_den[i].evaluate(xp.as_slice()).unwrap() / den;
                    worst = worst.max((approx - flow[i]).abs());
                }
            }
        }
        assert!(worst < 1e-4, "worst Taylor error {worst}");
    }

    #[test]
    fn denominator_on_orbit_is_positive_phase_rate() {
        let (sys, orbit, family) = vdp_pieces();
        let dynamics =
            polynomial_transverse_dynamics(&family, &orbit, &sys, None, 3).unwrap();
        for s in &dynamics.samples {
            let d0 = s.den.coeff(&Monomial::one(1));
            let n0 = s.num.coeff(&Monomial::one(1));
            assert!(d0 > 0.0, "denominator {d0} at tau {}", s.tau);
            assert!((d0 - n0).abs() < 1e-14, "num/den constants differ");
        }
    }

    #[test]
    fn rimless_impact_poly_matches_restitution() {
        let p = crate::hybrid::RimlessWheelParams::default();
        let (sys, orbit, family) = rimless_pieces();
        let dynamics =
            polynomial_transverse_dynamics(&family, &orbit, &sys, None, 3).unwrap();
        let g = &dynamics.impact.as_ref().unwrap()[0];
        // the transverse impact is exactly linear: x+ = cos(2 alpha) x-
        let lin = g.coeff(&Monomial::variable(0, 1));
        assert!(
            (lin - (2.0 * p.alpha).cos()).abs() < 1e-9,
            "{lin} vs {}",
            (2.0 * p.alpha).cos()
        );
        assert!(g.total_degree() <= 1);
    }

    #[test]
    fn vdp_level_verification_and_monotonicity() {
        let (sys, orbit, family) = vdp_pieces();
        let opts = RoaOptions::default();
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let small = RhoPoly::constant(1e-3, 0, orbit.period);
        let report = ctx.verify_level(&small).unwrap();
        assert!(report.feasible, "slacks {:?}", report.slacks);
        // a huge level must fail (coordinate singularities cap the tube)
        let huge = RhoPoly::constant(1e3, 0, orbit.period);
        let report = ctx.verify_level(&huge).unwrap();
        assert!(!report.feasible);
    }

    #[test]
    fn vdp_bisection_finds_hub_limited_level() {
        let (sys, orbit, family) = vdp_pieces();
        let opts = RoaOptions::default();
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let rho = ctx.bisect_level().unwrap();
        assert!(rho > 1e-4, "level {rho}");
        // feasible at the returned level, infeasible well above
        assert!(ctx
            .verify_level(&RhoPoly::constant(rho, 0, orbit.period))
            .unwrap()
            .feasible);
        assert!(!ctx
            .verify_level(&RhoPoly::constant(4.0 * rho, 0, orbit.period))
            .unwrap()
            .feasible);
    }

    #[test]
    fn rimless_impact_condition_feasible_small_levels() {
        // scalar oracle: with x+ = a x, a^2 < 1, the impact condition at
        // equal levels is (1 - a^2) P x^2 >= 0, feasible
        let (sys, orbit, family) = rimless_pieces();
        let opts = RoaOptions::default();
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let rho = RhoPoly::constant(1e-2, 0, orbit.period);
        let (slack, _) = ctx.impact_subproblem(&rho).unwrap();
        assert!(slack >= 0.0, "impact slack {slack}");
    }

    #[test]
    fn l_step_multipliers_revalidate_and_counts() {
        let (sys, orbit, family) = rimless_pieces();
        let opts = RoaOptions::default();
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let rho = ctx.bisect_level().unwrap();
        let rho = RhoPoly::constant(rho, 0, orbit.period);
        let mults = ctx.l_step(&rho).unwrap();
        // subproblem count = continuous samples + one impact
        assert_eq!(mults.slacks.len(), ctx.dynamics.samples.len() + 1);
        assert!(mults.slacks.iter().all(|&s| s >= -SLACK_TOL));
        // multipliers are SoS by construction; spot-check nonnegativity
        for lam in &mults.decrease {
            for x in [-0.5, -0.1, 0.2, 0.7] {
                assert!(lam.evaluate(&[x]).unwrap() >= -1e-9);
            }
        }
    }

    #[test]
    fn v_step_grows_rimless_integral() {
        let (sys, orbit, family) = rimless_pieces();
        let opts = RoaOptions {
            rho_degree: 6,
            ..Default::default()
        };
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let seed = ctx.bisect_level().unwrap();
        let rho0 = RhoPoly::constant(seed, opts.rho_degree, orbit.period);
        let mults = ctx.l_step(&rho0).unwrap();
        let rho1 = ctx
            .v_step(&mults, opts.rho_degree, 1e-3 * seed, &rho0)
            .unwrap();
        // the previous rho is feasible for the V-step, so the integral
        // never decreases
        assert!(
            rho1.integral() >= rho0.integral() - 1e-9,
            "{} vs {}",
            rho1.integral(),
            rho0.integral()
        );
        assert!(rho1.coeffs.iter().all(|&c| c > 0.0));
        assert!((rho1.coeffs[0] - rho1.coeffs[opts.rho_degree]).abs() < 1e-7);
    }

    #[test]
    fn gram_reconstruction_identity() {
        let (sys, orbit, family) = vdp_pieces();
        let opts = RoaOptions::default();
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let rho = RhoPoly::constant(1e-2, 0, orbit.period);
        // build one sample subproblem by hand and check the identity
        let d = ctx.dynamics.dim;
        let sample = &ctx.dynamics.samples[5];
        let pk = ctx.p.at(sample.tau);
        let pdk = ctx.p.deriv_at(sample.tau);
        let h = ctx.mult_half_degree();
        let mult_basis = basis_range(d, 1, h);
        let mut prog = SosProgram::new();
        let t = prog.add_scalar();
        prog.sdp.obj_scalars[t] = -1.0;
        let lam_block = prog.add_block(mult_basis.len());
        let dec = decrease_condition(
            5,
            sample,
            &pk,
            &pdk,
            &VerifierContext::lin_const(rho.eval(sample.tau)),
            &VerifierContext::lin_const(0.0),
            MultSpec::Block(lam_block),
            &mult_basis,
            ctx.delta0,
        );
        prog.emit(dec, Some(t)).unwrap();
        let sol = crate::sdp::solve(&prog.sdp, &SdpOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        for rec in &prog.records {
            let mismatch = rec.gram_mismatch(&sol.blocks, &sol.scalars);
            assert!(mismatch < 1e-9, "Gram mismatch {mismatch}");
        }
    }

    #[test]
    fn certificate_file_round_trip() {
        let (sys, orbit, family) = rimless_pieces();
        let opts = RoaOptions::default();
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let rho = ctx.bisect_level().unwrap();
        let cert = Certificate {
            p: ctx.p.clone(),
            rho: RhoPoly::constant(rho, 0, orbit.period),
            sigma0: 1.0 / rho,
            delta0: ctx.delta0,
            taylor_order: 3,
            taus: ctx.dynamics.samples.iter().map(|s| s.tau).collect(),
            history: vec![],
            early_impact: None,
        };
        let text = serde_json::to_string(&cert.to_file()).unwrap();
        let back = Certificate::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        let x = DVector::from_column_slice(&[0.01]);
        assert_eq!(cert.value(&x, 0.3), back.value(&x, 0.3));
    }

    #[test]
    fn rimless_boundary_audit_clean() {
        let (sys, orbit, family) = rimless_pieces();
        let opts = RoaOptions::default();
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let rho = ctx.bisect_level().unwrap();
        let cert = Certificate {
            p: ctx.p.clone(),
            rho: RhoPoly::constant(rho, 0, orbit.period),
            sigma0: 1.0 / rho,
            delta0: ctx.delta0,
            taylor_order: 3,
            taus: ctx.dynamics.samples.iter().map(|s| s.tau).collect(),
            history: vec![],
            early_impact: None,
        };
        let report = boundary_audit(
            &cert, &family, &orbit, &sys, None, &ctx.dynamics, 50, 99,
        );
        assert!(report.samples > 0);
        assert!(
            report.fraction_negative() >= 0.99,
            "negative fraction {}",
            report.fraction_negative()
        );
        let csv = report.to_csv();
        assert!(csv.lines().count() == report.rows.len() + 1);
    }

    #[test]
    fn rimless_certified_states_converge() {
        // soundness: states inside the certified set flow back to the cycle
        let (sys, orbit, family) = rimless_pieces();
        let opts = RoaOptions::default();
        let ctx = VerifierContext::build(&family, &orbit, &sys, None, &opts).unwrap();
        let rho = ctx.bisect_level().unwrap();
        let p0 = ctx.p.at(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let xv: f64 = rng.gen_range(-1.0..1.0);
            let x_perp = DVector::from_column_slice(&[xv]) * (rho / p0[(0, 0)]).sqrt();
            let x0 = from_transverse(&family, &orbit, &x_perp, 0.0);
            let mut state = x0;
            let mut ok = false;
            for _ in 0..50 {
                let (_, _, post) = sys.step_to_impact(&state, None, 5.0 * orbit.period).unwrap();
                state = post;
                let (xp, _) = to_transverse(&family, &orbit, &state).unwrap();
                if xp.norm() < 1e-4 {
                    ok = true;
                    break;
                }
            }
            assert!(ok, "state did not converge");
        }
    }
}
