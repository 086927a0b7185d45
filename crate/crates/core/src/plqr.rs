//! Periodic Lyapunov and jump-Riccati solvers for the transverse
//! linearization, and the resulting orbital LQR controller.
//!
//! Between impacts P solves Pdot + A'P + PA (+ Riccati term) + Q = 0; at an
//! impact phase the jump condition P(tau_i-) = A_d' P(tau_i+) A_d + Q_i ties
//! the pre- and post-impact values together. Both solvers integrate the
//! matrix flow backwards and close the period through a fixed point.

use nalgebra::{DMatrix, DVector};

use crate::ode::Integrator;
use crate::orbit::{hermite_eval, PeriodicOrbit};
use crate::transverse::{
    difference_slopes, to_transverse, TransversalFamily, TransverseLTV,
};
use crate::{Error, Result};

/// A phase-dependent symmetric matrix stored as Hermite samples, with the
/// ODE right-hand side as slopes.
#[derive(Debug, Clone)]
pub struct PeriodicMatrixFunction {
    pub taus: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub pdot: Vec<DMatrix<f64>>,
    pub period: f64,
    pub hybrid: bool,
}

impl PeriodicMatrixFunction {
    pub fn dim(&self) -> usize {
        self.p[0].nrows()
    }

    fn wrap(&self, tau: f64) -> f64 {
        if self.hybrid {
            tau.clamp(0.0, self.period)
        } else {
            tau.rem_euclid(self.period)
        }
    }

    pub fn at(&self, tau: f64) -> DMatrix<f64> {
        let tau = self.wrap(tau);
        let vals: Vec<Vec<f64>> = self.p.iter().map(|m| m.as_slice().to_vec()).collect();
        let slopes: Vec<Vec<f64>> = self.pdot.iter().map(|m| m.as_slice().to_vec()).collect();
        let (flat, _) = hermite_eval(&self.taus, &vals, &slopes, tau);
        let n = self.dim();
        let m = DMatrix::from_column_slice(n, n, &flat);
        symmetrize(&m)
    }

    pub fn deriv_at(&self, tau: f64) -> DMatrix<f64> {
        let tau = self.wrap(tau);
        let vals: Vec<Vec<f64>> = self.p.iter().map(|m| m.as_slice().to_vec()).collect();
        let slopes: Vec<Vec<f64>> = self.pdot.iter().map(|m| m.as_slice().to_vec()).collect();
        let (_, dflat) = hermite_eval(&self.taus, &vals, &slopes, tau);
        let n = self.dim();
        symmetrize(&DMatrix::from_column_slice(n, n, &dflat))
    }

    /// Row-major export of the samples for the certificate file.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.p
            .iter()
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
    }
}

/// The transverse LQR controller u = -K(tau) x_perp.
#[derive(Debug, Clone)]
pub struct TransverseController {
    pub taus: Vec<f64>,
    pub gains: Vec<DMatrix<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qi: DMatrix<f64>,
    pub period: f64,
    pub hybrid: bool,
}

impl TransverseController {
    pub fn gain_at(&self, tau: f64) -> DMatrix<f64> {
        let tau = if self.hybrid {
            tau.clamp(0.0, self.period)
        } else {
            tau.rem_euclid(self.period)
        };
        let vals: Vec<Vec<f64>> = self.gains.iter().map(|m| m.as_slice().to_vec()).collect();
        let slopes = difference_slopes(&self.taus, &vals, !self.hybrid);
        let (flat, _) = hermite_eval(&self.taus, &vals, &slopes, tau);
        let (m, n) = (self.gains[0].nrows(), self.gains[0].ncols());
        DMatrix::from_column_slice(m, n, &flat)
    }

    /// Full-state control law. Out-of-tube states get zero torque and a
    /// raised flag rather than an error, so closed-loop simulation can
    /// continue through transient excursions.
    pub fn control(
        &self,
        family: &TransversalFamily,
        orbit: &PeriodicOrbit,
        x: &[f64],
    ) -> (Vec<f64>, bool) {
        let m = self.gains[0].nrows();
        match to_transverse(family, orbit, x) {
            Ok((x_perp, tau)) => {
                let u = -self.gain_at(tau) * x_perp;
                (u.as_slice().to_vec(), true)
            }
            Err(_) => (vec![0.0; m], false),
        }
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Componentwise interpolation of the LTV samples by a local 5-point
/// Lagrange quartic, so that the reconstructed A(tau) converges one order
/// faster than a cubic Hermite would. Periodic grids assume the last sample
/// duplicates the first.
struct MatInterp {
    taus: Vec<f64>,
    vals: Vec<Vec<f64>>,
    rows: usize,
    cols: usize,
    period: f64,
    hybrid: bool,
}

impl MatInterp {
    fn new(taus: &[f64], mats: &[DMatrix<f64>], period: f64, hybrid: bool) -> Self {
        let vals: Vec<Vec<f64>> = mats.iter().map(|m| m.as_slice().to_vec()).collect();
        MatInterp {
            taus: taus.to_vec(),
            vals,
            rows: mats[0].nrows(),
            cols: mats[0].ncols(),
            period,
            hybrid,
        }
    }

    /// Window of up to five consecutive samples around segment `j`, with
    /// periodic wrap (shifting tau by the period) or clamped sliding.
    fn window(&self, j: usize) -> Vec<(f64, usize)> {
        let k = self.taus.len();
        let width = 5usize.min(k);
        let mut nodes = Vec::with_capacity(width);
        if self.hybrid {
            let lo = j.saturating_sub(width / 2).min(k - width);
            for i in lo..lo + width {
                nodes.push((self.taus[i], i));
            }
        } else {
            let half = (width as isize - 1) / 2;
            for off in -half..=(width as isize - 1 - half) {
                let mut i = j as isize + off;
                let mut shift = 0.0;
                while i < 0 {
                    i += k as isize - 1;
                    shift -= self.period;
                }
                while i >= k as isize {
                    i -= k as isize - 1;
                    shift += self.period;
                }
                nodes.push((self.taus[i as usize] + shift, i as usize));
            }
        }
        nodes
    }

    fn at(&self, tau: f64) -> DMatrix<f64> {
        let tau = if self.hybrid {
            tau.clamp(0.0, self.period)
        } else {
            tau.rem_euclid(self.period)
        };
        let k = self.taus.len();
        let j = match self
            .taus
            .binary_search_by(|t| t.partial_cmp(&tau).unwrap())
        {
            Ok(i) => i.min(k - 2),
            Err(i) => i.saturating_sub(1).min(k - 2),
        };
        let nodes = self.window(j);
        let m = self.rows * self.cols;
        let mut flat = vec![0.0; m];
        for (a, &(ta, ia)) in nodes.iter().enumerate() {
            let mut l = 1.0;
            for (b, &(tb, _)) in nodes.iter().enumerate() {
                if b != a {
                    l *= (tau - tb) / (ta - tb);
                }
            }
            for c in 0..m {
                flat[c] += l * self.vals[ia][c];
            }
        }
        DMatrix::from_column_slice(self.rows, self.cols, &flat)
    }
}

fn check_weights(ltv: &TransverseLTV, q: &DMatrix<f64>, qi: &DMatrix<f64>) -> Result<usize> {
    let n = ltv.a[0].nrows();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q.nrows(),
            context: "state weight Q",
        });
    }
    if !ltv.a_d.is_empty() && (qi.nrows() != n || qi.ncols() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: qi.nrows(),
            context: "jump weight Qi",
        });
    }
    if q.clone().cholesky().is_none() {
        return Err(Error::InvalidParams("Q must be positive definite".into()));
    }
    Ok(n)
}

/// Monodromy of the transverse linearization over one period, including the
/// jump: x_perp(0+) = A_d Phi(T, 0) x_perp(0).
pub fn transverse_monodromy(ltv: &TransverseLTV) -> Result<DMatrix<f64>> {
    let n = ltv.a[0].nrows();
    let interp = MatInterp::new(&ltv.taus, &ltv.a, ltv.period, !ltv.a_d.is_empty());
    let integrator = Integrator::default();
    let rhs = |t: f64, x: &[f64], dx: &mut [f64]| {
        let a = interp.at(t);
        let xm = DMatrix::from_column_slice(n, n, x);
        let prod = a * xm;
        dx.copy_from_slice(prod.as_slice());
    };
    let x0 = DMatrix::<f64>::identity(n, n);
    let xt = integrator.integrate_to(&rhs, 0.0, x0.as_slice(), ltv.period)?;
    let phi = DMatrix::from_column_slice(n, n, &xt);
    Ok(match ltv.a_d.first() {
        Some(ad) => ad * phi,
        None => phi,
    })
}

/// Integrates the matrix flow `rhs` backward from tau = T to tau = 0,
/// recording samples (and their slopes) on the grid.
fn backward_sweep<F>(
    taus: &[f64],
    end_value: &DMatrix<f64>,
    rhs: &F,
    record: bool,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let n = end_value.nrows();
    let k = taus.len();
    let integrator = Integrator::default();
    let vec_rhs = |t: f64, x: &[f64], dx: &mut [f64]| {
        let p = DMatrix::from_column_slice(n, n, x);
        let d = rhs(t, &symmetrize(&p));
        dx.copy_from_slice(d.as_slice());
    };
    let mut samples = vec![DMatrix::zeros(n, n); k];
    let mut slopes = vec![DMatrix::zeros(n, n); k];
    let mut p = end_value.clone();
    if record {
        samples[k - 1] = p.clone();
        slopes[k - 1] = rhs(taus[k - 1], &p);
    }
    for j in (0..k - 1).rev() {
        let flat = integrator.integrate_to(&vec_rhs, taus[j + 1], p.as_slice(), taus[j])?;
        p = symmetrize(&DMatrix::from_column_slice(n, n, &flat));
        if !p.iter().all(|v| v.is_finite()) || p.norm() > 1e10 {
            return Err(Error::NotStabilizable(format!(
                "backward sweep blew up near tau = {}",
                taus[j]
            )));
        }
        if record {
            samples[j] = p.clone();
            slopes[j] = rhs(taus[j], &p);
        }
    }
    Ok((p, samples, slopes))
}

/// Subdivides every grid segment into `r` pieces. The solvers record their
/// solutions on this finer grid so that the Hermite reconstruction stays
/// accurate even where A(tau) varies quickly within a segment.
fn refine_grid(taus: &[f64], r: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((taus.len() - 1) * r + 1);
    for j in 0..taus.len() - 1 {
        for s in 0..r {
            out.push(taus[j] + (taus[j + 1] - taus[j]) * s as f64 / r as f64);
        }
    }
    out.push(*taus.last().unwrap());
    out
}

const RECORD_REFINE: usize = 8;

/// Solves the periodic (jump) Lyapunov differential equation.
pub fn periodic_lyapunov(
    ltv: &TransverseLTV,
    q: &DMatrix<f64>,
    qi: &DMatrix<f64>,
) -> Result<PeriodicMatrixFunction> {
    let n = check_weights(ltv, q, qi)?;
    let hybrid = !ltv.a_d.is_empty();
    let monodromy = transverse_monodromy(ltv)?;
    let rho = spectral_radius(&monodromy);
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    let interp = MatInterp::new(&ltv.taus, &ltv.a, ltv.period, hybrid);
    let rhs = |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let a = interp.at(t);
        -(a.transpose() * p + p * a + q)
    };
    // the map P(0) -> P(0) through one backward period (with the jump
    // P(T) = A_d' P(0) A_d + Qi) is affine; build it on a symmetric basis
    let end_of = |p0: &DMatrix<f64>| -> DMatrix<f64> {
        match ltv.a_d.first() {
            Some(ad) => symmetrize(&(ad.transpose() * p0 * ad + qi)),
            None => p0.clone(),
        }
    };
    let run = |p0: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let (start, _, _) = backward_sweep(&ltv.taus, &end_of(p0), &rhs, false)?;
        Ok(start)
    };
    let sym_basis: Vec<DMatrix<f64>> = {
        let mut b = Vec::new();
        for i in 0..n {
            for j in i..n {
                let mut e = DMatrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                b.push(e);
            }
        }
        b
    };
    let s = sym_basis.len();
    let pack = |m: &DMatrix<f64>| -> DVector<f64> {
        let mut v = DVector::zeros(s);
        let mut idx = 0;
        for i in 0..n {
            for j in i..n {
                v[idx] = m[(i, j)];
                idx += 1;
            }
        }
        v
    };
    let offset = run(&DMatrix::zeros(n, n))?;
    let b_vec = pack(&offset);
    let mut m_map = DMatrix::zeros(s, s);
    for (col, e) in sym_basis.iter().enumerate() {
        let img = run(e)? - &offset;
        m_map.set_column(col, &pack(&img));
    }
    // fixed point: (I - M) x = b
    let sys_m = DMatrix::identity(s, s) - m_map;
    let x = sys_m
        .lu()
        .solve(&b_vec)
        .ok_or_else(|| Error::Singularity("periodic Lyapunov fixed point singular".into()))?;
    let mut p0 = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            p0[(i, j)] = x[idx];
            p0[(j, i)] = x[idx];
            idx += 1;
        }
    }
    // the affine solve inherits quadrature error from the basis sweeps;
    // polish with fixed-point iterations of the (contractive) period map
    for _ in 0..50 {
        let next = run(&p0)?;
        let delta = (&next - &p0).norm();
        p0 = next;
        if delta <= 1e-12 * (1.0 + p0.norm()) {
            break;
        }
    }
    // re-integrate once more to record the samples on a refined grid
    let rec_taus = refine_grid(&ltv.taus, RECORD_REFINE);
    let (start, samples, slopes) = backward_sweep(&rec_taus, &end_of(&p0), &rhs, true)?;
    let closure = (&start - &p0).norm();
    if closure > 1e-8 * (1.0 + p0.norm()) {
        return Err(Error::NoConvergence { residual: closure });
    }
    for (j, p) in samples.iter().enumerate() {
        if p.clone().cholesky().is_none() {
            return Err(Error::Unstable {
                rho: spectral_radius(&samples[j]),
            });
        }
    }
    Ok(PeriodicMatrixFunction {
        taus: rec_taus,
        p: samples,
        pdot: slopes,
        period: ltv.period,
        hybrid,
    })
}

/// Solves the periodic jump-Riccati equation by backward sweeps.
pub fn jump_riccati(
    ltv: &TransverseLTV,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    qi: &DMatrix<f64>,
) -> Result<PeriodicMatrixFunction> {
    let _ = check_weights(ltv, q, qi)?;
    let hybrid = !ltv.a_d.is_empty();
    let m = ltv.b[0].ncols();
    let r_inv = if m > 0 {
        if r.nrows() != m || r.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: r.nrows(),
                context: "input weight R",
            });
        }
        Some(
            r.clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidParams("R must be positive definite".into()))?
                .inverse(),
        )
    } else {
        None
    };
    let a_interp = MatInterp::new(&ltv.taus, &ltv.a, ltv.period, hybrid);
    let b_interp = MatInterp::new(&ltv.taus, &ltv.b, ltv.period, hybrid);
    let rhs = |t: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let a = a_interp.at(t);
        let mut d = a.transpose() * p + p * a + q;
        if let Some(ri) = &r_inv {
            let b = b_interp.at(t);
            d -= p * &b * ri * b.transpose() * p;
        }
        -d
    };
    let end_of = |p0: &DMatrix<f64>| -> DMatrix<f64> {
        match ltv.a_d.first() {
            Some(ad) => symmetrize(&(ad.transpose() * p0 * ad + qi)),
            None => p0.clone(),
        }
    };
    let mut p0 = q.clone();
    let mut converged = false;
    for _ in 0..500 {
        let (start, _, _) = backward_sweep(&ltv.taus, &end_of(&p0), &rhs, false)?;
        let delta = (&start - &p0).norm();
        p0 = start;
        if delta <= 1e-11 * (1.0 + p0.norm()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotStabilizable(
            "backward Riccati sweeps did not reach a periodic fixed point".into(),
        ));
    }
    let rec_taus = refine_grid(&ltv.taus, RECORD_REFINE);
    let (start, samples, slopes) = backward_sweep(&rec_taus, &end_of(&p0), &rhs, true)?;
    let closure = (&start - &p0).norm();
    if closure > 1e-8 * (1.0 + p0.norm()) {
        return Err(Error::NoConvergence { residual: closure });
    }
    for p in &samples {
        if p.clone().cholesky().is_none() {
            return Err(Error::NotStabilizable(
                "Riccati solution lost positive definiteness".into(),
            ));
        }
    }
    Ok(PeriodicMatrixFunction {
        taus: rec_taus,
        p: samples,
        pdot: slopes,
        period: ltv.period,
        hybrid,
    })
}

/// Builds the gain schedule K(tau) = R^{-1} B(tau)' P(tau).
pub fn feedback(
    p: &PeriodicMatrixFunction,
    ltv: &TransverseLTV,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    qi: &DMatrix<f64>,
) -> Result<TransverseController> {
    let m = ltv.b[0].ncols();
    let r_inv = if m > 0 {
        r.clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParams("R must be positive definite".into()))?
            .inverse()
    } else {
        DMatrix::zeros(0, 0)
    };
    let gains = ltv
        .taus
        .iter()
        .zip(&ltv.b)
        .map(|(&tau, b)| &r_inv * b.transpose() * p.at(tau))
        .collect();
    Ok(TransverseController {
        taus: ltv.taus.clone(),
        gains,
        q: q.clone(),
        r: r.clone(),
        qi: qi.clone(),
        period: ltv.period,
        hybrid: p.hybrid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::{builtin, HybridSystem};
    use crate::orbit::{find_limit_cycle, CycleOptions};
    use crate::transverse::{linearize, make_surfaces, Strategy};

    fn constant_ltv(a: f64, b: Option<f64>, samples: usize) -> TransverseLTV {
        let taus: Vec<f64> = (0..=samples).map(|k| k as f64 / samples as f64).collect();
        let bm = match b {
            Some(v) => DMatrix::from_element(1, 1, v),
            None => DMatrix::zeros(1, 0),
        };
        TransverseLTV {
            taus: taus.clone(),
            a: vec![DMatrix::from_element(1, 1, a); samples + 1],
            b: vec![bm; samples + 1],
            a_d: Vec::new(),
            period: 1.0,
        }
    }

    fn rimless_pieces() -> (HybridSystem, PeriodicOrbit, TransversalFamily, TransverseLTV) {
        let p = crate::hybrid::RimlessWheelParams::default();
        let sys = builtin("rimless-wheel", None).unwrap();
        let orbit =
            find_limit_cycle(&sys, &[p.gamma - p.alpha, 0.8], &CycleOptions::default()).unwrap();
        let family = make_surfaces(&orbit, &sys, Strategy::Vertical).unwrap();
        let ltv = linearize(&family, &orbit, &sys).unwrap();
        (sys, orbit, family, ltv)
    }

    fn compass_pieces() -> (HybridSystem, PeriodicOrbit, TransversalFamily, TransverseLTV) {
        let sys = builtin("compass-gait", None).unwrap();
        let guess = [-0.32, 0.22, -0.38, -1.09];
        let orbit = find_limit_cycle(&sys, &guess, &CycleOptions::default()).unwrap();
        let family = make_surfaces(&orbit, &sys, Strategy::Orthogonal).unwrap();
        let ltv = linearize(&family, &orbit, &sys).unwrap();
        (sys, orbit, family, ltv)
    }

    use crate::orbit::PeriodicOrbit;
    use crate::transverse::TransversalFamily;

    #[test]
    fn scalar_constant_lyapunov() {
        let ltv = constant_ltv(-1.0, None, 16);
        let q = DMatrix::from_element(1, 1, 2.0);
        let qi = DMatrix::zeros(1, 1);
        let p = periodic_lyapunov(&ltv, &q, &qi).unwrap();
        for s in &p.p {
            assert!((s[(0, 0)] - 1.0).abs() < 1e-8, "{}", s[(0, 0)]);
        }
    }

    #[test]
    fn unstable_ltv_is_rejected() {
        let ltv = constant_ltv(0.5, None, 16);
        let q = DMatrix::identity(1, 1);
        let qi = DMatrix::zeros(1, 1);
        match periodic_lyapunov(&ltv, &q, &qi) {
            Err(Error::Unstable { rho }) => assert!(rho > 1.0),
            other => panic!("expected instability error, got {other:?}"),
        }
    }

    #[test]
    fn lyapunov_residual_at_midpoints() {
        let (_sys, _orbit, _family, ltv) = compass_pieces();
        let q = DMatrix::identity(3, 3);
        let qi = DMatrix::identity(3, 3) * 0.1;
        let p = periodic_lyapunov(&ltv, &q, &qi).unwrap();
        let a_interp = MatInterp::new(&ltv.taus, &ltv.a, ltv.period, true);
        for k in 0..ltv.taus.len() - 1 {
            let tau = 0.5 * (ltv.taus[k] + ltv.taus[k + 1]);
            let a = a_interp.at(tau);
            let pm = p.at(tau);
            let res = p.deriv_at(tau) + a.transpose() * &pm + &pm * a + &q;
            assert!(res.norm() < 1e-6, "midpoint {k}: {}", res.norm());
        }
    }

    #[test]
    fn rimless_jump_lyapunov() {
        let (_sys, _orbit, _family, ltv) = rimless_pieces();
        let q = DMatrix::identity(1, 1);
        let qi = DMatrix::from_element(1, 1, 0.1);
        let p = periodic_lyapunov(&ltv, &q, &qi).unwrap();
        assert!(p.p.iter().all(|m| m[(0, 0)] > 0.0));
        // jump condition: P(T) = A_d' P(0) A_d + Qi
        let ad = ltv.a_d[0][(0, 0)];
        let want = ad * p.p[0][(0, 0)] * ad + 0.1;
        let got = p.p.last().unwrap()[(0, 0)];
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn scalar_constant_riccati() {
        let ltv = constant_ltv(0.0, Some(1.0), 16);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        let qi = DMatrix::zeros(1, 1);
        let p = jump_riccati(&ltv, &q, &r, &qi).unwrap();
        for s in &p.p {
            assert!((s[(0, 0)] - 1.0).abs() < 1e-7, "{}", s[(0, 0)]);
        }
        let ctrl = feedback(&p, &ltv, &q, &r, &qi).unwrap();
        assert!((ctrl.gains[4][(0, 0)] - 1.0).abs() < 1e-7);
        // u = -K x_perp reduces to u = -x_perp here
        let u = -ctrl.gain_at(0.37) * DVector::from_column_slice(&[0.5]);
        assert!((u[0] + 0.5).abs() < 1e-7);
    }

    #[test]
    fn riccati_residual_at_midpoints() {
        let (_sys, _orbit, _family, ltv) = compass_pieces();
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(1, 1);
        let qi = DMatrix::identity(3, 3) * 0.1;
        let p = jump_riccati(&ltv, &q, &r, &qi).unwrap();
        let a_interp = MatInterp::new(&ltv.taus, &ltv.a, ltv.period, true);
        let b_interp = MatInterp::new(&ltv.taus, &ltv.b, ltv.period, true);
        for k in 0..ltv.taus.len() - 1 {
            let tau = 0.5 * (ltv.taus[k] + ltv.taus[k + 1]);
            let a = a_interp.at(tau);
            let b = b_interp.at(tau);
            let pm = p.at(tau);
            let res = p.deriv_at(tau) + a.transpose() * &pm + &pm * &a
                - &pm * &b * b.transpose() * &pm
                + &q;
            assert!(res.norm() < 1e-6, "midpoint {k}: {}", res.norm());
        }
    }

    #[test]
    fn compass_closed_loop_monodromy_contracts() {
        let (_sys, _orbit, _family, ltv) = compass_pieces();
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(1, 1);
        let qi = DMatrix::identity(3, 3) * 0.1;
        let p = jump_riccati(&ltv, &q, &r, &qi).unwrap();
        // closed-loop LTV: A - B K
        let mut cl = ltv.clone();
        for k in 0..cl.taus.len() {
            let kmat = r.clone().cholesky().unwrap().inverse()
                * cl.b[k].transpose()
                * p.at(cl.taus[k]);
            cl.a[k] = &cl.a[k] - &cl.b[k] * kmat;
        }
        let rho_cl = spectral_radius(&transverse_monodromy(&cl).unwrap());
        let rho_ol = spectral_radius(&transverse_monodromy(&ltv).unwrap());
        assert!(rho_cl < 1.0, "closed-loop spectral radius {rho_cl}");
        assert!(rho_cl < rho_ol, "{rho_cl} vs open-loop {rho_ol}");
    }

    #[test]
    fn closed_loop_decrease_and_jump_identities() {
        let (_sys, _orbit, _family, ltv) = compass_pieces();
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(1, 1);
        let qi = DMatrix::identity(3, 3) * 0.1;
        let p = jump_riccati(&ltv, &q, &r, &qi).unwrap();
        // d/dt (x'Px) along closed-loop trajectories: Pdot + Acl'P + PAcl
        // = -(Q + K'RK) at the stored samples
        for k in [0usize, 9, 27, 40] {
            let tau = ltv.taus[k];
            let pm = p.at(tau);
            let kmat = r.clone().cholesky().unwrap().inverse() * ltv.b[k].transpose() * &pm;
            let acl = &ltv.a[k] - &ltv.b[k] * &kmat;
            let lhs = p.deriv_at(tau) + acl.transpose() * &pm + &pm * acl;
            let rhs = -(&q + kmat.transpose() * &r * kmat);
            assert!((lhs - rhs).norm() < 1e-6, "sample {k}");
        }
        // jump: V- = V+ + x'Qi x with x+ = A_d x
        let ad = &ltv.a_d[0];
        let x = DVector::from_column_slice(&[0.3, -0.2, 0.4]);
        let v_minus = (x.transpose() * p.p.last().unwrap() * &x)[(0, 0)];
        let xp = ad * &x;
        let v_plus = (xp.transpose() * &p.p[0] * xp)[(0, 0)];
        let allowance = (x.transpose() * &qi * &x)[(0, 0)];
        // holds up to the solver's period-closure tolerance, which is
        // relative to the solution magnitude
        let tol = 1e-8 * (1.0 + p.p[0].norm());
        let gap = (v_minus - (v_plus + allowance)).abs();
        assert!(gap < tol, "jump identity gap {gap} vs {tol}");
    }

    #[test]
    fn grid_refinement_invariance() {
        let p_sys = crate::hybrid::RimlessWheelParams::default();
        let sys = builtin("rimless-wheel", None).unwrap();
        let q = DMatrix::identity(1, 1);
        let qi = DMatrix::from_element(1, 1, 0.1);
        let solve = |samples: usize| {
            let opts = CycleOptions {
                samples,
                ..Default::default()
            };
            let orbit =
                find_limit_cycle(&sys, &[p_sys.gamma - p_sys.alpha, 0.8], &opts).unwrap();
            let family = make_surfaces(&orbit, &sys, Strategy::Vertical).unwrap();
            let ltv = linearize(&family, &orbit, &sys).unwrap();
            periodic_lyapunov(&ltv, &q, &qi).unwrap()
        };
        let coarse = solve(40);
        let fine = solve(80);
        for t in [0.1f64, 0.35, 0.61] {
            let tau = t * coarse.period;
            let d = (coarse.at(tau) - fine.at(tau)).norm();
            assert!(d < 1e-6, "tau {tau}: {d}");
        }
    }

    #[test]
    fn compass_closed_loop_simulation_converges() {
        let (sys, orbit, family, ltv) = compass_pieces();
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(1, 1);
        let qi = DMatrix::identity(3, 3) * 0.1;
        let p = jump_riccati(&ltv, &q, &r, &qi).unwrap();
        let ctrl = feedback(&p, &ltv, &q, &r, &qi).unwrap();
        // perturb the post-impact state inside the tube
        let x0 = {
            let v = DVector::from_column_slice(&[0.02, -0.015, 0.01]);
            crate::transverse::from_transverse(&family, &orbit, &v, 0.0)
        };
        let law = |x: &[f64]| ctrl.control(&family, &orbit, x).0;
        let traj = sys
            .simulate(&x0, Some(&law), 10.5 * orbit.period)
            .unwrap();
        assert!(traj.events.len() >= 10, "impacts: {}", traj.events.len());
        let (xp, _) = to_transverse(&family, &orbit, &traj.events[9].post).unwrap();
        assert!(xp.norm() < 1e-3, "transverse norm {}", xp.norm());
        // x_perp = 0 gives zero torque
        let (u, ok) = ctrl.control(&family, &orbit, &orbit.states[5]);
        assert!(ok);
        assert!(u[0].abs() < 1e-7);
    }
}
