//! Transversal surface families, the moving projection, the nonlinear
//! transverse dynamics, and their linearization about the orbit.
//!
//! A family is a phase-indexed unit normal z(tau); the surface at phase tau
//! is S(tau) = {y : z(tau)'(y - x*(tau)) = 0}. States near the orbit are
//! described by the phase tau of the surface they inhabit and the in-surface
//! deviation x_perp = Pi(tau)(x - x*(tau)).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::hybrid::HybridSystem;
use crate::jet::{taylor, Jet};
use crate::orbit::{hermite_eval, PeriodicOrbit};
use crate::{Error, Result};

/// Surface construction strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    /// z(tau) = f(x*(tau)) / |f(x*(tau))|.
    Orthogonal,
    /// Planar: z orthogonal to the ray from `center` through x*(tau).
    Radial { center: Vec<f64> },
    /// Constant z = e_1 (rimless wheel).
    Vertical,
    /// Maximizes a singularity-distance surrogate from the orthogonal start.
    Optimized,
}

/// Phase-indexed family of transversal surface normals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransversalFamily {
    pub strategy: Strategy,
    pub taus: Vec<f64>,
    /// Unit normal samples z(tau_k).
    pub z: Vec<Vec<f64>>,
    /// Slope samples for the Hermite interpolant of z.
    pub zdot: Vec<Vec<f64>>,
    pub period: f64,
    pub hybrid: bool,
    /// Orthonormal-complement frames (rows of Pi) at each sample; rebuilt
    /// deterministically from `z`, so not serialized.
    #[serde(skip)]
    frames: Vec<DMatrix<f64>>,
}

/// The projection onto a transversal surface and its phase derivative.
#[derive(Debug, Clone)]
pub struct Projection {
    pub pi: DMatrix<f64>,
    pub dpi: DMatrix<f64>,
}

/// Transverse linearization samples: A(tau), B(tau), and jump matrices.
#[derive(Debug, Clone)]
pub struct TransverseLTV {
    pub taus: Vec<f64>,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    /// Jump matrices at impact phases; one entry per impact (a single entry
    /// at tau = T for the built-in hybrid systems).
    pub a_d: Vec<DMatrix<f64>>,
    pub period: f64,
}

fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Central-difference slope samples; periodic wrap for smooth families,
/// one-sided at the endpoints for hybrid ones.
pub(crate) fn difference_slopes(taus: &[f64], vals: &[Vec<f64>], periodic: bool) -> Vec<Vec<f64>> {
    let k = vals.len();
    let n = vals[0].len();
    let mut slopes = vec![vec![0.0; n]; k];
    for j in 0..k {
        let (jm, jp, h) = if j == 0 {
            if periodic {
                // sample k-1 equals sample 0; use k-2 as the left neighbor
                (k - 2, 1, taus[1] - taus[0] + taus[k - 1] - taus[k - 2])
            } else {
                (0, 1, taus[1] - taus[0])
            }
        } else if j == k - 1 {
            if periodic {
                (k - 2, 1, taus[1] - taus[0] + taus[k - 1] - taus[k - 2])
            } else {
                (k - 2, k - 1, taus[k - 1] - taus[k - 2])
            }
        } else {
            (j - 1, j + 1, taus[j + 1] - taus[j - 1])
        };
        for i in 0..n {
            slopes[j][i] = (vals[jp][i] - vals[jm][i]) / h;
        }
    }
    slopes
}

impl TransversalFamily {
    pub fn state_dim(&self) -> usize {
        self.z[0].len()
    }

    fn wrap(&self, tau: f64) -> f64 {
        if self.hybrid {
            tau.clamp(0.0, self.period)
        } else {
            tau.rem_euclid(self.period)
        }
    }

    /// Unit normal and its phase derivative at `tau`: the raw Hermite
    /// interpolant is normalized, and the derivative is projected
    /// accordingly so z stays exactly unit length.
    pub fn z_at(&self, tau: f64) -> (DVector<f64>, DVector<f64>) {
        let tau = self.wrap(tau);
        let (raw, draw) = hermite_eval(&self.taus, &self.z, &self.zdot, tau);
        let r = dvec(&raw);
        let dr = dvec(&draw);
        let norm = r.norm();
        let z = &r / norm;
        let dz = (&dr - &z * z.dot(&dr)) / norm;
        (z, dz)
    }

    /// The projection Pi(tau) and dPi/dtau.
    pub fn projection(&self, tau: f64) -> Projection {
        let n = self.state_dim();
        if n == 2 {
            let (z, dz) = self.z_at(tau);
            let pi = DMatrix::from_row_slice(1, 2, &[-z[1], z[0]]);
            let dpi = DMatrix::from_row_slice(1, 2, &[-dz[1], dz[0]]);
            return Projection { pi, dpi };
        }
        let pi = self.frame_at(tau);
        // the frame construction is smooth in tau; differentiate it by
        // central differences with clamped stencils at the ends
        let h = 1e-7 * self.period.max(1.0);
        let tau_c = self.wrap(tau);
        let (ta, tb) = if self.hybrid {
            let a = (tau_c - h).max(0.0);
            let b = (tau_c + h).min(self.period);
            (a, b)
        } else {
            (tau_c - h, tau_c + h)
        };
        let pa = self.frame_at(ta);
        let pb = self.frame_at(tb);
        let dpi = (pb - pa) / (tb - ta);
        Projection { pi, dpi }
    }

    /// Frame rows interpolated from the transported samples, re-projected
    /// against z(tau) and re-orthonormalized.
    fn frame_at(&self, tau: f64) -> DMatrix<f64> {
        let tau = self.wrap(tau);
        let n = self.state_dim();
        let rows: Vec<Vec<f64>> = self
            .frames
            .iter()
            .map(|m| {
                let mut flat = Vec::with_capacity((n - 1) * n);
                for i in 0..n - 1 {
                    for j in 0..n {
                        flat.push(m[(i, j)]);
                    }
                }
                flat
            })
            .collect();
        let slopes = difference_slopes(&self.taus, &rows, !self.hybrid);
        let (flat, _) = hermite_eval(&self.taus, &rows, &slopes, tau);
        let (z, _) = self.z_at(tau);
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n - 1);
        for j in 0..n - 1 {
            let mut v = DVector::from_column_slice(&flat[j * n..(j + 1) * n]);
            v -= &z * z.dot(&v);
            for u in &cols {
                let p = u.dot(&v);
                v -= u * p;
            }
            let norm = v.norm();
            assert!(
                norm > 1e-8,
                "transversal frame degenerated at tau = {tau}"
            );
            cols.push(v / norm);
        }
        // rows of Pi are the complement vectors
        let mut pi = DMatrix::zeros(n - 1, n);
        for (j, v) in cols.iter().enumerate() {
            pi.set_row(j, &v.transpose());
        }
        pi
    }

    /// Rebuilds the transported frames from the z samples; must be called
    /// after deserialization.
    pub fn rebuild_frames(&mut self) {
        let n = self.state_dim();
        if n == 2 {
            self.frames = Vec::new();
            return;
        }
        let k = self.z.len();
        let mut frames = Vec::with_capacity(k);
        // initial complement of z_0 by Gram-Schmidt over coordinate axes
        let z0 = dvec(&self.z[0]);
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for i in 0..n {
            let mut v = DVector::zeros(n);
            v[i] = 1.0;
            v -= &z0 * z0.dot(&v);
            for u in &cols {
                let p = u.dot(&v);
                v -= u * p;
            }
            let norm = v.norm();
            if norm > 1e-8 {
                cols.push(v / norm);
            }
            if cols.len() == n - 1 {
                break;
            }
        }
        let store = |cols: &[DVector<f64>]| {
            let mut m = DMatrix::zeros(n - 1, n);
            for (j, v) in cols.iter().enumerate() {
                m.set_row(j, &v.transpose());
            }
            m
        };
        frames.push(store(&cols));
        // minimal-rotation transport along the samples
        for zk in self.z.iter().skip(1) {
            let z = dvec(zk);
            let mut next: Vec<DVector<f64>> = Vec::with_capacity(n - 1);
            for v in &cols {
                let mut w = v.clone();
                w -= &z * z.dot(&w);
                for u in &next {
                    let p = u.dot(&w);
                    w -= u * p;
                }
                let norm = w.norm();
                next.push(w / norm);
            }
            cols = next;
            frames.push(store(&cols));
        }
        if !self.hybrid {
            // distribute the holonomy so the frame closes: Pi(T) = Pi(0)
            let first = frames[0].clone();
            let last = frames[k - 1].clone();
            let m = &last * first.transpose();
            let angles = orthogonal_log(&m);
            for (j, frame) in frames.iter_mut().enumerate() {
                let s = -(j as f64) / (k - 1) as f64;
                let corr = orthogonal_exp(&angles, s);
                *frame = corr * frame.clone();
            }
        }
        self.frames = frames;
    }
}

/// Schur decomposition of an orthogonal matrix into planar rotation blocks,
/// kept as (Q, blocks) so fractional powers M^s can be formed.
struct OrthogonalLog {
    q: DMatrix<f64>,
    /// (block start index, block size in {1, 2}, rotation angle).
    blocks: Vec<(usize, usize, f64)>,
    dim: usize,
}

fn orthogonal_log(m: &DMatrix<f64>) -> OrthogonalLog {
    let dim = m.nrows();
    let schur = m.clone().schur();
    let (q, t) = schur.unpack();
    let mut blocks = Vec::new();
    let mut minus_ones: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < dim {
        if i + 1 < dim && t[(i + 1, i)].abs() > 1e-10 {
            let angle = t[(i + 1, i)].atan2(t[(i, i)]);
            blocks.push((i, 2, angle));
            i += 2;
        } else {
            if t[(i, i)] >= 0.0 {
                blocks.push((i, 1, 0.0));
            } else {
                minus_ones.push(i);
            }
            i += 1;
        }
    }
    // eigenvalues -1 come in pairs for an orientation-preserving closure;
    // pair adjacent ones into pi-rotation planes (the Schur basis makes any
    // pairing valid since the -1 eigenspace is rotated freely)
    let mut idx = 0;
    while idx < minus_ones.len() {
        let a = minus_ones[idx];
        if idx + 1 < minus_ones.len() && minus_ones[idx + 1] == a + 1 {
            blocks.push((a, 2, std::f64::consts::PI));
            idx += 2;
        } else {
            blocks.push((a, 1, std::f64::consts::PI));
            idx += 1;
        }
    }
    OrthogonalLog { q, blocks, dim }
}

fn orthogonal_exp(log: &OrthogonalLog, s: f64) -> DMatrix<f64> {
    let mut r = DMatrix::identity(log.dim, log.dim);
    for &(i, size, angle) in &log.blocks {
        let th = s * angle;
        if size == 2 {
            let (sn, cs) = th.sin_cos();
            r[(i, i)] = cs;
            r[(i, i + 1)] = -sn;
            r[(i + 1, i)] = sn;
            r[(i + 1, i + 1)] = cs;
        } else {
            // an unpaired -1 cannot be distributed smoothly; fall back to a
            // sign flip applied in full (frames stay orthonormal, closure
            // holds at the endpoints)
            r[(i, i)] = if angle == 0.0 {
                1.0
            } else if s <= -0.5 || s >= 0.5 {
                -1.0
            } else {
                1.0
            };
        }
    }
    &log.q * r * log.q.transpose()
}

/// Builds a transversal family for `orbit` with the requested strategy.
pub fn make_surfaces(
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
    strategy: Strategy,
) -> Result<TransversalFamily> {
    let n = orbit.state_dim();
    let k = orbit.taus.len();
    let f_star = &orbit.derivs;
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let raw: Vec<f64> = match &strategy {
            Strategy::Orthogonal | Strategy::Optimized => f_star[j].clone(),
            Strategy::Vertical => {
                let mut e = vec![0.0; n];
                e[0] = 1.0;
                e
            }
            Strategy::Radial { center } => {
                if n != 2 {
                    return Err(Error::InvalidParams(
                        "radial surfaces are defined for planar systems".into(),
                    ));
                }
                if center.len() != 2 {
                    return Err(Error::DimensionMismatch {
                        expected: 2,
                        got: center.len(),
                        context: "radial center",
                    });
                }
                let rx = orbit.states[j][0] - center[0];
                let ry = orbit.states[j][1] - center[1];
                // perpendicular to the ray from the center
                vec![-ry, rx]
            }
        };
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Transversality {
                tau: orbit.taus[j],
                value: 0.0,
            });
        }
        z.push(raw.iter().map(|v| v / norm).collect());
    }
    // orient for transversality: z'f* > 0 at the first sample, then keep
    // the sign continuous along the grid
    for j in 0..k {
        let flip = if j == 0 {
            let dot: f64 = z[0].iter().zip(&f_star[0]).map(|(a, b)| a * b).sum();
            dot < 0.0
        } else {
            let cont: f64 = z[j].iter().zip(&z[j - 1]).map(|(a, b)| a * b).sum();
            cont < 0.0
        };
        if flip {
            for v in z[j].iter_mut() {
                *v = -*v;
            }
        }
    }
    // impact alignment: blend toward the switching-surface normals over a
    // quarter period on each side so that z stays resolvable on the grid,
    // reaching the normals exactly at the impact phases
    if orbit.hybrid {
        let arr = sys.arrival.as_ref().ok_or_else(|| {
            Error::InvalidParams("hybrid orbit requires switching surfaces".into())
        })?;
        let dep = sys.departure.as_ref().unwrap();
        let signed_unit = |c: &[f64], f: &[f64]| -> Vec<f64> {
            let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = c.iter().zip(f).map(|(a, b)| a * b).sum();
            let s = if dot < 0.0 { -1.0 } else { 1.0 };
            c.iter().map(|v| s * v / norm).collect()
        };
        let c0 = signed_unit(&arr.c, &f_star[0]);
        let ct = signed_unit(&dep.c, &f_star[k - 1]);
        let width = 0.25 * orbit.period;
        for j in 0..k {
            let t = orbit.taus[j];
            let ramp = |s: f64| 0.5 * (1.0 + (std::f64::consts::PI * s.clamp(0.0, 1.0)).cos());
            let beta0 = ramp(t / width);
            let beta_t = ramp((orbit.period - t) / width);
            if beta0 == 0.0 && beta_t == 0.0 {
                continue;
            }
            let mut v = vec![0.0; n];
            for i in 0..n {
                v[i] = (1.0 - beta0 - beta_t) * z[j][i] + beta0 * c0[i] + beta_t * ct[i];
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return Err(Error::Transversality {
                    tau: t,
                    value: 0.0,
                });
            }
            z[j] = v.iter().map(|x| x / norm).collect();
        }
        z[0] = c0;
        z[k - 1] = ct;
    } else {
        // periodic closure
        z[k - 1] = z[0].clone();
    }
    let mut family = TransversalFamily {
        strategy: strategy.clone(),
        taus: orbit.taus.clone(),
        zdot: difference_slopes(&orbit.taus, &z, !orbit.hybrid),
        z,
        period: orbit.period,
        hybrid: orbit.hybrid,
        frames: Vec::new(),
    };
    if matches!(strategy, Strategy::Optimized) {
        optimize_surfaces(&mut family, orbit)?;
    }
    // transversality check at every sample
    for j in 0..k {
        let dot: f64 = family.z[j]
            .iter()
            .zip(&f_star[j])
            .map(|(a, b)| a * b)
            .sum();
        if dot <= 0.0 {
            return Err(Error::Transversality {
                tau: orbit.taus[j],
                value: dot,
            });
        }
    }
    family.rebuild_frames();
    Ok(family)
}

/// Surrogate objective: min over samples of z'f* / max(|dz/dtau|, eps).
/// The Eq. 6 denominator vanishes at in-surface distance about z'f*/|dz|,
/// so maximizing this pushes the coordinate singularities away.
fn surrogate_objective(taus: &[f64], z: &[Vec<f64>], f_star: &[Vec<f64>], periodic: bool) -> f64 {
    let slopes = difference_slopes(taus, z, periodic);
    let mut worst = f64::INFINITY;
    for j in 0..z.len() {
        let num: f64 = z[j].iter().zip(&f_star[j]).map(|(a, b)| a * b).sum();
        let den: f64 = slopes[j].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        worst = worst.min(num / den);
    }
    worst
}

/// Projected gradient ascent on the surrogate over the free samples.
fn optimize_surfaces(family: &mut TransversalFamily, orbit: &PeriodicOrbit) -> Result<()> {
    let k = family.z.len();
    let n = family.state_dim();
    let periodic = !family.hybrid;
    let f_star = &orbit.derivs;
    // endpoints are pinned for hybrid families (impact alignment); for
    // smooth families the last sample mirrors the first
    let free: Vec<usize> = if family.hybrid {
        (1..k - 1).collect()
    } else {
        (0..k - 1).collect()
    };
    let sync = |z: &mut Vec<Vec<f64>>| {
        if periodic {
            z[k - 1] = z[0].clone();
        }
    };
    let mut zs = family.z.clone();
    sync(&mut zs);
    let mut best = surrogate_objective(&family.taus, &zs, f_star, periodic);
    let mut step = 0.05;
    for _ in 0..200 {
        // numerical gradient over the free sample components
        let mut grad = vec![vec![0.0; n]; k];
        let h = 1e-6;
        for &j in &free {
            for i in 0..n {
                let mut zp = zs.clone();
                zp[j][i] += h;
                normalize_in_place(&mut zp[j]);
                sync(&mut zp);
                let fp = surrogate_objective(&family.taus, &zp, f_star, periodic);
                grad[j][i] = (fp - best) / h;
            }
        }
        let gnorm: f64 = grad
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if gnorm < 1e-12 {
            break;
        }
        let mut improved = false;
        while step > 1e-6 {
            let mut zt = zs.clone();
            for &j in &free {
                for i in 0..n {
                    zt[j][i] += step * grad[j][i] / gnorm;
                }
                normalize_in_place(&mut zt[j]);
            }
            sync(&mut zt);
            let cand = surrogate_objective(&family.taus, &zt, f_star, periodic);
            if cand > best + 1e-12 {
                zs = zt;
                best = cand;
                improved = true;
                step *= 1.3;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    family.z = zs;
    family.zdot = difference_slopes(&family.taus, &family.z, periodic);
    Ok(())
}

fn normalize_in_place(v: &mut [f64]) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Solves z(tau)'(x - x*(tau)) = 0 for the phase and returns the transverse
/// coordinates (x_perp, tau).
pub fn to_transverse(
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    x: &[f64],
) -> Result<(DVector<f64>, f64)> {
    let xv = dvec(x);
    // seed with the nearest orbit sample
    let mut best = (f64::INFINITY, 0usize);
    for (j, s) in orbit.states.iter().enumerate() {
        let d: f64 = s.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    let mut tau = orbit.taus[best.1];
    let scale = 1.0 + xv.norm();
    let mut converged = false;
    for _ in 0..100 {
        let (z, dz) = family.z_at(tau);
        let xs = dvec(&orbit.state(tau));
        let fs = dvec(&orbit.deriv(tau));
        let diff = &xv - &xs;
        let g = z.dot(&diff);
        if g.abs() <= 1e-12 * scale {
            converged = true;
            break;
        }
        let gp = dz.dot(&diff) - z.dot(&fs);
        if gp.abs() < 1e-14 {
            break;
        }
        let mut step = -g / gp;
        // trust region: one inter-impact segment
        let cap = 0.5 * family.period;
        step = step.clamp(-cap, cap);
        tau = family.wrap(tau + step);
    }
    if !converged {
        let (z, _) = family.z_at(tau);
        let g = z.dot(&(&xv - dvec(&orbit.state(tau))));
        if g.abs() > 1e-10 * scale {
            return Err(Error::OutOfTube(format!(
                "phase root-finding stalled near tau = {tau} with residual {g:e}"
            )));
        }
    }
    let proj = family.projection(tau);
    let xs = dvec(&orbit.state(tau));
    let x_perp = &proj.pi * (&xv - &xs);
    Ok((x_perp, tau))
}

/// Reconstruction x = x*(tau) + Pi(tau)' x_perp.
pub fn from_transverse(
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    x_perp: &DVector<f64>,
    tau: f64,
) -> Vec<f64> {
    let proj = family.projection(tau);
    let xs = dvec(&orbit.state(tau));
    let x = xs + proj.pi.transpose() * x_perp;
    x.as_slice().to_vec()
}

/// The nonlinear transverse dynamics, Eqs. 5 and 6.
pub fn transverse_flow(
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
    x_perp: &DVector<f64>,
    tau: f64,
    u: &[f64],
) -> Result<(DVector<f64>, f64)> {
    let (z, dz) = family.z_at(tau);
    let proj = family.projection(tau);
    let xs = dvec(&orbit.state(tau));
    // x*'(tau) of the stored interpolant, so that the flow is exactly the
    // time derivative of the to_transverse coordinates (the two agree with
    // f(x*(tau)) at the sample phases)
    let fs = dvec(&orbit.deriv(tau));
    let x = &xs + proj.pi.transpose() * x_perp;
    let f = dvec(&sys.vector_field(x.as_slice(), u)?);
    let numerator = z.dot(&f);
    let denominator = z.dot(&fs) - dz.dot(&(proj.pi.transpose() * x_perp));
    if denominator < 1e-9 {
        return Err(Error::Singularity(format!(
            "transverse flow denominator {denominator:e} at tau = {tau}; state too close \
             to the coordinate singularity"
        )));
    }
    let tau_dot = numerator / denominator;
    let x_perp_dot =
        (&proj.dpi * proj.pi.transpose() * x_perp - &proj.pi * &fs) * tau_dot + &proj.pi * f;
    Ok((x_perp_dot, tau_dot))
}

/// The impact update in transverse coordinates: maps x_perp on the departure
/// surface (tau = T) to x_perp on the arrival surface (tau = 0).
pub fn transverse_impact(
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
    x_perp_minus: &DVector<f64>,
) -> Result<DVector<f64>> {
    let t = family.period;
    let x_minus = from_transverse(family, orbit, x_perp_minus, t);
    let x_plus = sys.impact_map(&x_minus)?;
    let proj0 = family.projection(0.0);
    let xs0 = dvec(&orbit.state(0.0));
    Ok(&proj0.pi * (dvec(&x_plus) - xs0))
}

/// Jacobians of the vector field at (x, 0): (df/dx, df/du).
fn field_jacobians(sys: &HybridSystem, x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let center: Vec<f64> = x.iter().copied().chain(std::iter::repeat(0.0).take(m)).collect();
    let polys = taylor(
        |xu: &[Jet]| sys.dynamics.eval(&xu[..n], &xu[n..]),
        &center,
        1,
    );
    let mut jx = DMatrix::zeros(n, n);
    let mut ju = DMatrix::zeros(n, m);
    for (i, p) in polys.iter().enumerate() {
        for v in 0..n + m {
            let mut exps = vec![0u32; n + m];
            exps[v] = 1;
            let c = p.coeff(&crate::polynomial::Monomial::new(exps));
            if v < n {
                jx[(i, v)] = c;
            } else {
                ju[(i, v - n)] = c;
            }
        }
    }
    (jx, ju)
}

/// Jacobian of the impact map at x.
fn impact_jacobian(sys: &HybridSystem, x: &[f64]) -> DMatrix<f64> {
    let n = sys.state_dim();
    let polys = taylor(|xs: &[Jet]| sys.dynamics.impact(xs), x, 1);
    let mut j = DMatrix::zeros(n, n);
    for (i, p) in polys.iter().enumerate() {
        for v in 0..n {
            let mut exps = vec![0u32; n];
            exps[v] = 1;
            j[(i, v)] = p.coeff(&crate::polynomial::Monomial::new(exps));
        }
    }
    j
}

/// Analytic transverse linearization at a single phase.
pub fn ltv_at(
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
    tau: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (z, dz) = family.z_at(tau);
    let proj = family.projection(tau);
    let xs = orbit.state(tau);
    let fs = dvec(&orbit.deriv(tau));
    let zf = z.dot(&fs);
    if zf <= 0.0 {
        return Err(Error::Transversality { tau, value: zf });
    }
    let (jx, ju) = field_jacobians(sys, &xs);
    let pi = &proj.pi;
    let pit = pi.transpose();
    let pf = pi * &fs;
    // d(tau_dot)/d(x_perp) at the orbit: (z'J Pi' + dz' Pi') / z'f*
    let zjp = (z.transpose() * &jx * &pit + dz.transpose() * &pit) / zf;
    let a = &proj.dpi * &pit + pi * &jx * &pit - &pf * &zjp;
    let b = if sys.input_dim() > 0 {
        let zb = z.transpose() * &ju / zf;
        pi * &ju - &pf * zb
    } else {
        DMatrix::zeros(pi.nrows(), 0)
    };
    Ok((a, b))
}

/// Samples the transverse linearization on the orbit grid, with the jump
/// matrix A_d = Pi(0) DDelta(x*(T)) Pi(T)' for hybrid orbits.
pub fn linearize(
    family: &TransversalFamily,
    orbit: &PeriodicOrbit,
    sys: &HybridSystem,
) -> Result<TransverseLTV> {
    let mut a = Vec::with_capacity(orbit.taus.len());
    let mut b = Vec::with_capacity(orbit.taus.len());
    for &tau in &orbit.taus {
        let (ak, bk) = ltv_at(family, orbit, sys, tau)?;
        a.push(ak);
        b.push(bk);
    }
    let mut a_d = Vec::new();
    if orbit.hybrid {
        let x_minus = orbit.states.last().unwrap();
        let ddelta = impact_jacobian(sys, x_minus);
        let p0 = family.projection(0.0);
        let pt = family.projection(family.period);
        a_d.push(&p0.pi * ddelta * pt.pi.transpose());
    }
    Ok(TransverseLTV {
        taus: orbit.taus.clone(),
        a,
        b,
        a_d,
        period: orbit.period,
    })
}

/// Per-sample radius within which the Eq. 6 denominator stays positive:
/// r_k = z'f* / |Pi dz| (infinite when dz has no in-surface component).
pub fn well_posed_radii(family: &TransversalFamily, orbit: &PeriodicOrbit) -> Vec<f64> {
    family
        .taus
        .iter()
        .map(|&tau| {
            let (z, dz) = family.z_at(tau);
            let proj = family.projection(tau);
            let fs = dvec(&orbit.deriv(tau));
            let num = z.dot(&fs);
            let den = (&proj.pi * dz).norm();
            if den < 1e-14 {
                f64::INFINITY
            } else {
                num / den
            }
        })
        .collect()
}

/// Serializable mirror of [`TransverseLTV`] with row-major matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LtvFile {
    pub taus: Vec<f64>,
    pub period: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub a_d: Vec<Vec<f64>>,
    pub rows: usize,
    pub inputs: usize,
}

impl TransverseLTV {
    pub fn to_file(&self) -> LtvFile {
        let rows = self.a[0].nrows();
        let inputs = self.b[0].ncols();
        let rowmajor = |m: &DMatrix<f64>| -> Vec<f64> {
            let mut out = Vec::with_capacity(m.nrows() * m.ncols());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
            out
        };
        LtvFile {
            taus: self.taus.clone(),
            period: self.period,
            a: self.a.iter().map(&rowmajor).collect(),
            b: self.b.iter().map(&rowmajor).collect(),
            a_d: self.a_d.iter().map(&rowmajor).collect(),
            rows,
            inputs,
        }
    }

    pub fn from_file(f: &LtvFile) -> Result<Self> {
        let from_rowmajor = |data: &Vec<f64>, r: usize, c: usize| -> Result<DMatrix<f64>> {
            if data.len() != r * c {
                return Err(Error::Other("LTV file matrix size mismatch".into()));
            }
            Ok(DMatrix::from_row_slice(r, c, data))
        };
        let r = f.rows;
        Ok(TransverseLTV {
            taus: f.taus.clone(),
            period: f.period,
            a: f.a
                .iter()
                .map(|m| from_rowmajor(m, r, r))
                .collect::<Result<_>>()?,
            b: f.b
                .iter()
                .map(|m| from_rowmajor(m, r, f.inputs))
                .collect::<Result<_>>()?,
            a_d: f
                .a_d
                .iter()
                .map(|m| from_rowmajor(m, r, r))
                .collect::<Result<_>>()?,
        })
    }
}
