//! Limit cycle location and periodic orbit representation.
//!
//! Smooth systems use a Poincare section through a warmed-up trajectory
//! point; hybrid systems use the post-impact return map on the arrival
//! surface. Both are solved by a damped Newton iteration on on-surface
//! coordinates with finite-difference Jacobians.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::hybrid::{HybridSystem, SwitchingSurface};
use crate::{Error, Result};

/// A periodic orbit stored as `samples + 1` states at equispaced phases.
///
/// For a hybrid orbit, `taus[0] = 0` holds the post-impact state and the
/// final sample at `tau = period` holds the pre-impact state; the two are
/// related by the impact map, not by continuity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub period: f64,
    pub taus: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Vector field at each sample, used as Hermite slopes.
    pub derivs: Vec<Vec<f64>>,
    pub hybrid: bool,
}

/// Options for [`find_limit_cycle`].
#[derive(Debug, Clone)]
pub struct CycleOptions {
    /// Number of phase intervals; the orbit stores `samples + 1` states.
    pub samples: usize,
    /// Newton tolerance on the return-map residual.
    pub tol: f64,
    pub max_iters: usize,
    /// Pre-roll horizon for smooth systems before placing the section.
    pub warmup: f64,
    /// Upper bound on the time to the next impact or section return.
    pub max_return_time: f64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        CycleOptions {
            samples: 40,
            tol: 1e-10,
            max_iters: 50,
            warmup: 60.0,
            max_return_time: 50.0,
        }
    }
}

impl PeriodicOrbit {
    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    /// State at phase `tau` by cubic Hermite interpolation of the samples.
    pub fn state(&self, tau: f64) -> Vec<f64> {
        self.interpolate(tau).0
    }

    /// Time derivative of the interpolant at phase `tau`.
    pub fn deriv(&self, tau: f64) -> Vec<f64> {
        self.interpolate(tau).1
    }

    fn wrap(&self, tau: f64) -> f64 {
        if self.hybrid {
            // tau = 0 and tau = T are distinct states; clamp instead of wrap
            tau.clamp(0.0, self.period)
        } else {
            let r = tau.rem_euclid(self.period);
            if r.is_nan() { 0.0 } else { r }
        }
    }

    fn interpolate(&self, tau: f64) -> (Vec<f64>, Vec<f64>) {
        let tau = self.wrap(tau);
        hermite_eval(&self.taus, &self.states, &self.derivs, tau)
    }

    /// CSV with a `# period` header line and columns tau, x_i, f_i.
    pub fn to_csv(&self) -> String {
        let n = self.state_dim();
        let mut out = format!(
            "# period = {:.17e}, hybrid = {}\n",
            self.period, self.hybrid as u8
        );
        out.push_str("tau");
        for i in 0..n {
            out.push_str(&format!(",x{}", i + 1));
        }
        for i in 0..n {
            out.push_str(&format!(",f{}", i + 1));
        }
        out.push('\n');
        for (k, tau) in self.taus.iter().enumerate() {
            out.push_str(&format!("{tau:.17e}"));
            for v in &self.states[k] {
                out.push_str(&format!(",{v:.17e}"));
            }
            for v in &self.derivs[k] {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Other("empty orbit file".into()))?;
        let parse_field = |name: &str| -> Result<f64> {
            header
                .split(',')
                .find_map(|part| {
                    let (k, v) = part.split_once('=')?;
                    if k.trim().trim_start_matches('#').trim() == name {
                        v.trim().parse::<f64>().ok()
                    } else {
                        None
                    }
                })
                .ok_or_else(|| Error::Other(format!("orbit file header missing `{name}`")))
        };
        let period = parse_field("period")?;
        let hybrid = parse_field("hybrid")? != 0.0;
        let columns = lines
            .next()
            .ok_or_else(|| Error::Other("orbit file missing column header".into()))?;
        let ncols = columns.split(',').count();
        if ncols < 3 || (ncols - 1) % 2 != 0 {
            return Err(Error::Other("orbit file has malformed columns".into()));
        }
        let n = (ncols - 1) / 2;
        let mut taus = Vec::new();
        let mut states = Vec::new();
        let mut derivs = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Other(format!("orbit file number: {e}")))?;
            if vals.len() != ncols {
                return Err(Error::Other("orbit file row width mismatch".into()));
            }
            taus.push(vals[0]);
            states.push(vals[1..1 + n].to_vec());
            derivs.push(vals[1 + n..].to_vec());
        }
        if taus.len() < 2 {
            return Err(Error::Other("orbit file has too few samples".into()));
        }
        Ok(PeriodicOrbit {
            period,
            taus,
            states,
            derivs,
            hybrid,
        })
    }
}

/// Cubic Hermite interpolation of vector samples on a monotone grid;
/// returns the value and its derivative at `tau`.
pub(crate) fn hermite_eval(
    taus: &[f64],
    values: &[Vec<f64>],
    slopes: &[Vec<f64>],
    tau: f64,
) -> (Vec<f64>, Vec<f64>) {
    let k = match taus.binary_search_by(|t| t.partial_cmp(&tau).unwrap()) {
        Ok(k) => k.min(taus.len() - 2),
        Err(k) => k.saturating_sub(1).min(taus.len() - 2),
    };
    let h = taus[k + 1] - taus[k];
    let s = (tau - taus[k]) / h;
    let (s2, s3) = (s * s, s * s * s);
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let d00 = (6.0 * s2 - 6.0 * s) / h;
    let d10 = (3.0 * s2 - 4.0 * s + 1.0) / h;
    let d01 = (-6.0 * s2 + 6.0 * s) / h;
    let d11 = (3.0 * s2 - 2.0 * s) / h;
    let n = values[0].len();
    let mut x = vec![0.0; n];
    let mut dx = vec![0.0; n];
    for i in 0..n {
        let (xa, xb) = (values[k][i], values[k + 1][i]);
        let (ma, mb) = (slopes[k][i], slopes[k + 1][i]);
        x[i] = h00 * xa + h10 * h * ma + h01 * xb + h11 * h * mb;
        dx[i] = d00 * xa + d10 * h * ma + d01 * xb + d11 * h * mb;
    }
    (x, dx)
}

/// Orthonormal basis of the tangent space of {x : c'x = d}.
fn surface_basis(c: &[f64]) -> DMatrix<f64> {
    let n = c.len();
    let chat = DVector::from_column_slice(c).normalize();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v -= &chat * chat[i];
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
    DMatrix::from_columns(&cols)
}

/// Finds a periodic orbit starting from `guess` and samples it.
pub fn find_limit_cycle(
    sys: &HybridSystem,
    guess: &[f64],
    opts: &CycleOptions,
) -> Result<PeriodicOrbit> {
    if guess.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(),
            got: guess.len(),
            context: "limit cycle guess",
        });
    }
    if sys.is_hybrid() {
        find_hybrid_cycle(sys, guess, opts)
    } else {
        find_smooth_cycle(sys, guess, opts)
    }
}

fn newton_fixed_point<F>(
    map: F,
    y0: DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let m = y0.len();
    let mut y = y0;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let py = map(&y)?;
        let g = &py - &y;
        residual = g.norm();
        if residual <= tol {
            return Ok(y);
        }
        // finite-difference Jacobian of the displacement map g(y)
        let mut jac = DMatrix::zeros(m, m);
        let h = 1e-7 * (1.0 + y.norm());
        for j in 0..m {
            let mut yp = y.clone();
            yp[j] += h;
            let gp = map(&yp)? - &yp;
            for i in 0..m {
                jac[(i, j)] = (gp[i] - g[i]) / h;
            }
        }
        let step = jac
            .lu()
            .solve(&g)
            .ok_or_else(|| Error::Singularity("return-map Jacobian singular".into()))?;
        // damped update with simple backtracking on the residual; a trial
        // point where the map fails (e.g. no impact) also triggers damping
        let mut lambda = 1.0;
        loop {
            let yn = &y - &step * lambda;
            match map(&yn) {
                Ok(pyn) => {
                    let gn = pyn - &yn;
                    if gn.norm() < residual || lambda < 1.0 / 64.0 {
                        y = yn;
                        break;
                    }
                }
                Err(e) => {
                    if lambda < 1.0 / 64.0 {
                        return Err(e);
                    }
                }
            }
            lambda *= 0.5;
        }
    }
    let py = map(&y)?;
    let final_res = (&py - &y).norm();
    if final_res <= tol {
        Ok(y)
    } else {
        Err(Error::NoConvergence {
            residual: final_res.min(residual),
        })
    }
}

fn find_hybrid_cycle(
    sys: &HybridSystem,
    guess: &[f64],
    opts: &CycleOptions,
) -> Result<PeriodicOrbit> {
    let arr = sys.arrival.as_ref().unwrap().clone();
    let n = sys.state_dim();
    let basis = surface_basis(&arr.c);
    // anchor: project the guess onto the arrival surface
    let chat_scale = arr.c.iter().map(|v| v * v).sum::<f64>();
    let r0 = arr.residual(guess);
    let x_base: DVector<f64> = DVector::from_column_slice(guess)
        - DVector::from_column_slice(&arr.c) * (r0 / chat_scale);
    let embed = |y: &DVector<f64>| -> Vec<f64> {
        let x = &x_base + &basis * y;
        x.as_slice().to_vec()
    };
    let map = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let x = embed(y);
        let (_t, _pre, post) = sys.step_to_impact(&x, None, opts.max_return_time)?;
        let post = DVector::from_column_slice(&post);
        Ok(basis.transpose() * (post - &x_base))
    };
    let y = newton_fixed_point(map, DVector::zeros(n - 1), opts.tol, opts.max_iters)?;
    let x_star = embed(&y);
    let (period, pre, post) = sys.step_to_impact(&x_star, None, opts.max_return_time)?;
    // close the loop exactly: sample from the post-impact image
    sample_orbit(sys, &post, period, Some(pre), opts.samples)
}

fn find_smooth_cycle(
    sys: &HybridSystem,
    guess: &[f64],
    opts: &CycleOptions,
) -> Result<PeriodicOrbit> {
    let n = sys.state_dim();
    let zero_u: Vec<f64> = vec![];
    let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| {
        let f = sys.dynamics.eval(x, &zero_u);
        dx.copy_from_slice(&f);
    };
    // warm up onto the attractor, then place the section there
    let xw = sys.integrator.integrate_to(&rhs, 0.0, guess, opts.warmup)?;
    let fw = sys.dynamics.eval(&xw, &zero_u);
    let fnorm = fw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fnorm < 1e-12 {
        return Err(Error::NoConvergence { residual: fnorm });
    }
    let c: Vec<f64> = fw.iter().map(|v| v / fnorm).collect();
    let d: f64 = c.iter().zip(&xw).map(|(c, x)| c * x).sum();
    let section = SwitchingSurface::new(c, d)?;
    let basis = surface_basis(&section.c);
    let x_base = DVector::from_column_slice(&xw);
    let embed = |y: &DVector<f64>| -> Vec<f64> {
        let x = &x_base + &basis * y;
        x.as_slice().to_vec()
    };
    let return_map = |x0: &[f64]| -> Result<(f64, Vec<f64>)> {
        poincare_return(sys, &section, x0, opts.max_return_time)
    };
    let map = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let (_t, xr) = return_map(&embed(y))?;
        Ok(basis.transpose() * (DVector::from_column_slice(&xr) - &x_base))
    };
    let y = newton_fixed_point(map, DVector::zeros(n - 1), opts.tol, opts.max_iters)?;
    let x_star = embed(&y);
    let (period, _) = return_map(&x_star)?;
    sample_orbit(sys, &x_star, period, None, opts.samples)
}

/// First return of a smooth trajectory to `section` in the direction of
/// increasing residual, localized to the integrator's event tolerance.
fn poincare_return(
    sys: &HybridSystem,
    section: &SwitchingSurface,
    x0: &[f64],
    max_time: f64,
) -> Result<(f64, Vec<f64>)> {
    let zero_u: Vec<f64> = vec![];
    let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| {
        let f = sys.dynamics.eval(x, &zero_u);
        dx.copy_from_slice(&f);
    };
    let mut prev_t = 0.0;
    let mut prev_x = x0.to_vec();
    let mut bracket: Option<(f64, Vec<f64>, f64)> = None;
    let mut xw = x0.to_vec();
    sys.integrator.propagate(&rhs, 0.0, &mut xw, max_time, |tn, xn| {
        let r_prev = section.residual(&prev_x);
        let r_new = section.residual(xn);
        if r_prev < 0.0 && r_new >= 0.0 {
            bracket = Some((prev_t, prev_x.clone(), tn));
            return false;
        }
        prev_t = tn;
        prev_x = xn.to_vec();
        true
    })?;
    let Some((ta, xa, tb)) = bracket else {
        return Err(Error::Integration {
            t: max_time,
            reason: "no section return before the time limit".into(),
        });
    };
    // secant-bisection refinement, re-integrating from the bracket start
    let tol = 1e-9 * (1.0 + section.d.abs());
    let (mut lo, mut hi) = (ta, tb);
    let mut r_lo = section.residual(&xa);
    let mut x_hi = sys.integrator.integrate_to(&rhs, ta, &xa, hi)?;
    let mut r_hi = section.residual(&x_hi);
    for _ in 0..200 {
        if r_hi.abs() <= tol {
            return Ok((hi, x_hi));
        }
        let mut tc = hi - r_hi * (hi - lo) / (r_hi - r_lo);
        if !(tc > lo && tc < hi) || !tc.is_finite() {
            tc = 0.5 * (lo + hi);
        }
        let xc = sys.integrator.integrate_to(&rhs, ta, &xa, tc)?;
        let rc = section.residual(&xc);
        if rc.abs() <= tol {
            return Ok((tc, xc));
        }
        if (rc > 0.0) == (r_lo > 0.0) {
            lo = tc;
            r_lo = rc;
        } else {
            hi = tc;
            r_hi = rc;
            x_hi = xc;
        }
        if hi - lo < 1e-16 * (1.0 + hi.abs()) {
            return Ok((hi, x_hi));
        }
    }
    Err(Error::Integration {
        t: hi,
        reason: "section return localization did not converge".into(),
    })
}

/// Samples the converged orbit at `samples + 1` equispaced phases by
/// sequential integration from the phase-zero state.
fn sample_orbit(
    sys: &HybridSystem,
    x0: &[f64],
    period: f64,
    pre_impact: Option<Vec<f64>>,
    samples: usize,
) -> Result<PeriodicOrbit> {
    if samples < 2 {
        return Err(Error::InvalidParams("orbit needs at least 2 samples".into()));
    }
    let zero_u: Vec<f64> = vec![0.0; sys.input_dim()];
    let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| {
        let f = sys.dynamics.eval(x, &zero_u);
        dx.copy_from_slice(&f);
    };
    let mut taus = Vec::with_capacity(samples + 1);
    let mut states = Vec::with_capacity(samples + 1);
    let mut x = x0.to_vec();
    for k in 0..=samples {
        let tau = period * k as f64 / samples as f64;
        if k > 0 {
            let tau_prev = period * (k - 1) as f64 / samples as f64;
            x = sys.integrator.integrate_to(&rhs, tau_prev, &x, tau)?;
        }
        taus.push(tau);
        states.push(x.clone());
    }
    // the final hybrid sample is the localized pre-impact state
    if let Some(pre) = pre_impact {
        *states.last_mut().unwrap() = pre;
    }
    let derivs = states
        .iter()
        .map(|x| sys.dynamics.eval(x, &zero_u))
        .collect();
    Ok(PeriodicOrbit {
        period,
        taus,
        states,
        derivs,
        hybrid: pre_impact_flag(sys),
    })
}

fn pre_impact_flag(sys: &HybridSystem) -> bool {
    sys.is_hybrid()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::{builtin, RimlessWheelParams};

    #[test]
    fn van_der_pol_cycle() {
        let sys = builtin("van-der-pol", None).unwrap();
        let orbit = find_limit_cycle(&sys, &[2.0, 0.0], &CycleOptions::default()).unwrap();
        assert!((orbit.period - 6.663).abs() < 2e-3, "T = {}", orbit.period);
        // known amplitude of the mu = 1 cycle
        let amp = orbit
            .states
            .iter()
            .map(|s| s[0].abs())
            .fold(0.0f64, f64::max);
        assert!((amp - 2.0086).abs() < 5e-3, "amp = {amp}");
        // closure: integrating one period returns to the start
        let zero_u: Vec<f64> = vec![];
        let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| {
            let f = sys.dynamics.eval(x, &zero_u);
            dx.copy_from_slice(&f);
        };
        let xr = sys
            .integrator
            .integrate_to(&rhs, 0.0, &orbit.states[0], orbit.period)
            .unwrap();
        for i in 0..2 {
            assert!((xr[i] - orbit.states[0][i]).abs() < 1e-7);
        }
    }

    #[test]
    fn rimless_wheel_cycle_matches_energy_balance() {
        let p = RimlessWheelParams::default();
        let sys = builtin("rimless-wheel", None).unwrap();
        let orbit =
            find_limit_cycle(&sys, &[p.gamma - p.alpha, 0.8], &CycleOptions::default()).unwrap();
        // pre-impact speed from the energy balance across one spoke span
        let c2 = (2.0 * p.alpha).cos().powi(2);
        let omega2 = 2.0 * ((p.gamma - p.alpha).cos() - (p.gamma + p.alpha).cos()) / (1.0 - c2);
        let pre = orbit.states.last().unwrap();
        assert!((pre[0] - (p.gamma + p.alpha)).abs() < 1e-8);
        assert!((pre[1] - omega2.sqrt()).abs() < 1e-8, "{} vs {}", pre[1], omega2.sqrt());
        // post-impact sample sits on the arrival surface
        assert!((orbit.states[0][0] - (p.gamma - p.alpha)).abs() < 1e-12);
    }

    #[test]
    fn compass_gait_cycle() {
        let sys = builtin("compass-gait", None).unwrap();
        let guess = [-0.32, 0.22, -0.38, -1.09];
        let orbit = find_limit_cycle(&sys, &guess, &CycleOptions::default()).unwrap();
        assert!((orbit.period - 0.7347209621).abs() < 1e-6, "T = {}", orbit.period);
        let expect = [-0.32338856, 0.2186688, -0.37718156, -1.09182668];
        for i in 0..4 {
            assert!((orbit.states[0][i] - expect[i]).abs() < 1e-6, "component {i}");
        }
        // pre-impact sample maps to the post-impact sample
        let pre = orbit.states.last().unwrap();
        let post = sys.impact_map(pre).unwrap();
        for i in 0..4 {
            assert!((post[i] - orbit.states[0][i]).abs() < 1e-8);
        }
    }

    #[test]
    fn hermite_interpolation_tracks_the_flow() {
        let sys = builtin("van-der-pol", None).unwrap();
        let zero_u: Vec<f64> = vec![];
        let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| {
            let f = sys.dynamics.eval(x, &zero_u);
            dx.copy_from_slice(&f);
        };
        let max_err = |samples: usize| -> f64 {
            let opts = CycleOptions {
                samples,
                ..Default::default()
            };
            let orbit = find_limit_cycle(&sys, &[2.0, 0.0], &opts).unwrap();
            let mut worst = 0.0f64;
            for k in 0..20 {
                let tau = orbit.period * (0.013 + 0.049 * k as f64).rem_euclid(1.0);
                let truth = sys
                    .integrator
                    .integrate_to(&rhs, 0.0, &orbit.states[0], tau)
                    .unwrap();
                let interp = orbit.state(tau);
                for i in 0..2 {
                    worst = worst.max((interp[i] - truth[i]).abs());
                }
            }
            worst
        };
        let coarse = max_err(40);
        let fine = max_err(160);
        assert!(coarse < 1e-3, "coarse error {coarse}");
        assert!(fine < 5e-6, "fine error {fine}");
        // cubic Hermite is fourth order in the sample spacing
        assert!(fine < coarse / 30.0, "coarse {coarse}, fine {fine}");
    }

    #[test]
    fn csv_round_trip() {
        let sys = builtin("rimless-wheel", None).unwrap();
        let p = RimlessWheelParams::default();
        let orbit =
            find_limit_cycle(&sys, &[p.gamma - p.alpha, 0.8], &CycleOptions::default()).unwrap();
        let text = orbit.to_csv();
        let back = PeriodicOrbit::from_csv(&text).unwrap();
        assert_eq!(back.period, orbit.period);
        assert_eq!(back.hybrid, orbit.hybrid);
        assert_eq!(back.states, orbit.states);
        assert_eq!(back.derivs, orbit.derivs);
    }

    #[test]
    fn smooth_wrapping_and_hybrid_clamping() {
        let sys = builtin("van-der-pol", None).unwrap();
        let orbit = find_limit_cycle(&sys, &[2.0, 0.0], &CycleOptions::default()).unwrap();
        let a = orbit.state(0.3);
        let b = orbit.state(0.3 + orbit.period);
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }
}
