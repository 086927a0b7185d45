//! The hybrid system class: smooth dynamics between planar switching
//! surfaces, an impact map across them, and the three built-in systems
//! (van der Pol oscillator, rimless wheel, compass gait).

use serde::{Deserialize, Serialize};

use crate::jet::Scalar;
use crate::ode::Integrator;
use crate::{Error, Result};

/// Planar switching surface {x : c'x = d}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwitchingSurface {
    pub c: Vec<f64>,
    pub d: f64,
}

impl SwitchingSurface {
    pub fn new(c: Vec<f64>, d: f64) -> Result<Self> {
        let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::InvalidParams("switching surface normal is zero".into()));
        }
        Ok(SwitchingSurface { c, d })
    }

    pub fn residual(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>() - self.d
    }

    /// c' v for a direction v (e.g. the vector field).
    pub fn normal_velocity(&self, v: &[f64]) -> f64 {
        self.c.iter().zip(v).map(|(c, v)| c * v).sum()
    }
}

/// Parameters of the built-in systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanDerPolParams {
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RimlessWheelParams {
    /// Inter-spoke half-angle (rad).
    pub alpha: f64,
    /// Ground slope (rad).
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompassGaitParams {
    pub m: f64,
    pub m_h: f64,
    pub a: f64,
    pub b: f64,
    pub g: f64,
    pub gamma: f64,
}

impl Default for VanDerPolParams {
    fn default() -> Self {
        VanDerPolParams { mu: 1.0 }
    }
}

impl Default for RimlessWheelParams {
    fn default() -> Self {
        RimlessWheelParams {
            alpha: std::f64::consts::PI / 8.0,
            gamma: 0.08,
        }
    }
}

impl Default for CompassGaitParams {
    fn default() -> Self {
        CompassGaitParams {
            m: 5.0,
            m_h: 10.0,
            a: 0.5,
            b: 0.5,
            g: 9.8,
            gamma: 3.0 * std::f64::consts::PI / 180.0,
        }
    }
}

impl CompassGaitParams {
    pub fn l(&self) -> f64 {
        self.a + self.b
    }

    fn validate(&self) -> Result<()> {
        if self.m <= 0.0 || self.m_h <= 0.0 || self.a <= 0.0 || self.b <= 0.0 || self.g <= 0.0 {
            return Err(Error::InvalidParams(
                "compass gait masses, lengths, and gravity must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "kebab-case")]
pub enum SystemParams {
    VanDerPol(VanDerPolParams),
    RimlessWheel(RimlessWheelParams),
    CompassGait(CompassGaitParams),
}

/// The smooth vector field and impact map of a built-in system, evaluable on
/// any [`Scalar`] (floats for simulation, jets for Taylor expansion).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Dynamics {
    VanDerPol(VanDerPolParams),
    RimlessWheel(RimlessWheelParams),
    CompassGait(CompassGaitParams),
}

impl Dynamics {
    pub fn state_dim(&self) -> usize {
        match self {
            Dynamics::VanDerPol(_) | Dynamics::RimlessWheel(_) => 2,
            Dynamics::CompassGait(_) => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Dynamics::VanDerPol(_) | Dynamics::RimlessWheel(_) => 0,
            Dynamics::CompassGait(_) => 1,
        }
    }

    /// The vector field f(x, u).
    pub fn eval<T: Scalar>(&self, x: &[T], u: &[T]) -> Vec<T> {
        match self {
            Dynamics::VanDerPol(p) => {
                let one = x[0].like(1.0);
                let mu = x[0].like(p.mu);
                // [x2, mu (1 - x1^2) x2 - x1]
                vec![
                    x[1].clone(),
                    mu * (one - x[0].clone() * x[0].clone()) * x[1].clone() - x[0].clone(),
                ]
            }
            Dynamics::RimlessWheel(_) => {
                // simple pendulum in the paper's convention: [thetadot, sin(theta)]
                vec![x[1].clone(), x[0].sin()]
            }
            Dynamics::CompassGait(p) => {
                let (tsw, tst, tswd, tstd) = (&x[0], &x[1], &x[2], &x[3]);
                let l = p.l();
                let mlb = x[0].like(p.m * l * p.b);
                let cdiff = (tst.clone() - tsw.clone()).cos();
                let sdiff = (tst.clone() - tsw.clone()).sin();
                let h11 = x[0].like(p.m * p.b * p.b);
                let h12 = -(mlb.clone() * cdiff.clone());
                let h22 = x[0].like((p.m_h + p.m) * l * l + p.m * p.a * p.a);
                // C q_dot
                let c_qd1 = mlb.clone() * sdiff.clone() * tstd.clone() * tstd.clone();
                let c_qd2 = -(mlb * sdiff * tswd.clone() * tswd.clone());
                // gravity
                let g1 = x[0].like(p.m * p.b * p.g) * tsw.sin();
                let g2 = -(x[0].like((p.m_h * l + p.m * p.a + p.m * l) * p.g) * tst.sin());
                // torque through B = [1, -1]'
                let (bu1, bu2) = if u.is_empty() {
                    (x[0].like(0.0), x[0].like(0.0))
                } else {
                    (u[0].clone(), -u[0].clone())
                };
                let r1 = bu1 - c_qd1 - g1;
                let r2 = bu2 - c_qd2 - g2;
                // qdd = H^{-1} r with the 2x2 inverse
                let det = h11.clone() * h22.clone() - h12.clone() * h12.clone();
                let qdd1 = (h22 * r1.clone() - h12.clone() * r2.clone()) / det.clone();
                let qdd2 = (h11 * r2 - h12 * r1) / det;
                vec![tswd.clone(), tstd.clone(), qdd1, qdd2]
            }
        }
    }

    /// The impact map Delta(x) for a state on the departure surface.
    pub fn impact<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        match self {
            Dynamics::VanDerPol(_) => x.to_vec(),
            Dynamics::RimlessWheel(p) => {
                // angle resets across the spoke span, velocity scaled
                let theta_plus = x[0].like(p.gamma - p.alpha);
                let scale = x[0].like((2.0 * p.alpha).cos());
                vec![theta_plus, scale * x[1].clone()]
            }
            Dynamics::CompassGait(p) => {
                let (tsw, tst, tswd, tstd) = (&x[0], &x[1], &x[2], &x[3]);
                let l = p.l();
                let half = x[0].like(0.5);
                let alpha = (tsw.clone() - tst.clone()) * half;
                let two_alpha = alpha.clone() + alpha;
                let c2a = two_alpha.cos();
                // Q-(alpha)
                let qm11 = x[0].like(-p.m * p.a * p.b);
                let qm12 = x[0].like(-p.m * p.a * p.b)
                    + x[0].like(p.m_h * l * l + 2.0 * p.m * p.a * l) * c2a.clone();
                let qm22 = x[0].like(-p.m * p.a * p.b);
                // Q+(alpha)
                let qp11 = x[0].like(p.m * p.b) * (x[0].like(p.b) - x[0].like(l) * c2a.clone());
                let qp12 = x[0].like(p.m * l) * (x[0].like(l) - x[0].like(p.b) * c2a.clone())
                    + x[0].like(p.m * p.a * p.a + p.m_h * l * l);
                let qp21 = x[0].like(p.m * p.b * p.b);
                let qp22 = -(x[0].like(p.m * p.b * l) * c2a);
                // rhs = Q- qdot-
                let r1 = qm11 * tswd.clone() + qm12 * tstd.clone();
                let r2 = qm22 * tstd.clone();
                // solve Q+ qdot+ = rhs
                let det = qp11.clone() * qp22.clone() - qp12.clone() * qp21.clone();
                let v1 = (qp22 * r1.clone() - qp12 * r2.clone()) / det.clone();
                let v2 = (qp11 * r2 - qp21 * r1) / det;
                // relabel: angles swap
                vec![tst.clone(), tsw.clone(), v1, v2]
            }
        }
    }

    /// Extra guard distinguishing genuine impacts from spurious surface
    /// crossings. For the compass gait the switching surface is also crossed
    /// when the legs pass each other near the ground ("scuffing"); a genuine
    /// heel strike has the swing leg well in front of the stance leg.
    pub fn impact_armed(&self, x: &[f64]) -> bool {
        match self {
            Dynamics::CompassGait(_) => x[0] - x[1] > 0.1,
            _ => true,
        }
    }
}

/// A single recorded impact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImpactEvent {
    pub t: f64,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

/// Simulation output: timestamped states plus impact events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub impact_flags: Vec<bool>,
    pub events: Vec<ImpactEvent>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("non-empty trajectory")
    }

    /// CSV with header: time, state columns, impact flag.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map(|s| s.len()).unwrap_or(0);
        let mut out = String::from("t");
        for i in 0..n {
            out.push_str(&format!(",x{}", i + 1));
        }
        out.push_str(",impact\n");
        for ((t, x), flag) in self.times.iter().zip(&self.states).zip(&self.impact_flags) {
            out.push_str(&format!("{t:.17e}"));
            for v in x {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push_str(if *flag { ",1\n" } else { ",0\n" });
        }
        out
    }
}

/// A hybrid system: smooth field, impact map, planar switching surfaces.
#[derive(Debug, Clone)]
pub struct HybridSystem {
    pub name: String,
    pub dynamics: Dynamics,
    /// Departure and arrival surfaces; `None` for smooth systems.
    pub departure: Option<SwitchingSurface>,
    pub arrival: Option<SwitchingSurface>,
    /// Sign of c_-' f at the nominal orbit impact; crossings in the other
    /// direction are ignored.
    pub crossing_sign: f64,
    pub integrator: Integrator,
}

/// Relative tolerance on the surface residual of localized impacts.
pub const EVENT_TOL: f64 = 1e-9;

impl HybridSystem {
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn is_hybrid(&self) -> bool {
        self.departure.is_some()
    }

    /// Evaluates the vector field with dimension checks and (for the compass
    /// gait) an inertia-matrix singularity guard.
    pub fn vector_field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: x.len(),
                context: "vector field state",
            });
        }
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: u.len(),
                context: "vector field input",
            });
        }
        if let Dynamics::CompassGait(p) = &self.dynamics {
            let l = p.l();
            let h11 = p.m * p.b * p.b;
            let h12 = -p.m * l * p.b * (x[1] - x[0]).cos();
            let h22 = (p.m_h + p.m) * l * l + p.m * p.a * p.a;
            let det = h11 * h22 - h12 * h12;
            if det.abs() < 1e-12 * h11.abs().max(h22.abs()).powi(2) {
                return Err(Error::Singularity(format!(
                    "compass-gait inertia matrix singular, det = {det:e}"
                )));
            }
        }
        Ok(self.dynamics.eval(x, u))
    }

    /// Applies the impact map to a state on the departure surface.
    pub fn impact_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dep = self.departure.as_ref().ok_or_else(|| {
            Error::Other("impact map requested for a system without switching surfaces".into())
        })?;
        let r = dep.residual(x);
        if r.abs() > 1e-6 * (1.0 + dep.d.abs()) {
            return Err(Error::OutOfTube(format!(
                "impact map input off the departure surface, residual {r:e}"
            )));
        }
        if let Dynamics::CompassGait(p) = &self.dynamics {
            let alpha = (x[0] - x[1]) / 2.0;
            let l = p.l();
            let c2a = (2.0 * alpha).cos();
            let qp11 = p.m * p.b * (p.b - l * c2a);
            let qp12 = p.m * l * (l - p.b * c2a) + p.m * p.a * p.a + p.m_h * l * l;
            let qp21 = p.m * p.b * p.b;
            let qp22 = -p.m * p.b * l * c2a;
            let det = qp11 * qp22 - qp12 * qp21;
            let scale = qp12.abs().max(qp21.abs()).powi(2).max(1e-300);
            if det.abs() < 1e-12 * scale {
                return Err(Error::ImpactSingularity { alpha });
            }
        }
        Ok(self.dynamics.impact(x))
    }

    /// Simulates with impact event localization. Each recorded impact state
    /// satisfies |c_-' x - d_-| <= 1e-9 (1 + |d_-|).
    pub fn simulate(
        &self,
        x0: &[f64],
        controller: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
        horizon: f64,
    ) -> Result<Trajectory> {
        if horizon <= 0.0 {
            return Err(Error::InvalidParams("simulation horizon must be positive".into()));
        }
        let zero_u = vec![0.0; self.input_dim()];
        let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| {
            let u = match controller {
                Some(g) => g(x),
                None => zero_u.clone(),
            };
            let f = self.dynamics.eval(x, &u);
            dx.copy_from_slice(&f);
        };

        let mut traj = Trajectory {
            times: vec![0.0],
            states: vec![x0.to_vec()],
            impact_flags: vec![false],
            events: Vec::new(),
        };
        let mut t = 0.0;
        let mut x = x0.to_vec();
        let t_end = horizon;

        loop {
            let mut crossed: Option<(f64, Vec<f64>, f64, Vec<f64>)> = None;
            let mut prev_t = t;
            let mut prev_x = x.clone();
            let mut xw = x.clone();
            let reached = self.integrator.propagate(
                &rhs,
                t,
                &mut xw,
                t_end,
                |tn, xn| {
                    let mut keep_going = true;
                    if let Some(dep) = &self.departure {
                        let r_prev = dep.residual(&prev_x);
                        let r_new = dep.residual(xn);
                        let fired = if self.crossing_sign < 0.0 {
                            r_prev > 0.0 && r_new <= 0.0
                        } else {
                            r_prev < 0.0 && r_new >= 0.0
                        };
                        if fired && self.dynamics.impact_armed(xn) {
                            crossed = Some((prev_t, prev_x.clone(), tn, xn.to_vec()));
                            keep_going = false;
                        }
                    }
                    if keep_going {
                        traj.times.push(tn);
                        traj.states.push(xn.to_vec());
                        traj.impact_flags.push(false);
                        prev_t = tn;
                        prev_x = xn.to_vec();
                    }
                    keep_going
                },
            )?;

            match crossed {
                None => {
                    let _ = reached;
                    break;
                }
                Some((ta, xa, tb, _xb)) => {
                    let dep = self.departure.as_ref().unwrap();
                    let (te, xe) = self.locate_event(&rhs, ta, &xa, tb, dep)?;
                    let post = self.impact_map(&xe)?;
                    if let Some(arr) = &self.arrival {
                        let ra = arr.residual(&post);
                        if ra.abs() > 1e-6 * (1.0 + arr.d.abs()) {
                            return Err(Error::Other(format!(
                                "impact image off the arrival surface, residual {ra:e}"
                            )));
                        }
                    }
                    traj.times.push(te);
                    traj.states.push(xe.clone());
                    traj.impact_flags.push(true);
                    traj.times.push(te);
                    traj.states.push(post.clone());
                    traj.impact_flags.push(false);
                    traj.events.push(ImpactEvent {
                        t: te,
                        pre: xe,
                        post: post.clone(),
                    });
                    t = te;
                    x = post;
                    if t >= t_end {
                        break;
                    }
                }
            }
        }
        Ok(traj)
    }

    /// Integrates from `x0` up to the first impact and returns the impact
    /// time together with the pre- and post-impact states.
    pub fn step_to_impact(
        &self,
        x0: &[f64],
        controller: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
        max_time: f64,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let dep = self.departure.as_ref().ok_or_else(|| {
            Error::Other("impact stepping requested for a smooth system".into())
        })?;
        let zero_u = vec![0.0; self.input_dim()];
        let rhs = |_t: f64, x: &[f64], dx: &mut [f64]| {
            let u = match controller {
                Some(g) => g(x),
                None => zero_u.clone(),
            };
            let f = self.dynamics.eval(x, &u);
            dx.copy_from_slice(&f);
        };
        let mut prev_t = 0.0;
        let mut prev_x = x0.to_vec();
        let mut crossed: Option<(f64, Vec<f64>, f64)> = None;
        let mut xw = x0.to_vec();
        self.integrator.propagate(&rhs, 0.0, &mut xw, max_time, |tn, xn| {
            let r_prev = dep.residual(&prev_x);
            let r_new = dep.residual(xn);
            let fired = if self.crossing_sign < 0.0 {
                r_prev > 0.0 && r_new <= 0.0
            } else {
                r_prev < 0.0 && r_new >= 0.0
            };
            if fired && self.dynamics.impact_armed(xn) {
                crossed = Some((prev_t, prev_x.clone(), tn));
                return false;
            }
            prev_t = tn;
            prev_x = xn.to_vec();
            true
        })?;
        let Some((ta, xa, tb)) = crossed else {
            return Err(Error::Integration {
                t: max_time,
                reason: "no impact before the time limit".into(),
            });
        };
        let (te, xe) = self.locate_event(&rhs, ta, &xa, tb, dep)?;
        let post = self.impact_map(&xe)?;
        Ok((te, xe, post))
    }

    /// Bisection/secant localization of the surface crossing inside the
    /// bracketing step; every residual evaluation re-integrates from the step
    /// start so the returned state is a true trajectory point.
    fn locate_event<F>(
        &self,
        rhs: &F,
        ta: f64,
        xa: &[f64],
        tb: f64,
        dep: &SwitchingSurface,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: Fn(f64, &[f64], &mut [f64]),
    {
        let tol = EVENT_TOL * (1.0 + dep.d.abs());
        let mut lo = ta;
        let mut hi = tb;
        let mut r_lo = dep.residual(xa);
        let eval = |tc: f64| -> Result<(f64, Vec<f64>)> {
            let xc = if tc == ta {
                xa.to_vec()
            } else {
                self.integrator.integrate_to(rhs, ta, xa, tc)?
            };
            Ok((dep.residual(&xc), xc))
        };
        let (r_hi0, mut best_x) = eval(hi)?;
        let mut r_hi = r_hi0;
        if r_lo.abs() <= tol {
            return Ok((ta, xa.to_vec()));
        }
        for _ in 0..200 {
            // secant proposal, safeguarded by the bracket
            let mut tc = hi - r_hi * (hi - lo) / (r_hi - r_lo);
            if !(tc > lo && tc < hi) || !tc.is_finite() {
                tc = 0.5 * (lo + hi);
            }
            let (rc, xc) = eval(tc)?;
            if rc.abs() <= tol {
                return Ok((tc, xc));
            }
            if (rc > 0.0) == (r_lo > 0.0) {
                lo = tc;
                r_lo = rc;
            } else {
                hi = tc;
                r_hi = rc;
                best_x = xc;
            }
            if hi - lo < 1e-16 * (1.0 + hi.abs()) {
                return Ok((hi, best_x));
            }
        }
        Err(Error::Integration {
            t: hi,
            reason: "impact localization did not converge".into(),
        })
    }
}

/// Constructs one of the built-in systems.
pub fn builtin(name: &str, params: Option<SystemParams>) -> Result<HybridSystem> {
    match name {
        "van-der-pol" => {
            let p = match params {
                Some(SystemParams::VanDerPol(p)) => p,
                None => VanDerPolParams::default(),
                _ => return Err(Error::InvalidParams("params do not match van-der-pol".into())),
            };
            Ok(HybridSystem {
                name: "van-der-pol".into(),
                dynamics: Dynamics::VanDerPol(p),
                departure: None,
                arrival: None,
                crossing_sign: 0.0,
                integrator: Integrator::default(),
            })
        }
        "rimless-wheel" => {
            let p = match params {
                Some(SystemParams::RimlessWheel(p)) => p,
                None => RimlessWheelParams::default(),
                _ => return Err(Error::InvalidParams("params do not match rimless-wheel".into())),
            };
            if p.alpha <= 0.0 || p.alpha >= std::f64::consts::FRAC_PI_2 {
                return Err(Error::InvalidParams("rimless wheel alpha out of range".into()));
            }
            // swing spoke touches ground at theta = gamma + alpha; the new
            // spoke starts at theta = gamma - alpha. Surfaces are vertical.
            let departure = SwitchingSurface::new(vec![1.0, 0.0], p.gamma + p.alpha)?;
            let arrival = SwitchingSurface::new(vec![1.0, 0.0], p.gamma - p.alpha)?;
            Ok(HybridSystem {
                name: "rimless-wheel".into(),
                dynamics: Dynamics::RimlessWheel(p),
                departure: Some(departure),
                arrival: Some(arrival),
                crossing_sign: 1.0,
                integrator: Integrator::default(),
            })
        }
        "compass-gait" => {
            let p = match params {
                Some(SystemParams::CompassGait(p)) => p,
                None => CompassGaitParams::default(),
                _ => return Err(Error::InvalidParams("params do not match compass-gait".into())),
            };
            p.validate()?;
            // impact when theta_sw + theta_st + 2 gamma = 0; the relabeling
            // preserves the angle sum, so arrival and departure coincide.
            let surface = SwitchingSurface::new(vec![1.0, 1.0, 0.0, 0.0], -2.0 * p.gamma)?;
            Ok(HybridSystem {
                name: "compass-gait".into(),
                dynamics: Dynamics::CompassGait(p),
                departure: Some(surface.clone()),
                arrival: Some(surface),
                crossing_sign: -1.0,
                integrator: Integrator::default(),
            })
        }
        other => Err(Error::UnknownSystem(other.into())),
    }
}

/// Parses the `key = value` / `[section]` parameter file format and builds
/// the requested system's parameters.
pub fn params_from_config(text: &str, system: &str) -> Result<SystemParams> {
    let mut section = String::new();
    let mut kv: std::collections::BTreeMap<String, f64> = Default::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidParams(format!(
                "config line {} is not `key = value`",
                lineno + 1
            )));
        };
        if section == system {
            let value: f64 = v.trim().parse().map_err(|_| {
                Error::InvalidParams(format!("config line {}: bad number", lineno + 1))
            })?;
            kv.insert(k.trim().to_string(), value);
        }
    }
    let get = |k: &str, default: f64| kv.get(k).copied().unwrap_or(default);
    match system {
        "van-der-pol" => Ok(SystemParams::VanDerPol(VanDerPolParams { mu: get("mu", 1.0) })),
        "rimless-wheel" => {
            let d = RimlessWheelParams::default();
            Ok(SystemParams::RimlessWheel(RimlessWheelParams {
                alpha: get("alpha", d.alpha),
                gamma: get("gamma", d.gamma),
            }))
        }
        "compass-gait" => {
            let d = CompassGaitParams::default();
            Ok(SystemParams::CompassGait(CompassGaitParams {
                m: get("m", d.m),
                m_h: get("m_h", d.m_h),
                a: get("a", d.a),
                b: get("b", d.b),
                g: get("g", d.g),
                gamma: get("gamma", d.gamma),
            }))
        }
        other => Err(Error::UnknownSystem(other.into())),
    }
}
