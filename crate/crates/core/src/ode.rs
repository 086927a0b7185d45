//! Adaptive Dormand-Prince 5(4) integration.
//!
//! Certificate audits need trajectories trusted to more digits than the
//! verification margin, so the defaults are tight (rtol 1e-9, atol 1e-11).

use crate::{Error, Result};

// Dormand-Prince coefficients.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand-Prince 5(4) integrator.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator {
            rtol: 1e-9,
            atol: 1e-11,
            max_steps: 50_000_000,
        }
    }
}

impl Integrator {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Integrator {
            rtol,
            atol,
            ..Default::default()
        }
    }

    /// Integrates from `t0` to `t1` (either direction) and returns x(t1).
    pub fn integrate_to<F>(&self, f: &F, t0: f64, x0: &[f64], t1: f64) -> Result<Vec<f64>>
    where
        F: Fn(f64, &[f64], &mut [f64]),
    {
        let mut x = x0.to_vec();
        self.propagate(f, t0, &mut x, t1, |_, _| true)?;
        Ok(x)
    }

    /// Integrates from `t0` to `t1`, invoking `observer(t, x)` after every
    /// accepted step. Returning `false` from the observer stops integration;
    /// `x` then holds the state at the last accepted step.
    pub fn propagate<F, O>(
        &self,
        f: &F,
        t0: f64,
        x: &mut Vec<f64>,
        t1: f64,
        mut observer: O,
    ) -> Result<f64>
    where
        F: Fn(f64, &[f64], &mut [f64]),
        O: FnMut(f64, &[f64]) -> bool,
    {
        let n = x.len();
        let dir = if t1 >= t0 { 1.0 } else { -1.0 };
        if (t1 - t0).abs() == 0.0 {
            return Ok(t0);
        }
        let mut t = t0;
        let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
        let mut xs = vec![0.0; n];
        let mut x5 = vec![0.0; n];
        f(t, x, &mut k[0]);
        let mut h = self.initial_step(f, t, x, &k[0], dir);
        let mut steps = 0usize;
        loop {
            if steps >= self.max_steps {
                return Err(Error::Integration {
                    t,
                    reason: "step budget exhausted".into(),
                });
            }
            steps += 1;
            if (t1 - t) * dir <= 0.0 {
                return Ok(t);
            }
            if h.abs() > (t1 - t).abs() {
                h = t1 - t;
            }
            if h.abs() < 1e-14 * (1.0 + t.abs()) {
                return Err(Error::Integration {
                    t,
                    reason: "step size collapsed".into(),
                });
            }
            // stages
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, kj) in k.iter().enumerate().take(s) {
                        let a = A[s][j];
                        if a != 0.0 {
                            acc += a * kj[i];
                        }
                    }
                    xs[i] = x[i] + h * acc;
                }
                let (head, tail) = k.split_at_mut(s);
                let _ = head;
                f(t + C[s] * h, &xs, &mut tail[0]);
            }
            // 5th order solution and error estimate
            let mut err: f64 = 0.0;
            for i in 0..n {
                let mut v5 = 0.0;
                let mut v4 = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    v5 += B5[j] * kj[i];
                    v4 += B4[j] * kj[i];
                }
                x5[i] = x[i] + h * v5;
                let sc = self.atol + self.rtol * x[i].abs().max(x5[i].abs());
                let e = h * (v5 - v4) / sc;
                err += e * e;
            }
            err = (err / n as f64).sqrt();
            if err <= 1.0 {
                t += h;
                x.copy_from_slice(&x5);
                // FSAL
                k.swap(0, 6);
                if !observer(t, x) {
                    return Ok(t);
                }
                let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
                h *= fac;
            } else {
                let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                h *= fac;
                // recompute k0 is unnecessary (state unchanged), but FSAL slot
                // was not swapped so k[0] still holds f(t, x).
            }
            if !x5.iter().all(|v| v.is_finite()) || !err.is_finite() {
                return Err(Error::Integration {
                    t,
                    reason: "non-finite state".into(),
                });
            }
        }
    }

    fn initial_step<F>(&self, f: &F, t: f64, x: &[f64], dx: &[f64], dir: f64) -> f64
    where
        F: Fn(f64, &[f64], &mut [f64]),
    {
        let n = x.len();
        let d0: f64 = (x
            .iter()
            .map(|v| {
                let sc = self.atol + self.rtol * v.abs();
                (v / sc).powi(2)
            })
            .sum::<f64>()
            / n as f64)
            .sqrt();
        let d1: f64 = (x
            .iter()
            .zip(dx)
            .map(|(v, d)| {
                let sc = self.atol + self.rtol * v.abs();
                (d / sc).powi(2)
            })
            .sum::<f64>()
            / n as f64)
            .sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        // one explicit Euler probe to bound the second derivative
        let mut x1 = vec![0.0; n];
        let mut dx1 = vec![0.0; n];
        for i in 0..n {
            x1[i] = x[i] + dir * h0 * dx[i];
        }
        f(t + dir * h0, &x1, &mut dx1);
        let d2: f64 = (x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let sc = self.atol + self.rtol * v.abs();
                ((dx1[i] - dx[i]) / sc).powi(2)
            })
            .sum::<f64>()
            / n as f64)
            .sqrt()
            / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        dir * h1.min(100.0 * h0)
    }
}
