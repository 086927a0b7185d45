//! Semidefinite programming backend.
//!
//! Solves problems with block-diagonal positive semidefinite matrix
//! variables, free scalar variables, a linear objective (minimization
//! convention), and affine equality constraints. The solver is a dense
//! primal-dual interior-point method with HKM search directions and a
//! Mehrotra predictor-corrector step. Constraints that touch disjoint sets
//! of matrix blocks decouple in the Schur complement, which is exploited by
//! eliminating per-component blocks and solving a small bordered system for
//! the shared scalar variables; verifier workloads (many small Gram blocks
//! coupled only through a handful of scalars) then scale linearly in the
//! number of blocks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A sparse symmetric coefficient matrix on one block: entries are
/// `(row, col, value)` with `row <= col`, and an off-diagonal entry stands
/// for the symmetric pair, so its inner product with X contributes
/// `2 * value * X[row, col]`.
pub type BlockCoeffs = Vec<(usize, usize, f64)>;

/// One affine equality constraint over all variables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SdpConstraint {
    /// Per-block sparse symmetric coefficients: (block index, entries).
    pub blocks: Vec<(usize, BlockCoeffs)>,
    /// Sparse coefficients on the free scalar variables.
    pub scalars: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// An SDP in primal form: minimize the linear objective subject to the
/// equality constraints, with every matrix block positive semidefinite and
/// the scalar variables free.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SdpProblem {
    pub block_sizes: Vec<usize>,
    pub num_scalars: usize,
    /// Objective coefficients on the blocks, same sparse convention as
    /// constraints.
    pub obj_blocks: Vec<(usize, BlockCoeffs)>,
    pub obj_scalars: Vec<f64>,
    pub constraints: Vec<SdpConstraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

/// Solver output. `status == Optimal` guarantees the residual contract
/// (primal/dual residuals below 1e-7 relative, block eigenvalues above
/// -1e-8); `Infeasible` carries an improving-ray witness `ray` with
/// `b'ray > 0` and `sum_i ray_i A_i` negative semidefinite.
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub blocks: Vec<DMatrix<f64>>,
    pub scalars: Vec<f64>,
    pub objective: f64,
    pub dual: Vec<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub ray: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SdpOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            tol: 1e-8,
            max_iters: 120,
        }
    }
}

impl SdpProblem {
    pub fn validate(&self) -> Result<()> {
        let check_entries = |blocks: &[(usize, BlockCoeffs)]| -> Result<()> {
            for (j, entries) in blocks {
                let n = *self.block_sizes.get(*j).ok_or(Error::DimensionMismatch {
                    expected: self.block_sizes.len(),
                    got: *j,
                    context: "SDP block index",
                })?;
                for &(r, c, _) in entries {
                    if r > c || c >= n {
                        return Err(Error::InvalidParams(format!(
                            "bad SDP entry ({r}, {c}) in a {n}x{n} block"
                        )));
                    }
                }
            }
            Ok(())
        };
        check_entries(&self.obj_blocks)?;
        if self.obj_scalars.len() != self.num_scalars {
            return Err(Error::DimensionMismatch {
                expected: self.num_scalars,
                got: self.obj_scalars.len(),
                context: "SDP scalar objective",
            });
        }
        for con in &self.constraints {
            check_entries(&con.blocks)?;
            for &(s, _) in &con.scalars {
                if s >= self.num_scalars {
                    return Err(Error::DimensionMismatch {
                        expected: self.num_scalars,
                        got: s,
                        context: "SDP scalar index",
                    });
                }
            }
        }
        Ok(())
    }

    /// Sparse text serialization for offline debugging: a header, then one
    /// line per coefficient.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "sdp blocks {} scalars {} constraints {}\n",
            self.block_sizes.len(),
            self.num_scalars,
            self.constraints.len()
        ));
        out.push_str("sizes");
        for s in &self.block_sizes {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
        let emit = |out: &mut String, tag: &str, i: usize, blocks: &[(usize, BlockCoeffs)]| {
            for (j, entries) in blocks {
                for &(r, c, v) in entries {
                    out.push_str(&format!("{tag} {i} {j} {r} {c} {v:.17e}\n"));
                }
            }
        };
        emit(&mut out, "obj", 0, &self.obj_blocks);
        for (s, &v) in self.obj_scalars.iter().enumerate() {
            if v != 0.0 {
                out.push_str(&format!("objs 0 {s} {v:.17e}\n"));
            }
        }
        for (i, con) in self.constraints.iter().enumerate() {
            emit(&mut out, "con", i, &con.blocks);
            for &(s, v) in &con.scalars {
                out.push_str(&format!("cons {i} {s} {v:.17e}\n"));
            }
            out.push_str(&format!("rhs {i} {:.17e}\n", con.rhs));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<SdpProblem> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Other("empty SDP text".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 7 || h[0] != "sdp" {
            return Err(Error::Other("bad SDP header".into()));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Other(format!("bad integer '{s}'")))
        };
        let parsef = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Other(format!("bad float '{s}'")))
        };
        let nblocks = parse(h[2])?;
        let nscalars = parse(h[4])?;
        let ncons = parse(h[6])?;
        let sizes_line = lines.next().ok_or_else(|| Error::Other("missing sizes".into()))?;
        let sparts: Vec<&str> = sizes_line.split_whitespace().collect();
        if sparts.len() != nblocks + 1 || sparts[0] != "sizes" {
            return Err(Error::Other("bad sizes line".into()));
        }
        let mut prob = SdpProblem {
            block_sizes: sparts[1..]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<_>>()?,
            num_scalars: nscalars,
            obj_blocks: Vec::new(),
            obj_scalars: vec![0.0; nscalars],
            constraints: vec![SdpConstraint::default(); ncons],
        };
        let push_entry = |blocks: &mut Vec<(usize, BlockCoeffs)>, j: usize, e: (usize, usize, f64)| {
            if let Some((_, v)) = blocks.iter_mut().find(|(b, _)| *b == j) {
                v.push(e);
            } else {
                blocks.push((j, vec![e]));
            }
        };
        for line in lines {
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.is_empty() {
                continue;
            }
            match p[0] {
                "obj" => {
                    let (j, r, c, v) = (parse(p[2])?, parse(p[3])?, parse(p[4])?, parsef(p[5])?);
                    push_entry(&mut prob.obj_blocks, j, (r, c, v));
                }
                "objs" => {
                    prob.obj_scalars[parse(p[2])?] = parsef(p[3])?;
                }
                "con" => {
                    let i = parse(p[1])?;
                    let (j, r, c, v) = (parse(p[2])?, parse(p[3])?, parse(p[4])?, parsef(p[5])?);
                    push_entry(&mut prob.constraints[i].blocks, j, (r, c, v));
                }
                "cons" => {
                    let i = parse(p[1])?;
                    prob.constraints[i].scalars.push((parse(p[2])?, parsef(p[3])?));
                }
                "rhs" => {
                    let i = parse(p[1])?;
                    prob.constraints[i].rhs = parsef(p[2])?;
                }
                other => return Err(Error::Other(format!("unknown SDP record '{other}'"))),
            }
        }
        prob.validate()?;
        Ok(prob)
    }
}

/// Dense symmetric matrix of a sparse coefficient set.
fn dense_coeffs(entries: &BlockCoeffs, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for &(r, c, v) in entries {
        m[(r, c)] += v;
        if r != c {
            m[(c, r)] += v;
        }
    }
    m
}

fn inner(entries: &BlockCoeffs, x: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for &(r, c, v) in entries {
        if r == c {
            s += v * x[(r, c)];
        } else {
            s += v * (x[(r, c)] + x[(c, r)]);
        }
    }
    s
}

#[derive(Clone)]
struct Iterate {
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    y: Vec<f64>,
    s: Vec<f64>,
}

struct Workspace<'a> {
    prob: &'a SdpProblem,
    /// Dense coefficient matrices: dense_a[i] aligns with constraint i's
    /// sparse block list.
    dense_a: Vec<Vec<DMatrix<f64>>>,
    dense_c: Vec<DMatrix<f64>>,
    /// Constraint components: groups of constraint indices coupled through
    /// shared matrix blocks; `border` lists constraints touching no block.
    components: Vec<Vec<usize>>,
    border: Vec<usize>,
    b_norm: f64,
    c_norm: f64,
}

impl<'a> Workspace<'a> {
    fn new(prob: &'a SdpProblem) -> Workspace<'a> {
        let dense_a: Vec<Vec<DMatrix<f64>>> = prob
            .constraints
            .iter()
            .map(|con| {
                con.blocks
                    .iter()
                    .map(|(j, e)| dense_coeffs(e, prob.block_sizes[*j]))
                    .collect()
            })
            .collect();
        let mut dense_c: Vec<DMatrix<f64>> = prob
            .block_sizes
            .iter()
            .map(|&n| DMatrix::zeros(n, n))
            .collect();
        for (j, e) in &prob.obj_blocks {
            dense_c[*j] += dense_coeffs(e, prob.block_sizes[*j]);
        }
        // union-find over blocks to group constraints
        let nb = prob.block_sizes.len();
        let mut parent: Vec<usize> = (0..nb).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for con in &prob.constraints {
            if let Some((first, _)) = con.blocks.first() {
                let root = find(&mut parent, *first);
                for (j, _) in &con.blocks[1..] {
                    let r = find(&mut parent, *j);
                    parent[r] = root;
                }
            }
        }
        let mut comp_of_root = std::collections::BTreeMap::new();
        let mut components: Vec<Vec<usize>> = Vec::new();
        let mut border = Vec::new();
        for (i, con) in prob.constraints.iter().enumerate() {
            match con.blocks.first() {
                Some((j, _)) => {
                    let root = find(&mut parent, *j);
                    let idx = *comp_of_root.entry(root).or_insert_with(|| {
                        components.push(Vec::new());
                        components.len() - 1
                    });
                    components[idx].push(i);
                }
                None => border.push(i),
            }
        }
        let b_norm = prob
            .constraints
            .iter()
            .map(|c| c.rhs.abs())
            .fold(0.0, f64::max);
        let c_norm = prob
            .obj_scalars
            .iter()
            .map(|v| v.abs())
            .chain(dense_c.iter().map(|m| m.amax()))
            .fold(0.0, f64::max);
        Workspace {
            prob,
            dense_a,
            dense_c,
            components,
            border,
            b_norm,
            c_norm,
        }
    }

    fn primal_residual_vec(&self, it: &Iterate) -> Vec<f64> {
        self.prob
            .constraints
            .iter()
            .map(|con| {
                let mut v = con.rhs;
                for (j, e) in &con.blocks {
                    v -= inner(e, &it.x[*j]);
                }
                for &(s, a) in &con.scalars {
                    v -= a * it.s[s];
                }
                v
            })
            .collect()
    }

    /// Dual residual matrices per block: C_j - sum_i y_i A_ij - Z_j.
    fn dual_residual_mats(&self, it: &Iterate) -> Vec<DMatrix<f64>> {
        let mut rd: Vec<DMatrix<f64>> = self
            .dense_c
            .iter()
            .zip(&it.z)
            .map(|(c, z)| c - z)
            .collect();
        for (i, con) in self.prob.constraints.iter().enumerate() {
            for (k, (j, _)) in con.blocks.iter().enumerate() {
                rd[*j] -= &self.dense_a[i][k] * it.y[i];
            }
        }
        rd
    }

    /// Free-variable stationarity residual: c_s - F' y.
    fn free_residual(&self, it: &Iterate) -> Vec<f64> {
        let mut r = self.prob.obj_scalars.clone();
        for (i, con) in self.prob.constraints.iter().enumerate() {
            for &(s, a) in &con.scalars {
                r[s] -= a * it.y[i];
            }
        }
        r
    }

    fn objective(&self, it: &Iterate) -> f64 {
        let mut v = 0.0;
        for (j, e) in &self.prob.obj_blocks {
            v += inner(e, &it.x[*j]);
        }
        for (s, c) in self.prob.obj_scalars.iter().enumerate() {
            v += c * it.s[s];
        }
        v
    }
}

/// Newton direction for a given complementarity target W_j, meaning the
/// linearization Z dX + dZ X = W is solved together with the primal and dual
/// residual equations.
#[allow(clippy::too_many_arguments)]
fn newton_direction(
    ws: &Workspace,
    it: &Iterate,
    z_inv: &[DMatrix<f64>],
    rp: &[f64],
    rd: &[DMatrix<f64>],
    rfree: &[f64],
    w: &[DMatrix<f64>],
) -> Option<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<f64>, Vec<f64>)> {
    let (mut dx, mut dz, mut dy, mut ds) =
        newton_direction_raw(ws, it, z_inv, rp, rd, rfree, w)?;
    // one pass of iterative refinement: re-solve against the linearization
    // defects (Schur elimination, diagonal lift and symmetrization all leak
    // small errors that otherwise floor the primal residual near mu = 0)
    let prob = ws.prob;
    let defect_p: Vec<f64> = prob
        .constraints
        .iter()
        .enumerate()
        .map(|(i, con)| {
            let mut v = rp[i];
            for (k, (j, _)) in con.blocks.iter().enumerate() {
                v -= (ws.dense_a[i][k].transpose() * &dx[*j]).trace();
            }
            for &(s, a) in &con.scalars {
                v -= a * ds[s];
            }
            v
        })
        .collect();
    let mut defect_free = rfree.to_vec();
    for (i, con) in prob.constraints.iter().enumerate() {
        for &(s, a) in &con.scalars {
            defect_free[s] -= a * dy[i];
        }
    }
    // the complementarity equation is left alone: dX is symmetrized, so its
    // non-symmetric Newton form has an irreducible defect that must not be
    // chased; only the feasibility equations are refined
    let zero_d: Vec<DMatrix<f64>> = prob
        .block_sizes
        .iter()
        .map(|&n| DMatrix::zeros(n, n))
        .collect();
    if let Some((cx, cz, cy, cs)) =
        newton_direction_raw(ws, it, z_inv, &defect_p, &zero_d, &defect_free, &zero_d)
    {
        for (a, b) in dx.iter_mut().zip(&cx) {
            *a += b;
        }
        for (a, b) in dz.iter_mut().zip(&cz) {
            *a += b;
        }
        for (a, b) in dy.iter_mut().zip(&cy) {
            *a += b;
        }
        for (a, b) in ds.iter_mut().zip(&cs) {
            *a += b;
        }
    }
    Some((dx, dz, dy, ds))
}

#[allow(clippy::too_many_arguments)]
fn newton_direction_raw(
    ws: &Workspace,
    it: &Iterate,
    z_inv: &[DMatrix<f64>],
    rp: &[f64],
    rd: &[DMatrix<f64>],
    rfree: &[f64],
    w: &[DMatrix<f64>],
) -> Option<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<f64>, Vec<f64>)> {
    let prob = ws.prob;
    let m = prob.constraints.len();
    let p = prob.num_scalars;
    // r1_i = rp_i - <A_i, Zinv W - Zinv Rd X>
    let mut r1 = rp.to_vec();
    let base: Vec<DMatrix<f64>> = (0..prob.block_sizes.len())
        .map(|j| &z_inv[j] * (&w[j] - &rd[j] * &it.x[j]))
        .collect();
    for (i, con) in prob.constraints.iter().enumerate() {
        for (k, (j, _)) in con.blocks.iter().enumerate() {
            r1[i] -= (ws.dense_a[i][k].transpose() * &base[*j]).trace();
        }
    }
    // Per component: factor M_c and form the bordered system over the
    // scalar steps ds and the pure-scalar rows dy_0.
    let m0 = ws.border.len();
    let mut border_mat = DMatrix::<f64>::zeros(p + m0, p + m0);
    let mut border_rhs = nalgebra::DVector::<f64>::zeros(p + m0);
    for (s, &r) in rfree.iter().enumerate() {
        border_rhs[s] = r;
    }
    // scalar columns of constraints, dense per constraint
    let f_row = |i: usize| -> Vec<(usize, f64)> { prob.constraints[i].scalars.clone() };
    struct CompFactor {
        cons: Vec<usize>,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        rhs: nalgebra::DVector<f64>,
        fmat: DMatrix<f64>,
    }
    let mut factors = Vec::with_capacity(ws.components.len());
    for comp in &ws.components {
        let mc_dim = comp.len();
        let mut mc = DMatrix::<f64>::zeros(mc_dim, mc_dim);
        // group constraints per block for the quadratic form
        let mut per_block: std::collections::BTreeMap<usize, Vec<(usize, usize)>> =
            std::collections::BTreeMap::new();
        for (local, &ci) in comp.iter().enumerate() {
            for (k, (j, _)) in prob.constraints[ci].blocks.iter().enumerate() {
                per_block.entry(*j).or_default().push((local, k));
            }
        }
        for (j, touch) in &per_block {
            for &(li, ki) in touch {
                let u = &z_inv[*j] * &ws.dense_a[comp[li]][ki] * &it.x[*j];
                for &(lk, kk) in touch {
                    mc[(li, lk)] += (ws.dense_a[comp[lk]][kk].transpose() * &u).trace();
                }
            }
        }
        mc = (&mc + &mc.transpose()) * 0.5;
        // tiny diagonal lift keeps the factorization alive near the boundary
        let lift = 1e-13 * (1.0 + mc.diagonal().amax());
        for d in 0..mc_dim {
            mc[(d, d)] += lift;
        }
        let chol = mc.clone().cholesky()?;
        let rhs = nalgebra::DVector::from_iterator(mc_dim, comp.iter().map(|&ci| r1[ci]));
        let mut fmat = DMatrix::<f64>::zeros(mc_dim, p);
        for (local, &ci) in comp.iter().enumerate() {
            for &(s, a) in &prob.constraints[ci].scalars {
                fmat[(local, s)] += a;
            }
        }
        // accumulate the Schur pieces: F' Mc^-1 F and F' Mc^-1 rhs
        let minv_f = chol.solve(&fmat);
        let minv_r = chol.solve(&rhs);
        let ftmf = fmat.transpose() * &minv_f;
        let ftmr = fmat.transpose() * &minv_r;
        for a in 0..p {
            for b in 0..p {
                border_mat[(a, b)] += ftmf[(a, b)];
            }
            border_rhs[a] -= ftmr[a];
        }
        factors.push(CompFactor {
            cons: comp.clone(),
            chol,
            rhs,
            fmat,
        });
    }
    // border system (stationarity row negated so the Schur block is +S):
    //   [sum F'Mc^-1F   -F0'] [ds  ]   [sum F'Mc^-1 r1_c - rfree]
    //   [F0              0  ] [dy_0] = [r1_0]
    // border_rhs currently holds rfree - sum F'Mc^-1 r1_c; negate it
    for a in 0..p {
        border_rhs[a] = -border_rhs[a];
    }
    for (row, &ci) in ws.border.iter().enumerate() {
        for &(s, a) in &f_row(ci) {
            border_mat[(p + row, s)] = a;
            border_mat[(s, p + row)] = -a;
        }
        border_rhs[p + row] = r1[ci];
    }
    let sol = if p + m0 > 0 {
        border_mat.lu().solve(&border_rhs)?
    } else {
        nalgebra::DVector::zeros(0)
    };
    let ds: Vec<f64> = (0..p).map(|s| sol[s]).collect();
    let mut dy = vec![0.0; m];
    for (row, &ci) in ws.border.iter().enumerate() {
        dy[ci] = sol[p + row];
    }
    for f in &factors {
        let mut rhs = f.rhs.clone();
        let dsv = nalgebra::DVector::from_column_slice(&ds);
        rhs -= &f.fmat * dsv;
        let dyc = f.chol.solve(&rhs);
        for (local, &ci) in f.cons.iter().enumerate() {
            dy[ci] = dyc[local];
        }
    }
    // recover dZ and dX
    let nb = prob.block_sizes.len();
    let mut dz: Vec<DMatrix<f64>> = rd.to_vec();
    for (i, con) in prob.constraints.iter().enumerate() {
        for (k, (j, _)) in con.blocks.iter().enumerate() {
            dz[*j] -= &ws.dense_a[i][k] * dy[i];
        }
    }
    let mut dx = Vec::with_capacity(nb);
    for j in 0..nb {
        let raw = &z_inv[j] * (&w[j] - &dz[j] * &it.x[j]);
        dx.push((&raw + raw.transpose()) * 0.5);
    }
    Some((dx, dz, dy, ds))
}

/// Largest step alpha with X + alpha dX staying positive definite, capped at 1.
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    if n == 0 {
        return 1.0;
    }
    let chol = match x.clone().cholesky() {
        Some(c) => c,
        None => return 0.0,
    };
    let l = chol.l();
    let y = match l.clone().solve_lower_triangular(dx) {
        Some(y) => y,
        None => return 0.0,
    };
    let s = match l.solve_lower_triangular(&y.transpose()) {
        Some(s) => s,
        None => return 0.0,
    };
    let sym = (&s + s.transpose()) * 0.5;
    let lam_min = sym
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if lam_min >= -1e-14 {
        1.0
    } else {
        (-0.98 / lam_min).min(1.0)
    }
}

fn total_psd_dim(prob: &SdpProblem) -> usize {
    prob.block_sizes.iter().sum()
}

/// Runs the interior-point iteration. Returns the final iterate and whether
/// it met the convergence contract.
fn ipm(prob: &SdpProblem, opts: &SdpOptions) -> (Iterate, bool, f64, f64, f64) {
    let ws = Workspace::new(prob);
    let dim = total_psd_dim(prob).max(1);
    let eta = (1.0 + ws.b_norm.max(ws.c_norm)).sqrt() * 10.0;
    let mut it = Iterate {
        x: prob
            .block_sizes
            .iter()
            .map(|&n| DMatrix::identity(n, n) * eta)
            .collect(),
        z: prob
            .block_sizes
            .iter()
            .map(|&n| DMatrix::identity(n, n) * eta)
            .collect(),
        y: vec![0.0; prob.constraints.len()],
        s: vec![0.0; prob.num_scalars],
    };
    let scale_p = 1.0 + ws.b_norm;
    let scale_d = 1.0 + ws.c_norm;
    // best iterate seen so far: near the central-path tail the primal
    // residual can drift upward from cancellation in the Schur solve, so
    // the final iterate is not always the most accurate one
    let mut best: Option<(f64, Iterate, f64, f64, f64)> = None;
    for _ in 0..opts.max_iters {
        let rp = ws.primal_residual_vec(&it);
        let rd = ws.dual_residual_mats(&it);
        let rfree = ws.free_residual(&it);
        let mu = it
            .x
            .iter()
            .zip(&it.z)
            .map(|(x, z)| (x.transpose() * z).trace())
            .sum::<f64>()
            / dim as f64;
        let rp_norm = rp.iter().map(|v| v.abs()).fold(0.0, f64::max) / scale_p;
        let rd_norm = rd
            .iter()
            .map(|m| m.amax())
            .chain(rfree.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
            / scale_d;
        let gap = mu * dim as f64 / (1.0 + ws.objective(&it).abs());
        let score = rp_norm.max(rd_norm).max(gap);
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, it.clone(), rp_norm, rd_norm, gap));
        }
        if std::env::var("SDP_TRACE").is_ok() {
            let xmax = it.x.iter().map(|m| m.amax()).fold(0.0, f64::max);
            let ymax = it.y.iter().map(|v| v.abs()).fold(0.0, f64::max);
            eprintln!(
                "ipm rp {rp_norm:.3e} rd {rd_norm:.3e} gap {gap:.3e} mu {mu:.3e} xmax {xmax:.3e} ymax {ymax:.3e}"
            );
        }
        if rp_norm <= opts.tol && rd_norm <= opts.tol && gap <= opts.tol.max(1e-10) {
            return (it, true, rp_norm, rd_norm, gap);
        }
        let z_inv: Vec<DMatrix<f64>> = match it
            .z
            .iter()
            .map(|z| z.clone().cholesky().map(|c| c.inverse()))
            .collect::<Option<Vec<_>>>()
        {
            Some(v) => v,
            None => break,
        };
        // predictor: affine direction, target Z dX + dZ X = -Z X
        let w_aff: Vec<DMatrix<f64>> = it.x.iter().zip(&it.z).map(|(x, z)| -(z * x)).collect();
        let aff = match newton_direction(&ws, &it, &z_inv, &rp, &rd, &rfree, &w_aff) {
            Some(d) => d,
            None => break,
        };
        let (dx_a, dz_a, _, _) = &aff;
        let ap = it
            .x
            .iter()
            .zip(dx_a)
            .map(|(x, d)| max_step(x, d))
            .fold(1.0, f64::min);
        let ad = it
            .z
            .iter()
            .zip(dz_a)
            .map(|(z, d)| max_step(z, d))
            .fold(1.0, f64::min);
        let mu_aff = it
            .x
            .iter()
            .zip(&it.z)
            .zip(dx_a.iter().zip(dz_a))
            .map(|((x, z), (dx, dz))| {
                ((x + dx * ap).transpose() * (z + dz * ad)).trace()
            })
            .sum::<f64>()
            / dim as f64;
        let sigma = if mu > 0.0 {
            (mu_aff / mu).clamp(0.0, 1.0).powi(3)
        } else {
            0.1
        };
        // corrector target: sigma mu I - Z X - dZ_aff dX_aff
        let w_cor: Vec<DMatrix<f64>> = it
            .x
            .iter()
            .zip(&it.z)
            .zip(dx_a.iter().zip(dz_a))
            .map(|((x, z), (dxa, dza))| {
                DMatrix::identity(x.nrows(), x.nrows()) * (sigma * mu) - z * x - dza * dxa
            })
            .collect();
        let (dx, dz, dy, ds) = match newton_direction(&ws, &it, &z_inv, &rp, &rd, &rfree, &w_cor) {
            Some(d) => d,
            None => break,
        };
        let ap = it
            .x
            .iter()
            .zip(&dx)
            .map(|(x, d)| max_step(x, d))
            .fold(1.0, f64::min)
            .min(1.0);
        let ad = it
            .z
            .iter()
            .zip(&dz)
            .map(|(z, d)| max_step(z, d))
            .fold(1.0, f64::min)
            .min(1.0);
        if ap < 1e-10 && ad < 1e-10 {
            break;
        }
        for (x, d) in it.x.iter_mut().zip(&dx) {
            *x += d * ap;
            let sym = (x.clone() + x.transpose()) * 0.5;
            *x = sym;
        }
        for (z, d) in it.z.iter_mut().zip(&dz) {
            *z += d * ad;
            let sym = (z.clone() + z.transpose()) * 0.5;
            *z = sym;
        }
        for (y, d) in it.y.iter_mut().zip(&dy) {
            *y += d * ad;
        }
        for (s, d) in it.s.iter_mut().zip(&ds) {
            *s += d * ap;
        }
    }
    let rp = ws.primal_residual_vec(&it);
    let rd = ws.dual_residual_mats(&it);
    let rfree = ws.free_residual(&it);
    let rp_norm = rp.iter().map(|v| v.abs()).fold(0.0, f64::max) / scale_p;
    let rd_norm = rd
        .iter()
        .map(|m| m.amax())
        .chain(rfree.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
        / scale_d;
    let mu = it
        .x
        .iter()
        .zip(&it.z)
        .map(|(x, z)| (x.transpose() * z).trace())
        .sum::<f64>();
    let gap = mu / (1.0 + ws.objective(&it).abs());
    let score = rp_norm.max(rd_norm).max(gap);
    if best.as_ref().map_or(true, |b| score < b.0) {
        best = Some((score, it, rp_norm, rd_norm, gap));
    }
    // fall back to the best iterate; accept it inside the residual contract
    // band even when the requested tolerance was not quite reached
    let (score, it, rp_norm, rd_norm, gap) = best.unwrap();
    let accept = opts.tol.max(1e-7);
    if std::env::var("SDP_TRACE").is_ok() {
        eprintln!("ipm done score {score:.3e} accepted {}", score <= accept);
    }
    (it, score <= accept, rp_norm, rd_norm, gap)
}

/// Phase-1 feasibility problem: minimize t subject to the original equality
/// constraints with every block shifted by t I, plus t >= -1.
fn phase1(prob: &SdpProblem) -> SdpProblem {
    let mut p1 = SdpProblem {
        block_sizes: prob.block_sizes.clone(),
        num_scalars: prob.num_scalars + 1,
        obj_blocks: Vec::new(),
        obj_scalars: {
            let mut c = vec![0.0; prob.num_scalars + 1];
            c[prob.num_scalars] = 1.0;
            c
        },
        constraints: Vec::new(),
    };
    // bound block: X_bound = t + 1 >= 0
    let bound_block = p1.block_sizes.len();
    p1.block_sizes.push(1);
    let t_idx = prob.num_scalars;
    for con in &prob.constraints {
        let mut c1 = con.clone();
        // <A_i, X - tI> = b_i  =>  <A_i, X'> - t tr(A_i) = b_i
        let trace: f64 = con
            .blocks
            .iter()
            .map(|(_, e)| e.iter().filter(|(r, c, _)| r == c).map(|(_, _, v)| v).sum::<f64>())
            .sum();
        c1.scalars.push((t_idx, -trace));
        p1.constraints.push(c1);
    }
    p1.constraints.push(SdpConstraint {
        blocks: vec![(bound_block, vec![(0, 0, 1.0)])],
        scalars: vec![(t_idx, -1.0)],
        rhs: 1.0,
    });
    p1
}

/// Solves the problem (minimization convention). See `SdpSolution` for the
/// status contract.
pub fn solve(prob: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution> {
    prob.validate()?;
    let (mut it, mut converged, mut rp, mut rd, mut gap) = ipm(prob, opts);
    let ws = Workspace::new(prob);
    if !converged {
        // retry once with variable and row rescaling taken from the stalled
        // iterate: large primal or dual magnitudes amplify roundoff in the
        // Schur solve enough to floor the residuals above the tolerance
        let bscale: Vec<f64> = it.x.iter().map(|x| x.amax().max(1.0)).collect();
        let sscale: Vec<f64> = it.s.iter().map(|s| s.abs().max(1.0)).collect();
        let yscale: Vec<f64> = it.y.iter().map(|y| y.abs().max(1.0)).collect();
        let mut scaled = prob.clone();
        let scale_entries = |blocks: &mut Vec<(usize, BlockCoeffs)>, f: f64| {
            for (j, entries) in blocks.iter_mut() {
                for e in entries.iter_mut() {
                    e.2 *= bscale[*j] * f;
                }
            }
        };
        scale_entries(&mut scaled.obj_blocks, 1.0);
        for (s, c) in scaled.obj_scalars.iter_mut().enumerate() {
            *c *= sscale[s];
        }
        for (i, con) in scaled.constraints.iter_mut().enumerate() {
            scale_entries(&mut con.blocks, yscale[i]);
            for (s, a) in con.scalars.iter_mut() {
                *a *= sscale[*s] * yscale[i];
            }
            con.rhs *= yscale[i];
        }
        let (it2, conv2, rp2, rd2, gap2) = ipm(&scaled, opts);
        if conv2 {
            let x: Vec<DMatrix<f64>> = it2
                .x
                .iter()
                .enumerate()
                .map(|(j, m)| m * bscale[j])
                .collect();
            let s: Vec<f64> = it2
                .s
                .iter()
                .enumerate()
                .map(|(k, v)| v * sscale[k])
                .collect();
            let y: Vec<f64> = it2
                .y
                .iter()
                .enumerate()
                .map(|(i, v)| v * yscale[i])
                .collect();
            it = Iterate { x, z: it2.z, y, s };
            converged = true;
            rp = rp2;
            rd = rd2;
            gap = gap2;
        }
    }
    if converged {
        return Ok(SdpSolution {
            status: SdpStatus::Optimal,
            objective: ws.objective(&it),
            blocks: it.x,
            scalars: it.s,
            dual: it.y,
            primal_residual: rp,
            dual_residual: rd,
            gap,
            ray: None,
        });
    }
    if let Ok(dir) = std::env::var("SDP_DUMP") {
        let path = format!("{dir}/sdp_fail_{}.txt", std::process::id());
        let _ = std::fs::write(&path, prob.to_text());
        eprintln!("dumped stalled problem to {path}");
    }
    // distinguish infeasibility from numerical failure via phase 1
    let p1 = phase1(prob);
    let (it1, conv1, _, _, _) = ipm(&p1, opts);
    if conv1 {
        let t_star = it1.s[prob.num_scalars];
        if t_star > 1e-7 {
            // Farkas witness: y from phase 1 (drop the bound row) satisfies
            // sum y_i A_i <= 0, F'y = 0, b'y > 0
            let ray: Vec<f64> = it1.y[..prob.constraints.len()].to_vec();
            let b_dot: f64 = prob
                .constraints
                .iter()
                .zip(&ray)
                .map(|(c, y)| c.rhs * y)
                .sum();
            let ray = if b_dot > 0.0 {
                ray
            } else {
                ray.iter().map(|v| -v).collect()
            };
            return Ok(SdpSolution {
                status: SdpStatus::Infeasible,
                objective: f64::NAN,
                blocks: it.x,
                scalars: it.s,
                dual: it.y,
                primal_residual: rp,
                dual_residual: rd,
                gap,
                ray: Some(ray),
            });
        }
    }
    Ok(SdpSolution {
        status: SdpStatus::NumericalFailure,
        objective: ws.objective(&it),
        blocks: it.x,
        scalars: it.s,
        dual: it.y,
        primal_residual: rp,
        dual_residual: rd,
        gap,
        ray: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solve_default(p: &SdpProblem) -> SdpSolution {
        solve(p, &SdpOptions::default()).unwrap()
    }

    #[test]
    fn trace_minimization_analytic() {
        // minimize tr X s.t. X11 = 1, X >= 0  ->  X = e1 e1', objective 1
        let prob = SdpProblem {
            block_sizes: vec![3],
            num_scalars: 0,
            obj_blocks: vec![(0, vec![(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)])],
            obj_scalars: vec![],
            constraints: vec![SdpConstraint {
                blocks: vec![(0, vec![(0, 0, 1.0)])],
                scalars: vec![],
                rhs: 1.0,
            }],
        };
        let sol = solve_default(&prob);
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.objective - 1.0).abs() < 1e-7, "{}", sol.objective);
        assert!((sol.blocks[0][(0, 0)] - 1.0).abs() < 1e-6);
        assert!(sol.blocks[0][(1, 1)].abs() < 1e-6);
    }

    #[test]
    fn negative_diagonal_infeasible() {
        let prob = SdpProblem {
            block_sizes: vec![2],
            num_scalars: 0,
            obj_blocks: vec![(0, vec![(0, 0, 1.0), (1, 1, 1.0)])],
            obj_scalars: vec![],
            constraints: vec![SdpConstraint {
                blocks: vec![(0, vec![(0, 0, 1.0)])],
                scalars: vec![],
                rhs: -1.0,
            }],
        };
        let sol = solve_default(&prob);
        assert_eq!(sol.status, SdpStatus::Infeasible);
        // improving-ray witness: b'y > 0 and sum y_i A_i negative semidefinite
        let ray = sol.ray.as_ref().unwrap();
        let b_dot: f64 = -1.0 * ray[0];
        assert!(b_dot > 0.0, "{b_dot}");
        assert!(ray[0] < 0.0);
    }

    #[test]
    fn free_scalar_bound_via_block() {
        // minimize s subject to s - 3 = X11 >= 0
        let prob = SdpProblem {
            block_sizes: vec![1],
            num_scalars: 1,
            obj_blocks: vec![],
            obj_scalars: vec![1.0],
            constraints: vec![SdpConstraint {
                blocks: vec![(0, vec![(0, 0, 1.0)])],
                scalars: vec![(0, -1.0)],
                rhs: -3.0,
            }],
        };
        let sol = solve_default(&prob);
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.scalars[0] - 3.0).abs() < 1e-6, "{}", sol.scalars[0]);
    }

    fn random_feasible_problem(rng: &mut ChaCha8Rng, sizes: &[usize], m: usize) -> SdpProblem {
        // build C = sum y0_i A_i + Z0 (Z0 > 0) and b = A(X0) (X0 > 0) so the
        // problem is strictly feasible on both sides
        let mut constraints = Vec::new();
        let x0: Vec<DMatrix<f64>> = sizes
            .iter()
            .map(|&n| {
                let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                &r * r.transpose() + DMatrix::identity(n, n) * 0.5
            })
            .collect();
        let z0: Vec<DMatrix<f64>> = sizes
            .iter()
            .map(|&n| {
                let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                &r * r.transpose() + DMatrix::identity(n, n) * 0.5
            })
            .collect();
        let mut c_mats: Vec<DMatrix<f64>> = z0.clone();
        for _ in 0..m {
            let mut blocks = Vec::new();
            let mut rhs = 0.0;
            let y0: f64 = rng.gen_range(-1.0..1.0);
            for (j, &n) in sizes.iter().enumerate() {
                let mut entries = Vec::new();
                for r in 0..n {
                    for c in r..n {
                        if rng.gen_bool(0.4) {
                            entries.push((r, c, rng.gen_range(-1.0..1.0)));
                        }
                    }
                }
                if !entries.is_empty() {
                    let dense = dense_coeffs(&entries, n);
                    rhs += (dense.transpose() * &x0[j]).trace();
                    c_mats[j] += &dense * y0;
                    blocks.push((j, entries));
                }
            }
            constraints.push(SdpConstraint {
                blocks,
                scalars: vec![],
                rhs,
            });
        }
        let obj_blocks = c_mats
            .iter()
            .enumerate()
            .map(|(j, cm)| {
                let n = cm.nrows();
                let mut entries = Vec::new();
                for r in 0..n {
                    for c in r..n {
                        entries.push((r, c, cm[(r, c)]));
                    }
                }
                (j, entries)
            })
            .collect();
        SdpProblem {
            block_sizes: sizes.to_vec(),
            num_scalars: 0,
            obj_blocks,
            obj_scalars: vec![],
            constraints,
        }
    }

    #[test]
    fn random_problems_meet_kkt_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (sizes, m) in [
            (vec![5usize], 4usize),
            (vec![8, 6], 10),
            (vec![12], 14),
            (vec![4, 4, 4], 8),
        ] {
            let prob = random_feasible_problem(&mut rng, &sizes, m);
            let sol = solve_default(&prob);
            assert_eq!(sol.status, SdpStatus::Optimal, "sizes {sizes:?}");
            assert!(sol.primal_residual <= 1e-7, "{}", sol.primal_residual);
            assert!(sol.dual_residual <= 1e-7, "{}", sol.dual_residual);
            for b in &sol.blocks {
                let lam = b.symmetric_eigenvalues();
                assert!(lam.iter().all(|&l| l >= -1e-8));
            }
        }
    }

    #[test]
    fn weak_duality_on_optimal_returns() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prob = random_feasible_problem(&mut rng, &[6, 5], 8);
        let sol = solve_default(&prob);
        assert_eq!(sol.status, SdpStatus::Optimal);
        let dual_obj: f64 = prob
            .constraints
            .iter()
            .zip(&sol.dual)
            .map(|(c, y)| c.rhs * y)
            .sum();
        assert!(sol.objective >= dual_obj - 1e-6, "{} vs {dual_obj}", sol.objective);
    }

    #[test]
    fn objective_scaling_preserves_status() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let prob = random_feasible_problem(&mut rng, &[5], 5);
        let mut scaled = prob.clone();
        for (_, e) in scaled.obj_blocks.iter_mut() {
            for t in e.iter_mut() {
                t.2 *= 10.0;
            }
        }
        let s1 = solve_default(&prob);
        let s2 = solve_default(&scaled);
        assert_eq!(s1.status, s2.status);
        assert!((s2.objective - 10.0 * s1.objective).abs() < 1e-4 * (1.0 + s2.objective.abs()));
    }

    #[test]
    fn coupled_scalar_components() {
        // two independent blocks tied through one shared scalar: maximize s
        // (minimize -s) with s <= X11 constraints pinning both blocks
        let prob = SdpProblem {
            block_sizes: vec![1, 1],
            num_scalars: 1,
            obj_blocks: vec![],
            obj_scalars: vec![-1.0],
            constraints: vec![
                // X0 = 2 - s
                SdpConstraint {
                    blocks: vec![(0, vec![(0, 0, 1.0)])],
                    scalars: vec![(0, 1.0)],
                    rhs: 2.0,
                },
                // X1 = 5 - s
                SdpConstraint {
                    blocks: vec![(1, vec![(0, 0, 1.0)])],
                    scalars: vec![(0, 1.0)],
                    rhs: 5.0,
                },
            ],
        };
        let sol = solve_default(&prob);
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.scalars[0] - 2.0).abs() < 1e-6, "{}", sol.scalars[0]);
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prob = random_feasible_problem(&mut rng, &[3, 2], 4);
        prob.num_scalars = 2;
        prob.obj_scalars = vec![0.5, -1.5];
        prob.constraints[0].scalars.push((1, 2.0));
        let text = prob.to_text();
        let back = SdpProblem::from_text(&text).unwrap();
        assert_eq!(back.block_sizes, prob.block_sizes);
        assert_eq!(back.num_scalars, prob.num_scalars);
        assert_eq!(back.constraints.len(), prob.constraints.len());
        let s1 = solve_default(&prob);
        let s2 = solve_default(&back);
        assert_eq!(s1.status, s2.status);
        assert!((s1.objective - s2.objective).abs() < 1e-9);
    }

    #[test]
    fn pure_scalar_equality_row() {
        // minimize s0 + s1 with s0 - s1 = 1 (pure scalar row) and s1 >= 0,
        // s0 >= 0 through 1x1 blocks
        let prob = SdpProblem {
            block_sizes: vec![1, 1],
            num_scalars: 2,
            obj_blocks: vec![],
            obj_scalars: vec![1.0, 1.0],
            constraints: vec![
                SdpConstraint {
                    blocks: vec![],
                    scalars: vec![(0, 1.0), (1, -1.0)],
                    rhs: 1.0,
                },
                SdpConstraint {
                    blocks: vec![(0, vec![(0, 0, 1.0)])],
                    scalars: vec![(0, -1.0)],
                    rhs: 0.0,
                },
                SdpConstraint {
                    blocks: vec![(1, vec![(0, 0, 1.0)])],
                    scalars: vec![(1, -1.0)],
                    rhs: 0.0,
                },
            ],
        };
        let sol = solve_default(&prob);
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.objective - 1.0).abs() < 1e-6, "{}", sol.objective);
        assert!((sol.scalars[0] - 1.0).abs() < 1e-6);
        assert!(sol.scalars[1].abs() < 1e-6);
    }
}
