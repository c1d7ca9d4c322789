//! Small semidefinite programs over a flat decision vector, solved with
//! Clarabel.
//!
//! Linear matrix inequalities are given as affine maps `x -> F(x)` and are
//! imposed as `F(x) <= 0`. The affine coefficients are recovered by
//! evaluating the map at the origin and at each unit vector.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};
use crate::linalg::Mat;

enum Block {
    /// `F0 + sum x_i F_i <= 0`.
    Lmi { f0: Mat, fi: Vec<Mat> },
    /// `a' x <= b`.
    Le { a: Vec<f64>, b: f64 },
}

pub struct Sdp {
    nv: usize,
    quad: Option<Mat>,
    lin: Vec<f64>,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: String,
}

fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper triangle, column-major, off-diagonals scaled by sqrt(2).
fn svec(m: &Mat, out: &mut Vec<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..=j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out.push(if i == j { v } else { v * std::f64::consts::SQRT_2 });
        }
    }
}

impl Sdp {
    pub fn new(nv: usize) -> Self {
        Self {
            nv,
            quad: None,
            lin: vec![0.0; nv],
            blocks: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.nv
    }

    /// Minimize `0.5 x' H x + c' x`.
    pub fn set_objective(&mut self, h: Option<Mat>, c: Vec<f64>) {
        assert_eq!(c.len(), self.nv);
        if let Some(h) = &h {
            assert_eq!(h.shape(), (self.nv, self.nv));
        }
        self.quad = h;
        self.lin = c;
    }

    /// Adds `F(x) <= 0` for an affine symmetric-matrix-valued `F`.
    pub fn add_lmi(&mut self, f: impl Fn(&[f64]) -> Mat) {
        let mut x = vec![0.0; self.nv];
        let f0 = f(&x);
        let mut fi = Vec::with_capacity(self.nv);
        for i in 0..self.nv {
            x[i] = 1.0;
            fi.push(f(&x) - &f0);
            x[i] = 0.0;
        }
        self.blocks.push(Block::Lmi { f0, fi });
    }

    /// Adds `a' x <= b`.
    pub fn add_le(&mut self, a: Vec<f64>, b: f64) {
        assert_eq!(a.len(), self.nv);
        self.blocks.push(Block::Le { a, b });
    }

    pub fn solve(&self) -> Result<SdpSolution> {
        let nv = self.nv;
        // Stack rows: nonnegative-orthant rows first, then PSD blocks.
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nv];
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0;
        let les: Vec<_> = self
            .blocks
            .iter()
            .filter_map(|bl| match bl {
                Block::Le { a, b } => Some((a, *b)),
                _ => None,
            })
            .collect();
        if !les.is_empty() {
            for (a, bv) in &les {
                for (j, &v) in a.iter().enumerate() {
                    if v != 0.0 {
                        cols[j].push((row, v));
                    }
                }
                b.push(*bv);
                row += 1;
            }
            cones.push(SupportedConeT::NonnegativeConeT(les.len()));
        }
        for bl in &self.blocks {
            if let Block::Lmi { f0, fi } = bl {
                let n = f0.nrows();
                // s = -F0 - sum x_i F_i  =>  b = svec(-F0), A col i = svec(F_i)
                let mut tmp = Vec::with_capacity(svec_len(n));
                svec(&(-f0), &mut tmp);
                b.extend_from_slice(&tmp);
                for (j, f) in fi.iter().enumerate() {
                    tmp.clear();
                    svec(f, &mut tmp);
                    for (k, &v) in tmp.iter().enumerate() {
                        if v != 0.0 {
                            cols[j].push((row + k, v));
                        }
                    }
                }
                row += svec_len(n);
                cones.push(SupportedConeT::PSDTriangleConeT(n));
            }
        }
        let a = csc_from_cols(row, nv, &cols);
        let p = match &self.quad {
            None => CscMatrix::zeros((nv, nv)),
            Some(h) => {
                let mut pc: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nv];
                for j in 0..nv {
                    for i in 0..=j {
                        let v = 0.5 * (h[(i, j)] + h[(j, i)]);
                        if v != 0.0 {
                            pc[j].push((i, v));
                        }
                    }
                }
                csc_from_cols(nv, nv, &pc)
            }
        };
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(500)
            .tol_gap_abs(1e-10)
            .tol_gap_rel(1e-10)
            .tol_feas(1e-10)
            .build()
            .map_err(|e| Error::SolverInfeasible(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &self.lin, &a, &b, &cones, settings)
            .map_err(|e| Error::SolverInfeasible(format!("setup: {e}")))?;
        solver.solve();
        let status = solver.solution.status;
        let name = format!("{status:?}");
        match status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(SdpSolution {
                x: solver.solution.x.clone(),
                objective: solver.solution.obj_val,
                status: name,
            }),
            _ => Err(Error::SolverInfeasible(name)),
        }
    }
}

fn csc_from_cols(m: usize, n: usize, cols: &[Vec<(usize, f64)>]) -> CscMatrix<f64> {
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for c in cols {
        let mut c = c.clone();
        c.sort_by_key(|e| e.0);
        for (r, v) in c {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Symmetric matrix from its upper-triangle entries (row-major within the
/// triangle), used to parameterize symmetric decision variables.
pub fn sym_from_upper(n: usize, v: &[f64]) -> Mat {
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

pub fn upper_len(n: usize) -> usize {
    n * (n + 1) / 2
}
