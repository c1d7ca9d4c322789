//! Dense matrix routines: Lyapunov and Riccati solvers, symmetric helpers,
//! pole placement.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vect = DVector<f64>;

/// Eigenvalues with real part above this are treated as not strictly stable.
pub const HURWITZ_TOL: f64 = -1e-12;

pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn eigenvalues(a: &Mat) -> Vec<Complex<f64>> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

/// Eigenvalue with the largest real part.
pub fn rightmost_eigenvalue(a: &Mat) -> Complex<f64> {
    eigenvalues(a)
        .into_iter()
        .max_by(|x, y| x.re.total_cmp(&y.re))
        .unwrap_or(Complex::new(f64::NEG_INFINITY, 0.0))
}

pub fn check_hurwitz(a: &Mat) -> Result<()> {
    let e = rightmost_eigenvalue(a);
    if !(e.re < HURWITZ_TOL) {
        return Err(Error::NonHurwitz { re: e.re, im: e.im });
    }
    Ok(())
}

pub fn sym_eigen(m: &Mat) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(sym(m))
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eigen(m).eigenvalues.min()
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    sym_eigen(m).eigenvalues.max()
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_fn(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let e = sym_eigen(m);
    let d = e.eigenvalues.map(f);
    &e.eigenvectors * Mat::from_diagonal(&d) * e.eigenvectors.transpose()
}

pub fn sym_sqrt(m: &Mat) -> Mat {
    sym_fn(m, |x| x.max(0.0).sqrt())
}

pub fn inverse(m: &Mat, what: &'static str) -> Result<Mat> {
    m.clone().try_inverse().ok_or(Error::Singular(what))
}

pub fn solve(a: &Mat, b: &Mat, what: &'static str) -> Result<Mat> {
    a.clone().lu().solve(b).ok_or(Error::Singular(what))
}

/// Stacks blocks row-major; all blocks in a row share a row count.
pub fn block(rows: &[&[&Mat]]) -> Mat {
    let nr: usize = rows.iter().map(|r| r[0].nrows()).sum();
    let nc: usize = rows[0].iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(nr, nc);
    let mut r0 = 0;
    for row in rows {
        let mut c0 = 0;
        let h = row[0].nrows();
        for b in row.iter() {
            assert_eq!(b.nrows(), h, "block row height mismatch");
            out.view_mut((r0, c0), (h, b.ncols())).copy_from(b);
            c0 += b.ncols();
        }
        assert_eq!(c0, nc, "block column width mismatch");
        r0 += h;
    }
    out
}

pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let nr: usize = blocks.iter().map(|b| b.nrows()).sum();
    let nc: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(nr, nc);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Solves `A X + X A' + Q = 0` for Hurwitz `A` by Bartels-Stewart on the
/// real Schur form.
pub fn lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "lyapunov: A is {:?}, Q is {:?}",
            a.shape(),
            q.shape()
        )));
    }
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 100 * n.max(10))
        .ok_or(Error::NoConvergence {
            what: "real Schur decomposition",
            iterations: 100 * n.max(10),
            residual: f64::NAN,
        })?;
    let e = schur
        .complex_eigenvalues()
        .iter()
        .copied()
        .max_by(|x, y| x.re.total_cmp(&y.re))
        .unwrap();
    if !(e.re < HURWITZ_TOL) {
        return Err(Error::NonHurwitz { re: e.re, im: e.im });
    }
    let (u, t) = schur.unpack();

    // Diagonal blocks of the quasi-triangular factor.
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }

    let x = sym(&(&u * quasi_triangular_lyapunov(&t, &blocks, &(-(u.transpose() * q * &u)))? * u.transpose()));
    // iterative refinement against the residual of the original equation
    let mut x = x;
    for _ in 0..2 {
        let r = sym(&(a * &x + &x * a.transpose() + q));
        if r.norm() == 0.0 {
            break;
        }
        let d = quasi_triangular_lyapunov(&t, &blocks, &(-(u.transpose() * &r * &u)))?;
        x = sym(&(x + &u * d * u.transpose()));
    }
    Ok(x)
}

/// Solves `T Y + Y T' = C` for quasi-upper-triangular `T` with the given
/// diagonal blocks, block-column by block-column from the bottom-right.
fn quasi_triangular_lyapunov(t: &Mat, blocks: &[(usize, usize)], c: &Mat) -> Result<Mat> {
    let n = t.nrows();
    let mut y = Mat::zeros(n, n);
    for bj in (0..blocks.len()).rev() {
        let (j0, q_) = blocks[bj];
        for bi in (0..blocks.len()).rev() {
            let (i0, p) = blocks[bi];
            let mut rhs = c.view((i0, j0), (p, q_)).into_owned();
            // Row coupling through T (upper): sum_{k > i-block} T[i,k] Y[k,j]
            let k_start = i0 + p;
            if k_start < n {
                rhs -= t.view((i0, k_start), (p, n - k_start))
                    * y.view((k_start, j0), (n - k_start, q_));
            }
            // Column coupling through T': sum_{l > j-block} Y[i,l] T[j,l]'
            let l_start = j0 + q_;
            if l_start < n {
                rhs -= y.view((i0, l_start), (p, n - l_start))
                    * t.view((j0, l_start), (q_, n - l_start)).transpose();
            }
            let tii = t.view((i0, i0), (p, p)).into_owned();
            let tjj = t.view((j0, j0), (q_, q_)).into_owned();
            let blk = small_sylvester(&tii, &tjj, &rhs)?;
            y.view_mut((i0, j0), (p, q_)).copy_from(&blk);
        }
    }
    Ok(y)
}

/// Solves `T1 Y + Y T2' = R` for blocks of size at most 2 via Kronecker form.
fn small_sylvester(t1: &Mat, t2: &Mat, r: &Mat) -> Result<Mat> {
    let p = t1.nrows();
    let q = t2.nrows();
    let m = p * q;
    let mut k = Mat::zeros(m, m);
    // vec is column-major: index (i, j) -> j*p + i
    for j in 0..q {
        for i in 0..p {
            let row = j * p + i;
            for ii in 0..p {
                k[(row, j * p + ii)] += t1[(i, ii)];
            }
            for jj in 0..q {
                k[(row, jj * p + i)] += t2[(j, jj)];
            }
        }
    }
    let rv = Vect::from_iterator(m, r.iter().copied());
    let sol = k
        .lu()
        .solve(&rv)
        .ok_or(Error::Singular("Lyapunov block solve"))?;
    Ok(Mat::from_iterator(p, q, sol.iter().copied()))
}

/// Stabilizing solution of `A'X + XA - X B R^-1 B' X + Q = 0` by
/// Newton-Kleinman iteration. Returns `(X, K)` with `K = R^-1 B' X`.
/// `A` must be Hurwitz (the iteration starts from `K = 0`).
pub fn care(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<(Mat, Mat)> {
    check_hurwitz(a)?;
    care_from(a, b, q, r, Mat::zeros(b.ncols(), a.nrows()))
}

/// As [`care`], starting Newton-Kleinman from a gain `k0` with `A - B k0`
/// Hurwitz.
pub fn care_from(a: &Mat, b: &Mat, q: &Mat, r: &Mat, k0: Mat) -> Result<(Mat, Mat)> {
    check_hurwitz(&(a - b * &k0))?;
    let rinv = inverse(r, "CARE control weight")?;
    let mut k = k0;
    let mut x_prev = Mat::zeros(a.nrows(), a.nrows());
    for it in 0..100 {
        let acl = a - b * &k;
        let qk = q + k.transpose() * r * &k;
        let x = lyapunov(&acl.transpose(), &qk)?;
        k = &rinv * b.transpose() * &x;
        let change = (&x - &x_prev).norm() / x.norm().max(1e-300);
        x_prev = x;
        if change < 1e-13 && it > 0 {
            return Ok((x_prev, k));
        }
    }
    let res = (a.transpose() * &x_prev + &x_prev * a
        - &x_prev * b * &rinv * b.transpose() * &x_prev
        + q)
        .norm();
    if res < 1e-8 * (1.0 + q.norm()) {
        return Ok((x_prev, k));
    }
    Err(Error::NoConvergence {
        what: "Newton-Kleinman CARE",
        iterations: 100,
        residual: res,
    })
}

/// Steady-state Kalman gain for `x' = Ax + Gw`, `y = Cx + v` with
/// `E[ww'] = W`, `E[vv'] = V`. Returns `(L, P)` with `L = P C' V^-1`.
pub fn kalman(a: &Mat, c: &Mat, gwg: &Mat, v: &Mat) -> Result<(Mat, Mat)> {
    let (p, lt) = care(&a.transpose(), &c.transpose(), gwg, v)?;
    Ok((lt.transpose(), p))
}

/// Observer gain `L` (n x 1) placing the eigenvalues of `A - L c` at the
/// roots of the monic polynomial with coefficients `poly` (highest first,
/// leading 1 omitted), via Ackermann's formula on the dual system.
pub fn ackermann_observer(a: &Mat, c: &Mat, poly: &[f64]) -> Result<Mat> {
    let n = a.nrows();
    if c.nrows() != 1 || c.ncols() != n || poly.len() != n {
        return Err(Error::Dimension("ackermann: single output required".into()));
    }
    // Observability matrix O = [c; cA; ...; cA^{n-1}].
    let mut obs = Mat::zeros(n, n);
    let mut row = c.clone();
    for i in 0..n {
        obs.row_mut(i).copy_from(&row.row(0));
        row *= a;
    }
    // phi(A) = A^n + p1 A^{n-1} + ... + pn I, evaluated by Horner.
    let mut phi = Mat::identity(n, n);
    for &coef in poly {
        phi = phi * a + Mat::identity(n, n) * coef;
    }
    let mut en = Mat::zeros(n, 1);
    en[(n - 1, 0)] = 1.0;
    let rhs = solve(&obs, &en, "observability matrix")?;
    Ok(phi * rhs)
}

/// Coefficients (highest power first, leading 1 omitted) of `(s - p)^n`.
pub fn repeated_root_poly(p: f64, n: usize) -> Vec<f64> {
    let mut c = vec![1.0];
    for _ in 0..n {
        let mut next = vec![0.0; c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= p * ci;
        }
        c = next;
    }
    c[1..].to_vec()
}

/// Characteristic polynomial coefficients of `A` (highest first, leading 1
/// omitted), by Faddeev-LeVerrier.
pub fn char_poly(a: &Mat) -> Vec<f64> {
    let n = a.nrows();
    let mut m = Mat::zeros(n, n);
    let mut coef = Vec::with_capacity(n);
    let mut c = 1.0;
    for k in 1..=n {
        m = a * &m + Mat::identity(n, n) * c;
        let am = a * &m;
        c = -am.trace() / k as f64;
        coef.push(c);
    }
    coef
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lyap_residual(a: &Mat, q: &Mat, x: &Mat) -> f64 {
        (a * x + x * a.transpose() + q).norm() / q.norm()
    }

    #[test]
    fn lyapunov_scalar() {
        let a = Mat::from_element(1, 1, -2.0);
        let q = Mat::from_element(1, 1, 3.0);
        let x = lyapunov(&a, &q).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn lyapunov_complex_pair_and_real_block() {
        let a = Mat::from_row_slice(
            4,
            4,
            &[
                -0.1, 5.0, 0.3, 0.0, -5.0, -0.1, 0.0, 1.0, 0.0, 0.0, -2.0, 0.4, 0.2, 0.0, 0.0,
                -7.0,
            ],
        );
        let g = Mat::from_row_slice(4, 2, &[1.0, 0.0, 0.5, 1.0, 0.0, 2.0, 1.0, 1.0]);
        let q = &g * g.transpose();
        let x = lyapunov(&a, &q).unwrap();
        assert!(lyap_residual(&a, &q, &x) < 1e-12);
        assert!(min_eigenvalue(&x) > 0.0);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = Mat::from_row_slice(2, 2, &[0.1, 1.0, 0.0, -1.0]);
        match lyapunov(&a, &Mat::identity(2, 2)) {
            Err(Error::NonHurwitz { re, .. }) => assert_relative_eq!(re, 0.1, epsilon = 1e-12),
            other => panic!("expected NonHurwitz, got {other:?}"),
        }
    }

    #[test]
    fn care_scalar_closed_form() {
        // a = -1, b = 1, q = 3, r = 1: x^2 + 2x - 3 = 0 -> x = 1
        let (x, k) = care(
            &Mat::from_element(1, 1, -1.0),
            &Mat::from_element(1, 1, 1.0),
            &Mat::from_element(1, 1, 3.0),
            &Mat::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(x[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(k[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn care_residual_oscillator() {
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.2]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = Mat::identity(2, 2);
        let r = Mat::from_element(1, 1, 0.1);
        let (x, k) = care(&a, &b, &q, &r).unwrap();
        let res = a.transpose() * &x + &x * &a - &x * &b * (1.0 / 0.1) * b.transpose() * &x + q;
        assert!(res.norm() < 1e-9);
        assert!(check_hurwitz(&(a - b * k)).is_ok());
    }

    #[test]
    fn ackermann_places_poles() {
        let a = Mat::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -1.0, -2.0, -0.5]);
        let c = Mat::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let poly = repeated_root_poly(-4.0, 3);
        let l = ackermann_observer(&a, &c, &poly).unwrap();
        let got = char_poly(&(a - l * c));
        for (g, w) in got.iter().zip(poly.iter()) {
            assert_relative_eq!(g, w, max_relative = 1e-9);
        }
    }

    #[test]
    fn repeated_root_binomial() {
        assert_eq!(repeated_root_poly(-2.0, 2), vec![4.0, 4.0]);
    }
}
