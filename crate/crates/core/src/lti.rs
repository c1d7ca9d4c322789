//! Linear time-invariant state-space systems.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// `x' = Ax + Bu, y = Cx + Du` (continuous) or the discrete analogue when
/// `dt` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    a: Mat,
    b: Mat,
    c: Mat,
    d: Mat,
    dt: Option<f64>,
}

impl StateSpace {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        Self::build(a, b, c, d, None)
    }

    pub fn discrete(a: Mat, b: Mat, c: Mat, d: Mat, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("sample time {dt}")));
        }
        Self::build(a, b, c, d, Some(dt))
    }

    fn build(a: Mat, b: Mat, c: Mat, d: Mat, dt: Option<f64>) -> Result<Self> {
        let n = a.nrows();
        let ok = a.ncols() == n
            && b.nrows() == n
            && c.ncols() == n
            && d.nrows() == c.nrows()
            && d.ncols() == b.ncols();
        if !ok {
            return Err(Error::Dimension(format!(
                "A {:?}, B {:?}, C {:?}, D {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        Ok(Self { a, b, c, d, dt })
    }

    /// Static gain `y = D u`.
    pub fn gain(d: Mat) -> Self {
        let (p, m) = d.shape();
        Self {
            a: Mat::zeros(0, 0),
            b: Mat::zeros(0, m),
            c: Mat::zeros(p, 0),
            d,
            dt: None,
        }
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    pub fn d(&self) -> &Mat {
        &self.d
    }
    pub fn dt(&self) -> Option<f64> {
        self.dt
    }
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_stable(&self) -> bool {
        match self.dt {
            None => linalg::check_hurwitz(&self.a).is_ok(),
            Some(_) => linalg::eigenvalues(&self.a)
                .iter()
                .all(|e| e.norm() < 1.0 - 1e-12),
        }
    }

    /// Squared H2 norm of a continuous system, from the controllability
    /// Gramian.
    pub fn h2_norm_sq(&self) -> Result<f64> {
        self.require_strictly_proper()?;
        let wc = linalg::lyapunov(&self.a, &(&self.b * self.b.transpose()))?;
        Ok((&self.c * wc * self.c.transpose()).trace())
    }

    /// Same quantity via the observability Gramian.
    pub fn h2_norm_sq_dual(&self) -> Result<f64> {
        self.require_strictly_proper()?;
        let wo = linalg::lyapunov(&self.a.transpose(), &(self.c.transpose() * &self.c))?;
        Ok((self.b.transpose() * wo * &self.b).trace())
    }

    fn require_strictly_proper(&self) -> Result<()> {
        if self.dt.is_some() {
            return Err(Error::InvalidParameter("H2 norm of a discrete system".into()));
        }
        let m = self.d.amax();
        if m > 0.0 {
            return Err(Error::NonzeroFeedthrough(m));
        }
        Ok(())
    }

    /// Bilinear (Tustin) discretization.
    pub fn tustin(&self, dt: f64) -> Result<StateSpace> {
        if self.dt.is_some() {
            return Err(Error::InvalidParameter("system is already discrete".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("sample time {dt}")));
        }
        let n = self.n_states();
        let i = Mat::identity(n, n);
        let ima = &i - &self.a * (dt / 2.0);
        let lu = ima.lu();
        if n > 0 && lu.determinant().abs() < 1e-300 {
            return Err(Error::SingularTransform);
        }
        let inv = lu.try_inverse().ok_or(Error::SingularTransform)?;
        let ad = &inv * (&i + &self.a * (dt / 2.0));
        let bd = &inv * &self.b * dt;
        let cd = &self.c * &inv;
        let dd = &self.d + &self.c * &bd * 0.5;
        StateSpace::discrete(ad, bd, cd, dd, dt)
    }

    /// Frequency response at angular frequency `w` (rad/s).
    pub fn freq_response(&self, w: f64) -> Result<DMatrix<Complex<f64>>> {
        let s = match self.dt {
            None => Complex::new(0.0, w),
            Some(dt) => Complex::new(0.0, w * dt).exp(),
        };
        self.eval(s)
    }

    /// Transfer matrix `C (sI - A)^-1 B + D` at a complex point.
    pub fn eval(&self, s: Complex<f64>) -> Result<DMatrix<Complex<f64>>> {
        let n = self.n_states();
        let cplx = |m: &Mat| m.map(|x| Complex::new(x, 0.0));
        let si_a = DMatrix::<Complex<f64>>::identity(n, n) * s - cplx(&self.a);
        let x = si_a
            .lu()
            .solve(&cplx(&self.b))
            .ok_or(Error::Singular("resolvent"))?;
        Ok(cplx(&self.c) * x + cplx(&self.d))
    }

    /// Steady-state gain: `D - C A^-1 B` (continuous) or
    /// `D + C (I - A)^-1 B` (discrete).
    pub fn dc_gain(&self) -> Result<Mat> {
        let n = self.n_states();
        let m = match self.dt {
            None => -self.a.clone(),
            Some(_) => Mat::identity(n, n) - &self.a,
        };
        let x = linalg::solve(&m, &self.b, "dc gain")?;
        Ok(&self.d + &self.c * x)
    }

    /// Restricts to the given input columns and output rows.
    pub fn select(&self, inputs: &[usize], outputs: &[usize]) -> StateSpace {
        let b = self.b.select_columns(inputs);
        let c = self.c.select_rows(outputs);
        let d = self.d.select_rows(outputs).select_columns(inputs);
        StateSpace {
            a: self.a.clone(),
            b,
            c,
            d,
            dt: self.dt,
        }
    }

    /// Series connection: output of `self` feeds `next`.
    pub fn series(&self, next: &StateSpace) -> Result<StateSpace> {
        if self.n_outputs() != next.n_inputs() || self.dt != next.dt {
            return Err(Error::Dimension("series: port mismatch".into()));
        }
        let n1 = self.n_states();
        let n2 = next.n_states();
        let a = linalg::block(&[
            &[&self.a, &Mat::zeros(n1, n2)],
            &[&(&next.b * &self.c), &next.a],
        ]);
        let b = linalg::block(&[&[&self.b], &[&(&next.b * &self.d)]]);
        let c = linalg::block(&[&[&(&next.d * &self.c), &next.c]]);
        let d = &next.d * &self.d;
        Self::build(a, b, c, d, self.dt)
    }

    /// `self - other` with shared inputs and outputs.
    pub fn difference(&self, other: &StateSpace) -> Result<StateSpace> {
        if self.n_inputs() != other.n_inputs()
            || self.n_outputs() != other.n_outputs()
            || self.dt != other.dt
        {
            return Err(Error::Dimension("difference: port mismatch".into()));
        }
        let a = linalg::block_diag(&[&self.a, &other.a]);
        let b = linalg::block(&[&[&self.b], &[&other.b]]);
        let c = linalg::block(&[&[&self.c, &(-&other.c)]]);
        let d = &self.d - &other.d;
        Self::build(a, b, c, d, self.dt)
    }
}

/// Closes the loop `u = -K(y)` where the first `n_u` plant inputs are the
/// control inputs and the first `n_y` plant outputs are measured. The result
/// maps the remaining plant inputs to all plant outputs, with state
/// `[x_plant; x_ctrl]`.
pub fn feedback(plant: &StateSpace, ctrl: &StateSpace, n_u: usize, n_y: usize) -> Result<StateSpace> {
    if ctrl.n_inputs() != n_y
        || ctrl.n_outputs() != n_u
        || plant.n_inputs() < n_u
        || plant.n_outputs() < n_y
        || plant.dt != ctrl.dt
    {
        return Err(Error::Dimension(format!(
            "feedback: plant {}x{} (u {n_u}, y {n_y}), controller {}x{}",
            plant.n_outputs(),
            plant.n_inputs(),
            ctrl.n_outputs(),
            ctrl.n_inputs()
        )));
    }
    let nw = plant.n_inputs() - n_u;
    let b1 = plant.b.columns(0, n_u).into_owned();
    let b2 = plant.b.columns(n_u, nw).into_owned();
    let c1 = plant.c.rows(0, n_y).into_owned();
    let d11 = plant.d.view((0, 0), (n_y, n_u)).into_owned();
    let d12 = plant.d.view((0, n_u), (n_y, nw)).into_owned();

    let e = (Mat::identity(n_u, n_u) + &ctrl.d * &d11)
        .try_inverse()
        .ok_or(Error::IllPosed)?;
    // u = Fx x + Fc xc + Fw w
    let fx = -(&e * &ctrl.d * &c1);
    let fc = -(&e * &ctrl.c);
    let fw = -(&e * &ctrl.d * &d12);
    // y = Gx x + Gc xc + Gw w
    let gx = &c1 + &d11 * &fx;
    let gc = &d11 * &fc;
    let gw = &d12 + &d11 * &fw;

    let a = linalg::block(&[
        &[&(&plant.a + &b1 * &fx), &(&b1 * &fc)],
        &[&(&ctrl.b * &gx), &(&ctrl.a + &ctrl.b * &gc)],
    ]);
    let b = linalg::block(&[&[&(&b2 + &b1 * &fw)], &[&(&ctrl.b * &gw)]]);
    let du = plant.d.columns(0, n_u).into_owned();
    let c = linalg::block(&[&[&(&plant.c + &du * &fx), &(&du * &fc)]]);
    let d = plant.d.columns(n_u, nw).into_owned() + &du * &fw;
    StateSpace::build(a, b, c, d, plant.dt)
}
