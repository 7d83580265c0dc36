//! Discrete-time state-space models.
//!
//! A model maps an input sequence `u(k)` to outputs through
//!
//! ```text
//! x(k+1) = A x(k) + B u(k)
//! y(k)   = C x(k) + D u(k)
//! ```
//!
//! The microgrid uses two inputs (inverter P, Q) and two outputs (PCC P, Q),
//! but nothing here is restricted to that shape; identification tests also
//! run single-input single-output systems through the same type.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel<T: Scalar> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    c: DMatrix<T>,
    d: DMatrix<T>,
    ts: T,
}

impl<T: Scalar> LtiModel<T> {
    /// Builds a model after checking that the four matrices agree in shape.
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, c: DMatrix<T>, d: DMatrix<T>, ts: T) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(CoreError::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || c.ncols() != n {
            return Err(CoreError::Dimension(format!(
                "B is {}x{}, C is {}x{} for {n} states",
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(CoreError::Dimension(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        if !(ts > T::zero()) || !ts.is_finite_value() {
            return Err(CoreError::InvalidParameter("sample time must be positive".into()));
        }
        let finite = |m: &DMatrix<T>| m.iter().all(|v| v.is_finite_value());
        if !(finite(&a) && finite(&b) && finite(&c) && finite(&d)) {
            return Err(CoreError::NonFinite("state-space matrices"));
        }
        Ok(Self { a, b, c, d, ts })
    }

    /// A static gain: no states, `y = D u`.
    pub fn static_gain(d: DMatrix<T>, ts: T) -> Result<Self> {
        let (p, m) = d.shape();
        Self::new(DMatrix::zeros(0, 0), DMatrix::zeros(0, m), DMatrix::zeros(p, 0), d, ts)
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<T> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<T> {
        &self.d
    }
    pub fn ts(&self) -> T {
        self.ts
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

    /// Same model with `B` multiplied by `factor`.
    pub fn with_scaled_input(&self, factor: T) -> Self {
        Self { b: &self.b * factor, d: &self.d * factor, ..self.clone() }
    }

    /// Same model with every output negated.
    pub fn negated(&self) -> Self {
        Self { c: -&self.c, d: -&self.d, ..self.clone() }
    }

    /// Largest eigenvalue modulus of `A` (zero for a static model).
    pub fn spectral_radius(&self) -> T {
        if self.n_states() == 0 {
            return T::zero();
        }
        self.a
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|z| (z.re * z.re + z.im * z.im).sqrt())
            .fold(T::zero(), |acc, r| if r > acc { r } else { acc })
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < T::one()
    }

    /// Steady-state gain `C (I - A)^-1 B + D`.
    pub fn dc_gain(&self) -> Result<DMatrix<T>> {
        let n = self.n_states();
        if n == 0 {
            return Ok(self.d.clone());
        }
        let i_minus_a = DMatrix::<T>::identity(n, n) - &self.a;
        let x = i_minus_a.lu().solve(&self.b).ok_or(CoreError::Singular("I - A"))?;
        Ok(&self.c * x + &self.d)
    }

    /// Markov parameter `h(k)`: `D` for `k = 0`, `C A^(k-1) B` otherwise.
    pub fn markov(&self, k: usize) -> DMatrix<T> {
        if k == 0 {
            return self.d.clone();
        }
        let mut ab = self.b.clone();
        for _ in 1..k {
            ab = &self.a * ab;
        }
        &self.c * ab
    }

    /// Response from rest to `inputs`, one output vector per input sample.
    pub fn simulate(&self, inputs: &[DVector<T>]) -> Vec<DVector<T>> {
        let mut runner = LtiRunner::new(self.clone());
        inputs.iter().map(|u| runner.step(u)).collect()
    }

    /// Response from rest to a unit step on `input` lasting `n` samples.
    pub fn step_response(&self, input: usize, n: usize) -> Vec<DVector<T>> {
        let mut u = DVector::zeros(self.n_inputs());
        u[input] = T::one();
        let inputs = vec![u; n];
        self.simulate(&inputs)
    }
}

/// The default microgrid coupling between inverter injection and PCC flow.
///
/// Each input drives its own second-order filter with poles 0.7 and 0.3,
/// unit DC gain and a one-sample input delay (`D = 0`). The filtered signals
/// are mixed by the static gain matrix `[1, 0.1; 0.1, 1]`.
pub fn default_plant_model<T: Scalar>(ts: T) -> LtiModel<T> {
    coupled_second_order(ts, [[1.0, 0.1], [0.1, 1.0]], 0.7, 0.3)
}

/// Per-input second-order filters `k z / ((z - p1)(z - p2))` mixed by `gains`.
pub fn coupled_second_order<T: Scalar>(ts: T, gains: [[f64; 2]; 2], p1: f64, p2: f64) -> LtiModel<T> {
    let l = T::lit;
    let k = (1.0 - p1) * (1.0 - p2);
    // s1(k+1) = p1 s1 + u, s2(k+1) = p2 s2 + s1, w = k s1 + k p2 s2
    let mut a = DMatrix::zeros(4, 4);
    let mut b = DMatrix::zeros(4, 2);
    let mut c = DMatrix::zeros(2, 4);
    for j in 0..2 {
        let o = 2 * j;
        a[(o, o)] = l(p1);
        a[(o + 1, o)] = T::one();
        a[(o + 1, o + 1)] = l(p2);
        b[(o, j)] = T::one();
        for i in 0..2 {
            c[(i, o)] = l(gains[i][j] * k);
            c[(i, o + 1)] = l(gains[i][j] * k * p2);
        }
    }
    LtiModel::new(a, b, c, DMatrix::zeros(2, 2), ts).expect("well-formed default model")
}

/// Stateful evaluation of an [`LtiModel`].
#[derive(Debug, Clone)]
pub struct LtiRunner<T: Scalar> {
    model: LtiModel<T>,
    state: DVector<T>,
}

impl<T: Scalar> LtiRunner<T> {
    pub fn new(model: LtiModel<T>) -> Self {
        let state = DVector::zeros(model.n_states());
        Self { model, state }
    }

    pub fn model(&self) -> &LtiModel<T> {
        &self.model
    }

    pub fn state(&self) -> &DVector<T> {
        &self.state
    }

    pub fn set_state(&mut self, state: DVector<T>) {
        assert_eq!(state.len(), self.model.n_states());
        self.state = state;
    }

    pub fn reset(&mut self) {
        self.state.fill(T::zero());
    }

    /// Output for the current sample, then advance the state.
    pub fn step(&mut self, u: &DVector<T>) -> DVector<T> {
        let y = &self.model.c * &self.state + &self.model.d * u;
        self.state = &self.model.a * &self.state + &self.model.b * u;
        y
    }

    /// Output the model would produce for `u` without advancing.
    pub fn peek(&self, u: &DVector<T>) -> DVector<T> {
        &self.model.c * &self.state + &self.model.d * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_plant_dc_gain() {
        let g = default_plant_model(0.1_f64).dc_gain().unwrap();
        assert_relative_eq!(g[(0, 0)], 1.0, epsilon = 1e-9);
        assert_relative_eq!(g[(0, 1)], 0.1, epsilon = 1e-9);
        assert_relative_eq!(g[(1, 0)], 0.1, epsilon = 1e-9);
        assert_relative_eq!(g[(1, 1)], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn default_plant_is_stable_with_dominant_pole() {
        let m = default_plant_model(0.1_f64);
        assert_relative_eq!(m.spectral_radius(), 0.7, epsilon = 1e-9);
        assert!(m.is_stable());
    }

    #[test]
    fn default_plant_has_one_step_delay() {
        let y = default_plant_model(0.1_f64).step_response(0, 3);
        assert_eq!(y[0][0], 0.0);
        assert_relative_eq!(y[1][0], 0.21, epsilon = 1e-12);
        assert_relative_eq!(y[1][1], 0.021, epsilon = 1e-12);
    }

    #[test]
    fn pure_gain_dc() {
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -1.0, 3.0]);
        let m = LtiModel::static_gain(d.clone(), 0.1).unwrap();
        assert_eq!(m.dc_gain().unwrap(), d);
        assert_eq!(m.spectral_radius(), 0.0);
    }

    #[test]
    fn scaling_b_doubles_dc_gain() {
        let m = default_plant_model(0.1_f64);
        let g1 = m.dc_gain().unwrap();
        let g2 = m.with_scaled_input(2.0).dc_gain().unwrap();
        assert_relative_eq!(g2, g1 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn markov_matches_impulse_response() {
        let m = default_plant_model(0.1_f64);
        let mut u = vec![DVector::zeros(2); 12];
        u[0][1] = 1.0;
        let y = m.simulate(&u);
        for (k, yk) in y.iter().enumerate() {
            let h = m.markov(k);
            assert_relative_eq!(yk[0], h[(0, 1)], epsilon = 1e-14);
            assert_relative_eq!(yk[1], h[(1, 1)], epsilon = 1e-14);
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let err = LtiModel::new(
            DMatrix::<f64>::zeros(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
            0.1,
        );
        assert!(matches!(err, Err(CoreError::Dimension(_))));
    }

    #[test]
    fn works_in_single_precision() {
        let g = default_plant_model(0.1_f32).dc_gain().unwrap();
        assert!((g[(0, 0)] - 1.0).abs() < 1e-5);
    }
}
