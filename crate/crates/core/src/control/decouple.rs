//! Static P/Q decoupling through the inverse steady-state gain.

use nalgebra::{Matrix2, Vector2};

use crate::scalar::Scalar;

pub const MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoupled<T> {
    pub cmd: [T; 2],
    /// The gain was ill-conditioned and the identity was used instead.
    pub fallback: bool,
}

/// Condition number of a 2x2 matrix, infinite when singular.
pub fn condition<T: Scalar>(m: &Matrix2<T>) -> T {
    let sv = m.singular_values();
    let (hi, lo) = if sv[0] > sv[1] { (sv[0], sv[1]) } else { (sv[1], sv[0]) };
    if lo > T::zero() {
        hi / lo
    } else {
        T::lit(f64::INFINITY)
    }
}

/// Inverse of `dc_gain`, or `None` when it is ill-conditioned.
pub fn decoupling_matrix<T: Scalar>(dc_gain: &Matrix2<T>) -> Option<Matrix2<T>> {
    if !(condition(dc_gain) <= T::lit(MAX_CONDITION)) {
        return None;
    }
    dc_gain.try_inverse()
}

/// `cmd = dc_gain^-1 raw`, so each loop's output lands on its own PCC
/// channel in steady state.
pub fn decouple<T: Scalar>(raw: [T; 2], dc_gain: &Matrix2<T>) -> Decoupled<T> {
    match decoupling_matrix(dc_gain) {
        Some(inv) => {
            let v = inv * Vector2::new(raw[0], raw[1]);
            Decoupled { cmd: [v[0], v[1]], fallback: false }
        }
        None => Decoupled { cmd: raw, fallback: true },
    }
}

/// Forward map `dc_gain cmd`: the steady-state PCC effect of a command.
pub fn couple<T: Scalar>(cmd: [T; 2], dc_gain: &Matrix2<T>) -> [T; 2] {
    let v = dc_gain * Vector2::new(cmd[0], cmd[1]);
    [v[0], v[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_passes_through() {
        let d = decouple([12.0, -3.0], &Matrix2::identity());
        assert_eq!(d.cmd, [12.0, -3.0]);
        assert!(!d.fallback);
    }

    #[test]
    fn inverts_coupling() {
        let g = Matrix2::new(1.0, 0.1, 0.1, 1.0);
        let d = decouple([99.0, 0.0], &g);
        assert_relative_eq!(d.cmd[0], 100.0, epsilon = 1e-12);
        assert_relative_eq!(d.cmd[1], -10.0, epsilon = 1e-12);
        let back = couple(d.cmd, &g);
        assert_relative_eq!(back[0], 99.0, epsilon = 1e-12);
        assert_relative_eq!(back[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_in_zero_out() {
        assert_eq!(decouple([0.0, 0.0], &Matrix2::new(1.0, 0.1, 0.1, 1.0)).cmd, [0.0, 0.0]);
    }

    #[test]
    fn ill_conditioned_falls_back() {
        let g = Matrix2::new(1.0, 1.0, 1.0, 1.0 + 1e-9);
        let d = decouple([5.0, 6.0], &g);
        assert!(d.fallback);
        assert_eq!(d.cmd, [5.0, 6.0]);
        assert!(decouple([1.0, 1.0], &Matrix2::zeros()).fallback);
    }
}
