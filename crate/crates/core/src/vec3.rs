//! Fixed-size 3-vector helpers for the simulation kernels.
//!
//! Plain `[f64; 3]` keeps magnetization states and field samples `Copy` and
//! lets the hot loops stay allocation-free.

pub type Vec3 = [f64; 3];

pub const ZERO: Vec3 = [0.0, 0.0, 0.0];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

/// `k * x + y`.
#[inline]
pub fn axpy(k: f64, x: Vec3, y: Vec3) -> Vec3 {
    [k * x[0] + y[0], k * x[1] + y[1], k * x[2] + y[2]]
}

#[inline]
pub fn is_finite(a: Vec3) -> bool {
    a[0].is_finite() && a[1].is_finite() && a[2].is_finite()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_is_right_handed() {
        assert_eq!(cross([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]), [0.0, 0.0, 1.0]);
        assert_eq!(cross([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_is_orthogonal_to_inputs() {
        let a = [0.3, -1.2, 2.5];
        let b = [-0.7, 0.4, 1.1];
        let c = cross(a, b);
        assert!(dot(a, c).abs() < 1e-15);
        assert!(dot(b, c).abs() < 1e-15);
    }

    #[test]
    fn axpy_combines() {
        assert_eq!(axpy(2.0, [1.0, 2.0, 3.0], [1.0, 1.0, 1.0]), [3.0, 5.0, 7.0]);
    }
}
