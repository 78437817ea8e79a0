//! Scalar abstraction: the whole construction is generic over the floating
//! point type. `f64` is the default for production runs; `f32` exists mainly
//! to keep the kernels honest about precision assumptions.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;
use std::fmt::{Display, LowerExp};
use std::iter::Sum;

/// Floating point scalar usable in every kernel of this crate.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + FftNum
    + Sum
    + Display
    + LowerExp
    + Default
    + 'static
{
    /// Machine-epsilon-scale tolerance used by internal sanity checks.
    fn noise_floor() -> Self;
}

impl Real for f32 {
    fn noise_floor() -> Self {
        1e-5
    }
}

impl Real for f64 {
    fn noise_floor() -> Self {
        1e-12
    }
}

/// Shorthand conversion from `f64` literals into the generic scalar.
#[inline]
pub fn r<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 -> scalar conversion")
}

/// Dot product of two small real vectors.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm of a small real vector.
#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Euclidean distance between two small real vectors.
#[inline]
pub fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// `a - b` elementwise.
#[inline]
pub fn sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// `a + s*b` elementwise.
#[inline]
pub fn axpy<T: Real>(a: &[T], s: T, b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + s * y).collect()
}

/// Normalize a vector in place; returns the original norm.
pub fn normalize<T: Real>(a: &mut [T]) -> T {
    let n = norm(a);
    if n > T::zero() {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Angle between two nonzero vectors, in radians.
pub fn angle_between<T: Real>(a: &[T], b: &[T]) -> T {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.min(T::one()).max(-T::one()).acos()
}

/// Solve the dense n-by-n system `m x = rhs` by Gaussian elimination with
/// partial pivoting. `m` is row-major. Returns `None` for a (numerically)
/// singular matrix.
pub fn solve_dense<T: Real>(m: &[Vec<T>], rhs: &[T]) -> Option<Vec<T>> {
    let n = rhs.len();
    debug_assert!(m.len() == n && m.iter().all(|row| row.len() == n));
    let mut a: Vec<Vec<T>> = m.to_vec();
    let mut b: Vec<T> = rhs.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| {
                a[i][col]
                    .abs()
                    .partial_cmp(&a[j][col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        if a[piv][col].abs() <= T::epsilon() * r(16.0) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Determinant of a dense n-by-n row-major matrix (LU with partial pivoting).
pub fn det_dense<T: Real>(m: &[Vec<T>]) -> T {
    let n = m.len();
    let mut a: Vec<Vec<T>> = m.to_vec();
    let mut det = T::one();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| {
                a[i][col]
                    .abs()
                    .partial_cmp(&a[j][col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        if a[piv][col] == T::zero() {
            return T::zero();
        }
        if piv != col {
            a.swap(col, piv);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
        }
    }
    det
}

/// Singular values of an n-by-(n-1) matrix with n in {2, 3}, descending.
///
/// Small enough to do in closed form through the Gram matrix; this is what
/// the tangential immersion test needs and nothing more.
pub fn singular_values_tall<T: Real>(cols: &[Vec<T>]) -> Vec<T> {
    match cols.len() {
        1 => vec![norm(&cols[0])],
        2 => {
            let g11 = dot(&cols[0], &cols[0]);
            let g12 = dot(&cols[0], &cols[1]);
            let g22 = dot(&cols[1], &cols[1]);
            let tr = g11 + g22;
            let det = g11 * g22 - g12 * g12;
            let disc = (tr * tr - r::<T>(4.0) * det).max(T::zero()).sqrt();
            let l1 = (tr + disc) * r(0.5);
            let l2 = (tr - disc) * r(0.5);
            vec![l1.max(T::zero()).sqrt(), l2.max(T::zero()).sqrt()]
        }
        k => panic!("unsupported tangential dimension {k}"),
    }
}
