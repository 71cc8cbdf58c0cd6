use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the tensor engine.
///
/// `f64` is used for gradient verification, `f32` for training.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major general matrix multiply: `c = op(a) · op(b) + beta · c`
    /// where `op(a)` is `m×k` and `op(b)` is `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows × cols) view over storage that is either rows×cols or cols×rows
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Below this many multiply-adds (or for vector shapes) packing costs more than it saves.
const SMALL_GEMM: usize = 4096;

#[allow(clippy::too_many_arguments)]
fn naive_gemm<T: Float + AddAssign>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
) {
    let at = |i: usize, p: usize| a[(i as isize * rsa + p as isize * csa) as usize];
    let bt = |p: usize, j: usize| b[(p as isize * rsb + j as isize * csb) as usize];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == T::zero() {
            row.iter_mut().for_each(|x| *x = T::zero());
        } else if beta != T::one() {
            row.iter_mut().for_each(|x| *x = *x * beta);
        }
        if n == 1 {
            let mut s = T::zero();
            for p in 0..k {
                s += at(i, p) * bt(p, 0);
            }
            row[0] += s;
        } else {
            for p in 0..k {
                let x = at(i, p);
                for (j, out) in row.iter_mut().enumerate() {
                    *out += x * bt(p, j);
                }
            }
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k);
                assert_eq!(b.len(), k * n);
                assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for x in c.iter_mut() {
                        *x *= beta;
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                if m == 1 || n == 1 || m * k * n <= SMALL_GEMM {
                    naive_gemm(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c);
                    return;
                }
                // SAFETY: slice lengths were checked against the logical shapes above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Numeric precision selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transpose_flags() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn packed_and_loop_paths_agree_with_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // shapes on both sides of the small-product cutoff, plus vector shapes
        for &(m, k, n) in &[(1, 40, 70), (50, 30, 1), (3, 4, 5), (20, 20, 20), (33, 17, 9)] {
            for ta in [false, true] {
                for tb in [false, true] {
                    for beta in [0.0, 1.0, 0.5] {
                        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let c0: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let mut c = c0.clone();
                        f64::gemm(m, k, n, &a, ta, &b, tb, beta, &mut c);
                        for i in 0..m {
                            for j in 0..n {
                                let mut s = beta * c0[i * n + j];
                                for p in 0..k {
                                    let x = if ta { a[p * m + i] } else { a[i * k + p] };
                                    let y = if tb { b[j * k + p] } else { b[p * n + j] };
                                    s += x * y;
                                }
                                assert!((c[i * n + j] - s).abs() < 1e-12, "{m}x{k}x{n} {ta} {tb} {beta}");
                            }
                        }
                    }
                }
            }
        }
    }
}
