//! Dense row-major tensors over `f32` (training) or `f64` (gradient checks).

use rand::Rng;

/// Scalar types the engine runs on. Training defaults to `f32`; finite
/// difference validation requires `f64`.
pub trait Real: num_traits::Float + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    /// C[m,n] = alpha * A[m,k] * B[k,n] + beta * C, with explicit strides so
    /// transposed operands need no copies.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn to_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;

    fn sample_uniform<RNG: Rng>(rng: &mut RNG, lo: f64, hi: f64) -> Self {
        Self::from_f64(rng.gen_range(lo..hi))
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Flat dense tensor. Shapes are 1-3 dimensional: matrices `[rows, cols]`
/// carry batches of feature vectors, `[h, w, c]` grids carry feature planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Rows/cols of a matrix-shaped tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected 3-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn scalar_value(&self) -> R {
        assert_eq!(self.numel(), 1, "expected scalar, got shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Tensor<R> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill_uniform<RNG: Rng>(shape: &[usize], rng: &mut RNG, lo: f64, hi: f64) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(R::sample_uniform(rng, lo, hi));
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// How an operand enters a matrix product.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum MatSide {
    Plain,
    Transposed,
}

/// `c += alpha * op(a) * op(b)` where `op` is identity or transpose.
/// Output rows are split into disjoint chunks across the rayon pool; each
/// output element is produced by exactly one task with a fixed reduction
/// order, so results do not depend on thread count.
pub fn gemm_acc<R: Real>(
    c: &mut Tensor<R>,
    alpha: R,
    a: &Tensor<R>,
    ta: MatSide,
    b: &Tensor<R>,
    tb: MatSide,
) {
    use rayon::prelude::*;

    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (m, k) = match ta {
        MatSide::Plain => (ar, ac),
        MatSide::Transposed => (ac, ar),
    };
    let (kb, n) = match tb {
        MatSide::Plain => (br, bc),
        MatSide::Transposed => (bc, br),
    };
    assert_eq!(k, kb, "gemm inner dims {k} vs {kb}");
    assert_eq!(c.dims2(), (m, n), "gemm output dims");

    // Strides of op(A)/op(B) over the row-major storage.
    let (rsa, csa) = match ta {
        MatSide::Plain => (ac as isize, 1isize),
        MatSide::Transposed => (1isize, ac as isize),
    };
    let (rsb, csb) = match tb {
        MatSide::Plain => (bc as isize, 1isize),
        MatSide::Transposed => (1isize, bc as isize),
    };

    let a_ptr = a.data.as_ptr();
    let b_ptr = b.data.as_ptr();
    let threads = rayon::current_num_threads().max(1);
    let flops = m * k * n;

    if threads > 1 && flops >= (1 << 18) && m >= 2 * threads {
        let rows_per = m.div_ceil(threads);
        let a_addr = a_ptr as usize;
        let b_addr = b_ptr as usize;
        c.data
            .par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(chunk, c_chunk)| {
                let r0 = chunk * rows_per;
                let rows = c_chunk.len() / n;
                unsafe {
                    let a_sub = (a_addr as *const R).offset(r0 as isize * rsa);
                    R::gemm(
                        rows,
                        k,
                        n,
                        alpha,
                        a_sub,
                        rsa,
                        csa,
                        b_addr as *const R,
                        rsb,
                        csb,
                        R::one(),
                        c_chunk.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
    } else {
        unsafe {
            R::gemm(
                m,
                k,
                n,
                alpha,
                a_ptr,
                rsa,
                csa,
                b_ptr,
                rsb,
                csb,
                R::one(),
                c.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Fresh `op(a) * op(b)` product.
pub fn matmul<R: Real>(a: &Tensor<R>, ta: MatSide, b: &Tensor<R>, tb: MatSide) -> Tensor<R> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let m = if ta == MatSide::Plain { ar } else { ac };
    let n = if tb == MatSide::Plain { bc } else { br };
    let mut c = Tensor::zeros(&[m, n]);
    gemm_acc(&mut c, R::one(), a, ta, b, tb);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, MatSide::Plain, &b, MatSide::Plain);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);

        // (A^T B^T)^T = B A
        let d = matmul(&b, MatSide::Transposed, &a, MatSide::Transposed);
        assert_eq!(d.shape(), &[2, 2]);
        assert_eq!(d.data(), &[58.0, 139.0, 64.0, 154.0]);
    }

    #[test]
    fn parallel_split_matches_serial() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::fill_uniform(&[257, 64], &mut rng, -1.0, 1.0);
        let b = Tensor::<f32>::fill_uniform(&[64, 96], &mut rng, -1.0, 1.0);
        let big = matmul(&a, MatSide::Plain, &b, MatSide::Plain);
        // Serial reference through the small-size path.
        let mut reference = Tensor::zeros(&[257, 96]);
        unsafe {
            f32::gemm(
                257,
                64,
                96,
                1.0,
                a.data().as_ptr(),
                64,
                1,
                b.data().as_ptr(),
                96,
                1,
                1.0,
                reference.data_mut().as_mut_ptr(),
                96,
                1,
            );
        }
        assert_eq!(big.data(), reference.data());
    }
}
