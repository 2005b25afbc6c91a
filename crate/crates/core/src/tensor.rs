//! Dense row-major tensors and the numeric kernels behind the graph ops.
//!
//! Every reduction runs in a fixed sequential order, so identical inputs
//! give bit-identical outputs regardless of batching or thread placement.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Argument(alloc::format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    /// 2-D tensor from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for scalars).
    #[inline]
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[outer, last_dim]`.
    #[inline]
    pub fn outer(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.last_dim()
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }

    /// Gathers entries of the first axis.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Stacks tensors along the first axis; trailing dimensions must agree.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat_rows of nothing".into()))?;
        let mut shape = first.shape.clone();
        shape[0] = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            if p.ndim() != first.ndim() || p.shape[1..] != first.shape[1..] {
                return Err(shape_err("concat_rows", &first.shape, &p.shape));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// `c = a · b` for row-major `a: [m, k]` and `b: [k, n]`.
///
/// Each output element accumulates `s = fma(a[i, kk], b[kk, j], s)` strictly
/// in `k` order starting from zero, identical to a naive triple loop using
/// fused multiply-add. Both operands are packed into panels first.
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    const MR: usize = 8;
    const NR: usize = 32;
    if m * n * k < 4096 || m < MR || n < NR {
        gemm_small(m, k, n, a, b, c);
        return;
    }
    let panels = n.div_ceil(NR);
    let mut bp = vec![T::zero(); panels * k * NR];
    for p in 0..panels {
        let j0 = p * NR;
        let w = NR.min(n - j0);
        for kk in 0..k {
            let dst = &mut bp[(p * k + kk) * NR..(p * k + kk) * NR + w];
            dst.copy_from_slice(&b[kk * n + j0..kk * n + j0 + w]);
        }
    }
    let rows = m.div_ceil(MR);
    let mut ap = vec![T::zero(); rows * k * MR];
    for ip in 0..rows {
        let i0 = ip * MR;
        for r in 0..MR.min(m - i0) {
            let src = &a[(i0 + r) * k..(i0 + r + 1) * k];
            for (kk, &v) in src.iter().enumerate() {
                ap[(ip * k + kk) * MR + r] = v;
            }
        }
    }
    for p in 0..panels {
        let j0 = p * NR;
        let w = NR.min(n - j0);
        let bpanel = &bp[p * k * NR..(p + 1) * k * NR];
        for ip in 0..rows {
            let i0 = ip * MR;
            let apanel = &ap[ip * k * MR..(ip + 1) * k * MR];
            let acc = micro_kernel::<T, MR, NR>(k, apanel, bpanel);
            for r in 0..MR.min(m - i0) {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(&acc[r][..w]);
            }
        }
    }
}

#[inline(always)]
fn micro_kernel<T: Real, const MR: usize, const NR: usize>(k: usize, ap: &[T], bp: &[T]) -> [[T; NR]; MR] {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    if MR == 8 && NR == 32 && core::any::TypeId::of::<T>() == core::any::TypeId::of::<f32>() {
        assert!(ap.len() >= k * MR && bp.len() >= k * NR);
        // SAFETY: T is f32 (checked above) and both panels hold k full rows.
        unsafe {
            let ap = core::slice::from_raw_parts(ap.as_ptr().cast::<f32>(), k * MR);
            let bp = core::slice::from_raw_parts(bp.as_ptr().cast::<f32>(), k * NR);
            let acc = avx512::kernel_8x32(k, ap, bp);
            return core::mem::transmute_copy(&acc);
        }
    }
    kernel::<T, MR, NR>(k, ap, bp)
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod avx512 {
    use core::arch::x86_64::*;

    /// Same arithmetic as the generic kernel: one fused multiply-add per
    /// element and step, in `k` order.
    ///
    /// # Safety
    /// `ap` must hold `8 k` and `bp` `32 k` elements.
    pub(super) unsafe fn kernel_8x32(k: usize, ap: &[f32], bp: &[f32]) -> [[f32; 32]; 8] {
        let mut c = [[_mm512_setzero_ps(); 2]; 8];
        let (a, b) = (ap.as_ptr(), bp.as_ptr());
        for kk in 0..k {
            let b0 = _mm512_loadu_ps(b.add(kk * 32));
            let b1 = _mm512_loadu_ps(b.add(kk * 32 + 16));
            for (r, cr) in c.iter_mut().enumerate() {
                let av = _mm512_set1_ps(*a.add(kk * 8 + r));
                cr[0] = _mm512_fmadd_ps(av, b0, cr[0]);
                cr[1] = _mm512_fmadd_ps(av, b1, cr[1]);
            }
        }
        let mut out = [[0.0f32; 32]; 8];
        for (o, cr) in out.iter_mut().zip(&c) {
            _mm512_storeu_ps(o.as_mut_ptr(), cr[0]);
            _mm512_storeu_ps(o.as_mut_ptr().add(16), cr[1]);
        }
        out
    }
}

#[inline(always)]
fn kernel<T: Real, const MR: usize, const NR: usize>(k: usize, ap: &[T], bp: &[T]) -> [[T; NR]; MR] {
    let mut acc = [[T::zero(); NR]; MR];
    for kk in 0..k {
        let bv: &[T; NR] = bp[kk * NR..kk * NR + NR].try_into().unwrap();
        for r in 0..MR {
            let av = ap[kk * MR + r];
            for q in 0..NR {
                acc[r][q] = av.mul_add(bv[q], acc[r][q]);
            }
        }
    }
    acc
}

fn gemm_small<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.fill(T::zero());
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

pub fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const BLK: usize = 32;
    for i0 in (0..rows).step_by(BLK) {
        for j0 in (0..cols).step_by(BLK) {
            for i in i0..(i0 + BLK).min(rows) {
                for j in j0..(j0 + BLK).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}

/// Plain 2-D matrix product.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data, &b.data, &mut c);
    Tensor::new(vec![m, n], c)
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_bt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[1] {
        return Err(shape_err("matmul_bt", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let bt = transpose(n, k, &b.data);
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data, &bt, &mut c);
    Tensor::new(vec![m, n], c)
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_at<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[0] != b.shape[0] {
        return Err(shape_err("matmul_at", &a.shape, &b.shape));
    }
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let at = transpose(k, m, &a.data);
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, &at, &b.data, &mut c);
    Tensor::new(vec![m, n], c)
}

/// Sequential sum.
#[inline]
pub fn sum<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |acc, &x| acc + x)
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for kk in 0..k {
                    s = a[i * k + kk].mul_add(b[kk * n + j], s);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(4, 5, 3), (1, 1, 1), (9, 33, 17), (8, 64, 32), (13, 7, 50)] {
            let a = random(&mut rng, m * k);
            let b = random(&mut rng, k * n);
            let mut c = vec![0.0f32; m * n];
            gemm(m, k, n, &a, &b, &mut c);
            let expect = naive(m, k, n, &a, &b);
            assert!(
                c.iter().zip(&expect).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{m}x{k}x{n}"
            );
        }
    }

    #[test]
    fn identity_and_zero_products() {
        let a = Tensor::<f32>::from_fn(&[3, 3], |i| i as f32 - 4.0);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[3, 2])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::new(vec![5, 6], random(&mut rng, 30)).unwrap();
        let b = Tensor::new(vec![4, 6], random(&mut rng, 24)).unwrap();
        let bt = Tensor::new(vec![6, 4], transpose(4, 6, b.data())).unwrap();
        assert_eq!(matmul_bt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());
        let at = Tensor::new(vec![6, 5], transpose(5, 6, a.data())).unwrap();
        let c = Tensor::new(vec![5, 4], random(&mut rng, 20)).unwrap();
        assert_eq!(matmul_at(&a, &c).unwrap(), matmul(&at, &c).unwrap());
    }

    #[test]
    fn mismatched_inner_dims_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }
}
