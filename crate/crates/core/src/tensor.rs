//! Dense row-major tensors and the numeric kernels the networks are built from.

use crate::error::{shape_err, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per batch row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Rows `indices` of the leading dimension, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let n = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    /// Concatenate along the leading dimension.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err!("concat: {:?} vs {:?}", p.shape, first.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(shape_err!("expected (B, C, H, W), got {:?}", shape)),
    }
}

/// Unfold one image (C, H, W) into columns (C·k·k, H·W) for a same-padded stride-1 conv.
fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut out[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let idx = ci * hw + sy as usize * w + sx as usize;
                        img[idx] = img[idx] + src[y * w + x];
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 convolution with an odd square kernel.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(&x.shape)?;
    let (o, wc, k, k2) = dims4(&weight.shape)?;
    if wc != c || k != k2 || k % 2 == 0 || bias.len() != o {
        return Err(shape_err!("conv2d: input {:?}, weight {:?}, bias {:?}", x.shape, weight.shape, bias.shape));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); b * o * hw];
    let mut cols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        let dst = &mut out[bi * o * hw..(bi + 1) * o * hw];
        for (oi, &bv) in bias.data.iter().enumerate() {
            dst[oi * hw..(oi + 1) * hw].fill(bv);
        }
        if k == 1 {
            T::gemm(o, c, hw, T::one(), &weight.data, c as isize, 1, &x.data[bi * c * hw..], hw as isize, 1, T::one(), dst, hw as isize, 1);
        } else {
            im2col(&x.data[bi * c * hw..(bi + 1) * c * hw], c, h, w, k, &mut cols);
            T::gemm(o, ckk, hw, T::one(), &weight.data, ckk as isize, 1, &cols, hw as isize, 1, T::one(), dst, hw as isize, 1);
        }
    }
    Tensor::new(vec![b, o, h, w], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = dims4(&x.shape).expect("validated in forward");
    let (o, _, k, _) = dims4(&weight.shape).expect("validated in forward");
    let hw = h * w;
    let ckk = c * k * k;
    let mut dw = vec![T::zero(); o * ckk];
    let mut db = vec![T::zero(); o];
    let mut dx = if need_input { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut cols = vec![T::zero(); ckk * hw];
    let mut dcols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        let g = &grad_out.data[bi * o * hw..(bi + 1) * o * hw];
        for (oi, d) in db.iter_mut().enumerate() {
            *d = *d + g[oi * hw..(oi + 1) * hw].iter().copied().sum::<T>();
        }
        let xin = &x.data[bi * c * hw..(bi + 1) * c * hw];
        let cols_ref: &[T] = if k == 1 {
            xin
        } else {
            im2col(xin, c, h, w, k, &mut cols);
            &cols
        };
        // dW (o × ckk) += g (o × hw) · colsᵀ (hw × ckk)
        T::gemm(o, hw, ckk, T::one(), g, hw as isize, 1, cols_ref, 1, hw as isize, T::one(), &mut dw, ckk as isize, 1);
        if need_input {
            // dcols (ckk × hw) = Wᵀ (ckk × o) · g (o × hw)
            let dst = &mut dx[bi * c * hw..(bi + 1) * c * hw];
            if k == 1 {
                T::gemm(ckk, o, hw, T::one(), &weight.data, 1, ckk as isize, g, hw as isize, 1, T::zero(), dst, hw as isize, 1);
            } else {
                T::gemm(ckk, o, hw, T::one(), &weight.data, 1, ckk as isize, g, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                col2im(&dcols, c, h, w, k, dst);
            }
        }
    }
    (
        need_input.then(|| Tensor { shape: x.shape.clone(), data: dx }),
        Tensor { shape: weight.shape.clone(), data: dw },
        Tensor { shape: vec![o], data: db },
    )
}

/// `y = x · wᵀ + b` for x (B, I), w (O, I), b (O).
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (bsz, i) = (x.batch(), x.row_len());
    let (o, wi) = match *weight.shape() {
        [o, wi] => (o, wi),
        _ => return Err(shape_err!("linear weight must be 2-d, got {:?}", weight.shape)),
    };
    if wi != i || bias.len() != o {
        return Err(shape_err!("linear: input {:?}, weight {:?}, bias {:?}", x.shape, weight.shape, bias.shape));
    }
    let mut out = Vec::with_capacity(bsz * o);
    for _ in 0..bsz {
        out.extend_from_slice(&bias.data);
    }
    T::gemm(bsz, i, o, T::one(), &x.data, i as isize, 1, &weight.data, 1, i as isize, T::one(), &mut out, o as isize, 1);
    Tensor::new(vec![bsz, o], out)
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (bsz, i) = (x.batch(), x.row_len());
    let o = weight.shape[0];
    let mut dw = vec![T::zero(); o * i];
    // dW (o × i) = gᵀ (o × B) · x (B × i)
    T::gemm(o, bsz, i, T::one(), &grad_out.data, 1, o as isize, &x.data, i as isize, 1, T::zero(), &mut dw, i as isize, 1);
    let mut db = vec![T::zero(); o];
    for r in 0..bsz {
        for (d, &g) in db.iter_mut().zip(&grad_out.data[r * o..(r + 1) * o]) {
            *d = *d + g;
        }
    }
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); bsz * i];
        T::gemm(bsz, o, i, T::one(), &grad_out.data, o as isize, 1, &weight.data, i as isize, 1, T::zero(), &mut dx, i as isize, 1);
        Tensor { shape: x.shape.clone(), data: dx }
    });
    (dx, Tensor { shape: weight.shape.clone(), data: dw }, Tensor { shape: vec![o], data: db })
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(&x.shape)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("avg_pool2 needs even spatial dims, got {:?}", x.shape));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data.chunks_exact(h * w) {
        for y in 0..oh {
            let r0 = &plane[2 * y * w..(2 * y + 1) * w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for xx in 0..ow {
                let s = (r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]);
                out.push(s * quarter);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = dims4(input_shape).expect("validated in forward");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (plane, g) in dx.chunks_exact_mut(h * w).zip(grad_out.data.chunks_exact(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = g[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    Tensor { shape: input_shape.to_vec(), data: dx }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(&x.shape)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data.chunks_exact(h * w) {
        for y in 0..oh {
            let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for xx in 0..ow {
                out.push(src[xx / 2]);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn upsample2_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = dims4(input_shape).expect("validated in forward");
    let ow = 2 * w;
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (plane, g) in dx.chunks_exact_mut(h * w).zip(grad_out.data.chunks_exact(4 * h * w)) {
        for y in 0..h {
            for x in 0..w {
                let top = (2 * y) * ow + 2 * x;
                let bot = top + ow;
                plane[y * w + x] = (g[top] + g[top + 1]) + (g[bot] + g[bot + 1]);
            }
        }
    }
    Tensor { shape: input_shape.to_vec(), data: dx }
}

pub fn leaky_relu<T: Real>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * slope
    }
}

/// Numerically stable `ln(1 + e^v)`.
pub fn softplus<T: Real>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
