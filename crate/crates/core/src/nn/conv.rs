//! 2-D convolution as a candle custom op.
//!
//! Dense and grouped convolutions go through im2col + GEMM (`matrixmultiply`);
//! depthwise convolutions (one input and one output channel per group) use
//! direct loops. Both directions of the backward pass are explicit kernels, so
//! gradients never route through candle's transposed-convolution path.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

/// Convolution hyper-parameters shared by forward and backward kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    /// "Same" padding for an odd kernel at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::default()
        }
    }

    pub fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.padding - self.dilation * (k - 1) - 1) / self.stride + 1
    }
}

/// Problem dimensions, resolved once per call.
#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: ConvGeometry,
}

impl Dims {
    fn cin_g(&self) -> usize {
        self.cin / self.g.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.g.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn n(&self) -> usize {
        self.oh * self.ow
    }
    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g.stride == 1 && self.g.padding == 0
    }

    #[inline]
    fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.g.stride + ky * self.g.dilation) as isize - self.g.padding as isize;
        (y >= 0 && (y as usize) < self.h).then_some(y as usize)
    }

    #[inline]
    fn src_x(&self, ox: usize, kx: usize) -> Option<usize> {
        let x = (ox * self.g.stride + kx * self.g.dilation) as isize - self.g.padding as isize;
        (x >= 0 && (x as usize) < self.w).then_some(x as usize)
    }
}

fn resolve(input: &[usize], kernel: &[usize], g: ConvGeometry) -> candle_core::Result<Dims> {
    let (&[b, cin, h, w], &[cout, cin_g, kh, kw]) = (input, kernel) else {
        candle_core::bail!("conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}");
    };
    if g.groups == 0 || cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cin_g {
        candle_core::bail!(
            "conv2d channel mismatch: input {input:?}, kernel {kernel:?}, groups {}",
            g.groups
        );
    }
    if h + 2 * g.padding < g.dilation * (kh - 1) + 1 || w + 2 * g.padding < g.dilation * (kw - 1) + 1 {
        candle_core::bail!("conv2d kernel {kernel:?} larger than padded input {input:?}");
    }
    Ok(Dims {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: g.out_len(h, kh),
        ow: g.out_len(w, kw),
        g,
    })
}

/// Scalar types the kernels run on.
pub(crate) trait Elem: Copy + Default + std::ops::AddAssign + std::ops::Mul<Output = Self> + 'static {
    /// Row-major C = A·B + beta·C with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
    );
    fn one() -> Self;
    fn wrap(v: Vec<Self>) -> CpuStorage;
}

macro_rules! impl_elem {
    ($t:ty, $gemm:path, $variant:ident) => {
        impl Elem for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
                assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
            fn one() -> Self {
                1.0
            }
            fn wrap(v: Vec<Self>) -> CpuStorage {
                CpuStorage::$variant(v)
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm, F32);
impl_elem!(f64, matrixmultiply::dgemm, F64);

fn im2col<T: Elem>(d: &Dims, img: &[T], group: usize, cols: &mut [T]) {
    let n = d.n();
    let hw = d.h * d.w;
    for ci in 0..d.cin_g() {
        let plane = &img[(group * d.cin_g() + ci) * hw..][..hw];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * n..][..n];
                for oy in 0..d.oh {
                    let line = &mut dst[oy * d.ow..][..d.ow];
                    match d.src_y(oy, ky) {
                        None => line.fill(T::default()),
                        Some(y) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match d.src_x(ox, kx) {
                                    Some(x) => plane[y * d.w + x],
                                    None => T::default(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(d: &Dims, cols: &[T], group: usize, img: &mut [T]) {
    let n = d.n();
    let hw = d.h * d.w;
    for ci in 0..d.cin_g() {
        let plane = &mut img[(group * d.cin_g() + ci) * hw..][..hw];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * n..][..n];
                for oy in 0..d.oh {
                    let Some(y) = d.src_y(oy, ky) else { continue };
                    for ox in 0..d.ow {
                        if let Some(x) = d.src_x(ox, kx) {
                            plane[y * d.w + x] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Elem>(d: &Dims, input: &[T], kernel: &[T]) -> Vec<T> {
    let (n, k) = (d.n(), d.k());
    let mut out = vec![T::default(); d.b * d.cout * n];
    if d.depthwise() {
        for b in 0..d.b {
            for c in 0..d.cin {
                let plane = &input[(b * d.cin + c) * d.h * d.w..][..d.h * d.w];
                let wk = &kernel[c * d.kh * d.kw..][..d.kh * d.kw];
                let dst = &mut out[(b * d.cout + c) * n..][..n];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = wk[ky * d.kw + kx];
                        for oy in 0..d.oh {
                            let Some(y) = d.src_y(oy, ky) else { continue };
                            for ox in 0..d.ow {
                                if let Some(x) = d.src_x(ox, kx) {
                                    dst[oy * d.ow + ox] += wv * plane[y * d.w + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        return out;
    }
    let mut cols = vec![T::default(); if d.pointwise() { 0 } else { k * n }];
    for b in 0..d.b {
        let img = &input[b * d.cin * d.h * d.w..][..d.cin * d.h * d.w];
        for g in 0..d.g.groups {
            let src: &[T] = if d.pointwise() {
                &img[g * d.cin_g() * n..][..k * n]
            } else {
                im2col(d, img, g, &mut cols);
                &cols
            };
            let w = &kernel[g * d.cout_g() * k..][..d.cout_g() * k];
            let dst = &mut out[(b * d.cout + g * d.cout_g()) * n..][..d.cout_g() * n];
            T::gemm(d.cout_g(), k, n, w, k, 1, src, n, 1, T::default(), dst);
        }
    }
    out
}

fn input_grad<T: Elem>(d: &Dims, grad: &[T], kernel: &[T]) -> Vec<T> {
    let (n, k) = (d.n(), d.k());
    let mut gin = vec![T::default(); d.b * d.cin * d.h * d.w];
    if d.depthwise() {
        for b in 0..d.b {
            for c in 0..d.cin {
                let plane = &mut gin[(b * d.cin + c) * d.h * d.w..][..d.h * d.w];
                let wk = &kernel[c * d.kh * d.kw..][..d.kh * d.kw];
                let src = &grad[(b * d.cout + c) * n..][..n];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = wk[ky * d.kw + kx];
                        for oy in 0..d.oh {
                            let Some(y) = d.src_y(oy, ky) else { continue };
                            for ox in 0..d.ow {
                                if let Some(x) = d.src_x(ox, kx) {
                                    plane[y * d.w + x] += wv * src[oy * d.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        return gin;
    }
    let mut cols = vec![T::default(); k * n];
    for b in 0..d.b {
        let img = &mut gin[b * d.cin * d.h * d.w..][..d.cin * d.h * d.w];
        for g in 0..d.g.groups {
            let w = &kernel[g * d.cout_g() * k..][..d.cout_g() * k];
            let gout = &grad[(b * d.cout + g * d.cout_g()) * n..][..d.cout_g() * n];
            if d.pointwise() {
                let dst = &mut img[g * d.cin_g() * n..][..k * n];
                T::gemm(k, d.cout_g(), n, w, 1, k, gout, n, 1, T::default(), dst);
            } else {
                T::gemm(k, d.cout_g(), n, w, 1, k, gout, n, 1, T::default(), &mut cols);
                col2im(d, &cols, g, img);
            }
        }
    }
    gin
}

fn kernel_grad<T: Elem>(d: &Dims, input: &[T], grad: &[T]) -> Vec<T> {
    let (n, k) = (d.n(), d.k());
    let mut gk = vec![T::default(); d.cout * k];
    if d.depthwise() {
        for b in 0..d.b {
            for c in 0..d.cin {
                let plane = &input[(b * d.cin + c) * d.h * d.w..][..d.h * d.w];
                let src = &grad[(b * d.cout + c) * n..][..n];
                let wk = &mut gk[c * d.kh * d.kw..][..d.kh * d.kw];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut acc = T::default();
                        for oy in 0..d.oh {
                            let Some(y) = d.src_y(oy, ky) else { continue };
                            for ox in 0..d.ow {
                                if let Some(x) = d.src_x(ox, kx) {
                                    acc += src[oy * d.ow + ox] * plane[y * d.w + x];
                                }
                            }
                        }
                        wk[ky * d.kw + kx] += acc;
                    }
                }
            }
        }
        return gk;
    }
    let mut cols = vec![T::default(); if d.pointwise() { 0 } else { k * n }];
    for b in 0..d.b {
        let img = &input[b * d.cin * d.h * d.w..][..d.cin * d.h * d.w];
        for g in 0..d.g.groups {
            let src: &[T] = if d.pointwise() {
                &img[g * d.cin_g() * n..][..k * n]
            } else {
                im2col(d, img, g, &mut cols);
                &cols
            };
            let gout = &grad[(b * d.cout + g * d.cout_g()) * n..][..d.cout_g() * n];
            let dst = &mut gk[g * d.cout_g() * k..][..d.cout_g() * k];
            T::gemm(d.cout_g(), n, k, gout, n, 1, src, 1, n, T::one(), dst);
        }
    }
    gk
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d kernels require contiguous operands"),
    }
}

/// Dispatches a kernel over the two supported float types.
fn dispatch(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    f32_fn: impl FnOnce(&[f32], &[f32]) -> Vec<f32>,
    f64_fn: impl FnOnce(&[f64], &[f64]) -> Vec<f64>,
) -> candle_core::Result<CpuStorage> {
    match (s1, s2) {
        (CpuStorage::F32(a), CpuStorage::F32(b)) => Ok(f32::wrap(f32_fn(contiguous(a, l1)?, contiguous(b, l2)?))),
        (CpuStorage::F64(a), CpuStorage::F64(b)) => Ok(f64::wrap(f64_fn(contiguous(a, l1)?, contiguous(b, l2)?))),
        _ => candle_core::bail!("conv2d supports matching f32 or f64 operands only"),
    }
}

struct Conv2dOp(ConvGeometry);

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "mtiqa-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = resolve(l1.dims(), l2.dims(), self.0)?;
        let out = dispatch(s1, l1, s2, l2, |x, k| forward(&d, x, k), |x, k| forward(&d, x, k))?;
        Ok((out, Shape::from((d.b, d.cout, d.oh, d.ow))))
    }

    fn bwd(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gi = grad.apply_op2_no_bwd(
            kernel,
            &InputGradOp {
                g: self.0,
                input_dims: input.dims().to_vec(),
            },
        )?;
        let gk = input.apply_op2_no_bwd(
            &grad,
            &KernelGradOp {
                g: self.0,
                kernel_dims: kernel.dims().to_vec(),
            },
        )?;
        Ok((Some(gi), Some(gk)))
    }
}

struct InputGradOp {
    g: ConvGeometry,
    input_dims: Vec<usize>,
}

impl CustomOp2 for InputGradOp {
    fn name(&self) -> &'static str {
        "mtiqa-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = resolve(&self.input_dims, l2.dims(), self.g)?;
        if l1.dims() != [d.b, d.cout, d.oh, d.ow] {
            candle_core::bail!("conv2d input-grad: unexpected gradient shape {:?}", l1.dims());
        }
        let out = dispatch(s1, l1, s2, l2, |g, k| input_grad(&d, g, k), |g, k| input_grad(&d, g, k))?;
        Ok((out, Shape::from(self.input_dims.clone())))
    }
}

struct KernelGradOp {
    g: ConvGeometry,
    kernel_dims: Vec<usize>,
}

impl CustomOp2 for KernelGradOp {
    fn name(&self) -> &'static str {
        "mtiqa-conv2d-kernel-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = resolve(l1.dims(), &self.kernel_dims, self.g)?;
        if l2.dims() != [d.b, d.cout, d.oh, d.ow] {
            candle_core::bail!("conv2d kernel-grad: unexpected gradient shape {:?}", l2.dims());
        }
        let out = dispatch(
            s1,
            l1,
            s2,
            l2,
            |x, g| kernel_grad(&d, x, g),
            |x, g| kernel_grad(&d, x, g),
        )?;
        Ok((out, Shape::from(self.kernel_dims.clone())))
    }
}

/// `input` is (B, C_in, H, W); `kernel` is (C_out, C_in / groups, kh, kw).
pub fn conv2d(input: &Tensor, kernel: &Tensor, geometry: ConvGeometry) -> candle_core::Result<Tensor> {
    input.contiguous()?.apply_op2(&kernel.contiguous()?, Conv2dOp(geometry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-line definition of a grouped, dilated, strided convolution.
    fn naive(x: &[f64], xd: [usize; 4], k: &[f64], kd: [usize; 4], g: ConvGeometry) -> Vec<f64> {
        let [b, cin, h, w] = xd;
        let [cout, cin_g, kh, kw] = kd;
        let oh = g.out_len(h, kh);
        let ow = g.out_len(w, kw);
        let cout_g = cout / g.groups;
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let xx = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    let cin_idx = grp * cin_g + ci;
                                    acc += k[((co * cin_g + ci) * kh + ky) * kw + kx]
                                        * x[((bi * cin + cin_idx) * h + y as usize) * w + xx as usize];
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn cases() -> Vec<([usize; 4], [usize; 4], ConvGeometry)> {
        let g = |stride, padding, dilation, groups| ConvGeometry {
            stride,
            padding,
            dilation,
            groups,
        };
        vec![
            ([2, 3, 9, 8], [4, 3, 3, 3], g(1, 1, 1, 1)),
            ([2, 3, 16, 16], [5, 3, 7, 7], g(4, 3, 1, 1)),
            ([1, 4, 8, 8], [4, 1, 5, 5], g(1, 2, 1, 4)),
            ([2, 4, 8, 8], [4, 1, 7, 7], g(1, 9, 3, 4)),
            ([2, 4, 6, 6], [6, 2, 3, 3], g(2, 1, 1, 2)),
            ([2, 6, 5, 7], [3, 6, 1, 1], g(1, 0, 1, 1)),
        ]
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (xd, kd, g) in cases() {
            let x = random(&mut rng, xd.iter().product());
            let k = random(&mut rng, kd.iter().product());
            let xt = Tensor::from_vec(x.clone(), &xd, &Device::Cpu).unwrap();
            let kt = Tensor::from_vec(k.clone(), &kd, &Device::Cpu).unwrap();
            let got = conv2d(&xt, &kt, g)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let want = naive(&x, xd, &k, kd, g);
            assert_eq!(got.len(), want.len(), "{xd:?} {kd:?}");
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{xd:?} {kd:?} {g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (xd, kd, g) = cases()[0];
        let x = random(&mut rng, xd.iter().product());
        let k = random(&mut rng, kd.iter().product());
        let xt = Tensor::from_vec(x, &xd, &Device::Cpu).unwrap();
        let kt = Tensor::from_vec(k, &kd, &Device::Cpu).unwrap();
        let hi = conv2d(&xt, &kt, g).unwrap();
        let lo = conv2d(&xt.to_dtype(DType::F32).unwrap(), &kt.to_dtype(DType::F32).unwrap(), g)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let diff = (hi - lo)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-5);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (xd, kd, g) in cases() {
            let x = random(&mut rng, xd.iter().product());
            let k = random(&mut rng, kd.iter().product());
            let xv = Var::from_vec(x.clone(), &xd, &Device::Cpu).unwrap();
            let kv = Var::from_vec(k.clone(), &kd, &Device::Cpu).unwrap();
            let out_len = naive(&x, xd, &k, kd, g).len();
            let probe = random(&mut rng, out_len);
            let loss_of =
                |x: &[f64], k: &[f64]| -> f64 { naive(x, xd, k, kd, g).iter().zip(&probe).map(|(a, b)| a * b).sum() };
            let pt = Tensor::from_vec(probe.clone(), out_len, &Device::Cpu).unwrap();
            let y = conv2d(&xv, &kv, g).unwrap().flatten_all().unwrap();
            let loss = (y * &pt).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let gx = grads.get(&xv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let gk = grads.get(&kv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let h = 1e-5;
            for i in (0..x.len()).step_by(7) {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += h;
                m[i] -= h;
                let fd = (loss_of(&p, &k) - loss_of(&m, &k)) / (2.0 * h);
                assert!((fd - gx[i]).abs() < 1e-7, "{xd:?} {g:?} dx[{i}]: {fd} vs {}", gx[i]);
            }
            for i in 0..k.len() {
                let (mut p, mut m) = (k.clone(), k.clone());
                p[i] += h;
                m[i] -= h;
                let fd = (loss_of(&x, &p) - loss_of(&x, &m)) / (2.0 * h);
                assert!((fd - gk[i]).abs() < 1e-7, "{kd:?} {g:?} dk[{i}]: {fd} vs {}", gk[i]);
            }
        }
    }
}
