//! 2-D convolution as a custom op: im2col + GEMM for the forward pass and
//! both gradients. Candle's CPU backward for conv2d goes through a naive
//! transposed convolution, which dominates training time on small CPUs.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.oh * self.ow
    }

    fn chw_in(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Input index for output coordinate `o` and kernel tap `k` along one
    /// axis, or `None` when it lands in the zero padding.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }
}

trait Element: WithDType + Default + std::ops::AddAssign {
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
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
}

impl Element for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

fn im2col<T: Element>(g: &Geom, x: &[T], cols: &mut [T]) {
    let hw = g.hw_out();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.oh {
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        d.fill(T::default());
                        continue;
                    };
                    let src = &x[(c * g.h + iy) * g.w..][..g.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        *v = g.src(ox, kx, g.w).map_or(T::default(), |ix| src[ix]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geom, cols: &[T], x: &mut [T]) {
    let hw = g.hw_out();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    let dst = &mut x[(c * g.h + iy) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Element>(g: &Geom, x: &[T], k: &[T]) -> Vec<T> {
    let (ckk, hw, chw) = (g.ckk(), g.hw_out(), g.chw_in());
    let mut cols = vec![T::default(); ckk * hw];
    let mut out = vec![T::default(); g.b * g.o * hw];
    for b in 0..g.b {
        im2col(g, &x[b * chw..][..chw], &mut cols);
        let o = &mut out[b * g.o * hw..][..g.o * hw];
        // out (O×HW) = k (O×CKK) · cols (CKK×HW)
        unsafe {
            T::gemm(
                g.o,
                ckk,
                hw,
                k.as_ptr(),
                ckk as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                T::default(),
                o.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    out
}

fn backward<T: Element>(
    g: &Geom,
    x: &[T],
    k: &[T],
    gy: &[T],
    want_x: bool,
    want_k: bool,
) -> (Vec<T>, Vec<T>) {
    let (ckk, hw, chw) = (g.ckk(), g.hw_out(), g.chw_in());
    let mut cols = vec![T::default(); ckk * hw];
    let mut gx = vec![T::default(); if want_x { g.b * chw } else { 0 }];
    let mut gk = vec![T::default(); if want_k { g.o * ckk } else { 0 }];
    for b in 0..g.b {
        let gyb = &gy[b * g.o * hw..][..g.o * hw];
        if want_k {
            im2col(g, &x[b * chw..][..chw], &mut cols);
            // gk (O×CKK) += gy (O×HW) · colsᵀ (HW×CKK)
            unsafe {
                T::gemm(
                    g.o,
                    hw,
                    ckk,
                    gyb.as_ptr(),
                    hw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    hw as isize,
                    T::from_f64(1.0),
                    gk.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
            }
        }
        if want_x {
            // dcols (CKK×HW) = kᵀ (CKK×O) · gy (O×HW)
            unsafe {
                T::gemm(
                    ckk,
                    g.o,
                    hw,
                    k.as_ptr(),
                    1,
                    ckk as isize,
                    gyb.as_ptr(),
                    hw as isize,
                    1,
                    T::default(),
                    cols.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            col2im(g, &cols, &mut gx[b * chw..][..chw]);
        }
    }
    (gx, gk)
}

impl Conv2dOp {
    fn geom(&self, xs: &[usize], ks: &[usize]) -> candle_core::Result<Geom> {
        let (&[b, c, h, w], &[o, kc, kh, kw]) = (xs, ks) else {
            candle_core::bail!("conv2d expects 4-d input and kernel, got {xs:?} and {ks:?}")
        };
        if kc != c {
            candle_core::bail!("conv2d channel mismatch: input has {c}, kernel expects {kc}")
        }
        if h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            candle_core::bail!("conv2d input {h}x{w} smaller than kernel {kh}x{kw}")
        }
        Ok(Geom {
            b,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * self.padding - kh) / self.stride + 1,
            ow: (w + 2 * self.padding - kw) / self.stride + 1,
            stride: self.stride,
            pad: self.padding,
        })
    }
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("conv2d: non-contiguous operand"),
    }
}

fn run_backward<T: Element>(
    g: &Geom,
    x: &Tensor,
    k: &Tensor,
    gy: &Tensor,
) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
    let (want_x, want_k) = (x.track_op(), k.track_op());
    let xs = x.flatten_all()?.to_vec1::<T>()?;
    let ks = k.flatten_all()?.to_vec1::<T>()?;
    let gys = gy.contiguous()?.flatten_all()?.to_vec1::<T>()?;
    let (gx, gk) = backward(g, &xs, &ks, &gys, want_x, want_k);
    let gx = want_x
        .then(|| Tensor::from_vec(gx, x.shape(), x.device()))
        .transpose()?;
    let gk = want_k
        .then(|| Tensor::from_vec(gk, k.shape(), k.device()))
        .transpose()?;
    Ok((gx, gk))
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom(l1.dims(), l2.dims())?;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward(&g, slice(s1, l1)?, slice(s2, l2)?))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward(&g, slice(s1, l1)?, slice(s2, l2)?))
            }
            _ => candle_core::bail!("conv2d supports f32 and f64 operands of the same dtype"),
        };
        Ok((out, Shape::from((g.b, g.o, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        gy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.geom(x.dims(), k.dims())?;
        match x.dtype() {
            DType::F32 => run_backward::<f32>(&g, x, k, gy),
            DType::F64 => run_backward::<f64>(&g, x, k, gy),
            dt => candle_core::bail!("conv2d: unsupported dtype {dt:?}"),
        }
    }
}

/// `x`: (B, C, H, W), `kernel`: (O, C, kh, kw). No bias.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&kernel.contiguous()?, Conv2dOp { stride, padding })
}
