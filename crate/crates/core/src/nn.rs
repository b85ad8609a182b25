//! Convolution, activations, pooling, upsampling, channel plumbing and the
//! ConvLSTM cell. Kernels live in [`kernels`]; the graph dispatches to them.

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, NodeId};
use crate::tensor::{Real, Tensor};

/// Weights of one 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Hidden and cell maps of a ConvLSTM, `[C,H,W]` or `[N,C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState<T = f32> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Real> ConvLstmState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            hidden: Tensor::zeros(shape),
            cell: Tensor::zeros(shape),
        }
    }
}

/// ConvLSTM weights: one 3x3 conv over `[input ‖ hidden]` producing the
/// input, forget, output and candidate gates stacked in that channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub const CONV_LSTM_KERNEL: usize = 3;

fn spatial(t: &Tensor<impl Real>) -> Result<kernels::Nchw> {
    kernels::nchw(t.shape()).map_err(Error::InvalidArgument)
}

fn rebuild<T: Real>(like: &[usize], c: usize, h: usize, w: usize, data: Vec<T>) -> Tensor<T> {
    let shape = if like.len() == 4 {
        vec![like[0], c, h, w]
    } else {
        vec![c, h, w]
    };
    Tensor::new(shape, data).expect("kernel output matches shape")
}

pub fn conv2d<T: Real>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let geom = kernels::ConvGeom::new(input.shape(), params.kernel.shape(), params.stride, params.padding)
        .map_err(Error::InvalidArgument)?;
    if params.bias.shape() != [geom.co] {
        return Err(Error::InvalidArgument(format!(
            "bias shape {:?} for {} output channels",
            params.bias.shape(),
            geom.co
        )));
    }
    let (out, _) = kernels::conv2d_forward(input.data(), params.kernel.data(), params.bias.data(), &geom);
    Ok(rebuild(input.shape(), geom.co, geom.ho, geom.wo, out))
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    Tensor::new(input.shape().to_vec(), kernels::relu(input.data())).expect("same shape")
}

pub fn max_pool2d<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let d = spatial(input)?;
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "max_pool2d needs even spatial size, got {}x{}",
            d.h, d.w
        )));
    }
    let (out, _) = kernels::max_pool2d_forward(input.data(), d);
    Ok(rebuild(input.shape(), d.c, d.h / 2, d.w / 2, out))
}

pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if ![2, 4, 8].contains(&factor) {
        return Err(Error::InvalidArgument(format!(
            "unsupported upsample factor {factor}, expected 2, 4 or 8"
        )));
    }
    let d = spatial(input)?;
    let out = kernels::upsample_forward(input.data(), d, factor);
    Ok(rebuild(input.shape(), d.c, d.h * factor, d.w * factor, out))
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (da, db) = (spatial(a)?, spatial(b)?);
    if (da.n, da.h, da.w) != (db.n, db.h, db.w) || a.shape().len() != b.shape().len() {
        return Err(Error::InvalidArgument(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = kernels::concat_forward(a.data(), da, b.data(), db);
    Ok(rebuild(a.shape(), da.c + db.c, da.h, da.w, out))
}

pub fn softmax_channels<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let d = spatial(input)?;
    if d.c < 2 {
        return Err(Error::InvalidArgument("softmax needs at least 2 channels".into()));
    }
    Ok(rebuild(
        input.shape(),
        d.c,
        d.h,
        d.w,
        kernels::softmax_forward(input.data(), d),
    ))
}

/// Registers one ConvLSTM step in a graph. `kernel` is `[4C, C_in + C, 3, 3]`.
pub fn conv_lstm_step_node(
    b: &mut GraphBuilder,
    input: NodeId,
    hidden: NodeId,
    cell: NodeId,
    kernel: NodeId,
    bias: NodeId,
) -> Result<(NodeId, NodeId)> {
    let c = kernels::nchw(b.shape(hidden)).map_err(Error::InvalidArgument)?.c;
    if b.shape(hidden) != b.shape(cell) {
        return Err(Error::shape("conv_lstm", "hidden and cell shapes differ"));
    }
    let stacked = b.concat(input, hidden)?;
    let gates = b.conv2d(stacked, kernel, bias, 1, CONV_LSTM_KERNEL / 2)?;
    let i = b.slice_channels(gates, 0, c)?;
    let f = b.slice_channels(gates, c, c)?;
    let o = b.slice_channels(gates, 2 * c, c)?;
    let g = b.slice_channels(gates, 3 * c, c)?;
    let i = b.sigmoid(i);
    let f = b.sigmoid(f);
    let o = b.sigmoid(o);
    let g = b.tanh(g);
    let keep = b.mul(f, cell)?;
    let write = b.mul(i, g)?;
    let new_cell = b.add(keep, write)?;
    let squashed = b.tanh(new_cell);
    let new_hidden = b.mul(o, squashed)?;
    Ok((new_hidden, new_cell))
}

/// Eager ConvLSTM step; returns the output (new hidden) and the new state.
pub fn conv_lstm_step<T: Real>(
    input: &Tensor<T>,
    state: &ConvLstmState<T>,
    params: &ConvLstmParams<T>,
) -> Result<(Tensor<T>, ConvLstmState<T>)> {
    if state.hidden.shape() != state.cell.shape() {
        return Err(Error::InvalidArgument("hidden and cell shapes differ".into()));
    }
    let c = spatial(&state.hidden)?.c;
    if params.kernel.shape().first() != Some(&(4 * c)) {
        return Err(Error::InvalidArgument(format!(
            "gate kernel {:?} does not produce 4x{c} channels",
            params.kernel.shape()
        )));
    }
    let stacked = concat_channels(input, &state.hidden)?;
    let gates = conv2d(
        &stacked,
        &Conv2dParams {
            kernel: params.kernel.clone(),
            bias: params.bias.clone(),
            stride: 1,
            padding: CONV_LSTM_KERNEL / 2,
        },
    )?;
    let d = spatial(&gates)?;
    let plane = d.h * d.w;
    let mut hidden = vec![T::zero(); d.n * c * plane];
    let mut cell = vec![T::zero(); d.n * c * plane];
    let g = gates.data();
    for n in 0..d.n {
        for ch in 0..c {
            for p in 0..plane {
                let at = |gate: usize| g[(n * 4 * c + gate * c + ch) * plane + p];
                let idx = (n * c + ch) * plane + p;
                let i = kernels::sigmoid(at(0));
                let f = kernels::sigmoid(at(1));
                let o = kernels::sigmoid(at(2));
                let cand = at(3).tanh();
                let cn = f * state.cell.data()[idx] + i * cand;
                cell[idx] = cn;
                hidden[idx] = o * cn.tanh();
            }
        }
    }
    let shape = state.hidden.shape().to_vec();
    let hidden = Tensor::new(shape.clone(), hidden)?;
    let cell = Tensor::new(shape, cell)?;
    Ok((hidden.clone(), ConvLstmState { hidden, cell }))
}

pub mod kernels {
    //! Slice-level forward/backward routines over `[N,C,H,W]` buffers.

    use crate::tensor::Real;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct Nchw {
        pub n: usize,
        pub c: usize,
        pub h: usize,
        pub w: usize,
    }

    /// Interprets `[C,H,W]` as a batch of one.
    pub fn nchw(shape: &[usize]) -> Result<Nchw, String> {
        match *shape {
            [c, h, w] => Ok(Nchw { n: 1, c, h, w }),
            [n, c, h, w] => Ok(Nchw { n, c, h, w }),
            _ => Err(format!("expected [C,H,W] or [N,C,H,W], got {shape:?}")),
        }
    }

    #[inline]
    pub fn sigmoid<T: Real>(x: T) -> T {
        if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        }
    }

    pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
        x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
    }

    #[derive(Debug, Clone, Copy)]
    pub struct ConvGeom {
        pub n: usize,
        pub ci: usize,
        pub h: usize,
        pub w: usize,
        pub co: usize,
        pub kh: usize,
        pub kw: usize,
        pub stride: usize,
        pub pad: usize,
        pub ho: usize,
        pub wo: usize,
    }

    impl ConvGeom {
        pub fn new(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self, String> {
            let d = nchw(x)?;
            let [co, ci, kh, kw] = *kernel else {
                return Err(format!("kernel must be [C_out,C_in,k_h,k_w], got {kernel:?}"));
            };
            if ci != d.c {
                return Err(format!("input has {} channels, kernel expects {ci}", d.c));
            }
            if kh == 0 || kw == 0 {
                return Err("empty kernel".into());
            }
            if stride == 0 {
                return Err("stride must be positive".into());
            }
            if d.h + 2 * pad < kh || d.w + 2 * pad < kw {
                return Err(format!("kernel {kh}x{kw} larger than padded input {}x{}", d.h, d.w));
            }
            Ok(Self {
                n: d.n,
                ci,
                h: d.h,
                w: d.w,
                co,
                kh,
                kw,
                stride,
                pad,
                ho: (d.h + 2 * pad - kh) / stride + 1,
                wo: (d.w + 2 * pad - kw) / stride + 1,
            })
        }

        pub fn k(&self) -> usize {
            self.ci * self.kh * self.kw
        }

        pub fn cols(&self) -> usize {
            self.n * self.ho * self.wo
        }

        /// Multiply-accumulates per batch element.
        pub fn macs(&self) -> u64 {
            (self.co * self.k() * self.ho * self.wo) as u64
        }
    }

    /// Unfolds `x` into a `[K, N*Ho*Wo]` matrix.
    fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
        let plane = g.ho * g.wo;
        let ncols = g.cols();
        let mut cols = vec![T::zero(); g.k() * ncols];
        for ci in 0..g.ci {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ci * g.kh + ky) * g.kw + kx;
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    for n in 0..g.n {
                        let src = &x[(n * g.ci + ci) * g.h * g.w..(n * g.ci + ci + 1) * g.h * g.w];
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                            let dst = &mut dst_row[n * plane + oy * g.wo..n * plane + (oy + 1) * g.wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
        let plane = g.ho * g.wo;
        let ncols = g.cols();
        let mut dx = vec![T::zero(); g.n * g.ci * g.h * g.w];
        for ci in 0..g.ci {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ci * g.kh + ky) * g.kw + kx;
                    let src_row = &cols[row * ncols..(row + 1) * ncols];
                    for n in 0..g.n {
                        let base = (n * g.ci + ci) * g.h * g.w;
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let dst_row = base + iy as usize * g.w;
                            for ox in 0..g.wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    let v = src_row[n * plane + oy * g.wo + ox];
                                    dx[dst_row + ix as usize] = dx[dst_row + ix as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the unfolded input kept for backward.
    pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
        let cols = im2col(x, g);
        let ncols = g.cols();
        let plane = g.ho * g.wo;
        let k = g.k();
        let mut out = vec![T::zero(); g.co * ncols];
        if g.n == 1 {
            T::gemm(
                g.co,
                k,
                ncols,
                w,
                k as isize,
                1,
                &cols,
                ncols as isize,
                1,
                T::zero(),
                &mut out,
                ncols as isize,
                1,
            );
            for co in 0..g.co {
                out[co * plane..(co + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v + b[co]);
            }
            return (out, cols);
        }
        let mut tmp = vec![T::zero(); g.co * ncols];
        T::gemm(
            g.co,
            k,
            ncols,
            w,
            k as isize,
            1,
            &cols,
            ncols as isize,
            1,
            T::zero(),
            &mut tmp,
            ncols as isize,
            1,
        );
        for n in 0..g.n {
            for co in 0..g.co {
                let src = &tmp[co * ncols + n * plane..co * ncols + (n + 1) * plane];
                let dst = &mut out[(n * g.co + co) * plane..(n * g.co + co + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + b[co];
                }
            }
        }
        (out, cols)
    }

    /// Returns `(dx, dw, db)`; `dx` only when requested.
    pub fn conv2d_backward<T: Real>(
        w: &[T],
        cols: &[T],
        dy: &[T],
        g: &ConvGeom,
        want_dx: bool,
    ) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
        let ncols = g.cols();
        let plane = g.ho * g.wo;
        let k = g.k();
        // dy laid out as [C_out, N*P]
        let dym: std::borrow::Cow<[T]> = if g.n == 1 {
            std::borrow::Cow::Borrowed(dy)
        } else {
            let mut m = vec![T::zero(); g.co * ncols];
            for n in 0..g.n {
                for co in 0..g.co {
                    m[co * ncols + n * plane..co * ncols + (n + 1) * plane]
                        .copy_from_slice(&dy[(n * g.co + co) * plane..(n * g.co + co + 1) * plane]);
                }
            }
            std::borrow::Cow::Owned(m)
        };
        let db: Vec<T> = (0..g.co)
            .map(|co| dym[co * ncols..(co + 1) * ncols].iter().copied().sum())
            .collect();
        let mut dw = vec![T::zero(); g.co * k];
        T::gemm(
            g.co,
            ncols,
            k,
            &dym,
            ncols as isize,
            1,
            cols,
            1,
            ncols as isize,
            T::zero(),
            &mut dw,
            k as isize,
            1,
        );
        let dx = want_dx.then(|| {
            let mut dcols = vec![T::zero(); k * ncols];
            T::gemm(
                k,
                g.co,
                ncols,
                w,
                1,
                k as isize,
                &dym,
                ncols as isize,
                1,
                T::zero(),
                &mut dcols,
                ncols as isize,
                1,
            );
            col2im(&dcols, g)
        });
        (dx, dw, db)
    }

    /// 2x2 window, stride 2. Ties go to the first element in row-major order.
    pub fn max_pool2d_forward<T: Real>(x: &[T], d: Nchw) -> (Vec<T>, Vec<usize>) {
        let (ho, wo) = (d.h / 2, d.w / 2);
        let mut out = Vec::with_capacity(d.n * d.c * ho * wo);
        let mut idx = Vec::with_capacity(out.capacity());
        for plane in 0..d.n * d.c {
            let base = plane * d.h * d.w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * d.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = base + (2 * oy + dy) * d.w + 2 * ox + dx;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                    out.push(x[best]);
                    idx.push(best);
                }
            }
        }
        (out, idx)
    }

    pub fn max_pool2d_backward<T: Real>(idx: &[usize], dy: &[T], input_len: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); input_len];
        for (&i, &g) in idx.iter().zip(dy) {
            dx[i] = dx[i] + g;
        }
        dx
    }

    /// Source index pairs and the weight of the second one, per output coordinate
    /// (half-pixel centers, edge clamped).
    pub fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
        (0..len * factor)
            .map(|o| {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    }

    pub fn upsample_forward<T: Real>(x: &[T], d: Nchw, factor: usize) -> Vec<T> {
        let ty = upsample_taps(d.h, factor);
        let tx = upsample_taps(d.w, factor);
        let (ho, wo) = (d.h * factor, d.w * factor);
        let mut out = vec![T::zero(); d.n * d.c * ho * wo];
        for plane in 0..d.n * d.c {
            let src = &x[plane * d.h * d.w..(plane + 1) * d.h * d.w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::of_f64(ly);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::of_f64(lx);
                    let hx = T::one() - lx;
                    dst[oy * wo + ox] = hy * (hx * src[y0 * d.w + x0] + lx * src[y0 * d.w + x1])
                        + ly * (hx * src[y1 * d.w + x0] + lx * src[y1 * d.w + x1]);
                }
            }
        }
        out
    }

    pub fn upsample_backward<T: Real>(dy: &[T], d: Nchw, factor: usize) -> Vec<T> {
        let ty = upsample_taps(d.h, factor);
        let tx = upsample_taps(d.w, factor);
        let (ho, wo) = (d.h * factor, d.w * factor);
        let mut dx = vec![T::zero(); d.n * d.c * d.h * d.w];
        for plane in 0..d.n * d.c {
            let src = &dy[plane * ho * wo..(plane + 1) * ho * wo];
            let dst = &mut dx[plane * d.h * d.w..(plane + 1) * d.h * d.w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::of_f64(ly);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::of_f64(lx);
                    let hx = T::one() - lx;
                    let g = src[oy * wo + ox];
                    dst[y0 * d.w + x0] = dst[y0 * d.w + x0] + g * hy * hx;
                    dst[y0 * d.w + x1] = dst[y0 * d.w + x1] + g * hy * lx;
                    dst[y1 * d.w + x0] = dst[y1 * d.w + x0] + g * ly * hx;
                    dst[y1 * d.w + x1] = dst[y1 * d.w + x1] + g * ly * lx;
                }
            }
        }
        dx
    }

    pub fn concat_forward<T: Real>(a: &[T], da: Nchw, b: &[T], db: Nchw) -> Vec<T> {
        let plane = da.h * da.w;
        let mut out = Vec::with_capacity(a.len() + b.len());
        for n in 0..da.n {
            out.extend_from_slice(&a[n * da.c * plane..(n + 1) * da.c * plane]);
            out.extend_from_slice(&b[n * db.c * plane..(n + 1) * db.c * plane]);
        }
        out
    }

    pub fn concat_backward<T: Real>(dy: &[T], da: Nchw, db: Nchw) -> (Vec<T>, Vec<T>) {
        let plane = da.h * da.w;
        let (sa, sb) = (da.c * plane, db.c * plane);
        let mut ga = Vec::with_capacity(da.n * sa);
        let mut gb = Vec::with_capacity(da.n * sb);
        for n in 0..da.n {
            let chunk = &dy[n * (sa + sb)..(n + 1) * (sa + sb)];
            ga.extend_from_slice(&chunk[..sa]);
            gb.extend_from_slice(&chunk[sa..]);
        }
        (ga, gb)
    }

    pub fn slice_forward<T: Real>(x: &[T], d: Nchw, start: usize, len: usize) -> Vec<T> {
        let plane = d.h * d.w;
        let mut out = Vec::with_capacity(d.n * len * plane);
        for n in 0..d.n {
            out.extend_from_slice(&x[(n * d.c + start) * plane..(n * d.c + start + len) * plane]);
        }
        out
    }

    pub fn slice_backward<T: Real>(dy: &[T], d: Nchw, start: usize, len: usize) -> Vec<T> {
        let plane = d.h * d.w;
        let mut dx = vec![T::zero(); d.n * d.c * plane];
        for n in 0..d.n {
            dx[(n * d.c + start) * plane..(n * d.c + start + len) * plane]
                .copy_from_slice(&dy[n * len * plane..(n + 1) * len * plane]);
        }
        dx
    }

    /// Per-pixel softmax over channels with max subtraction.
    pub fn softmax_forward<T: Real>(x: &[T], d: Nchw) -> Vec<T> {
        let plane = d.h * d.w;
        let mut out = vec![T::zero(); x.len()];
        for n in 0..d.n {
            let base = n * d.c * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let m = (0..d.c).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..d.c {
                    let e = (x[at(c)] - m).exp();
                    out[at(c)] = e;
                    z = z + e;
                }
                for c in 0..d.c {
                    out[at(c)] = out[at(c)] / z;
                }
            }
        }
        out
    }

    pub fn softmax_backward<T: Real>(y: &[T], dy: &[T], d: Nchw) -> Vec<T> {
        let plane = d.h * d.w;
        let mut dx = vec![T::zero(); y.len()];
        for n in 0..d.n {
            let base = n * d.c * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let dot: T = (0..d.c).map(|c| y[at(c)] * dy[at(c)]).sum();
                for c in 0..d.c {
                    dx[at(c)] = y[at(c)] * (dy[at(c)] - dot);
                }
            }
        }
        dx
    }
}
