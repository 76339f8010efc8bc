use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Spatial kernel size. Every convolution in the network is 3×3 with one
/// pixel of zero padding, so outputs keep the input's height and width.
pub const KERNEL_SIZE: usize = 3;
const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;

/// Weights of one 3×3 convolution layer.
///
/// `kernel` is laid out `[ky][kx][in][out]`, so for a fixed tap and input
/// channel the output-channel weights are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvParams {
            in_channels,
            out_channels,
            kernel: vec![0.0; TAPS * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::dim("convolution channel counts must be positive"));
        }
        if kernel.len() != TAPS * in_channels * out_channels {
            return Err(Error::dim(format!(
                "kernel has {} weights, expected 3x3x{in_channels}x{out_channels}",
                kernel.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::dim(format!(
                "bias has {} entries, expected {out_channels}",
                bias.len()
            )));
        }
        Ok(ConvParams {
            in_channels,
            out_channels,
            kernel,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut [f64] {
        &mut self.kernel
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn kernel_and_bias_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.kernel, &mut self.bias)
    }

    #[inline]
    pub fn kernel_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * KERNEL_SIZE + kx) * self.in_channels + ci) * self.out_channels + co
    }

    pub fn weight(&self, ky: usize, kx: usize, ci: usize, co: usize) -> f64 {
        self.kernel[self.kernel_index(ky, kx, ci, co)]
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    /// Kernel re-laid out as `[ky][kx][out][in]` for the input-gradient pass.
    fn transposed_kernel(&self) -> Vec<f64> {
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut t = vec![0.0; self.kernel.len()];
        for tap in 0..TAPS {
            let src = &self.kernel[tap * cin * cout..(tap + 1) * cin * cout];
            let dst = &mut t[tap * cin * cout..(tap + 1) * cin * cout];
            for ci in 0..cin {
                for co in 0..cout {
                    dst[co * cin + ci] = src[ci * cout + co];
                }
            }
        }
        t
    }
}

// Output-channel counts with a register-blocked implementation; anything else
// takes the generic path.
macro_rules! by_width {
    ($cout:expr, $fixed:ident::<N>($($arg:expr),*), $generic:expr) => {
        match $cout {
            3 => $fixed::<3>($($arg),*),
            8 => $fixed::<8>($($arg),*),
            16 => $fixed::<16>($($arg),*),
            32 => $fixed::<32>($($arg),*),
            _ => $generic,
        }
    };
}

/// Same-size 3×3 cross-correlation with zero padding.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    if input.channels() != params.in_channels {
        return Err(Error::dim(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.channels(),
            params.in_channels
        )));
    }
    let (h, w, _) = input.shape();
    let cout = params.out_channels;
    let mut out = vec![0.0; h * w * cout];
    by_width!(
        cout,
        forward_fixed::<N>(input, params, &mut out),
        forward_generic(input, params, &mut out)
    );
    Tensor::from_vec(h, w, cout, out)
}

fn forward_fixed<const N: usize>(input: &Tensor, params: &ConvParams, out: &mut [f64]) {
    let (h, w, cin) = input.shape();
    let src = input.data();
    let bias: &[f64; N] = params.bias.as_slice().try_into().expect("bias width");
    out.par_chunks_mut(w * N).enumerate().for_each(|(y, row)| {
        for (x, px) in row.chunks_exact_mut(N).enumerate() {
            // Independent partial sums over input channels keep several
            // accumulation chains in flight.
            let (mut a0, mut a1, mut a2, mut a3) = (*bias, [0.0; N], [0.0; N], [0.0; N]);
            for ky in 0..KERNEL_SIZE {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else {
                    continue;
                };
                for kx in 0..KERNEL_SIZE {
                    let Some(sx) = (x + kx).checked_sub(1).filter(|&sx| sx < w) else {
                        continue;
                    };
                    let inp = &src[(sy * w + sx) * cin..][..cin];
                    let tap = &params.kernel[(ky * KERNEL_SIZE + kx) * cin * N..][..cin * N];
                    let inp_chunks = inp.chunks_exact(4);
                    let tap_chunks = tap.chunks_exact(4 * N);
                    let (inp_rest, tap_rest) = (inp_chunks.remainder(), tap_chunks.remainder());
                    for (a, k) in inp_chunks.zip(tap_chunks) {
                        fma_row::<N>(&mut a0, a[0], &k[..N]);
                        fma_row::<N>(&mut a1, a[1], &k[N..2 * N]);
                        fma_row::<N>(&mut a2, a[2], &k[2 * N..3 * N]);
                        fma_row::<N>(&mut a3, a[3], &k[3 * N..]);
                    }
                    for (&a, k) in inp_rest.iter().zip(tap_rest.chunks_exact(N)) {
                        fma_row::<N>(&mut a0, a, k);
                    }
                }
            }
            for (o, v) in px.iter_mut().enumerate() {
                *v = (a0[o] + a1[o]) + (a2[o] + a3[o]);
            }
        }
    });
}

/// `acc += a · k` over one row of `N` weights.
#[inline(always)]
fn fma_row<const N: usize>(acc: &mut [f64; N], a: f64, k: &[f64]) {
    let k: &[f64; N] = k.try_into().expect("row width");
    for o in 0..N {
        acc[o] += a * k[o];
    }
}

fn forward_generic(input: &Tensor, params: &ConvParams, out: &mut [f64]) {
    let (h, w, cin) = input.shape();
    let cout = params.out_channels;
    let src = input.data();
    out.par_chunks_mut(w * cout)
        .enumerate()
        .for_each(|(y, row)| {
            for px in row.chunks_exact_mut(cout) {
                px.copy_from_slice(&params.bias);
            }
            for ky in 0..KERNEL_SIZE {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else {
                    continue;
                };
                for kx in 0..KERNEL_SIZE {
                    let tap = &params.kernel[(ky * KERNEL_SIZE + kx) * cin * cout..][..cin * cout];
                    // Output columns whose source column sx = x + kx - 1 is inside the image.
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for x in x_lo..x_hi {
                        let sx = x + kx - 1;
                        let inp = &src[(sy * w + sx) * cin..][..cin];
                        let acc = &mut row[x * cout..][..cout];
                        for (&a, krow) in inp.iter().zip(tap.chunks_exact(cout)) {
                            for (o, &k) in acc.iter_mut().zip(krow) {
                                *o += a * k;
                            }
                        }
                    }
                }
            }
        });
}

/// Exact gradients of [`conv2d_forward`] given the output cotangent.
pub fn conv2d_backward(
    grad_out: &Tensor,
    cached_input: &Tensor,
    params: &ConvParams,
) -> Result<ConvGrads> {
    let (h, w, cin) = cached_input.shape();
    let cout = params.out_channels;
    if cin != params.in_channels || grad_out.shape() != (h, w, cout) {
        return Err(Error::dim(format!(
            "conv2d_backward: cotangent {:?} / input {:?} inconsistent with {}->{} kernel",
            grad_out.shape(),
            cached_input.shape(),
            params.in_channels,
            cout
        )));
    }

    let mut grad_bias = vec![0.0; cout];
    for px in grad_out.data().chunks_exact(cout) {
        for (b, &v) in grad_bias.iter_mut().zip(px) {
            *b += v;
        }
    }

    // Kernel gradient: per-row partial sums, reduced in row order so the
    // result does not depend on how rows were scheduled.
    let row_partials: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut gk = vec![0.0; TAPS * cin * cout];
            by_width!(
                cout,
                kernel_grad_row_fixed::<N>(grad_out, cached_input, y, &mut gk),
                kernel_grad_row_generic(grad_out, cached_input, y, &mut gk)
            );
            gk
        })
        .collect();
    let mut grad_kernel = vec![0.0; TAPS * cin * cout];
    for partial in &row_partials {
        for (a, b) in grad_kernel.iter_mut().zip(partial) {
            *a += b;
        }
    }

    let mut grad_in = vec![0.0; h * w * cin];
    by_width!(
        cout,
        input_grad_fixed::<N>(grad_out, params, &mut grad_in),
        input_grad_generic(grad_out, params, &mut grad_in)
    );

    Ok(ConvGrads {
        input: Tensor::from_vec(h, w, cin, grad_in)?,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

/// Valid output-column range `[lo, hi)` for tap column `kx`.
fn column_range(kx: usize, w: usize) -> (usize, usize) {
    (1usize.saturating_sub(kx), (w + 1 - kx).min(w))
}

fn kernel_grad_row_fixed<const N: usize>(
    grad_out: &Tensor,
    input: &Tensor,
    y: usize,
    gk: &mut [f64],
) {
    const B: usize = 4;
    let (h, w, cin) = input.shape();
    let grow = &grad_out.data()[y * w * N..][..w * N];
    for ky in 0..KERNEL_SIZE {
        let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else {
            continue;
        };
        let srow = &input.data()[sy * w * cin..][..w * cin];
        for kx in 0..KERNEL_SIZE {
            let (x_lo, x_hi) = column_range(kx, w);
            let tap = &mut gk[(ky * KERNEL_SIZE + kx) * cin * N..][..cin * N];
            let full = cin / B * B;
            for ci in (0..full).step_by(B) {
                kernel_grad_block::<N, B>(grow, srow, cin, ci, kx, x_lo, x_hi, tap);
            }
            for ci in full..cin {
                kernel_grad_block::<N, 1>(grow, srow, cin, ci, kx, x_lo, x_hi, tap);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn kernel_grad_block<const N: usize, const B: usize>(
    grow: &[f64],
    srow: &[f64],
    cin: usize,
    ci: usize,
    kx: usize,
    x_lo: usize,
    x_hi: usize,
    tap: &mut [f64],
) {
    let mut acc = [[0.0; N]; B];
    for x in x_lo..x_hi {
        let sx = x + kx - 1;
        let go: &[f64; N] = grow[x * N..][..N].try_into().expect("pixel width");
        let inp: &[f64; B] = srow[sx * cin + ci..][..B].try_into().expect("block width");
        for b in 0..B {
            for o in 0..N {
                acc[b][o] += inp[b] * go[o];
            }
        }
    }
    for (b, row) in acc.iter().enumerate() {
        for (t, a) in tap[(ci + b) * N..][..N].iter_mut().zip(row) {
            *t += a;
        }
    }
}

fn kernel_grad_row_generic(grad_out: &Tensor, input: &Tensor, y: usize, gk: &mut [f64]) {
    let (h, w, cin) = input.shape();
    let cout = grad_out.channels();
    let (g, src) = (grad_out.data(), input.data());
    for ky in 0..KERNEL_SIZE {
        let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else {
            continue;
        };
        for kx in 0..KERNEL_SIZE {
            let tap = &mut gk[(ky * KERNEL_SIZE + kx) * cin * cout..][..cin * cout];
            let (x_lo, x_hi) = column_range(kx, w);
            for x in x_lo..x_hi {
                let sx = x + kx - 1;
                let inp = &src[(sy * w + sx) * cin..][..cin];
                let go = &g[(y * w + x) * cout..][..cout];
                for (&a, krow) in inp.iter().zip(tap.chunks_exact_mut(cout)) {
                    for (k, &gv) in krow.iter_mut().zip(go) {
                        *k += a * gv;
                    }
                }
            }
        }
    }
}

// Input pixel (sy, sx) feeds output (sy - ky + 1, sx - kx + 1) through tap
// (ky, kx), so its gradient is Σ_taps Σ_out g[y][x][out] · K[tap][in][out]:
// a convolution of the cotangent with the transposed kernel. The transposed
// kernel is stored as [lane block][tap][out][lane], with input channels padded
// to whole blocks, so each block's weights are contiguous and full width.
fn input_grad_fixed<const N: usize>(grad_out: &Tensor, params: &ConvParams, grad_in: &mut [f64]) {
    const LANES: usize = 16;
    let (h, w, _) = grad_out.shape();
    let cin = params.in_channels;
    let padded = cin.div_ceil(LANES) * LANES;
    let block_len = TAPS * N * LANES;
    let mut kt = vec![0.0; padded / LANES * block_len];
    for tap in 0..TAPS {
        for ci in 0..cin {
            for co in 0..N {
                let at = (ci / LANES) * block_len + (tap * N + co) * LANES + ci % LANES;
                kt[at] = params.kernel[(tap * cin + ci) * N + co];
            }
        }
    }
    let g = grad_out.data();
    grad_in
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(sy, row)| {
            for (sx, out) in row.chunks_exact_mut(cin).enumerate() {
                let mut taps = [(0usize, 0usize); TAPS];
                let mut n = 0;
                for ky in 0..KERNEL_SIZE {
                    let Some(y) = (sy + 1).checked_sub(ky).filter(|&y| y < h) else {
                        continue;
                    };
                    for kx in 0..KERNEL_SIZE {
                        let Some(x) = (sx + 1).checked_sub(kx).filter(|&x| x < w) else {
                            continue;
                        };
                        taps[n] = ((y * w + x) * N, (ky * KERNEL_SIZE + kx) * N * LANES);
                        n += 1;
                    }
                }
                for (b, weights) in kt.chunks_exact(block_len).enumerate() {
                    let block = b * LANES;
                    let (mut a0, mut a1, mut a2, mut a3) =
                        ([0.0; LANES], [0.0; LANES], [0.0; LANES], [0.0; LANES]);
                    for &(g_off, k_off) in &taps[..n] {
                        let go = &g[g_off..][..N];
                        let k = &weights[k_off..][..N * LANES];
                        let go_chunks = go.chunks_exact(4);
                        let k_chunks = k.chunks_exact(4 * LANES);
                        let (go_rest, k_rest) = (go_chunks.remainder(), k_chunks.remainder());
                        for (a, k) in go_chunks.zip(k_chunks) {
                            fma_row::<LANES>(&mut a0, a[0], &k[..LANES]);
                            fma_row::<LANES>(&mut a1, a[1], &k[LANES..2 * LANES]);
                            fma_row::<LANES>(&mut a2, a[2], &k[2 * LANES..3 * LANES]);
                            fma_row::<LANES>(&mut a3, a[3], &k[3 * LANES..]);
                        }
                        for (&a, k) in go_rest.iter().zip(k_rest.chunks_exact(LANES)) {
                            fma_row::<LANES>(&mut a0, a, k);
                        }
                    }
                    let valid = (cin - block).min(LANES);
                    for (l, v) in out[block..block + valid].iter_mut().enumerate() {
                        *v = (a0[l] + a1[l]) + (a2[l] + a3[l]);
                    }
                }
            }
        });
}

fn input_grad_generic(grad_out: &Tensor, params: &ConvParams, grad_in: &mut [f64]) {
    let (h, w, cout) = grad_out.shape();
    let cin = params.in_channels;
    let g = grad_out.data();
    let kt = params.transposed_kernel();
    grad_in
        .par_chunks_mut(w * cin)
        .enumerate()
        .for_each(|(sy, row)| {
            for ky in 0..KERNEL_SIZE {
                let Some(y) = (sy + 1).checked_sub(ky).filter(|&y| y < h) else {
                    continue;
                };
                for kx in 0..KERNEL_SIZE {
                    let tap = &kt[(ky * KERNEL_SIZE + kx) * cin * cout..][..cin * cout];
                    let sx_lo = kx.saturating_sub(1);
                    let sx_hi = (w + kx).saturating_sub(1).min(w);
                    for sx in sx_lo..sx_hi {
                        let x = sx + 1 - kx;
                        let go = &g[(y * w + x) * cout..][..cout];
                        let acc = &mut row[sx * cin..][..cin];
                        for (&gv, krow) in go.iter().zip(tap.chunks_exact(cin)) {
                            for (a, &k) in acc.iter_mut().zip(krow) {
                                *a += gv * k;
                            }
                        }
                    }
                }
            }
        });
}
