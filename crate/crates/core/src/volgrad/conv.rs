use crate::parallel;
use crate::volgrad::Tensor;
use crate::{Error, Result, Scalar};

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Geometry of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// 3×3×3 kernel, unit stride, padding 1 (extent-preserving).
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [3; 3],
            stride: [1; 3],
            padding: [1; 3],
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = [stride; 3];
        self
    }

    pub fn with_kernel(mut self, kernel: usize, padding: usize) -> Self {
        self.kernel = [kernel; 3];
        self.padding = [padding; 3];
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    /// Patch length: one im2col row per (input channel, kernel offset).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// `floor((in + 2·pad − kernel) / stride) + 1` per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("convolution channel counts must be positive"));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 {
                return Err(Error::config(format!(
                    "kernel and stride must be positive on the {} axis",
                    AXES[a]
                )));
            }
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::config(format!(
                    "non-positive output extent on the {} axis: input {} + 2·{} padding < kernel {}",
                    AXES[a], input[a], self.padding[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn check(&self, input: &[usize], weight: &[usize], bias: &[usize]) -> Result<[usize; 3]> {
        if input.len() != 5 {
            return Err(Error::config(format!(
                "conv3d expects a [N, C, D, H, W] input, got shape {input:?}"
            )));
        }
        if input[1] != self.in_channels {
            return Err(Error::config(format!(
                "conv3d input axis 1 (channels) is {} but the layer expects {}",
                input[1], self.in_channels
            )));
        }
        let expected = self.weight_shape();
        if weight != expected {
            let axis = weight
                .iter()
                .zip(expected.iter())
                .position(|(a, b)| a != b)
                .unwrap_or(weight.len().min(5));
            return Err(Error::config(format!(
                "conv3d weight axis {axis} mismatch: weight shape {weight:?}, expected {expected:?}"
            )));
        }
        if bias != [self.out_channels] {
            return Err(Error::config(format!(
                "conv3d bias axis 0 mismatch: shape {bias:?}, expected [{}]",
                self.out_channels
            )));
        }
        self.output_extent([input[2], input[3], input[4]])
    }
}

/// Unfolds one sample `[Cin, D, H, W]` into a `[Cin·k³, P]` patch matrix.
fn im2col<T: Scalar>(sample: &[T], spec: &ConvSpec, ext: [usize; 3], out_ext: [usize; 3], col: &mut [T]) {
    let [kd, kh, kw] = spec.kernel;
    let [d, h, w] = ext;
    let [od, oh, ow] = out_ext;
    let p_len = od * oh * ow;
    let mut row = 0;
    for ci in 0..spec.in_channels {
        let chan = &sample[ci * d * h * w..(ci + 1) * d * h * w];
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let dst = &mut col[row * p_len..(row + 1) * p_len];
                    let mut p = 0;
                    for z in 0..od {
                        let iz = (z * spec.stride[0] + dz) as isize - spec.padding[0] as isize;
                        for y in 0..oh {
                            let iy = (y * spec.stride[1] + dy) as isize - spec.padding[1] as isize;
                            let inside_zy = iz >= 0 && iz < d as isize && iy >= 0 && iy < h as isize;
                            let base = if inside_zy {
                                (iz as usize * h + iy as usize) * w
                            } else {
                                0
                            };
                            for x in 0..ow {
                                let ix = (x * spec.stride[2] + dx) as isize - spec.padding[2] as isize;
                                dst[p] = if inside_zy && ix >= 0 && ix < w as isize {
                                    chan[base + ix as usize]
                                } else {
                                    T::zero()
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Folds a patch-gradient matrix back onto one sample, accumulating overlaps.
fn col2im<T: Scalar>(col: &[T], spec: &ConvSpec, ext: [usize; 3], out_ext: [usize; 3], sample: &mut [T]) {
    let [kd, kh, kw] = spec.kernel;
    let [d, h, w] = ext;
    let [od, oh, ow] = out_ext;
    let p_len = od * oh * ow;
    let mut row = 0;
    for ci in 0..spec.in_channels {
        let chan = &mut sample[ci * d * h * w..(ci + 1) * d * h * w];
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = &col[row * p_len..(row + 1) * p_len];
                    let mut p = 0;
                    for z in 0..od {
                        let iz = (z * spec.stride[0] + dz) as isize - spec.padding[0] as isize;
                        for y in 0..oh {
                            let iy = (y * spec.stride[1] + dy) as isize - spec.padding[1] as isize;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                p += ow;
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            for x in 0..ow {
                                let ix = (x * spec.stride[2] + dx) as isize - spec.padding[2] as isize;
                                if ix >= 0 && ix < w as isize {
                                    let v = &mut chan[base + ix as usize];
                                    *v = *v + src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_ext = spec.check(input.shape(), weight.shape(), bias.shape())?;
    let s = input.shape();
    let (n, ext) = (s[0], [s[2], s[3], s[4]]);
    let in_len = spec.in_channels * ext.iter().product::<usize>();
    let p_len: usize = out_ext.iter().product();
    let k_len = spec.patch_len();
    let cout = spec.out_channels;

    let mut out = vec![T::zero(); n * cout * p_len];
    let x = input.data();
    let (w, b) = (weight.data(), bias.data());
    parallel::for_each_chunk(&mut out, cout * p_len, |i, dst| {
        let mut col = vec![T::zero(); k_len * p_len];
        im2col(&x[i * in_len..(i + 1) * in_len], spec, ext, out_ext, &mut col);
        T::gemm(
            cout,
            k_len,
            p_len,
            w,
            (k_len as isize, 1),
            &col,
            (p_len as isize, 1),
            false,
            dst,
            (p_len as isize, 1),
        );
        for (co, row) in dst.chunks_mut(p_len).enumerate() {
            row.iter_mut().for_each(|v| *v = *v + b[co]);
        }
    });
    Tensor::new(&[n, cout, out_ext[0], out_ext[1], out_ext[2]], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let s = input.shape();
    let (n, ext) = (s[0], [s[2], s[3], s[4]]);
    let out_ext = spec.output_extent(ext).expect("extent validated in forward");
    let in_len = spec.in_channels * ext.iter().product::<usize>();
    let p_len: usize = out_ext.iter().product();
    let k_len = spec.patch_len();
    let cout = spec.out_channels;
    let x = input.data();
    let w = weight.data();

    // Per-sample partials, reduced afterwards in sample order so the result
    // does not depend on how samples were scheduled.
    let partials = parallel::map_indices(n, |i| {
        let g = &grad_out[i * cout * p_len..(i + 1) * cout * p_len];
        let mut col = vec![T::zero(); k_len * p_len];
        im2col(&x[i * in_len..(i + 1) * in_len], spec, ext, out_ext, &mut col);
        let mut dw = vec![T::zero(); cout * k_len];
        // dW[co, k] = Σ_p g[co, p] · col[k, p]
        T::gemm(
            cout,
            p_len,
            k_len,
            g,
            (p_len as isize, 1),
            &col,
            (1, p_len as isize),
            false,
            &mut dw,
            (k_len as isize, 1),
        );
        let dx = need_input.then(|| {
            // dcol[k, p] = Σ_co W[co, k] · g[co, p]
            T::gemm(
                k_len,
                cout,
                p_len,
                w,
                (1, k_len as isize),
                g,
                (p_len as isize, 1),
                false,
                &mut col,
                (p_len as isize, 1),
            );
            let mut dx = vec![T::zero(); in_len];
            col2im(&col, spec, ext, out_ext, &mut dx);
            dx
        });
        (dw, dx)
    });

    let mut dweight = vec![T::zero(); cout * k_len];
    let mut dbias = vec![T::zero(); cout];
    let mut dinput = need_input.then(|| Vec::with_capacity(n * in_len));
    for (i, (dw, dx)) in partials.into_iter().enumerate() {
        for (acc, v) in dweight.iter_mut().zip(&dw) {
            *acc = *acc + *v;
        }
        let g = &grad_out[i * cout * p_len..(i + 1) * cout * p_len];
        for (co, row) in g.chunks(p_len).enumerate() {
            dbias[co] = row.iter().fold(dbias[co], |a, v| a + *v);
        }
        if let (Some(all), Some(dx)) = (dinput.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    }
}
