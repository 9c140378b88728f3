//! Convolutional building blocks with hand-written forward/backward passes.
//!
//! Convolutions run as im2col + GEMM in `f64`. Layers are pure: forward
//! passes take inputs by reference and return fresh tensors, and backward
//! passes recompute the column matrix from the cached layer input instead
//! of holding it, which keeps a full network trace at roughly the size of
//! its activations.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One standard-normal draw via Box–Muller; deterministic for a given
/// generator state.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// He fan-in initialization: N(0, sqrt(2 / fan_in)) weights, zero biases.
fn he_weights<D: ndarray::Dimension>(
    shape: impl ndarray::ShapeBuilder<Dim = D>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> ndarray::Array<f64, D> {
    let scale = (2.0 / fan_in as f64).sqrt();
    ndarray::Array::from_shape_simple_fn(shape, || scale * standard_normal(rng))
}

/// Gradients of one conv-like layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: ndarray::ArrayD<f64>,
    pub bias: Array1<f64>,
}

/// Unfold `(C, H, W)` into a `(C·k·k, H·W)` column matrix for a stride-1
/// same-padding convolution (pad = k/2, odd k).
fn im2col(x: &Array3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let mut cols = Array2::zeros((c * k * k, h * w));
    // The unfold is pure data movement and sits on the hot path of every
    // conv, so it runs on raw slices (plain memcpy per row) instead of
    // per-row ndarray views.
    let tmp;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            tmp = x.to_owned();
            tmp.as_slice().expect("owned copy is standard layout")
        }
    };
    let cs = cols.as_slice_mut().expect("fresh matrix is standard layout");
    for ci in 0..c {
        let x_base = ci * h * w;
        for dy in 0..k {
            // Output ranges whose tap stays inside the frame; everything
            // outside keeps the zero fill (= zero padding).
            let oy_start = pad.saturating_sub(dy);
            let oy_end = (h + pad).saturating_sub(dy).min(h);
            for dx in 0..k {
                let row_base = (((ci * k + dy) * k) + dx) * (h * w);
                let ox_start = pad.saturating_sub(dx);
                let ox_end = (w + pad).saturating_sub(dx).min(w);
                if ox_start >= ox_end {
                    continue;
                }
                let ix_start = ox_start + dx - pad;
                let len = ox_end - ox_start;
                for oy in oy_start..oy_end {
                    let iy = oy + dy - pad;
                    let src = x_base + iy * w + ix_start;
                    let dst = row_base + oy * w + ox_start;
                    cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column-matrix gradient back onto
/// the input layout.
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array3<f64> {
    let pad = k / 2;
    let mut x = Array3::zeros((c, h, w));
    let cs = cols.as_slice().expect("column matrix is standard layout");
    let xs = x.as_slice_mut().expect("fresh tensor is standard layout");
    for ci in 0..c {
        let x_base = ci * h * w;
        for dy in 0..k {
            let oy_start = pad.saturating_sub(dy);
            let oy_end = (h + pad).saturating_sub(dy).min(h);
            for dx in 0..k {
                let row_base = (((ci * k + dy) * k) + dx) * (h * w);
                let ox_start = pad.saturating_sub(dx);
                let ox_end = (w + pad).saturating_sub(dx).min(w);
                if ox_start >= ox_end {
                    continue;
                }
                let ix_start = ox_start + dx - pad;
                let len = ox_end - ox_start;
                for oy in oy_start..oy_end {
                    let iy = oy + dy - pad;
                    let src = row_base + oy * w + ox_start;
                    let dst = x_base + iy * w + ix_start;
                    for (d, s) in xs[dst..dst + len].iter_mut().zip(&cs[src..src + len]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 same-padding 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(C_out, C_in, k, k)`.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel");
        let fan_in = c_in * k * k;
        Self {
            weight: he_weights((c_out, c_in, k, k), fan_in, rng),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().3
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (c_out, c_in, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .expect("weights are standard layout")
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c_out, c_in, k, _) = self.weight.dim();
        let (xc, h, w) = x.dim();
        assert_eq!(xc, c_in, "conv input channels");
        let cols = im2col(x, k);
        let mut out = Array2::zeros((c_out, h * w));
        general_mat_mul(1.0, &self.weight_matrix(), &cols.view(), 0.0, &mut out);
        for (mut row, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row += b;
        }
        out.into_shape_with_order((c_out, h, w)).unwrap()
    }

    /// Backward pass given the cached layer input and the output gradient.
    /// Parameter gradients are skipped when `want_params` is false (pure
    /// input-gradient propagation, as used for activation attribution).
    pub fn backward(
        &self,
        x: &Array3<f64>,
        grad_out: &Array3<f64>,
        want_params: bool,
    ) -> (Array3<f64>, Option<ConvGrads>) {
        let (c_out, c_in, k, _) = self.weight.dim();
        let (_, h, w) = x.dim();
        let gy = grad_out
            .view()
            .into_shape_with_order((c_out, h * w))
            .expect("gradient is standard layout");

        let grads = want_params.then(|| {
            let cols = im2col(x, k);
            let mut gw = Array2::zeros((c_out, c_in * k * k));
            general_mat_mul(1.0, &gy, &cols.t(), 0.0, &mut gw);
            ConvGrads {
                weight: gw
                    .into_shape_with_order((c_out, c_in, k, k))
                    .unwrap()
                    .into_dyn(),
                bias: gy.sum_axis(Axis(1)),
            }
        });

        let mut gcols = Array2::zeros((c_in * k * k, h * w));
        general_mat_mul(1.0, &self.weight_matrix().t(), &gy, 0.0, &mut gcols);
        (col2im(&gcols, c_in, h, w, k), grads)
    }
}

/// 2×2 stride-2 transposed convolution (exact 2× upsampling). With kernel
/// equal to stride the output taps never overlap, so each output pixel is
/// a single GEMM entry plus bias.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    /// `(C_in, C_out, 2, 2)`.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvTranspose2d {
    pub const K: usize = 2;

    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * Self::K * Self::K;
        Self {
            weight: he_weights((c_in, c_out, Self::K, Self::K), fan_in, rng),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (c_in, c_out, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((c_in, c_out * k * k))
            .expect("weights are standard layout")
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c_in, c_out, k, _) = self.weight.dim();
        let (xc, h, w) = x.dim();
        assert_eq!(xc, c_in, "transposed conv input channels");
        let x2 = x
            .view()
            .into_shape_with_order((c_in, h * w))
            .expect("input is standard layout");
        let mut y4 = Array2::zeros((c_out * k * k, h * w));
        general_mat_mul(1.0, &self.weight_matrix().t(), &x2, 0.0, &mut y4);

        let mut out = Array3::zeros((c_out, h * k, w * k));
        for co in 0..c_out {
            let b = self.bias[co];
            for dy in 0..k {
                for dx in 0..k {
                    let row = (co * k + dy) * k + dx;
                    for y in 0..h {
                        for x_ in 0..w {
                            out[[co, y * k + dy, x_ * k + dx]] = y4[[row, y * w + x_]] + b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &Array3<f64>,
        grad_out: &Array3<f64>,
        want_params: bool,
    ) -> (Array3<f64>, Option<ConvGrads>) {
        let (c_in, c_out, k, _) = self.weight.dim();
        let (_, h, w) = x.dim();

        // Gather the strided output gradient back into GEMM layout.
        let mut gy4 = Array2::zeros((c_out * k * k, h * w));
        let mut gb = Array1::zeros(c_out);
        for co in 0..c_out {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (co * k + dy) * k + dx;
                    for y in 0..h {
                        for x_ in 0..w {
                            let g = grad_out[[co, y * k + dy, x_ * k + dx]];
                            gy4[[row, y * w + x_]] = g;
                            gb[co] += g;
                        }
                    }
                }
            }
        }

        let grads = want_params.then(|| {
            let x2 = x.view().into_shape_with_order((c_in, h * w)).unwrap();
            let mut gw = Array2::zeros((c_in, c_out * k * k));
            general_mat_mul(1.0, &x2, &gy4.t(), 0.0, &mut gw);
            ConvGrads {
                weight: gw
                    .into_shape_with_order((c_in, c_out, k, k))
                    .unwrap()
                    .into_dyn(),
                bias: gb,
            }
        });

        let mut gx2 = Array2::zeros((c_in, h * w));
        general_mat_mul(1.0, &self.weight_matrix(), &gy4.view(), 0.0, &mut gx2);
        (gx2.into_shape_with_order((c_in, h, w)).unwrap(), grads)
    }
}

/// 2×2 stride-2 max pooling. `backward` routes gradients to the stored
/// argmax positions.
pub struct MaxPool2;

impl MaxPool2 {
    /// Returns the pooled tensor and per-cell argmax codes (dy·2 + dx).
    pub fn forward(x: &Array3<f64>) -> (Array3<f64>, Array3<u8>) {
        let (c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dimensions");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array3::zeros((c, oh, ow));
        let mut idx = Array3::zeros((c, oh, ow));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut code = 0u8;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[[ci, oy * 2 + dy, ox * 2 + dx]];
                            if v > best {
                                best = v;
                                code = (dy * 2 + dx) as u8;
                            }
                        }
                    }
                    out[[ci, oy, ox]] = best;
                    idx[[ci, oy, ox]] = code;
                }
            }
        }
        (out, idx)
    }

    pub fn backward(grad_out: &Array3<f64>, idx: &Array3<u8>) -> Array3<f64> {
        let (c, oh, ow) = grad_out.dim();
        let mut gx = Array3::zeros((c, oh * 2, ow * 2));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let code = idx[[ci, oy, ox]] as usize;
                    let (dy, dx) = (code / 2, code % 2);
                    gx[[ci, oy * 2 + dy, ox * 2 + dx]] = grad_out[[ci, oy, ox]];
                }
            }
        }
        gx
    }
}

/// In-place rectifier.
pub fn relu(mut x: Array3<f64>) -> Array3<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Rectifier gradient using the post-activation tensor: units that ended
/// at zero (inactive or exactly at the kink) pass nothing.
pub fn relu_backward(grad_out: &Array3<f64>, activated: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(activated, |gv, &av| {
        if av <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// Numerically stable softmax over the channel axis of `(C, H, W)`.
pub fn channel_softmax(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut probs = logits.clone();
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(probs[[ci, y, x]]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (probs[[ci, y, x]] - m).exp();
                probs[[ci, y, x]] = e;
                z += e;
            }
            for ci in 0..c {
                probs[[ci, y, x]] /= z;
            }
        }
    }
    probs
}
