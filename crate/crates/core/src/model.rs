//! U-Net encoder–decoder with skip connections, named activation taps, and
//! parameter/FLOP accounting.
//!
//! Every block is two (3×3 conv + ReLU); the encoder pools 2×2 between
//! blocks, the decoder upsamples with 2×2 stride-2 transposed convolutions
//! and concatenates the matching encoder output (upsampled channels first,
//! skip channels second). A 1×1 convolution maps the last decoder output
//! to class logits, softmaxed over channels.
//!
//! The network is immutable during inference; a forward pass allocates its
//! own trace, so concurrent forward passes never share state. Gradients
//! are computed by an explicit reverse pass over the trace.

pub mod layers;

use crate::error::{Error, Result};
use layers::{channel_softmax, relu, relu_backward, Conv2d, ConvGrads, ConvTranspose2d, MaxPool2};
use ndarray::{s, Array3, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Architecture hyper-parameters. Widths are the encoder block output
/// channels from shallow to deep; the decoder mirrors them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_widths: Vec<usize>,
    pub bottleneck_width: usize,
    pub conv_kernel: usize,
    pub pool_factor: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 2,
            encoder_widths: vec![64, 128, 256, 512],
            bottleneck_width: 1024,
            conv_kernel: 3,
            pool_factor: 2,
            seed: 42,
        }
    }
}

impl UNetConfig {
    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "binary segmentation requires num_classes = 2, got {}",
                self.num_classes
            )));
        }
        if self.depth() < 2 {
            return Err(Error::Config(format!(
                "encoder needs at least 2 blocks, got {}",
                self.depth()
            )));
        }
        let increasing = self
            .encoder_widths
            .windows(2)
            .all(|p| p[0] < p[1] && p[0] > 0);
        if !increasing || self.encoder_widths[0] == 0 {
            return Err(Error::Config(format!(
                "encoder widths must be strictly increasing and positive, got {:?}",
                self.encoder_widths
            )));
        }
        if self.bottleneck_width <= *self.encoder_widths.last().unwrap() {
            return Err(Error::Config(format!(
                "bottleneck width {} must exceed the deepest encoder width {}",
                self.bottleneck_width,
                self.encoder_widths.last().unwrap()
            )));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::Config(format!(
                "conv kernel must be odd for same padding, got {}",
                self.conv_kernel
            )));
        }
        if self.pool_factor != 2 {
            return Err(Error::Config(format!(
                "pooling is fixed at 2x2; pool_factor {} is unsupported",
                self.pool_factor
            )));
        }
        Ok(())
    }
}

/// Named parameter gradients, keyed exactly like [`UNet::visit_params`].
pub type GradStore = BTreeMap<String, ArrayD<f64>>;

/// Batch prediction: channel-first `(B, num_classes, H, W)` tensors with
/// `probs = softmax(logits)` over the channel axis.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Array4<f64>,
    pub probs: Array4<f64>,
}

/// Single-sample prediction, `(num_classes, H, W)`.
#[derive(Debug, Clone)]
pub struct SamplePrediction {
    pub logits: Array3<f64>,
    pub probs: Array3<f64>,
}

/// Two (conv + ReLU) stages.
#[derive(Debug, Clone)]
struct DoubleConv {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Forward cache of one double-conv block: its input, the mid activation,
/// and the block output (post-ReLU tensors double as ReLU masks).
struct DcCache {
    x: Array3<f64>,
    a1: Array3<f64>,
    out: Array3<f64>,
}

impl DoubleConv {
    fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(c_in, c_out, k, rng),
            conv2: Conv2d::new(c_out, c_out, k, rng),
        }
    }

    fn forward(&self, x: Array3<f64>) -> DcCache {
        let a1 = relu(self.conv1.forward(&x));
        let out = relu(self.conv2.forward(&a1));
        DcCache { x, a1, out }
    }

    fn forward_infer(&self, x: &Array3<f64>) -> Array3<f64> {
        relu(self.conv2.forward(&relu(self.conv1.forward(x))))
    }

    /// Returns the gradient w.r.t. the block input, plus (conv1, conv2)
    /// parameter gradients when requested.
    fn backward(
        &self,
        cache: &DcCache,
        grad_out: &Array3<f64>,
        want_params: bool,
    ) -> (Array3<f64>, Option<(ConvGrads, ConvGrads)>) {
        let g2 = relu_backward(grad_out, &cache.out);
        let (ga1, grads2) = self.conv2.backward(&cache.a1, &g2, want_params);
        let g1 = relu_backward(&ga1, &cache.a1);
        let (gx, grads1) = self.conv1.backward(&cache.x, &g1, want_params);
        (gx, want_params.then(|| (grads1.unwrap(), grads2.unwrap())))
    }

    fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    up: ConvTranspose2d,
    convs: DoubleConv,
}

/// Everything one traced forward pass captured; consumed by the backward
/// pass. Produced per call and never shared between passes.
pub struct Trace {
    enc: Vec<DcCache>,
    pool_idx: Vec<Array3<u8>>,
    bott: DcCache,
    dec: Vec<DcCache>,
    logits: Array3<f64>,
    probs: Array3<f64>,
}

impl Trace {
    pub fn logits(&self) -> &Array3<f64> {
        &self.logits
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }
}

/// Handle pairing a traced forward pass with the taps it captured, so the
/// gradient of any scalar of the prediction can later be pulled back to
/// every tap.
pub struct TapCapture {
    trace: Trace,
}

impl TapCapture {
    pub fn trace(&self) -> &Trace {
        &self.trace
    }
}

/// Gradient and FLOP accounting figures; `flops` counts 2·MACs plus
/// elementwise work (bias adds, ReLU, pooling comparisons, softmax),
/// `macs` is the multiply-accumulate count alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub macs: u64,
    pub flops: u64,
}

/// The full network.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    enc: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    dec: Vec<DecoderBlock>,
    out: Conv2d,
}

impl UNet {
    /// Build and He-initialize a network from its config. Identical
    /// config (including seed) gives identical parameters.
    pub fn build(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.conv_kernel;
        let depth = config.depth();

        let mut enc = Vec::with_capacity(depth);
        let mut c_in = config.in_channels;
        for &w in &config.encoder_widths {
            enc.push(DoubleConv::new(c_in, w, k, &mut rng));
            c_in = w;
        }
        let bottleneck = DoubleConv::new(c_in, config.bottleneck_width, k, &mut rng);

        let mut dec = Vec::with_capacity(depth);
        let mut prev = config.bottleneck_width;
        for j in 0..depth {
            let w = config.encoder_widths[depth - 1 - j];
            dec.push(DecoderBlock {
                up: ConvTranspose2d::new(prev, w, &mut rng),
                convs: DoubleConv::new(2 * w, w, k, &mut rng),
            });
            prev = w;
        }
        let out = Conv2d::new(prev, config.num_classes, 1, &mut rng);
        Ok(Self {
            config,
            enc,
            bottleneck,
            dec,
            out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.enc.len()
    }

    /// Tap identifiers in network order: one per encoder block, the
    /// bottleneck, one per decoder block (2·depth + 1 total). The last
    /// entry is the full-resolution decoder output feeding the 1×1 head.
    pub fn tap_names(&self) -> Vec<String> {
        let depth = self.depth();
        let mut names: Vec<String> = (1..=depth).map(|i| format!("enc{i}")).collect();
        names.push("bottleneck".to_string());
        names.extend((1..=depth).map(|j| format!("dec{j}")));
        names
    }

    pub fn last_decoder_tap(&self) -> String {
        format!("dec{}", self.depth())
    }

    pub fn has_tap(&self, name: &str) -> bool {
        self.tap_names().iter().any(|n| n == name)
    }

    fn validate_input(&self, dim: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = dim;
        if c != self.config.in_channels {
            return Err(Error::Validation(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let factor = 1usize << self.depth();
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Validation(format!(
                "input {h}x{w}: spatial dims must be divisible by {factor} \
                 (pool factor 2 ^ depth {})",
                self.depth()
            )));
        }
        Ok(())
    }

    fn concat(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
        ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
    }

    /// Inference-only forward on one `(C, H, W)` input: keeps just the
    /// skip tensors alive, no trace.
    pub fn forward_one(&self, x: &Array3<f64>) -> Result<SamplePrediction> {
        self.validate_input(x.dim())?;
        let depth = self.depth();
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for block in &self.enc {
            let out = block.forward_infer(&cur);
            let (pooled, _) = MaxPool2::forward(&out);
            skips.push(out);
            cur = pooled;
        }
        cur = self.bottleneck.forward_infer(&cur);
        for (j, block) in self.dec.iter().enumerate() {
            let up = block.up.forward(&cur);
            let cat = Self::concat(&up, &skips[depth - 1 - j]);
            cur = block.convs.forward_infer(&cat);
        }
        let logits = self.out.forward(&cur);
        let probs = channel_softmax(&logits);
        Ok(SamplePrediction { logits, probs })
    }

    /// Batch forward, stacking per-sample passes.
    pub fn forward(&self, batch: &Array4<f64>) -> Result<Prediction> {
        let (b, c, h, w) = batch.dim();
        if b == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut logits = Array4::zeros((b, self.config.num_classes, h, w));
        let mut probs = logits.clone();
        for i in 0..b {
            let x = batch.index_axis(Axis(0), i).to_owned();
            debug_assert_eq!(x.dim().0, c);
            let one = self.forward_one(&x)?;
            logits.index_axis_mut(Axis(0), i).assign(&one.logits);
            probs.index_axis_mut(Axis(0), i).assign(&one.probs);
        }
        Ok(Prediction { logits, probs })
    }

    /// Forward pass that records the trace needed for a backward pass.
    pub fn forward_one_traced(&self, x: &Array3<f64>) -> Result<(SamplePrediction, Trace)> {
        self.validate_input(x.dim())?;
        let depth = self.depth();
        let mut enc_caches = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for block in &self.enc {
            let cache = block.forward(cur);
            let (pooled, idx) = MaxPool2::forward(&cache.out);
            enc_caches.push(cache);
            pool_idx.push(idx);
            cur = pooled;
        }
        let bott = self.bottleneck.forward(cur);
        let mut dec_caches: Vec<DcCache> = Vec::with_capacity(depth);
        for (j, block) in self.dec.iter().enumerate() {
            let prev = if j == 0 {
                &bott.out
            } else {
                &dec_caches[j - 1].out
            };
            let up = block.up.forward(prev);
            let cat = Self::concat(&up, &enc_caches[depth - 1 - j].out);
            dec_caches.push(block.convs.forward(cat));
        }
        let logits = self.out.forward(&dec_caches[depth - 1].out);
        let probs = channel_softmax(&logits);
        let pred = SamplePrediction {
            logits: logits.clone(),
            probs: probs.clone(),
        };
        Ok((
            pred,
            Trace {
                enc: enc_caches,
                pool_idx,
                bott,
                dec: dec_caches,
                logits,
                probs,
            },
        ))
    }

    /// Traced forward that also returns every tap activation by name,
    /// plus a capture handle for pulling scalar gradients back to the
    /// taps.
    pub fn forward_with_taps(
        &self,
        x: &Array3<f64>,
    ) -> Result<(SamplePrediction, BTreeMap<String, Array3<f64>>, TapCapture)> {
        let (pred, trace) = self.forward_one_traced(x)?;
        let mut taps = BTreeMap::new();
        for (i, cache) in trace.enc.iter().enumerate() {
            taps.insert(format!("enc{}", i + 1), cache.out.clone());
        }
        taps.insert("bottleneck".to_string(), trace.bott.out.clone());
        for (j, cache) in trace.dec.iter().enumerate() {
            taps.insert(format!("dec{}", j + 1), cache.out.clone());
        }
        Ok((pred, taps, TapCapture { trace }))
    }

    /// Parameter gradients for `d(scalar)/d(logits)` pulled back through
    /// the trace. Keys match [`UNet::visit_params`] names exactly.
    pub fn backward_param_grads(&self, trace: &Trace, grad_logits: &Array3<f64>) -> GradStore {
        let (grads, _) = self.backward_impl(trace, grad_logits, true, false);
        grads.unwrap()
    }

    /// Gradients of a scalar at every tap activation, given the scalar's
    /// gradient w.r.t. the logits.
    pub fn tap_gradients(
        &self,
        capture: &TapCapture,
        grad_logits: &Array3<f64>,
    ) -> BTreeMap<String, Array3<f64>> {
        let (_, taps) = self.backward_impl(&capture.trace, grad_logits, false, true);
        taps.unwrap()
    }

    fn backward_impl(
        &self,
        trace: &Trace,
        grad_logits: &Array3<f64>,
        want_params: bool,
        want_taps: bool,
    ) -> (Option<GradStore>, Option<BTreeMap<String, Array3<f64>>>) {
        assert_eq!(grad_logits.dim(), trace.logits.dim(), "logit grad shape");
        let depth = self.depth();
        let mut store = want_params.then(GradStore::new);
        let mut taps = want_taps.then(BTreeMap::<String, Array3<f64>>::new);

        let push_conv = |store: &mut Option<GradStore>, name: String, g: ConvGrads| {
            if let Some(s) = store.as_mut() {
                s.insert(format!("{name}.weight"), g.weight);
                s.insert(format!("{name}.bias"), g.bias.into_dyn());
            }
        };

        // Output head.
        let (mut g, out_grads) =
            self.out
                .backward(&trace.dec[depth - 1].out, grad_logits, want_params);
        if let Some(og) = out_grads {
            push_conv(&mut store, "out".to_string(), og);
        }

        // Decoder, reverse execution order. The incoming gradient at each
        // step is d(scalar)/d(block output) — exactly the tap gradient.
        let mut skip_grads: Vec<Option<Array3<f64>>> = (0..depth).map(|_| None).collect();
        for j in (0..depth).rev() {
            if let Some(t) = taps.as_mut() {
                t.insert(format!("dec{}", j + 1), g.clone());
            }
            let block = &self.dec[j];
            let (gcat, dc_grads) = block.convs.backward(&trace.dec[j], &g, want_params);
            if let Some((g1, g2)) = dc_grads {
                push_conv(&mut store, format!("dec{}.conv1", j + 1), g1);
                push_conv(&mut store, format!("dec{}.conv2", j + 1), g2);
            }
            let w = block.up.weight.dim().1;
            let g_up = gcat.slice(s![..w, .., ..]).to_owned();
            let g_skip = gcat.slice(s![w.., .., ..]).to_owned();
            skip_grads[depth - 1 - j] = Some(g_skip);

            let prev = if j == 0 {
                &trace.bott.out
            } else {
                &trace.dec[j - 1].out
            };
            let (g_prev, up_grads) = block.up.backward(prev, &g_up, want_params);
            if let Some(ug) = up_grads {
                push_conv(&mut store, format!("dec{}.up", j + 1), ug);
            }
            g = g_prev;
        }

        // Bottleneck.
        if let Some(t) = taps.as_mut() {
            t.insert("bottleneck".to_string(), g.clone());
        }
        let (bg, bott_grads) = self.bottleneck.backward(&trace.bott, &g, want_params);
        if let Some((g1, g2)) = bott_grads {
            push_conv(&mut store, "bottleneck.conv1".to_string(), g1);
            push_conv(&mut store, "bottleneck.conv2".to_string(), g2);
        }
        g = bg;

        // Encoder, deepest first. Each block output fed both the pooling
        // path and a skip connection; its total gradient is their sum.
        for i in (0..depth).rev() {
            let mut g_out = MaxPool2::backward(&g, &trace.pool_idx[i]);
            g_out += skip_grads[i].as_ref().expect("skip gradient recorded");
            if let Some(t) = taps.as_mut() {
                t.insert(format!("enc{}", i + 1), g_out.clone());
            }
            let (g_in, grads) = self.enc[i].backward(&trace.enc[i], &g_out, want_params);
            if let Some((g1, g2)) = grads {
                push_conv(&mut store, format!("enc{}.conv1", i + 1), g1);
                push_conv(&mut store, format!("enc{}.conv2", i + 1), g2);
            }
            g = g_in;
        }
        (store, taps)
    }

    /// Visit every parameter tensor in a fixed, documented order:
    /// `enc1..encD`, `bottleneck`, `dec1..decD` (`up`, `conv1`, `conv2`
    /// within a decoder block), then `out`; `weight` before `bias`.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>)) {
        let visit_conv = |f: &mut dyn FnMut(&str, ArrayViewD<'a, f64>), name: String, c: &'a Conv2d| {
            f(&format!("{name}.weight"), c.weight.view().into_dyn());
            f(&format!("{name}.bias"), c.bias.view().into_dyn());
        };
        for (i, block) in self.enc.iter().enumerate() {
            visit_conv(f, format!("enc{}.conv1", i + 1), &block.conv1);
            visit_conv(f, format!("enc{}.conv2", i + 1), &block.conv2);
        }
        visit_conv(f, "bottleneck.conv1".to_string(), &self.bottleneck.conv1);
        visit_conv(f, "bottleneck.conv2".to_string(), &self.bottleneck.conv2);
        for (j, block) in self.dec.iter().enumerate() {
            f(
                &format!("dec{}.up.weight", j + 1),
                block.up.weight.view().into_dyn(),
            );
            f(
                &format!("dec{}.up.bias", j + 1),
                block.up.bias.view().into_dyn(),
            );
            visit_conv(f, format!("dec{}.conv1", j + 1), &block.convs.conv1);
            visit_conv(f, format!("dec{}.conv2", j + 1), &block.convs.conv2);
        }
        visit_conv(f, "out".to_string(), &self.out);
    }

    /// Mutable visitor over the same names and order as
    /// [`UNet::visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        let visit_conv = |f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>),
                          name: String,
                          c: &mut Conv2d| {
            f(&format!("{name}.weight"), c.weight.view_mut().into_dyn());
            f(&format!("{name}.bias"), c.bias.view_mut().into_dyn());
        };
        for (i, block) in self.enc.iter_mut().enumerate() {
            visit_conv(f, format!("enc{}.conv1", i + 1), &mut block.conv1);
            visit_conv(f, format!("enc{}.conv2", i + 1), &mut block.conv2);
        }
        visit_conv(f, "bottleneck.conv1".to_string(), &mut self.bottleneck.conv1);
        visit_conv(f, "bottleneck.conv2".to_string(), &mut self.bottleneck.conv2);
        for (j, block) in self.dec.iter_mut().enumerate() {
            f(
                &format!("dec{}.up.weight", j + 1),
                block.up.weight.view_mut().into_dyn(),
            );
            f(
                &format!("dec{}.up.bias", j + 1),
                block.up.bias.view_mut().into_dyn(),
            );
            visit_conv(f, format!("dec{}.conv1", j + 1), &mut block.convs.conv1);
            visit_conv(f, format!("dec{}.conv2", j + 1), &mut block.convs.conv2);
        }
        visit_conv(f, "out".to_string(), &mut self.out);
    }

    pub fn count_params(&self) -> usize {
        let enc: usize = self.enc.iter().map(DoubleConv::param_count).sum();
        let dec: usize = self
            .dec
            .iter()
            .map(|b| b.up.param_count() + b.convs.param_count())
            .sum();
        enc + self.bottleneck.param_count() + dec + self.out.param_count()
    }

    /// MAC and FLOP counts for a square input of the given side.
    ///
    /// Conventions: a k×k convolution over C_in→C_out at S×S costs
    /// k²·C_in·C_out·S² MACs; a 2×2 stride-2 transposed convolution costs
    /// 4·C_in·C_out·S_in² MACs. `flops` = 2·MACs plus elementwise work:
    /// 1/element for bias adds and ReLU, 3 comparisons per pooled cell,
    /// 4·num_classes per pixel for the softmax.
    pub fn count_flops(&self, side: usize) -> Result<FlopCount> {
        self.validate_input((self.config.in_channels, side, side))?;
        let k2 = (self.config.conv_kernel * self.config.conv_kernel) as u64;
        let classes = self.config.num_classes as u64;
        let mut macs = 0u64;
        let mut elem = 0u64;

        let conv = |macs: &mut u64, elem: &mut u64, cin: u64, cout: u64, s: u64, with_relu: bool| {
            *macs += k2 * cin * cout * s * s;
            *elem += (1 + u64::from(with_relu)) * cout * s * s;
        };

        let mut s = side as u64;
        let mut cin = self.config.in_channels as u64;
        for &w in &self.config.encoder_widths {
            let w = w as u64;
            conv(&mut macs, &mut elem, cin, w, s, true);
            conv(&mut macs, &mut elem, w, w, s, true);
            s /= 2;
            elem += 3 * w * s * s;
            cin = w;
        }
        let b = self.config.bottleneck_width as u64;
        conv(&mut macs, &mut elem, cin, b, s, true);
        conv(&mut macs, &mut elem, b, b, s, true);

        let mut prev = b;
        for &w in self.config.encoder_widths.iter().rev() {
            let w = w as u64;
            macs += 4 * prev * w * s * s;
            s *= 2;
            elem += w * s * s; // upsample bias
            conv(&mut macs, &mut elem, 2 * w, w, s, true);
            conv(&mut macs, &mut elem, w, w, s, true);
            prev = w;
        }
        // 1×1 head (no ReLU) + softmax.
        macs += prev * classes * s * s;
        elem += classes * s * s;
        elem += 4 * classes * s * s;
        Ok(FlopCount {
            macs,
            flops: 2 * macs + elem,
        })
    }
}
