//! Reference forward pass of the semantic-shape adaptive modulation block.
//!
//! Data flow, per batch item:
//!
//! ```text
//! spd ──1x1 conv──► e ──dw(Ka)──► u1 ──dw(Kb)──► u2 ─┐
//! seg ──3x3 conv──► Ka (9·D channels)                 │
//! seg ──3x3 conv──► Kb (9·D channels)                 │
//! concat[seg, u2, spd] ◄──────────────────────────────┘
//!   └─3x3 conv─► h ─┬─3x3 conv─► γ
//!                   └─3x3 conv─► β
//! f_t = normalize(f_{t-1}) ⊙ (1 + γ) + β
//! ```
//!
//! `dw(K)` is a depthwise 3x3 convolution whose taps differ at every pixel
//! and are read from `K`. `normalize` standardizes each channel over batch
//! and space without learnable affine parameters.
//!
//! Analytic gradients are provided for verification against central
//! differences; nothing here trains.

use rand::Rng;
use thiserror::Error;

use crate::gradcheck::{finite_diff_check, GradCheckError};
use crate::tensor::{ShapeMismatch, Tensor4};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SafmError {
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("bad parameter file: {0}")]
    Parse(String),
}

fn mismatch(msg: String) -> SafmError {
    SafmError::Shape(ShapeMismatch(msg))
}

/// Convolution weights `[out, in, kh, kw]` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Self {
            weight: Tensor4::zeros([out_ch, in_ch, k, k]),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn random<R: Rng>(out_ch: usize, in_ch: usize, k: usize, scale: f64, rng: &mut R) -> Self {
        let mut c = Self::zeros(out_ch, in_ch, k);
        c.weight.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        c.bias.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dims()[2], self.weight.dims()[3])
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

fn out_size(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize, SafmError> {
    if stride == 0 || input + 2 * pad < k {
        return Err(mismatch(format!(
            "kernel {k} with pad {pad} and stride {stride} does not fit input {input}"
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

/// Cross-correlation with zero padding.
pub fn conv2d(x: &Tensor4, conv: &Conv2d, stride: usize, pad: usize) -> Result<Tensor4, SafmError> {
    let [n, c, h, w] = x.dims();
    if conv.in_channels() != c || conv.bias.len() != conv.out_channels() {
        return Err(mismatch(format!(
            "conv expects {} input channels, got {c}",
            conv.in_channels()
        )));
    }
    let (kh, kw) = conv.kernel();
    let (oh, ow) = (out_size(h, kh, stride, pad)?, out_size(w, kw, stride, pad)?);
    let oc = conv.out_channels();
    let mut out = Tensor4::zeros([n, oc, oh, ow]);
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for i in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += conv.weight.get(o, i, ky, kx) * x.get(b, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(
    x: &Tensor4,
    conv: &Conv2d,
    stride: usize,
    pad: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Conv2d) {
    let [n, c, h, w] = x.dims();
    let [_, oc, oh, ow] = grad_out.dims();
    let (kh, kw) = conv.kernel();
    let mut dx = Tensor4::zeros(x.dims());
    let mut dconv = Conv2d::zeros(oc, c, kh);
    dconv.weight = Tensor4::zeros(conv.weight.dims());
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.get(b, o, oy, ox);
                    dconv.bias[o] += g;
                    for i in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                let wi = dconv.weight.index(o, i, ky, kx);
                                dconv.weight.data_mut()[wi] += g * x.get(b, i, iy, ix);
                                let xi = dx.index(b, i, iy, ix);
                                dx.data_mut()[xi] += g * conv.weight.get(o, i, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dconv)
}

/// Zero-padded 3x3 neighbourhoods: channel `c * 9 + k` holds tap `k`
/// (row-major over offsets `dy, dx ∈ {-1, 0, 1}`) of input channel `c`.
pub fn unfold3x3(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, 9 * c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for k in 0..9 {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out.set(b, ch * 9 + k, y, xx, x.get(b, ch, sy as usize, sx as usize));
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold3x3`]: scatter-adds patch entries back to their source pixels.
pub fn fold3x3(patches: &Tensor4) -> Tensor4 {
    let [n, c9, h, w] = patches.dims();
    let c = c9 / 9;
    let mut out = Tensor4::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for k in 0..9 {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let i = out.index(b, ch, sy as usize, sx as usize);
                        out.data_mut()[i] += patches.get(b, ch * 9 + k, y, xx);
                    }
                }
            }
        }
    }
    out
}

/// Depthwise 3x3 convolution with a separate kernel at every pixel.
/// `kernels` has `9 * C` channels laid out like [`unfold3x3`]'s output.
pub fn dynamic_depthwise_conv(x: &Tensor4, kernels: &Tensor4) -> Result<Tensor4, SafmError> {
    let [n, c, h, w] = x.dims();
    if kernels.dims() != [n, 9 * c, h, w] {
        return Err(mismatch(format!(
            "kernels {:?} do not match input {:?} (need 9x channels)",
            kernels.dims(),
            x.dims()
        )));
    }
    let patches = unfold3x3(x);
    let mut out = Tensor4::zeros(x.dims());
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let dst = out.index(b, ch, 0, 0);
            for k in 0..9 {
                let kp = kernels.plane(b, ch * 9 + k);
                let pp = patches.plane(b, ch * 9 + k);
                let o = &mut out.data_mut()[dst..dst + hw];
                for ((o, kv), pv) in o.iter_mut().zip(kp).zip(pp) {
                    *o += kv * pv;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dkernels)`.
pub fn dynamic_depthwise_conv_backward(x: &Tensor4, kernels: &Tensor4, grad_out: &Tensor4) -> (Tensor4, Tensor4) {
    let [n, c, h, w] = x.dims();
    let patches = unfold3x3(x);
    let mut dk = Tensor4::zeros(kernels.dims());
    let mut dpatches = Tensor4::zeros(kernels.dims());
    for b in 0..n {
        for ch in 0..c {
            for k in 0..9 {
                for y in 0..h {
                    for xx in 0..w {
                        let g = grad_out.get(b, ch, y, xx);
                        dk.set(b, ch * 9 + k, y, xx, g * patches.get(b, ch * 9 + k, y, xx));
                        dpatches.set(b, ch * 9 + k, y, xx, g * kernels.get(b, ch * 9 + k, y, xx));
                    }
                }
            }
        }
    }
    (fold3x3(&dpatches), dk)
}

/// Per-channel statistics from [`normalize`].
#[derive(Debug, Clone)]
pub struct NormStats {
    pub inv_std: Vec<f64>,
}

/// Parameter-free standardization of each channel over batch and space.
/// Channels holding a single repeated value map to exactly zero.
pub fn normalize(x: &Tensor4) -> (Tensor4, NormStats) {
    let [n, c, h, w] = x.dims();
    let count = (n * h * w) as f64;
    let mut out = Tensor4::zeros(x.dims());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| x.plane(b, ch).iter().copied());
        let mean = vals().sum::<f64>() / count;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(s);
        let first = x.get(0, ch, 0, 0);
        if vals().all(|v| v == first) {
            continue;
        }
        for b in 0..n {
            let start = out.index(b, ch, 0, 0);
            for (o, v) in out.data_mut()[start..start + h * w].iter_mut().zip(x.plane(b, ch)) {
                *o = (v - mean) * s;
            }
        }
    }
    (out, NormStats { inv_std })
}

pub fn normalize_backward(normalized: &Tensor4, stats: &NormStats, grad_out: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = normalized.dims();
    let count = (n * h * w) as f64;
    let mut dx = Tensor4::zeros(normalized.dims());
    for ch in 0..c {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for b in 0..n {
            for (g, xh) in grad_out.plane(b, ch).iter().zip(normalized.plane(b, ch)) {
                mean_g += g;
                mean_gx += g * xh;
            }
        }
        mean_g /= count;
        mean_gx /= count;
        let s = stats.inv_std[ch];
        for b in 0..n {
            let start = dx.index(b, ch, 0, 0);
            let g = grad_out.plane(b, ch);
            let xh = normalized.plane(b, ch);
            for (i, d) in dx.data_mut()[start..start + h * w].iter_mut().enumerate() {
                *d = s * (g[i] - mean_g - xh[i] * mean_gx);
            }
        }
    }
    dx
}

/// Channel widths of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SafmConfig {
    /// Semantic classes in the one-hot layout.
    pub classes: usize,
    /// Descriptor channels (`m * n`).
    pub spd_channels: usize,
    /// Embedded descriptor width.
    pub embed: usize,
    pub hidden: usize,
    /// Channels of the modulated features.
    pub features: usize,
}

impl Default for SafmConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            spd_channels: 72,
            embed: 16,
            hidden: 32,
            features: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafmParams {
    pub seg_to_kernels_a: Conv2d,
    pub seg_to_kernels_b: Conv2d,
    pub spd_embed: Conv2d,
    pub fuse: Conv2d,
    pub gamma_head: Conv2d,
    pub beta_head: Conv2d,
}

/// Field names in [`SafmParams::convs`] order, used by the CSV format.
pub const PARAM_NAMES: [&str; 6] = [
    "seg_to_kernels_a",
    "seg_to_kernels_b",
    "spd_embed",
    "fuse",
    "gamma_head",
    "beta_head",
];

impl SafmParams {
    pub fn zeros(cfg: &SafmConfig) -> Self {
        let fused_in = cfg.classes + cfg.embed + cfg.spd_channels;
        Self {
            seg_to_kernels_a: Conv2d::zeros(9 * cfg.embed, cfg.classes, 3),
            seg_to_kernels_b: Conv2d::zeros(9 * cfg.embed, cfg.classes, 3),
            spd_embed: Conv2d::zeros(cfg.embed, cfg.spd_channels, 1),
            fuse: Conv2d::zeros(cfg.hidden, fused_in, 3),
            gamma_head: Conv2d::zeros(cfg.features, cfg.hidden, 3),
            beta_head: Conv2d::zeros(cfg.features, cfg.hidden, 3),
        }
    }

    /// Uniform weights in `[-scale, scale)`.
    pub fn random<R: Rng>(cfg: &SafmConfig, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        for conv in p.convs_mut() {
            *conv = Conv2d::random(conv.out_channels(), conv.in_channels(), conv.kernel().0, scale, rng);
        }
        p
    }

    pub fn convs(&self) -> [&Conv2d; 6] {
        [
            &self.seg_to_kernels_a,
            &self.seg_to_kernels_b,
            &self.spd_embed,
            &self.fuse,
            &self.gamma_head,
            &self.beta_head,
        ]
    }

    pub fn convs_mut(&mut self) -> [&mut Conv2d; 6] {
        [
            &mut self.seg_to_kernels_a,
            &mut self.seg_to_kernels_b,
            &mut self.spd_embed,
            &mut self.fuse,
            &mut self.gamma_head,
            &mut self.beta_head,
        ]
    }

    pub fn config(&self) -> SafmConfig {
        SafmConfig {
            classes: self.seg_to_kernels_a.in_channels(),
            spd_channels: self.spd_embed.in_channels(),
            embed: self.spd_embed.out_channels(),
            hidden: self.fuse.out_channels(),
            features: self.gamma_head.out_channels(),
        }
    }

    /// Checks that every layer has the shape implied by [`SafmParams::config`].
    pub fn validate(&self) -> Result<(), SafmError> {
        let expected = Self::zeros(&self.config());
        for ((got, want), name) in self.convs().iter().zip(expected.convs()).zip(PARAM_NAMES) {
            if got.weight.dims() != want.weight.dims() || got.bias.len() != want.bias.len() {
                return Err(mismatch(format!(
                    "{name}: weight {:?} (expected {:?})",
                    got.weight.dims(),
                    want.weight.dims()
                )));
            }
            if !got.is_finite() {
                return Err(SafmError::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    /// All weights then biases of each layer, layers in [`SafmParams::convs`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for c in self.convs() {
            v.extend_from_slice(c.weight.data());
            v.extend_from_slice(&c.bias);
        }
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for c in self.convs_mut() {
            let wl = c.weight.len();
            c.weight.data_mut().copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = c.bias.len();
            c.bias.copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
    }

    /// One line per tensor: `name,d0xd1xd2xd3,v0,v1,...` for weights and
    /// `name.bias,len,v0,...` for biases.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (c, name) in self.convs().iter().zip(PARAM_NAMES) {
            let [a, b, kh, kw] = c.weight.dims();
            s.push_str(&format!("{name},{a}x{b}x{kh}x{kw}"));
            for v in c.weight.data() {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
            s.push_str(&format!("{name}.bias,{}", c.bias.len()));
            for v in &c.bias {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, SafmError> {
        let parse_err = |m: String| SafmError::Parse(m);
        let mut weights: [Option<Tensor4>; 6] = Default::default();
        let mut biases: [Option<Vec<f64>>; 6] = Default::default();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut fields = line.split(',').map(str::trim);
            let name = fields.next().unwrap_or_default();
            let shape = fields
                .next()
                .ok_or_else(|| parse_err(format!("line {}: missing shape", lineno + 1)))?;
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("line {}: {e}", lineno + 1)))?;
            let (base, is_bias) = match name.strip_suffix(".bias") {
                Some(b) => (b, true),
                None => (name, false),
            };
            let slot = PARAM_NAMES
                .iter()
                .position(|&n| n == base)
                .ok_or_else(|| parse_err(format!("line {}: unknown tensor `{name}`", lineno + 1)))?;
            let dims: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| parse_err(format!("line {}: shape `{shape}`: {e}", lineno + 1)))?;
            if is_bias {
                if dims.len() != 1 || dims[0] != values.len() {
                    return Err(parse_err(format!("line {}: bias length mismatch", lineno + 1)));
                }
                biases[slot] = Some(values);
            } else {
                let dims: [usize; 4] = dims
                    .try_into()
                    .map_err(|_| parse_err(format!("line {}: weight shape must have 4 dims", lineno + 1)))?;
                weights[slot] = Some(Tensor4::from_vec(dims, values)?);
            }
        }
        let mut convs = Vec::with_capacity(6);
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            let weight = weights[i]
                .take()
                .ok_or_else(|| parse_err(format!("missing tensor `{name}`")))?;
            let bias = biases[i].take().unwrap_or_else(|| vec![0.0; weight.dims()[0]]);
            convs.push(Conv2d { weight, bias });
        }
        let mut it = convs.into_iter();
        let p = Self {
            seg_to_kernels_a: it.next().unwrap(),
            seg_to_kernels_b: it.next().unwrap(),
            spd_embed: it.next().unwrap(),
            fuse: it.next().unwrap(),
            gamma_head: it.next().unwrap(),
            beta_head: it.next().unwrap(),
        };
        p.validate()?;
        Ok(p)
    }
}

/// Block inputs; all share batch size and spatial dims.
#[derive(Debug, Clone, PartialEq)]
pub struct SafmInputs {
    pub f_prev: Tensor4,
    pub seg_onehot: Tensor4,
    pub spd: Tensor4,
}

/// Every intermediate of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SafmTrace {
    pub embedded: Tensor4,
    pub kernels_a: Tensor4,
    pub kernels_b: Tensor4,
    pub mixed_once: Tensor4,
    pub mixed_twice: Tensor4,
    pub fused_input: Tensor4,
    pub hidden: Tensor4,
    pub gamma: Tensor4,
    pub beta: Tensor4,
    pub normalized: Tensor4,
    pub norm_stats: NormStats,
    pub output: Tensor4,
}

fn check_inputs(inputs: &SafmInputs, params: &SafmParams) -> Result<(), SafmError> {
    params.validate()?;
    let cfg = params.config();
    let [n, f, h, w] = inputs.f_prev.dims();
    let want = [
        ("f_prev", &inputs.f_prev, cfg.features),
        ("seg_onehot", &inputs.seg_onehot, cfg.classes),
        ("spd", &inputs.spd, cfg.spd_channels),
    ];
    for (name, t, ch) in want {
        if t.dims() != [n, ch, h, w] {
            return Err(mismatch(format!(
                "{name} has dims {:?}, expected {:?}",
                t.dims(),
                [n, ch, h, w]
            )));
        }
        if !t.is_finite() {
            return Err(SafmError::NonFinite(name));
        }
    }
    debug_assert_eq!(f, cfg.features);
    Ok(())
}

pub fn safm_forward(inputs: &SafmInputs, params: &SafmParams) -> Result<Tensor4, SafmError> {
    Ok(safm_forward_traced(inputs, params)?.output)
}

pub fn safm_forward_traced(inputs: &SafmInputs, params: &SafmParams) -> Result<SafmTrace, SafmError> {
    check_inputs(inputs, params)?;
    let embedded = conv2d(&inputs.spd, &params.spd_embed, 1, 0)?;
    let kernels_a = conv2d(&inputs.seg_onehot, &params.seg_to_kernels_a, 1, 1)?;
    let kernels_b = conv2d(&inputs.seg_onehot, &params.seg_to_kernels_b, 1, 1)?;
    let mixed_once = dynamic_depthwise_conv(&embedded, &kernels_a)?;
    let mixed_twice = dynamic_depthwise_conv(&mixed_once, &kernels_b)?;
    let fused_input = Tensor4::concat_channels(&[&inputs.seg_onehot, &mixed_twice, &inputs.spd])?;
    let hidden = conv2d(&fused_input, &params.fuse, 1, 1)?;
    let gamma = conv2d(&hidden, &params.gamma_head, 1, 1)?;
    let beta = conv2d(&hidden, &params.beta_head, 1, 1)?;
    let (normalized, norm_stats) = normalize(&inputs.f_prev);
    let mut output = Tensor4::zeros(normalized.dims());
    for (((o, x), g), b) in output
        .data_mut()
        .iter_mut()
        .zip(normalized.data())
        .zip(gamma.data())
        .zip(beta.data())
    {
        *o = x * (1.0 + g) + b;
    }
    Ok(SafmTrace {
        embedded,
        kernels_a,
        kernels_b,
        mixed_once,
        mixed_twice,
        fused_input,
        hidden,
        gamma,
        beta,
        normalized,
        norm_stats,
        output,
    })
}

#[derive(Debug, Clone)]
pub struct SafmGrads {
    pub params: SafmParams,
    pub inputs: SafmInputs,
}

/// Gradient of `Σ output ⊙ grad_out` with respect to parameters and inputs.
pub fn safm_backward(
    inputs: &SafmInputs,
    params: &SafmParams,
    trace: &SafmTrace,
    grad_out: &Tensor4,
) -> Result<SafmGrads, SafmError> {
    grad_out.same_dims(&trace.output, "grad_out")?;
    let mut d_gamma = Tensor4::zeros(grad_out.dims());
    let mut d_norm = Tensor4::zeros(grad_out.dims());
    for i in 0..grad_out.len() {
        let g = grad_out.data()[i];
        d_gamma.data_mut()[i] = g * trace.normalized.data()[i];
        d_norm.data_mut()[i] = g * (1.0 + trace.gamma.data()[i]);
    }
    let d_beta = grad_out;
    let d_f_prev = normalize_backward(&trace.normalized, &trace.norm_stats, &d_norm);

    let (mut d_hidden, d_gamma_head) = conv2d_backward(&trace.hidden, &params.gamma_head, 1, 1, &d_gamma);
    let (d_hidden_b, d_beta_head) = conv2d_backward(&trace.hidden, &params.beta_head, 1, 1, d_beta);
    d_hidden.add_assign(&d_hidden_b);

    let (d_fused_input, d_fuse) = conv2d_backward(&trace.fused_input, &params.fuse, 1, 1, &d_hidden);
    let cfg = params.config();
    let parts = d_fused_input.split_channels(&[cfg.classes, cfg.embed, cfg.spd_channels])?;
    let (mut d_seg, d_mixed_twice, mut d_spd) = (parts[0].clone(), &parts[1], parts[2].clone());

    let (d_mixed_once, d_kernels_b) =
        dynamic_depthwise_conv_backward(&trace.mixed_once, &trace.kernels_b, d_mixed_twice);
    let (d_embedded, d_kernels_a) = dynamic_depthwise_conv_backward(&trace.embedded, &trace.kernels_a, &d_mixed_once);

    let (d_seg_b, d_seg_to_b) = conv2d_backward(&inputs.seg_onehot, &params.seg_to_kernels_b, 1, 1, &d_kernels_b);
    let (d_seg_a, d_seg_to_a) = conv2d_backward(&inputs.seg_onehot, &params.seg_to_kernels_a, 1, 1, &d_kernels_a);
    d_seg.add_assign(&d_seg_a);
    d_seg.add_assign(&d_seg_b);

    let (d_spd_embed_in, d_spd_embed) = conv2d_backward(&inputs.spd, &params.spd_embed, 1, 0, &d_embedded);
    d_spd.add_assign(&d_spd_embed_in);

    Ok(SafmGrads {
        params: SafmParams {
            seg_to_kernels_a: d_seg_to_a,
            seg_to_kernels_b: d_seg_to_b,
            spd_embed: d_spd_embed,
            fuse: d_fuse,
            gamma_head: d_gamma_head,
            beta_head: d_beta_head,
        },
        inputs: SafmInputs {
            f_prev: d_f_prev,
            seg_onehot: d_seg,
            spd: d_spd,
        },
    })
}

/// Random inputs of a given configuration: `f_prev` Gaussian-ish, the
/// layout a valid one-hot map, `spd` rows that sum to one.
pub fn random_inputs<R: Rng>(cfg: &SafmConfig, batch: usize, height: usize, width: usize, rng: &mut R) -> SafmInputs {
    let f_prev = Tensor4::from_fn([batch, cfg.features, height, width], |_, _, _, _| rng.gen_range(-2.0..2.0));
    let mut seg_onehot = Tensor4::zeros([batch, cfg.classes, height, width]);
    let mut spd = Tensor4::zeros([batch, cfg.spd_channels, height, width]);
    for b in 0..batch {
        for y in 0..height {
            for x in 0..width {
                let class = rng.gen_range(0..cfg.classes);
                seg_onehot.set(b, class, y, x, 1.0);
                let raw: Vec<f64> = (0..cfg.spd_channels).map(|_| rng.gen_range(0.0..1.0)).collect();
                let total: f64 = raw.iter().sum();
                for (c, v) in raw.into_iter().enumerate() {
                    spd.set(b, c, y, x, v / total);
                }
            }
        }
    }
    SafmInputs { f_prev, seg_onehot, spd }
}

/// Maximum relative error between the analytic gradient of
/// `Σ safm_forward(inputs) ⊙ probe` and central differences, over every
/// parameter and every input entry.
pub fn gradient_check(inputs: &SafmInputs, params: &SafmParams, probe: &Tensor4) -> Result<f64, SafmError> {
    let trace = safm_forward_traced(inputs, params)?;
    let grads = safm_backward(inputs, params, &trace, probe)?;

    let n_params = params.param_count();
    let sizes = [inputs.f_prev.len(), inputs.seg_onehot.len(), inputs.spd.len()];
    let mut flat = params.to_flat();
    flat.extend_from_slice(inputs.f_prev.data());
    flat.extend_from_slice(inputs.seg_onehot.data());
    flat.extend_from_slice(inputs.spd.data());
    let mut analytic = grads.params.to_flat();
    analytic.extend_from_slice(grads.inputs.f_prev.data());
    analytic.extend_from_slice(grads.inputs.seg_onehot.data());
    analytic.extend_from_slice(grads.inputs.spd.data());

    let loss = |v: &[f64]| -> f64 {
        let mut p = params.clone();
        p.assign_flat(&v[..n_params]);
        let mut x = inputs.clone();
        let mut off = n_params;
        for (t, len) in [&mut x.f_prev, &mut x.seg_onehot, &mut x.spd].into_iter().zip(sizes) {
            t.data_mut().copy_from_slice(&v[off..off + len]);
            off += len;
        }
        match safm_forward(&x, &p) {
            Ok(out) => out.dot(probe),
            Err(_) => f64::NAN,
        }
    };
    finite_diff_check(loss, &flat, &analytic).map_err(|e| match e {
        GradCheckError::NonFinite => SafmError::NonFinite("finite-difference evaluation"),
        GradCheckError::LengthMismatch { .. } => mismatch(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_identity_and_zero() {
        let x = Tensor4::from_fn([1, 2, 3, 4], |_, c, y, x| (c * 12 + y * 4 + x) as f64);
        let mut id = Conv2d::zeros(2, 2, 1);
        id.weight.set(0, 0, 0, 0, 1.0);
        id.weight.set(1, 1, 0, 0, 1.0);
        assert_eq!(conv2d(&x, &id, 1, 0).unwrap(), x);
        let zero = Conv2d::zeros(3, 2, 3);
        let out = conv2d(&x, &zero, 1, 1).unwrap();
        assert_eq!(out.dims(), [1, 3, 3, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn box_kernel_on_delta_gives_plateau() {
        let mut x = Tensor4::zeros([1, 1, 5, 5]);
        x.set(0, 0, 2, 2, 1.0);
        let mut boxk = Conv2d::zeros(1, 1, 3);
        boxk.weight.data_mut().fill(1.0);
        let out = conv2d(&x, &boxk, 1, 1).unwrap();
        for y in 0..5 {
            for xx in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&xx);
                assert_eq!(out.get(0, 0, y, xx), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn conv_stride_and_channel_errors() {
        let x = Tensor4::zeros([1, 2, 6, 6]);
        let c = Conv2d::zeros(1, 2, 3);
        assert_eq!(conv2d(&x, &c, 2, 1).unwrap().dims(), [1, 1, 3, 3]);
        let wrong = Conv2d::zeros(1, 3, 3);
        assert!(matches!(conv2d(&x, &wrong, 1, 1), Err(SafmError::Shape(_))));
    }

    #[test]
    fn unfold_cases() {
        let c = Tensor4::from_fn([1, 1, 4, 4], |_, _, _, _| 3.0);
        let u = unfold3x3(&c);
        assert_eq!(u.dims(), [1, 9, 4, 4]);
        for k in 0..9 {
            assert_eq!(u.get(0, k, 1, 2), 3.0);
        }

        let one = Tensor4::from_vec([1, 1, 1, 1], vec![5.0]).unwrap();
        let u = unfold3x3(&one);
        assert_eq!(u.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);

        let mut delta = Tensor4::zeros([1, 1, 5, 5]);
        delta.set(0, 0, 2, 2, 1.0);
        let u = unfold3x3(&delta);
        let mut hits = Vec::new();
        for k in 0..9 {
            for y in 0..5 {
                for x in 0..5 {
                    if u.get(0, k, y, x) != 0.0 {
                        hits.push((k, y, x));
                    }
                }
            }
        }
        assert_eq!(hits.len(), 9);
        let mut slots: Vec<usize> = hits.iter().map(|h| h.0).collect();
        slots.dedup();
        assert_eq!(slots.len(), 9);
        let mut positions: Vec<(usize, usize)> = hits.iter().map(|h| (h.1, h.2)).collect();
        positions.sort();
        positions.dedup();
        assert_eq!(positions.len(), 9);
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::from_fn([2, 2, 4, 3], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let p = Tensor4::from_fn([2, 18, 4, 3], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let lhs = unfold3x3(&x).dot(&p);
        let rhs = x.dot(&fold3x3(&p));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dynamic_depthwise_cases() {
        let x = Tensor4::from_fn([1, 2, 4, 4], |_, c, y, x| (c + y * x) as f64);
        let mut center = Tensor4::zeros([1, 18, 4, 4]);
        for c in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    center.set(0, c * 9 + 4, y, xx, 1.0);
                }
            }
        }
        assert_eq!(dynamic_depthwise_conv(&x, &center).unwrap(), x);
        let zero = Tensor4::zeros([1, 18, 4, 4]);
        assert!(dynamic_depthwise_conv(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let ones = Tensor4::from_fn([1, 1, 4, 4], |_, _, _, _| 1.0);
        let mut k = Tensor4::zeros([1, 9, 4, 4]);
        for t in 0..9 {
            k.set(0, t, 1, 2, (t + 1) as f64);
        }
        let out = dynamic_depthwise_conv(&ones, &k).unwrap();
        assert_eq!(out.get(0, 0, 1, 2), 45.0);
        assert_eq!(out.get(0, 0, 1, 1), 0.0);

        assert!(dynamic_depthwise_conv(&x, &Tensor4::zeros([1, 9, 4, 4])).is_err());
    }

    #[test]
    fn normalize_constant_channel_is_zero() {
        let x = Tensor4::from_fn([2, 2, 3, 3], |b, c, y, _| if c == 0 { 0.1 } else { (b + y) as f64 });
        let (n, _) = normalize(&x);
        assert!(n.plane(0, 0).iter().chain(n.plane(1, 0)).all(|&v| v == 0.0));
        let vals: Vec<f64> = n.plane(0, 1).iter().chain(n.plane(1, 1)).copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SafmConfig {
            classes: 2,
            spd_channels: 3,
            embed: 2,
            hidden: 2,
            features: 2,
        };
        let p = SafmParams::random(&cfg, 0.5, &mut rng);
        let back = SafmParams::from_csv(&p.to_csv()).unwrap();
        assert_eq!(back, p);
        assert!(SafmParams::from_csv("bogus,1x1x1x1,0\n").is_err());
        assert!(SafmParams::from_csv(&p.to_csv().replace("fuse,", "fuse,9x")).is_err());
    }

    #[test]
    fn shape_errors_reported() {
        let cfg = SafmConfig {
            classes: 3,
            spd_channels: 4,
            embed: 2,
            hidden: 3,
            features: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SafmParams::random(&cfg, 0.3, &mut rng);
        let mut x = random_inputs(&cfg, 1, 4, 4, &mut rng);
        x.spd = Tensor4::zeros([1, 4, 3, 4]);
        assert!(matches!(safm_forward(&x, &p), Err(SafmError::Shape(_))));
        let mut x = random_inputs(&cfg, 1, 4, 4, &mut rng);
        x.f_prev.data_mut()[0] = f64::NAN;
        assert!(matches!(safm_forward(&x, &p), Err(SafmError::NonFinite("f_prev"))));
    }
}
