//! Minimal dense-prediction network: a U-shaped encoder-decoder built from
//! 3x3 convolutions, 2x2 max pooling, nearest-neighbor upsampling and skip
//! concatenations, with hand-written backpropagation.
//!
//! Everything is f32, CHW layout, stride-1 same-padding convolutions, so the
//! output is spatially aligned with the input. All loops are sequential and
//! the graph is a pure function of (weights, input): outputs are bitwise
//! deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channel-major (CHW) feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_planes(planes: Vec<Vec<f32>>, height: usize, width: usize) -> Self {
        let channels = planes.len();
        let mut data = Vec::with_capacity(channels * height * width);
        for p in planes {
            assert_eq!(p.len(), height * width);
            data.extend_from_slice(&p);
        }
        Self { channels, height, width, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Zero-pad on the bottom/right to the given size.
    pub fn pad_to(&self, height: usize, width: usize) -> FeatureMap {
        assert!(height >= self.height && width >= self.width);
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = &self.data[(c * self.height + y) * self.width..][..self.width];
                let dst_start = (c * height + y) * width;
                out.data[dst_start..dst_start + self.width].copy_from_slice(src);
            }
        }
        out
    }

    /// Crop the top-left corner.
    pub fn crop_to(&self, height: usize, width: usize) -> FeatureMap {
        assert!(height <= self.height && width <= self.width);
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for y in 0..height {
                let src_start = (c * self.height + y) * self.width;
                let dst_start = (c * height + y) * width;
                out.data[dst_start..dst_start + width]
                    .copy_from_slice(&self.data[src_start..src_start + width]);
            }
        }
        out
    }
}

/// Stride-1 convolution with same padding (kernel 3, pad 1) or 1x1.
#[derive(Debug, Clone)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv {
    fn init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weights = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weights,
            bias: vec![0.0; out_channels],
        }
    }

    fn pad(&self) -> isize {
        (self.kernel as isize - 1) / 2
    }

    fn weight_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((oc * self.in_channels + ic) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (h, w) = (x.height, x.width);
        let n = h * w;
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        let p = self.pad();
        for oc in 0..self.out_channels {
            let out_plane = &mut out.data[oc * n..(oc + 1) * n];
            out_plane.fill(self.bias[oc]);
            for ic in 0..self.in_channels {
                let in_plane = &x.data[ic * n..(ic + 1) * n];
                for ky in 0..self.kernel {
                    let dy = ky as isize - p;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - p;
                        let wgt = self.weight_at(oc, ic, ky, kx);
                        let y0 = (-dy).max(0);
                        let y1 = (h as isize - dy).min(h as isize);
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let src_row = ((y + dy) as usize) * w;
                            let dst_row = (y as usize) * w;
                            let src = &in_plane[src_row + (x0 as isize + dx) as usize
                                ..src_row + (x1 as isize + dx) as usize];
                            let dst = &mut out_plane[dst_row + x0..dst_row + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns (grad_input, grad_weights, grad_bias).
    pub fn backward(&self, x: &FeatureMap, grad_out: &FeatureMap) -> (FeatureMap, Vec<f32>, Vec<f32>) {
        let (h, w) = (x.height, x.width);
        let n = h * w;
        let p = self.pad();
        let mut grad_in = FeatureMap::zeros(self.in_channels, h, w);
        let mut grad_w = vec![0.0f32; self.weights.len()];
        let mut grad_b = vec![0.0f32; self.out_channels];
        for oc in 0..self.out_channels {
            let g_plane = &grad_out.data[oc * n..(oc + 1) * n];
            grad_b[oc] = g_plane.iter().sum();
            for ic in 0..self.in_channels {
                let in_plane = &x.data[ic * n..(ic + 1) * n];
                let gi_plane = &mut grad_in.data[ic * n..(ic + 1) * n];
                for ky in 0..self.kernel {
                    let dy = ky as isize - p;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - p;
                        let widx = ((oc * self.in_channels + ic) * self.kernel + ky) * self.kernel + kx;
                        let wgt = self.weights[widx];
                        let y0 = (-dy).max(0);
                        let y1 = (h as isize - dy).min(h as isize);
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for y in y0..y1 {
                            let src_row = ((y + dy) as usize) * w;
                            let dst_row = (y as usize) * w;
                            let input = &in_plane[src_row + (x0 as isize + dx) as usize
                                ..src_row + (x1 as isize + dx) as usize];
                            let gout = &g_plane[dst_row + x0..dst_row + x1];
                            // dL/dw accumulates input . grad_out over the window
                            for (i, g) in input.iter().zip(gout) {
                                acc += i * g;
                            }
                            // dL/dinput spreads grad_out back through the kernel tap
                            let gin = &mut gi_plane[src_row + (x0 as isize + dx) as usize
                                ..src_row + (x1 as isize + dx) as usize];
                            for (gi, g) in gin.iter_mut().zip(gout) {
                                *gi += wgt * g;
                            }
                        }
                        grad_w[widx] += acc;
                    }
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given the post-activation values.
pub fn relu_backward_inplace(grad: &mut FeatureMap, activated: &FeatureMap) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; also returns the argmax index of every output cell.
pub fn maxpool2(x: &FeatureMap) -> (FeatureMap, Vec<u32>) {
    assert!(x.height % 2 == 0 && x.width % 2 == 0, "pooling needs even dims");
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    let mut indices = vec![0u32; x.channels * oh * ow];
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::MIN;
                let mut best_idx = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let iy = oy * 2 + dy;
                        let ix = ox * 2 + dx;
                        let idx = (c * x.height + iy) * x.width + ix;
                        let v = x.data[idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = best;
                indices[(c * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    (out, indices)
}

pub fn maxpool2_backward(grad_out: &FeatureMap, indices: &[u32], in_h: usize, in_w: usize) -> FeatureMap {
    let mut grad_in = FeatureMap::zeros(grad_out.channels, in_h, in_w);
    for (g, &idx) in grad_out.data.iter().zip(indices) {
        grad_in.data[idx as usize] += g;
    }
    grad_in
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (oh, ow) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        for y in 0..x.height {
            for x_ in 0..x.width {
                let v = x.at(c, y, x_);
                for dy in 0..2 {
                    for dx in 0..2 {
                        out.data[(c * oh + y * 2 + dy) * ow + x_ * 2 + dx] = v;
                    }
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &FeatureMap) -> FeatureMap {
    let (ih, iw) = (grad_out.height / 2, grad_out.width / 2);
    let mut grad_in = FeatureMap::zeros(grad_out.channels, ih, iw);
    for c in 0..grad_out.channels {
        for y in 0..ih {
            for x in 0..iw {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += grad_out.at(c, y * 2 + dy, x * 2 + dx);
                    }
                }
                grad_in.data[(c * ih + y) * iw + x] = acc;
            }
        }
    }
    grad_in
}

pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

fn split_grad(grad: &FeatureMap, first_channels: usize) -> (FeatureMap, FeatureMap) {
    let n = grad.height * grad.width;
    let a = FeatureMap {
        channels: first_channels,
        height: grad.height,
        width: grad.width,
        data: grad.data[..first_channels * n].to_vec(),
    };
    let b = FeatureMap {
        channels: grad.channels - first_channels,
        height: grad.height,
        width: grad.width,
        data: grad.data[first_channels * n..].to_vec(),
    };
    (a, b)
}

/// Everything the backward pass needs from a forward pass.
pub struct Activations {
    enc_inputs: Vec<FeatureMap>,
    enc_outputs: Vec<FeatureMap>,
    pool_indices: Vec<Vec<u32>>,
    pool_in_dims: Vec<(usize, usize)>,
    dec_inputs: Vec<FeatureMap>,
    dec_outputs: Vec<FeatureMap>,
}

/// Parameter gradients in the same order as [`UNet::param_tensors`].
pub struct GradientSet {
    pub tensors: Vec<Vec<f32>>,
}

impl GradientSet {
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f32) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// U-shaped encoder-decoder with per-scale channels (shallow to deep), skip
/// connections, and a 1x1 classification head at full resolution.
#[derive(Debug, Clone)]
pub struct UNet {
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub out_classes: usize,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    head: Conv,
}

impl UNet {
    pub fn init(in_channels: usize, out_classes: usize, channels: &[usize], seed: u64) -> Self {
        assert!(channels.len() >= 2, "need at least two scales");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = channels.len();
        let mut enc = Vec::with_capacity(levels);
        for (i, &c) in channels.iter().enumerate() {
            let cin = if i == 0 { in_channels } else { channels[i - 1] };
            enc.push(Conv::init(cin, c, 3, &mut rng));
        }
        // processing order: deepest merge first (level L-2 down to 0)
        let mut dec = Vec::with_capacity(levels - 1);
        for k in 0..levels - 1 {
            let level = levels - 2 - k;
            dec.push(Conv::init(channels[level + 1] + channels[level], channels[level], 3, &mut rng));
        }
        let head = Conv::init(channels[0], out_classes, 1, &mut rng);
        Self {
            channels: channels.to_vec(),
            in_channels,
            out_classes,
            enc,
            dec,
            head,
        }
    }

    /// The spatial downsampling factor the input must be divisible by.
    pub fn factor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, Activations) {
        assert_eq!(x.channels, self.in_channels);
        assert!(
            x.height % self.factor() == 0 && x.width % self.factor() == 0,
            "input {}x{} not divisible by {}",
            x.height,
            x.width,
            self.factor()
        );
        let levels = self.channels.len();
        let mut acts = Activations {
            enc_inputs: Vec::with_capacity(levels),
            enc_outputs: Vec::with_capacity(levels),
            pool_indices: Vec::with_capacity(levels - 1),
            pool_in_dims: Vec::with_capacity(levels - 1),
            dec_inputs: Vec::with_capacity(levels - 1),
            dec_outputs: Vec::with_capacity(levels - 1),
        };
        let mut cur = x.clone();
        for i in 0..levels {
            acts.enc_inputs.push(cur.clone());
            let mut e = self.enc[i].forward(&cur);
            relu_inplace(&mut e);
            acts.enc_outputs.push(e.clone());
            if i < levels - 1 {
                acts.pool_in_dims.push((e.height, e.width));
                let (pooled, idx) = maxpool2(&e);
                acts.pool_indices.push(idx);
                cur = pooled;
            } else {
                cur = e;
            }
        }
        for k in 0..levels - 1 {
            let level = levels - 2 - k;
            let up = upsample2(&cur);
            let merged = concat(&up, &acts.enc_outputs[level]);
            acts.dec_inputs.push(merged.clone());
            let mut d = self.dec[k].forward(&merged);
            relu_inplace(&mut d);
            acts.dec_outputs.push(d.clone());
            cur = d;
        }
        let logits = self.head.forward(&cur);
        (logits, acts)
    }

    pub fn backward(&self, acts: &Activations, grad_logits: &FeatureMap) -> GradientSet {
        let levels = self.channels.len();
        let head_in = if levels >= 2 {
            &acts.dec_outputs[levels - 2]
        } else {
            &acts.enc_outputs[0]
        };
        let (mut cur_grad, head_gw, head_gb) = self.head.backward(head_in, grad_logits);

        let mut enc_grads: Vec<Option<(Vec<f32>, Vec<f32>)>> = vec![None; levels];
        let mut dec_grads: Vec<Option<(Vec<f32>, Vec<f32>)>> = vec![None; levels - 1];
        // extra gradient flowing into each encoder output through its skip
        let mut skip_grads: Vec<Option<FeatureMap>> = vec![None; levels];

        for k in (0..levels - 1).rev() {
            let level = levels - 2 - k;
            relu_backward_inplace(&mut cur_grad, &acts.dec_outputs[k]);
            let (grad_in, gw, gb) = self.dec[k].backward(&acts.dec_inputs[k], &cur_grad);
            dec_grads[k] = Some((gw, gb));
            let (grad_up, grad_skip) = split_grad(&grad_in, self.channels[level + 1]);
            skip_grads[level] = Some(grad_skip);
            cur_grad = upsample2_backward(&grad_up);
        }

        // cur_grad now targets the bottleneck encoder output
        for i in (0..levels).rev() {
            if let Some(skip) = skip_grads[i].take() {
                for (g, s) in cur_grad.data.iter_mut().zip(&skip.data) {
                    *g += s;
                }
            }
            relu_backward_inplace(&mut cur_grad, &acts.enc_outputs[i]);
            let (grad_in, gw, gb) = self.enc[i].backward(&acts.enc_inputs[i], &cur_grad);
            enc_grads[i] = Some((gw, gb));
            if i > 0 {
                let (ih, iw) = acts.pool_in_dims[i - 1];
                cur_grad = maxpool2_backward(&grad_in, &acts.pool_indices[i - 1], ih, iw);
            }
        }

        let mut tensors = Vec::with_capacity(2 * levels + 2 * (levels - 1) + 2);
        for g in enc_grads.into_iter().flatten() {
            tensors.push(g.0);
            tensors.push(g.1);
        }
        for g in dec_grads.into_iter().flatten() {
            tensors.push(g.0);
            tensors.push(g.1);
        }
        tensors.push(head_gw);
        tensors.push(head_gb);
        GradientSet { tensors }
    }

    /// Parameter tensors in a fixed order (paired with gradient order).
    pub fn param_tensors(&self) -> Vec<&Vec<f32>> {
        let mut out = Vec::new();
        for c in &self.enc {
            out.push(&c.weights);
            out.push(&c.bias);
        }
        for c in &self.dec {
            out.push(&c.weights);
            out.push(&c.bias);
        }
        out.push(&self.head.weights);
        out.push(&self.head.bias);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for c in &mut self.enc {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        for c in &mut self.dec {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.bias);
        out
    }

    pub fn zero_gradients(&self) -> GradientSet {
        GradientSet {
            tensors: self.param_tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Names matching [`UNet::param_tensors`] order, for checkpoint files.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.enc.len() {
            names.push(format!("enc{i}.weight"));
            names.push(format!("enc{i}.bias"));
        }
        for k in 0..self.dec.len() {
            names.push(format!("dec{k}.weight"));
            names.push(format!("dec{k}.bias"));
        }
        names.push("head.weight".to_string());
        names.push("head.bias".to_string());
        names
    }
}

/// Adam with bias correction; state per parameter tensor.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_net(lr: f64, net: &UNet) -> Self {
        let shapes: Vec<usize> = net.param_tensors().iter().map(|t| t.len()).collect();
        Self::new(lr, &shapes)
    }

    pub fn apply(&mut self, params: Vec<&mut Vec<f32>>, grads: &GradientSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((param, grad), (m, v)) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap { channels: c, height: h, width: w, data }
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut conv = Conv::init(1, 1, 3, &mut ChaCha8Rng::seed_from_u64(0));
        conv.weights = vec![0.0; 9];
        conv.weights[4] = 1.0; // center tap
        conv.bias = vec![0.0];
        let x = seeded_map(1, 6, 6, 1);
        let y = conv.forward(&x);
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv::init(2, 3, 3, &mut rng);
        let x = seeded_map(2, 5, 5, 4);
        // scalar objective: weighted sum of outputs
        let target = seeded_map(3, 5, 5, 5);
        let objective = |c: &Conv, x: &FeatureMap| -> f64 {
            c.forward(x)
                .data
                .iter()
                .zip(&target.data)
                .map(|(y, t)| (*y as f64) * (*t as f64))
                .sum()
        };
        let (gin, gw, gb) = conv.backward(&x, &target);
        let h = 1e-3;
        // a few weight entries
        for &wi in &[0usize, 7, 20, 53] {
            let mut cp = conv.clone();
            cp.weights[wi] += h;
            let up = objective(&cp, &x);
            cp.weights[wi] -= 2.0 * h;
            let down = objective(&cp, &x);
            let fd = (up - down) / (2.0 * h as f64);
            assert!((fd - gw[wi] as f64).abs() < 1e-2, "w[{wi}]: fd={fd} an={}", gw[wi]);
        }
        // bias entry
        let mut cp = conv.clone();
        cp.bias[1] += h;
        let up = objective(&cp, &x);
        cp.bias[1] -= 2.0 * h;
        let down = objective(&cp, &x);
        let fd = (up - down) / (2.0 * h as f64);
        assert!((fd - gb[1] as f64).abs() < 1e-2);
        // input entry
        let xi = 17;
        let mut xp = x.clone();
        xp.data[xi] += h;
        let up = objective(&conv, &xp);
        xp.data[xi] -= 2.0 * h;
        let down = objective(&conv, &xp);
        let fd = (up - down) / (2.0 * h as f64);
        assert!((fd - gin.data[xi] as f64).abs() < 1e-2);
    }

    #[test]
    fn pool_and_upsample_roundtrip_shapes() {
        let x = seeded_map(3, 8, 10, 2);
        let (pooled, idx) = maxpool2(&x);
        assert_eq!((pooled.height, pooled.width), (4, 5));
        let back = maxpool2_backward(&pooled, &idx, 8, 10);
        assert_eq!((back.height, back.width), (8, 10));
        // every pooled value must exist in the input window
        for c in 0..3 {
            for y in 0..4 {
                for x_ in 0..5 {
                    let v = pooled.at(c, y, x_);
                    let xr = &x;
                    let window: Vec<f32> = (0..2)
                        .flat_map(|dy| (0..2).map(move |dx| xr.at(c, y * 2 + dy, x_ * 2 + dx)))
                        .collect();
                    assert!(window.contains(&v));
                    assert_eq!(v, window.iter().cloned().fold(f32::MIN, f32::max));
                }
            }
        }
        let up = upsample2(&pooled);
        assert_eq!((up.height, up.width), (8, 10));
        let down = upsample2_backward(&up);
        // summing a nearest-upsampled map recovers 4x the source
        for (d, p) in down.data.iter().zip(&pooled.data) {
            assert!((d - 4.0 * p).abs() < 1e-5);
        }
    }

    #[test]
    fn unet_output_shape_and_determinism() {
        let net = UNet::init(2, 19, &[4, 8, 16, 32], 7);
        assert_eq!(net.factor(), 8);
        let x = seeded_map(2, 64, 64, 9);
        let a = net.forward(&x);
        assert_eq!((a.channels, a.height, a.width), (19, 64, 64));
        let b = net.forward(&x);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn unet_full_gradient_check_on_tiny_net() {
        // Small net and input so finite differences stay cheap. Weights and
        // inputs are made positive so every ReLU is strictly active and the
        // function is linear around the operating point; a bias perturbation
        // shifts pooling windows uniformly, so no argmax flips either.
        let mut net = UNet::init(1, 2, &[2, 3], 5);
        for tensor in net.param_tensors_mut() {
            for v in tensor.iter_mut() {
                *v = v.abs() + 0.01;
            }
        }
        let net = net;
        let mut x = seeded_map(1, 4, 4, 6);
        for v in x.data.iter_mut() {
            *v = v.abs() + 0.1;
        }
        let x = x;
        let target = seeded_map(2, 4, 4, 8);
        let objective = |n: &UNet| -> f64 {
            n.forward(&x)
                .data
                .iter()
                .zip(&target.data)
                .map(|(y, t)| (*y as f64) * (*t as f64))
                .sum()
        };
        let (_, acts) = net.forward_train(&x);
        let grads = net.backward(&acts, &target);
        let h = 1e-3f32;
        for (ti, tensor) in net.param_tensors().iter().enumerate() {
            let stride = (tensor.len() / 5).max(1);
            for i in (0..tensor.len()).step_by(stride) {
                let mut plus = net.clone();
                plus.param_tensors_mut()[ti][i] += h;
                let up = objective(&plus);
                let mut minus = net.clone();
                minus.param_tensors_mut()[ti][i] -= h;
                let down = objective(&minus);
                let fd = (up - down) / (2.0 * h as f64);
                let an = grads.tensors[ti][i] as f64;
                assert!(
                    (fd - an).abs() <= 1e-2 * (1.0 + an.abs()),
                    "tensor {ti} entry {i}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let net = UNet::init(1, 1, &[2, 2], 1);
        let mut adam = Adam::for_net(0.05, &net);
        // minimize sum of squares of all parameters
        let mut net = net;
        let initial: f64 = net
            .param_tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| (*v as f64).powi(2))
            .sum();
        for _ in 0..200 {
            let grads = GradientSet {
                tensors: net.param_tensors().iter().map(|t| t.iter().map(|v| 2.0 * v).collect()).collect(),
            };
            adam.apply(net.param_tensors_mut(), &grads);
        }
        let fin: f64 = net
            .param_tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| (*v as f64).powi(2))
            .sum();
        assert!(fin < initial * 0.01, "{fin} vs {initial}");
    }
}
