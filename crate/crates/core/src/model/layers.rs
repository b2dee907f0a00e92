//! Forward and backward kernels.
//!
//! Activations are stored channel-last (`[row][col][channel]`). A forward pass
//! can be restricted to the pixels whose logits are needed: the head is
//! evaluated only there, and block `b` only on the `(num_blocks - 1 - b)`-fold
//! 3x3 dilation of that set, which is exactly the receptive field the later
//! layers read. Values outside the evaluated positions are never read.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AugmentPlan, ConvLayer, ModelConfig, Parameters};
use crate::domain::{softmax_into, Image, Logits};
use crate::seed::Stream;

/// Per-block inverted-dropout multipliers (`0` or `1 / (1 - rate)`), each a
/// full `height * width * channels` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<Vec<f64>>,
}

impl DropoutMasks {
    /// Draws a full set of masks for an image of the given size.
    pub fn sample(config: &ModelConfig, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = Stream::new(seed, "dropout-masks").rng();
        let keep = 1.0 / (1.0 - config.dropout_rate);
        let blocks = (0..config.num_blocks)
            .map(|_| {
                (0..height * width * config.channels)
                    .map(|_| if rng.random::<f64>() < config.dropout_rate { 0.0 } else { keep })
                    .collect()
            })
            .collect();
        Self { height, width, blocks }
    }
}

pub(crate) enum DropoutSource<'a> {
    Off,
    Fixed(&'a DropoutMasks),
    Sample { rng: &'a mut ChaCha8Rng, rate: f64 },
}

/// Reusable buffers for one image-sized forward/backward pass.
#[derive(Default)]
pub(crate) struct Workspace {
    height: usize,
    width: usize,
    input: Vec<f64>,
    /// Positions evaluated by each block; the last entry is the head set.
    positions: Vec<Vec<usize>>,
    all_positions: bool,
    acts: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
    use_masks: bool,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
    grad_out: Vec<f64>,
    grad_in: Vec<f64>,
    grid: Vec<bool>,
    scratch: Vec<bool>,
}

impl Workspace {
    /// Copies `image` into the input buffer, applying `plan` if given, and
    /// centres values around zero.
    pub fn load_input(&mut self, image: &Image, plan: Option<&AugmentPlan>) {
        self.height = image.height();
        self.width = image.width();
        let (h, w) = (self.height, self.width);
        self.input.resize(h * w * 3, 0.0);
        let src = image.pixels();
        for r in 0..h {
            for c in 0..w {
                let dst = (r * w + c) * 3;
                match plan {
                    None => {
                        for k in 0..3 {
                            self.input[dst + k] = src[dst + k] - 0.5;
                        }
                    }
                    Some(plan) => {
                        let sc = if plan.flip { w - 1 - c } else { c };
                        let s = (r * w + sc) * 3;
                        for k in 0..3 {
                            self.input[dst + k] = plan.photometric(src[s + k], k) - 0.5;
                        }
                    }
                }
            }
        }
    }

    fn plan_positions(&mut self, num_blocks: usize, head: Option<&[usize]>) {
        let n = self.height * self.width;
        self.positions.resize_with(num_blocks, Vec::new);
        match head {
            None => {
                self.all_positions = true;
                for p in &mut self.positions {
                    p.clear();
                    p.extend(0..n);
                }
            }
            Some(head) => {
                self.all_positions = false;
                self.grid.clear();
                self.grid.resize(n, false);
                for &p in head {
                    self.grid[p] = true;
                }
                for b in (0..num_blocks).rev() {
                    if b + 1 < num_blocks {
                        dilate(&self.grid, &mut self.scratch, self.height, self.width);
                        std::mem::swap(&mut self.grid, &mut self.scratch);
                    }
                    let dst = &mut self.positions[b];
                    dst.clear();
                    dst.extend(self.grid.iter().enumerate().filter(|(_, &on)| on).map(|(i, _)| i));
                }
            }
        }
    }

    /// Runs the network. With `head = Some(ps)` logits are produced only at
    /// `ps`; otherwise everywhere.
    pub fn forward(&mut self, params: &Parameters, head: Option<&[usize]>, mut dropout: DropoutSource<'_>) {
        let nb = params.blocks.len();
        let (h, w) = (self.height, self.width);
        self.plan_positions(nb, head);
        self.acts.resize_with(nb, Vec::new);
        self.masks.resize_with(nb, Vec::new);
        self.use_masks = !matches!(dropout, DropoutSource::Off);
        for b in 0..nb {
            let layer = &params.blocks[b];
            let ch = layer.out_channels;
            let mut out = std::mem::take(&mut self.acts[b]);
            out.resize(h * w * ch, 0.0);
            {
                let input = if b == 0 { &self.input } else { &self.acts[b - 1] };
                conv_forward(layer, input, h, w, &self.positions[b], &mut out);
            }
            let mask = &mut self.masks[b];
            match &mut dropout {
                DropoutSource::Off => {}
                DropoutSource::Fixed(m) => {
                    mask.clear();
                    mask.extend_from_slice(&m.blocks[b]);
                }
                DropoutSource::Sample { rng, rate } => {
                    mask.resize(h * w * ch, 0.0);
                    let keep = 1.0 / (1.0 - *rate);
                    for &p in &self.positions[b] {
                        for m in &mut mask[p * ch..(p + 1) * ch] {
                            *m = if rng.random::<f64>() < *rate { 0.0 } else { keep };
                        }
                    }
                }
            }
            for &p in &self.positions[b] {
                let slot = &mut out[p * ch..(p + 1) * ch];
                if self.use_masks {
                    for (v, m) in slot.iter_mut().zip(&mask[p * ch..(p + 1) * ch]) {
                        *v = v.max(0.0) * m;
                    }
                } else {
                    slot.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            self.acts[b] = out;
        }
        let head_layer = &params.head;
        self.logits.resize(h * w * head_layer.out_channels, 0.0);
        let head_positions = &self.positions[nb - 1];
        conv_forward(head_layer, &self.acts[nb - 1], h, w, head_positions, &mut self.logits);
    }

    pub fn logits_full(&self, image_id: &str, num_classes: usize) -> Logits {
        debug_assert!(self.all_positions);
        Logits {
            image_id: image_id.to_string(),
            height: self.height,
            width: self.width,
            num_classes,
            values: self.logits.clone(),
        }
    }

    /// Sparse cross-entropy summed over `labels` (position, class) with the
    /// gradient of that sum accumulated into `grads`. Requires a preceding
    /// `forward` whose head set covers every labelled position.
    pub fn backward_sparse_ce(&mut self, params: &Parameters, labels: &[(usize, usize)], grads: &mut Parameters) -> f64 {
        let nb = params.blocks.len();
        let (h, w) = (self.height, self.width);
        let c = params.head.out_channels;
        let ch = params.head.in_channels;

        // dL/dlogits, accumulated per position so repeated labels add up
        self.dlogits.resize(h * w * c, 0.0);
        for &p in &self.positions[nb - 1] {
            self.dlogits[p * c..(p + 1) * c].fill(0.0);
        }
        let mut probs = Vec::with_capacity(c);
        let mut loss = 0.0;
        for &(p, y) in labels {
            probs.clear();
            softmax_into(&self.logits[p * c..(p + 1) * c], &mut probs);
            let py = probs[y];
            loss -= py.max(super::train::PROB_FLOOR).ln();
            if py < super::train::PROB_FLOOR {
                // the clamp makes the loss locally constant
                continue;
            }
            let g = &mut self.dlogits[p * c..(p + 1) * c];
            for (k, (gk, pk)) in g.iter_mut().zip(&probs).enumerate() {
                *gk += pk - if k == y { 1.0 } else { 0.0 };
            }
        }

        self.grad_out.resize(h * w * ch, 0.0);
        for &p in &self.positions[nb - 1] {
            self.grad_out[p * ch..(p + 1) * ch].fill(0.0);
        }
        conv_backward(
            &params.head,
            &self.acts[nb - 1],
            h,
            w,
            &self.positions[nb - 1],
            &self.dlogits,
            &mut grads.head,
            Some(&mut self.grad_out),
        );

        for b in (0..nb).rev() {
            let layer = &params.blocks[b];
            let ch = layer.out_channels;
            // through dropout and ReLU: act = relu(pre) * mask
            for &p in &self.positions[b] {
                let range = p * ch..(p + 1) * ch;
                let act = &self.acts[b][range.clone()];
                let g = &mut self.grad_out[range.clone()];
                if self.use_masks {
                    let mask = &self.masks[b][range];
                    for ((gv, a), m) in g.iter_mut().zip(act).zip(mask) {
                        *gv = if *a > 0.0 { *gv * m } else { 0.0 };
                    }
                } else {
                    for (gv, a) in g.iter_mut().zip(act) {
                        if *a <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
            }
            if b == 0 {
                conv_backward(layer, &self.input, h, w, &self.positions[0], &self.grad_out, &mut grads.blocks[0], None);
            } else {
                let in_ch = layer.in_channels;
                self.grad_in.resize(h * w * in_ch, 0.0);
                for &p in &self.positions[b - 1] {
                    self.grad_in[p * in_ch..(p + 1) * in_ch].fill(0.0);
                }
                conv_backward(
                    layer,
                    &self.acts[b - 1],
                    h,
                    w,
                    &self.positions[b],
                    &self.grad_out,
                    &mut grads.blocks[b],
                    Some(&mut self.grad_in),
                );
                std::mem::swap(&mut self.grad_out, &mut self.grad_in);
            }
        }
        loss
    }
}

/// Marks every pixel within Chebyshev distance 1 of a marked pixel.
fn dilate(src: &[bool], dst: &mut Vec<bool>, h: usize, w: usize) {
    dst.clear();
    dst.resize(h * w, false);
    for r in 0..h {
        for c in 0..w {
            if !src[r * w + c] {
                continue;
            }
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    dst[rr * w + cc] = true;
                }
            }
        }
    }
}

/// Iterates the in-bounds taps of a `k x k` window centred on `(row, col)`
/// as `(tap_index, source_position)`.
#[inline]
fn taps(k: usize, row: usize, col: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let r = k / 2;
    (0..k).flat_map(move |ky| {
        (0..k).filter_map(move |kx| {
            let rr = (row + ky).checked_sub(r)?;
            let cc = (col + kx).checked_sub(r)?;
            (rr < h && cc < w).then_some((ky * k + kx, rr * w + cc))
        })
    })
}

fn conv_forward(layer: &ConvLayer, input: &[f64], h: usize, w: usize, positions: &[usize], out: &mut [f64]) {
    let (ic, oc, k) = (layer.in_channels, layer.out_channels, layer.kernel);
    for &p in positions {
        let acc = &mut out[p * oc..(p + 1) * oc];
        acc.copy_from_slice(&layer.bias);
        for (tap, q) in taps(k, p / w, p % w, h, w) {
            let x = &input[q * ic..(q + 1) * ic];
            let wt = &layer.weights[tap * ic * oc..(tap + 1) * ic * oc];
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (a, &wv) in acc.iter_mut().zip(&wt[i * oc..(i + 1) * oc]) {
                    *a += wv * xi;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    layer: &ConvLayer,
    input: &[f64],
    h: usize,
    w: usize,
    positions: &[usize],
    grad_out: &[f64],
    grad: &mut ConvLayer,
    mut grad_in: Option<&mut Vec<f64>>,
) {
    let (ic, oc, k) = (layer.in_channels, layer.out_channels, layer.kernel);
    for &p in positions {
        let g = &grad_out[p * oc..(p + 1) * oc];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (b, gv) in grad.bias.iter_mut().zip(g) {
            *b += gv;
        }
        for (tap, q) in taps(k, p / w, p % w, h, w) {
            let x = &input[q * ic..(q + 1) * ic];
            let base = tap * ic * oc;
            for (i, &xi) in x.iter().enumerate() {
                let row = base + i * oc..base + (i + 1) * oc;
                if xi != 0.0 {
                    for (gw, gv) in grad.weights[row.clone()].iter_mut().zip(g) {
                        *gw += gv * xi;
                    }
                }
                if let Some(din) = grad_in.as_deref_mut() {
                    let dot: f64 = layer.weights[row].iter().zip(g).map(|(a, b)| a * b).sum();
                    din[q * ic + i] += dot;
                }
            }
        }
    }
}
