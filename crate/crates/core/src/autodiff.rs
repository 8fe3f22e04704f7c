//! Reverse-mode automatic differentiation over the supported layer set.
//!
//! `forward_loss` runs the model on a batch, records every primitive op on a
//! [`Tape`], and returns the mean softmax cross-entropy. Replaying the tape
//! backward yields gradients with respect to the parameters (`grad_params`)
//! and the input batch (`grad_input`) in a single sweep.
//!
//! BatchNorm always uses the statistics of the current batch (transductive);
//! no running statistics exist. Passes are single-threaded and deterministic:
//! identical inputs produce bit-identical losses and gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::CoreError;
use crate::model::{Activation, LayerKind, ModelSpec, Padding, ParamEntry, ParamSet};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

type BufId = usize;

#[derive(Debug, Clone)]
enum Node {
    Conv2d { input: BufId, weight: BufId, bias: BufId, out: BufId, padding: Padding },
    BatchNorm { input: BufId, gamma: BufId, beta: BufId, out: BufId, mean: Vec<f64>, var: Vec<f64> },
    Relu { input: BufId, out: BufId },
    MaxPool2 { input: BufId, out: BufId, argmax: Vec<usize> },
    Flatten { input: BufId, out: BufId },
    Dense { input: BufId, weight: BufId, bias: BufId, out: BufId },
    /// Mean softmax cross-entropy over the batch; caches the probabilities.
    SoftmaxCe { logits: BufId, probs: Tensor },
}

/// Ordered record of one forward pass.
///
/// Immutable after construction; replaying the node list in reverse visits
/// each node exactly once and accumulates both gradient kinds.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    param_meta: Vec<(String, usize, bool)>,
    input_id: BufId,
    labels: Vec<usize>,
    loss: f64,
}

impl Tape {
    /// The scalar loss this tape computed.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// One reverse sweep producing parameter gradients (in the layout of the
    /// parameters the pass ran with) and the input-batch gradient.
    pub fn gradients(&self) -> (ParamSet, Tensor) {
        let (p, i) = self.backward_impl(1.0, true, true);
        (p.expect("params requested"), i.expect("input requested"))
    }

    /// Parameter gradients only; skips the gradient flow into the input.
    pub fn param_gradients(&self) -> ParamSet {
        self.backward_impl(1.0, true, false).0.expect("params requested")
    }

    /// Input-batch gradient only; skips all weight-gradient accumulation.
    pub fn input_gradients(&self) -> Tensor {
        self.backward_impl(1.0, false, true).1.expect("input requested")
    }

    /// Reverse sweep with an arbitrary seed on the loss; gradients are
    /// linear in the seed.
    pub(crate) fn gradients_seeded(&self, seed: f64) -> (ParamSet, Tensor) {
        let (p, i) = self.backward_impl(seed, true, true);
        (p.expect("params requested"), i.expect("input requested"))
    }

    fn backward_impl(
        &self,
        seed: f64,
        want_params: bool,
        want_input: bool,
    ) -> (Option<ParamSet>, Option<Tensor>) {
        debug_assert!(want_params || want_input);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        for node in self.nodes.iter().rev() {
            self.backward_node(node, seed, want_params, want_input, &mut grads);
        }
        let param_grads = want_params.then(|| {
            let entries = self
                .param_meta
                .iter()
                .enumerate()
                .map(|(i, (name, layer_index, is_bn))| ParamEntry {
                    name: name.clone(),
                    layer_index: *layer_index,
                    tensor: match grads[i].take() {
                        Some(g) => Tensor::from_vec(self.vals[i].shape().to_vec(), g)
                            .expect("gradient mirrors parameter shape"),
                        None => Tensor::zeros(self.vals[i].shape()),
                    },
                    is_bn: *is_bn,
                })
                .collect();
            ParamSet::new(entries).expect("parameter names already unique")
        });
        let input_grad = want_input.then(|| match grads[self.input_id].take() {
            Some(g) => Tensor::from_vec(self.vals[self.input_id].shape().to_vec(), g)
                .expect("gradient mirrors input shape"),
            None => Tensor::zeros(self.vals[self.input_id].shape()),
        });
        (param_grads, input_grad)
    }

    fn backward_node(
        &self,
        node: &Node,
        seed: f64,
        want_params: bool,
        want_input: bool,
        grads: &mut Vec<Option<Vec<f64>>>,
    ) {
        // The gradient must flow into this node's data input unless that
        // input is the network input and nobody asked for it.
        let need_dx = |input: BufId| want_input || input != self.input_id;
        match node {
            Node::SoftmaxCe { logits, probs } => {
                let batch = self.labels.len();
                let classes = probs.shape()[1];
                let scale = seed / batch as f64;
                let mut g = probs.data().to_vec();
                for (b, &label) in self.labels.iter().enumerate() {
                    let row = &mut g[b * classes..(b + 1) * classes];
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, g);
            }
            Node::Dense { input, weight, bias, out } => {
                let g = grads[*out].take().expect("dense output gradient present");
                let x = self.vals[*input].data();
                let w = self.vals[*weight].data();
                let (batch, in_f) = dims2(&self.vals[*input]);
                let out_f = self.vals[*weight].shape()[0];
                let with_dx = need_dx(*input);

                let mut dw = vec![0.0; if want_params { w.len() } else { 0 }];
                let mut db = vec![0.0; if want_params { out_f } else { 0 }];
                let mut dx = vec![0.0; if with_dx { x.len() } else { 0 }];
                for b in 0..batch {
                    let grow = &g[b * out_f..(b + 1) * out_f];
                    let xrow = &x[b * in_f..(b + 1) * in_f];
                    for o in 0..out_f {
                        let go = grow[o];
                        if go == 0.0 {
                            continue;
                        }
                        let wrow = &w[o * in_f..(o + 1) * in_f];
                        if want_params {
                            db[o] += go;
                            let dwrow = &mut dw[o * in_f..(o + 1) * in_f];
                            for (d, xv) in dwrow.iter_mut().zip(xrow) {
                                *d += go * xv;
                            }
                        }
                        if with_dx {
                            let dxrow = &mut dx[b * in_f..(b + 1) * in_f];
                            for (d, wv) in dxrow.iter_mut().zip(wrow) {
                                *d += go * wv;
                            }
                        }
                    }
                }
                if want_params {
                    accumulate(grads, *weight, dw);
                    accumulate(grads, *bias, db);
                }
                if with_dx {
                    accumulate(grads, *input, dx);
                }
            }
            Node::Flatten { input, out } => {
                let g = grads[*out].take().expect("flatten output gradient present");
                if need_dx(*input) {
                    accumulate(grads, *input, g);
                }
            }
            Node::Relu { input, out } => {
                let mut g = grads[*out].take().expect("relu output gradient present");
                if need_dx(*input) {
                    for (gv, &x) in g.iter_mut().zip(self.vals[*input].data()) {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(grads, *input, g);
                }
            }
            Node::MaxPool2 { input, out, argmax } => {
                let g = grads[*out].take().expect("pool output gradient present");
                if need_dx(*input) {
                    let mut dx = vec![0.0; self.vals[*input].len()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += gv;
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Node::BatchNorm { input, gamma, beta, out, mean, var } => {
                let g = grads[*out].take().expect("batchnorm output gradient present");
                let x = self.vals[*input].data();
                let gam = self.vals[*gamma].data();
                let plan = bn_plan(&self.vals[*input]);
                let channels = plan.channels;
                let with_dx = need_dx(*input);
                let count = (x.len() / channels) as f64;

                let (gsum, gxsum) = bn_channel_sums(&plan, x, &g);
                let inv: Vec<f64> =
                    var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
                // d(loss)/d(gamma) is the gradient-weighted normalized input.
                let dgamma: Vec<f64> = (0..channels)
                    .map(|c| inv[c] * (gxsum[c] - mean[c] * gsum[c]))
                    .collect();
                if with_dx {
                    // dx = k*(g - mean(g) - xhat * mean(g*xhat)) written as an
                    // affine map A*g + B*x + C per channel.
                    let mut a = vec![0.0; channels];
                    let mut b = vec![0.0; channels];
                    let mut c0 = vec![0.0; channels];
                    for c in 0..channels {
                        let k = gam[c] * inv[c];
                        let mg = gsum[c] / count;
                        let mgx = dgamma[c] / count;
                        a[c] = k;
                        b[c] = -k * mgx * inv[c];
                        c0[c] = -k * mg - b[c] * mean[c];
                    }
                    let mut dx = vec![0.0; x.len()];
                    bn_apply_affine(&plan, &a, &c0, &g, Some((&b, x)), &mut dx);
                    accumulate(grads, *input, dx);
                }
                if want_params {
                    accumulate(grads, *gamma, dgamma);
                    accumulate(grads, *beta, gsum);
                }
            }
            Node::Conv2d { input, weight, bias, out, padding } => {
                let g = grads[*out].take().expect("conv output gradient present");
                let x = &self.vals[*input];
                let w = &self.vals[*weight];
                let geom = ConvGeom::new(x, w, *padding);
                let with_dx = need_dx(*input);
                let (dw, db, dx) = conv2d_backward(x, w, &g, &geom, want_params, with_dx);
                if want_params {
                    accumulate(grads, *weight, dw);
                    accumulate(grads, *bias, db);
                }
                if with_dx {
                    accumulate(grads, *input, dx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: BufId, add: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, a) in existing.iter_mut().zip(&add) {
                *e += a;
            }
        }
        None => grads[id] = Some(add),
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

/// Iteration plan for per-channel batch statistics. Image channels are
/// contiguous planes of length `spatial`; flat features sit at stride
/// `channels` within each row.
struct BnPlan {
    channels: usize,
    spatial: usize,
}

fn bn_plan(t: &Tensor) -> BnPlan {
    match t.shape() {
        [_, c, h, w] => BnPlan { channels: *c, spatial: h * w },
        [_, f] => BnPlan { channels: *f, spatial: 1 },
        other => unreachable!("batchnorm input rank {other:?}"),
    }
}

/// Per-channel sums of `g` and `g * x` in one pass.
fn bn_channel_sums(plan: &BnPlan, x: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gsum = vec![0.0; plan.channels];
    let mut gxsum = vec![0.0; plan.channels];
    if plan.spatial == 1 {
        for (grow, xrow) in g.chunks_exact(plan.channels).zip(x.chunks_exact(plan.channels)) {
            for ((s, sx), (&gv, &xv)) in
                gsum.iter_mut().zip(gxsum.iter_mut()).zip(grow.iter().zip(xrow))
            {
                *s += gv;
                *sx += gv * xv;
            }
        }
    } else {
        for (i, (gplane, xplane)) in
            g.chunks_exact(plan.spatial).zip(x.chunks_exact(plan.spatial)).enumerate()
        {
            let c = i % plan.channels;
            let mut s = 0.0;
            let mut sx = 0.0;
            for (&gv, &xv) in gplane.iter().zip(xplane) {
                s += gv;
                sx += gv * xv;
            }
            gsum[c] += s;
            gxsum[c] += sx;
        }
    }
    (gsum, gxsum)
}

/// Per-channel affine map `out = a[c] * src + b[c] (+ c2[c] * src2)`.
fn bn_apply_affine(
    plan: &BnPlan,
    a: &[f64],
    b: &[f64],
    src: &[f64],
    extra: Option<(&[f64], &[f64])>,
    out: &mut [f64],
) {
    if plan.spatial == 1 {
        for (row_out, row_src) in
            out.chunks_exact_mut(plan.channels).zip(src.chunks_exact(plan.channels))
        {
            for (c, (o, &s)) in row_out.iter_mut().zip(row_src).enumerate() {
                *o = a[c] * s + b[c];
            }
        }
        if let Some((coef, src2)) = extra {
            for (row_out, row_src) in
                out.chunks_exact_mut(plan.channels).zip(src2.chunks_exact(plan.channels))
            {
                for (c, (o, &s)) in row_out.iter_mut().zip(row_src).enumerate() {
                    *o += coef[c] * s;
                }
            }
        }
    } else {
        for (i, (plane_out, plane_src)) in
            out.chunks_exact_mut(plan.spatial).zip(src.chunks_exact(plan.spatial)).enumerate()
        {
            let c = i % plan.channels;
            let (av, bv) = (a[c], b[c]);
            for (o, &s) in plane_out.iter_mut().zip(plane_src) {
                *o = av * s + bv;
            }
        }
        if let Some((coef, src2)) = extra {
            for (i, (plane_out, plane_src)) in
                out.chunks_exact_mut(plan.spatial).zip(src2.chunks_exact(plan.spatial)).enumerate()
            {
                let cv = coef[i % plan.channels];
                for (o, &s) in plane_out.iter_mut().zip(plane_src) {
                    *o += cv * s;
                }
            }
        }
    }
}

struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
    pad: usize,
    pad_h: usize,
    pad_w: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, padding: Padding) -> ConvGeom {
        let [batch, in_c, in_h, in_w] = *x.shape() else { unreachable!("conv input rank") };
        let [out_c, _, k, _] = *w.shape() else { unreachable!("conv weight rank") };
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        };
        let (out_h, out_w) = match padding {
            Padding::Same => (in_h, in_w),
            Padding::Valid => (in_h - k + 1, in_w - k + 1),
        };
        // Padded buffer is sized for the full kernel extent so Same with an
        // even kernel stays in bounds (extra trailing zeros are harmless).
        ConvGeom {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            out_h,
            out_w,
            pad,
            pad_h: out_h + k - 1,
            pad_w: out_w + k - 1,
        }
    }

    fn padded_len(&self) -> usize {
        self.in_c * self.pad_h * self.pad_w
    }

    /// Copy image `b` of `x` into the zero-padded scratch buffer.
    fn fill_padded(&self, x: &[f64], b: usize, scratch: &mut [f64]) {
        scratch.fill(0.0);
        let img = &x[b * self.in_c * self.in_h * self.in_w..];
        for c in 0..self.in_c {
            for y in 0..self.in_h {
                let src = c * self.in_h * self.in_w + y * self.in_w;
                let dst = c * self.pad_h * self.pad_w + (y + self.pad) * self.pad_w + self.pad;
                scratch[dst..dst + self.in_w].copy_from_slice(&img[src..src + self.in_w]);
            }
        }
    }
}

/// Patch matrix (im2col): row `r = (c, ky, kx)` holds the padded input
/// values that kernel tap multiplies, one column per output pixel. Turns the
/// convolution into a small matrix product with long contiguous inner loops.
fn fill_patches(geom: &ConvGeom, padded: &[f64], patches: &mut [f64]) {
    let pixels = geom.out_h * geom.out_w;
    let mut r = 0usize;
    for c in 0..geom.in_c {
        let plane = &padded[c * geom.pad_h * geom.pad_w..][..geom.pad_h * geom.pad_w];
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let row = &mut patches[r * pixels..(r + 1) * pixels];
                for y in 0..geom.out_h {
                    let src = &plane[(y + ky) * geom.pad_w + kx..][..geom.out_w];
                    row[y * geom.out_w..(y + 1) * geom.out_w].copy_from_slice(src);
                }
                r += 1;
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, geom: &ConvGeom) -> Tensor {
    let pixels = geom.out_h * geom.out_w;
    let taps = geom.in_c * geom.k * geom.k;
    let mut out = vec![0.0; geom.batch * geom.out_c * pixels];
    let mut padded = vec![0.0; geom.padded_len()];
    let mut patches = vec![0.0; taps * pixels];
    let xd = x.data();
    let wd = w.data();
    let bd = bias.data();
    for b in 0..geom.batch {
        geom.fill_padded(xd, b, &mut padded);
        fill_patches(geom, &padded, &mut patches);
        let img_out = &mut out[b * geom.out_c * pixels..][..geom.out_c * pixels];
        for o in 0..geom.out_c {
            let chan = &mut img_out[o * pixels..(o + 1) * pixels];
            chan.fill(bd[o]);
            let wrow = &wd[o * taps..(o + 1) * taps];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let prow = &patches[r * pixels..(r + 1) * pixels];
                for (d, s) in chan.iter_mut().zip(prow) {
                    *d += wv * s;
                }
            }
        }
    }
    Tensor::from_vec(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], out)
        .expect("conv output shape")
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    geom: &ConvGeom,
    want_weights: bool,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pixels = geom.out_h * geom.out_w;
    let taps = geom.in_c * geom.k * geom.k;
    let xd = x.data();
    let wd = w.data();
    let mut dw = vec![0.0; if want_weights { wd.len() } else { 0 }];
    let mut db = vec![0.0; if want_weights { geom.out_c } else { 0 }];
    let mut dx = vec![0.0; if want_input { xd.len() } else { 0 }];
    let mut padded = vec![0.0; geom.padded_len()];
    let mut patches = vec![0.0; taps * pixels];
    let mut dpatches = vec![0.0; if want_input { taps * pixels } else { 0 }];
    let mut dpadded = vec![0.0; if want_input { geom.padded_len() } else { 0 }];
    for b in 0..geom.batch {
        let img_g = &g[b * geom.out_c * pixels..][..geom.out_c * pixels];
        if want_weights {
            geom.fill_padded(xd, b, &mut padded);
            fill_patches(geom, &padded, &mut patches);
            for o in 0..geom.out_c {
                let gchan = &img_g[o * pixels..(o + 1) * pixels];
                db[o] += gchan.iter().sum::<f64>();
                let dwrow = &mut dw[o * taps..(o + 1) * taps];
                for (r, dwv) in dwrow.iter_mut().enumerate() {
                    let prow = &patches[r * pixels..(r + 1) * pixels];
                    let mut acc = 0.0;
                    for (gv, pv) in gchan.iter().zip(prow) {
                        acc += gv * pv;
                    }
                    *dwv += acc;
                }
            }
        }
        if want_input {
            // dPatches = W^T x g, folded back onto the padded image and
            // cropped (the reverse of fill_padded + fill_patches).
            dpatches.fill(0.0);
            for o in 0..geom.out_c {
                let gchan = &img_g[o * pixels..(o + 1) * pixels];
                let wrow = &wd[o * taps..(o + 1) * taps];
                for (r, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let drow = &mut dpatches[r * pixels..(r + 1) * pixels];
                    for (d, gv) in drow.iter_mut().zip(gchan) {
                        *d += wv * gv;
                    }
                }
            }
            dpadded.fill(0.0);
            let mut r = 0usize;
            for c in 0..geom.in_c {
                let dplane = &mut dpadded[c * geom.pad_h * geom.pad_w..][..geom.pad_h * geom.pad_w];
                for ky in 0..geom.k {
                    for kx in 0..geom.k {
                        let drow_all = &dpatches[r * pixels..(r + 1) * pixels];
                        for y in 0..geom.out_h {
                            let src = &drow_all[y * geom.out_w..(y + 1) * geom.out_w];
                            let dst = &mut dplane[(y + ky) * geom.pad_w + kx..][..geom.out_w];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        r += 1;
                    }
                }
            }
            let dimg = &mut dx[b * geom.in_c * geom.in_h * geom.in_w..]
                [..geom.in_c * geom.in_h * geom.in_w];
            for c in 0..geom.in_c {
                for y in 0..geom.in_h {
                    let src = c * geom.pad_h * geom.pad_w + (y + geom.pad) * geom.pad_w + geom.pad;
                    let dst = c * geom.in_h * geom.in_w + y * geom.in_w;
                    for i in 0..geom.in_w {
                        dimg[dst + i] += dpadded[src + i];
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

struct Recorder {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
}

impl Recorder {
    fn push_val(&mut self, t: Tensor) -> BufId {
        self.vals.push(t);
        self.vals.len() - 1
    }

    fn run_layers(
        &mut self,
        spec: &ModelSpec,
        param_ids: &[BufId],
        input: BufId,
    ) -> Result<BufId, CoreError> {
        let shapes = spec.trace_shapes()?;
        let mut cur = input;
        let mut next_param = 0usize;
        for (i, layer) in spec.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Conv2d { padding, .. } => {
                    let weight = param_ids[next_param];
                    let bias = param_ids[next_param + 1];
                    next_param += 2;
                    let geom = ConvGeom::new(&self.vals[cur], &self.vals[weight], padding);
                    let out_val = conv2d_forward(
                        &self.vals[cur],
                        &self.vals[weight],
                        &self.vals[bias],
                        &geom,
                    );
                    let out = self.push_val(out_val);
                    self.nodes.push(Node::Conv2d { input: cur, weight, bias, out, padding });
                    cur = out;
                    if layer.has_bn {
                        cur = self.batch_norm(cur, param_ids[next_param], param_ids[next_param + 1]);
                        next_param += 2;
                    }
                }
                LayerKind::Dense { .. } => {
                    let weight = param_ids[next_param];
                    let bias = param_ids[next_param + 1];
                    next_param += 2;
                    let x = &self.vals[cur];
                    let w = &self.vals[weight];
                    let bv = &self.vals[bias];
                    let (batch, in_f) = dims2(x);
                    let out_f = w.shape()[0];
                    let mut out = vec![0.0; batch * out_f];
                    for b in 0..batch {
                        let xrow = &x.data()[b * in_f..(b + 1) * in_f];
                        let orow = &mut out[b * out_f..(b + 1) * out_f];
                        for o in 0..out_f {
                            let wrow = &w.data()[o * in_f..(o + 1) * in_f];
                            let mut acc = bv.data()[o];
                            for (wv, xv) in wrow.iter().zip(xrow) {
                                acc += wv * xv;
                            }
                            orow[o] = acc;
                        }
                    }
                    let out_id = self.push_val(
                        Tensor::from_vec(vec![batch, out_f], out).expect("dense output shape"),
                    );
                    self.nodes.push(Node::Dense { input: cur, weight, bias, out: out_id });
                    cur = out_id;
                    if layer.has_bn {
                        cur = self.batch_norm(cur, param_ids[next_param], param_ids[next_param + 1]);
                        next_param += 2;
                    }
                }
                LayerKind::Relu => {
                    let out_val = self.vals[cur].map(|v| if v > 0.0 { v } else { 0.0 });
                    let out = self.push_val(out_val);
                    self.nodes.push(Node::Relu { input: cur, out });
                    cur = out;
                }
                LayerKind::MaxPool2 => {
                    let x = &self.vals[cur];
                    let [batch, c, h, w] = *x.shape() else { unreachable!("pool input rank") };
                    let (oh, ow) = (h / 2, w / 2);
                    let xd = x.data();
                    let mut out = vec![0.0; batch * c * oh * ow];
                    let mut argmax = vec![0usize; out.len()];
                    let mut dst = 0;
                    for img in 0..batch * c {
                        let base = img * h * w;
                        for y in 0..oh {
                            for xcol in 0..ow {
                                let i00 = base + (2 * y) * w + 2 * xcol;
                                let i01 = i00 + 1;
                                let i10 = i00 + w;
                                let i11 = i10 + 1;
                                let mut best = i00;
                                if xd[i01] > xd[best] {
                                    best = i01;
                                }
                                if xd[i10] > xd[best] {
                                    best = i10;
                                }
                                if xd[i11] > xd[best] {
                                    best = i11;
                                }
                                out[dst] = xd[best];
                                argmax[dst] = best;
                                dst += 1;
                            }
                        }
                    }
                    let out_id = self.push_val(
                        Tensor::from_vec(vec![batch, c, oh, ow], out).expect("pool output shape"),
                    );
                    self.nodes.push(Node::MaxPool2 { input: cur, out: out_id, argmax });
                    cur = out_id;
                }
                LayerKind::Flatten => {
                    let x = &self.vals[cur];
                    let batch = x.shape()[0];
                    let features = x.len() / batch;
                    let out_val = x.reshaped(vec![batch, features])?;
                    let out = self.push_val(out_val);
                    self.nodes.push(Node::Flatten { input: cur, out });
                    cur = out;
                }
            }
            // Shape bookkeeping is validated up front; `shapes[i + 1]` is the
            // contract this layer's output satisfies.
            debug_assert!(matches!(shapes[i + 1], Activation::Image { .. } | Activation::Flat { .. }));
        }
        Ok(cur)
    }

    fn batch_norm(&mut self, input: BufId, gamma: BufId, beta: BufId) -> BufId {
        let x = &self.vals[input];
        let plan = bn_plan(x);
        let xd = x.data();
        let count = (xd.len() / plan.channels) as f64;
        // Two-pass variance: the squared-sums shortcut loses the exact
        // invariance of the output to constant input shifts.
        let mut mean = vec![0.0; plan.channels];
        let mut var = vec![0.0; plan.channels];
        if plan.spatial == 1 {
            for row in xd.chunks_exact(plan.channels) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            for row in xd.chunks_exact(plan.channels) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
        } else {
            for (i, plane) in xd.chunks_exact(plan.spatial).enumerate() {
                mean[i % plan.channels] += plane.iter().sum::<f64>();
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            for (i, plane) in xd.chunks_exact(plan.spatial).enumerate() {
                let m = mean[i % plan.channels];
                var[i % plan.channels] +=
                    plane.iter().map(|&v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        for s in var.iter_mut() {
            *s /= count;
        }
        let gam = self.vals[gamma].data();
        let bet = self.vals[beta].data();
        // y = gamma * (x - mean) / sqrt(var + eps) + beta, as a*x + b.
        let a: Vec<f64> = gam
            .iter()
            .zip(&var)
            .map(|(&g, &v)| g / (v + BN_EPS).sqrt())
            .collect();
        let b: Vec<f64> =
            bet.iter().zip(&a).zip(&mean).map(|((&bv, &av), &m)| bv - av * m).collect();
        let mut out = vec![0.0; xd.len()];
        bn_apply_affine(&plan, &a, &b, xd, None, &mut out);
        let shape = x.shape().to_vec();
        let out_id = self.push_val(Tensor::from_vec(shape, out).expect("batchnorm output shape"));
        self.nodes.push(Node::BatchNorm { input, gamma, beta, out: out_id, mean, var });
        out_id
    }
}

fn validate_batch(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: Option<&[usize]>,
) -> Result<(), CoreError> {
    params.matches_spec(spec)?;
    let (c, h, w) = spec.input_shape;
    match *x.shape() {
        [b, xc, xh, xw] if (xc, xh, xw) == (c, h, w) && b > 0 => {}
        ref other => {
            return Err(CoreError::shape(format!(
                "input batch shape {} does not match spec input ({c}, {h}, {w})",
                crate::tensor::shape_string(other)
            )))
        }
    }
    if let Some(y) = labels {
        if y.len() != x.shape()[0] {
            return Err(CoreError::shape(format!(
                "batch of {} examples with {} labels",
                x.shape()[0],
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= spec.n_outputs) {
            return Err(CoreError::shape(format!(
                "label {bad} out of range for {} outputs",
                spec.n_outputs
            )));
        }
    }
    Ok(())
}

fn record_pass(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<(Recorder, Vec<BufId>, BufId, BufId), CoreError> {
    let mut rec = Recorder { nodes: Vec::new(), vals: Vec::new() };
    let param_ids: Vec<BufId> =
        params.entries().iter().map(|e| rec.push_val(e.tensor.clone())).collect();
    let input_id = rec.push_val(x.clone());
    let logits_id = rec.run_layers(spec, &param_ids, input_id)?;
    Ok((rec, param_ids, input_id, logits_id))
}

/// Run the model and record the pass; returns the mean softmax cross-entropy
/// and the tape supporting both gradient kinds.
///
/// BatchNorm layers standardize with the statistics of this batch.
pub fn forward_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tape), CoreError> {
    validate_batch(spec, params, x, Some(labels))?;
    let (mut rec, _param_ids, input_id, logits_id) = record_pass(spec, params, x)?;

    let logits = &rec.vals[logits_id];
    let (batch, classes) = dims2(logits);
    let zd = logits.data();
    let mut probs = vec![0.0; zd.len()];
    let mut loss = 0.0;
    for b in 0..batch {
        let row = &zd[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let lse = max + denom.ln();
        loss += lse - row[labels[b]];
        for (p, &z) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
            *p = (z - lse).exp();
        }
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(CoreError::numeric("loss is not finite"));
    }
    let probs = Tensor::from_vec(vec![batch, classes], probs).expect("probs shape");
    rec.nodes.push(Node::SoftmaxCe { logits: logits_id, probs });

    let tape = Tape {
        nodes: rec.nodes,
        vals: rec.vals,
        param_meta: params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.layer_index, e.is_bn))
            .collect(),
        input_id,
        labels: labels.to_vec(),
        loss,
    };
    Ok((loss, tape))
}

/// Parameter gradients of the loss recorded on `tape`, in parameter layout.
pub fn grad_params(tape: &Tape) -> ParamSet {
    tape.param_gradients()
}

/// Gradient of the loss with respect to the input batch.
pub fn grad_input(tape: &Tape) -> Tensor {
    tape.input_gradients()
}

/// Logits of the model on a batch (no loss, no gradients).
pub fn forward_logits(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<Tensor, CoreError> {
    validate_batch(spec, params, x, None)?;
    let (rec, _, _, logits_id) = record_pass(spec, params, x)?;
    Ok(rec.vals.into_iter().nth(logits_id).expect("logits buffer exists"))
}

/// Fraction of examples whose argmax logit matches the label (ties take the
/// first class). BatchNorm uses the statistics of this batch.
pub fn classification_accuracy(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<f64, CoreError> {
    validate_batch(spec, params, x, Some(labels))?;
    let logits = forward_logits(spec, params, x)?;
    let (batch, classes) = dims2(&logits);
    let mut correct = 0usize;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch as f64)
}
