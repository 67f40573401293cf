//! Layers and layer stacks with explicit forward caches and backward passes.
//!
//! There is no autograd tape: each network is a straight chain of blocks, and
//! the model/objective code wires the few cross-connections (weight sharing,
//! translation loops, gradient reversal) by hand.

use crate::error::{Result, XganError};
use crate::kernels::{self, ConvGeom};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    LeakyRelu,
    Relu,
    Tanh,
}

impl Act {
    #[inline]
    fn apply<S: Scalar>(self, v: S) -> S {
        match self {
            Act::LeakyRelu => {
                if v > S::ZERO {
                    v
                } else {
                    v * S::from_f64(LEAKY_SLOPE)
                }
            }
            Act::Relu => v.maxs(S::ZERO),
            Act::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn grad_from_output<S: Scalar>(self, y: S) -> S {
        match self {
            Act::LeakyRelu => {
                if y > S::ZERO {
                    S::ONE
                } else {
                    S::from_f64(LEAKY_SLOPE)
                }
            }
            Act::Relu => {
                if y > S::ZERO {
                    S::ONE
                } else {
                    S::ZERO
                }
            }
            Act::Tanh => S::ONE - y * y,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<S> {
    /// Strided convolution, weights [out_c, in_c*k*k].
    Conv2d {
        w: Tensor<S>,
        b: Tensor<S>,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        act: Option<Act>,
        norm: bool,
    },
    /// Transposed convolution (upsampling), weights [in_c, out_c*k*k].
    Deconv2d {
        w: Tensor<S>,
        b: Tensor<S>,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        act: Option<Act>,
        norm: bool,
    },
    /// Fully-connected map; flattens any input to [n, d_in].
    Linear {
        w: Tensor<S>,
        b: Tensor<S>,
        d_in: usize,
        d_out: usize,
        act: Option<Act>,
    },
    /// Reinterprets [n, c*h*w] as [n, c, h, w].
    Reshape { c: usize, h: usize, w: usize },
}

impl<S: Scalar> Layer<S> {
    pub fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, act: Option<Act>, norm: bool) -> Layer<S> {
        Layer::Conv2d {
            w: Tensor::zeros(&[out_c, in_c * k * k]),
            b: Tensor::zeros(&[out_c]),
            in_c,
            out_c,
            k,
            stride,
            pad,
            act,
            norm,
        }
    }

    pub fn deconv(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, act: Option<Act>, norm: bool) -> Layer<S> {
        Layer::Deconv2d {
            w: Tensor::zeros(&[in_c, out_c * k * k]),
            b: Tensor::zeros(&[out_c]),
            in_c,
            out_c,
            k,
            stride,
            pad,
            act,
            norm,
        }
    }

    pub fn linear(d_in: usize, d_out: usize, act: Option<Act>) -> Layer<S> {
        Layer::Linear {
            w: Tensor::zeros(&[d_out, d_in]),
            b: Tensor::zeros(&[d_out]),
            d_in,
            d_out,
            act,
        }
    }

    pub fn params(&self) -> Option<(&Tensor<S>, &Tensor<S>)> {
        match self {
            Layer::Conv2d { w, b, .. } | Layer::Deconv2d { w, b, .. } | Layer::Linear { w, b, .. } => Some((w, b)),
            Layer::Reshape { .. } => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor<S>, &mut Tensor<S>)> {
        match self {
            Layer::Conv2d { w, b, .. } | Layer::Deconv2d { w, b, .. } | Layer::Linear { w, b, .. } => Some((w, b)),
            Layer::Reshape { .. } => None,
        }
    }

    fn init(&mut self, rng: &mut Rng) {
        if let Some((w, b)) = self.params_mut() {
            for v in w.data_mut() {
                *v = S::from_f64(rng.normal() * INIT_STD);
            }
            b.fill(S::ZERO);
        }
    }
}

#[derive(Clone, Debug)]
struct NormCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>, // one per (n, channel)
    spatial: usize,
}

#[derive(Clone, Debug)]
pub struct LayerCache<S> {
    /// Post-activation output (the next layer's input).
    y: Tensor<S>,
    /// im2col patches for conv layers.
    xcol: Option<Tensor<S>>,
    norm: Option<NormCache<S>>,
}

pub struct StackCache<S> {
    input: Tensor<S>,
    layers: Vec<LayerCache<S>>,
}

impl<S: Scalar> StackCache<S> {
    pub fn output(&self) -> &Tensor<S> {
        &self.layers.last().expect("non-empty stack").y
    }
}

/// Per-layer (dw, db) buffers parallel to a [Stack].
#[derive(Clone, Debug)]
pub struct StackGrads<S> {
    pub layers: Vec<Option<(Tensor<S>, Tensor<S>)>>,
}

impl<S: Scalar> StackGrads<S> {
    pub fn add_assign(&mut self, other: &StackGrads<S>) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                aw.add_assign(bw);
                ab.add_assign(bb);
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for g in self.layers.iter_mut().flatten() {
            g.0.scale(factor);
            g.1.scale(factor);
        }
    }
}

/// A straight chain of layers.
#[derive(Clone, Debug)]
pub struct Stack<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> Stack<S> {
    pub fn new(layers: Vec<Layer<S>>) -> Stack<S> {
        Stack { layers }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        for layer in &mut self.layers {
            layer.init(rng);
        }
    }

    pub fn zero_grads(&self) -> StackGrads<S> {
        StackGrads {
            layers: self
                .layers
                .iter()
                .map(|l| l.params().map(|(w, b)| (Tensor::zeros(w.dims()), Tensor::zeros(b.dims()))))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Forward pass retaining everything the backward pass needs.
    pub fn forward(&self, x: &Tensor<S>) -> StackCache<S> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let cache = forward_layer(layer, &cur);
            cur = cache.y.clone();
            caches.push(cache);
        }
        StackCache {
            input: x.clone(),
            layers: caches,
        }
    }

    /// Forward pass without caches (inference).
    pub fn forward_eval(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = forward_layer(layer, &cur).y;
        }
        cur
    }

    /// Backpropagates `dy` through the stack. Parameter gradients accumulate
    /// into `grads` when provided (pass `None` to treat parameters as frozen,
    /// e.g. the discriminator during the generator phase). Returns the
    /// gradient at the stack input when `need_dx` is set.
    pub fn backward(
        &self,
        cache: &StackCache<S>,
        dy: &Tensor<S>,
        mut grads: Option<&mut StackGrads<S>>,
        need_dx: bool,
    ) -> Option<Tensor<S>> {
        let mut d_cur = dy.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[idx];
            let input = if idx == 0 { &cache.input } else { &cache.layers[idx - 1].y };
            let layer_grads = grads.as_deref_mut().map(|g| &mut g.layers[idx]);
            let want_dx = need_dx || idx > 0;
            let dx = backward_layer(layer, lc, input, &d_cur, layer_grads, want_dx);
            match dx {
                Some(d) => d_cur = d,
                None => return None, // bottom layer, dx not requested
            }
        }
        Some(d_cur)
    }
}

fn batch_of(dims: &[usize]) -> usize {
    dims[0]
}

fn conv_geom_for(layer: &Layer<impl Scalar>, input_dims: &[usize]) -> ConvGeom {
    match layer {
        Layer::Conv2d {
            in_c, out_c, k, stride, pad, ..
        } => ConvGeom::conv(*in_c, *out_c, *k, *stride, *pad, input_dims[2], input_dims[3]),
        Layer::Deconv2d {
            in_c, out_c, k, stride, pad, ..
        } => {
            // Geometry of the adjoint conv: its "input" is our (bigger) output.
            let h_out = input_dims[2] * stride;
            let w_out = input_dims[3] * stride;
            ConvGeom::conv(*out_c, *in_c, *k, *stride, *pad, h_out, w_out)
        }
        _ => unreachable!(),
    }
}

fn apply_norm<S: Scalar>(z: Tensor<S>, channels: usize, norm: bool) -> (Tensor<S>, Option<NormCache<S>>) {
    if !norm {
        return (z, None);
    }
    let n = batch_of(z.dims());
    let spatial = z.len() / (n * channels);
    let mut y = z;
    let mut inv_std = Vec::with_capacity(n * channels);
    let eps = S::from_f64(NORM_EPS);
    for plane in y.data_mut().chunks_mut(spatial) {
        let count = S::from_usize(plane.len());
        let mean = plane.iter().copied().sum::<S>() / count;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / count;
        let is = S::ONE / (var + eps).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    let cache = NormCache {
        xhat: y.clone(),
        inv_std,
        spatial,
    };
    (y, Some(cache))
}

/// Raw layer output after normalization but before the activation, plus the
/// caches the backward pass needs.
fn forward_layer_preact<S: Scalar>(layer: &Layer<S>, x: &Tensor<S>) -> (Tensor<S>, Option<Tensor<S>>, Option<NormCache<S>>) {
    match layer {
        Layer::Conv2d {
            w, b, out_c, norm, ..
        } => {
            let g = conv_geom_for(layer, x.dims());
            let n = batch_of(x.dims());
            let mut y = Tensor::zeros(&[n, *out_c, g.h_out, g.w_out]);
            let mut xcol = Tensor::zeros(&[n, g.positions(), g.patch_len()]);
            kernels::conv_forward_batch(x.data(), w.data(), b.data(), &g, n, y.data_mut(), xcol.data_mut());
            let (y, norm_cache) = apply_norm(y, *out_c, *norm);
            (y, Some(xcol), norm_cache)
        }
        Layer::Deconv2d {
            w, b, out_c, stride, norm, ..
        } => {
            let g = conv_geom_for(layer, x.dims());
            let n = batch_of(x.dims());
            let mut y = Tensor::zeros(&[n, *out_c, x.dims()[2] * stride, x.dims()[3] * stride]);
            kernels::deconv_forward_batch(x.data(), w.data(), b.data(), &g, n, y.data_mut());
            let (y, norm_cache) = apply_norm(y, *out_c, *norm);
            (y, None, norm_cache)
        }
        Layer::Linear { w, b, d_in, d_out, .. } => {
            let n = batch_of(x.dims());
            debug_assert_eq!(x.len(), n * d_in, "linear input length");
            let mut y = Tensor::zeros(&[n, *d_out]);
            kernels::linear_forward_batch(x.data(), w.data(), b.data(), n, *d_in, *d_out, y.data_mut());
            (y, None, None)
        }
        Layer::Reshape { c, h, w } => {
            let n = batch_of(x.dims());
            (x.clone().reshaped(&[n, *c, *h, *w]), None, None)
        }
    }
}

fn layer_act<S: Scalar>(layer: &Layer<S>) -> Option<Act> {
    match layer {
        Layer::Conv2d { act, .. } | Layer::Deconv2d { act, .. } | Layer::Linear { act, .. } => *act,
        Layer::Reshape { .. } => None,
    }
}

fn forward_layer<S: Scalar>(layer: &Layer<S>, x: &Tensor<S>) -> LayerCache<S> {
    let (mut y, xcol, norm) = forward_layer_preact(layer, x);
    if let Some(a) = layer_act(layer) {
        for v in y.data_mut() {
            *v = a.apply(*v);
        }
    }
    LayerCache { y, xcol, norm }
}

/// Smallest |pre-activation| feeding a rectifier anywhere in the stack.
/// Finite-difference gradient checks are only trustworthy when this margin
/// comfortably exceeds the probe epsilon: a perturbation that crosses a
/// rectifier corner breaks the central-difference estimate.
pub fn rectifier_margin<S: Scalar>(stack: &Stack<S>, x: &Tensor<S>) -> f64 {
    let mut margin = f64::INFINITY;
    let mut cur = x.clone();
    for layer in &stack.layers {
        let (mut y, _, _) = forward_layer_preact(layer, &cur);
        match layer_act(layer) {
            Some(Act::Relu) | Some(Act::LeakyRelu) => {
                for v in y.data() {
                    margin = margin.min(v.to_f64().abs());
                }
            }
            _ => {}
        }
        if let Some(a) = layer_act(layer) {
            for v in y.data_mut() {
                *v = a.apply(*v);
            }
        }
        cur = y;
    }
    margin
}

/// Undoes activation and optional normalization: turns dL/dy into dL/dz where
/// z is the raw (pre-norm, pre-activation) layer output.
fn grad_through_norm_act<S: Scalar>(lc: &LayerCache<S>, act: Option<Act>, dy: &Tensor<S>) -> Tensor<S> {
    let mut dz = dy.clone();
    if let Some(a) = act {
        for (d, &y) in dz.data_mut().iter_mut().zip(lc.y.data().iter()) {
            *d *= a.grad_from_output(y);
        }
    }
    if let Some(nc) = &lc.norm {
        let spatial = nc.spatial;
        let count = S::from_usize(spatial);
        for (plane_idx, is) in nc.inv_std.iter().enumerate() {
            let lo = plane_idx * spatial;
            let hi = lo + spatial;
            let xhat = &nc.xhat.data()[lo..hi];
            let dplane = &mut dz.data_mut()[lo..hi];
            let mean_d = dplane.iter().copied().sum::<S>() / count;
            let mean_dx = dplane.iter().zip(xhat.iter()).map(|(&d, &h)| d * h).sum::<S>() / count;
            for (d, &h) in dplane.iter_mut().zip(xhat.iter()) {
                *d = (*d - mean_d - h * mean_dx) * *is;
            }
        }
    }
    dz
}

fn backward_layer<S: Scalar>(
    layer: &Layer<S>,
    lc: &LayerCache<S>,
    input: &Tensor<S>,
    dy: &Tensor<S>,
    grads: Option<&mut Option<(Tensor<S>, Tensor<S>)>>,
    need_dx: bool,
) -> Option<Tensor<S>> {
    match layer {
        Layer::Conv2d { w, act, norm: _, .. } => {
            let g = conv_geom_for(layer, input.dims());
            let n = batch_of(input.dims());
            let dz = grad_through_norm_act(lc, *act, dy);
            let mut dx = need_dx.then(|| Tensor::zeros(input.dims()));
            let mut scratch_w;
            let mut scratch_b;
            let (dw, db): (&mut Tensor<S>, &mut Tensor<S>) = match grads {
                Some(slot) => {
                    let (dw, db) = slot.as_mut().expect("conv layer has grads");
                    (dw, db)
                }
                None => {
                    scratch_w = Tensor::zeros(w.dims());
                    scratch_b = Tensor::zeros(&[g.out_c]);
                    (&mut scratch_w, &mut scratch_b)
                }
            };
            kernels::conv_backward_batch(
                lc.xcol.as_ref().unwrap().data(),
                w.data(),
                dz.data(),
                &g,
                n,
                dw.data_mut(),
                db.data_mut(),
                dx.as_mut().map(|t| t.data_mut()),
            );
            dx
        }
        Layer::Deconv2d { w, act, .. } => {
            let g = conv_geom_for(layer, input.dims());
            let n = batch_of(input.dims());
            let dz = grad_through_norm_act(lc, *act, dy);
            let mut dx = need_dx.then(|| Tensor::zeros(input.dims()));
            let mut scratch_w;
            let mut scratch_b;
            let (dw, db): (&mut Tensor<S>, &mut Tensor<S>) = match grads {
                Some(slot) => {
                    let (dw, db) = slot.as_mut().expect("deconv layer has grads");
                    (dw, db)
                }
                None => {
                    scratch_w = Tensor::zeros(w.dims());
                    scratch_b = Tensor::zeros(&[g.in_c]);
                    (&mut scratch_w, &mut scratch_b)
                }
            };
            let mut dzcol = vec![S::ZERO; n * g.positions() * g.patch_len()];
            kernels::deconv_backward_batch(
                input.data(),
                w.data(),
                dz.data(),
                &g,
                n,
                dw.data_mut(),
                db.data_mut(),
                dx.as_mut().map(|t| t.data_mut()),
                &mut dzcol,
            );
            dx
        }
        Layer::Linear { w, d_in, d_out, act, .. } => {
            let n = batch_of(input.dims());
            let dz = grad_through_norm_act(lc, *act, dy);
            let mut dx = need_dx.then(|| Tensor::zeros(input.dims()));
            let mut scratch_w;
            let mut scratch_b;
            let (dw, db): (&mut Tensor<S>, &mut Tensor<S>) = match grads {
                Some(slot) => {
                    let (dw, db) = slot.as_mut().expect("linear layer has grads");
                    (dw, db)
                }
                None => {
                    scratch_w = Tensor::zeros(w.dims());
                    scratch_b = Tensor::zeros(&[*d_out]);
                    (&mut scratch_w, &mut scratch_b)
                }
            };
            kernels::linear_backward_batch(
                input.data(),
                w.data(),
                dz.data(),
                n,
                *d_in,
                *d_out,
                dw.data_mut(),
                db.data_mut(),
                dx.as_mut().map(|t| t.data_mut()),
            );
            dx
        }
        Layer::Reshape { .. } => need_dx.then(|| dy.clone().reshaped(input.dims())),
    }
}

/// Validates that an input tensor looks like [n, c, h, w] images for a stack
/// whose first layer expects `c` channels of `size` x `size` pixels.
pub fn check_image_input<S: Scalar>(x: &Tensor<S>, channels: usize, size: usize) -> Result<()> {
    let d = x.dims();
    if d.len() != 4 || d[1] != channels || d[2] != size || d[3] != size {
        return Err(XganError::Dim(format!(
            "expected images [n, {channels}, {size}, {size}], got {d:?}"
        )));
    }
    if d[0] == 0 {
        return Err(XganError::Dim("empty batch".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff_stack(stack: &Stack<f64>, x: &Tensor<f64>, eps: f64) -> Vec<f64> {
        // d(sum of outputs)/d(param) by central differences
        let mut grads = Vec::new();
        let mut stack = stack.clone();
        let n_layers = stack.layers.len();
        for li in 0..n_layers {
            let Some((w_len, b_len)) = stack.layers[li].params().map(|(w, b)| (w.len(), b.len())) else {
                continue;
            };
            for which in 0..2 {
                let len = if which == 0 { w_len } else { b_len };
                for i in 0..len {
                    let read = |s: &mut Stack<f64>, idx: usize| -> f64 {
                        let (w, b) = s.layers[li].params_mut().unwrap();
                        if which == 0 {
                            w.data()[idx]
                        } else {
                            b.data()[idx]
                        }
                    };
                    let write = |s: &mut Stack<f64>, idx: usize, v: f64| {
                        let (w, b) = s.layers[li].params_mut().unwrap();
                        if which == 0 {
                            w.data_mut()[idx] = v;
                        } else {
                            b.data_mut()[idx] = v;
                        }
                    };
                    let orig = read(&mut stack, i);
                    write(&mut stack, i, orig + eps);
                    let up: f64 = stack.forward_eval(x).data().iter().sum();
                    write(&mut stack, i, orig - eps);
                    let down: f64 = stack.forward_eval(x).data().iter().sum();
                    write(&mut stack, i, orig);
                    grads.push((up - down) / (2.0 * eps));
                }
            }
        }
        grads
    }

    fn analytic_grads(stack: &Stack<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let cache = stack.forward(x);
        let dy = Tensor::full(cache.output().dims(), 1.0);
        let mut grads = stack.zero_grads();
        stack.backward(&cache, &dy, Some(&mut grads), false);
        let mut flat = Vec::new();
        for g in grads.layers.iter().flatten() {
            flat.extend_from_slice(g.0.data());
            flat.extend_from_slice(g.1.data());
        }
        flat
    }

    fn assert_grads_close(stack: &Stack<f64>, x: &Tensor<f64>) {
        // Seeds are chosen so no pre-activation sits near a rectifier corner;
        // if an edit reshuffles the rng stream this fails loudly.
        let margin = rectifier_margin(stack, x);
        assert!(margin > 1e-4, "pre-activation {margin} from a rectifier corner; pick another seed");
        let analytic = analytic_grads(stack, x);
        let numeric = finite_diff_stack(stack, x, 1e-6);
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let denom = a.abs().max(n.abs());
            // relative tolerance plus an absolute floor for the
            // finite-difference noise on near-zero gradients
            assert!(
                (a - n).abs() < 1e-5 * denom + 1e-8,
                "param {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    fn rand_input(rng: &mut Rng, dims: &[usize]) -> Tensor<f64> {
        let mut t = Tensor::zeros(dims);
        for v in t.data_mut() {
            *v = rng.normal() * 0.5;
        }
        t
    }

    /// Zero-initialized biases leave whole planes sitting exactly on the
    /// rectifier corner (deconv corners with all-zero taps), which breaks
    /// finite differences; gradient checks randomize them.
    fn randomize_biases(stack: &mut Stack<f64>, rng: &mut Rng) {
        for layer in &mut stack.layers {
            if let Some((_, b)) = layer.params_mut() {
                for v in b.data_mut() {
                    *v = rng.normal() * 0.1;
                }
            }
        }
    }

    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(10);
        let mut stack = Stack::new(vec![
            Layer::conv(2, 3, 4, 2, 1, Some(Act::LeakyRelu), false),
            Layer::conv(3, 4, 4, 2, 1, Some(Act::Tanh), false),
        ]);
        stack.init(&mut rng);
        randomize_biases(&mut stack, &mut rng);
        let x = rand_input(&mut rng, &[2, 2, 8, 8]);
        assert_grads_close(&stack, &x);
    }

    #[test]
    fn deconv_stack_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(11);
        let mut stack = Stack::new(vec![
            Layer::linear(6, 3 * 2 * 2, Some(Act::Relu)),
            Layer::Reshape { c: 3, h: 2, w: 2 },
            Layer::deconv(3, 2, 4, 2, 1, Some(Act::LeakyRelu), false),
            Layer::deconv(2, 1, 4, 2, 1, Some(Act::Tanh), false),
        ]);
        stack.init(&mut rng);
        randomize_biases(&mut stack, &mut rng);
        let x = rand_input(&mut rng, &[3, 6]);
        assert_grads_close(&stack, &x);
    }

    #[test]
    fn instance_norm_gradients_match_finite_differences() {
        // tanh on the last layer: a plain sum of normalized outputs would be
        // identically zero and say nothing about the gradient
        let mut rng = Rng::seed_from(12);
        let mut stack = Stack::new(vec![
            Layer::conv(1, 3, 4, 2, 1, Some(Act::LeakyRelu), true),
            Layer::conv(3, 2, 4, 2, 1, Some(Act::Tanh), true),
        ]);
        stack.init(&mut rng);
        randomize_biases(&mut stack, &mut rng);
        let x = rand_input(&mut rng, &[2, 1, 8, 8]);
        assert_grads_close(&stack, &x);
    }

    #[test]
    fn backward_input_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from(13);
        let mut stack = Stack::new(vec![
            Layer::conv(1, 2, 4, 2, 1, Some(Act::LeakyRelu), false),
            Layer::linear(2 * 4 * 4, 3, None),
        ]);
        stack.init(&mut rng);
        randomize_biases(&mut stack, &mut rng);
        let x = rand_input(&mut rng, &[1, 1, 8, 8]);

        let cache = stack.forward(&x);
        let dy = Tensor::full(cache.output().dims(), 1.0);
        let dx = stack.backward(&cache, &dy, None, true).unwrap();

        let eps = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let up: f64 = stack.forward_eval(&xp).data().iter().sum();
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let down: f64 = stack.forward_eval(&xm).data().iter().sum();
            let numeric = (up - down) / (2.0 * eps);
            let a = dx.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(((a - numeric) / denom).abs() < 1e-5, "pixel {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn frozen_backward_leaves_no_grads() {
        // Passing None for grads must still produce the same input gradient.
        let mut rng = Rng::seed_from(14);
        let mut stack = Stack::new(vec![Layer::linear(4, 4, Some(Act::Tanh)), Layer::linear(4, 2, None)]);
        stack.init(&mut rng);
        let x = rand_input(&mut rng, &[2, 4]);
        let cache = stack.forward(&x);
        let dy = Tensor::full(&[2, 2], 1.0);
        let mut grads = stack.zero_grads();
        let dx_with = stack.backward(&cache, &dy, Some(&mut grads), true).unwrap();
        let dx_without = stack.backward(&cache, &dy, None, true).unwrap();
        assert_eq!(dx_with.data(), dx_without.data());
    }

    #[test]
    fn forward_eval_matches_cached_forward() {
        let mut rng = Rng::seed_from(15);
        let mut stack = Stack::new(vec![
            Layer::conv(3, 4, 4, 2, 1, Some(Act::LeakyRelu), false),
            Layer::linear(4 * 4 * 4, 5, None),
        ]);
        stack.init(&mut rng);
        let x = rand_input(&mut rng, &[2, 3, 8, 8]);
        let cached = stack.forward(&x);
        let eval = stack.forward_eval(&x);
        assert_eq!(cached.output().data(), eval.data());
    }
}
