//! The dual autoencoder: two domain encoders with a shared tail, two domain
//! decoders with a shared head, a domain classifier on the embedding, and an
//! image discriminator for the 1->2 translation path.
//!
//! Shared blocks are stored once and referenced by both domain paths, so a
//! parameter update through either path is observable through the other by
//! construction.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XganError};
use crate::nn::{Act, Layer, Stack};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainId {
    D1,
    D2,
}

impl DomainId {
    pub fn other(self) -> DomainId {
        match self {
            DomainId::D1 => DomainId::D2,
            DomainId::D2 => DomainId::D1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            DomainId::D1 => 0,
            DomainId::D2 => 1,
        }
    }
}

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainId::D1 => write!(f, "d1"),
            DomainId::D2 => write!(f, "d2"),
        }
    }
}

/// A batch of images, shape [n, c, h, w], values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<S> {
    data: Tensor<S>,
}

impl<S: Scalar> ImageBatch<S> {
    pub fn from_tensor(data: Tensor<S>) -> Result<ImageBatch<S>> {
        if data.dims().len() != 4 {
            return Err(XganError::Dim(format!(
                "image batch must be [n, c, h, w], got {:?}",
                data.dims()
            )));
        }
        Ok(ImageBatch { data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> ImageBatch<S> {
        ImageBatch {
            data: Tensor::zeros(&[n, c, h, w]),
        }
    }

    pub fn n(&self) -> usize {
        self.data.dims()[0]
    }
    pub fn c(&self) -> usize {
        self.data.dims()[1]
    }
    pub fn h(&self) -> usize {
        self.data.dims()[2]
    }
    pub fn w(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<S> {
        &mut self.data
    }

    pub fn sample(&self, i: usize) -> &[S] {
        let len = self.c() * self.h() * self.w();
        &self.data.data()[i * len..(i + 1) * len]
    }

    /// Gathers the given sample indices into a new batch.
    pub fn select(&self, indices: &[usize]) -> ImageBatch<S> {
        let len = self.c() * self.h() * self.w();
        let mut out = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            out.extend_from_slice(self.sample(i));
        }
        ImageBatch {
            data: Tensor::from_vec(&[indices.len(), self.c(), self.h(), self.w()], out),
        }
    }

    pub fn map_precision<T: Scalar>(&self) -> ImageBatch<T> {
        ImageBatch {
            data: self.data.map(|v| T::from_f64(v.to_f64())),
        }
    }
}

/// A batch of embeddings, shape [n, e].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<S> {
    data: Tensor<S>,
}

impl<S: Scalar> EmbeddingBatch<S> {
    pub fn from_tensor(data: Tensor<S>) -> Result<EmbeddingBatch<S>> {
        if data.dims().len() != 2 {
            return Err(XganError::Dim(format!(
                "embedding batch must be [n, e], got {:?}",
                data.dims()
            )));
        }
        Ok(EmbeddingBatch { data })
    }

    pub fn zeros(n: usize, e: usize) -> EmbeddingBatch<S> {
        EmbeddingBatch {
            data: Tensor::zeros(&[n, e]),
        }
    }

    pub fn n(&self) -> usize {
        self.data.dims()[0]
    }
    pub fn e(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<S> {
        &mut self.data
    }
}

/// Network widths and the cross-domain sharing scheme.
///
/// The default reproduces the reference layout: encoder conv1..conv4 then two
/// fully-connected blocks, with conv3, conv4, fc1, fc2 shared across domains;
/// decoder deconv1 (a fully-connected expansion to the base grid) through
/// deconv5, with deconv1 and deconv2 shared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
    pub dann_hidden: Vec<usize>,
    /// How many of the final encoder blocks (counting fc1, fc2) are shared.
    pub shared_encoder_blocks: usize,
    /// How many of the initial decoder blocks are shared.
    pub shared_decoder_blocks: usize,
    /// Instantiate a second discriminator for the 2->1 path.
    pub second_discriminator: bool,
    /// Optional per-channel instance normalization in encoder/decoder convs.
    pub instance_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            channels: 3,
            embed_dim: 1024,
            encoder_widths: vec![32, 64, 128, 256],
            decoder_widths: vec![512, 256, 128, 64],
            discriminator_widths: vec![16, 32, 32, 32],
            dann_hidden: vec![128],
            shared_encoder_blocks: 4,
            shared_decoder_blocks: 2,
            second_discriminator: false,
            instance_norm: false,
        }
    }
}

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| Err(XganError::Config(format!("{field}: {why}")));
        if self.channels == 0 {
            return fail("channels", "must be >= 1".into());
        }
        if self.embed_dim == 0 {
            return fail("embed_dim", "must be >= 1".into());
        }
        for (field, widths) in [
            ("encoder_widths", &self.encoder_widths),
            ("decoder_widths", &self.decoder_widths),
            ("discriminator_widths", &self.discriminator_widths),
        ] {
            if widths.is_empty() {
                return fail(field, "must be non-empty".into());
            }
            if widths.iter().any(|&w| w == 0) {
                return fail(field, format!("contains a zero width: {widths:?}"));
            }
        }
        for (field, downs) in [
            ("encoder_widths", self.encoder_widths.len()),
            ("decoder_widths", self.decoder_widths.len()),
            ("discriminator_widths", self.discriminator_widths.len()),
        ] {
            let div = 1usize << downs;
            if self.image_size % div != 0 || self.image_size / div == 0 {
                return fail(
                    field,
                    format!(
                        "image_size {} not divisible into {} halvings",
                        self.image_size, downs
                    ),
                );
            }
        }
        if self.shared_encoder_blocks > self.encoder_blocks() {
            return fail(
                "shared_encoder_blocks",
                format!("{} exceeds encoder depth {}", self.shared_encoder_blocks, self.encoder_blocks()),
            );
        }
        if self.shared_decoder_blocks > self.decoder_blocks() {
            return fail(
                "shared_decoder_blocks",
                format!("{} exceeds decoder depth {}", self.shared_decoder_blocks, self.decoder_blocks()),
            );
        }
        Ok(())
    }

    /// Total encoder blocks: one per conv width plus fc1 and fc2.
    pub fn encoder_blocks(&self) -> usize {
        self.encoder_widths.len() + 2
    }

    /// Total decoder blocks: the fully-connected expansion plus one per
    /// upsampling step.
    pub fn decoder_blocks(&self) -> usize {
        self.decoder_widths.len() + 1
    }

    pub fn encoder_base(&self) -> usize {
        self.image_size >> self.encoder_widths.len()
    }

    pub fn decoder_base(&self) -> usize {
        self.image_size >> self.decoder_widths.len()
    }

    fn encoder_block_layers<S: Scalar>(&self) -> Vec<Vec<Layer<S>>> {
        let mut blocks = Vec::new();
        let mut c = self.channels;
        for &w in &self.encoder_widths {
            blocks.push(vec![Layer::conv(c, w, KERNEL, STRIDE, PAD, Some(Act::LeakyRelu), self.instance_norm)]);
            c = w;
        }
        let flat = c * self.encoder_base() * self.encoder_base();
        // fc1 carries the encoder nonlinearity; fc2 emits the raw embedding.
        blocks.push(vec![Layer::linear(flat, self.embed_dim, Some(Act::LeakyRelu))]);
        blocks.push(vec![Layer::linear(self.embed_dim, self.embed_dim, None)]);
        blocks
    }

    fn decoder_block_layers<S: Scalar>(&self) -> Vec<Vec<Layer<S>>> {
        let mut blocks = Vec::new();
        let base = self.decoder_base();
        let w0 = self.decoder_widths[0];
        blocks.push(vec![
            Layer::linear(self.embed_dim, w0 * base * base, Some(Act::Relu)),
            Layer::Reshape { c: w0, h: base, w: base },
        ]);
        let mut c = w0;
        for &w in self.decoder_widths.iter().skip(1) {
            blocks.push(vec![Layer::deconv(c, w, KERNEL, STRIDE, PAD, Some(Act::Relu), self.instance_norm)]);
            c = w;
        }
        blocks.push(vec![Layer::deconv(c, self.channels, KERNEL, STRIDE, PAD, Some(Act::Tanh), false)]);
        blocks
    }

    fn discriminator_layers<S: Scalar>(&self) -> Vec<Layer<S>> {
        let mut layers = Vec::new();
        let mut c = self.channels;
        for &w in &self.discriminator_widths {
            layers.push(Layer::conv(c, w, KERNEL, STRIDE, PAD, Some(Act::LeakyRelu), false));
            c = w;
        }
        let base = self.image_size >> self.discriminator_widths.len();
        layers.push(Layer::linear(c * base * base, 1, None));
        layers
    }

    fn dann_layers<S: Scalar>(&self) -> Vec<Layer<S>> {
        let mut layers = Vec::new();
        let mut d = self.embed_dim;
        for &h in &self.dann_hidden {
            layers.push(Layer::linear(d, h, Some(Act::LeakyRelu)));
            d = h;
        }
        layers.push(Layer::linear(d, 1, None));
        layers
    }

    /// The full encoder as one stack; the teacher trunk mirrors this
    /// topology so the fixed-encoder baseline modes can alias it.
    pub fn encoder_stack<S: Scalar>(&self) -> Stack<S> {
        flatten_blocks(self.encoder_block_layers())
    }

    /// Analytic parameter count; must equal the number of instantiated values.
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize| co * ci * KERNEL * KERNEL + co;
        let lin = |di: usize, do_: usize| do_ * di + do_;

        let mut enc_blocks: Vec<usize> = Vec::new();
        let mut c = self.channels;
        for &w in &self.encoder_widths {
            enc_blocks.push(conv(c, w));
            c = w;
        }
        let flat = c * self.encoder_base() * self.encoder_base();
        enc_blocks.push(lin(flat, self.embed_dim));
        enc_blocks.push(lin(self.embed_dim, self.embed_dim));
        let enc_priv_ct = self.encoder_blocks() - self.shared_encoder_blocks;
        let enc_private: usize = enc_blocks[..enc_priv_ct].iter().sum();
        let enc_shared: usize = enc_blocks[enc_priv_ct..].iter().sum();

        let base = self.decoder_base();
        let mut dec_blocks: Vec<usize> = vec![lin(self.embed_dim, self.decoder_widths[0] * base * base)];
        let mut c = self.decoder_widths[0];
        for &w in self.decoder_widths.iter().skip(1) {
            dec_blocks.push(conv(c, w)); // deconv has the same count as its adjoint conv
            c = w;
        }
        dec_blocks.push(conv(c, self.channels));
        let dec_shared: usize = dec_blocks[..self.shared_decoder_blocks].iter().sum();
        let dec_private: usize = dec_blocks[self.shared_decoder_blocks..].iter().sum();

        let mut disc = 0;
        let mut c = self.channels;
        for &w in &self.discriminator_widths {
            disc += conv(c, w);
            c = w;
        }
        let disc_base = self.image_size >> self.discriminator_widths.len();
        disc += lin(c * disc_base * disc_base, 1);

        let mut dann = 0;
        let mut d = self.embed_dim;
        for &h in &self.dann_hidden {
            dann += lin(d, h);
            d = h;
        }
        dann += lin(d, 1);

        let discs = if self.second_discriminator { 2 * disc } else { disc };
        2 * enc_private + enc_shared + dec_shared + 2 * dec_private + dann + discs
    }
}

fn flatten_blocks<S: Scalar>(blocks: Vec<Vec<Layer<S>>>) -> Stack<S> {
    Stack::new(blocks.into_iter().flatten().collect())
}

/// All learnable parameters. Shared blocks appear exactly once.
#[derive(Clone, Debug)]
pub struct XganParams<S> {
    pub config: ModelConfig,
    pub enc_private: [Stack<S>; 2],
    pub enc_shared: Stack<S>,
    pub dec_shared: Stack<S>,
    pub dec_private: [Stack<S>; 2],
    pub c_dann: Stack<S>,
    pub disc_1to2: Stack<S>,
    pub disc_2to1: Option<Stack<S>>,
}

/// Builds and deterministically initializes the model: conv and linear
/// weights are zero-mean Gaussian with std 0.02, biases zero, and the domain
/// classifier's final layer is zeroed so it starts uninformative.
pub fn build_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<XganParams<S>> {
    config.validate()?;
    let mut rng = Rng::seed_from(seed);

    let enc_priv_ct: usize = config.encoder_blocks() - config.shared_encoder_blocks;
    let split_blocks = |blocks: Vec<Vec<Layer<S>>>, at: usize| {
        let mut blocks = blocks;
        let tail = blocks.split_off(at);
        (flatten_blocks(blocks), flatten_blocks(tail))
    };

    let (enc_p1, enc_sh) = split_blocks(config.encoder_block_layers(), enc_priv_ct);
    let (enc_p2, _) = split_blocks(config.encoder_block_layers(), enc_priv_ct);
    let (dec_sh, dec_p1) = split_blocks(config.decoder_block_layers(), config.shared_decoder_blocks);
    let (_, dec_p2) = split_blocks(config.decoder_block_layers(), config.shared_decoder_blocks);

    let mut params = XganParams {
        config: config.clone(),
        enc_private: [enc_p1, enc_p2],
        enc_shared: enc_sh,
        dec_shared: dec_sh,
        dec_private: [dec_p1, dec_p2],
        c_dann: Stack::new(config.dann_layers()),
        disc_1to2: Stack::new(config.discriminator_layers()),
        disc_2to1: config.second_discriminator.then(|| Stack::new(config.discriminator_layers())),
    };

    params.enc_private[0].init(&mut rng);
    params.enc_private[1].init(&mut rng);
    params.enc_shared.init(&mut rng);
    params.dec_shared.init(&mut rng);
    params.dec_private[0].init(&mut rng);
    params.dec_private[1].init(&mut rng);
    params.c_dann.init(&mut rng);
    if let Some((w, b)) = params.c_dann.layers.last_mut().and_then(|l| l.params_mut()) {
        w.fill(S::ZERO);
        b.fill(S::ZERO);
    }
    params.disc_1to2.init(&mut rng);
    if let Some(d2) = params.disc_2to1.as_mut() {
        d2.init(&mut rng);
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Canonical parameter layout (checkpoints, Adam state, gradient flattening).
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    /// Flat length of the generator-side prefix (everything before the
    /// discriminators).
    pub gen_len: usize,
}

enum NameScheme {
    /// conv{i}, fc{j} with conv numbering starting at `first` .
    Encoder { first: usize },
    /// deconv{i} starting at `first`; the fully-connected expansion is a
    /// deconv block by name.
    Decoder { first: usize },
    /// conv{i}/fc{j} both numbered from 1.
    Plain,
}

fn stack_param_names<S: Scalar>(stack: &Stack<S>, scheme: NameScheme) -> Vec<String> {
    let mut names = Vec::new();
    let mut conv_i = match &scheme {
        NameScheme::Encoder { first } => *first,
        NameScheme::Decoder { first } => *first,
        NameScheme::Plain => 1,
    };
    let mut fc_i = 1;
    for layer in &stack.layers {
        match layer {
            Layer::Conv2d { .. } => {
                names.push(format!("conv{conv_i}"));
                conv_i += 1;
            }
            Layer::Deconv2d { .. } => {
                names.push(format!("deconv{conv_i}"));
                conv_i += 1;
            }
            Layer::Linear { .. } => match &scheme {
                NameScheme::Decoder { .. } => {
                    names.push(format!("deconv{conv_i}"));
                    conv_i += 1;
                }
                _ => {
                    names.push(format!("fc{fc_i}"));
                    fc_i += 1;
                }
            },
            Layer::Reshape { .. } => {}
        }
    }
    names
}

impl<S: Scalar> XganParams<S> {
    /// Components in canonical order: generator-side first, discriminators last.
    fn components(&self) -> Vec<(String, &Stack<S>, NameScheme)> {
        let cfg = &self.config;
        let enc_priv_ct = cfg.encoder_blocks() - cfg.shared_encoder_blocks;
        let mut comps = vec![
            ("enc_private.d1".to_string(), &self.enc_private[0], NameScheme::Encoder { first: 1 }),
            ("enc_private.d2".to_string(), &self.enc_private[1], NameScheme::Encoder { first: 1 }),
            (
                "enc_shared".to_string(),
                &self.enc_shared,
                NameScheme::Encoder {
                    first: enc_priv_ct.min(cfg.encoder_widths.len()) + 1,
                },
            ),
            ("dec_shared".to_string(), &self.dec_shared, NameScheme::Decoder { first: 1 }),
            (
                "dec_private.d1".to_string(),
                &self.dec_private[0],
                NameScheme::Decoder {
                    first: cfg.shared_decoder_blocks + 1,
                },
            ),
            (
                "dec_private.d2".to_string(),
                &self.dec_private[1],
                NameScheme::Decoder {
                    first: cfg.shared_decoder_blocks + 1,
                },
            ),
            ("c_dann".to_string(), &self.c_dann, NameScheme::Plain),
            ("disc_1to2".to_string(), &self.disc_1to2, NameScheme::Plain),
        ];
        if let Some(d2) = &self.disc_2to1 {
            comps.push(("disc_2to1".to_string(), d2, NameScheme::Plain));
        }
        comps
    }

    fn stacks_in_order(&self) -> Vec<&Stack<S>> {
        self.components().into_iter().map(|(_, s, _)| s).collect()
    }

    fn stacks_in_order_mut(&mut self) -> Vec<&mut Stack<S>> {
        let mut v: Vec<&mut Stack<S>> = Vec::with_capacity(9);
        let [p1, p2] = &mut self.enc_private;
        v.push(p1);
        v.push(p2);
        v.push(&mut self.enc_shared);
        v.push(&mut self.dec_shared);
        let [q1, q2] = &mut self.dec_private;
        v.push(q1);
        v.push(q2);
        v.push(&mut self.c_dann);
        v.push(&mut self.disc_1to2);
        if let Some(d2) = self.disc_2to1.as_mut() {
            v.push(d2);
        }
        v
    }

    pub fn layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut gen_len = 0;
        for (prefix, stack, scheme) in self.components() {
            let names = stack_param_names(stack, scheme);
            let mut ni = 0;
            for layer in &stack.layers {
                if let Some((w, b)) = layer.params() {
                    for (suffix, t) in [("weight", w), ("bias", b)] {
                        entries.push(ParamEntry {
                            name: format!("{prefix}.{}.{suffix}", names[ni]),
                            offset,
                            len: t.len(),
                            dims: t.dims().to_vec(),
                        });
                        offset += t.len();
                    }
                    ni += 1;
                }
            }
            if !prefix.starts_with("disc") {
                gen_len = offset;
            }
        }
        ParamLayout {
            entries,
            total: offset,
            gen_len,
        }
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for stack in self.stacks_in_order() {
            for layer in &stack.layers {
                if let Some((w, b)) = layer.params() {
                    out.extend_from_slice(w.data());
                    out.extend_from_slice(b.data());
                }
            }
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[S]) {
        let mut off = 0;
        for stack in self.stacks_in_order_mut() {
            for layer in &mut stack.layers {
                if let Some((w, b)) = layer.params_mut() {
                    let wl = w.len();
                    w.data_mut().copy_from_slice(&flat[off..off + wl]);
                    off += wl;
                    let bl = b.len();
                    b.data_mut().copy_from_slice(&flat[off..off + bl]);
                    off += bl;
                }
            }
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// Applies `delta[i] * scale` to every parameter (used by the optimizer).
    pub fn param_count(&self) -> usize {
        self.stacks_in_order().iter().map(|s| s.param_count()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.stacks_in_order().iter().all(|s| {
            s.layers
                .iter()
                .filter_map(|l| l.params())
                .all(|(w, b)| w.all_finite() && b.all_finite())
        })
    }

    pub fn map_precision<T: Scalar>(&self) -> XganParams<T> {
        let conv_stack = |s: &Stack<S>| -> Stack<T> {
            Stack::new(
                s.layers
                    .iter()
                    .map(|l| match l {
                        Layer::Conv2d { w, b, in_c, out_c, k, stride, pad, act, norm } => Layer::Conv2d {
                            w: w.map(|v| T::from_f64(v.to_f64())),
                            b: b.map(|v| T::from_f64(v.to_f64())),
                            in_c: *in_c,
                            out_c: *out_c,
                            k: *k,
                            stride: *stride,
                            pad: *pad,
                            act: *act,
                            norm: *norm,
                        },
                        Layer::Deconv2d { w, b, in_c, out_c, k, stride, pad, act, norm } => Layer::Deconv2d {
                            w: w.map(|v| T::from_f64(v.to_f64())),
                            b: b.map(|v| T::from_f64(v.to_f64())),
                            in_c: *in_c,
                            out_c: *out_c,
                            k: *k,
                            stride: *stride,
                            pad: *pad,
                            act: *act,
                            norm: *norm,
                        },
                        Layer::Linear { w, b, d_in, d_out, act } => Layer::Linear {
                            w: w.map(|v| T::from_f64(v.to_f64())),
                            b: b.map(|v| T::from_f64(v.to_f64())),
                            d_in: *d_in,
                            d_out: *d_out,
                            act: *act,
                        },
                        Layer::Reshape { c, h, w } => Layer::Reshape { c: *c, h: *h, w: *w },
                    })
                    .collect(),
            )
        };
        XganParams {
            config: self.config.clone(),
            enc_private: [conv_stack(&self.enc_private[0]), conv_stack(&self.enc_private[1])],
            enc_shared: conv_stack(&self.enc_shared),
            dec_shared: conv_stack(&self.dec_shared),
            dec_private: [conv_stack(&self.dec_private[0]), conv_stack(&self.dec_private[1])],
            c_dann: conv_stack(&self.c_dann),
            disc_1to2: conv_stack(&self.disc_1to2),
            disc_2to1: self.disc_2to1.as_ref().map(conv_stack),
        }
    }
}

/// Per-component gradient buffers mirroring [XganParams].
#[derive(Clone, Debug)]
pub struct XganGrads<S> {
    pub enc_private: [crate::nn::StackGrads<S>; 2],
    pub enc_shared: crate::nn::StackGrads<S>,
    pub dec_shared: crate::nn::StackGrads<S>,
    pub dec_private: [crate::nn::StackGrads<S>; 2],
    pub c_dann: crate::nn::StackGrads<S>,
    pub disc_1to2: crate::nn::StackGrads<S>,
    pub disc_2to1: Option<crate::nn::StackGrads<S>>,
}

impl<S: Scalar> XganGrads<S> {
    pub fn zeros_like(params: &XganParams<S>) -> XganGrads<S> {
        XganGrads {
            enc_private: [params.enc_private[0].zero_grads(), params.enc_private[1].zero_grads()],
            enc_shared: params.enc_shared.zero_grads(),
            dec_shared: params.dec_shared.zero_grads(),
            dec_private: [params.dec_private[0].zero_grads(), params.dec_private[1].zero_grads()],
            c_dann: params.c_dann.zero_grads(),
            disc_1to2: params.disc_1to2.zero_grads(),
            disc_2to1: params.disc_2to1.as_ref().map(|d| d.zero_grads()),
        }
    }

    /// Flattens in the same canonical order as [XganParams::flatten].
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        let mut push = |g: &crate::nn::StackGrads<S>| {
            for entry in g.layers.iter().flatten() {
                out.extend_from_slice(entry.0.data());
                out.extend_from_slice(entry.1.data());
            }
        };
        push(&self.enc_private[0]);
        push(&self.enc_private[1]);
        push(&self.enc_shared);
        push(&self.dec_shared);
        push(&self.dec_private[0]);
        push(&self.dec_private[1]);
        push(&self.c_dann);
        push(&self.disc_1to2);
        if let Some(d2) = &self.disc_2to1 {
            push(d2);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Forward operations.
// ---------------------------------------------------------------------------

fn check_images<S: Scalar>(config: &ModelConfig, x: &ImageBatch<S>) -> Result<()> {
    crate::nn::check_image_input(x.tensor(), config.channels, config.image_size)
}

fn check_embedding<S: Scalar>(config: &ModelConfig, z: &EmbeddingBatch<S>) -> Result<()> {
    if z.e() != config.embed_dim {
        return Err(XganError::Dim(format!(
            "embedding width {} does not match embed_dim {}",
            z.e(),
            config.embed_dim
        )));
    }
    if z.n() == 0 {
        return Err(XganError::Dim("empty embedding batch".into()));
    }
    Ok(())
}

/// e_dom(x): private blocks for the domain, then the shared tail.
pub fn encode<S: Scalar>(params: &XganParams<S>, x: &ImageBatch<S>, dom: DomainId) -> Result<EmbeddingBatch<S>> {
    check_images(&params.config, x)?;
    let h = params.enc_private[dom.index()].forward_eval(x.tensor());
    let z = params.enc_shared.forward_eval(&h);
    EmbeddingBatch::from_tensor(z)
}

/// d_dom(z): shared head, then the domain's private blocks. The final tanh
/// bounds outputs to [-1, 1].
pub fn decode<S: Scalar>(params: &XganParams<S>, z: &EmbeddingBatch<S>, dom: DomainId) -> Result<ImageBatch<S>> {
    check_embedding(&params.config, z)?;
    let h = params.dec_shared.forward_eval(z.tensor());
    let y = params.dec_private[dom.index()].forward_eval(&h);
    ImageBatch::from_tensor(y)
}

/// g_{from->other}(x) = d_other(e_from(x)).
pub fn translate<S: Scalar>(params: &XganParams<S>, x: &ImageBatch<S>, from: DomainId) -> Result<ImageBatch<S>> {
    let z = encode(params, x, from)?;
    decode(params, &z, from.other())
}

/// D_{1->2}(x): probability that x is a real domain-2 image.
pub fn discriminate<S: Scalar>(params: &XganParams<S>, x: &ImageBatch<S>) -> Result<Vec<S>> {
    check_images(&params.config, x)?;
    let logits = params.disc_1to2.forward_eval(x.tensor());
    Ok(logits.data().iter().map(|&l| sigmoid(l)).collect())
}

/// c_dann(z): probability that z came from domain 2.
pub fn classify_domain<S: Scalar>(params: &XganParams<S>, z: &EmbeddingBatch<S>) -> Result<Vec<S>> {
    check_embedding(&params.config, z)?;
    let logits = params.c_dann.forward_eval(z.tensor());
    Ok(logits.data().iter().map(|&l| sigmoid(l)).collect())
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_images(rng: &mut Rng, n: usize, c: usize, s: usize) -> ImageBatch<f32> {
        let mut b = ImageBatch::zeros(n, c, s, s);
        for v in b.tensor_mut().data_mut() {
            *v = (rng.uniform() * 2.0 - 1.0) as f32;
        }
        b
    }

    #[test]
    fn default_config_is_valid_and_matches_reference_shapes() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let params = build_model::<f32>(&cfg, 0).unwrap();
        let mut rng = Rng::seed_from(1);
        let x = rand_images(&mut rng, 2, 3, 64);

        let z = encode(&params, &x, DomainId::D1).unwrap();
        assert_eq!((z.n(), z.e()), (2, 1024));

        let y = decode(&params, &z, DomainId::D2).unwrap();
        assert_eq!((y.n(), y.c(), y.h(), y.w()), (2, 3, 64, 64));

        let p = discriminate(&params, &x).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn param_count_formula_matches_instantiated() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                image_size: 32,
                embed_dim: 64,
                encoder_widths: vec![8, 16, 32],
                decoder_widths: vec![32, 16, 8],
                discriminator_widths: vec![8, 8],
                dann_hidden: vec![16],
                shared_encoder_blocks: 3,
                shared_decoder_blocks: 2,
                second_discriminator: true,
                ..ModelConfig::default()
            },
        ] {
            let params = build_model::<f32>(&cfg, 7).unwrap();
            assert_eq!(cfg.param_count(), params.param_count());
            assert_eq!(params.flatten().len(), cfg.param_count());
            assert_eq!(params.layout().total, cfg.param_count());
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_params() {
        let cfg = ModelConfig {
            image_size: 16,
            embed_dim: 8,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            discriminator_widths: vec![4, 4],
            dann_hidden: vec![4],
            shared_encoder_blocks: 2,
            shared_decoder_blocks: 1,
            ..ModelConfig::default()
        };
        let a = build_model::<f32>(&cfg, 123).unwrap();
        let b = build_model::<f32>(&cfg, 123).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = build_model::<f32>(&cfg, 124).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn invalid_configs_name_the_offending_field() {
        let mut cfg = ModelConfig::default();
        cfg.encoder_widths = vec![];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("encoder_widths"), "{err}");

        let mut cfg = ModelConfig::default();
        cfg.shared_encoder_blocks = 99;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("shared_encoder_blocks"), "{err}");

        let mut cfg = ModelConfig::default();
        cfg.decoder_widths = vec![512, 0, 128];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("decoder_widths"), "{err}");
    }

    #[test]
    fn encode_is_pure_and_shape_checked() {
        let cfg = ModelConfig {
            image_size: 16,
            embed_dim: 8,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            discriminator_widths: vec![4],
            dann_hidden: vec![4],
            shared_encoder_blocks: 2,
            shared_decoder_blocks: 1,
            ..ModelConfig::default()
        };
        let params = build_model::<f32>(&cfg, 5).unwrap();
        let mut rng = Rng::seed_from(2);
        let x = rand_images(&mut rng, 3, 3, 16);
        let z1 = encode(&params, &x, DomainId::D1).unwrap();
        let z2 = encode(&params, &x, DomainId::D1).unwrap();
        assert_eq!(z1.tensor().data(), z2.tensor().data());

        let bad = rand_images(&mut rng, 1, 3, 32);
        assert!(matches!(encode(&params, &bad, DomainId::D1), Err(XganError::Dim(_))));
    }

    #[test]
    fn zeroed_private_encoders_collapse_domain_paths() {
        // With all unshared encoder parameters zeroed, both domain paths
        // reduce to the shared tail applied to the zero feature map.
        let cfg = ModelConfig {
            image_size: 16,
            embed_dim: 8,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            discriminator_widths: vec![4],
            dann_hidden: vec![4],
            shared_encoder_blocks: 1,
            shared_decoder_blocks: 1,
            ..ModelConfig::default()
        };
        let mut params = build_model::<f32>(&cfg, 9).unwrap();
        for stack in params.enc_private.iter_mut() {
            for layer in &mut stack.layers {
                if let Some((w, b)) = layer.params_mut() {
                    w.fill(0.0);
                    b.fill(0.0);
                }
            }
        }
        let mut rng = Rng::seed_from(3);
        let x = rand_images(&mut rng, 2, 3, 16);
        let z1 = encode(&params, &x, DomainId::D1).unwrap();
        let z2 = encode(&params, &x, DomainId::D2).unwrap();
        assert_eq!(z1.tensor().data(), z2.tensor().data());
    }

    #[test]
    fn zero_initialized_classifier_outputs_exactly_half() {
        let cfg = ModelConfig {
            image_size: 16,
            embed_dim: 8,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            discriminator_widths: vec![4],
            dann_hidden: vec![4],
            shared_encoder_blocks: 2,
            shared_decoder_blocks: 1,
            ..ModelConfig::default()
        };
        let params = build_model::<f32>(&cfg, 11).unwrap();
        let mut z = EmbeddingBatch::zeros(3, 8);
        let mut rng = Rng::seed_from(4);
        for v in z.tensor_mut().data_mut() {
            *v = rng.normal() as f32;
        }
        let probs = classify_domain(&params, &z).unwrap();
        assert_eq!(probs, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn translate_is_decode_of_encode() {
        let cfg = ModelConfig {
            image_size: 16,
            embed_dim: 8,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            discriminator_widths: vec![4],
            dann_hidden: vec![4],
            shared_encoder_blocks: 2,
            shared_decoder_blocks: 1,
            ..ModelConfig::default()
        };
        let params = build_model::<f32>(&cfg, 13).unwrap();
        let mut rng = Rng::seed_from(5);
        let x = rand_images(&mut rng, 2, 3, 16);
        let t = translate(&params, &x, DomainId::D1).unwrap();
        let z = encode(&params, &x, DomainId::D1).unwrap();
        let direct = decode(&params, &z, DomainId::D2).unwrap();
        assert_eq!(t.tensor().data(), direct.tensor().data());
        assert_eq!((t.n(), t.c(), t.h(), t.w()), (x.n(), x.c(), x.h(), x.w()));
        assert!(t.tensor().data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
