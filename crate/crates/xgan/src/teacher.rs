//! Attribute-supervised embedding networks.
//!
//! The teacher is a small encoder trained to predict the ground-truth
//! attributes of domain-1 renders; its penultimate representation (width E)
//! is the frozen embedding distilled into the main objective. The evaluation
//! probes reuse the same machinery with per-style training.

use crate::domains::AttributeVector;
use crate::error::{Result, XganError};
use crate::kernels;
use crate::model::{EmbeddingBatch, ImageBatch, ModelConfig};
use crate::nn::{check_image_input, Layer, Stack};
use crate::objectives::TeacherEmbed;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoder trunk (image -> embedding) plus one linear softmax head per
/// attribute.
#[derive(Clone, Debug)]
pub struct AttributeNet<S> {
    pub trunk: Stack<S>,
    pub heads: Vec<Layer<S>>,
    pub option_counts: Vec<usize>,
    pub embed_dim: usize,
    pub channels: usize,
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeNetConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the given corpus held out for the accuracy report.
    pub holdout_fraction: f64,
}

impl Default for AttributeNetConfig {
    fn default() -> AttributeNetConfig {
        AttributeNetConfig {
            epochs: 150,
            learning_rate: 2e-3,
            batch_size: 32,
            seed: 7,
            holdout_fraction: 0.2,
        }
    }
}

impl<S: Scalar> AttributeNet<S> {
    pub(crate) fn new(model_cfg: &ModelConfig, option_counts: &[usize], rng: &mut Rng) -> AttributeNet<S> {
        let mut trunk = model_cfg.encoder_stack::<S>();
        trunk.init(rng);
        let mut heads = Vec::with_capacity(option_counts.len());
        for &k in option_counts {
            let mut head = Layer::linear(model_cfg.embed_dim, k, None);
            if let Some((w, b)) = head.params_mut() {
                for v in w.data_mut() {
                    *v = S::from_f64(rng.normal() * crate::nn::INIT_STD);
                }
                b.fill(S::ZERO);
            }
            heads.push(head);
        }
        AttributeNet {
            trunk,
            heads,
            option_counts: option_counts.to_vec(),
            embed_dim: model_cfg.embed_dim,
            channels: model_cfg.channels,
            image_size: model_cfg.image_size,
        }
    }

    pub fn embed(&self, x: &ImageBatch<S>) -> Result<EmbeddingBatch<S>> {
        check_image_input(x.tensor(), self.channels, self.image_size)?;
        EmbeddingBatch::from_tensor(self.trunk.forward_eval(x.tensor()))
    }

    /// Per-attribute argmax predictions, shape [n_attrs][n].
    pub fn predict(&self, x: &ImageBatch<S>) -> Result<Vec<Vec<usize>>> {
        let z = self.embed(x)?;
        let n = z.n();
        let mut out = Vec::with_capacity(self.heads.len());
        for (head, &k) in self.heads.iter().zip(self.option_counts.iter()) {
            let logits = head_forward(head, z.tensor());
            let mut preds = Vec::with_capacity(n);
            for row in logits.data().chunks(k) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                preds.push(best);
            }
            out.push(preds);
        }
        Ok(out)
    }

    /// Mean accuracy per attribute against ground truth.
    pub fn accuracy(&self, x: &ImageBatch<S>, labels: &[AttributeVector]) -> Result<Vec<f64>> {
        let preds = self.predict(x)?;
        let n = x.n();
        let mut accs = Vec::with_capacity(preds.len());
        for (ai, attr_preds) in preds.iter().enumerate() {
            let correct = attr_preds
                .iter()
                .zip(labels.iter())
                .filter(|(p, l)| **p == l.values[ai])
                .count();
            accs.push(correct as f64 / n as f64);
        }
        Ok(accs)
    }

    pub(crate) fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for layer in self.trunk.layers.iter().chain(self.heads.iter()) {
            if let Some((w, b)) = layer.params() {
                out.extend_from_slice(w.data());
                out.extend_from_slice(b.data());
            }
        }
        out
    }

    pub(crate) fn load_flat(&mut self, flat: &[S]) {
        let mut off = 0;
        for layer in self.trunk.layers.iter_mut().chain(self.heads.iter_mut()) {
            if let Some((w, b)) = layer.params_mut() {
                let wl = w.len();
                w.data_mut().copy_from_slice(&flat[off..off + wl]);
                off += wl;
                let bl = b.len();
                b.data_mut().copy_from_slice(&flat[off..off + bl]);
                off += bl;
            }
        }
        assert_eq!(off, flat.len());
    }
}

fn head_forward<S: Scalar>(head: &Layer<S>, z: &Tensor<S>) -> Tensor<S> {
    let (w, b) = head.params().expect("head has params");
    let n = z.dims()[0];
    let d_in = z.len() / n;
    let d_out = b.len();
    let mut y = Tensor::zeros(&[n, d_out]);
    kernels::linear_forward_batch(z.data(), w.data(), b.data(), n, d_in, d_out, y.data_mut());
    y
}

/// Softmax cross-entropy over one head; returns the batch-mean loss and the
/// gradient at the logits.
fn softmax_ce<S: Scalar>(logits: &Tensor<S>, labels: &[usize], k: usize) -> (S, Tensor<S>) {
    let n = logits.dims()[0];
    let inv_n = S::ONE / S::from_usize(n);
    let mut loss = S::ZERO;
    let mut grad = Tensor::zeros(logits.dims());
    for (i, row) in logits.data().chunks(k).enumerate() {
        let maxv = row.iter().copied().fold(row[0], |a, b| a.maxs(b));
        let mut denom = S::ZERO;
        for &v in row {
            denom += (v - maxv).exp();
        }
        let log_denom = denom.ln() + maxv;
        loss += (log_denom - row[labels[i]]) * inv_n;
        let grow = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, g) in grow.iter_mut().enumerate() {
            let p = (row[j] - log_denom).exp();
            *g = (p - if j == labels[i] { S::ONE } else { S::ZERO }) * inv_n;
        }
    }
    (loss, grad)
}

/// Supervised training of an [AttributeNet] with Adam. Returns the trained
/// net and the held-out per-attribute accuracy.
pub fn train_attribute_net<S: Scalar>(
    model_cfg: &ModelConfig,
    images: &ImageBatch<S>,
    labels: &[AttributeVector],
    option_counts: &[usize],
    cfg: &AttributeNetConfig,
) -> Result<(AttributeNet<S>, Vec<f64>)> {
    if images.n() != labels.len() {
        return Err(XganError::Data(format!(
            "corpus has {} images but {} label rows",
            images.n(),
            labels.len()
        )));
    }
    if images.n() < 4 {
        return Err(XganError::Data("attribute net needs at least 4 samples".into()));
    }
    let mut rng = Rng::seed_from(cfg.seed);
    let mut net = AttributeNet::new(model_cfg, option_counts, &mut rng);

    // internal holdout for the accuracy report
    let n = images.n();
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let (train_idx, hold_idx) = order.split_at(n - n_hold);
    let hold_images = images.select(hold_idx);
    let hold_labels: Vec<AttributeVector> = hold_idx.iter().map(|&i| labels[i].clone()).collect();

    // Adam state over the flat parameter vector
    let mut flat = net.flatten();
    let mut m = vec![S::ZERO; flat.len()];
    let mut v = vec![S::ZERO; flat.len()];
    let mut t = 0u64;
    let (b1, b2, eps) = (S::from_f64(0.9), S::from_f64(0.999), S::from_f64(1e-8));
    let lr = S::from_f64(cfg.learning_rate);

    let mut epoch_order: Vec<usize> = train_idx.to_vec();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut epoch_order);
        for chunk in epoch_order.chunks(cfg.batch_size.max(1)) {
            let batch = images.select(chunk);
            let batch_labels: Vec<&AttributeVector> = chunk.iter().map(|&i| &labels[i]).collect();

            // forward trunk with cache, heads on top
            let c_trunk = net.trunk.forward(batch.tensor());
            let z = c_trunk.output().clone();
            let mut g_z = Tensor::zeros(z.dims());
            let mut grads = net.trunk.zero_grads();
            let mut head_grads: Vec<(Tensor<S>, Tensor<S>)> = Vec::with_capacity(net.heads.len());
            for (ai, head) in net.heads.iter().enumerate() {
                let k = net.option_counts[ai];
                let logits = head_forward(head, &z);
                let lab: Vec<usize> = batch_labels.iter().map(|l| l.values[ai]).collect();
                let (_, g_logits) = softmax_ce(&logits, &lab, k);
                let (w, _) = head.params().unwrap();
                let nb = batch.n();
                let mut dw = Tensor::zeros(w.dims());
                let mut db = Tensor::zeros(&[k]);
                let mut dz = Tensor::zeros(z.dims());
                kernels::linear_backward_batch(
                    z.data(),
                    w.data(),
                    g_logits.data(),
                    nb,
                    net.embed_dim,
                    k,
                    dw.data_mut(),
                    db.data_mut(),
                    Some(dz.data_mut()),
                );
                g_z.add_assign(&dz);
                head_grads.push((dw, db));
            }
            net.trunk.backward(&c_trunk, &g_z, Some(&mut grads), false);

            // flatten gradients in the same order as the parameters
            let mut gflat = Vec::with_capacity(flat.len());
            for g in grads.layers.iter().flatten() {
                gflat.extend_from_slice(g.0.data());
                gflat.extend_from_slice(g.1.data());
            }
            for (dw, db) in &head_grads {
                gflat.extend_from_slice(dw.data());
                gflat.extend_from_slice(db.data());
            }

            t += 1;
            let bc1 = S::ONE - b1.powi(t as i32);
            let bc2 = S::ONE - b2.powi(t as i32);
            for i in 0..flat.len() {
                let g = gflat[i];
                m[i] = b1 * m[i] + (S::ONE - b1) * g;
                v[i] = b2 * v[i] + (S::ONE - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                flat[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            net.load_flat(&flat);
        }
    }

    let accs = net.accuracy(&hold_images, &hold_labels)?;
    Ok((net, accs))
}

/// The frozen teacher: an [AttributeNet] whose embedding stands in for a
/// pretrained representation on domain 1.
#[derive(Clone, Debug)]
pub struct TeacherNet<S> {
    net: AttributeNet<S>,
    pub held_out_accuracy: Vec<f64>,
    frozen: bool,
}

impl<S: Scalar> TeacherNet<S> {
    pub fn from_net(net: AttributeNet<S>, held_out_accuracy: Vec<f64>) -> TeacherNet<S> {
        TeacherNet {
            net,
            held_out_accuracy,
            frozen: true,
        }
    }

    pub fn net(&self) -> &AttributeNet<S> {
        &self.net
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// The teacher is frozen for the lifetime of training; any attempt to
    /// apply a parameter update is a contract violation.
    pub fn apply_gradients(&mut self, _grads: &[S]) -> Result<()> {
        if self.frozen {
            return Err(XganError::Config(
                "teacher parameters are frozen; gradient application is a contract violation".into(),
            ));
        }
        unreachable!("teachers are always constructed frozen");
    }

    /// Flat copy of the trunk parameters, used to alias the encoders in the
    /// fixed-encoder baseline modes.
    pub fn trunk_flat(&self) -> Vec<S> {
        let mut out = Vec::new();
        for layer in &self.net.trunk.layers {
            if let Some((w, b)) = layer.params() {
                out.extend_from_slice(w.data());
                out.extend_from_slice(b.data());
            }
        }
        out
    }
}

impl<S: Scalar> TeacherEmbed<S> for TeacherNet<S> {
    fn embed_dim(&self) -> usize {
        self.net.embed_dim
    }

    fn embed(&self, x: &ImageBatch<S>) -> Result<EmbeddingBatch<S>> {
        self.net.embed(x)
    }
}

/// Trains the frozen teacher on labeled domain-1 data and reports held-out
/// attribute accuracy.
pub fn train_teacher<S: Scalar>(
    model_cfg: &ModelConfig,
    corpus: &ImageBatch<S>,
    labels: &[AttributeVector],
    option_counts: &[usize],
    cfg: &AttributeNetConfig,
) -> Result<TeacherNet<S>> {
    let (net, accs) = train_attribute_net(model_cfg, corpus, labels, option_counts, cfg)?;
    Ok(TeacherNet::from_net(net, accs))
}



// ---------------------------------------------------------------------------
// Teacher checkpoints (container kind Teacher).
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct TeacherHeader {
    model: ModelConfig,
    option_counts: Vec<usize>,
    held_out_accuracy: Vec<f64>,
}

/// Writes the frozen teacher (trunk + heads) as an f32 container.
pub fn save_teacher(teacher: &TeacherNet<f32>, model_cfg: &ModelConfig, path: &std::path::Path) -> Result<()> {
    save_attribute_net(
        &teacher.net,
        model_cfg,
        &teacher.held_out_accuracy,
        crate::checkpoint::Kind::Teacher,
        path,
    )
}

pub fn load_teacher(path: &std::path::Path) -> Result<(TeacherNet<f32>, ModelConfig)> {
    let (net, accs, model) = load_attribute_net(path, crate::checkpoint::Kind::Teacher)?;
    Ok((TeacherNet::from_net(net, accs), model))
}

pub(crate) fn save_attribute_net(
    net: &AttributeNet<f32>,
    model_cfg: &ModelConfig,
    held_out_accuracy: &[f64],
    kind: crate::checkpoint::Kind,
    path: &std::path::Path,
) -> Result<()> {
    let header = TeacherHeader {
        model: model_cfg.clone(),
        option_counts: net.option_counts.clone(),
        held_out_accuracy: held_out_accuracy.to_vec(),
    };
    let mut tensors = Vec::new();
    for (li, layer) in net.trunk.layers.iter().enumerate() {
        if let Some((w, b)) = layer.params() {
            tensors.push(crate::checkpoint::NamedTensor {
                name: format!("trunk.{li}.weight"),
                dims: w.dims().to_vec(),
                data: w.data().to_vec(),
            });
            tensors.push(crate::checkpoint::NamedTensor {
                name: format!("trunk.{li}.bias"),
                dims: b.dims().to_vec(),
                data: b.data().to_vec(),
            });
        }
    }
    for (hi, head) in net.heads.iter().enumerate() {
        let (w, b) = head.params().expect("head has params");
        tensors.push(crate::checkpoint::NamedTensor {
            name: format!("head.{hi}.weight"),
            dims: w.dims().to_vec(),
            data: w.data().to_vec(),
        });
        tensors.push(crate::checkpoint::NamedTensor {
            name: format!("head.{hi}.bias"),
            dims: b.dims().to_vec(),
            data: b.data().to_vec(),
        });
    }
    let container = crate::checkpoint::Container {
        kind,
        header_json: serde_json::to_string(&header).map_err(|e| XganError::Checkpoint(e.to_string()))?,
        tensors,
    };
    crate::checkpoint::write_container(path, &container)
}

pub(crate) fn load_attribute_net(
    path: &std::path::Path,
    expect_kind: crate::checkpoint::Kind,
) -> Result<(AttributeNet<f32>, Vec<f64>, ModelConfig)> {
    let container = crate::checkpoint::read_container(path)?;
    if container.kind != expect_kind {
        return Err(XganError::Checkpoint(format!(
            "{}: unexpected checkpoint kind",
            path.display()
        )));
    }
    let header: TeacherHeader = serde_json::from_str(&container.header_json)
        .map_err(|e| XganError::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let mut rng = Rng::seed_from(0);
    let mut net = AttributeNet::<f32>::new(&header.model, &header.option_counts, &mut rng);

    use std::collections::HashMap;
    let by_name: HashMap<&str, &crate::checkpoint::NamedTensor> =
        container.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut fill = |name: String, tensor: &mut crate::tensor::Tensor<f32>| -> Result<()> {
        let t = by_name
            .get(name.as_str())
            .ok_or_else(|| XganError::Checkpoint(format!("{}: missing tensor '{name}'", path.display())))?;
        if t.dims != tensor.dims() {
            return Err(XganError::Checkpoint(format!(
                "{}: tensor '{name}' has shape {:?}, expected {:?}",
                path.display(),
                t.dims,
                tensor.dims()
            )));
        }
        tensor.data_mut().copy_from_slice(&t.data);
        Ok(())
    };
    for li in 0..net.trunk.layers.len() {
        if let Some((w, b)) = net.trunk.layers[li].params_mut() {
            fill(format!("trunk.{li}.weight"), w)?;
            fill(format!("trunk.{li}.bias"), b)?;
        }
    }
    for hi in 0..net.heads.len() {
        let (w, b) = net.heads[hi].params_mut().expect("head has params");
        fill(format!("head.{hi}.weight"), w)?;
        fill(format!("head.{hi}.bias"), b)?;
    }
    Ok((net, header.held_out_accuracy, header.model))
}
