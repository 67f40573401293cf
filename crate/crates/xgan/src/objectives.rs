//! The training objective: reconstruction, domain-adversarial (with gradient
//! reversal into the encoders), semantic-consistency, GAN, and teacher terms,
//! plus an optional total-variation regularizer.
//!
//! Pure evaluation functions return scalar losses; `generator_phase` and
//! `discriminator_phase` run the joint backward passes for the trainer. A
//! finite-difference oracle over the flat parameter vector verifies every
//! analytic gradient on micro-models.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XganError};
use crate::model::{
    decode, encode, sigmoid, DomainId, EmbeddingBatch, ImageBatch, XganGrads, XganParams,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Configuration types.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanGeneratorForm {
    /// The literal min-max objective: minimize E[log(1 - D(g(x)))].
    Minimax,
    /// Maximize E[log D(g(x))] instead; same fixed points, stronger early
    /// gradients.
    NonSaturating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DannLossFn {
    BinaryCrossEntropy,
}

/// Scalar weights of the objective terms and the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_dann: f64,
    pub w_sem: f64,
    pub w_gan: f64,
    pub w_teach: f64,
    pub gan_2to1_enabled: bool,
    pub teach_enabled: bool,
    pub tv_weight: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        // Tuned on the synthetic sprite benchmark.
        LossWeights {
            w_dann: 0.3,
            w_sem: 1.0,
            w_gan: 0.25,
            w_teach: 0.5,
            gan_2to1_enabled: false,
            teach_enabled: false,
            tv_weight: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_dann", self.w_dann),
            ("w_sem", self.w_sem),
            ("w_gan", self.w_gan),
            ("w_teach", self.w_teach),
            ("tv_weight", self.tv_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(XganError::Config(format!("{name}: must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn teach_active(&self) -> bool {
        self.teach_enabled && self.w_teach > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub sem_distance: Distance,
    pub teach_distance: Distance,
    pub dann_loss_fn: DannLossFn,
    pub gan_generator_form: GanGeneratorForm,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            sem_distance: Distance::L2,
            teach_distance: Distance::L2,
            dann_loss_fn: DannLossFn::BinaryCrossEntropy,
            gan_generator_form: GanGeneratorForm::NonSaturating,
        }
    }
}

/// Unweighted loss components plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec_1: f64,
    pub rec_2: f64,
    pub dann: f64,
    pub sem_1to2: f64,
    pub sem_2to1: f64,
    pub gan_gen: f64,
    pub gan_disc: f64,
    pub teach: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossReport {
    /// Recombines the components under `weights`; `total` must equal this.
    pub fn weighted_total(&self, weights: &LossWeights) -> f64 {
        self.rec_1
            + self.rec_2
            + weights.w_dann * self.dann
            + weights.w_sem * (self.sem_1to2 + self.sem_2to1)
            + weights.w_gan * self.gan_gen
            + (if weights.teach_active() { weights.w_teach * self.teach } else { 0.0 })
            + weights.tv_weight * self.tv
    }

    pub fn is_finite(&self) -> bool {
        [
            self.rec_1, self.rec_2, self.dann, self.sem_1to2, self.sem_2to1, self.gan_gen,
            self.gan_disc, self.teach, self.tv, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite component, for abort diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rec_1", self.rec_1),
            ("rec_2", self.rec_2),
            ("dann", self.dann),
            ("sem_1to2", self.sem_1to2),
            ("sem_2to1", self.sem_2to1),
            ("gan_gen", self.gan_gen),
            ("gan_disc", self.gan_disc),
            ("teach", self.teach),
            ("tv", self.tv),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// A frozen embedding network distilled into the objective via the teacher
/// term. Implemented by the teacher module; mocked in tests.
pub trait TeacherEmbed<S: Scalar> {
    fn embed_dim(&self) -> usize;
    fn embed(&self, x: &ImageBatch<S>) -> Result<EmbeddingBatch<S>>;
}

// ---------------------------------------------------------------------------
// Scalar helpers.
// ---------------------------------------------------------------------------

/// ln(1 + e^x), stable for large |x|.
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    x.maxs(S::ZERO) + (-x.abs()).exp().ln_1p()
}

/// Mean over samples of the per-sample vector distance between rows of
/// `a` and `b` (both [n, k] flattened).
fn batch_distance<S: Scalar>(a: &[S], b: &[S], n: usize, dist: Distance) -> S {
    let k = a.len() / n;
    let mut total = S::ZERO;
    for i in 0..n {
        let (ra, rb) = (&a[i * k..(i + 1) * k], &b[i * k..(i + 1) * k]);
        total += match dist {
            Distance::L2 => ra
                .iter()
                .zip(rb.iter())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<S>()
                .sqrt(),
            Distance::L1 => ra.iter().zip(rb.iter()).map(|(&x, &y)| (x - y).abs()).sum::<S>(),
        };
    }
    total / S::from_usize(n)
}

/// Gradient of [batch_distance] with respect to `a`; the gradient with
/// respect to `b` is its negation.
fn batch_distance_grad_a<S: Scalar>(a: &[S], b: &[S], n: usize, dist: Distance) -> Vec<S> {
    let k = a.len() / n;
    let inv_n = S::ONE / S::from_usize(n);
    let mut g = vec![S::ZERO; a.len()];
    for i in 0..n {
        let (ra, rb) = (&a[i * k..(i + 1) * k], &b[i * k..(i + 1) * k]);
        let gr = &mut g[i * k..(i + 1) * k];
        match dist {
            Distance::L2 => {
                let norm = ra
                    .iter()
                    .zip(rb.iter())
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<S>()
                    .sqrt();
                if norm > S::from_f64(1e-12) {
                    let scale = inv_n / norm;
                    for ((g, &x), &y) in gr.iter_mut().zip(ra.iter()).zip(rb.iter()) {
                        *g = (x - y) * scale;
                    }
                }
            }
            Distance::L1 => {
                for ((g, &x), &y) in gr.iter_mut().zip(ra.iter()).zip(rb.iter()) {
                    *g = if x > y {
                        inv_n
                    } else if x < y {
                        -inv_n
                    } else {
                        S::ZERO
                    };
                }
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Pure loss evaluation.
// ---------------------------------------------------------------------------

/// Mean over the batch of the Euclidean norm of the reconstruction residual.
pub fn reconstruction_loss<S: Scalar>(params: &XganParams<S>, x: &ImageBatch<S>, dom: DomainId) -> Result<S> {
    let z = encode(params, x, dom)?;
    let r = decode(params, &z, dom)?;
    Ok(batch_distance(x.tensor().data(), r.tensor().data(), x.n(), Distance::L2))
}

/// E[ce(d1, c(z1))] + E[ce(d2, c(z2))] with binary cross-entropy on logits.
pub fn dann_loss<S: Scalar>(params: &XganParams<S>, z1: &EmbeddingBatch<S>, z2: &EmbeddingBatch<S>) -> Result<S> {
    if z1.n() == 0 || z2.n() == 0 {
        return Err(XganError::Dim("dann_loss requires non-empty batches".into()));
    }
    let l1 = classify_logits(params, z1)?;
    let l2 = classify_logits(params, z2)?;
    // label 0 (domain 1): ce = softplus(l); label 1 (domain 2): ce = softplus(-l)
    let m1 = l1.iter().map(|&l| softplus(l)).sum::<S>() / S::from_usize(l1.len());
    let m2 = l2.iter().map(|&l| softplus(-l)).sum::<S>() / S::from_usize(l2.len());
    Ok(m1 + m2)
}

fn classify_logits<S: Scalar>(params: &XganParams<S>, z: &EmbeddingBatch<S>) -> Result<Vec<S>> {
    if z.e() != params.config.embed_dim {
        return Err(XganError::Dim(format!(
            "embedding width {} != embed_dim {}",
            z.e(),
            params.config.embed_dim
        )));
    }
    Ok(params.c_dann.forward_eval(z.tensor()).into_data())
}

/// L_sem components: (1->2, 2->1). The total semantic-consistency loss is
/// their sum.
pub fn semantic_consistency_parts<S: Scalar>(
    params: &XganParams<S>,
    x1: &ImageBatch<S>,
    x2: &ImageBatch<S>,
    dist: Distance,
) -> Result<(S, S)> {
    let z1 = encode(params, x1, DomainId::D1)?;
    let t12 = decode(params, &z1, DomainId::D2)?;
    let z12 = encode(params, &t12, DomainId::D2)?;
    let s12 = batch_distance(z1.tensor().data(), z12.tensor().data(), z1.n(), dist);

    let z2 = encode(params, x2, DomainId::D2)?;
    let t21 = decode(params, &z2, DomainId::D1)?;
    let z21 = encode(params, &t21, DomainId::D1)?;
    let s21 = batch_distance(z2.tensor().data(), z21.tensor().data(), z2.n(), dist);
    Ok((s12, s21))
}

pub fn semantic_consistency_loss<S: Scalar>(
    params: &XganParams<S>,
    x1: &ImageBatch<S>,
    x2: &ImageBatch<S>,
    dist: Distance,
) -> Result<S> {
    let (a, b) = semantic_consistency_parts(params, x1, x2, dist)?;
    Ok(a + b)
}

/// (generator loss, discriminator loss) for the 1->2 GAN pair. Both are in
/// descent form; the discriminator loss at D == 0.5 equals 2 ln 2, i.e. the
/// negated min-max value.
pub fn gan_losses<S: Scalar>(
    params: &XganParams<S>,
    x1: &ImageBatch<S>,
    x2: &ImageBatch<S>,
    form: GanGeneratorForm,
) -> Result<(S, S)> {
    let fake = crate::model::translate(params, x1, DomainId::D1)?;
    let l_fake = params.disc_1to2.forward_eval(fake.tensor()).into_data();
    let l_real = params.disc_1to2.forward_eval(x2.tensor()).into_data();
    Ok((
        generator_gan_value(&l_fake, form),
        discriminator_gan_value(&l_real, &l_fake),
    ))
}

fn generator_gan_value<S: Scalar>(l_fake: &[S], form: GanGeneratorForm) -> S {
    let n = S::from_usize(l_fake.len());
    match form {
        GanGeneratorForm::NonSaturating => l_fake.iter().map(|&l| softplus(-l)).sum::<S>() / n,
        GanGeneratorForm::Minimax => -(l_fake.iter().map(|&l| softplus(l)).sum::<S>() / n),
    }
}

fn discriminator_gan_value<S: Scalar>(l_real: &[S], l_fake: &[S]) -> S {
    let nr = S::from_usize(l_real.len());
    let nf = S::from_usize(l_fake.len());
    l_real.iter().map(|&l| softplus(-l)).sum::<S>() / nr + l_fake.iter().map(|&l| softplus(l)).sum::<S>() / nf
}

/// Distance between the frozen teacher embedding and e1. Asymmetric by
/// definition: only domain 1 carries a teacher.
pub fn teacher_loss<S: Scalar>(
    params: &XganParams<S>,
    teacher: &dyn TeacherEmbed<S>,
    x: &ImageBatch<S>,
    dom: DomainId,
    dist: Distance,
) -> Result<S> {
    if dom != DomainId::D1 {
        return Err(XganError::Config(
            "the teacher loss is asymmetric and applies to domain 1 only; it must not be used for both domains".into(),
        ));
    }
    if teacher.embed_dim() != params.config.embed_dim {
        return Err(XganError::Dim(format!(
            "teacher embedding width {} != embed_dim {}",
            teacher.embed_dim(),
            params.config.embed_dim
        )));
    }
    let t = teacher.embed(x)?;
    let z = encode(params, x, DomainId::D1)?;
    Ok(batch_distance(t.tensor().data(), z.tensor().data(), x.n(), dist))
}

/// Mean absolute difference between horizontally and vertically adjacent
/// pixels, pooled over both directions.
pub fn total_variation_loss<S: Scalar>(x: &ImageBatch<S>) -> S {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let pairs = n * c * (h * (w - 1) + (h - 1) * w);
    if pairs == 0 {
        return S::ZERO;
    }
    let data = x.tensor().data();
    let mut acc = S::ZERO;
    for plane in data.chunks(h * w) {
        for row in 0..h {
            for col in 0..w - 1 {
                acc += (plane[row * w + col + 1] - plane[row * w + col]).abs();
            }
        }
        for row in 0..h - 1 {
            for col in 0..w {
                acc += (plane[(row + 1) * w + col] - plane[row * w + col]).abs();
            }
        }
    }
    acc / S::from_usize(pairs)
}

fn total_variation_grad<S: Scalar>(x: &ImageBatch<S>) -> Tensor<S> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let mut g = Tensor::zeros(x.tensor().dims());
    let pairs = n * c * (h * (w - 1) + (h - 1) * w);
    if pairs == 0 {
        return g;
    }
    let inv = S::ONE / S::from_usize(pairs);
    let data = x.tensor().data();
    for (pi, plane) in data.chunks(h * w).enumerate() {
        let gp = &mut g.data_mut()[pi * h * w..(pi + 1) * h * w];
        for row in 0..h {
            for col in 0..w - 1 {
                let d = plane[row * w + col + 1] - plane[row * w + col];
                let s = if d > S::ZERO {
                    inv
                } else if d < S::ZERO {
                    -inv
                } else {
                    S::ZERO
                };
                gp[row * w + col + 1] += s;
                gp[row * w + col] -= s;
            }
        }
        for row in 0..h - 1 {
            for col in 0..w {
                let d = plane[(row + 1) * w + col] - plane[row * w + col];
                let s = if d > S::ZERO {
                    inv
                } else if d < S::ZERO {
                    -inv
                } else {
                    S::ZERO
                };
                gp[(row + 1) * w + col] += s;
                gp[row * w + col] -= s;
            }
        }
    }
    g
}

/// Forward-only evaluation of the full objective.
pub fn total_loss<S: Scalar>(
    params: &XganParams<S>,
    teacher: Option<&dyn TeacherEmbed<S>>,
    batch1: &ImageBatch<S>,
    batch2: &ImageBatch<S>,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Result<LossReport> {
    weights.validate()?;
    if batch1.n() == 0 || batch2.n() == 0 {
        return Err(XganError::Dim("total_loss requires non-empty batches".into()));
    }
    if weights.teach_enabled && teacher.is_none() {
        return Err(XganError::Config("teach_enabled requires a teacher to be configured".into()));
    }
    let rec_1 = reconstruction_loss(params, batch1, DomainId::D1)?.to_f64();
    let rec_2 = reconstruction_loss(params, batch2, DomainId::D2)?.to_f64();
    let z1 = encode(params, batch1, DomainId::D1)?;
    let z2 = encode(params, batch2, DomainId::D2)?;
    let dann = dann_loss(params, &z1, &z2)?.to_f64();
    let (s12, s21) = semantic_consistency_parts(params, batch1, batch2, cfg.sem_distance)?;
    let (mut gan_gen, mut gan_disc) = (0.0, 0.0);
    if weights.w_gan > 0.0 {
        let (g, d) = gan_losses(params, batch1, batch2, cfg.gan_generator_form)?;
        gan_gen = g.to_f64();
        gan_disc = d.to_f64();
        if weights.gan_2to1_enabled {
            let disc2 = params
                .disc_2to1
                .as_ref()
                .ok_or_else(|| XganError::Config("gan_2to1_enabled requires second_discriminator in the model".into()))?;
            let fake = crate::model::translate(params, batch2, DomainId::D2)?;
            let l_fake = disc2.forward_eval(fake.tensor()).into_data();
            let l_real = disc2.forward_eval(batch1.tensor()).into_data();
            gan_gen += generator_gan_value(&l_fake, cfg.gan_generator_form).to_f64();
            gan_disc += discriminator_gan_value(&l_real, &l_fake).to_f64();
        }
    }
    let teach = if weights.teach_active() {
        teacher_loss(params, teacher.unwrap(), batch1, DomainId::D1, cfg.teach_distance)?.to_f64()
    } else {
        0.0
    };
    let tv = if weights.tv_weight > 0.0 {
        let t12 = crate::model::translate(params, batch1, DomainId::D1)?;
        let t21 = crate::model::translate(params, batch2, DomainId::D2)?;
        0.5 * (total_variation_loss(&t12).to_f64() + total_variation_loss(&t21).to_f64())
    } else {
        0.0
    };
    let mut report = LossReport {
        rec_1,
        rec_2,
        dann,
        sem_1to2: s12.to_f64(),
        sem_2to1: s21.to_f64(),
        gan_gen,
        gan_disc,
        teach,
        tv,
        total: 0.0,
    };
    report.total = report.weighted_total(weights);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.
// ---------------------------------------------------------------------------

/// Central-difference gradient estimate over the flat canonical parameter
/// vector. Intended for micro-models; cost is two loss evaluations per
/// parameter.
pub fn finite_difference_gradient<S: Scalar>(
    loss_fn: &dyn Fn(&XganParams<S>) -> Result<S>,
    params: &XganParams<S>,
    epsilon: f64,
) -> Result<Vec<S>> {
    if epsilon <= 0.0 {
        return Err(XganError::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut flat = params.flatten();
    let mut work = params.clone();
    let eps = S::from_f64(epsilon);
    let mut grads = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        work.load_flat(&flat);
        let up = loss_fn(&work)?;
        flat[i] = orig - eps;
        work.load_flat(&flat);
        let down = loss_fn(&work)?;
        flat[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(XganError::Numeric(format!(
                "non-finite loss while perturbing parameter {i}"
            )));
        }
        grads.push((up - down) / (S::from_f64(2.0) * eps));
    }
    work.load_flat(&flat);
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Joint backward passes for the trainer.
// ---------------------------------------------------------------------------

/// How encoder parameters participate in the generator phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderPolicy {
    /// Normal training: every active loss reaches the encoders.
    Train,
    /// Encoders are fixed (teacher-aliased baseline).
    Frozen,
    /// Encoders receive semantic-consistency gradients only.
    SemOnly,
}

pub struct GenPhase<S> {
    pub report: LossReport,
    pub grads: XganGrads<S>,
}

/// Runs the generator-side forward and backward: reconstruction on both
/// domains, the domain-adversarial term (descent into the classifier,
/// reversed and scaled by w_dann into the encoders), semantic consistency
/// through the full translation loops, the generator GAN term (discriminator
/// frozen), the teacher distillation term, and optional total variation.
pub fn generator_phase<S: Scalar>(
    params: &XganParams<S>,
    teacher: Option<&dyn TeacherEmbed<S>>,
    batch1: &ImageBatch<S>,
    batch2: &ImageBatch<S>,
    weights: &LossWeights,
    cfg: &LossConfig,
    policy: EncoderPolicy,
) -> Result<GenPhase<S>> {
    weights.validate()?;
    if batch1.n() == 0 || batch2.n() == 0 {
        return Err(XganError::Dim("generator_phase requires non-empty batches".into()));
    }
    if weights.teach_enabled && teacher.is_none() {
        return Err(XganError::Config("teach_enabled requires a teacher to be configured".into()));
    }
    if weights.gan_2to1_enabled && params.disc_2to1.is_none() {
        return Err(XganError::Config(
            "gan_2to1_enabled requires second_discriminator in the model".into(),
        ));
    }
    let (n1, n2) = (batch1.n(), batch2.n());
    let mut grads = XganGrads::zeros_like(params);
    let enc_trains = policy == EncoderPolicy::Train;
    let enc_sem_trains = policy != EncoderPolicy::Frozen;

    // ---- forward with caches ----
    let c_e1p = params.enc_private[0].forward(batch1.tensor());
    let c_e1s = params.enc_shared.forward(c_e1p.output());
    let z1 = c_e1s.output().clone();
    let c_e2p = params.enc_private[1].forward(batch2.tensor());
    let c_e2s = params.enc_shared.forward(c_e2p.output());
    let z2 = c_e2s.output().clone();

    let c_h1 = params.dec_shared.forward(&z1);
    let c_h2 = params.dec_shared.forward(&z2);
    let c_r1 = params.dec_private[0].forward(c_h1.output());
    let c_r2 = params.dec_private[1].forward(c_h2.output());
    let c_t12 = params.dec_private[1].forward(c_h1.output());
    let c_t21 = params.dec_private[0].forward(c_h2.output());
    let t12 = c_t12.output();
    let t21 = c_t21.output();

    let c_e2p_t = params.enc_private[1].forward(t12);
    let c_e2s_t = params.enc_shared.forward(c_e2p_t.output());
    let z12 = c_e2s_t.output().clone();
    let c_e1p_t = params.enc_private[0].forward(t21);
    let c_e1s_t = params.enc_shared.forward(c_e1p_t.output());
    let z21 = c_e1s_t.output().clone();

    let dann_on = weights.w_dann > 0.0;
    let c_cd1 = dann_on.then(|| params.c_dann.forward(&z1));
    let c_cd2 = dann_on.then(|| params.c_dann.forward(&z2));

    let gan_on = weights.w_gan > 0.0;
    let c_disc_fake = gan_on.then(|| params.disc_1to2.forward(t12));
    let c_disc2_fake = (gan_on && weights.gan_2to1_enabled)
        .then(|| params.disc_2to1.as_ref().unwrap().forward(t21));

    let teach_on = weights.teach_active();
    let tz = if teach_on {
        let t = teacher.unwrap();
        if t.embed_dim() != params.config.embed_dim {
            return Err(XganError::Dim(format!(
                "teacher embedding width {} != embed_dim {}",
                t.embed_dim(),
                params.config.embed_dim
            )));
        }
        Some(t.embed(batch1)?)
    } else {
        None
    };

    // ---- loss values ----
    let rec_1 = batch_distance(batch1.tensor().data(), c_r1.output().data(), n1, Distance::L2);
    let rec_2 = batch_distance(batch2.tensor().data(), c_r2.output().data(), n2, Distance::L2);
    let sem_12 = batch_distance(z1.data(), z12.data(), n1, cfg.sem_distance);
    let sem_21 = batch_distance(z2.data(), z21.data(), n2, cfg.sem_distance);
    let dann = if dann_on {
        let l1 = c_cd1.as_ref().unwrap().output().data();
        let l2 = c_cd2.as_ref().unwrap().output().data();
        l1.iter().map(|&l| softplus(l)).sum::<S>() / S::from_usize(n1)
            + l2.iter().map(|&l| softplus(-l)).sum::<S>() / S::from_usize(n2)
    } else {
        S::ZERO
    };
    let mut gan_gen = S::ZERO;
    let mut gan_disc = S::ZERO;
    if gan_on {
        let lf = c_disc_fake.as_ref().unwrap().output().data();
        gan_gen += generator_gan_value(lf, cfg.gan_generator_form);
        // reported only; the discriminator phase recomputes its own loss
        let lr = params.disc_1to2.forward_eval(batch2.tensor()).into_data();
        gan_disc += discriminator_gan_value(&lr, lf);
        if let Some(c2) = &c_disc2_fake {
            let lf2 = c2.output().data();
            gan_gen += generator_gan_value(lf2, cfg.gan_generator_form);
            let lr2 = params.disc_2to1.as_ref().unwrap().forward_eval(batch1.tensor()).into_data();
            gan_disc += discriminator_gan_value(&lr2, lf2);
        }
    }
    let teach = if teach_on {
        batch_distance(tz.as_ref().unwrap().tensor().data(), z1.data(), n1, cfg.teach_distance)
    } else {
        S::ZERO
    };
    let tv_on = weights.tv_weight > 0.0;
    let tv = if tv_on {
        let t12_img = ImageBatch::from_tensor(t12.clone())?;
        let t21_img = ImageBatch::from_tensor(t21.clone())?;
        (total_variation_loss(&t12_img) + total_variation_loss(&t21_img)) * S::from_f64(0.5)
    } else {
        S::ZERO
    };

    let mut report = LossReport {
        rec_1: rec_1.to_f64(),
        rec_2: rec_2.to_f64(),
        dann: dann.to_f64(),
        sem_1to2: sem_12.to_f64(),
        sem_2to1: sem_21.to_f64(),
        gan_gen: gan_gen.to_f64(),
        gan_disc: gan_disc.to_f64(),
        teach: teach.to_f64(),
        tv: tv.to_f64(),
        total: 0.0,
    };
    report.total = report.weighted_total(weights);

    // ---- backward ----
    let w_sem = S::from_f64(weights.w_sem);
    let w_gan = S::from_f64(weights.w_gan);
    let w_teach = S::from_f64(weights.w_teach);
    let w_tv = S::from_f64(weights.tv_weight * 0.5);

    // Gradients arriving at the translated images. The semantic-consistency
    // contribution is tracked separately so the SemOnly policy can tell which
    // part of the embedding gradient the encoders may see.
    let sem_on = weights.w_sem > 0.0;
    let mut g_t12_sem = Tensor::zeros(t12.dims());
    if sem_on {
        let mut g_z12 = Tensor::from_vec(
            z12.dims(),
            batch_distance_grad_a(z12.data(), z1.data(), n1, cfg.sem_distance),
        );
        g_z12.scale(w_sem);
        // through the re-encoder e2: trains e2 (a semantic-consistency
        // gradient) and yields the image-level gradient
        let d_h = params
            .enc_shared
            .backward(&c_e2s_t, &g_z12, enc_sem_trains.then_some(&mut grads.enc_shared), true)
            .unwrap();
        let d_img = params.enc_private[1]
            .backward(&c_e2p_t, &d_h, enc_sem_trains.then_some(&mut grads.enc_private[1]), true)
            .unwrap();
        g_t12_sem.add_assign(&d_img);
    }
    let mut g_t12_other = Tensor::zeros(t12.dims());
    if gan_on {
        let lf = c_disc_fake.as_ref().unwrap().output();
        let mut g_lf = Tensor::zeros(lf.dims());
        fill_generator_gan_grad(lf.data(), cfg.gan_generator_form, w_gan, g_lf.data_mut());
        // discriminator parameters stay frozen here
        let d_img = params
            .disc_1to2
            .backward(c_disc_fake.as_ref().unwrap(), &g_lf, None, true)
            .unwrap();
        g_t12_other.add_assign(&d_img);
    }
    if tv_on {
        let t12_img = ImageBatch::from_tensor(t12.clone())?;
        let mut g = total_variation_grad(&t12_img);
        g.scale(w_tv);
        g_t12_other.add_assign(&g);
    }

    let mut g_t21_sem = Tensor::zeros(t21.dims());
    if sem_on {
        let mut g_z21 = Tensor::from_vec(
            z21.dims(),
            batch_distance_grad_a(z21.data(), z2.data(), n2, cfg.sem_distance),
        );
        g_z21.scale(w_sem);
        let d_h = params
            .enc_shared
            .backward(&c_e1s_t, &g_z21, enc_sem_trains.then_some(&mut grads.enc_shared), true)
            .unwrap();
        let d_img = params.enc_private[0]
            .backward(&c_e1p_t, &d_h, enc_sem_trains.then_some(&mut grads.enc_private[0]), true)
            .unwrap();
        g_t21_sem.add_assign(&d_img);
    }
    let mut g_t21_other = Tensor::zeros(t21.dims());
    if let Some(c2) = &c_disc2_fake {
        let lf2 = c2.output();
        let mut g_lf2 = Tensor::zeros(lf2.dims());
        fill_generator_gan_grad(lf2.data(), cfg.gan_generator_form, w_gan, g_lf2.data_mut());
        let d_img = params
            .disc_2to1
            .as_ref()
            .unwrap()
            .backward(c2, &g_lf2, None, true)
            .unwrap();
        g_t21_other.add_assign(&d_img);
    }
    if tv_on {
        let t21_img = ImageBatch::from_tensor(t21.clone())?;
        let mut g = total_variation_grad(&t21_img);
        g.scale(w_tv);
        g_t21_other.add_assign(&g);
    }

    // Reconstruction gradients at the decoder outputs.
    let d_r1 = Tensor::from_vec(
        c_r1.output().dims(),
        batch_distance_grad_a(c_r1.output().data(), batch1.tensor().data(), n1, Distance::L2),
    );
    let d_r2 = Tensor::from_vec(
        c_r2.output().dims(),
        batch_distance_grad_a(c_r2.output().data(), batch2.tensor().data(), n2, Distance::L2),
    );

    // Decoder private backwards. The z-gradients the encoders are allowed to
    // see flow through a separate stream under SemOnly.
    let mut g_t12_all = g_t12_sem.clone();
    g_t12_all.add_assign(&g_t12_other);
    let mut g_t21_all = g_t21_sem.clone();
    g_t21_all.add_assign(&g_t21_other);

    let mut g_h1 = params.dec_private[0]
        .backward(&c_r1, &d_r1, Some(&mut grads.dec_private[0]), true)
        .unwrap();
    g_h1.add_assign(
        &params.dec_private[1]
            .backward(&c_t12, &g_t12_all, Some(&mut grads.dec_private[1]), true)
            .unwrap(),
    );
    let mut g_h2 = params.dec_private[1]
        .backward(&c_r2, &d_r2, Some(&mut grads.dec_private[1]), true)
        .unwrap();
    g_h2.add_assign(
        &params.dec_private[0]
            .backward(&c_t21, &g_t21_all, Some(&mut grads.dec_private[0]), true)
            .unwrap(),
    );

    let g_z1_from_dec = params
        .dec_shared
        .backward(&c_h1, &g_h1, Some(&mut grads.dec_shared), true)
        .unwrap();
    let g_z2_from_dec = params
        .dec_shared
        .backward(&c_h2, &g_h2, Some(&mut grads.dec_shared), true)
        .unwrap();

    // Embedding-level gradients the encoders may train on.
    let mut g_z1 = Tensor::zeros(z1.dims());
    let mut g_z2 = Tensor::zeros(z2.dims());
    match policy {
        EncoderPolicy::Train => {
            g_z1.add_assign(&g_z1_from_dec);
            g_z2.add_assign(&g_z2_from_dec);
        }
        EncoderPolicy::Frozen => {}
        EncoderPolicy::SemOnly => {
            // Re-derive the decoder-path gradients from the semantic stream
            // alone (decoder parameters already accumulated the full stream).
            let g_h1_sem = params.dec_private[1].backward(&c_t12, &g_t12_sem, None, true).unwrap();
            let g_h2_sem = params.dec_private[0].backward(&c_t21, &g_t21_sem, None, true).unwrap();
            g_z1.add_assign(&params.dec_shared.backward(&c_h1, &g_h1_sem, None, true).unwrap());
            g_z2.add_assign(&params.dec_shared.backward(&c_h2, &g_h2_sem, None, true).unwrap());
        }
    }

    // Direct semantic-consistency terms at z1/z2.
    if sem_on && policy != EncoderPolicy::Frozen {
        let mut g = Tensor::from_vec(
            z1.dims(),
            batch_distance_grad_a(z1.data(), z12.data(), n1, cfg.sem_distance),
        );
        g.scale(w_sem);
        g_z1.add_assign(&g);
        let mut g = Tensor::from_vec(
            z2.dims(),
            batch_distance_grad_a(z2.data(), z21.data(), n2, cfg.sem_distance),
        );
        g.scale(w_sem);
        g_z2.add_assign(&g);
    }

    // Domain-adversarial term: descent gradient into the classifier, reversed
    // (negated, scaled by w_dann) gradient into the encoders.
    if dann_on {
        let w_dann = S::from_f64(weights.w_dann);
        for (cache, z, g_z, n) in [
            (c_cd1.as_ref().unwrap(), &z1, &mut g_z1, n1),
            (c_cd2.as_ref().unwrap(), &z2, &mut g_z2, n2),
        ] {
            let logits = cache.output();
            let label_one = std::ptr::eq(z, &z2);
            let inv_n = S::ONE / S::from_usize(n);
            let mut g_l = Tensor::zeros(logits.dims());
            for (g, &l) in g_l.data_mut().iter_mut().zip(logits.data().iter()) {
                let p = sigmoid(l);
                *g = (p - if label_one { S::ONE } else { S::ZERO }) * inv_n;
            }
            let d_z = params
                .c_dann
                .backward(cache, &g_l, Some(&mut grads.c_dann), true)
                .unwrap();
            if enc_trains {
                let mut reversed = d_z;
                reversed.scale(-w_dann);
                g_z.add_assign(&reversed);
            }
        }
    }

    // Teacher distillation pulls z1 toward the frozen teacher embedding.
    if teach_on && enc_trains {
        let mut g = Tensor::from_vec(
            z1.dims(),
            batch_distance_grad_a(z1.data(), tz.as_ref().unwrap().tensor().data(), n1, cfg.teach_distance),
        );
        g.scale(w_teach);
        g_z1.add_assign(&g);
    }

    // Encoder backwards.
    if policy != EncoderPolicy::Frozen {
        let d_h = params
            .enc_shared
            .backward(&c_e1s, &g_z1, Some(&mut grads.enc_shared), true)
            .unwrap();
        params.enc_private[0].backward(&c_e1p, &d_h, Some(&mut grads.enc_private[0]), false);
        let d_h = params
            .enc_shared
            .backward(&c_e2s, &g_z2, Some(&mut grads.enc_shared), true)
            .unwrap();
        params.enc_private[1].backward(&c_e2p, &d_h, Some(&mut grads.enc_private[1]), false);
    }

    Ok(GenPhase { report, grads })
}

fn fill_generator_gan_grad<S: Scalar>(l_fake: &[S], form: GanGeneratorForm, weight: S, out: &mut [S]) {
    let inv_n = S::ONE / S::from_usize(l_fake.len());
    for (g, &l) in out.iter_mut().zip(l_fake.iter()) {
        let p = sigmoid(l);
        *g = weight
            * inv_n
            * match form {
                GanGeneratorForm::NonSaturating => p - S::ONE,
                GanGeneratorForm::Minimax => -p,
            };
    }
}

/// Discriminator-side loss and gradients, with the generator frozen. Returns
/// the descent-form loss; gradients touch only the discriminator stacks.
pub fn discriminator_phase<S: Scalar>(
    params: &XganParams<S>,
    batch1: &ImageBatch<S>,
    batch2: &ImageBatch<S>,
    weights: &LossWeights,
) -> Result<(S, XganGrads<S>)> {
    let mut grads = XganGrads::zeros_like(params);
    let fake12 = crate::model::translate(params, batch1, DomainId::D1)?;
    let mut loss = disc_pair_backward(
        &params.disc_1to2,
        batch2.tensor(),
        fake12.tensor(),
        &mut grads.disc_1to2,
    );
    if weights.gan_2to1_enabled {
        let disc2 = params
            .disc_2to1
            .as_ref()
            .ok_or_else(|| XganError::Config("gan_2to1_enabled requires second_discriminator in the model".into()))?;
        let fake21 = crate::model::translate(params, batch2, DomainId::D2)?;
        loss += disc_pair_backward(
            disc2,
            batch1.tensor(),
            fake21.tensor(),
            grads.disc_2to1.as_mut().unwrap(),
        );
    }
    Ok((loss, grads))
}

fn disc_pair_backward<S: Scalar>(
    disc: &crate::nn::Stack<S>,
    real: &Tensor<S>,
    fake: &Tensor<S>,
    grads: &mut crate::nn::StackGrads<S>,
) -> S {
    let c_real = disc.forward(real);
    let c_fake = disc.forward(fake);
    let lr = c_real.output();
    let lf = c_fake.output();
    let (nr, nf) = (S::from_usize(lr.len()), S::from_usize(lf.len()));
    let loss = lr.data().iter().map(|&l| softplus(-l)).sum::<S>() / nr
        + lf.data().iter().map(|&l| softplus(l)).sum::<S>() / nf;

    let mut g_lr = Tensor::zeros(lr.dims());
    for (g, &l) in g_lr.data_mut().iter_mut().zip(lr.data().iter()) {
        *g = (sigmoid(l) - S::ONE) / nr;
    }
    let mut g_lf = Tensor::zeros(lf.dims());
    for (g, &l) in g_lf.data_mut().iter_mut().zip(lf.data().iter()) {
        *g = sigmoid(l) / nf;
    }
    disc.backward(&c_real, &g_lr, Some(grads), false);
    disc.backward(&c_fake, &g_lf, Some(grads), false);
    loss
}
