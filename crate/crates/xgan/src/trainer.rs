//! Alternating optimization: one joint generator/encoder/classifier Adam
//! step, then one discriminator step with the generator frozen. Seeded and
//! deterministic; state round-trips through the checkpoint container
//! bit-exactly, so a resumed run reproduces the uninterrupted one.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container, Kind, NamedTensor};
use crate::error::{Result, XganError};
use crate::model::{build_model, ImageBatch, ModelConfig, XganParams};
use crate::objectives::{
    discriminator_phase, generator_phase, EncoderPolicy, LossConfig, LossReport, LossWeights,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::teacher::TeacherNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FullXgan,
    RecDannOnly,
    NoTeacher,
    NoSem,
    NoGan,
    DtnFrozenEncoder,
    DtnFinetunedEncoder,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::FullXgan,
        TrainMode::RecDannOnly,
        TrainMode::NoTeacher,
        TrainMode::NoSem,
        TrainMode::NoGan,
        TrainMode::DtnFrozenEncoder,
        TrainMode::DtnFinetunedEncoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::FullXgan => "full_xgan",
            TrainMode::RecDannOnly => "rec_dann_only",
            TrainMode::NoTeacher => "no_teacher",
            TrainMode::NoSem => "no_sem",
            TrainMode::NoGan => "no_gan",
            TrainMode::DtnFrozenEncoder => "dtn_frozen_encoder",
            TrainMode::DtnFinetunedEncoder => "dtn_finetuned_encoder",
        }
    }

    pub fn parse(s: &str) -> Option<TrainMode> {
        TrainMode::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Deterministic weight/policy overrides for the preset.
    pub fn apply(&self, base: &LossWeights) -> (LossWeights, EncoderPolicy) {
        let mut w = base.clone();
        let policy = match self {
            TrainMode::FullXgan => EncoderPolicy::Train,
            TrainMode::RecDannOnly => {
                w.w_sem = 0.0;
                w.w_gan = 0.0;
                w.w_teach = 0.0;
                w.teach_enabled = false;
                w.tv_weight = 0.0;
                EncoderPolicy::Train
            }
            TrainMode::NoTeacher => {
                w.w_teach = 0.0;
                w.teach_enabled = false;
                EncoderPolicy::Train
            }
            TrainMode::NoSem => {
                w.w_sem = 0.0;
                EncoderPolicy::Train
            }
            TrainMode::NoGan => {
                w.w_gan = 0.0;
                EncoderPolicy::Train
            }
            TrainMode::DtnFrozenEncoder => {
                w.w_dann = 0.0;
                w.w_teach = 0.0;
                w.teach_enabled = false;
                EncoderPolicy::Frozen
            }
            TrainMode::DtnFinetunedEncoder => {
                w.w_dann = 0.0;
                w.w_teach = 0.0;
                w.teach_enabled = false;
                EncoderPolicy::SemOnly
            }
        };
        (w, policy)
    }

    pub fn needs_teacher(&self) -> bool {
        matches!(self, TrainMode::DtnFrozenEncoder | TrainMode::DtnFinetunedEncoder)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub metrics_every: u64,
    pub weights: LossWeights,
    pub loss_cfg: LossConfig,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 16,
            total_steps: 5000,
            seed: 0,
            checkpoint_every: 0,
            metrics_every: 10,
            weights: LossWeights::default(),
            loss_cfg: LossConfig::default(),
            mode: TrainMode::FullXgan,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(XganError::Config(format!(
                "learning_rate: must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(XganError::Config(format!("{name}: must be in [0, 1), got {b}")));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(XganError::Config("adam_epsilon: must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(XganError::Config("batch_size: must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// First/second Adam moments parallel to the flat parameter vector, with a
/// separate step counter per phase.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t_gen: u64,
    pub t_disc: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> AdamState<S> {
        AdamState {
            m: vec![S::ZERO; len],
            v: vec![S::ZERO; len],
            t_gen: 0,
            t_disc: 0,
        }
    }

    fn update(&mut self, t: u64, params: &mut [S], grads: &[S], range: Range<usize>, cfg: &TrainConfig) {
        let lr = S::from_f64(cfg.learning_rate);
        let b1 = S::from_f64(cfg.adam_beta1);
        let b2 = S::from_f64(cfg.adam_beta2);
        let eps = S::from_f64(cfg.adam_epsilon);
        let bc1 = S::ONE - b1.powi(t as i32);
        let bc2 = S::ONE - b2.powi(t as i32);
        for i in range {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (S::ONE - b1) * g;
            self.v[i] = b2 * self.v[i] + (S::ONE - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Cycles a corpus in shuffled order, reshuffling at each epoch boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub order: Vec<u32>,
    pub pos: usize,
}

impl SamplerState {
    fn new(n: usize, rng: &mut Rng) -> SamplerState {
        let mut order: Vec<u32> = (0..n as u32).collect();
        rng.shuffle(&mut order);
        SamplerState { order, pos: 0 }
    }

    fn next_batch(&mut self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.pos >= self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos] as usize);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub step: u64,
    pub params: XganParams<S>,
    pub adam: AdamState<S>,
    pub rng: Rng,
    pub samplers: [SamplerState; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
    pub wall_time_s: f64,
}

pub struct TrainOutput<S> {
    pub state: TrainState<S>,
    pub metrics: Vec<MetricRecord>,
}

/// Builds the initial training state: seeded model parameters, zero Adam
/// moments, the training rng stream, and shuffled corpus samplers.
pub fn init_state<S: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    n_corpus1: usize,
    n_corpus2: usize,
) -> Result<TrainState<S>> {
    cfg.validate()?;
    if n_corpus1 == 0 || n_corpus2 == 0 {
        return Err(XganError::Data("corpora must be non-empty".into()));
    }
    let params = build_model::<S>(model_cfg, cfg.seed)?;
    let total = params.layout().total;
    let mut rng = Rng::seed_from(cfg.seed).split(0x7261696e); // training stream
    let samplers = [SamplerState::new(n_corpus1, &mut rng), SamplerState::new(n_corpus2, &mut rng)];
    Ok(TrainState {
        step: 0,
        params,
        adam: AdamState::new(total),
        rng,
        samplers,
    })
}

fn check_teacher_setup<S: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    teacher: Option<&TeacherNet<S>>,
) -> Result<()> {
    let (weights, _) = cfg.mode.apply(&cfg.weights);
    if (weights.teach_enabled || cfg.mode.needs_teacher()) && teacher.is_none() {
        return Err(XganError::Config(format!(
            "mode {} requires a teacher to be configured",
            cfg.mode.name()
        )));
    }
    if let Some(t) = teacher {
        if crate::objectives::TeacherEmbed::embed_dim(t) != model_cfg.embed_dim {
            return Err(XganError::Config(format!(
                "teacher embedding width {} does not match embed_dim {}",
                crate::objectives::TeacherEmbed::embed_dim(t),
                model_cfg.embed_dim
            )));
        }
    }
    Ok(())
}

/// Copies the teacher trunk into both domain encoders (private blocks and the
/// shared tail) for the fixed-encoder baseline modes.
pub fn alias_encoders_to_teacher<S: Scalar>(params: &mut XganParams<S>, teacher: &TeacherNet<S>) -> Result<()> {
    let flat = teacher.trunk_flat();
    let p_len = stack_flat_len(&params.enc_private[0]);
    let s_len = stack_flat_len(&params.enc_shared);
    if flat.len() != p_len + s_len {
        return Err(XganError::Config(format!(
            "teacher trunk has {} parameters, encoder expects {}",
            flat.len(),
            p_len + s_len
        )));
    }
    write_stack_flat(&mut params.enc_private[0], &flat[..p_len]);
    write_stack_flat(&mut params.enc_private[1], &flat[..p_len]);
    write_stack_flat(&mut params.enc_shared, &flat[p_len..]);
    Ok(())
}

fn stack_flat_len<S: Scalar>(stack: &crate::nn::Stack<S>) -> usize {
    stack.param_count()
}

fn write_stack_flat<S: Scalar>(stack: &mut crate::nn::Stack<S>, flat: &[S]) {
    let mut off = 0;
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
    assert_eq!(off, flat.len());
}

fn abort_if_not_finite(report: &LossReport, grads_flat: &[impl Scalar]) -> Result<()> {
    if let Some(term) = report.first_non_finite() {
        return Err(XganError::Numeric(format!(
            "non-finite loss term '{term}'; training aborted"
        )));
    }
    if !grads_flat.iter().all(|g| g.is_finite()) {
        return Err(XganError::Numeric("non-finite gradient; training aborted".into()));
    }
    Ok(())
}

/// One Adam update of the encoders, decoders, and domain classifier under
/// the mode's weight preset; the discriminator is untouched.
pub fn generator_step<S: Scalar>(
    state: &mut TrainState<S>,
    batch1: &ImageBatch<S>,
    batch2: &ImageBatch<S>,
    cfg: &TrainConfig,
    teacher: Option<&TeacherNet<S>>,
) -> Result<LossReport> {
    let (weights, policy) = cfg.mode.apply(&cfg.weights);
    let teacher_dyn = teacher.map(|t| t as &dyn crate::objectives::TeacherEmbed<S>);
    let out = generator_phase(&state.params, teacher_dyn, batch1, batch2, &weights, &cfg.loss_cfg, policy)?;
    let grads = out.grads.flatten();
    abort_if_not_finite(&out.report, &grads)?;

    let layout = state.params.layout();
    let mut flat = state.params.flatten();
    state.adam.t_gen += 1;
    let t = state.adam.t_gen;
    state.adam.update(t, &mut flat, &grads, 0..layout.gen_len, cfg);
    state.params.load_flat(&flat);
    Ok(out.report)
}

/// One Adam update of the discriminator(s) with the generator frozen.
/// Returns `None` (state untouched) when the GAN term is off.
pub fn discriminator_step<S: Scalar>(
    state: &mut TrainState<S>,
    batch1: &ImageBatch<S>,
    batch2: &ImageBatch<S>,
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let (weights, _) = cfg.mode.apply(&cfg.weights);
    if weights.w_gan == 0.0 {
        return Ok(None);
    }
    let (loss, grads) = discriminator_phase(&state.params, batch1, batch2, &weights)?;
    let grads = grads.flatten();
    if !loss.is_finite() || !grads.iter().all(|g| g.is_finite()) {
        return Err(XganError::Numeric(
            "non-finite loss term 'gan_disc'; training aborted".into(),
        ));
    }
    let layout = state.params.layout();
    let mut flat = state.params.flatten();
    state.adam.t_disc += 1;
    let t = state.adam.t_disc;
    state.adam.update(t, &mut flat, &grads, layout.gen_len..layout.total, cfg);
    state.params.load_flat(&flat);
    Ok(Some(loss.to_f64()))
}

/// Runs the alternating process for `cfg.total_steps` steps over two
/// unpaired corpora, emitting metric records and periodic checkpoints
/// through the callbacks.
pub fn train<S: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus1: &ImageBatch<S>,
    corpus2: &ImageBatch<S>,
    teacher: Option<&TeacherNet<S>>,
    on_checkpoint: &mut dyn FnMut(&TrainState<S>) -> Result<()>,
) -> Result<TrainOutput<S>> {
    check_teacher_setup(model_cfg, cfg, teacher)?;
    let mut state = init_state::<S>(model_cfg, cfg, corpus1.n(), corpus2.n())?;
    if cfg.mode.needs_teacher() {
        alias_encoders_to_teacher(&mut state.params, teacher.unwrap())?;
    }
    resume(&mut state, cfg, corpus1, corpus2, teacher, on_checkpoint)
}

/// Continues training from an existing state up to `cfg.total_steps`.
pub fn resume<S: Scalar>(
    state: &mut TrainState<S>,
    cfg: &TrainConfig,
    corpus1: &ImageBatch<S>,
    corpus2: &ImageBatch<S>,
    teacher: Option<&TeacherNet<S>>,
    on_checkpoint: &mut dyn FnMut(&TrainState<S>) -> Result<()>,
) -> Result<TrainOutput<S>> {
    cfg.validate()?;
    check_teacher_setup(&state.params.config.clone(), cfg, teacher)?;
    let started = std::time::Instant::now();
    let mut metrics = Vec::new();
    while state.step < cfg.total_steps {
        let idx1 = state.samplers[0].next_batch(cfg.batch_size, &mut state.rng);
        let idx2 = state.samplers[1].next_batch(cfg.batch_size, &mut state.rng);
        let b1 = corpus1.select(&idx1);
        let b2 = corpus2.select(&idx2);
        let report = generator_step(state, &b1, &b2, cfg, teacher)?;
        discriminator_step(state, &b1, &b2, cfg)?;
        state.step += 1;
        if cfg.metrics_every > 0 && state.step % cfg.metrics_every == 0 {
            metrics.push(MetricRecord {
                step: state.step,
                report,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            on_checkpoint(state)?;
        }
    }
    Ok(TrainOutput {
        state: state.clone(),
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Training-state checkpoints (f32 storage).
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TrainHeader {
    model: ModelConfig,
    step: u64,
    t_gen: u64,
    t_disc: u64,
    rng: [u64; 4],
    samplers: Vec<SamplerState>,
}

pub fn save_train_state(state: &TrainState<f32>, path: &std::path::Path) -> Result<()> {
    let layout = state.params.layout();
    let flat = state.params.flatten();
    let mut tensors = Vec::with_capacity(layout.entries.len() * 3);
    for entry in &layout.entries {
        let slice = &flat[entry.offset..entry.offset + entry.len];
        tensors.push(NamedTensor {
            name: entry.name.clone(),
            dims: entry.dims.clone(),
            data: slice.to_vec(),
        });
    }
    for (prefix, source) in [("adam_m", &state.adam.m), ("adam_v", &state.adam.v)] {
        for entry in &layout.entries {
            tensors.push(NamedTensor {
                name: format!("{prefix}.{}", entry.name),
                dims: entry.dims.clone(),
                data: source[entry.offset..entry.offset + entry.len].to_vec(),
            });
        }
    }
    let header = TrainHeader {
        model: state.params.config.clone(),
        step: state.step,
        t_gen: state.adam.t_gen,
        t_disc: state.adam.t_disc,
        rng: state.rng.state(),
        samplers: state.samplers.to_vec(),
    };
    let container = Container {
        kind: Kind::TrainState,
        header_json: serde_json::to_string(&header).map_err(|e| XganError::Checkpoint(e.to_string()))?,
        tensors,
    };
    checkpoint::write_container(path, &container)
}

pub fn load_train_state(path: &std::path::Path) -> Result<TrainState<f32>> {
    let container = checkpoint::read_container(path)?;
    if container.kind != Kind::TrainState {
        return Err(XganError::Checkpoint(format!(
            "{}: not a training-state checkpoint",
            path.display()
        )));
    }
    let header: TrainHeader = serde_json::from_str(&container.header_json)
        .map_err(|e| XganError::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.samplers.len() != 2 {
        return Err(XganError::Checkpoint(format!(
            "{}: expected 2 sampler states, got {}",
            path.display(),
            header.samplers.len()
        )));
    }
    let mut params = build_model::<f32>(&header.model, 0)?;
    let layout = params.layout();
    let mut flat = vec![0.0f32; layout.total];
    let mut m = vec![0.0f32; layout.total];
    let mut v = vec![0.0f32; layout.total];

    use std::collections::HashMap;
    let mut by_name: HashMap<&str, &NamedTensor> = HashMap::new();
    for t in &container.tensors {
        by_name.insert(t.name.as_str(), t);
    }
    for entry in &layout.entries {
        for (prefix, dest) in [("", &mut flat), ("adam_m.", &mut m), ("adam_v.", &mut v)] {
            let name = format!("{prefix}{}", entry.name);
            let tensor = by_name.get(name.as_str()).ok_or_else(|| {
                XganError::Checkpoint(format!("{}: missing tensor '{name}'", path.display()))
            })?;
            if tensor.dims != entry.dims {
                return Err(XganError::Checkpoint(format!(
                    "{}: tensor '{name}' has shape {:?}, expected {:?}",
                    path.display(),
                    tensor.dims,
                    entry.dims
                )));
            }
            dest[entry.offset..entry.offset + entry.len].copy_from_slice(&tensor.data);
        }
    }
    params.load_flat(&flat);
    Ok(TrainState {
        step: header.step,
        params,
        adam: AdamState {
            m,
            v,
            t_gen: header.t_gen,
            t_disc: header.t_disc,
        },
        rng: Rng::from_state(header.rng),
        samplers: [header.samplers[0].clone(), header.samplers[1].clone()],
    })
}
