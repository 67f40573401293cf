//! Finite-difference verification of every analytic gradient on an f64
//! micro-model: reconstruction, domain-adversarial (classifier side and the
//! reversed encoder side), semantic consistency, both GAN sides, teacher
//! distillation, and total variation. Also the isolation contracts: the
//! generator phase never touches discriminator parameters and vice versa.

use xgan::model::{build_model, encode, DomainId, ImageBatch, ModelConfig, XganParams};
use xgan::nn::rectifier_margin;
use xgan::objectives::{
    dann_loss, finite_difference_gradient, gan_losses, generator_phase, reconstruction_loss,
    semantic_consistency_loss, teacher_loss, total_variation_loss, Distance, EncoderPolicy,
    GanGeneratorForm, LossConfig, LossWeights, TeacherEmbed,
};
use xgan::rng::Rng;
use xgan::tensor::Tensor;
use xgan::Result;

const EPS: f64 = 1e-4;
const MARGIN: f64 = 5e-4;
const TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-8;
/// f64 central differences carry rounding noise of roughly
/// ulp(|loss|) / (2 eps); at this micro-model's loss magnitude that is
/// about 1e-11, so comparisons use rtol + atol semantics.
const ATOL: f64 = 5e-11;

fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 2,
        embed_dim: 6,
        encoder_widths: vec![3, 4],
        decoder_widths: vec![6, 4],
        discriminator_widths: vec![3, 3],
        dann_hidden: vec![5],
        shared_encoder_blocks: 3,
        shared_decoder_blocks: 1,
        second_discriminator: false,
        instance_norm: false,
    }
}

/// Micro-model with every parameter (biases included) randomized: the
/// zero-init biases would otherwise leave exact zeros on rectifier corners,
/// which breaks central differences.
fn randomized_model(seed: u64) -> XganParams<f64> {
    let mut params = build_model::<f64>(&micro_config(), seed).unwrap();
    let mut rng = Rng::seed_from(seed ^ 0xb1a5);
    let mut flat = params.flatten();
    for v in flat.iter_mut() {
        *v = rng.normal() * 0.08;
    }
    params.load_flat(&flat);
    params
}

fn rand_images(rng: &mut Rng, n: usize) -> ImageBatch<f64> {
    let mut b = ImageBatch::zeros(n, 2, 8, 8);
    for v in b.tensor_mut().data_mut() {
        *v = rng.uniform() * 1.6 - 0.8;
    }
    b
}

/// Central-difference probes must not cross a rectifier corner anywhere on
/// the paths a loss evaluates; the chosen seeds keep a healthy margin.
fn assert_margins(params: &XganParams<f64>, x1: &ImageBatch<f64>, x2: &ImageBatch<f64>) {
    let mut worst = f64::INFINITY;
    for (x, dom) in [(x1, DomainId::D1), (x2, DomainId::D2)] {
        let priv_stack = &params.enc_private[dom.index()];
        worst = worst.min(rectifier_margin(priv_stack, x.tensor()));
        let h = priv_stack.forward_eval(x.tensor());
        worst = worst.min(rectifier_margin(&params.enc_shared, &h));
        let z = params.enc_shared.forward_eval(&h);
        worst = worst.min(rectifier_margin(&params.dec_shared, &z));
        let mid = params.dec_shared.forward_eval(&z);
        for dec in &params.dec_private {
            worst = worst.min(rectifier_margin(dec, &mid));
        }
        worst = worst.min(rectifier_margin(&params.c_dann, &z));
    }
    let t12 = xgan::model::translate(params, x1, DomainId::D1).unwrap();
    let t21 = xgan::model::translate(params, x2, DomainId::D2).unwrap();
    worst = worst.min(rectifier_margin(&params.disc_1to2, t12.tensor()));
    for (t, dom) in [(&t12, DomainId::D2), (&t21, DomainId::D1)] {
        let priv_stack = &params.enc_private[dom.index()];
        worst = worst.min(rectifier_margin(priv_stack, t.tensor()));
        let h = priv_stack.forward_eval(t.tensor());
        worst = worst.min(rectifier_margin(&params.enc_shared, &h));
    }
    assert!(
        worst > MARGIN,
        "pre-activation margin {worst} too small for eps {EPS}; pick another seed"
    );
}

fn margin_of(params: &XganParams<f64>, x1: &ImageBatch<f64>, x2: &ImageBatch<f64>) -> f64 {
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        assert_margins(params, x1, x2);
    }));
    if result.is_ok() {
        1.0
    } else {
        0.0
    }
}

/// One-off scan for (model seed, data seed) pairs with a comfortable
/// rectifier margin; run with --ignored to refresh the pinned seeds.
#[test]
#[ignore]
fn find_gradcheck_seeds() {
    let mut found = 0;
    for seed in 0..4000u64 {
        let params = randomized_model(seed);
        let mut rng = Rng::seed_from(seed ^ 0xdada);
        let x1 = rand_images(&mut rng, 3);
        let x2 = rand_images(&mut rng, 3);
        if margin_of(&params, &x1, &x2) > 0.5 {
            println!("seed {seed} ok (data seed = seed ^ 0xdada)");
            found += 1;
            if found >= 12 {
                break;
            }
        }
    }
    assert!(found > 0);
}

struct Check {
    name: &'static str,
    max_rel: f64,
    checked: usize,
}

fn compare(name: &'static str, analytic: &[f64], numeric: &[f64], indices: impl Iterator<Item = usize>) -> Check {
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for i in indices {
        let (a, n) = (analytic[i], numeric[i]);
        let denom = a.abs().max(n.abs());
        if denom <= GRAD_FLOOR {
            continue;
        }
        checked += 1;
        let diff = (a - n).abs();
        assert!(
            diff < TOL * denom + ATOL,
            "{name}: param {i} analytic {a} vs numeric {n}"
        );
        // the headline relative error is reported over gradients that stand
        // clear of the finite-difference noise floor
        if denom > 1e-6 {
            let rel = diff / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    assert!(checked > 0, "{name}: nothing to compare");
    Check { name, max_rel, checked }
}

impl Check {
    fn assert_ok(self) {
        println!(
            "gradcheck {:<28} max rel err {:.3e} over {} params",
            self.name, self.max_rel, self.checked
        );
        assert!(self.max_rel < TOL, "{}: max rel err {} >= {TOL}", self.name, self.max_rel);
    }
}

/// Gradients the generator phase applies for one isolated term: the phase is
/// additive per term, so the difference against the all-zero-weight run
/// isolates a single term's contribution.
fn phase_grads_isolated(
    params: &XganParams<f64>,
    teacher: Option<&dyn TeacherEmbed<f64>>,
    x1: &ImageBatch<f64>,
    x2: &ImageBatch<f64>,
    weights: &LossWeights,
    cfg: &LossConfig,
) -> Vec<f64> {
    let with = generator_phase(params, teacher, x1, x2, weights, cfg, EncoderPolicy::Train)
        .unwrap()
        .grads
        .flatten();
    let zero = LossWeights {
        w_dann: 0.0,
        w_sem: 0.0,
        w_gan: 0.0,
        w_teach: 0.0,
        gan_2to1_enabled: false,
        teach_enabled: false,
        tv_weight: 0.0,
    };
    let base = generator_phase(params, teacher, x1, x2, &zero, cfg, EncoderPolicy::Train)
        .unwrap()
        .grads
        .flatten();
    with.iter().zip(base.iter()).map(|(a, b)| a - b).collect()
}

fn component_range(params: &XganParams<f64>, prefix: &str) -> std::ops::Range<usize> {
    let layout = params.layout();
    let mut lo = usize::MAX;
    let mut hi = 0;
    for e in &layout.entries {
        if e.name.starts_with(prefix) {
            lo = lo.min(e.offset);
            hi = hi.max(e.offset + e.len);
        }
    }
    assert!(lo < hi, "no parameters under prefix {prefix}");
    lo..hi
}

fn encoder_indices(params: &XganParams<f64>) -> Vec<usize> {
    let mut idx = Vec::new();
    for prefix in ["enc_private.d1", "enc_private.d2", "enc_shared"] {
        idx.extend(component_range(params, prefix));
    }
    idx
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    let params = randomized_model(33);
    let mut rng = Rng::seed_from(33 ^ 0xdada);
    let x1 = rand_images(&mut rng, 3);
    let x2 = rand_images(&mut rng, 3);
    assert_margins(&params, &x1, &x2);

    let zero = LossWeights {
        w_dann: 0.0,
        w_sem: 0.0,
        w_gan: 0.0,
        w_teach: 0.0,
        gan_2to1_enabled: false,
        teach_enabled: false,
        tv_weight: 0.0,
    };
    let analytic = generator_phase(&params, None, &x1, &x2, &zero, &LossConfig::default(), EncoderPolicy::Train)
        .unwrap()
        .grads
        .flatten();
    let loss_fn = |p: &XganParams<f64>| -> Result<f64> {
        Ok(reconstruction_loss(p, &x1, DomainId::D1)? + reconstruction_loss(p, &x2, DomainId::D2)?)
    };
    let numeric = finite_difference_gradient(&loss_fn, &params, EPS).unwrap();
    compare("rec (both domains)", &analytic, &numeric, 0..analytic.len()).assert_ok();
}

#[test]
fn dann_classifier_side_matches_finite_differences() {
    let params = randomized_model(52);
    let mut rng = Rng::seed_from(52 ^ 0xdada);
    let x1 = rand_images(&mut rng, 3);
    let x2 = rand_images(&mut rng, 4);
    assert_margins(&params, &x1, &x2);
    let z1 = encode(&params, &x1, DomainId::D1).unwrap();
    let z2 = encode(&params, &x2, DomainId::D2).unwrap();

    let w_dann = 0.7;
    let weights = LossWeights {
        w_dann,
        w_sem: 0.0,
        w_gan: 0.0,
        w_teach: 0.0,
        gan_2to1_enabled: false,
        teach_enabled: false,
        tv_weight: 0.0,
    };
    let analytic = phase_grads_isolated(&params, None, &x1, &x2, &weights, &LossConfig::default());

    // classifier side: the descent gradient of the loss itself, unweighted;
    // the embeddings are fixed inputs here, so only c_dann varies
    let loss_fn = |p: &XganParams<f64>| dann_loss(p, &z1, &z2);
    let numeric = finite_difference_gradient(&loss_fn, &params, EPS).unwrap();
    compare(
        "dann (classifier side)",
        &analytic,
        &numeric,
        component_range(&params, "c_dann"),
    )
    .assert_ok();
}

#[test]
fn dann_encoder_side_is_the_negated_scaled_gradient() {
    let params = randomized_model(67);
    let mut rng = Rng::seed_from(67 ^ 0xdada);
    let x1 = rand_images(&mut rng, 3);
    let x2 = rand_images(&mut rng, 3);
    assert_margins(&params, &x1, &x2);

    let w_dann = 0.6;
    let weights = LossWeights {
        w_dann,
        w_sem: 0.0,
        w_gan: 0.0,
        w_teach: 0.0,
        gan_2to1_enabled: false,
        teach_enabled: false,
        tv_weight: 0.0,
    };
    let analytic = phase_grads_isolated(&params, None, &x1, &x2, &weights, &LossConfig::default());

    // full-path loss: encoders feed the classifier
    let loss_fn = |p: &XganParams<f64>| -> Result<f64> {
        let z1 = encode(p, &x1, DomainId::D1)?;
        let z2 = encode(p, &x2, DomainId::D2)?;
        dann_loss(p, &z1, &z2)
    };
    let numeric = finite_difference_gradient(&loss_fn, &params, EPS).unwrap();
    // the applied encoder gradient is the negation of the true gradient,
    // scaled by w_dann
    let reversed: Vec<f64> = numeric.iter().map(|g| -w_dann * g).collect();
    compare(
        "dann (reversed encoder side)",
        &analytic,
        &reversed,
        encoder_indices(&params).into_iter(),
    )
    .assert_ok();
}

#[test]
fn semantic_consistency_gradients_match_finite_differences() {
    let params = randomized_model(74);
    let mut rng = Rng::seed_from(74 ^ 0xdada);
    let x1 = rand_images(&mut rng, 2);
    let x2 = rand_images(&mut rng, 2);
    assert_margins(&params, &x1, &x2);

    for dist in [Distance::L2, Distance::L1] {
        let cfg = LossConfig {
            sem_distance: dist,
            ..LossConfig::default()
        };
        let weights = LossWeights {
            w_dann: 0.0,
            w_sem: 1.0,
            w_gan: 0.0,
            w_teach: 0.0,
            gan_2to1_enabled: false,
            teach_enabled: false,
            tv_weight: 0.0,
        };
        let analytic = phase_grads_isolated(&params, None, &x1, &x2, &weights, &cfg);
        let loss_fn = |p: &XganParams<f64>| semantic_consistency_loss(p, &x1, &x2, dist);
        let numeric = finite_difference_gradient(&loss_fn, &params, EPS).unwrap();
        let name = match dist {
            Distance::L2 => "sem (l2)",
            Distance::L1 => "sem (l1)",
        };
        compare(name, &analytic, &numeric, 0..analytic.len()).assert_ok();
    }
}

#[test]
fn gan_generator_gradients_match_finite_differences() {
    let params = randomized_model(95);
    let mut rng = Rng::seed_from(95 ^ 0xdada);
    let x1 = rand_images(&mut rng, 3);
    let x2 = rand_images(&mut rng, 3);
    assert_margins(&params, &x1, &x2);

    for form in [GanGeneratorForm::NonSaturating, GanGeneratorForm::Minimax] {
        let cfg = LossConfig {
            gan_generator_form: form,
            ..LossConfig::default()
        };
        let weights = LossWeights {
            w_dann: 0.0,
            w_sem: 0.0,
            w_gan: 1.0,
            w_teach: 0.0,
            gan_2to1_enabled: false,
            teach_enabled: false,
            tv_weight: 0.0,
        };
        let analytic = phase_grads_isolated(&params, None, &x1, &x2, &weights, &cfg);

        // the discriminator is frozen during the generator phase
        let disc_range = component_range(&params, "disc_1to2");
        assert!(
            analytic[disc_range].iter().all(|&g| g == 0.0),
            "generator phase leaked gradient into the discriminator"
        );

        let loss_fn = |p: &XganParams<f64>| Ok(gan_losses(p, &x1, &x2, form)?.0);
        let numeric = finite_difference_gradient(&loss_fn, &params, EPS).unwrap();
        let gen_indices: Vec<usize> = {
            let mut v = encoder_indices(&params);
            for prefix in ["dec_shared", "dec_private.d1", "dec_private.d2"] {
                v.extend(component_range(&params, prefix));
            }
            v
        };
        let name = match form {
            GanGeneratorForm::NonSaturating => "gan gen (non-saturating)",
            GanGeneratorForm::Minimax => "gan gen (minimax)",
        };
        compare(name, &analytic, &numeric, gen_indices.into_iter()).assert_ok();
    }
}

#[test]
fn gan_discriminator_gradients_match_finite_differences() {
    let params = randomized_model(96);
    let mut rng = Rng::seed_from(96 ^ 0xdada);
    let x1 = rand_images(&mut rng, 3);
    let x2 = rand_images(&mut rng, 3);
    assert_margins(&params, &x1, &x2);

    let weights = LossWeights::default();
    let (_, grads) = xgan::objectives::discriminator_phase(&params, &x1, &x2, &weights).unwrap();
    let analytic = grads.flatten();

    // generator parameters receive nothing in the discriminator phase
    for i in encoder_indices(&params) {
        assert_eq!(analytic[i], 0.0, "discriminator phase leaked into the generator");
    }

    let loss_fn = |p: &XganParams<f64>| Ok(gan_losses(p, &x1, &x2, GanGeneratorForm::NonSaturating)?.1);
    let numeric = finite_difference_gradient(&loss_fn, &params, EPS).unwrap();
    compare(
        "gan disc",
        &analytic,
        &numeric,
        component_range(&params, "disc_1to2"),
    )
    .assert_ok();
}

struct FrozenEncoderTeacher {
    net: XganParams<f64>,
}

impl TeacherEmbed<f64> for FrozenEncoderTeacher {
    fn embed_dim(&self) -> usize {
        self.net.config.embed_dim
    }
    fn embed(&self, x: &ImageBatch<f64>) -> Result<xgan::model::EmbeddingBatch<f64>> {
        encode(&self.net, x, DomainId::D1)
    }
}

#[test]
fn teacher_gradients_match_finite_differences() {
    let params = randomized_model(117);
    let teacher = FrozenEncoderTeacher {
        net: randomized_model(118),
    };
    let mut rng = Rng::seed_from(117 ^ 0xdada);
    let x1 = rand_images(&mut rng, 3);
    let x2 = rand_images(&mut rng, 3);
    assert_margins(&params, &x1, &x2);

    let weights = LossWeights {
        w_dann: 0.0,
        w_sem: 0.0,
        w_gan: 0.0,
        w_teach: 1.0,
        gan_2to1_enabled: false,
        teach_enabled: true,
        tv_weight: 0.0,
    };
    let analytic = phase_grads_isolated(&params, Some(&teacher), &x1, &x2, &weights, &LossConfig::default());
    let loss_fn =
        |p: &XganParams<f64>| teacher_loss(p, &teacher, &x1, DomainId::D1, Distance::L2);
    let numeric = finite_difference_gradient(&loss_fn, &params, EPS).unwrap();
    compare("teach", &analytic, &numeric, 0..analytic.len()).assert_ok();
}

#[test]
fn total_variation_gradients_match_finite_differences() {
    let params = randomized_model(113);
    let mut rng = Rng::seed_from(113 ^ 0xdada);
    let x1 = rand_images(&mut rng, 2);
    let x2 = rand_images(&mut rng, 2);
    assert_margins(&params, &x1, &x2);

    let weights = LossWeights {
        w_dann: 0.0,
        w_sem: 0.0,
        w_gan: 0.0,
        w_teach: 0.0,
        gan_2to1_enabled: false,
        teach_enabled: false,
        tv_weight: 1.0,
    };
    let analytic = phase_grads_isolated(&params, None, &x1, &x2, &weights, &LossConfig::default());
    let loss_fn = |p: &XganParams<f64>| -> Result<f64> {
        let t12 = xgan::model::translate(p, &x1, DomainId::D1)?;
        let t21 = xgan::model::translate(p, &x2, DomainId::D2)?;
        Ok(0.5 * (total_variation_loss(&t12) + total_variation_loss(&t21)))
    };
    let numeric = finite_difference_gradient(&loss_fn, &params, EPS).unwrap();
    compare("tv", &analytic, &numeric, 0..analytic.len()).assert_ok();
}

#[test]
fn weight_algebra_zeroing_a_term_removes_its_gradient() {
    // gradients with a weight set to zero equal the gradients of the model
    // with that term deleted entirely
    let params = randomized_model(38);
    let mut rng = Rng::seed_from(39);
    let x1 = rand_images(&mut rng, 2);
    let x2 = rand_images(&mut rng, 2);

    let cfg = LossConfig::default();
    let base = LossWeights {
        w_dann: 0.4,
        w_sem: 0.8,
        w_gan: 0.0,
        w_teach: 0.0,
        gan_2to1_enabled: false,
        teach_enabled: false,
        tv_weight: 0.0,
    };
    let g_base = generator_phase(&params, None, &x1, &x2, &base, &cfg, EncoderPolicy::Train)
        .unwrap()
        .grads
        .flatten();

    let no_sem = LossWeights { w_sem: 0.0, ..base.clone() };
    let g_no_sem = generator_phase(&params, None, &x1, &x2, &no_sem, &cfg, EncoderPolicy::Train)
        .unwrap()
        .grads
        .flatten();
    let sem_only = LossWeights {
        w_dann: 0.0,
        ..base.clone()
    };
    let g_sem_only = generator_phase(&params, None, &x1, &x2, &sem_only, &cfg, EncoderPolicy::Train)
        .unwrap()
        .grads
        .flatten();
    let zero = LossWeights {
        w_dann: 0.0,
        w_sem: 0.0,
        ..base
    };
    let g_zero = generator_phase(&params, None, &x1, &x2, &zero, &cfg, EncoderPolicy::Train)
        .unwrap()
        .grads
        .flatten();

    // additivity: base = no_sem + sem_only - zero, elementwise
    for i in 0..g_base.len() {
        let lhs = g_base[i];
        let rhs = g_no_sem[i] + g_sem_only[i] - g_zero[i];
        let denom = lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(
            ((lhs - rhs) / denom).abs() < 1e-9,
            "param {i}: {lhs} vs {rhs}"
        );
    }
}
