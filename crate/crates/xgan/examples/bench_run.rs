// scratch: full benchmark run + evaluation for weight tuning
use xgan::cli::build_synthetic_sets;
use xgan::config::RunConfig;
use xgan::domains::StyleId;
use xgan::evalkit::{self, EvalData};
use xgan::trainer::{train, TrainMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mode = args.get(3).map(|s| s.as_str()).unwrap_or("full_xgan");
    let w_dann: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let w_sem: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let w_gan: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.25);

    let mut cfg = RunConfig::benchmark();
    cfg.train.total_steps = steps;
    cfg.train.seed = seed;
    cfg.train.mode = TrainMode::parse(mode).unwrap();
    cfg.train.weights.w_dann = w_dann;
    cfg.train.weights.w_sem = w_sem;
    cfg.train.weights.w_gan = w_gan;

    let (schema, d1, d2) = build_synthetic_sets(&cfg).unwrap();

    // probe cache keyed by supervised settings
    let probe_path = std::env::temp_dir().join("xgan_bench_probe_b.bin");
    let probe = if probe_path.is_file() {
        evalkit::load_probe(&probe_path, StyleId::StyleB).unwrap()
    } else {
        let t0 = std::time::Instant::now();
        let p = evalkit::train_probe(&cfg.model, &d2.train.images, &d2.train.labels, &schema, StyleId::StyleB, &cfg.supervised).unwrap();
        println!("probe trained in {:.0?}: {:?}", t0.elapsed(), p.held_out_accuracy);
        evalkit::save_probe(&p, &cfg.model, &probe_path).unwrap();
        p
    };
    println!("probe accuracy: {:?} (min {:.3})", probe.held_out_accuracy, probe.min_accuracy());

    let t0 = std::time::Instant::now();
    let out = train::<f32>(&cfg.model, &cfg.train, &d1.train.images, &d2.train.images, None, &mut |_| Ok(())).unwrap();
    println!("{steps} steps ({mode}, seed {seed}, wd {w_dann} ws {w_sem} wg {w_gan}) in {:.0?}", t0.elapsed());
    let at = |target: u64| out.metrics.iter().find(|r| r.step == target);
    if let (Some(first), Some(last)) = (at(10), out.metrics.last()) {
        println!("rec d1: step10 {:.3} -> {:.3} ({:.1}% drop)", first.report.rec_1, last.report.rec_1,
            100.0 * (1.0 - last.report.rec_1 / first.report.rec_1));
        println!("rec d2: step10 {:.3} -> {:.3} ({:.1}% drop)", first.report.rec_2, last.report.rec_2,
            100.0 * (1.0 - last.report.rec_2 / first.report.rec_2));
        println!("last: dann {:.3} sem {:.4}/{:.4} gg {:.3} gd {:.3}",
            last.report.dann, last.report.sem_1to2, last.report.sem_2to1, last.report.gan_gen, last.report.gan_disc);
    }

    let data = EvalData { schema: &schema, test1: &d1.test, test2: &d2.test, probe_d2: &probe };
    let report = evalkit::evaluate(&out.state.params, &data, cfg.train.loss_cfg.sem_distance, mode, seed, "scratch").unwrap();
    println!("confusion {:.3}  sem {:.4}/{:.4}  rec {:.3}/{:.3}  tv {:.5}",
        report.domain_confusion, report.sem_distance_1to2, report.sem_distance_2to1,
        report.rec_error_d1, report.rec_error_d2, report.translation_tv_1to2);
    println!("preservation: macro {:.4} vs chance {:.4}", report.preservation_1to2.macro_mean, report.chance_baseline.macro_mean);
    for ((name, rate), (_, ch)) in report.preservation_1to2.per_attribute.iter().zip(report.chance_baseline.per_attribute.iter()) {
        println!("   {name:<12} {rate:.4} (chance {ch:.4})");
    }
    // grid for visual inspection
    let grid = std::env::temp_dir().join(format!("xgan_grid_{mode}_{seed}.png"));
    let idx: Vec<usize> = (0..8).collect();
    evalkit::sample_grid(&out.state.params, &d1.test.images.select(&idx), xgan::model::DomainId::D1, &grid, 4).unwrap();
    println!("grid: {}", grid.display());
}
