//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion at full scale, including the multi-seed training
//! runs (several hours on one CPU core). `STCI_ACCEPTANCE_SKIP_TRAINING=1`
//! reports the training criteria as SKIP. The process exits non-zero on a
//! failed hard criterion only when `STCI_ACCEPTANCE_STRICT=1`.

use std::io::Write as _;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stci::attn_unet::{AttentionGate, SpatialAttention};
use stci::datagen::{generate, laplacian, neighborhood_mean, true_effects, CausalDataset, DiffusionParams, InterventionSpec};
use stci::effects::EffectEstimates;
use stci::grid::{GridSpec, RegionMask};
use stci::io::{read_dataset, write_dataset};
use stci::lfm::{Lfm, LfmConfig};
use stci::nn::gradcheck::{check_params, GradCheckReport};
use stci::nn::{Collection, Conv2d, Graph, ParamStore, Session, Tensor, Var};
use stci::stcinet::{
    batch_loss, build_weight_map, evaluate, make_variant, train, EpochRecord, Evaluation, ModelConfig, Normalizer,
    TrainedModel, Variant,
};

const GRADCHECK_TOL: f64 = 1e-3;
const GRADCHECK_MIN_PARAMS: usize = 50;
const LATE_TARGET: f64 = 0.15;
const RMSE_TARGET: f64 = 0.6;
const TRAINING_BUDGET: Duration = Duration::from_secs(3600);
const DESK_STEPS: usize = 500;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(passed: bool, detail: String) -> Self {
        Self {
            passed: Some(passed),
            detail,
        }
    }

    fn skipped(detail: &str) -> Self {
        Self {
            passed: None,
            detail: detail.into(),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_region(n: usize, m: usize, r: &mut ChaCha8Rng) -> RegionMask {
    loop {
        let (i0, j0) = (r.random_range(0..n), r.random_range(0..m));
        let (i1, j1) = (r.random_range(i0 + 1..=n), r.random_range(j0 + 1..=m));
        if let Ok(region) = RegionMask::rect(n, m, i0..i1, j0..j1) {
            return region;
        }
    }
}

fn default_dataset(steps: usize, params: &DiffusionParams, update_factor: f64, start: usize, seed: u64) -> CausalDataset {
    let grid = GridSpec::new(32, 32, steps, 1).unwrap();
    let mut spec = InterventionSpec::default_for(&grid).unwrap();
    spec.update_factor = update_factor;
    spec.start_step = start;
    generate(&grid, params, &spec, seed).unwrap()
}

fn c1_oracle_exactness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (t, n, m) = (r.random_range(1..8), r.random_range(2..17), r.random_range(2..17));
        let region = random_region(n, m, &mut r);
        let tau = Array3::from_shape_fn((t, n, m), |_| r.random_range(-10.0..10.0));
        let e = EffectEstimates::from_tau_map(tau, region.clone(), 1, 0).unwrap();
        let lhs = e.late * (n * m) as f64;
        let rhs = e.date * region.treated_count() as f64 + e.iate * region.untreated_count() as f64;
        worst = worst.max((lhs - rhs).abs());
    }
    let ident = default_dataset(60, &DiffusionParams::default(), 1.0, 0, 3);
    let oracle = true_effects(&ident, 1).unwrap();
    let oracle_zero = [oracle.date, oracle.iate, oracle.late].iter().all(|&v| v == 0.0);
    let config = ModelConfig::default();
    let model = TrainedModel::init(&config, 32, 32, Normalizer::fit(&ident)).unwrap();
    let predicted = evaluate(&model, &ident).unwrap().metrics.predicted;
    let model_zero = [predicted.date, predicted.iate, predicted.late].iter().all(|&v| v == 0.0);
    let elapsed = start.elapsed();
    Outcome::check(
        worst <= 1e-9 && oracle_zero && model_zero && elapsed < Duration::from_secs(60),
        format!(
            "partition identity max err {worst:.2e} (tol 1e-9) over 100 maps; identity oracle zero={oracle_zero}; \
             identity model zero={model_zero}; {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn brute_laplacian(f: &Array2<f64>) -> Array2<f64> {
    let (n, m) = f.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let at = |a: isize, b: isize| {
                let a = a.clamp(0, n as isize - 1) as usize;
                let b = b.clamp(0, m as isize - 1) as usize;
                f[[a, b]]
            };
            let (a, b) = (i as isize, j as isize);
            out[[i, j]] = at(a - 1, b) + at(a + 1, b) + at(a, b - 1) + at(a, b + 1) - 4.0 * f[[i, j]];
        }
    }
    out
}

fn brute_neighborhood_mean(f: &Array2<f64>, radius: usize) -> Array2<f64> {
    let (n, m) = f.dim();
    let r = radius as isize;
    let mut out = Array2::zeros((n, m));
    for i in 0..n as isize {
        for j in 0..m as isize {
            let (mut sum, mut count) = (0.0, 0usize);
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if (di, dj) != (0, 0) && a >= 0 && b >= 0 && a < n as isize && b < m as isize {
                        sum += f[[a as usize, b as usize]];
                        count += 1;
                    }
                }
            }
            out[[i as usize, j as usize]] = sum / count as f64;
        }
    }
    out
}

fn c2_stencils() -> Outcome {
    let start = Instant::now();
    let mut r = rng(202);
    let (mut lap_err, mut mean_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let (n, m) = (r.random_range(3..17), r.random_range(3..17));
        let f = Array2::from_shape_fn((n, m), |_| r.random_range(-100.0..100.0));
        let lap = laplacian(f.view()).unwrap();
        lap_err = lap.iter().zip(&brute_laplacian(&f)).fold(lap_err, |e, (a, b)| e.max((a - b).abs()));
        let radius = r.random_range(1..=(n.min(m) - 1) / 2);
        let nm = neighborhood_mean(f.view(), radius).unwrap();
        let oracle = brute_neighborhood_mean(&f, radius);
        mean_err = nm.iter().zip(&oracle).fold(mean_err, |e, (a, b)| e.max((a - b).abs()));
    }
    let elapsed = start.elapsed();
    Outcome::check(
        lap_err <= 1e-6 && mean_err <= 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "200 grids up to 16x16: laplacian max err {lap_err:.2e}, neighborhood mean max err {mean_err:.2e} \
             (tol 1e-6); {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn same_bits(a: &CausalDataset, b: &CausalDataset) -> bool {
    a.fields()
        .iter()
        .zip(b.fields().iter())
        .all(|((_, x), (_, y))| x.values.iter().zip(y.values.iter()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

fn c3_determinism() -> Outcome {
    let start = Instant::now();
    let params = DiffusionParams::default();
    let a = default_dataset(4000, &params, 0.6, 0, 7);
    let b = default_dataset(4000, &params, 0.6, 0, 7);
    let identical = same_bits(&a, &b);
    let other_seed_differs = !same_bits(&a, &default_dataset(4000, &params, 0.6, 0, 8));
    let split_at = 1000;
    let s = default_dataset(4000, &params, 0.6, split_at, 7);
    let before = |f: &Array3<f32>, g: &Array3<f32>| {
        (0..split_at).all(|t| {
            f.index_axis(ndarray::Axis(0), t)
                .iter()
                .zip(g.index_axis(ndarray::Axis(0), t).iter())
                .all(|(p, q)| p.to_bits() == q.to_bits())
        })
    };
    let split_ok = before(&s.x.values, &s.x_cf.values) && before(&s.y.values, &s.y_cf.values);
    let diverges_after = s.y.values != s.y_cf.values;
    let elapsed = start.elapsed();
    Outcome::check(
        identical && other_seed_differs && split_ok && diverges_after && elapsed < Duration::from_secs(120),
        format!(
            "T=4000 32x32: same seed bit-identical={identical}, other seed differs={other_seed_differs}, \
             factual==counterfactual before step {split_at}={split_ok}, worlds differ afterwards={diverges_after}; \
             {:.1}s (< 120s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn c4_interference_signal() -> Outcome {
    let with = true_effects(&default_dataset(4000, &DiffusionParams::default(), 0.6, 0, 0), 1).unwrap();
    let without = true_effects(
        &default_dataset(4000, &DiffusionParams::default().without_interference(), 0.6, 0, 0),
        1,
    )
    .unwrap();
    let ratio = with.iate.abs() / without.iate.abs();
    Outcome::check(
        ratio >= 2.0,
        format!(
            "oracle IATE {:.6} with spillover vs {:.6} with beta2=0: ratio {ratio:.3} (>= 2)",
            with.iate, without.iate
        ),
    )
}

fn rand_tensor(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Runs `forward` in a training session, scores it with the batched loss and
/// compares analytic against central-difference gradients for every
/// `stride`-th parameter entry.
fn gradcheck(
    store: &mut ParamStore<f64>,
    stride: usize,
    forward: impl Fn(&mut Session<f64>) -> (Var, Option<(Var, Tensor<f64>)>),
    target: &Tensor<f64>,
    w: &[f64],
) -> GradCheckReport {
    let (l1, l2) = (0.25, 0.75);
    let run = |store: &ParamStore<f64>, backward: bool| -> (f64, Option<Graph<f64>>) {
        let mut s = Session::new(store, true, 7);
        let (pred, recon) = forward(&mut s);
        let loss = batch_loss(
            s.graph.value(pred),
            target,
            recon.as_ref().map(|(r, h)| (s.graph.value(*r), h)),
            w,
            l1,
            l2,
        );
        let graph = backward.then(|| {
            let mut seeds = vec![(pred, loss.d_pred.clone())];
            if let (Some((r, _)), Some(d)) = (&recon, loss.d_recon.clone()) {
                seeds.push((*r, d));
            }
            let (mut g, _) = s.into_parts();
            g.backward(seeds);
            g
        });
        (loss.total, graph)
    };
    let (_, graph) = run(store, true);
    store.zero_grads();
    graph.unwrap().accumulate_param_grads(store);
    check_params(store, 1e-6, stride, |s| run(s, false).0)
}

fn c5_gradients() -> Outcome {
    let start = Instant::now();
    let (b, n) = (3, 8);
    let region = RegionMask::rect(n, n, 2..5, 2..5).unwrap();
    let w: Vec<f64> = build_weight_map(&region, 2.0).unwrap().w.iter().copied().collect();
    let mut r = rng(505);
    let target = rand_tensor([b, 1, n, n], &mut r);
    let input = rand_tensor([b, 2, n, n], &mut r);
    let mut reports = Vec::new();

    // Latent factor model alone: only the reconstruction term depends on it.
    {
        let mut store = ParamStore::new();
        let config = LfmConfig {
            history_len: 2,
            lstm_hidden: 2,
            mid_channels: 3,
            c_lat: 4,
            decoder_hidden: 3,
            dropout: 0.2,
        };
        let lfm = Lfm::new(config, n, n, &mut store, &mut r).unwrap();
        let hist = rand_tensor([b, 4, n, n], &mut r);
        let pred = Tensor::zeros([b, 1, n, n]);
        let report = gradcheck(
            &mut store,
            7,
            |s| {
                let h = s.graph.input(hist.clone());
                let phi = lfm.encode_graph(s, h);
                let recon = lfm.decode_graph(s, phi);
                (s.graph.input(pred.clone()), Some((recon, hist.clone())))
            },
            &target,
            &w,
        );
        reports.push(("LFM", report));
    }

    // Spatial attention between two convolutions.
    {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "a", Collection::Unet, 2, 4, 3, 1, true, &mut r);
        let sa = SpatialAttention::new(&mut store, "sa", &mut r);
        let head = Conv2d::new(&mut store, "head", Collection::Unet, 4, 1, 1, 1, true, &mut r);
        let report = gradcheck(
            &mut store,
            1,
            |s| {
                let x = s.graph.input(input.clone());
                let f = conv.forward(s, x);
                let f = s.graph.relu(f);
                let f = sa.forward(s, f);
                (head.forward(s, f), None)
            },
            &target,
            &w,
        );
        reports.push(("spatial attention", report));
    }

    // Attention gate over a fine map with a coarse gating signal.
    {
        let mut store = ParamStore::new();
        let fine = Conv2d::new(&mut store, "fine", Collection::Unet, 2, 4, 3, 1, true, &mut r);
        let coarse = Conv2d::new(&mut store, "coarse", Collection::Unet, 2, 4, 3, 2, true, &mut r);
        let gate = AttentionGate::new(&mut store, "gate", 4, 4, &mut r);
        let head = Conv2d::new(&mut store, "head", Collection::Unet, 4, 1, 1, 1, true, &mut r);
        let report = gradcheck(
            &mut store,
            3,
            |s| {
                let x = s.graph.input(input.clone());
                let xf = fine.forward(s, x);
                let g = coarse.forward(s, x);
                let gated = gate.forward(s, xf, g).unwrap();
                (head.forward(s, gated), None)
            },
            &target,
            &w,
        );
        reports.push(("attention gate", report));
    }

    // Assembled model.
    {
        let config = ModelConfig {
            base_channels: 4,
            lstm_channels: 4,
            c_lat: 4,
            lfm_lstm_channels: 2,
            lfm_mid_channels: 3,
            decoder_hidden: 3,
            history_len: 2,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let net = make_variant(&config, n, n, &mut store, &mut r).unwrap();
        let hist = rand_tensor([b, 4, n, n], &mut r);
        let report = gradcheck(
            &mut store,
            17,
            |s| {
                let c = s.graph.input(input.clone());
                let h = s.graph.input(hist.clone());
                let (pred, recon) = net.forward(s, c, h).unwrap();
                (pred, recon.map(|v| (v, hist.clone())))
            },
            &target,
            &w,
        );
        reports.push(("full model", report));
    }

    let elapsed = start.elapsed();
    let ok = reports
        .iter()
        .all(|(_, rep)| rep.checked >= GRADCHECK_MIN_PARAMS && rep.passed(GRADCHECK_TOL));
    let parts: Vec<String> = reports
        .iter()
        .map(|(name, rep)| format!("{name}: {} params, max rel err {:.2e}", rep.checked, rep.max_rel_err))
        .collect();
    Outcome::check(
        ok && elapsed < Duration::from_secs(300),
        format!(
            "{} (tol {GRADCHECK_TOL:.0e}, >= {GRADCHECK_MIN_PARAMS} params each); {:.1}s (< 300s)",
            parts.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

struct Run {
    variant: Variant,
    seed: u64,
    metrics: Result<Evaluation, String>,
}

fn train_and_score(dataset: &CausalDataset, variant: Variant, seed: u64) -> Run {
    let config = ModelConfig {
        seed,
        ..ModelConfig::default().with_variant(variant)
    };
    let metrics = train(dataset, &config)
        .and_then(|model| evaluate(&model, dataset))
        .map(|out| out.metrics)
        .map_err(|e| e.to_string());
    if let Ok(m) = &metrics {
        println!(
            "      {} seed {seed}: late_pehe {:.4} rmse {:.4} date_pehe {:.4} iate_pehe {:.4}",
            variant.label(),
            m.late_pehe,
            m.rmse,
            m.date_pehe,
            m.iate_pehe
        );
    }
    Run {
        variant,
        seed,
        metrics,
    }
}

fn mean_of(runs: &[Run], variant: Variant, f: impl Fn(&Evaluation) -> f64) -> f64 {
    let values: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|r| r.metrics.as_ref().ok().map(&f))
        .collect();
    if values.len() == SEEDS.len() {
        values.iter().sum::<f64>() / values.len() as f64
    } else {
        f64::NAN
    }
}

fn desk_dataset(interference: bool) -> CausalDataset {
    let params = if interference {
        DiffusionParams::default()
    } else {
        DiffusionParams::default().without_interference()
    };
    default_dataset(DESK_STEPS, &params, 0.6, 0, 0)
}

fn c6_pehe_targets(runs: &mut Vec<Run>) -> Outcome {
    let start = Instant::now();
    let with = desk_dataset(true);
    let without = desk_dataset(false);
    for seed in SEEDS {
        runs.push(train_and_score(&with, Variant::Full, seed));
    }
    let mut no_int = Vec::new();
    for seed in SEEDS {
        no_int.push(train_and_score(&without, Variant::Full, seed));
    }
    let elapsed = start.elapsed();
    let late = mean_of(runs, Variant::Full, |m| m.late_pehe);
    let rmse = mean_of(runs, Variant::Full, |m| m.rmse);
    let late_no = mean_of(&no_int, Variant::Full, |m| m.late_pehe);
    let rmse_no = mean_of(&no_int, Variant::Full, |m| m.rmse);
    Outcome::check(
        late <= LATE_TARGET && rmse <= RMSE_TARGET && late_no <= LATE_TARGET && elapsed <= TRAINING_BUDGET,
        format!(
            "T={DESK_STEPS}, 3 seeds: interference late_pehe {late:.4} (<= {LATE_TARGET}), rmse {rmse:.4} \
             (<= {RMSE_TARGET}); no interference late_pehe {late_no:.4} (<= {LATE_TARGET}), rmse {rmse_no:.4}; \
             {:.0}s (<= {}s)",
            elapsed.as_secs_f64(),
            TRAINING_BUDGET.as_secs()
        ),
    )
}

fn c7_ablation(runs: &mut Vec<Run>) -> Outcome {
    let with = desk_dataset(true);
    for variant in [Variant::Dagger, Variant::Na, Variant::Sa, Variant::Ag] {
        for seed in SEEDS {
            runs.push(train_and_score(&with, variant, seed));
        }
    }
    let failures: Vec<String> = runs
        .iter()
        .filter_map(|r| match &r.metrics {
            Err(e) => Some(format!("{} seed {}: {e}", r.variant.label(), r.seed)),
            Ok(m) if ![m.date_pehe, m.iate_pehe, m.late_pehe, m.rmse].iter().all(|v| v.is_finite()) => {
                Some(format!("{} seed {}: non-finite metric", r.variant.label(), r.seed))
            }
            Ok(_) => None,
        })
        .collect();
    let means: Vec<String> = Variant::ALL
        .iter()
        .map(|&v| format!("{} {:.4}", v.label(), mean_of(runs, v, |m| m.late_pehe)))
        .collect();
    let full = mean_of(runs, Variant::Full, |m| m.late_pehe);
    let na = mean_of(runs, Variant::Na, |m| m.late_pehe);
    Outcome::check(
        failures.is_empty() && full <= na,
        format!(
            "3-seed mean late_pehe: {}; full <= NA: {}{}",
            means.join(", "),
            full <= na,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join("; "))
            }
        ),
    )
}

fn c8_parameter_budget() -> Outcome {
    let model = TrainedModel::init(&ModelConfig::default(), 32, 32, Normalizer::identity()).unwrap();
    let count = model.parameter_count();
    Outcome::check(
        (200_000..=380_000).contains(&count),
        format!("default full model has {count} trainable parameters (in [200000, 380000])"),
    )
}

fn random_model_config(r: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        variant: Variant::ALL[r.random_range(0..Variant::ALL.len())],
        history_len: r.random_range(1..4),
        base_channels: r.random_range(1..5),
        lstm_channels: r.random_range(1..4),
        c_lat: r.random_range(1..4),
        lfm_lstm_channels: r.random_range(1..4),
        lfm_mid_channels: r.random_range(1..4),
        decoder_hidden: r.random_range(1..4),
        treated_weight: r.random_range(0.5..4.0),
        seed: r.random(),
        ..ModelConfig::default()
    }
}

fn c9_round_trips() -> Outcome {
    let mut r = rng(909);
    let tmp = tempfile::tempdir().unwrap();
    let mut checkpoint_ok = 0;
    for case in 0..100 {
        let config = random_model_config(&mut r);
        let n = [8, 16][r.random_range(0..2)];
        let norm = Normalizer {
            x_mean: r.random_range(-5.0..5.0),
            x_std: r.random_range(0.1..5.0),
            z_mean: r.random_range(-5.0..5.0),
            z_std: r.random_range(0.1..5.0),
            y_mean: r.random_range(-50.0..50.0),
            y_std: r.random_range(0.1..50.0),
        };
        let mut model = TrainedModel::init(&config, n, n, norm).unwrap();
        for p in model.store.iter_mut() {
            for v in p.value.data_mut() {
                *v = f32::from_bits(r.random::<u32>() & 0xbfff_ffff);
            }
        }
        model.training_log = (1..=r.random_range(0..4))
            .map(|epoch| EpochRecord {
                epoch,
                learning_rate: r.random(),
                loss: r.random(),
                lfm_loss: r.random(),
                unet_loss: r.random(),
            })
            .collect();
        let dir = tmp.path().join(format!("ck{case}"));
        model.save(&dir).unwrap();
        let back = TrainedModel::load(&dir).unwrap();
        let same_params = Collection::ALL.iter().all(|&c| {
            let a = model.store.flatten(c);
            let b = back.store.flatten(c);
            a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if same_params
            && back.config == model.config
            && back.normalizer == model.normalizer
            && back.training_log == model.training_log
        {
            checkpoint_ok += 1;
        }
    }
    let mut dataset_ok = 0;
    for case in 0..100 {
        let (n, m, t) = (r.random_range(3..13), r.random_range(3..13), r.random_range(2..25));
        let grid = GridSpec::new(n, m, t, 1).unwrap();
        let params = DiffusionParams {
            alpha: r.random_range(0.0..1.0),
            beta: r.random_range(0.0..1.0),
            gamma: r.random_range(0.0..1.0),
            beta2: r.random_range(0.0..1.0),
            interference: r.random(),
            noise_std_x: r.random_range(0.0..0.1),
            noise_std_y: r.random_range(0.0..0.1),
            ..DiffusionParams::default()
        };
        let spec = InterventionSpec::new(random_region(n, m, &mut r), r.random_range(0.0..2.0), r.random_range(0..t)).unwrap();
        let dataset = generate(&grid, &params, &spec, r.random()).unwrap();
        let dir = tmp.path().join(format!("ds{case}"));
        write_dataset(&dataset, &dir).unwrap();
        let back = read_dataset(&dir).unwrap();
        if same_bits(&dataset, &back)
            && back.grid == dataset.grid
            && back.params == dataset.params
            && back.intervention == dataset.intervention
            && back.seed == dataset.seed
        {
            dataset_ok += 1;
        }
    }
    Outcome::check(
        checkpoint_ok == 100 && dataset_ok == 100,
        format!("bitwise exact: {checkpoint_ok}/100 checkpoints, {dataset_ok}/100 datasets"),
    )
}

fn report(id: usize, name: &str, soft: bool, outcome: &Outcome) {
    let tag = match outcome.passed {
        Some(true) => "PASS",
        Some(false) if soft => "FAIL (soft)",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    println!("[{tag}] {id}. {name}: {}", outcome.detail);
    std::io::stdout().flush().ok();
}

fn main() {
    let skip_training = std::env::var("STCI_ACCEPTANCE_SKIP_TRAINING").is_ok_and(|v| v == "1");
    let strict = std::env::var("STCI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut hard_failures = 0;
    let mut record = |id: usize, name: &str, soft: bool, outcome: Outcome| {
        report(id, name, soft, &outcome);
        if outcome.passed == Some(false) && !soft {
            hard_failures += 1;
        }
    };

    record(1, "oracle exactness", false, c1_oracle_exactness());
    record(2, "stencil and pooling oracles", false, c2_stencils());
    record(3, "generator determinism and world splitting", false, c3_determinism());
    record(4, "interference signal", false, c4_interference_signal());
    record(5, "gradient checks", false, c5_gradients());
    let mut runs = Vec::new();
    if skip_training {
        record(6, "desk-scale PEHE targets", false, Outcome::skipped("STCI_ACCEPTANCE_SKIP_TRAINING=1"));
        record(7, "ablation sanity", true, Outcome::skipped("STCI_ACCEPTANCE_SKIP_TRAINING=1"));
    } else {
        record(6, "desk-scale PEHE targets", false, c6_pehe_targets(&mut runs));
        record(7, "ablation sanity", true, c7_ablation(&mut runs));
    }
    record(8, "parameter budget", false, c8_parameter_budget());
    record(9, "round trips", false, c9_round_trips());

    println!("acceptance: {hard_failures} hard criteria failed");
    if strict && hard_failures > 0 {
        std::process::exit(1);
    }
}
