use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tilscore_core::bagio::synth_cohort;
use tilscore_core::concord::{auroc, evaluate};
use tilscore_core::milnet::{backward, forward, init_params, loss_grad, Mode};
use tilscore_core::survstats::{cox_fit, harrell_c, SurvivalDataset};
use tilscore_core::{HyperParams, SynthConfig};

fn model(c: &mut Criterion) {
    let cfg = SynthConfig { n_slides: 1, tiles_min: 1250, tiles_max: 1250, ..Default::default() };
    let bag = synth_cohort(&cfg).unwrap().bags.remove(0);
    let hyper = HyperParams::default();
    let params = init_params(0, &hyper);

    let mut g = c.benchmark_group("model_1250x2048");
    g.sample_size(10);
    g.bench_function("forward_eval", |b| b.iter(|| forward(&params, &bag, Mode::Eval).unwrap().prediction));
    g.bench_function("forward_backward_train", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter(|| {
            let mode = Mode::Train { rng: &mut rng, feature_dropout: 0.4, tile_dropout: 0.1 };
            let trace = forward(&params, &bag, mode).unwrap();
            backward(&trace, &params, loss_grad(trace.prediction, 0.3)).unwrap()
        })
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 5000;
    let preds: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let labels: Vec<f64> = preds.iter().map(|p| (100.0 * p + rng.random_range(-20.0..20.0)).clamp(0.0, 100.0)).collect();
    let positive: Vec<bool> = labels.iter().map(|&l| l >= 30.0).collect();
    c.bench_function("auroc_5000", |b| b.iter(|| auroc(&preds, &positive).unwrap()));
    c.bench_function("evaluate_panel_5000", |b| b.iter(|| evaluate(&preds, &labels).unwrap()));
}

fn survival(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 500;
    let x: Vec<f64> = (0..n * 2).map(|_| rng.random_range(0.0..10.0)).collect();
    let time: Vec<f64> = (0..n).map(|i| {
        let rate = 0.02 * (-0.1 * x[2 * i] + 0.05 * x[2 * i + 1]).exp();
        -rng.random::<f64>().max(1e-12).ln() / rate
    }).collect();
    let event: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let data = SurvivalDataset::new(
        time.clone(),
        event.clone(),
        vec![
            tilscore_core::survstats::DesignColumn::numeric("a"),
            tilscore_core::survstats::DesignColumn::numeric("b"),
        ],
        x,
    )
    .unwrap();
    c.bench_function("cox_efron_500x2", |b| b.iter(|| cox_fit(&data).unwrap().loglik));
    let risk: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    c.bench_function("harrell_c_500", |b| {
        b.iter_batched(|| risk.clone(), |r| harrell_c(&time, &event, &r).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, model, metrics, survival);
criterion_main!(benches);
