use aros_bench::{default_model, uniform};
use aros_core::adgraph::Tape;
use aros_core::oodforge::{fit_class_gaussians, sample_fake_ood, Ridge, SamplerConfig};
use aros_core::redteam::{aupr, auroc, fpr95, pgd_on_score, AttackConfig};
use aros_core::stabnet::{loss_sl, LossConfig};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn rk4(c: &mut Criterion) {
    let model = default_model(1).unwrap();
    let z = uniform(64, model.dim(), 2);
    c.bench_function("rk4_integrate_b64", |b| {
        b.iter(|| model.dynamics.integrate_values(black_box(&z), false).unwrap())
    });
}

fn stability_loss(c: &mut Criterion) {
    let model = default_model(1).unwrap();
    let z = uniform(64, model.dim(), 3);
    let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
    let cfg = LossConfig::default();
    c.bench_function("loss_sl_forward_backward_b64", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let vars = model.dynamics.net.register(&mut t).unwrap();
            let raw = t.param("head.v", model.head.raw.clone());
            let w = model.head.weight_on_tape(&mut t, raw).unwrap();
            let zv = t.leaf(z.clone());
            let (loss, _) = loss_sl(&mut t, zv, &labels, &model.dynamics, &vars, w, &cfg).unwrap();
            t.backward(loss).unwrap()
        })
    });
}

fn attack(c: &mut Criterion) {
    let model = default_model(1).unwrap();
    let x = uniform(100, 2, 4);
    let is_id: Vec<bool> = (0..100).map(|i| i < 50).collect();
    let cfg = AttackConfig {
        steps: 10,
        restarts: 1,
        ..AttackConfig::default()
    };
    let mut group = c.benchmark_group("attack");
    group.sample_size(10);
    group.bench_function("pgd_on_score_n100_m10", |b| {
        b.iter(|| pgd_on_score(&model, black_box(&x), &is_id, &cfg, 5).unwrap())
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let id: Vec<f64> = uniform(1, 10_000, 6).data().to_vec();
    let ood: Vec<f64> = uniform(1, 10_000, 7).data().iter().map(|v| v + 0.3).collect();
    c.bench_function("auroc_aupr_fpr95_n20k", |b| {
        b.iter(|| {
            (
                auroc(black_box(&id), &ood).unwrap(),
                aupr(&id, &ood).unwrap(),
                fpr95(&id, &ood).unwrap(),
            )
        })
    });
}

fn sampler(c: &mut Criterion) {
    let z = uniform(400, 16, 8);
    let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
    let g = fit_class_gaussians(&z, &labels, 2, Ridge::default()).unwrap();
    let cfg = SamplerConfig {
        beta_scale: aros_core::oodforge::BetaScale::TypicalRelative,
        ..SamplerConfig::default()
    };
    c.bench_function("sample_fake_ood_d16_m200", |b| {
        b.iter(|| sample_fake_ood(&g, &cfg, 200, black_box(9)).unwrap())
    });
}

criterion_group!(benches, rk4, stability_loss, attack, metrics, sampler);
criterion_main!(benches);
