use criterion::{black_box, criterion_group, criterion_main, Criterion};

use mxlab_bench::{bench_input, bench_net, rng};
use mxlab_core::attacks::{
    deepsloth_linf, percentile, project_l1_ball, AttackConfig, PerturbationBudget,
    TargetDistribution,
};
use mxlab_core::metrics::{build_eec, efficacy};
use mxlab_core::policy::{adaptive_infer, ExitPolicy, InferenceRecord, StopCriterion};
use mxlab_core::tensor::Tensor;
use rand::Rng;

fn forward_and_backward(c: &mut Criterion) {
    let net = bench_net(1);
    let x = bench_input(2);
    c.bench_function("forward_all_exits", |b| {
        b.iter(|| net.forward_all_exits(black_box(&x), false).unwrap())
    });

    let target = TargetDistribution::uniform(8);
    let exits = vec![0usize, 1, 2];
    c.bench_function("slowdown_gradient", |b| {
        b.iter(|| {
            mxlab_core::attacks::slowdown_gradient(&net, black_box(&x), &target, &exits).unwrap()
        })
    });
}

fn attack_iteration(c: &mut Criterion) {
    let net = bench_net(3);
    let x = bench_input(4);
    let budget = PerturbationBudget::linf(0.03);
    let cfg = AttackConfig {
        iterations: 1,
        ..AttackConfig::deepsloth_linf_standard(0.03)
    };
    let targets = vec![TargetDistribution::uniform(8)];
    c.bench_function("deepsloth_linf_one_iteration", |b| {
        b.iter(|| {
            deepsloth_linf(
                &net,
                std::slice::from_ref(black_box(&x)),
                &targets,
                &budget,
                &cfg,
            )
            .unwrap()
        })
    });
}

fn inference_and_metrics(c: &mut Criterion) {
    let net = bench_net(5);
    let x = bench_input(6);
    let policy = ExitPolicy::shared(StopCriterion::Confidence, 0.8, net.num_exits());
    c.bench_function("adaptive_infer", |b| {
        b.iter(|| adaptive_infer(&net, &policy, black_box(&x)).unwrap())
    });

    let mut r = rng(7);
    let records: Vec<InferenceRecord> = (0..10_000)
        .map(|_| InferenceRecord {
            exit_index: 0,
            cost_fraction: r.gen_range(0.0..=1.0),
            predicted_label: 0,
            score: 0.0,
        })
        .collect();
    c.bench_function("build_eec_and_efficacy_10k", |b| {
        b.iter(|| {
            let curve = build_eec(black_box(&records), 1001).unwrap();
            efficacy(&curve)
        })
    });
}

fn projections(c: &mut Criterion) {
    let mut r = rng(8);
    let v: Vec<f64> = (0..4096).map(|_| r.gen_range(-1.0..1.0)).collect();
    c.bench_function("l1_projection_4096", |b| {
        b.iter(|| {
            let mut w = v.clone();
            project_l1_ball(&mut w, 8.0);
            w
        })
    });
    c.bench_function("percentile_4096", |b| {
        b.iter(|| percentile(black_box(&v), 99.0))
    });
    let _ = Tensor::zeros(vec![1]);
}

criterion_group!(
    benches,
    forward_and_backward,
    attack_iteration,
    inference_and_metrics,
    projections
);
criterion_main!(benches);
