use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use stec_core::codec::{CodingMode, ImageCodec};
use stec_core::energy_compaction::{estimate_bk_probe, BkMethod, EnergyProfile};
use stec_core::metrics::{ms_ssim, DistortionKind};
use stec_core::synth::{toy_image, toy_patches, translating_sequence};
use stec_core::training::{train, LossConfig, TrainSchedule};
use stec_core::transforms::{analyze, synthesize};
use stec_core::video::{encode_sequence, interpolate, InterpolatorConfig, SchedulerConfig};
use stec_core::{ArchitectureConfig, Model, ModelParams};

fn gray_model() -> Model {
    let cfg = ArchitectureConfig {
        image_channels: 1,
        ..ArchitectureConfig::default()
    };
    Model::new(cfg.clone(), ModelParams::init(&cfg, 1).unwrap()).unwrap()
}

fn transforms(c: &mut Criterion) {
    let model = gray_model();
    let img = toy_image(64, 64, 1, 1).unwrap();
    let y = analyze(&img, &model.params, &model.config).unwrap();
    c.bench_function("analyze 64x64", |b| {
        b.iter(|| analyze(black_box(&img), &model.params, &model.config).unwrap())
    });
    c.bench_function("synthesize 64x64", |b| {
        b.iter(|| synthesize(black_box(&y), &model.params, &model.config).unwrap())
    });
}

fn coding(c: &mut Criterion) {
    let codec = ImageCodec::new(gray_model());
    let img = toy_image(64, 64, 1, 2).unwrap();
    let enc = codec.encode(&img, CodingMode::Intra).unwrap();
    c.bench_function("encode image 64x64", |b| {
        b.iter(|| codec.encode(black_box(&img), CodingMode::Intra).unwrap())
    });
    c.bench_function("decode image 64x64", |b| {
        b.iter(|| codec.decode(black_box(&enc.payload), 64, 64, CodingMode::Intra).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let x = toy_image(64, 64, 3, 3).unwrap();
    let y = toy_image(64, 64, 3, 4).unwrap();
    c.bench_function("ms-ssim 64x64 rgb", |b| b.iter(|| ms_ssim(black_box(&x), black_box(&y)).unwrap()));
}

fn energy(c: &mut Criterion) {
    let model = gray_model();
    let batch = toy_patches(8, 32, 1, 5).unwrap();
    c.bench_function("B_k probe", |b| {
        b.iter(|| estimate_bk_probe(&model.params, &model.config, 8).unwrap())
    });
    c.bench_function("energy profile", |b| {
        b.iter(|| EnergyProfile::measure(black_box(&batch), &model.params, &model.config, BkMethod::ConstantProbe, 8).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let model = gray_model();
    let patches = toy_patches(16, 32, 1, 6).unwrap();
    let loss = LossConfig::new(8.0, 0.001, DistortionKind::MsSsim).unwrap();
    let sched = TrainSchedule {
        total_iters: 5,
        phase1_max_iters: 3,
        learning_rate: 1e-3,
        batch_size: 8,
        ..TrainSchedule::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("5 iterations, batch 8 of 32x32", |b| {
        b.iter_batched(
            || model.params.clone(),
            |p| train(&patches, &model.config, &p, &loss, &sched).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn video(c: &mut Criterion) {
    let seq = translating_sequence(64, 64, 1, 9, 1, 7).unwrap();
    let f = seq.frames();
    let interp = InterpolatorConfig::default();
    c.bench_function("motion-compensated interpolation 64x64", |b| {
        b.iter(|| interpolate(black_box(&f[0]), black_box(&f[8]), &interp).unwrap())
    });
    let codec = ImageCodec::new(gray_model());
    let mut group = c.benchmark_group("video");
    group.sample_size(10);
    group.bench_function("encode 9 frames 64x64", |b| {
        b.iter(|| encode_sequence(black_box(&seq), &codec, &SchedulerConfig::default(), &interp).unwrap())
    });
    group.finish();
}

criterion_group!(benches, transforms, coding, metrics, energy, training, video);
criterion_main!(benches);
