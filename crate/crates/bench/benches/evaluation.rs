use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctxhead::dataio::{generate_synthetic, SceneDetections, SynthConfig, CUE};
use ctxhead::evalkit::evaluate;
use ctxhead::geom::nms;
use ctxhead::pipeline::{scene_detections, ApEvaluator};

fn bench(c: &mut Criterion) {
    let scenes = generate_synthetic(&SynthConfig {
        train_scenes: 0,
        validation_scenes: 200,
        test_scenes: 0,
        ..SynthConfig::default()
    })
    .unwrap()
    .validation;
    let scores: Vec<Vec<f64>> = scenes
        .iter()
        .map(|s| s.candidates.iter().map(|c| c.descriptor[CUE]).collect())
        .collect();

    let mut group = c.benchmark_group("nms");
    for s in scenes.iter().take(1) {
        let boxes: Vec<_> = s.candidates.iter().map(|c| (c.bbox, c.descriptor[CUE])).collect();
        group.bench_with_input(BenchmarkId::from_parameter(boxes.len()), &boxes, |b, boxes| {
            b.iter(|| nms(boxes, 0.3))
        });
    }
    group.finish();

    let ev = ApEvaluator::new(&scenes).unwrap();
    let mut group = c.benchmark_group("average_precision");
    // both include the final suppression, as one calibration step does
    group.bench_function("detect_then_evaluate_200_scenes", |b| {
        b.iter(|| {
            let dets: Vec<SceneDetections> = scenes
                .iter()
                .zip(&scores)
                .map(|(s, sc)| SceneDetections {
                    scene_id: s.scene_id.clone(),
                    detections: scene_detections(s, sc),
                })
                .collect();
            evaluate(&scenes, &dets).unwrap()
        })
    });
    group.bench_function("fast_evaluator_200_scenes", |b| b.iter(|| ev.ap(&scores)));
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
