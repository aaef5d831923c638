//! End-to-end pixel-space generation with the data-parallel path on and off.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use zdcflow::data::{split_dataset, synth_generate, Detector, PreprocStats, SynthConfig};
use zdcflow::flow_matching::PixelFm;
use zdcflow::model::{UNet, UNetConfig};
use zdcflow::numerics::DType;
use zdcflow::par;

fn sampling(c: &mut Criterion) {
    let det = Detector::Zn16;
    let ds = synth_generate(det, 256, 0, &SynthConfig::default()).unwrap();
    let split = split_dataset(ds.len(), 0).unwrap();
    let mut cfg = UNetConfig::for_detector(det);
    cfg.base_channels = 8;
    let model = PixelFm {
        unet: UNet::build_unchecked(&cfg, 0).unwrap(),
        preproc: PreprocStats::fit(&ds, &split).unwrap(),
        detector: det,
    };
    let feats = &ds.features()[..64];
    let mut group = c.benchmark_group("pixel_sample_b64");
    group.sample_size(10);
    for (steps, precision) in [(11, DType::F32), (11, DType::F16), (50, DType::F32)] {
        for (name, seq) in [("parallel", false), ("sequential", true)] {
            par::set_sequential(seq);
            let id = BenchmarkId::new(format!("{steps}_steps_{}", precision.name()), name);
            group.bench_function(id, |b| b.iter(|| model.sample_images(feats, steps, 0, precision).unwrap()));
        }
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, sampling);
criterion_main!(benches);
