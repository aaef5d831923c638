use super::*;
use crate::data::{split_dataset, synth_generate, SynthConfig};
use proptest::prelude::*;

/// Velocity stub: row `i` of a batch (identified by its 1-dim condition
/// value) always gets `v[i]`, whatever the state and time.
struct ConstStub {
    v: Vec<f32>,
    len: usize,
}

impl VelocityModel for ConstStub {
    fn state_shape(&self) -> Vec<usize> {
        vec![self.len]
    }
    fn cond_dim(&self) -> usize {
        1
    }
    fn velocity(&self, g: &mut Graph, _x: Var, _t: &[f32], cond: Var) -> Result<Var> {
        let idx: Vec<usize> = g.value(cond).data().iter().map(|&c| c as usize).collect();
        let mut out = Vec::with_capacity(idx.len() * self.len);
        for i in idx {
            out.extend_from_slice(&self.v[i * self.len..(i + 1) * self.len]);
        }
        g.constant(Tensor::new(vec![out.len() / self.len, self.len], out)?)
    }
}

/// Always predicts zero.
struct ZeroStub(usize);

impl VelocityModel for ZeroStub {
    fn state_shape(&self) -> Vec<usize> {
        vec![self.0]
    }
    fn cond_dim(&self) -> usize {
        1
    }
    fn velocity(&self, g: &mut Graph, x: Var, _t: &[f32], _c: Var) -> Result<Var> {
        g.scale(x, 0.0)
    }
}

struct NanStub;

impl VelocityModel for NanStub {
    fn state_shape(&self) -> Vec<usize> {
        vec![2]
    }
    fn cond_dim(&self) -> usize {
        1
    }
    fn velocity(&self, g: &mut Graph, x: Var, t: &[f32], _c: Var) -> Result<Var> {
        if t[0] > 0.4 {
            g.scale(x, f32::NAN)
        } else {
            g.scale(x, 1.0)
        }
    }
}

fn index_cond(n: usize) -> Tensor {
    Tensor::from_fn(vec![n, 1], |i| i as f32)
}

fn dyadic(n: usize, seed: u64) -> Vec<f32> {
    use rand::Rng;
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.gen_range(-4096i32..4096) as f32 / 1024.0).collect()
}

#[test]
fn interpolate_examples() {
    let x0 = Tensor::new(vec![2], vec![0.0, 2.0]).unwrap();
    let x1 = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
    assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
    assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
    assert_eq!(interpolate(&x0, &x1, 0.5).unwrap().data(), [1.0, 1.0]);
    assert!(interpolate(&x0, &x1, 1.5).is_err());
    assert!(interpolate(&x0, &Tensor::zeros(vec![3]), 0.5).is_err());
}

#[test]
fn target_velocity_examples() {
    let a = Tensor::new(vec![1], vec![0.0]).unwrap();
    let b = Tensor::new(vec![1], vec![3.0]).unwrap();
    assert_eq!(target_velocity(&a, &b).unwrap().data(), [3.0]);
    assert!(target_velocity(&b, &b).unwrap().data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn path_identity(seed in any::<u64>(), t in 0.0f32..=1.0) {
        let mut rng = seeded(seed);
        let x0 = Tensor::from_fn(vec![64], |_| StandardNormal.sample(&mut rng));
        let x1 = Tensor::from_fn(vec![64], |_| StandardNormal.sample(&mut rng));
        let xt = interpolate(&x0, &x1, t).unwrap();
        let v = target_velocity(&x0, &x1).unwrap();
        for i in 0..64 {
            let lhs = xt.data()[i] + (1.0 - t) * v.data()[i];
            let scale = x0.data()[i].abs().max(x1.data()[i].abs()).max(1.0);
            prop_assert!((lhs - x1.data()[i]).abs() <= 4.0 * f32::EPSILON * scale);
        }
    }
}

#[test]
fn schedule_steps_sum_to_one() {
    for n in 1..=300 {
        let s = FMSchedule::uniform(n).unwrap();
        assert_eq!(s.dts().iter().sum::<f64>(), 1.0, "n = {n}");
        assert_eq!(s.t_grid().len(), n + 1);
        assert_eq!(*s.t_grid().last().unwrap(), 1.0);
        assert!(s.t_grid().windows(2).all(|w| w[0] < w[1]));
    }
    assert!(FMSchedule::uniform(0).is_err());
}

#[test]
fn constant_velocity_euler_is_exact() {
    let (n, len) = (19, 12);
    let x0 = dyadic(n * len, 1);
    let x1 = dyadic(n * len, 2);
    let v: Vec<f32> = x1.iter().zip(&x0).map(|(b, a)| b - a).collect();
    let stub = ConstStub { v, len };
    let start = Tensor::new(vec![n, len], x0).unwrap();
    for steps in [1, 2, 3, 7, 11, 50, 97] {
        let out = euler_integrate(&stub, &start, &index_cond(n), &FMSchedule::uniform(steps).unwrap(), DType::F32).unwrap();
        assert_eq!(out.data(), x1.as_slice(), "steps = {steps}");
    }
}

#[test]
fn one_step_adds_the_velocity() {
    let (n, len) = (5, 3);
    let x0 = dyadic(n * len, 3);
    let v = dyadic(n * len, 4);
    let out = euler_integrate(
        &ConstStub { v: v.clone(), len },
        &Tensor::new(vec![n, len], x0.clone()).unwrap(),
        &index_cond(n),
        &FMSchedule::uniform(1).unwrap(),
        DType::F32,
    )
    .unwrap();
    let expect: Vec<f32> = x0.iter().zip(&v).map(|(a, b)| a + b).collect();
    assert_eq!(out.data(), expect.as_slice());
}

#[test]
fn nan_velocity_signals_divergence() {
    let r = euler_sample(&NanStub, &index_cond(3), &FMSchedule::uniform(4).unwrap(), &mut seeded(0), DType::F32);
    assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
}

#[test]
fn sampling_is_deterministic_and_mode_independent() {
    let len = 6;
    let stub = ConstStub { v: dyadic(40 * len, 5), len };
    let s = FMSchedule::uniform(7).unwrap();
    let a = euler_sample(&stub, &index_cond(40), &s, &mut seeded(9), DType::F32).unwrap();
    let b = euler_sample(&stub, &index_cond(40), &s, &mut seeded(9), DType::F32).unwrap();
    assert_eq!(a, b);
    par::set_sequential(true);
    let c = euler_sample(&stub, &index_cond(40), &s, &mut seeded(9), DType::F32).unwrap();
    par::set_sequential(false);
    assert_eq!(a, c);
}

#[test]
fn oracle_net_has_zero_loss() {
    let (n, len) = (16, 10);
    let x1 = Tensor::new(vec![n, len], dyadic(n * len, 6)).unwrap();
    let draw = CfmDraw::sample(n, len, &mut seeded(7));
    let v: Vec<f32> = x1.data().iter().zip(&draw.x0).map(|(a, b)| a - b).collect();
    let loss = cfm_loss(&ConstStub { v, len }, &x1, &index_cond(n), &mut seeded(7)).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn zero_net_on_zero_data_has_zero_loss() {
    let mut g = Graph::inference(DType::F32);
    let draw = CfmDraw { t: vec![0.2, 0.9], x0: vec![0.0; 8] };
    let l = record_cfm_loss(&mut g, &ZeroStub(4), &[0.0; 8], &[0.0, 1.0], &draw, 8.0).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
    assert!(cfm_loss(&ZeroStub(4), &Tensor::zeros(vec![1, 4]), &Tensor::zeros(vec![2, 1]), &mut seeded(0)).is_err());
}

#[test]
fn zero_net_loss_matches_monte_carlo_oracle() {
    // E‖x1 − x0‖² per value = Var(x1) + Var(x0) = 2 for unit-variance data
    let (n, len) = (10_000, 4);
    let mut rng = seeded(11);
    let x1 = Tensor::from_fn(vec![n, len], |_| StandardNormal.sample(&mut rng));
    let loss = cfm_loss(&ZeroStub(len), &x1, &Tensor::zeros(vec![n, 1]), &mut seeded(12)).unwrap();
    assert!((loss - 2.0).abs() < 0.1, "{loss}");
}

fn tiny_unet(det: Detector) -> UNetConfig {
    let mut cfg = UNetConfig::for_detector(det);
    cfg.base_channels = 4;
    cfg.channel_multipliers = vec![1, 2];
    cfg.num_down_levels = 1;
    cfg.time_embed_dim = 8;
    cfg.embed_hidden = 16;
    cfg.cond_token_dim = 4;
    cfg.attention_levels = vec![1];
    cfg.norm_groups = 2;
    cfg.param_budget = UNet::build_unchecked(&cfg, 0).unwrap().count_params();
    cfg
}

fn smoke_config() -> FMTrainConfig {
    FMTrainConfig {
        epochs: 2,
        batch_size: 32,
        micro_batch: 16,
        val_steps: 3,
        val_limit: Some(16),
        ..Default::default()
    }
}

#[test]
fn training_smoke_and_determinism() {
    let ds = synth_generate(Detector::Zn16, 96, 1, &SynthConfig::default()).unwrap();
    let split = split_dataset(ds.len(), 2).unwrap();
    let cfg = smoke_config();
    let a = train_fm(&ds, &split, &tiny_unet(Detector::Zn16), &cfg).unwrap();
    assert_eq!(a.outcome.trace.len(), 2);
    assert!(a.outcome.trace.iter().all(|r| r.loss.is_finite() && r.val_wasserstein.is_finite()));
    let b = train_fm(&ds, &split, &tiny_unet(Detector::Zn16), &cfg).unwrap();
    assert_eq!(a.outcome.trace, b.outcome.trace);
    assert_eq!(a.checkpoint, b.checkpoint);
    let csv = trace_csv(&a.outcome.trace);
    assert!(csv.starts_with("epoch,loss,val_wasserstein\n"));
    assert_eq!(csv.lines().count(), 3);

    // checkpoint reloads into an identical sampler
    let back = PixelFm::from_checkpoint(&a.checkpoint).unwrap();
    let feats: Vec<_> = split.test.iter().map(|&i| ds.features()[i]).collect();
    let x = a.model.sample_images(&feats, 3, 4, DType::F32).unwrap();
    assert_eq!(x, back.sample_images(&feats, 3, 4, DType::F32).unwrap());
    assert!(x.iter().all(|im| im.pixels.len() == 256));
}

#[test]
fn training_learns_a_simple_target() {
    // constant data: the net only has to output x1 − x0, so the loss drops
    let len = 4;
    let mut net = MlpVelocity(Mlp::build(&crate::model::MlpConfig { input_dim: len, cond_dim: 1, time_embed_dim: 8, hidden: 32, depth: 2, output_dim: len }, 0).unwrap());
    let n = 256;
    let x1: Vec<f32> = (0..n * len).map(|i| if i % 2 == 0 { 1.5 } else { -0.5 }).collect();
    let cond = vec![0.0; n];
    let cfg = FMTrainConfig { epochs: 30, batch_size: 64, adam: AdamConfig { lr: 3e-3, ..Default::default() }, ..smoke_config() };
    let out = train_velocity(&mut net, &x1, &cond, &cfg, |_, e| Ok(-(e as f64))).unwrap();
    let first = out.trace.first().unwrap().loss;
    let last = out.trace.last().unwrap().loss;
    assert!(last < 0.6 * first, "{first} -> {last}");
    // the best (lowest) validation score is the last epoch here
    assert_eq!(out.best_epoch, 29);
}

#[test]
fn diverging_validation_never_selected() {
    let mut net = MlpVelocity(Mlp::build(&crate::model::MlpConfig { input_dim: 2, cond_dim: 1, time_embed_dim: 4, hidden: 8, depth: 1, output_dim: 2 }, 0).unwrap());
    let cfg = FMTrainConfig { epochs: 3, batch_size: 8, ..smoke_config() };
    let scores = [5.0, f64::INFINITY, 7.0];
    let out = train_velocity(&mut net, &[0.5; 32], &[0.0; 16], &cfg, |_, e| Ok(scores[e])).unwrap();
    assert_eq!(out.best_epoch, 0);
    let all_bad = train_velocity(&mut net, &[0.5; 32], &[0.0; 16], &cfg, |_, _| Ok(f64::NAN));
    assert!(matches!(all_bad, Err(Error::Diverged(_))));
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let mut net = MlpVelocity(Mlp::build(&crate::model::MlpConfig { input_dim: 2, cond_dim: 1, time_embed_dim: 4, hidden: 8, depth: 2, output_dim: 2 }, 0).unwrap());
    let cfg = FMTrainConfig { epochs: 50, batch_size: 8, adam: AdamConfig { lr: 1e30, ..Default::default() }, ..smoke_config() };
    let r = train_velocity(&mut net, &[1e3; 64], &[0.0; 32], &cfg, |_, _| Ok(1.0));
    assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
}

#[test]
fn constant_stub_sweep_is_flat() {
    let ds = synth_generate(Detector::Zn16, 40, 3, &SynthConfig::default()).unwrap();
    let rows: Vec<usize> = (0..20).collect();
    let other: Vec<usize> = (20..40).collect();
    let real = channels_of(&ds, &rows);
    let target = image_states(&ds, &other);
    let len = Detector::Zn16.pixels();
    let rows_n = rows.len();
    let rows_sweep = sweep_steps(&real, &[1, 2, 3, 5, 7, 9, 11, 15, 20, 50], 2, |steps, seed| {
        let x0: Vec<f32> = {
            let mut rng = seeded(seed);
            (0..rows_n * len).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let v = target.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let out = euler_integrate(
            &ConstStub { v, len },
            &Tensor::new(vec![rows_n, len], x0).unwrap(),
            &index_cond(rows_n),
            &FMSchedule::uniform(steps)?,
            DType::F32,
        )?;
        Ok(states_to_images(Detector::Zn16, &out.reshape(vec![rows_n, 1, 16, 16])?)?.iter().map(extract_channels).collect())
    })
    .unwrap();
    let w0 = rows_sweep[0].wasserstein;
    assert!(w0 > 0.0);
    for r in &rows_sweep {
        assert!((r.wasserstein - w0).abs() <= 1e-9 && (r.mae - rows_sweep[0].mae).abs() <= 1e-9, "{r:?}");
    }
    assert_eq!(sweep_csv(&rows_sweep).lines().count(), 11);
}
