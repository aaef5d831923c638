use super::layers::{Conv, Init};
use super::*;
use crate::data::Detector;
use crate::numerics::{Graph, Tensor};

fn budget_report(label: &str, count: usize, budget: usize) {
    eprintln!("{label}: {count} params (budget {budget}, ratio {:.3})", count as f64 / budget as f64);
}

#[test]
fn single_conv_has_ten_params() {
    let mut store = ParamStore::new();
    Conv::new(&mut Init::new(&mut store, 0), "c", 1, 1, 3, 1);
    assert_eq!(count_params(&store), 10);
    assert_eq!(count_params(&ParamStore::new()), 0);
}

#[test]
fn default_unet_configs_fit_budget() {
    for det in [Detector::Zn, Detector::Zp] {
        let cfg = UNetConfig::for_detector(det);
        let net = UNet::build_unchecked(&cfg, 0).unwrap();
        budget_report(det.tag(), net.count_params(), cfg.param_budget);
        UNet::build(&cfg, 0).unwrap();
    }
}

#[test]
fn default_vae_configs_fit_budget() {
    for det in [Detector::Zn, Detector::Zp] {
        let cfg = VAEConfig::for_detector(det);
        let vae = Vae::build_unchecked(&cfg, 0).unwrap();
        budget_report(det.tag(), vae.count_params(), cfg.param_budget);
        let n = vae.count_params();
        assert!((39_000..=78_000).contains(&n), "{n}");
    }
}

#[test]
fn out_of_band_budget_rejected() {
    let mut cfg = UNetConfig::for_detector(Detector::Zn);
    cfg.param_budget = 10_000;
    assert!(matches!(UNet::build(&cfg, 0), Err(Error::ParamBudget { .. })));
    cfg.param_budget = 1_000_000;
    assert!(matches!(UNet::build(&cfg, 0), Err(Error::ParamBudget { .. })));
    let mut cfg = UNetConfig::for_detector(Detector::Zn);
    cfg.channel_multipliers = vec![1, 2];
    assert!(UNet::build(&cfg, 0).is_err());
}

fn cond(n: usize, seed: u32) -> Tensor {
    Tensor::from_fn(vec![n, 9], |i| ((i as u32 * 7 + seed * 13) % 11) as f32 / 5.0 - 1.0)
}

#[test]
fn untrained_unet_predicts_zero_with_input_shape() {
    for det in [Detector::Zn, Detector::Zp] {
        let cfg = UNetConfig::for_detector(det);
        let net = UNet::build(&cfg, 1).unwrap();
        let (h, w) = det.dims();
        let mut g = Graph::inference(crate::numerics::DType::F32);
        let x = g.constant(Tensor::zeros(vec![2, 1, h, w])).unwrap();
        let c = g.constant(cond(2, 0)).unwrap();
        let v = net.forward(&mut g, x, &[0.3, 0.9], c).unwrap();
        assert_eq!(g.shape(v), [2, 1, h, w]);
        assert!(g.value(v).data().iter().all(|&v| v == 0.0));
    }
}

/// Randomizes every parameter so the zero-initialized output layer does
/// not hide the rest of the network.
pub(crate) fn perturb(store: &mut ParamStore, seed: u64, scale: f32) {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

#[test]
fn conditioning_changes_output() {
    let cfg = UNetConfig::for_detector(Detector::Zn16);
    let mut cfg = cfg;
    cfg.param_budget = UNet::build_unchecked(&cfg, 0).unwrap().count_params();
    let mut net = UNet::build(&cfg, 2).unwrap();
    perturb(net.params_mut(), 3, 0.1);
    let run = |c: Tensor| {
        let mut g = Graph::inference(crate::numerics::DType::F32);
        let x = g.constant(Tensor::from_fn(vec![1, 1, 16, 16], |i| (i as f32 * 0.37).sin())).unwrap();
        let c = g.constant(c).unwrap();
        let v = net.forward(&mut g, x, &[0.5], c).unwrap();
        g.value(v).clone()
    };
    let a = run(cond(1, 0));
    let b = run(cond(1, 1));
    assert!(a.max_abs_diff(&b) >= 1e-6);
    // pure function of its inputs
    assert_eq!(a, run(cond(1, 0)));
}

#[test]
fn vae_latent_shapes() {
    let cases = [(Detector::Zn, (11, 11)), (Detector::Zp, (14, 8)), (Detector::Zn16, (4, 4))];
    for (det, latent) in cases {
        let cfg = VAEConfig::for_detector(det);
        assert_eq!(cfg.latent_dims(), latent);
        let vae = Vae::build_unchecked(&cfg, 0).unwrap();
        let (h, w) = det.dims();
        let mut g = Graph::inference(crate::numerics::DType::F32);
        let x = g.constant(Tensor::from_fn(vec![2, 1, h, w], |i| (i % 5) as f32)).unwrap();
        let (mu, logvar) = vae.encode(&mut g, x).unwrap();
        assert_eq!(g.shape(mu), [2, cfg.latent_channels, latent.0, latent.1]);
        assert_eq!(g.shape(logvar), g.shape(mu));
        let y = vae.decode(&mut g, mu).unwrap();
        assert_eq!(g.shape(y), [2, 1, h, w]);
    }
    assert_eq!(VAEConfig::for_detector(Detector::Zp).padded_dims(), (56, 32));
}

#[test]
fn vae_rejects_wrong_input() {
    let vae = Vae::build_unchecked(&VAEConfig::for_detector(Detector::Zn), 0).unwrap();
    let mut g = Graph::inference(crate::numerics::DType::F32);
    let x = g.constant(Tensor::zeros(vec![1, 1, 56, 30])).unwrap();
    assert!(matches!(vae.encode(&mut g, x), Err(Error::Shape { .. })));
}

fn sample_checkpoint() -> ModelCheckpoint {
    let cfg = VAEConfig::for_detector(Detector::Zp);
    let vae = Vae::build(&cfg, 5).unwrap();
    let mut ck = ModelCheckpoint::new(ModelKind::Vae, Detector::Zp, &cfg, vae.params().clone(), 5).unwrap();
    ck.metadata.epochs = 3;
    ck.metadata.best_val_wasserstein = Some(1.25);
    ck
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ck = sample_checkpoint();
    let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
    assert_eq!(back, ck);
    for ((_, _, a), (_, _, b)) in ck.params.iter().zip(back.params.iter()) {
        let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
    let cfg: VAEConfig = back.config_as().unwrap();
    let mut vae = Vae::build_unchecked(&cfg, 0).unwrap();
    vae.load_params(back.params).unwrap();
}

#[test]
fn checkpoint_corruption_detected() {
    let bytes = encode_checkpoint(&sample_checkpoint()).unwrap();
    let mut bad = bytes.clone();
    let i = bad.len() - 100;
    bad[i] ^= 0x40;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Integrity(_))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 9]), Err(Error::Integrity(_))));
    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(decode_checkpoint(&future), Err(Error::Version { found, .. }) if found == FORMAT_VERSION + 1));
    assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Format(_))));
}

#[test]
fn mismatched_params_rejected() {
    let mut vae = Vae::build_unchecked(&VAEConfig::for_detector(Detector::Zn), 0).unwrap();
    let other = Vae::build_unchecked(&VAEConfig::for_detector(Detector::Zn16), 0).unwrap();
    let mut cfg = VAEConfig::for_detector(Detector::Zn);
    cfg.latent_channels = 3;
    let wrong = Vae::build_unchecked(&cfg, 0).unwrap();
    assert!(vae.load_params(wrong.params().clone()).is_err());
    // same architecture, other image size: identical tensors, loads fine
    vae.load_params(other.params().clone()).unwrap();
}
