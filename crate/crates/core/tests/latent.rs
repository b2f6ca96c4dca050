use djscc_autodiff::Tensor;
use djscc_core::latent::{train_latent_codec, LatentCodec, LatentConfig};
use djscc_core::metrics::psnr;
use djscc_core::synth;
use djscc_core::train::{moving_average, TrainConfig};

#[test]
fn shape_contract_and_determinism() {
    let codec = LatentCodec::new(LatentConfig::default(), 1).unwrap();
    let data = synth::generate(2, 32, 1, "x").unwrap();
    let z = codec.encode_latent(&data.images).unwrap();
    assert_eq!(z.shape(), &[2, 4, 4, 4]);
    assert_eq!(z, codec.encode_latent(&data.images).unwrap());
    let x = codec.decode_latent(&z).unwrap();
    assert_eq!(x.shape(), data.images.shape());
    assert!(x.is_finite());
    assert!(codec.encode_latent(&Tensor::zeros(&[1, 3, 20, 20])).is_err());
    assert!(codec.decode_latent(&Tensor::zeros(&[1, 3, 4, 4])).is_err());
}

#[test]
fn zero_lr_leaves_params() {
    let data = synth::generate(8, 32, 2, "x").unwrap();
    let mut codec = LatentCodec::new(LatentConfig::default(), 2).unwrap();
    let before = codec.params.checksum(|n| n != "latent.scale");
    let mut cfg = TrainConfig::new(3, 4, 0.0, 1);
    cfg.lr_floor = 0.0;
    train_latent_codec(&mut codec, &data, &cfg).unwrap();
    assert_eq!(codec.params.checksum(|n| n != "latent.scale"), before);
}

#[test]
fn single_batch_overfit_with_monotone_average() {
    let data = synth::generate(4, 32, 3, "x").unwrap();
    let mut codec = LatentCodec::new(LatentConfig::default(), 3).unwrap();
    let mut cfg = TrainConfig::new(1500, 4, 5e-4, 3);
    cfg.lr_floor = 0.02;
    let report = train_latent_codec(&mut codec, &data, &cfg).unwrap();
    assert!(report.final_eval < 1e-3, "final eval {}", report.final_eval);
    let ma = moving_average(&report.losses, 100);
    let worst = ma.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max);
    assert!(ma.windows(2).all(|w| w[1] <= w[0]), "largest increase {worst:e}");
    // The scaled codec still reconstructs.
    let z = codec.encode_latent(&data.images).unwrap();
    let x = codec.decode_latent(&z).unwrap();
    assert!(psnr(&data.images, &x, 2.0).unwrap() > 28.0);
}
