use djscc_autodiff::Tensor;
use djscc_core::channel::{self, ComplexSymbolVector};
use djscc_core::diffusion::{
    apply_guidance, estimate_z0, forward_diffuse, posterior_mean, posterior_mean_eps, space_timesteps, NoiseSchedule,
};
use djscc_core::jscc::{rate_for_config, symbols_for_image};
use djscc_core::metrics::{ms_ssim, psnr, ssim, SsimParams};
use djscc_core::rng;
use num_complex::Complex64;
use proptest::prelude::*;

fn symbols(max: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..max)
        .prop_map(|v| v.into_iter().map(|(re, im)| Complex64::new(re, im)).collect())
}

fn image(seed: u64) -> Tensor<f64> {
    Tensor::<f64>::randn(&[1, 3, 32, 32], &mut rng::stream(seed, 0, "prop/image")).map(|v| (0.4 * v).clamp(-1.0, 1.0))
}

proptest! {
    #[test]
    fn normalized_power_is_exact(raw in symbols(300), exp in -200i32..200, power in 0.01f64..10.0) {
        let scale = 10f64.powi(exp);
        let scaled: Vec<Complex64> = raw.iter().map(|s| s * scale).collect();
        prop_assume!(scaled.iter().any(|s| s.re != 0.0 || s.im != 0.0));
        let v = ComplexSymbolVector::new(scaled, power).unwrap();
        let y = channel::normalize_power(&v, power).unwrap();
        prop_assert!((y.average_power() - power).abs() < 1e-12 * power.max(1.0));
    }

    #[test]
    fn noiseless_equalization_inverts_the_gain(raw in symbols(64), re in -3.0f64..3.0, im in -3.0f64..3.0) {
        let h = Complex64::new(re, im);
        prop_assume!(h.norm() > 1e-3);
        let y = ComplexSymbolVector::new(raw, 1.0).unwrap();
        let rx = channel::apply_channel_with_noise(&y, h, &vec![Complex64::new(0.0, 0.0); y.len()]).unwrap();
        let back = channel::equalize(&rx, h).unwrap();
        for (a, b) in back.symbols().iter().zip(y.symbols()) {
            prop_assert!((a - b).norm() <= 1e-12 * b.norm().max(1.0));
        }
    }

    #[test]
    fn guidance_contracts_by_one_minus_lambda_over_n(seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let mut r = rng::stream(seed, 0, "prop/guidance");
        let z0 = Tensor::<f64>::randn(&[2, 4, 4, 4], &mut r);
        let f_v = Tensor::<f64>::randn(&[2, 4, 4, 4], &mut r);
        let n = 64.0;
        let g = apply_guidance(&z0, &f_v, frac * n, [4, 4, 4]).unwrap();
        for ((a, z), f) in g.data().iter().zip(z0.data()).zip(f_v.data()) {
            prop_assert!((a - f - (1.0 - frac) * (z - f)).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_forms_and_inversion_agree(seed in any::<u64>(), t in 1usize..=200) {
        let sched = NoiseSchedule::scaled_linear(200).unwrap();
        let mut r = rng::stream(seed, 0, "prop/posterior");
        let z0 = Tensor::<f64>::randn(&[1, 4, 4, 4], &mut r);
        let eps = Tensor::<f64>::randn(&[1, 4, 4, 4], &mut r);
        let zt = forward_diffuse(&z0, t, &eps, &sched).unwrap();
        let a = posterior_mean(&zt, &z0, t, &sched).unwrap();
        let b = posterior_mean_eps(&zt, &eps, t, &sched).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        let back = estimate_z0(&zt, t, &eps, &sched).unwrap();
        for (x, y) in back.data().iter().zip(z0.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn spaced_timesteps_are_increasing_and_end_at_t(total in 1usize..2000, n in 1usize..2000) {
        prop_assume!(n <= total);
        let map = space_timesteps(total, n).unwrap();
        prop_assert_eq!(map.len(), n);
        prop_assert_eq!(*map.steps().last().unwrap(), total);
        prop_assert!(map.steps().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(map.steps()[0] >= 1);
    }

    #[test]
    fn rate_law_holds_for_valid_shapes(half in 1usize..32, d in 1usize..5, bh in 1usize..6, bw in 1usize..6) {
        let c_out = 2 * half;
        let (h, w) = (bh << d, bw << d);
        let k = symbols_for_image(c_out, d, h, w).unwrap();
        let rho = rate_for_config(c_out, d).unwrap();
        // Integer form of K = rho 3HW with rho = C_out / (3 2^(2D+1)).
        prop_assert_eq!(k << (2 * d + 1), c_out * h * w);
        prop_assert!((rho * (3 * h * w) as f64 / k as f64 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quality_metrics_are_symmetric_and_maximal_on_identity(a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (image(a), image(b));
        let p = SsimParams::for_peak(2.0);
        prop_assert_eq!(psnr(&x, &x, 2.0).unwrap(), f64::INFINITY);
        prop_assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((ms_ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(psnr(&x, &y, 2.0).unwrap(), psnr(&y, &x, 2.0).unwrap());
        prop_assert!((ssim(&x, &y, &p).unwrap() - ssim(&y, &x, &p).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&x, &y, &p).unwrap() <= 1.0 + 1e-12);
    }
}
