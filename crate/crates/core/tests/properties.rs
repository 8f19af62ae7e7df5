use proptest::prelude::*;

use dgd_pat::acoustic::{default_dt, default_padding, AcousticGeometry, AcousticOperator, SensorData, SOUND_SPEED, VOXEL_SIZE};
use dgd_pat::config::ExperimentConfig;
use dgd_pat::dgd::DGD_MAGIC;
use dgd_pat::grids::{ScalarField, SeededRng};
use dgd_pat::metrics::{rel_l2, ssim, unbiased_rel_error};
use dgd_pat::nn::block::DgdArchitecture;
use dgd_pat::nn::io::{decode, encode};
use dgd_pat::unet::UnetArchitecture;
use dgd_pat::variational::{prox_nonneg, prox_tv, total_variation};

fn field(dims: &[usize], data: Vec<f64>) -> ScalarField {
    ScalarField::new(dims.to_vec(), vec![1.0; dims.len()], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adjoint_identity_holds_for_any_small_grid(
        h in 3usize..7, w in 3usize..7, n_t in 4usize..24, pitch in 1usize..3, seed in any::<u64>()
    ) {
        let dims = [2 * h, 2 * w];
        let dt = default_dt(&dims, VOXEL_SIZE, SOUND_SPEED, n_t);
        let g = AcousticGeometry::new(&dims, VOXEL_SIZE, SOUND_SPEED, n_t, dt, pitch, &default_padding(2)).unwrap();
        let op = AcousticOperator::new(g.clone());
        let mut rng = SeededRng::new(seed);
        let x = field(&dims, rng.gaussian_vec(dims[0] * dims[1]));
        let y = SensorData::new(g.active_sensor_count(), n_t, dt, rng.gaussian_vec(g.active_sensor_count() * n_t)).unwrap();
        let lhs = op.forward(&x).unwrap().dot(&y);
        let rhs = x.dot(&op.adjoint(&y).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * op.forward(&x).unwrap().norm() * y.norm());
    }

    #[test]
    fn tv_prox_never_increases_variation(seed in any::<u64>(), alpha in 0.01f64..1.0) {
        let mut rng = SeededRng::new(seed);
        let v = field(&[12, 12], rng.gaussian_vec(144));
        let p = prox_tv(&v, alpha, 50).unwrap();
        prop_assert!(total_variation(&p) <= total_variation(&v) + 1e-9);
        let nn = prox_nonneg(&v);
        prop_assert!(nn.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn metrics_are_consistent(seed in any::<u64>(), noise in 0.0f64..0.5) {
        let mut rng = SeededRng::new(seed);
        let t = field(&[16, 16], (0..256).map(|_| rng.uniform(0.0, 1.0)).collect());
        let x = t.add_scaled(noise, &field(&[16, 16], rng.gaussian_vec(256)));
        let err = unbiased_rel_error(&x, &t).unwrap().err;
        prop_assert!(err >= 0.0);
        prop_assert!(err <= rel_l2(&x, &t).unwrap() + 1e-12);
        let s = ssim(&x, &t).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn weight_containers_roundtrip(seed in any::<u64>(), stages in 1usize..4) {
        let layout = DgdArchitecture::with_kernel(2, 3).layout().clone();
        let mut rng = SeededRng::new(seed);
        let weights: Vec<Vec<f32>> = (0..stages)
            .map(|_| rng.gaussian_vec(layout.len()).iter().map(|&v| v as f32).collect())
            .collect();
        let bytes = encode(DGD_MAGIC, &layout, &weights).unwrap();
        prop_assert_eq!(decode(&bytes, DGD_MAGIC, &layout).unwrap(), weights);
        prop_assert!(decode(&bytes[..bytes.len() - 1], DGD_MAGIC, &layout).is_err());
        prop_assert!(decode(&bytes, b"UNTW", &layout).is_err());
    }

    #[test]
    fn config_serialization_roundtrips(
        k in 1usize..9, steps in 1usize..5000, lr in 1e-7f64..1e-2, snr in 1.0f64..100.0,
        seed in any::<u64>(), background in any::<bool>(), side in 3usize..20
    ) {
        let text = format!(
            "dgd.k_max = {k}\ndgd.steps_per_stage = {steps}\ndgd.lr = {lr:?}\ndata.snr = {snr:?}\n\
             data.background = {background}\ngeometry.dims = {0}, {0}\n",
            4 * side
        );
        let mut c = ExperimentConfig::parse(&text).unwrap();
        c.reseed(seed);
        let again = ExperimentConfig::parse(&c.serialize()).unwrap();
        prop_assert_eq!(&again, &c);
        prop_assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn unet_zero_weights_are_relu(seed in any::<u64>(), side in 1usize..5) {
        let arch = UnetArchitecture::new(2);
        let dims = [4 * side, 4 * side];
        let mut rng = SeededRng::new(seed);
        let x = rng.gaussian_vec(dims[0] * dims[1]);
        let out = arch.apply(&arch.layout().zeros::<f64>(), &x, &dims).unwrap();
        for (o, v) in out.iter().zip(&x) {
            prop_assert_eq!(*o, v.max(0.0));
        }
    }
}
