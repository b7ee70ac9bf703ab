use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srtnet::grad::Tensor;
use srtnet::nets::{
    det_apply, encode_noise_level, init_params, param_count, sto_apply, NetConfig, NetKind,
};

fn config(n_blocks: usize, channels: usize, kernel_size: usize) -> NetConfig {
    NetConfig {
        n_blocks,
        channels,
        dilation_cycle: vec![1, 2, 4],
        kernel_size,
    }
}

/// Random weights everywhere, including the output projection.
fn random_params(c: &NetConfig, kind: NetKind, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_params::<f32, _>(c, kind, "", &mut rng);
    for t in p.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            if *v == 0.0 {
                *v = ((i * 7919 + seed as usize) % 200) as f32 / 1000.0 - 0.1;
            }
        }
    }
    p.tensors().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn both_nets_preserve_length(
        len in 3usize..80,
        blocks in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]),
        level in 0.05f64..=1.0,
    ) {
        prop_assume!(len >= k);
        let c = config(blocks, 4, k);
        let y: Vec<f32> = (0..len).map(|i| (i as f32 * 0.37).sin()).collect();
        let d = det_apply(&c, &random_params(&c, NetKind::Deterministic, 1), &y).unwrap();
        prop_assert_eq!(d.len(), len);
        prop_assert!(d.iter().all(|v| v.is_finite()));
        let e = sto_apply(&c, &random_params(&c, NetKind::Denoiser, 2), &y, &d, level).unwrap();
        prop_assert_eq!(e.len(), len);
    }

    #[test]
    fn embedding_is_bounded_and_separates_levels(a in 1e-3f64..=1.0, b in 1e-3f64..=1.0) {
        let (ea, eb) = (encode_noise_level(a).unwrap(), encode_noise_level(b).unwrap());
        prop_assert!(ea.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assume!((a - b).abs() > 1e-3);
        let linf = ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(linf > 1e-6);
    }
}

#[test]
fn parameter_count_for_one_block_by_hand() {
    // one block, C = 2, K = 3
    // det: input 2+2, dil 12+2, res 4+2, skip 4+2, post 4+2, out 2+1 = 39
    let c = NetConfig {
        n_blocks: 1,
        channels: 2,
        dilation_cycle: vec![1],
        kernel_size: 3,
    };
    assert_eq!(param_count(&c, NetKind::Deterministic), 39);
    // denoiser adds embed 256+2+4+2, level 4+2, cond 6+2 = 278
    assert_eq!(param_count(&c, NetKind::Denoiser), 39 + 278);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = init_params::<f32, _>(&c, NetKind::Denoiser, "", &mut rng);
    assert_eq!(p.count(), 317);
}

#[test]
fn out_of_range_levels_are_rejected() {
    assert!(encode_noise_level(0.0).is_err());
    assert!(encode_noise_level(1.0 + 1e-9).is_err());
    assert!(encode_noise_level(f64::NAN).is_err());
    let e = encode_noise_level(0.5).unwrap();
    assert!((e[63] - 5000f64.sin()).abs() < 1e-12);
    assert!((e[127] - 5000f64.cos()).abs() < 1e-12);
}
