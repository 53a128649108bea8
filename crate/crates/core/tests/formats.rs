mod support {
    pub mod fuzz;
}

use gsvr_core::field::{Gaussian, GaussianSet};
use gsvr_core::io::{decode_gaussians, decode_volume, encode_gaussians, encode_volume};
use gsvr_core::volume::{GridSpec, VoxelVolume};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

#[test]
fn mutated_inputs_give_only_typed_errors() {
    let out = support::fuzz::fuzz_decoders(2_000, 11);
    assert!(out.panics.is_empty(), "{} panics, first: {:?}", out.panics.len(), out.panics.first());
    assert!(out.typed_errors > out.inputs / 2, "{out:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volumes_round_trip_bit_exactly(
        dims in prop::array::uniform3(1usize..6),
        spacing in prop::array::uniform3(0.1f64..4.0),
        seed in any::<u64>(),
    ) {
        let grid = GridSpec::centered(dims, spacing);
        let mut x = seed;
        let data = (0..grid.len())
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                // Values representable in f32 survive the f32 payload exactly.
                ((x >> 40) as f32 / (1u64 << 24) as f32) as f64
            })
            .collect();
        let v = VoxelVolume::from_data(grid, data).unwrap();
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes).unwrap();
        prop_assert_eq!(encode_volume(&back), bytes);
        prop_assert_eq!(back.data, v.data);
    }

    #[test]
    fn gaussian_sets_round_trip_bit_exactly(
        params in prop::collection::vec((prop::array::uniform3(-20.0f32..20.0), prop::array::uniform3(-1.0f32..1.0), 0.0f32..2.0), 1..20),
    ) {
        let set = GaussianSet::from_gaussians(params.iter().map(|(c, e, i)| Gaussian {
            center: Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64),
            rotation: UnitQuaternion::from_euler_angles(e[0] as f64, e[1] as f64, e[2] as f64),
            log_scale: Vector3::new(0.1, -0.2, e[2] as f64 * 0.5),
            intensity: *i as f64,
        }));
        let bytes = encode_gaussians(&set);
        let back = decode_gaussians(&bytes).unwrap();
        prop_assert_eq!(encode_gaussians(&back), bytes);
        let again = decode_gaussians(&encode_gaussians(&back)).unwrap();
        prop_assert_eq!(again, back);
    }
}
