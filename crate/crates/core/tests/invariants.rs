use gsvr_core::field::{build_index, default_cell_size, Aabb, Field, Gaussian, GaussianSet};
use gsvr_core::objective::{dssim_loss, l1_loss, tv_loss, LossConfig};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

fn arb_gaussian() -> impl Strategy<Value = Gaussian> {
    (
        prop::array::uniform3(-8.0f64..8.0),
        prop::array::uniform3(-3.0f64..3.0),
        prop::array::uniform3(-0.5f64..1.0),
        0.0f64..2.0,
    )
        .prop_map(|(c, e, s, i)| Gaussian {
            center: Vector3::from(c),
            rotation: UnitQuaternion::from_euler_angles(e[0], e[1], e[2]),
            log_scale: Vector3::from(s),
            intensity: i,
        })
}

fn arb_set() -> impl Strategy<Value = GaussianSet> {
    prop::collection::vec(arb_gaussian(), 1..12).prop_map(GaussianSet::from_gaussians)
}

fn field_values(set: &GaussianSet, points: &[Vector3<f64>]) -> Vec<f64> {
    let bounds = Aabb::from_points(points.iter().copied()).unwrap();
    let bounds = set.support_bounds().map_or(bounds, |b| b.union(&bounds));
    let index = build_index(set, bounds, default_cell_size(set)).unwrap();
    Field::new(set, &index).eval(points)
}

fn image(seed: u64, n: usize) -> Vec<f64> {
    let mut x = seed | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn field_is_equivariant_under_rigid_motion(
        set in arb_set(),
        euler in prop::array::uniform3(-3.0f64..3.0),
        shift in prop::array::uniform3(-20.0f64..20.0),
        pts in prop::collection::vec(prop::array::uniform3(-12.0f64..12.0), 1..24),
    ) {
        let r = UnitQuaternion::from_euler_angles(euler[0], euler[1], euler[2]);
        let t = Vector3::from(shift);
        let points: Vec<Vector3<f64>> = pts.into_iter().map(Vector3::from).collect();
        let moved: Vec<Vector3<f64>> = points.iter().map(|p| r * p + t).collect();
        let a = field_values(&set, &points);
        let b = field_values(&set.transformed(&r, &t), &moved);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn field_is_linear_in_intensities(
        set in arb_set(),
        k in 0.0f64..5.0,
        pts in prop::collection::vec(prop::array::uniform3(-12.0f64..12.0), 1..24),
    ) {
        let points: Vec<Vector3<f64>> = pts.into_iter().map(Vector3::from).collect();
        let mut scaled = set.clone();
        scaled.intensities.iter_mut().for_each(|i| *i *= k);
        let a = field_values(&set, &points);
        let b = field_values(&scaled, &points);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(*x >= 0.0);
            prop_assert!((k * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn image_losses_vanish_on_identity_and_are_symmetric(
        rows in 3usize..20,
        cols in 3usize..20,
        sa in any::<u64>(),
        sb in any::<u64>(),
    ) {
        let cfg = LossConfig::default();
        let a = image(sa, rows * cols);
        let b = image(sb, rows * cols);
        prop_assert_eq!(l1_loss(&a, &a).unwrap().0, 0.0);
        prop_assert!(dssim_loss(&a, &a, rows, cols, &cfg).unwrap().0.abs() < 1e-12);
        let (l_ab, l_ba) = (l1_loss(&a, &b).unwrap().0, l1_loss(&b, &a).unwrap().0);
        prop_assert!(l_ab >= 0.0 && (l_ab - l_ba).abs() < 1e-15);
        let d_ab = dssim_loss(&a, &b, rows, cols, &cfg).unwrap().0;
        let d_ba = dssim_loss(&b, &a, rows, cols, &cfg).unwrap().0;
        prop_assert!((0.0..=1.0).contains(&d_ab));
        prop_assert!((d_ab - d_ba).abs() < 1e-12);
    }

    #[test]
    fn tv_is_shift_invariant_and_positively_homogeneous(
        dims in prop::array::uniform3(1usize..7),
        seed in any::<u64>(),
        c in -3.0f64..3.0,
        k in 0.0f64..4.0,
    ) {
        let v = image(seed, dims.iter().product());
        let base = tv_loss(&v, dims).unwrap().0;
        prop_assert!(base >= 0.0);
        prop_assert_eq!(tv_loss(&vec![c; v.len()], dims).unwrap().0, 0.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((tv_loss(&shifted, dims).unwrap().0 - base).abs() < 1e-12);
        let scaled: Vec<f64> = v.iter().map(|x| k * x).collect();
        prop_assert!((tv_loss(&scaled, dims).unwrap().0 - k * base).abs() < 1e-12 * (1.0 + k * base));
    }
}
