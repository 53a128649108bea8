//! Mutation fuzzing of every decoder: each mutated input must decode or fail
//! with a typed error, never panic.

use std::panic::{catch_unwind, AssertUnwindSafe};

use gsvr_core::acquisition::{simulate_stack, NoiseModel, PsfSpec, StackGeometry, VolumeSource};
use gsvr_core::field::{Gaussian, GaussianSet};
use gsvr_core::io::{
    decode_adam, decode_gaussians, decode_manifest, decode_stack, decode_transforms, decode_volume, encode_adam, encode_gaussians, encode_manifest,
    encode_stack, encode_transforms, encode_volume, parse_config_str, transform_records, CaseFiles, CaseManifest, MANIFEST_VERSION,
};
use gsvr_core::motion::RigidTransform;
use gsvr_core::optimizer::AdamState;
use gsvr_core::phantom::{CaseSeeds, PhantomKind, Protocol};
use gsvr_core::volume::{GridSpec, VoxelVolume};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Target {
    pub name: &'static str,
    pub seed: Vec<u8>,
    /// `Ok(true)` decoded, `Ok(false)` typed error.
    pub decode: fn(&[u8]) -> bool,
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub inputs: usize,
    pub decoded: usize,
    pub typed_errors: usize,
    pub panics: Vec<String>,
}

fn small_set() -> GaussianSet {
    GaussianSet::from_gaussians((0..5).map(|j| Gaussian {
        center: Vector3::new(j as f64 - 2.0, 0.5 * j as f64, -1.0),
        rotation: UnitQuaternion::from_euler_angles(0.1 * j as f64, 0.2, -0.3),
        log_scale: Vector3::new(0.1, 0.3 * j as f64 / 5.0, -0.2),
        intensity: 0.2 + 0.1 * j as f64,
    }))
}

pub fn targets() -> Vec<Target> {
    let grid = GridSpec::centered([4, 3, 2], [1.0, 1.5, 2.0]);
    let volume = VoxelVolume::from_data(grid, (0..24).map(|i| i as f64 / 23.0).collect()).unwrap();
    let set = small_set();
    let geom = StackGeometry {
        in_plane_spacing: [1.0, 1.0],
        rows: 5,
        cols: 6,
        slice_thickness: 2.0,
        slice_gap: 2.0,
        orientation: UnitQuaternion::identity(),
        center: Vector3::zeros(),
        n_slices: 3,
    };
    let truths = vec![vec![RigidTransform::identity(); 3]];
    let stacks = simulate_stack(VolumeSource::Gaussians(&set), &[geom], &truths, &PsfSpec::default(), NoiseModel::default()).unwrap();
    let mut adam = AdamState::new(2, 1);
    adam.centers.m[0] = 0.5;
    adam.intensities.step = 3;
    let manifest = CaseManifest {
        format_version: MANIFEST_VERSION,
        case_id: "fuzz".into(),
        phantom_kind: PhantomKind::GaussianMixture,
        phantom_seed: 1,
        seeds: CaseSeeds::derive(1),
        protocol: Protocol::desk(),
        files: CaseFiles {
            stacks: "stacks.gstk".into(),
            truth_volume: "truth.gvol".into(),
            truth_gaussians: None,
            truth_transforms: "truth_transforms.json".into(),
        },
    };
    let records = transform_records(&stacks, &stacks.truths().unwrap()).unwrap();
    vec![
        Target {
            name: "GVOL",
            seed: encode_volume(&volume),
            decode: |b| decode_volume(b).is_ok(),
        },
        Target {
            name: "GSTK",
            seed: encode_stack(&stacks, Some("truth_transforms.json")),
            decode: |b| decode_stack(b).is_ok(),
        },
        Target {
            name: "GGAU",
            seed: encode_gaussians(&set),
            decode: |b| decode_gaussians(b).is_ok(),
        },
        Target {
            name: "GADM",
            seed: encode_adam(&adam),
            decode: |b| decode_adam(b).is_ok(),
        },
        Target {
            name: "transforms",
            seed: encode_transforms(&records).into_bytes(),
            decode: |b| std::str::from_utf8(b).is_ok_and(|t| decode_transforms(t).is_ok()),
        },
        Target {
            name: "manifest",
            seed: encode_manifest(&manifest).into_bytes(),
            decode: |b| std::str::from_utf8(b).is_ok_and(|t| decode_manifest(t).is_ok()),
        },
        Target {
            name: "config",
            seed: b"preset = \"desk\"\nseed = 4\n[loss]\nlambda1 = 0.3\n[[stages]]\nname = \"a\"\nresolution_factor = 2\niterations = 3\nbudget = 10\n"
                .to_vec(),
            decode: |b| std::str::from_utf8(b).is_ok_and(|t| parse_config_str(t).is_ok()),
        },
    ]
}

fn mutate(seed: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = seed.to_vec();
    let rounds = rng.gen_range(1..=4);
    for _ in 0..rounds {
        if b.is_empty() {
            b.push(rng.gen());
            continue;
        }
        let i = rng.gen_range(0..b.len());
        match rng.gen_range(0..8) {
            0 => b[i] ^= 1 << rng.gen_range(0..8),
            1 => b[i] = rng.gen(),
            2 => b.truncate(i),
            3 => {
                let n = rng.gen_range(1..16);
                let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
                b.splice(i..i, bytes);
            }
            4 => {
                let end = (i + rng.gen_range(1..64)).min(b.len());
                b.drain(i..end);
            }
            5 => {
                // Rewrite digits, which reach the size and count fields of headers.
                if let Some(p) = b[i..].iter().position(u8::is_ascii_digit) {
                    b[i + p] = b"0123456789"[rng.gen_range(0..10)];
                    if rng.gen_bool(0.3) {
                        b.splice(i + p..i + p, b"99999".iter().copied());
                    }
                }
            }
            6 => {
                // Structural characters of the text headers.
                b[i] = b"{}[],:\"-.e"[rng.gen_range(0..10)];
            }
            _ => {
                let end = (i + rng.gen_range(1..32)).min(b.len());
                let chunk = b[i..end].to_vec();
                b.splice(i..i, chunk);
            }
        }
    }
    b
}

/// Feed `per_target` mutations of each target's seed input to its decoder.
pub fn fuzz_decoders(per_target: usize, seed: u64) -> FuzzOutcome {
    let mut out = FuzzOutcome::default();
    let previous = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for (t, target) in targets().iter().enumerate() {
        assert!((target.decode)(&target.seed), "{} seed input must decode", target.name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64) << 32);
        for _ in 0..per_target {
            let input = mutate(&target.seed, &mut rng);
            out.inputs += 1;
            match catch_unwind(AssertUnwindSafe(|| (target.decode)(&input))) {
                Ok(true) => out.decoded += 1,
                Ok(false) => out.typed_errors += 1,
                Err(_) => out.panics.push(format!("{}: {} bytes", target.name, input.len())),
            }
        }
    }
    std::panic::set_hook(previous);
    out
}
