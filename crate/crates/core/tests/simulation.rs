//! Phantom, noise and metric properties checked by Monte-Carlo or by
//! construction.

use tensorformer_core::eigen::fa_from_values;
use tensorformer_core::evaluation::{compare_volumes, scalar_maps};
use tensorformer_core::phantom::{LABEL_CSF, LABEL_GM, LABEL_WM};
use tensorformer_core::*;

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: [24, 24, 12],
        seed,
        ..Default::default()
    }
}

#[test]
fn phantom_is_deterministic_and_seed_sensitive() {
    let a: Phantom64 = generate_phantom(&small_spec(7)).unwrap();
    let b: Phantom64 = generate_phantom(&small_spec(7)).unwrap();
    let c: Phantom64 = generate_phantom(&small_spec(8)).unwrap();
    assert!(a.tensors.data().iter().zip(b.tensors.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.s0, b.s0);
    assert_ne!(a.tensors, c.tensors);
}

#[test]
fn phantom_tensors_positive_definite_and_fa_in_range() {
    for model in [RegionModel::Layered, RegionModel::CurvedTract] {
        let spec = PhantomSpec {
            region_model: model,
            ..small_spec(3)
        };
        let ph: Phantom64 = generate_phantom(&spec).unwrap();
        let mut inside = 0;
        for (i, t) in ph.tensors.voxels().enumerate() {
            let e = eigendecompose(&DiffusionTensor::from_slice(t));
            assert!(e.min_value() > 0.0);
            let range = spec.region(ph.label_at(i)).unwrap().fa;
            let fa = fa_from_values(&e.values);
            if fa >= range[0] - 1e-6 && fa <= range[1] + 1e-6 {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.99 * ph.tensors.voxel_count() as f64);
    }
}

#[test]
fn csf_is_isotropic_at_three_micro() {
    let ph: Phantom64 = generate_phantom(&small_spec(1)).unwrap();
    for (i, t) in ph.tensors.voxels().enumerate() {
        if ph.label_at(i) == LABEL_CSF {
            let e = eigendecompose(&DiffusionTensor::from_slice(t));
            assert!((mean_diffusivity(&e) - 3.0e-3).abs() <= 0.1e-3 + 1e-12);
            assert!(fractional_anisotropy(&e) < 1e-6);
        }
    }
}

/// Mean angle between principal directions of x-adjacent WM voxels.
fn adjacent_wm_angle(ph: &Phantom64) -> f64 {
    let dims = ph.tensors.dims();
    let (mut sum, mut n) = (0.0, 0);
    for x in 0..dims[0] - 1 {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let i = ph.tensors.linear_index([x, y, z]);
                let j = ph.tensors.linear_index([x + 1, y, z]);
                if ph.label_at(i) != LABEL_WM || ph.label_at(j) != LABEL_WM {
                    continue;
                }
                let a = eigendecompose(&DiffusionTensor::from_slice(ph.tensors.voxel_at(i)));
                let b = eigendecompose(&DiffusionTensor::from_slice(ph.tensors.voxel_at(j)));
                sum += angular_error(&a.principal(), &b.principal()).unwrap();
                n += 1;
            }
        }
    }
    assert!(n > 100);
    sum / n as f64
}

#[test]
fn direction_field_is_spatially_correlated() {
    let smooth: Phantom64 = generate_phantom(&PhantomSpec {
        length_scale: 8.0,
        ..small_spec(21)
    })
    .unwrap();
    let iid: Phantom64 = generate_phantom(&PhantomSpec {
        length_scale: 1.0,
        ..small_spec(21)
    })
    .unwrap();
    let (s, r) = (adjacent_wm_angle(&smooth), adjacent_wm_angle(&iid));
    assert!(s < 15.0, "smooth {s}");
    assert!(r > 40.0, "iid {r}");
}

#[test]
fn rician_moments() {
    // 10^6 zero-amplitude draws and 10^6 draws at A = 0.5
    let sigma = 0.1;
    let noise = NoiseSpec {
        snr_db: 20.0,
        reference_amplitude: 1.0,
        seed: 99,
    };
    assert!((noise.sigma() - sigma).abs() < 1e-15);
    let zeros = Volume64::zeros([100, 100, 10], 10);
    let out = add_rician_noise(&zeros, &noise).unwrap();
    let mean = out.data().iter().sum::<f64>() / out.data().len() as f64;
    let rayleigh = sigma * (std::f64::consts::PI / 2.0).sqrt();
    assert!((mean - rayleigh).abs() / rayleigh < 0.01, "{mean} vs {rayleigh}");
    assert!(out.data().iter().all(|&x| x >= 0.0));

    let a = 0.5;
    let mut half = Volume64::zeros([100, 100, 10], 10);
    half.data_mut().fill(a);
    let out = add_rician_noise(&half, &noise).unwrap();
    let m2 = out.data().iter().map(|x| x * x).sum::<f64>() / out.data().len() as f64;
    let want = a * a + 2.0 * sigma * sigma;
    assert!((m2 - want).abs() / want < 0.01, "{m2} vs {want}");

    let again = add_rician_noise(&half, &noise).unwrap();
    assert_eq!(out, again);
}

#[test]
fn single_voxel_synthesis_delegates_to_forward_model() {
    let scheme = Scheme64::uniform(10, 800.0);
    let t = DiffusionTensor::new(1.1e-3, 0.6e-3, 0.4e-3, 0.1e-3, 0.05e-3, -0.2e-3);
    let tv = Volume64::new([1, 1, 1], 6, t.to_array().to_vec()).unwrap();
    let s0 = Volume64::new([1, 1, 1], 1, vec![250.0]).unwrap();
    let dwi = synthesize_dwi(&tv, &s0, &scheme).unwrap();
    let direct = predict_signals(&t, &scheme, 250.0);
    assert_eq!(dwi.voxel_at(0)[0], 250.0);
    assert_eq!(&dwi.voxel_at(0)[1..], direct.as_slice());
}

#[test]
fn noiseless_phantom_volume_round_trips_through_ols() {
    let ph: Phantom64 = generate_phantom(&small_spec(4)).unwrap();
    let scheme = Scheme64::skare6(1000.0);
    let dwi = synthesize_dwi(&ph.tensors, &ph.s0, &scheme).unwrap();
    let (fit, failures) = fit_volume(&dwi, &scheme, ClassicalMethod::Ols, None).unwrap();
    assert_eq!(failures, 0);
    for (a, b) in fit.voxels().zip(ph.tensors.voxels()) {
        let (a, b) = (DiffusionTensor::from_slice(a), DiffusionTensor::from_slice(b));
        assert!(a.sub(&b).frobenius_norm() / b.frobenius_norm() < 1e-8);
    }
}

/// Rotation by +90 degrees about z.
const RZ90: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];

#[test]
fn rotated_axis_aligned_phantom_gives_ninety_degrees() {
    let reference = Volume64::from_voxels([4, 4, 2], 6, |c, o| {
        let t = DiffusionTensor::diagonal(1.6e-3 + 1e-5 * c[0] as f64, 0.4e-3, 0.3e-3);
        o.copy_from_slice(&t.to_array());
    });
    let mut pred = reference.clone();
    for v in pred.data_mut().chunks_exact_mut(6) {
        let t = DiffusionTensor::from_slice(v).rotated(&RZ90);
        v.copy_from_slice(&t.to_array());
    }
    let mask = vec![true; 32];
    let r = compare_volumes(&pred, &reference, &mask, None, 0.15).unwrap();
    assert!((r.overall.angle_error_deg - 90.0).abs() < 1e-6);
    assert!(r.overall.md_error < 1e-15);
    assert!(r.overall.fa_error < 1e-12);
}

#[test]
fn region_errors_average_to_overall() {
    let ph: Phantom64 = generate_phantom(&small_spec(12)).unwrap();
    let scheme = Scheme64::skare6(1000.0);
    let dwi = synthesize_dwi(&ph.tensors, &ph.s0, &scheme).unwrap();
    let noisy = add_rician_noise(
        &dwi,
        &NoiseSpec {
            snr_db: 25.0,
            reference_amplitude: 1.0,
            seed: 5,
        },
    )
    .unwrap();
    let (fit, _) = fit_volume(&noisy, &scheme, ClassicalMethod::Cwlls, None).unwrap();
    let mask = ph.foreground();
    let r = compare_volumes(&fit, &ph.tensors, &mask, Some(&ph.labels), 0.15).unwrap();
    assert_eq!(r.regions.len(), 3);
    let total: usize = r.regions.values().map(|m| m.voxel_count).sum();
    assert_eq!(total, r.overall.voxel_count);
    for (metric, weight) in [
        ("tensor", false),
        ("md", false),
        ("fa", false),
        ("angle", true),
    ] {
        let (mut acc, mut n) = (0.0, 0usize);
        for m in r.regions.values() {
            let w = if weight { m.angle_voxel_count } else { m.voxel_count };
            acc += m.metric(metric).unwrap() * w as f64;
            n += w;
        }
        let overall = r.overall.metric(metric).unwrap();
        assert!((acc / n as f64 - overall).abs() <= 1e-10 * overall.abs().max(1e-12), "{metric}");
    }
    assert!(r.regions["wm"].angle_voxel_count == r.regions["wm"].voxel_count);
    assert_eq!(r.regions["csf"].angle_voxel_count, 0);
    let (fa, md) = scalar_maps(&fit).unwrap();
    assert_eq!((fa.channels(), md.channels()), (1, 1));
    assert!(r.regions["gm"].voxel_count > 0 && r.regions.contains_key(phantom::label_name(LABEL_GM)));
}
