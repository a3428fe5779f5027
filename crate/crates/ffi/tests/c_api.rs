use std::ffi::{CStr, CString};
use std::ptr;

use amgan::checkpoint::ModelBundle;
use amgan::control::{ManifestEntry, RegistryManifest};
use amgan::data::WindowConfig;
use amgan::kinematics::SkeletonTopology;
use amgan::model::{AmGanModel, ModelConfig};
use amgan_ffi::*;
use rand::SeedableRng;

fn bundle(seed: u64, predict_len: usize) -> ModelBundle {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        predict_len,
        ..ModelConfig::small(8, 4)
    };
    ModelBundle {
        model: AmGanModel::new(SkeletonTopology::default_h36m(), cfg, &mut rng).unwrap(),
        normalization: None,
        window: WindowConfig {
            observed_len: 5,
            predict_len,
            stride: 1,
        },
    }
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = amgan_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn motion(rows: usize) -> Vec<f64> {
    (0..rows * 75).map(|i| (i as f64 * 0.01).sin()).collect()
}

#[test]
fn model_round_trip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let b = bundle(1, 3);
    b.save(&path).unwrap();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(amgan_model_load(cpath(&path).as_ptr(), &mut handle), AmganStatus::Ok);
        let (mut d, mut t, mut h) = (0, 0, 0);
        assert_eq!(amgan_model_dims(handle, &mut d, &mut t, &mut h), AmganStatus::Ok);
        assert_eq!((d, t, h), (75, 5, 3));
        let obs = motion(7);
        let mut out = vec![0.0; 3 * 75];
        assert_eq!(amgan_model_predict(handle, obs.as_ptr(), 7, out.as_mut_ptr(), out.len()), AmganStatus::Ok);
        let m = ndarray::Array2::from_shape_vec((7, 75), obs.clone()).unwrap();
        let expected = b.predict(&m.slice(ndarray::s![2.., ..]).to_owned()).unwrap();
        assert_eq!(out, expected.iter().copied().collect::<Vec<_>>());
        let mut small = vec![0.0; 10];
        assert_eq!(
            amgan_model_predict(handle, obs.as_ptr(), 7, small.as_mut_ptr(), small.len()),
            AmganStatus::BufferTooSmall
        );
        assert!(last_error().contains("225"));
        assert_eq!(
            amgan_model_predict(handle, obs.as_ptr(), 2, out.as_mut_ptr(), out.len()),
            AmganStatus::InvalidArgument
        );
        amgan_model_free(handle);
    }
}

#[test]
fn errors_are_reported() {
    let mut handle = ptr::null_mut();
    unsafe {
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(amgan_model_load(missing.as_ptr(), &mut handle), AmganStatus::Io);
        assert!(last_error().contains("nonexistent"));
        assert_eq!(amgan_model_load(ptr::null(), &mut handle), AmganStatus::NullPointer);
        assert!(handle.is_null());
        assert_eq!(amgan_model_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), AmganStatus::NullPointer);
        amgan_model_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(amgan_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn interpolation_through_the_abi() {
    let z1 = [0.0, 2.0];
    let z2 = [2.0, 4.0];
    let mut out = [0.0; 2];
    unsafe {
        assert_eq!(amgan_interpolate_latents(z1.as_ptr(), z2.as_ptr(), 2, 1, out.as_mut_ptr(), 2), AmganStatus::Ok);
    }
    assert_eq!(out, [1.0, 3.0]);
    let mut six = [0.0; 12];
    unsafe {
        assert_eq!(amgan_interpolate_latents(z1.as_ptr(), z2.as_ptr(), 2, 6, six.as_mut_ptr(), 12), AmganStatus::Ok);
    }
    assert!((six[0] - 2.0 / 7.0).abs() < 1e-15);
}

#[test]
fn transfer_and_control_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let vae_path = dir.path().join("np.ckpt");
    bundle(2, 1).save(&vae_path).unwrap();
    let src = motion(6);
    let mut out = vec![0.0; 6 * 75];
    unsafe {
        let mut vae = ptr::null_mut();
        assert_eq!(amgan_next_pose_load(cpath(&vae_path).as_ptr(), &mut vae), AmganStatus::Ok);
        // a bare model save carries no training steps
        let s = amgan_transfer(vae, src.as_ptr(), 6, src.as_ptr(), 6, 6, out.as_mut_ptr(), out.len());
        assert_eq!(s, AmganStatus::InvalidArgument);
        assert!(last_error().contains("untrained"));
        amgan_next_pose_free(vae);
    }

    let mut manifest = RegistryManifest::default();
    for (i, action) in ["walking", "eating"].iter().enumerate() {
        let b = bundle(10 + i as u64, 4);
        b.save(&dir.path().join(format!("{action}.ckpt"))).unwrap();
        manifest.actions.insert(
            action.to_string(),
            ManifestEntry {
                checkpoint: format!("{action}.ckpt").into(),
                topology_hash: b.model.topology().hash(),
            },
        );
    }
    let mpath = dir.path().join("registry.toml");
    manifest.write(&mpath).unwrap();
    let obs = motion(5);
    let base = CString::new("walking").unwrap();
    let donor = CString::new("eating").unwrap();
    let unknown = CString::new("running").unwrap();
    unsafe {
        let mut reg = ptr::null_mut();
        assert_eq!(amgan_registry_load(cpath(&mpath).as_ptr(), &mut reg), AmganStatus::Ok);
        let mut plain = vec![0.0; 4 * 75];
        let mut mixed = vec![0.0; 4 * 75];
        let s = amgan_control(reg, base.as_ptr(), ptr::null(), ptr::null(), 0, obs.as_ptr(), 5, plain.as_mut_ptr(), plain.len());
        assert_eq!(s, AmganStatus::Ok);
        let chains = [3u8];
        let actions = [donor.as_ptr()];
        let s = amgan_control(reg, base.as_ptr(), chains.as_ptr(), actions.as_ptr(), 1, obs.as_ptr(), 5, mixed.as_mut_ptr(), mixed.len());
        assert_eq!(s, AmganStatus::Ok);
        assert!(mixed.iter().all(|v| v.is_finite()));
        let actions = [unknown.as_ptr()];
        let s = amgan_control(reg, base.as_ptr(), chains.as_ptr(), actions.as_ptr(), 1, obs.as_ptr(), 5, mixed.as_mut_ptr(), mixed.len());
        assert_eq!(s, AmganStatus::UnknownAction);
        amgan_registry_free(reg);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/amgan.h")).unwrap();
    for name in [
        "amgan_model_load",
        "amgan_model_predict",
        "amgan_transfer",
        "amgan_control",
        "amgan_last_error",
        "AMGAN_STATUS_OK = 0",
        "typedef struct AmganModel AmganModel",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

#[test]
fn c_program_links_against_the_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libamgan_ffi.so");
    assert!(lib.exists(), "{} missing", lib.display());
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(profile_dir)
        .arg("-lamgan_ffi")
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = dir.path().join("m.ckpt");
    let b = bundle(5, 2);
    b.save(&ckpt).unwrap();
    let out = std::process::Command::new(&bin)
        .arg(&ckpt)
        .env("LD_LIBRARY_PATH", profile_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(&fields[..3], ["75", "5", "2"]);
    let obs = ndarray::Array2::from_shape_fn((5, 75), |(i, j)| 0.001 * (i * 75 + j) as f64);
    let expected = b.predict(&obs).unwrap()[[1, 74]];
    assert_eq!(fields[3].parse::<f64>().unwrap(), expected);
}
