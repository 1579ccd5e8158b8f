use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use proto_lab::compression::{compress_decompress, CodecConfig};
use proto_lab::protopnet::{predict, save_checkpoint, Model, ModelConfig};
use proto_lab::Tensor;
use proto_lab_ffi::*;
use tempfile::TempDir;

fn small_config() -> ModelConfig {
    ModelConfig {
        image_height: 32,
        image_width: 32,
        prototypes_per_class: 2,
        ..ModelConfig::reference(3)
    }
}

fn checkpoint(dir: &Path) -> (PathBuf, Model) {
    let model = Model::new(small_config(), 5).unwrap();
    let path = dir.join("model.plab");
    save_checkpoint(&model, &path).unwrap();
    (path, model)
}

fn test_image(len: usize) -> Vec<f64> {
    (0..len).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(pl_last_error_message()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn load(path: &Path) -> *mut PlModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { pl_model_load(c.as_ptr(), &mut handle) },
        PlStatus::Ok,
        "{}",
        last_error()
    );
    assert!(!handle.is_null());
    handle
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(pl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_reports_missing_file_and_null_arguments() {
    let path = CString::new("/nonexistent/model.plab").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { pl_model_load(path.as_ptr(), &mut handle) }, PlStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent/model.plab"));
    assert_eq!(
        unsafe { pl_model_load(ptr::null(), &mut handle) },
        PlStatus::NullPointer
    );
    assert_eq!(
        unsafe { pl_model_load(path.as_ptr(), ptr::null_mut()) },
        PlStatus::NullPointer
    );
    unsafe { pl_model_free(ptr::null_mut()) };
}

#[test]
fn load_rejects_garbage() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("junk.plab");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { pl_model_load(c.as_ptr(), &mut handle) }, PlStatus::Format);
    assert!(!last_error().is_empty());
}

#[test]
fn forward_and_map_match_the_library() {
    let dir = TempDir::new().unwrap();
    let (path, model) = checkpoint(dir.path());
    let handle = load(&path);

    let mut info = PlModelInfo::default();
    assert_eq!(unsafe { pl_model_info(handle, &mut info) }, PlStatus::Ok);
    let (lh, lw, _) = model.config.latent_dims();
    assert_eq!(
        info,
        PlModelInfo {
            image_channels: 3,
            image_height: 32,
            image_width: 32,
            classes: 3,
            prototypes: 6,
            latent_height: lh,
            latent_width: lw,
        }
    );

    let n = 3 * 32 * 32;
    let image = test_image(n);
    let expected = predict(&model, &Tensor::new(vec![3, 32, 32], image.clone()).unwrap()).unwrap();

    let mut logits = vec![0.0; 3];
    let mut predicted = usize::MAX;
    let status = unsafe { pl_model_forward(handle, image.as_ptr(), n, logits.as_mut_ptr(), 3, &mut predicted) };
    assert_eq!(status, PlStatus::Ok);
    assert_eq!(logits, expected.classification.logits);
    assert_eq!(predicted, expected.classification.class);

    let mut map = vec![0.0; lh * lw];
    for p in 0..info.prototypes {
        let status = unsafe { pl_model_similarity_map(handle, image.as_ptr(), n, p, map.as_mut_ptr(), map.len()) };
        assert_eq!(status, PlStatus::Ok);
        assert_eq!(map.as_slice(), expected.map.slice(p));
    }

    let status = unsafe { pl_model_similarity_map(handle, image.as_ptr(), n, 6, map.as_mut_ptr(), map.len()) };
    assert_eq!(status, PlStatus::InvalidArgument);
    let status = unsafe { pl_model_similarity_map(handle, image.as_ptr(), n, 0, map.as_mut_ptr(), map.len() - 1) };
    assert_eq!(status, PlStatus::ShapeMismatch);
    let status = unsafe { pl_model_forward(handle, image.as_ptr(), n + 1, logits.as_mut_ptr(), 3, ptr::null_mut()) };
    assert_eq!(status, PlStatus::ShapeMismatch);
    let status = unsafe { pl_model_forward(handle, ptr::null(), n, logits.as_mut_ptr(), 3, ptr::null_mut()) };
    assert_eq!(status, PlStatus::NullPointer);
    let status = unsafe { pl_model_forward(ptr::null(), image.as_ptr(), n, logits.as_mut_ptr(), 3, ptr::null_mut()) };
    assert_eq!(status, PlStatus::NullPointer);

    unsafe { pl_model_free(handle) };
}

#[test]
fn codec_roundtrip_matches_the_library() {
    let (h, w) = (16, 24);
    let image = test_image(3 * h * w);
    let mut out = vec![0.0; image.len()];
    let status = unsafe { pl_codec_roundtrip(image.as_ptr(), h, w, 20, true, out.as_mut_ptr()) };
    assert_eq!(status, PlStatus::Ok);
    let expected = compress_decompress(
        &Tensor::new(vec![3, h, w], image.clone()).unwrap(),
        &CodecConfig::new(20),
    )
    .unwrap();
    assert_eq!(out.as_slice(), expected.data());

    let status = unsafe { pl_codec_roundtrip(image.as_ptr(), h, w, 0, true, out.as_mut_ptr()) };
    assert_eq!(status, PlStatus::InvalidArgument);
    let status = unsafe { pl_codec_roundtrip(image.as_ptr(), h, w, 50, false, ptr::null_mut()) };
    assert_eq!(status, PlStatus::NullPointer);
}

#[test]
fn errors_are_per_thread_and_cleared_on_success() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent").unwrap();
    assert_ne!(unsafe { pl_model_load(missing.as_ptr(), &mut handle) }, PlStatus::Ok);
    std::thread::spawn(|| assert_eq!(last_error(), "")).join().unwrap();
    assert!(!last_error().is_empty());
    let mut out = [0.0; 3 * 8 * 8];
    let img = test_image(out.len());
    assert_eq!(
        unsafe { pl_codec_roundtrip(img.as_ptr(), 8, 8, 90, true, out.as_mut_ptr()) },
        PlStatus::Ok
    );
    assert_eq!(last_error(), "");
}

/// Builds a C program against the generated header and the shared library.
#[test]
fn c_program_uses_the_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/proto_lab.h");
    assert!(header.exists(), "header not generated");
    // target/<profile>/deps/<test binary>
    let lib_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    if !lib_dir.join("libproto_lab_ffi.so").exists() {
        eprintln!("shared library not found in {}; skipping", lib_dir.display());
        return;
    }
    let dir = TempDir::new().unwrap();
    let exe = dir.path().join("c_api");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c_api.c"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lproto_lab_ffi")
        .arg("-o")
        .arg(&exe)
        .status();
    let Ok(status) = status else {
        eprintln!("no C compiler ({cc}); skipping");
        return;
    };
    assert!(status.success(), "C compilation failed");

    let (path, model) = checkpoint(dir.path());
    let out = Command::new(&exe)
        .arg(&path)
        .env("LD_LIBRARY_PATH", &lib_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    let n = 3 * 32 * 32;
    let expected = predict(
        &model,
        &Tensor::new(vec![3, 32, 32], (0..n).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap(),
    )
    .unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[3].parse::<usize>().unwrap(), expected.classification.class);
    assert_eq!(fields[5].parse::<f64>().unwrap(), expected.classification.logits[0]);
    assert_eq!(fields[7].parse::<f64>().unwrap(), expected.map.slice(0)[0]);
}
