//! C interface to proto-lab.
//!
//! Models are opaque `PlModel` handles created by `pl_model_load` and
//! released with `pl_model_free`. Every fallible call returns a `PlStatus`;
//! on failure `pl_last_error_message` describes the error for the calling
//! thread. Images are planar `f64` arrays of shape channels x height x width
//! with values in [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use proto_lab::compression::{compress_decompress, CodecConfig};
use proto_lab::protopnet::{load_checkpoint, predict, Model};
use proto_lab::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Panic = 6,
    Internal = 7,
}

/// Loaded model. Only ever handled through a pointer.
pub struct PlModel {
    model: Model,
}

/// Dimensions of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlModelInfo {
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub classes: usize,
    pub prototypes: usize,
    pub latent_height: usize,
    pub latent_width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

struct Failure(PlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::ShapeMismatch { .. } => PlStatus::ShapeMismatch,
            Error::Io { .. } | Error::MissingFile(_) => PlStatus::Io,
            Error::Format { .. } | Error::ArtifactMismatch(_) => PlStatus::Format,
            Error::InvalidArgument(_) | Error::LabelOutOfRange { .. } => PlStatus::InvalidArgument,
            _ => PlStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status and message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PlStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {detail}"));
            PlStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const PlModel) -> Result<&'a Model, Failure> {
    model.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

unsafe fn input_image(model: &Model, image: *const f64, len: usize) -> Result<Tensor, Failure> {
    if image.is_null() {
        return Err(null("image"));
    }
    let c = &model.config;
    let shape = vec![c.image_channels, c.image_height, c.image_width];
    let expected: usize = shape.iter().product();
    if len != expected {
        return Err(Failure(
            PlStatus::ShapeMismatch,
            format!("image has {len} values, model expects {expected} ({shape:?})"),
        ));
    }
    let data = std::slice::from_raw_parts(image, len).to_vec();
    Ok(Tensor::new(shape, data)?)
}

unsafe fn output_slice<'a>(out: *mut f64, len: usize, needed: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    if len < needed {
        return Err(Failure(
            PlStatus::ShapeMismatch,
            format!("{what} holds {len} values, {needed} required"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(out, needed))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pl_model_load(path: *const c_char, out: *mut *mut PlModel) -> PlStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(PlStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        let model = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(PlModel { model }));
        Ok(())
    })
}

/// Releases a handle from `pl_model_load`. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn pl_model_free(model: *mut PlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pl_model_info(model: *const PlModel, info: *mut PlModelInfo) -> PlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let (lh, lw, _) = m.config.latent_dims();
        *info = PlModelInfo {
            image_channels: m.config.image_channels,
            image_height: m.config.image_height,
            image_width: m.config.image_width,
            classes: m.config.classes,
            prototypes: m.config.prototypes(),
            latent_height: lh,
            latent_width: lw,
        };
        Ok(())
    })
}

/// Classifies one image. Writes `classes` logits and the predicted class.
///
/// # Safety
/// `image` must point to `image_len` values, `logits` to `logits_len`
/// writable values, and `predicted` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn pl_model_forward(
    model: *const PlModel,
    image: *const f64,
    image_len: usize,
    logits: *mut f64,
    logits_len: usize,
    predicted: *mut usize,
) -> PlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = input_image(m, image, image_len)?;
        let out = output_slice(logits, logits_len, m.config.classes, "logits")?;
        let inf = predict(m, &img)?;
        out.copy_from_slice(&inf.classification.logits);
        if let Some(p) = predicted.as_mut() {
            *p = inf.classification.class;
        }
        Ok(())
    })
}

/// Writes the latent_height x latent_width similarity map of one prototype.
///
/// # Safety
/// `image` must point to `image_len` values and `out` to `out_len`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn pl_model_similarity_map(
    model: *const PlModel,
    image: *const f64,
    image_len: usize,
    prototype: usize,
    out: *mut f64,
    out_len: usize,
) -> PlStatus {
    guard(|| {
        let m = model_ref(model)?;
        if prototype >= m.config.prototypes() {
            return Err(Failure(
                PlStatus::InvalidArgument,
                format!(
                    "prototype {prototype} out of range ({} prototypes)",
                    m.config.prototypes()
                ),
            ));
        }
        let img = input_image(m, image, image_len)?;
        let (lh, lw, _) = m.config.latent_dims();
        let dst = output_slice(out, out_len, lh * lw, "out")?;
        let inf = predict(m, &img)?;
        dst.copy_from_slice(inf.map.slice(prototype));
        Ok(())
    })
}

/// Compresses and decompresses a 3-channel image with the built-in codec.
///
/// # Safety
/// `image` and `out` must each point to `3 * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn pl_codec_roundtrip(
    image: *const f64,
    height: usize,
    width: usize,
    quality: u8,
    chroma_subsampling: bool,
    out: *mut f64,
) -> PlStatus {
    guard(|| {
        if image.is_null() {
            return Err(null("image"));
        }
        if !(1..=100).contains(&quality) {
            return Err(Failure(
                PlStatus::InvalidArgument,
                format!("quality {quality} not in 1..=100"),
            ));
        }
        let n = 3 * height * width;
        let dst = output_slice(out, n, n, "out")?;
        let img = Tensor::new(vec![3, height, width], std::slice::from_raw_parts(image, n).to_vec())?;
        let decoded = compress_decompress(
            &img,
            &CodecConfig {
                quality,
                chroma_subsampling,
            },
        )?;
        dst.copy_from_slice(decoded.data());
        Ok(())
    })
}
