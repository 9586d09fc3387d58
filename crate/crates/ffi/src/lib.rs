//! C ABI over the `spatrob` library.
//!
//! Conventions:
//! - Every fallible function returns a [`SpatrobStatus`]; results go through out-pointers.
//! - Handles are opaque and owned by the caller once returned; release them with the matching
//!   `*_free` function. Passing null to a `*_free` function is a no-op.
//! - Images are passed as [`SpatrobImage`] views of `channels * height * width` doubles in
//!   channel-row-column order. The library never retains caller pointers.
//! - After a non-OK status, [`spatrob_last_error`] describes the failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use spatrob::attacks::{grid_attack, worst_of_k, AttackOutcome, Classifier, GridOptions, Sampling};
use spatrob::data::{load_checkpoint, load_idx, save_checkpoint, Dataset, Provenance};
use spatrob::nn::{build_mnist_net, Network};
use spatrob::warp::apply_transform;
use spatrob::{AttackSpace, Error, ImageTensor, TransformParams};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatrobStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Io = 3,
    /// Malformed dataset or checkpoint file.
    Format = 4,
    /// An output buffer is too small; the required size was reported where applicable.
    BufferTooSmall = 5,
    /// Internal failure; the library state is unaffected.
    Panic = 6,
}

/// Opaque trained or freshly initialized classifier.
pub struct SpatrobNet {
    net: Network<f32>,
}

/// Opaque labeled image collection.
pub struct SpatrobDataset {
    data: Dataset,
}

/// Borrowed image view.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpatrobImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: *const f64,
}

/// Admissible transform box and grid resolution. Grid counts must be odd.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpatrobAttackSpace {
    pub max_trans: f64,
    pub max_rot: f64,
    pub trans_grid_points: usize,
    pub rot_grid_points: usize,
}

/// Result of a spatial attack on one example. `theta` is in degrees.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpatrobOutcome {
    pub fooled: bool,
    pub du: f64,
    pub dv: f64,
    pub theta: f64,
    pub best_loss: f64,
    pub adversarial_prediction: usize,
    pub queries_used: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(SpatrobStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidInput(_) => SpatrobStatus::InvalidInput,
            Error::Io(_) => SpatrobStatus::Io,
            _ => SpatrobStatus::Format,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SpatrobStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpatrobStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpatrobStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SpatrobStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(SpatrobStatus::InvalidInput, format!("{what} is not valid UTF-8")))
}

unsafe fn image_arg(img: *const SpatrobImage) -> Result<ImageTensor, Fail> {
    let img = img.as_ref().ok_or_else(|| null("image"))?;
    if img.data.is_null() {
        return Err(null("image data"));
    }
    let n = img
        .channels
        .checked_mul(img.height)
        .and_then(|v| v.checked_mul(img.width))
        .ok_or_else(|| Fail(SpatrobStatus::InvalidInput, "image dimensions overflow".into()))?;
    let data = std::slice::from_raw_parts(img.data, n).to_vec();
    Ok(ImageTensor::new(img.channels, img.height, img.width, data)?)
}

unsafe fn net_arg<'a>(net: *const SpatrobNet) -> Result<&'a SpatrobNet, Fail> {
    net.as_ref().ok_or_else(|| null("net"))
}

unsafe fn space_arg(s: *const SpatrobAttackSpace) -> Result<AttackSpace, Fail> {
    let s = s.as_ref().ok_or_else(|| null("space"))?;
    Ok(AttackSpace::new(s.max_trans, s.max_rot, s.trans_grid_points, s.rot_grid_points)?)
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

fn outcome(o: AttackOutcome) -> SpatrobOutcome {
    SpatrobOutcome {
        fooled: o.fooled,
        du: o.best_params.du,
        dv: o.best_params.dv,
        theta: o.best_params.theta,
        best_loss: o.best_loss,
        adversarial_prediction: o.adversarial_prediction,
        queries_used: o.queries_used,
    }
}

/// Message for the last failure on this thread, or null if none. Valid until the next call
/// into this library on the same thread.
#[no_mangle]
pub extern "C" fn spatrob_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// The default MNIST space: ±3 px, ±30°, 5×5×31 grid.
#[no_mangle]
pub extern "C" fn spatrob_attack_space_mnist() -> SpatrobAttackSpace {
    let s = AttackSpace::mnist();
    SpatrobAttackSpace {
        max_trans: s.max_trans(),
        max_rot: s.max_rot(),
        trans_grid_points: s.trans_grid_points(),
        rot_grid_points: s.rot_grid_points(),
    }
}

/// Builds the MNIST architecture with seeded random weights.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn spatrob_net_build_mnist(seed: u64, out: *mut *mut SpatrobNet) -> SpatrobStatus {
    guard(|| {
        let h = Box::new(SpatrobNet {
            net: build_mnist_net(seed),
        });
        write_out(out, Box::into_raw(h), "out")
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn spatrob_net_load(path: *const c_char, out: *mut *mut SpatrobNet) -> SpatrobStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (net, _) = load_checkpoint(path)?;
        write_out(out, Box::into_raw(Box::new(SpatrobNet { net })), "out")
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `net` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spatrob_net_save(net: *const SpatrobNet, path: *const c_char) -> SpatrobStatus {
    guard(|| {
        let net = net_arg(net)?;
        let path = path_arg(path, "path")?;
        let prov = Provenance {
            notes: "saved through the C interface".into(),
            ..Provenance::default()
        };
        Ok(save_checkpoint(&net.net, &prov, path)?)
    })
}

/// # Safety
/// `net` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn spatrob_net_free(net: *mut SpatrobNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spatrob_net_num_classes(net: *const SpatrobNet) -> usize {
    net.as_ref().map_or(0, |n| n.net.num_classes())
}

/// Writes the logits for one image into `out` (capacity `out_len`, at least the class count).
///
/// # Safety
/// `image` must describe a readable buffer; `out` must be writable for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn spatrob_net_logits(
    net: *const SpatrobNet,
    image: *const SpatrobImage,
    out: *mut f64,
    out_len: usize,
) -> SpatrobStatus {
    guard(|| {
        let net = net_arg(net)?;
        let img = image_arg(image)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let z = net.net.forward(&img)?;
        if out_len < z.len() {
            return Err(Fail(
                SpatrobStatus::BufferTooSmall,
                format!("need {} logits, buffer holds {out_len}", z.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, z.len()).copy_from_slice(&z);
        Ok(())
    })
}

/// Predicted class (argmax of logits, ties to the lowest index).
///
/// # Safety
/// As [`spatrob_net_logits`]; `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spatrob_net_predict(
    net: *const SpatrobNet,
    image: *const SpatrobImage,
    out_class: *mut usize,
) -> SpatrobStatus {
    guard(|| {
        let net = net_arg(net)?;
        let img = image_arg(image)?;
        let c = Classifier::predict(&net.net, &img)?;
        write_out(out_class, c, "out_class")
    })
}

/// Rotates by `theta` degrees (counter-clockwise) and translates by `(du, dv)` pixels, with
/// bilinear sampling and zero fill. `out` must hold as many doubles as the input.
///
/// # Safety
/// `image` must describe a readable buffer; `out` must be writable for the same length.
#[no_mangle]
pub unsafe extern "C" fn spatrob_apply_transform(
    image: *const SpatrobImage,
    du: f64,
    dv: f64,
    theta: f64,
    out: *mut f64,
    out_len: usize,
) -> SpatrobStatus {
    guard(|| {
        let img = image_arg(image)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < img.len() {
            return Err(Fail(
                SpatrobStatus::BufferTooSmall,
                format!("need {} values, buffer holds {out_len}", img.len()),
            ));
        }
        let w = apply_transform(&img, &TransformParams::new(du, dv, theta))?;
        std::slice::from_raw_parts_mut(out, w.len()).copy_from_slice(w.data());
        Ok(())
    })
}

/// Exhaustive grid attack (no early exit).
///
/// # Safety
/// Pointers must be valid as described on the types.
#[no_mangle]
pub unsafe extern "C" fn spatrob_grid_attack(
    net: *const SpatrobNet,
    image: *const SpatrobImage,
    label: usize,
    space: *const SpatrobAttackSpace,
    out: *mut SpatrobOutcome,
) -> SpatrobStatus {
    guard(|| {
        let net = net_arg(net)?;
        let img = image_arg(image)?;
        let space = space_arg(space)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let o = grid_attack(&net.net, &img, label, &space, GridOptions::default())?;
        write_out(out, outcome(o), "out")
    })
}

/// Worst of `k` uniform samples from the continuous box.
///
/// # Safety
/// Pointers must be valid as described on the types.
#[no_mangle]
pub unsafe extern "C" fn spatrob_worst_of_k(
    net: *const SpatrobNet,
    image: *const SpatrobImage,
    label: usize,
    space: *const SpatrobAttackSpace,
    k: usize,
    seed: u64,
    out: *mut SpatrobOutcome,
) -> SpatrobStatus {
    guard(|| {
        let net = net_arg(net)?;
        let img = image_arg(image)?;
        let space = space_arg(space)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let o = worst_of_k(&net.net, &img, label, &space, k, seed, Sampling::Continuous)?;
        write_out(out, outcome(o), "out")
    })
}

/// Loads an IDX images/labels pair (gzip detected automatically).
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn spatrob_dataset_load_idx(
    images_path: *const c_char,
    labels_path: *const c_char,
    out: *mut *mut SpatrobDataset,
) -> SpatrobStatus {
    guard(|| {
        let ip = path_arg(images_path, "images_path")?;
        let lp = path_arg(labels_path, "labels_path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let data = load_idx(ip, lp)?;
        write_out(out, Box::into_raw(Box::new(SpatrobDataset { data })), "out")
    })
}

/// Number of examples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spatrob_dataset_len(ds: *const SpatrobDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.data.len())
}

/// Copies example `index` into `pixels` (capacity `pixels_len`) and writes its label and shape.
/// Any of `label`, `channels`, `height`, `width` may be null.
///
/// # Safety
/// `pixels` must be writable for `pixels_len` doubles; other out-pointers null or writable.
#[no_mangle]
pub unsafe extern "C" fn spatrob_dataset_get(
    ds: *const SpatrobDataset,
    index: usize,
    pixels: *mut f64,
    pixels_len: usize,
    label: *mut usize,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> SpatrobStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let (im, y) = ds.data.get(index).ok_or_else(|| {
            Fail(
                SpatrobStatus::InvalidInput,
                format!("index {index} out of range for {} examples", ds.data.len()),
            )
        })?;
        for (p, v) in [(channels, im.channels()), (height, im.height()), (width, im.width())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        if !label.is_null() {
            label.write(y);
        }
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if pixels_len < im.len() {
            return Err(Fail(
                SpatrobStatus::BufferTooSmall,
                format!("need {} values, buffer holds {pixels_len}", im.len()),
            ));
        }
        std::slice::from_raw_parts_mut(pixels, im.len()).copy_from_slice(im.data());
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn spatrob_dataset_free(ds: *mut SpatrobDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}
