//! C ABI over the diffseg core.
//!
//! Datasets and models cross the boundary as opaque handles released with
//! the matching `*_free`. Every fallible call returns a [`DsStatus`]; on
//! failure the message is kept per thread and read back with
//! [`ds_last_error`]. Results go through caller-provided pointers and are
//! written only on success, except the required length reported alongside
//! `BufferTooSmall`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use diffseg::data::{generate, mix_seed_str, read_dataset, split_train_val, write_dataset, Dataset, DatasetKind, DatasetSpec, MaskImagePair};
use diffseg::metrics::{bayes_mmse_at, ece, iou, parse_t_grid, profile_mask_error, ECE_BINS};
use diffseg::model::{DenoiserModel, ModelConfig, Variant};
use diffseg::train::{evaluate, train, Experiment, ScheduleConfig, TrainConfig};
use diffseg::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Data = 4,
    State = 5,
    Config = 6,
    Singularity = 7,
    Format = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Which part of a dataset an index refers to.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsSplit {
    Train = 0,
    Val = 1,
}

/// A generated or loaded dataset.
pub struct DsDataset(Dataset);

/// A trained denoiser.
pub struct DsModel(DenoiserModel);

/// Training options; start from [`ds_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DsTrainOptions {
    /// 1 to 4 for experiments e1 to e4.
    pub experiment: u32,
    /// 0 concat, 1 encoder_sum, 2 ff_parser.
    pub variant: u32,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DsStatus {
    match e {
        Error::Shape(_) => DsStatus::Shape,
        Error::Data(_) => DsStatus::Data,
        Error::State(_) => DsStatus::State,
        Error::Config(_) => DsStatus::Config,
        Error::Singularity(_) => DsStatus::Singularity,
        Error::Format(_) => DsStatus::Format,
        Error::Io(_) => DsStatus::Io,
    }
}

/// Failure before reaching the core: bad pointers, strings or buffers.
struct Fail(DsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside diffseg".into());
            DsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Fail(DsStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(DsStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| Fail(DsStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(DsStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| Fail(DsStatus::NullPointer, format!("{name} is null")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates `count` synthetic pairs of `kind` ("lesion", "nuclei" or
/// "tumor") at `size`×`size`, split into train/val by `train_ratio`.
///
/// # Safety
/// `kind` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_dataset_generate(
    kind: *const c_char,
    count: usize,
    size: usize,
    seed: u64,
    train_ratio: f64,
    out: *mut *mut DsDataset,
) -> DsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind: DatasetKind = str_arg(kind, "kind")?.parse()?;
        let items = generate(&DatasetSpec::new(kind, count, size, mix_seed_str(seed, "data")))?;
        let (train, val) = split_train_val(&items, train_ratio, mix_seed_str(seed, "split"))?;
        *out = Box::into_raw(Box::new(DsDataset(Dataset { kind: kind.as_str().into(), size, train, val })));
        Ok(())
    })
}

/// Reads a dataset directory of PGM pairs.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_dataset_load(dir: *const c_char, out: *mut *mut DsDataset) -> DsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = read_dataset(Path::new(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(DsDataset(ds)));
        Ok(())
    })
}

/// Writes a dataset as PGM pairs plus a manifest.
///
/// # Safety
/// `ds` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ds_dataset_save(ds: *const DsDataset, dir: *const c_char) -> DsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        write_dataset(Path::new(str_arg(dir, "dir")?), &ds.0)?;
        Ok(())
    })
}

/// Releases a dataset; NULL is ignored.
///
/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_dataset_free(ds: *mut DsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

fn split_items(ds: &DsDataset, split: DsSplit) -> &[MaskImagePair] {
    match split {
        DsSplit::Train => &ds.0.train,
        DsSplit::Val => &ds.0.val,
    }
}

/// Number of pairs in a split and the side length of every image.
///
/// # Safety
/// `ds` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_dataset_info(ds: *const DsDataset, split: DsSplit, out_len: *mut usize, out_size: *mut usize) -> DsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        *out_arg(out_len, "out_len")? = split_items(ds, split).len();
        *out_arg(out_size, "out_size")? = ds.0.size;
        Ok(())
    })
}

/// Copies the mask (`image == 0`) or condition image (`image != 0`) of one
/// pair into `buf`, row-major; `buf_len` must be at least size².
///
/// # Safety
/// `ds` must come from this library and `buf` must hold `buf_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_dataset_pixels(ds: *const DsDataset, split: DsSplit, index: usize, image: i32, buf: *mut f64, buf_len: usize) -> DsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let items = split_items(ds, split);
        let pair = items.get(index).ok_or_else(|| Fail(DsStatus::Config, format!("index {index} outside split of {}", items.len())))?;
        let src = if image != 0 { &pair.image } else { &pair.mask };
        if buf_len < src.len() {
            return Err(Fail(DsStatus::BufferTooSmall, format!("buffer holds {buf_len} values, need {}", src.len())));
        }
        if buf.is_null() {
            return Err(Fail(DsStatus::NullPointer, "buf is null".into()));
        }
        std::slice::from_raw_parts_mut(buf, src.len()).copy_from_slice(src);
        Ok(())
    })
}

/// Defaults for an experiment number, clamped to 1..=4.
#[no_mangle]
pub extern "C" fn ds_train_options_default(experiment: u32) -> DsTrainOptions {
    let n = experiment.clamp(1, 4);
    let e = experiment_of(n).expect("clamped to a valid experiment");
    let m = ModelConfig::default();
    let s = ScheduleConfig::default();
    let c = TrainConfig::new(e, m);
    DsTrainOptions {
        experiment: n,
        variant: 0,
        base_channels: m.base_channels,
        depth: m.depth,
        time_embed_dim: m.time_embed_dim,
        diffusion_steps: s.steps,
        beta_start: s.beta_start,
        beta_end: s.beta_end,
        lr: c.lr,
        batch_size: c.batch_size,
        train_steps: c.steps,
        seed: 0,
    }
}

fn experiment_of(n: u32) -> Option<Experiment> {
    Experiment::ALL.get((n as usize).checked_sub(1)?).copied()
}

/// Trains a model on the dataset's train split.
///
/// # Safety
/// `ds` must come from this library; `opts` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_train(ds: *const DsDataset, opts: *const DsTrainOptions, out: *mut *mut DsModel) -> DsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let o = ref_arg(opts, "opts")?;
        let out = out_arg(out, "out")?;
        let e = experiment_of(o.experiment).ok_or_else(|| Fail(DsStatus::Config, format!("experiment {} outside 1..=4", o.experiment)))?;
        let variant = *Variant::ALL.get(o.variant as usize).ok_or_else(|| Fail(DsStatus::Config, format!("variant {} outside 0..=2", o.variant)))?;
        let model = ModelConfig {
            variant,
            base_channels: o.base_channels,
            depth: o.depth,
            time_embed_dim: o.time_embed_dim,
            image_channels: 1,
            size: ds.0.size,
        };
        let cfg = TrainConfig {
            schedule: ScheduleConfig { steps: o.diffusion_steps, beta_start: o.beta_start, beta_end: o.beta_end },
            lr: o.lr,
            batch_size: o.batch_size,
            steps: o.train_steps,
            seed: o.seed,
            ..TrainConfig::new(e, model)
        };
        let trained = train(&cfg, &ds.0)?;
        *out = Box::into_raw(Box::new(DsModel(trained.model)));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_model_load(path: *const c_char, out: *mut *mut DsModel) -> DsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = DenoiserModel::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(DsModel(m)));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ds_model_save(model: *const DsModel, path: *const c_char) -> DsStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.0.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_model_free(model: *mut DsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Diffusion length T and input side length of a model.
///
/// # Safety
/// `model` must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_model_info(model: *const DsModel, out_steps: *mut usize, out_size: *mut usize) -> DsStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out_steps, "out_steps")? = m.0.steps();
        *out_arg(out_size, "out_size")? = m.0.config().size;
        Ok(())
    })
}

/// Ensembled mean IoU and pooled ECE of a segmentation model on the val split.
///
/// # Safety
/// Handles must come from this library; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ds_evaluate(
    model: *const DsModel,
    ds: *const DsDataset,
    ensemble_n: usize,
    seed: u64,
    out_mean_iou: *mut f64,
    out_ece: *mut f64,
) -> DsStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "dataset")?;
        let (iou_out, ece_out) = (out_arg(out_mean_iou, "out_mean_iou")?, out_arg(out_ece, "out_ece")?);
        let report = evaluate(&m.0, &ds.0.val, ensemble_n, &m.0.schedule()?, seed)?;
        *iou_out = report.mean_iou;
        *ece_out = report.calibration.ece;
        Ok(())
    })
}

/// Per-timestep mask prediction error on the val split for the grid
/// `t_grid` ("start:end:stride", zero-based). Writes up to `buf_len` values
/// to `values` and `ts`, and the grid length to `out_len`; a short buffer
/// fails with `BufferTooSmall` after setting `out_len`.
///
/// # Safety
/// Handles must come from this library; `values` and `ts` must hold
/// `buf_len` elements; `t_grid` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ds_profile_mask_error(
    model: *const DsModel,
    ds: *const DsDataset,
    t_grid: *const c_char,
    conditioned: i32,
    n_eval: usize,
    seed: u64,
    ts: *mut usize,
    values: *mut f64,
    buf_len: usize,
    out_len: *mut usize,
) -> DsStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "dataset")?;
        let out_len = out_arg(out_len, "out_len")?;
        let grid = parse_t_grid(str_arg(t_grid, "t_grid")?, m.0.steps())?;
        *out_len = grid.len();
        if buf_len < grid.len() {
            return Err(Fail(DsStatus::BufferTooSmall, format!("buffer holds {buf_len} values, grid has {}", grid.len())));
        }
        if ts.is_null() || values.is_null() {
            return Err(Fail(DsStatus::NullPointer, "ts or values is null".into()));
        }
        let pairs = if ds.0.val.is_empty() { &ds.0.train } else { &ds.0.val };
        let p = profile_mask_error(&m.0, pairs, &m.0.schedule()?, &grid, conditioned != 0, n_eval, seed)?;
        std::slice::from_raw_parts_mut(ts, grid.len()).copy_from_slice(&p.t_grid);
        std::slice::from_raw_parts_mut(values, grid.len()).copy_from_slice(&p.values);
        Ok(())
    })
}

/// Intersection over union of two binary masks of `len` pixels.
///
/// # Safety
/// `pred` and `gt` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_iou(pred: *const f64, gt: *const f64, len: usize, out: *mut f64) -> DsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = iou(slice_arg(pred, len, "pred")?, slice_arg(gt, len, "gt")?)?;
        Ok(())
    })
}

/// Expected calibration error over ten confidence bins.
///
/// # Safety
/// `prob` and `gt` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_ece(prob: *const f64, gt: *const f64, len: usize, out: *mut f64) -> DsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ece(slice_arg(prob, len, "prob")?, slice_arg(gt, len, "gt")?, ECE_BINS)?.ece;
        Ok(())
    })
}

/// Minimum per-pixel squared error for recovering a ±1 pixel with prior
/// `prior_p` of being foreground from √ᾱ·x + √(1−ᾱ)·ε.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ds_bayes_mmse(prior_p: f64, alpha_bar: f64, out: *mut f64) -> DsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = bayes_mmse_at(prior_p, alpha_bar)?;
        Ok(())
    })
}
