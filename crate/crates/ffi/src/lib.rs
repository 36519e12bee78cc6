//! C interface to `stackddd`.
//!
//! Panels live behind an opaque [`SdddPanel`] handle. Every fallible call
//! returns a status code (`SDDD_OK` on success) and writes its result through
//! an out-pointer; results other than handles are UTF-8 JSON strings owned by
//! the caller and released with [`sddd_string_free`]. After a failure,
//! [`sddd_last_error`] describes it on the calling thread.
//!
//! Settings passed as JSON use the same field names as the command-line
//! `resolved_config.json` (`L`, `K`, `rule`, `weights`, `alpha`, `bootstrap`,
//! `spec`, ...); omitted fields take their defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stackddd::cli::{decompose_panel, estimate, RunConfig};
use stackddd::panel::{load_panel, load_panel_path, validate_panel};
use stackddd::simulation::{simulate_panel, DgpConfig};
use stackddd::{Error, PanelDataset, Schema};

pub const SDDD_OK: i32 = 0;
/// A required pointer argument was null.
pub const SDDD_ERR_NULL: i32 = 1;
/// A string argument was not UTF-8 or a JSON argument did not parse.
pub const SDDD_ERR_ARGUMENT: i32 = 2;
pub const SDDD_ERR_IO: i32 = 3;
/// Malformed panel input: parse, schema or duplicate-observation errors.
pub const SDDD_ERR_DATA: i32 = 4;
/// The data or design do not support the requested computation.
pub const SDDD_ERR_ESTIMATION: i32 = 5;
/// The panel failed validation; the report is still written.
pub const SDDD_ERR_INVALID_PANEL: i32 = 6;
/// An internal panic was caught at the boundary.
pub const SDDD_ERR_PANIC: i32 = 7;

/// Opaque panel handle.
pub struct SdddPanel {
    inner: PanelDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_io() {
            SDDD_ERR_IO
        } else {
            match e {
                Error::Parse { .. } | Error::Duplicate { .. } | Error::Schema(_) | Error::Csv(_) => SDDD_ERR_DATA,
                Error::Json(_) | Error::Config(_) | Error::Parameter(_) => SDDD_ERR_ARGUMENT,
                _ => SDDD_ERR_ESTIMATION,
            }
        };
        Failure::new(code, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            SDDD_OK
        }
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            SDDD_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(SDDD_ERR_NULL, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(SDDD_ERR_ARGUMENT, format!("{name} is not valid UTF-8")))
}

/// Null means "use defaults".
unsafe fn json_arg<T: serde::de::DeserializeOwned + Default>(p: *const c_char, name: &str) -> Result<T, Failure> {
    if p.is_null() {
        return Ok(T::default());
    }
    let text = str_arg(p, name)?;
    serde_json::from_str(text).map_err(|e| Failure::new(SDDD_ERR_ARGUMENT, format!("{name}: {e}")))
}

unsafe fn panel_arg<'a>(p: *const SdddPanel) -> Result<&'a PanelDataset, Failure> {
    p.as_ref()
        .map(|h| &h.inner)
        .ok_or_else(|| Failure::new(SDDD_ERR_NULL, "panel is null"))
}

unsafe fn check_out<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure::new(SDDD_ERR_NULL, "output pointer is null"))
    } else {
        Ok(())
    }
}

unsafe fn write_json(out: *mut *mut c_char, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string(value).map_err(|e| Failure::from(Error::from(e)))?;
    *out = CString::new(text).expect("JSON has no nul bytes").into_raw();
    Ok(())
}

unsafe fn write_panel(out: *mut *mut SdddPanel, ds: PanelDataset) {
    *out = Box::into_raw(Box::new(SdddPanel { inner: ds }));
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sddd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sddd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a panel from a CSV file. `schema_json` maps column names and may be null.
///
/// # Safety
/// `path` must be a valid NUL-terminated string, `schema_json` null or
/// NUL-terminated, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sddd_panel_read_csv(
    path: *const c_char,
    schema_json: *const c_char,
    out: *mut *mut SdddPanel,
) -> i32 {
    guard(|| {
        check_out(out)?;
        let path = str_arg(path, "path")?;
        let schema: Schema = json_arg(schema_json, "schema_json")?;
        write_panel(out, load_panel_path(path, &schema)?);
        Ok(())
    })
}

/// Parses a panel from an in-memory CSV buffer of `len` bytes.
///
/// # Safety
/// `data` must point to `len` readable bytes; see [`sddd_panel_read_csv`].
#[no_mangle]
pub unsafe extern "C" fn sddd_panel_parse_csv(
    data: *const u8,
    len: usize,
    schema_json: *const c_char,
    out: *mut *mut SdddPanel,
) -> i32 {
    guard(|| {
        check_out(out)?;
        if data.is_null() {
            return Err(Failure::new(SDDD_ERR_NULL, "data is null"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let schema: Schema = json_arg(schema_json, "schema_json")?;
        write_panel(out, load_panel(bytes, &schema)?);
        Ok(())
    })
}

/// Simulates a panel from a JSON data-generating configuration.
///
/// # Safety
/// `dgp_json` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sddd_panel_simulate(dgp_json: *const c_char, out: *mut *mut SdddPanel) -> i32 {
    guard(|| {
        check_out(out)?;
        let text = str_arg(dgp_json, "dgp_json")?;
        let cfg: DgpConfig =
            serde_json::from_str(text).map_err(|e| Failure::new(SDDD_ERR_ARGUMENT, format!("dgp_json: {e}")))?;
        write_panel(out, simulate_panel(&cfg)?);
        Ok(())
    })
}

/// Releases a panel. Null is ignored.
///
/// # Safety
/// `panel` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sddd_panel_free(panel: *mut SdddPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Number of units in the panel.
///
/// # Safety
/// `panel` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sddd_panel_n_units(panel: *const SdddPanel, out: *mut usize) -> i32 {
    guard(|| {
        check_out(out)?;
        *out = panel_arg(panel)?.len();
        Ok(())
    })
}

/// Validation report as JSON. Returns `SDDD_ERR_INVALID_PANEL` when the
/// report lists violations; `*out_json` is set in both cases.
///
/// # Safety
/// `panel` must be a live handle and `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sddd_validate(panel: *const SdddPanel, out_json: *mut *mut c_char) -> i32 {
    let mut clean = true;
    let code = guard(|| {
        check_out(out_json)?;
        let report = validate_panel(panel_arg(panel)?);
        clean = report.is_clean();
        write_json(out_json, &serde_json::to_value(&report).map_err(Error::from)?)
    });
    if code == SDDD_OK && !clean {
        set_last_error("panel has validation violations");
        return SDDD_ERR_INVALID_PANEL;
    }
    code
}

/// Stacked event study. The JSON result has `stacks`, `event_study` and
/// `inference` members shaped like the command-line output files.
///
/// # Safety
/// `panel` must be a live handle, `config_json` null or NUL-terminated, and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sddd_estimate(
    panel: *const SdddPanel,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> i32 {
    guard(|| {
        check_out(out_json)?;
        let ds = panel_arg(panel)?;
        let cfg: RunConfig = json_arg(config_json, "config_json")?;
        let res = estimate(ds, &cfg)?;
        let value = serde_json::json!({
            "stacks": res.stacks_json(ds),
            "event_study": res.event_study,
            "inference": res.inference_json(cfg.alpha),
        });
        write_json(out_json, &value)
    })
}

/// Implicit-weight decomposition of the pooled event study. The JSON result
/// has `aux_weights`, `agg_weights`, `properties` and `decomposition` members.
///
/// # Safety
/// Same as [`sddd_estimate`].
#[no_mangle]
pub unsafe extern "C" fn sddd_decompose(
    panel: *const SdddPanel,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> i32 {
    guard(|| {
        check_out(out_json)?;
        let ds = panel_arg(panel)?;
        let cfg: RunConfig = json_arg(config_json, "config_json")?;
        let res = decompose_panel(ds, &cfg)?;
        let value = serde_json::json!({
            "aux_weights": res.weights,
            "agg_weights": res.aggregated,
            "properties": res.properties,
            "decomposition": res.decomposition_json(),
        });
        write_json(out_json, &value)
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sddd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
