//! C ABI for the imsim simulator: run or validate a scenario supplied as
//! text and read the resulting trace, CDR log and expectation results
//! through an opaque report handle.
//!
//! Conventions:
//! - Every returned `char*` except [`imsim_version`] is owned by the
//!   caller and must be released with [`imsim_string_free`].
//! - Reports are released with [`imsim_report_free`].
//! - Functions return [`ImsimStatus`]; on `LoadError` the message is
//!   available from [`imsim_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use imsim::runner::run_scenario;
use imsim::scenario;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let cstring = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImsimStatus {
    /// The call succeeded; for runs, every expectation passed.
    Ok = 0,
    /// The run finished but at least one expectation failed.
    ExpectFailed = 1,
    /// The scenario could not be parsed or validated.
    LoadError = 2,
    /// A required pointer argument was null.
    NullArgument = 3,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 4,
}

/// Opaque run report handle.
pub struct ImsimReport {
    inner: imsim::RunReport,
}

fn to_owned_cstring(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// # Safety
/// `text` must be a valid NUL-terminated string; `out_report` must be a
/// valid writable pointer. On `Ok`/`ExpectFailed` the caller owns the
/// report written to `out_report`.
#[no_mangle]
pub unsafe extern "C" fn imsim_run_text(
    text: *const c_char,
    seed: u64,
    out_report: *mut *mut ImsimReport,
) -> ImsimStatus {
    if text.is_null() || out_report.is_null() {
        return ImsimStatus::NullArgument;
    }
    unsafe { *out_report = ptr::null_mut() };
    let Ok(text) = unsafe { CStr::from_ptr(text) }.to_str() else {
        return ImsimStatus::InvalidUtf8;
    };
    let sc = match scenario::parse_str(text) {
        Ok(sc) => sc,
        Err(e) => {
            set_last_error(e.to_string());
            return ImsimStatus::LoadError;
        }
    };
    let report = run_scenario(sc, seed);
    let status = if report.exit_code == 0 {
        ImsimStatus::Ok
    } else {
        ImsimStatus::ExpectFailed
    };
    let boxed = Box::new(ImsimReport { inner: report });
    unsafe { *out_report = Box::into_raw(boxed) };
    status
}

/// Parses and reference-checks a scenario without running it.
///
/// # Safety
/// `text` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn imsim_validate_text(text: *const c_char) -> ImsimStatus {
    if text.is_null() {
        return ImsimStatus::NullArgument;
    }
    let Ok(text) = unsafe { CStr::from_ptr(text) }.to_str() else {
        return ImsimStatus::InvalidUtf8;
    };
    match scenario::parse_str(text) {
        Ok(_) => ImsimStatus::Ok,
        Err(e) => {
            set_last_error(e.to_string());
            ImsimStatus::LoadError
        }
    }
}

/// Exit code of the run: 0 all expectations passed, 1 otherwise.
///
/// # Safety
/// `report` must be a live handle from [`imsim_run_text`].
#[no_mangle]
pub unsafe extern "C" fn imsim_report_exit_code(report: *const ImsimReport) -> i32 {
    if report.is_null() {
        return -1;
    }
    unsafe { &*report }.inner.exit_code
}

/// The rendered event trace. Caller frees via [`imsim_string_free`].
///
/// # Safety
/// `report` must be a live handle from [`imsim_run_text`].
#[no_mangle]
pub unsafe extern "C" fn imsim_report_trace(report: *const ImsimReport) -> *mut c_char {
    if report.is_null() {
        return ptr::null_mut();
    }
    to_owned_cstring(&unsafe { &*report }.inner.trace)
}

/// The charging record dump. Caller frees via [`imsim_string_free`].
///
/// # Safety
/// `report` must be a live handle from [`imsim_run_text`].
#[no_mangle]
pub unsafe extern "C" fn imsim_report_cdr(report: *const ImsimReport) -> *mut c_char {
    if report.is_null() {
        return ptr::null_mut();
    }
    to_owned_cstring(&unsafe { &*report }.inner.cdr)
}

/// Number of expectations the scenario declared.
///
/// # Safety
/// `report` must be a live handle from [`imsim_run_text`].
#[no_mangle]
pub unsafe extern "C" fn imsim_report_expect_count(report: *const ImsimReport) -> usize {
    if report.is_null() {
        return 0;
    }
    unsafe { &*report }.inner.expects.len()
}

/// One expectation result as `PASS <desc>` or `FAIL <desc>: <detail>`.
/// Returns null when the index is out of range; caller frees the string.
///
/// # Safety
/// `report` must be a live handle from [`imsim_run_text`].
#[no_mangle]
pub unsafe extern "C" fn imsim_report_expect_line(
    report: *const ImsimReport,
    index: usize,
) -> *mut c_char {
    if report.is_null() {
        return ptr::null_mut();
    }
    let Some(e) = unsafe { &*report }.inner.expects.get(index) else {
        return ptr::null_mut();
    };
    let line = if e.passed {
        format!("PASS {}", e.description)
    } else {
        format!("FAIL {}: {}", e.description, e.detail)
    };
    to_owned_cstring(&line)
}

/// Last load error on this thread, or null. Caller frees the string.
#[no_mangle]
pub extern "C" fn imsim_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map(|s| to_owned_cstring(s.to_str().unwrap_or("")))
            .unwrap_or(ptr::null_mut())
    })
}

/// Crate version as a static string; do not free.
#[no_mangle]
pub extern "C" fn imsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a report handle.
///
/// # Safety
/// `report` must come from [`imsim_run_text`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn imsim_report_free(report: *mut ImsimReport) {
    if !report.is_null() {
        drop(unsafe { Box::from_raw(report) });
    }
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from an imsim-ffi function that transfers ownership and
/// not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn imsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENARIO: &str = "\
DOMAIN home.net
NODE TERMINAL t1 DOMAIN home.net
NODE PCSCF pcscf1 DOMAIN home.net
NODE ICSCF icscf1 DOMAIN home.net
NODE SCSCF scscf1 DOMAIN home.net
NODE HSS hss1 DOMAIN home.net
LINK t1 pcscf1 LATENCY 1
LINK pcscf1 icscf1 LATENCY 1
LINK pcscf1 scscf1 LATENCY 1
LINK icscf1 scscf1 LATENCY 1
LINK icscf1 hss1 LATENCY 1
LINK scscf1 hss1 LATENCY 1
USER john PRIVATE john@home.net PUBLIC sip:john@home.net SECRET sj MEDIA audio
ACTION register john VIA t1
EXPECT scscf john scscf1
\0";

    fn take_string(ptr: *mut c_char) -> String {
        assert!(!ptr.is_null());
        let s = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string();
        unsafe { imsim_string_free(ptr) };
        s
    }

    #[test]
    fn run_and_read_report_through_the_c_surface() {
        let mut report: *mut ImsimReport = ptr::null_mut();
        let status = unsafe {
            imsim_run_text(
                SCENARIO.as_ptr().cast(),
                0,
                &mut report as *mut *mut ImsimReport,
            )
        };
        assert_eq!(status, ImsimStatus::Ok);
        assert!(!report.is_null());

        assert_eq!(unsafe { imsim_report_exit_code(report) }, 0);
        assert_eq!(unsafe { imsim_report_expect_count(report) }, 1);

        let line = take_string(unsafe { imsim_report_expect_line(report, 0) });
        assert_eq!(line, "PASS scscf john scscf1");
        assert!(unsafe { imsim_report_expect_line(report, 9) }.is_null());

        let trace = take_string(unsafe { imsim_report_trace(report) });
        assert!(trace.starts_with("TRACE v1 seed=0"));
        assert!(trace.contains("flow=reg-1 registered"));

        let cdr = take_string(unsafe { imsim_report_cdr(report) });
        assert!(cdr.contains("Register"));

        unsafe { imsim_report_free(report) };
    }

    #[test]
    fn load_errors_surface_with_a_message() {
        let bad = "NODE WIDGET x DOMAIN d\0";
        let mut report: *mut ImsimReport = ptr::null_mut();
        let status = unsafe { imsim_run_text(bad.as_ptr().cast(), 0, &mut report) };
        assert_eq!(status, ImsimStatus::LoadError);
        assert!(report.is_null());
        let msg = take_string(imsim_last_error());
        assert!(msg.contains("line 1"), "{msg}");

        assert_eq!(
            unsafe { imsim_validate_text(bad.as_ptr().cast()) },
            ImsimStatus::LoadError
        );
    }

    #[test]
    fn null_arguments_are_refused() {
        let mut report: *mut ImsimReport = ptr::null_mut();
        assert_eq!(
            unsafe { imsim_run_text(ptr::null(), 0, &mut report) },
            ImsimStatus::NullArgument
        );
        assert_eq!(
            unsafe { imsim_run_text(SCENARIO.as_ptr().cast(), 0, ptr::null_mut()) },
            ImsimStatus::NullArgument
        );
        assert_eq!(unsafe { imsim_report_exit_code(ptr::null()) }, -1);
        assert!(unsafe { imsim_report_trace(ptr::null()) }.is_null());
        unsafe { imsim_report_free(ptr::null_mut()) };
        unsafe { imsim_string_free(ptr::null_mut()) };
    }

    #[test]
    fn version_is_a_static_string() {
        let v = unsafe { CStr::from_ptr(imsim_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
