use std::ffi::{c_char, CStr, CString};
use std::ptr;

use hsr_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        hsr_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

struct Fixture {
    model: *mut HsrModel,
    store: *mut HsrStore,
    _dir: tempfile::TempDir,
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            hsr_model_free(self.model);
            hsr_store_free(self.store);
        }
    }
}

fn fixture(devices: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let mut store = ptr::null_mut();
    unsafe {
        assert_eq!(hsr_model_new(4, 64, 4, 256, 128, 1024, 7, &mut model), HsrStatus::Ok);
        assert_eq!(hsr_store_open(root.as_ptr(), devices, &mut store), HsrStatus::Ok);
    }
    Fixture { model, store, _dir: dir }
}

fn layer(kv: *const HsrKvCache, l: usize, n: usize) -> (Vec<f32>, Vec<f32>) {
    let mut k = vec![0f32; n * 64];
    let mut v = vec![0f32; n * 64];
    unsafe {
        assert_eq!(hsr_kv_copy_layer(kv, l, k.as_mut_ptr(), v.as_mut_ptr(), k.len()), HsrStatus::Ok);
    }
    (k, v)
}

#[test]
fn restore_through_the_c_interface_matches_prefill() {
    let f = fixture(2);
    let tokens: Vec<u32> = (0..100).map(|i| (i * 37 % 128) as u32).collect();
    let plans = [(4, 0, HsrComplement::None), (3, 1, HsrComplement::KvOffload), (3, 1, HsrComplement::Recompute)];
    let mut oracle = ptr::null_mut();
    unsafe {
        assert_eq!(hsr_prefill(f.model, tokens.as_ptr(), tokens.len(), &mut oracle), HsrStatus::Ok);
    }
    for (i, (l_h, l_o, c)) in plans.into_iter().enumerate() {
        let id = CString::new(format!("s{i}")).unwrap();
        let mut kv = ptr::null_mut();
        let mut secs = -1.0;
        let mut len = 0;
        unsafe {
            let st = hsr_prefill_save(f.model, f.store, id.as_ptr(), tokens.as_ptr(), tokens.len(), l_h, l_o, c);
            assert_eq!(st, HsrStatus::Ok, "{}", last_error());
            assert_eq!(hsr_restore(f.model, f.store, id.as_ptr(), &mut kv, &mut secs), HsrStatus::Ok, "{}", last_error());
            assert_eq!(hsr_kv_len(kv, &mut len), HsrStatus::Ok);
        }
        assert_eq!(len, 100);
        assert!(secs >= 0.0);
        for l in 0..4 {
            let (k, v) = layer(kv, l, 100);
            let (ko, vo) = layer(oracle, l, 100);
            let diff = k.iter().zip(&ko).chain(v.iter().zip(&vo)).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            assert!(diff <= 1e-5, "plan {i} layer {l}: {diff}");
        }
        unsafe { hsr_kv_free(kv) };
    }
    unsafe { hsr_kv_free(oracle) };
}

#[test]
fn errors_are_reported_with_codes_and_messages() {
    let f = fixture(1);
    let id = CString::new("missing").unwrap();
    let mut kv = ptr::null_mut();
    unsafe {
        assert_eq!(hsr_restore(f.model, f.store, id.as_ptr(), &mut kv, ptr::null_mut()), HsrStatus::NotFound);
        assert!(last_error().contains("missing"));
        assert_eq!(hsr_restore(ptr::null(), f.store, id.as_ptr(), &mut kv, ptr::null_mut()), HsrStatus::NullArgument);
        // plan that does not cover the layers
        let t = [1u32, 2, 3];
        assert_eq!(
            hsr_prefill_save(f.model, f.store, id.as_ptr(), t.as_ptr(), 3, 2, 0, HsrComplement::None),
            HsrStatus::InvalidArgument
        );
        let mut small = [0f32; 4];
        let mut big = [0f32; 4];
        let mut oracle = ptr::null_mut();
        assert_eq!(hsr_prefill(f.model, t.as_ptr(), 3, &mut oracle), HsrStatus::Ok);
        assert_eq!(hsr_kv_copy_layer(oracle, 0, small.as_mut_ptr(), big.as_mut_ptr(), 4), HsrStatus::BufferTooSmall);
        assert_eq!(hsr_kv_copy_layer(oracle, 9, small.as_mut_ptr(), big.as_mut_ptr(), 4), HsrStatus::InvalidArgument);
        hsr_kv_free(oracle);
        // success clears the message
        let mut len = 0;
        let mut kv2 = ptr::null_mut();
        assert_eq!(hsr_prefill(f.model, t.as_ptr(), 3, &mut kv2), HsrStatus::Ok);
        assert_eq!(hsr_kv_len(kv2, &mut len), HsrStatus::Ok);
        assert_eq!(hsr_last_error(ptr::null_mut(), 0), 0);
        hsr_kv_free(kv2);
    }
}

#[test]
fn plan_matches_core_scheduler() {
    let (mut l_h, mut l_o, mut c) = (0, 0, HsrComplement::None);
    unsafe {
        assert_eq!(hsr_plan(0.26, 0.52, 0.28, 1.7, 32, &mut l_h, &mut l_o, &mut c), HsrStatus::Ok);
    }
    assert_eq!((l_h, l_o, c), (31, 1, HsrComplement::KvOffload));
    unsafe {
        assert_eq!(hsr_plan(-1.0, 0.52, 0.28, 1.7, 32, &mut l_h, &mut l_o, &mut c), HsrStatus::InvalidArgument);
        assert!(!CStr::from_ptr(hsr_version()).to_bytes().is_empty());
    }
}

#[test]
fn header_is_generated_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(dir.join("hsr.h")).unwrap();
    for sym in ["hsr_last_error", "hsr_restore", "hsr_plan", "HSR_STATUS_OK", "typedef struct HsrStore HsrStore"] {
        assert!(header.contains(sym), "{sym}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"hsr.h\"\nint main(void) { HsrModel *m = 0; return hsr_model_new_desk(1, &m) == HSR_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    match std::process::Command::new("cc").arg("-fsyntax-only").arg("-I").arg(&dir).arg(&src).status() {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler; syntax check skipped"),
    }
}
