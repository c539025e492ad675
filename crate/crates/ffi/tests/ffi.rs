use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;

use sbctm::config::RunConfig;
use sbctm::model::{DenoiserModel, ModelConfig};
use sbctm::pipeline::{save_model, ModelKind};
use sbctm_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        sbctm_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn checkpoint(dir: &Path, kind: ModelKind) -> CString {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        channels: [4, 8, 8],
        fourier_features: 4,
        embed_dim: 8,
        ..Default::default()
    };
    let path = dir.join(format!("{}.ckpt", kind.as_str()));
    save_model(&path, &DenoiserModel::<f32>::new(cfg.model.clone()), kind, &cfg).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn wave(n: usize) -> Vec<f32> {
    (0..n).map(|i| 0.1 * (i as f32 * 0.03).sin()).collect()
}

#[test]
fn load_enhance_free() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Student, ModelKind::Teacher] {
        let path = checkpoint(dir.path(), kind);
        let mut h = std::ptr::null_mut();
        unsafe {
            assert_eq!(sbctm_enhancer_load(path.as_ptr(), &mut h), SbctmStatus::Ok);
            assert_eq!(sbctm_enhancer_sample_rate(h), 16_000);
            assert_eq!(sbctm_enhancer_max_nfe(h), 40);
            let input = wave(4000);
            let mut out = vec![f32::NAN; input.len()];
            assert_eq!(sbctm_enhance(h, input.as_ptr(), input.len(), 2, out.as_mut_ptr()), SbctmStatus::Ok);
            assert!(out.iter().all(|v| v.is_finite()));
            // repeated calls are deterministic
            let mut again = vec![0.0f32; input.len()];
            sbctm_enhance(h, input.as_ptr(), input.len(), 2, again.as_mut_ptr());
            assert_eq!(out, again);
            sbctm_enhancer_free(h);
        }
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut h = std::ptr::null_mut();
    unsafe {
        assert_eq!(sbctm_enhancer_load(missing.as_ptr(), &mut h), SbctmStatus::Io);
        assert!(h.is_null());
        assert!(last_error().contains("none.ckpt"));
        assert_eq!(sbctm_enhancer_load(std::ptr::null(), &mut h), SbctmStatus::NullPointer);

        let path = checkpoint(dir.path(), ModelKind::Student);
        assert_eq!(sbctm_enhancer_load(path.as_ptr(), &mut h), SbctmStatus::Ok);
        assert_eq!(last_error(), "");
        let input = wave(2000);
        let mut out = vec![0.0f32; 2000];
        assert_eq!(sbctm_enhance(h, input.as_ptr(), 2000, 0, out.as_mut_ptr()), SbctmStatus::InvalidArgument);
        assert_eq!(sbctm_enhance(h, input.as_ptr(), 2000, 41, out.as_mut_ptr()), SbctmStatus::InvalidArgument);
        assert_eq!(sbctm_enhance(h, std::ptr::null(), 2000, 1, out.as_mut_ptr()), SbctmStatus::NullPointer);
        assert_eq!(sbctm_enhance(std::ptr::null(), input.as_ptr(), 2000, 1, out.as_mut_ptr()), SbctmStatus::NullPointer);
        let long = vec![0.01f32; 16_000 * 31];
        let mut long_out = vec![0.0f32; long.len()];
        assert_eq!(sbctm_enhance(h, long.as_ptr(), long.len(), 1, long_out.as_mut_ptr()), SbctmStatus::InvalidArgument);
        assert!(last_error().contains("30"));
        sbctm_enhancer_free(h);
        sbctm_enhancer_free(std::ptr::null_mut());
    }
}

#[test]
fn si_sdr_through_the_boundary() {
    let r = [1.0f32, 0.0];
    let e = [2.0f32, 1.0];
    let mut v = 0.0;
    unsafe {
        assert_eq!(sbctm_si_sdr(r.as_ptr(), e.as_ptr(), 2, &mut v), SbctmStatus::Ok);
        assert!((v - 10.0 * 4f64.log10()).abs() < 1e-9);
        let z = [0.0f32; 2];
        assert_eq!(sbctm_si_sdr(z.as_ptr(), e.as_ptr(), 2, &mut v), SbctmStatus::InvalidArgument);
    }
}

#[test]
fn truncated_error_copy_is_terminated() {
    let mut h = std::ptr::null_mut();
    unsafe {
        sbctm_enhancer_load(std::ptr::null(), &mut h);
        let mut buf = [1 as c_char; 4];
        let full = sbctm_last_error(buf.as_mut_ptr(), 4);
        assert!(full > 3);
        assert_eq!(buf[3], 0);
        assert_eq!(sbctm_last_error(std::ptr::null_mut(), 0), full);
        assert_eq!(CStr::from_ptr(sbctm_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"sbctm.h\"\nint main(void) { SbctmEnhancer *h = 0; SbctmStatus s = SBCTM_STATUS_OK; (void)h; return (int)s + (int)sizeof(&sbctm_enhance); }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let Ok(out) = Command::new(&cc).arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(&header).arg(&src).output() else {
        eprintln!("no C compiler ({cc}); header syntax not checked");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
