use std::path::{Path, PathBuf};
use std::process::Command;

/// The cdylib cargo built alongside this test binary.
fn cdylib() -> PathBuf {
    let name = format!(
        "{}ncdg_py{}",
        std::env::consts::DLL_PREFIX,
        std::env::consts::DLL_SUFFIX
    );
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let candidates = [deps.join(&name), deps.parent().unwrap().join(&name)];
    candidates
        .iter()
        .find(|p| p.is_file())
        .unwrap_or(&candidates[0])
        .clone()
}

#[test]
fn python_smoke_script() {
    let python = std::env::var("PYTHON").unwrap_or_else(|_| "python3".into());
    if Command::new(&python).arg("--version").output().is_err() {
        eprintln!("{python} not available; skipping");
        return;
    }
    let lib = cdylib();
    assert!(lib.is_file(), "{} was not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(&lib, dir.path().join("ncdg.so")).unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("python/smoke_test.py");
    let out = Command::new(&python)
        .arg(&script)
        .env("NCDG_PYTHON_PATH", dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("python smoke test: ok"));
}
