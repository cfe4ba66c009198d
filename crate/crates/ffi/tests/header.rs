use std::path::{Path, PathBuf};
use std::process::Command;

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".to_string());
    Command::new(&cc).arg("--version").output().ok().map(|_| cc)
}

#[test]
fn header_declares_the_api() {
    let text = std::fs::read_to_string(header_dir().join("confpose.h")).unwrap();
    for name in [
        "cp_version",
        "cp_last_error",
        "cp_stream_new",
        "cp_stream_free",
        "cp_stream_process",
        "cp_stream_context",
        "cp_stream_pose",
        "cp_fuse_candidates",
        "cp_umeyama_sim3",
        "cp_refine_solve",
        "cp_ate",
        "typedef struct CpStream CpStream;",
        "CP_STATUS_BUFFER_TOO_SMALL = 5",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use_header.c");
    std::fs::write(
        &src,
        "#include \"confpose.h\"\nint main(void) { CpStatus s = CP_STATUS_OK; return (int)s; }\n",
    )
    .unwrap();
    for lang in ["c", "c++"] {
        let status = Command::new(&cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(header_dir())
            .arg(&src)
            .status()
            .unwrap();
        assert!(status.success(), "header failed to compile as {lang}");
    }
}

/// Builds a small C program against the shared library and runs it.
#[test]
fn c_program_round_trip() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    // Test binaries live in <target>/<profile>/deps; the library one level up.
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap().to_path_buf();
    if !lib_dir.join("libconfpose_ffi.so").exists() {
        eprintln!("shared library not found in {}, skipping", lib_dir.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("round_trip.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = tmp.path().join("round_trip");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(header_dir())
        .arg(&src)
        .arg("-o")
        .arg(&bin)
        .arg(format!("-L{}", lib_dir.display()))
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-lconfpose_ffi")
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok 2 1 0.5");
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "confpose.h"

int main(void) {
    CpStream *s = NULL;
    if (cp_stream_new(NULL, &s) != CP_STATUS_OK) return 1;
    double t1[3] = {1, 0, 0}, t2[3] = {0, 1, 0};
    bool accepted = false;
    if (cp_stream_process(s, 1, t1, 3, NULL, 0, &accepted) != CP_STATUS_OK) return 2;
    CpEdge e = {1, 2, {{1, 0, 0, 0}, {0.5, 0, 0}}, 5.0, 5.0};
    if (cp_stream_process(s, 2, t2, 3, &e, 1, &accepted) != CP_STATUS_OK) {
        fprintf(stderr, "%s\n", cp_last_error());
        return 3;
    }
    CpPose p;
    if (cp_stream_pose(s, 2, &p) != CP_STATUS_OK) return 4;
    size_t n = 0;
    cp_stream_context(s, NULL, 0, &n);
    printf("ok %zu %d %g\n", n, (int)accepted, p.t[0]);
    cp_stream_free(s);
    return 0;
}
"#;
