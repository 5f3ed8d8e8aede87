//! Regenerates include/motiverec.h from the public extern "C" surface. The
//! header is committed; the build only rewrites it when the API changed, so
//! downstream C builds can also consume the crate from a plain source
//! checkout without running cbindgen themselves.

use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let header = crate_dir.join("include").join("motiverec.h");
    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml"))
        .expect("cbindgen.toml parses");
    let generated = cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("cbindgen generates the C header");

    let mut buffer = Vec::new();
    generated.write(&mut buffer);
    let current = std::fs::read(&header).unwrap_or_default();
    if current != buffer {
        std::fs::create_dir_all(header.parent().unwrap()).unwrap();
        std::fs::write(&header, buffer).expect("write C header");
    }
}
