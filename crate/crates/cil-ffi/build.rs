use std::env;
use std::fs;
use std::path::Path;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    let out_dir = Path::new(&crate_dir).join("include");
    fs::create_dir_all(&out_dir).unwrap();

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_language(cbindgen::Language::C)
        .with_include_guard("CIL_H")
        .with_cpp_compat(true)
        .generate()
        .expect("failed to generate the C header")
        .write_to_file(out_dir.join("cil.h"));

    println!("cargo:rerun-if-changed=src/lib.rs");
}
