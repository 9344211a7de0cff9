fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_language(cbindgen::Language::C)
        .with_cpp_compat(true)
        .with_include_guard("VARFORMER_H")
        .with_documentation(true)
        .with_autogen_warning("/* Generated by cbindgen from varformer-capi; do not edit. */")
        .generate()
        .expect("generate C header")
        .write_to_file(std::path::Path::new(&crate_dir).join("include/varformer.h"));
    println!("cargo:rerun-if-changed=src/lib.rs");
}
