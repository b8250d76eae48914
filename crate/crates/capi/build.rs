use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let header = crate_dir.join("include").join("gsde.h");

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("GSDE_H".into()),
        cpp_compat: true,
        documentation: true,
        usize_is_size_t: true,
        header: Some("/* C interface to the G-Brownian mean-field SDE engine. */".into()),
        ..Default::default()
    };

    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        // A stale or absent header beats aborting the whole build: the
        // header is a build product, not an input.
        Err(err) => println!("cargo:warning=cbindgen failed, keeping existing header: {err}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
