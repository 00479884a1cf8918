use std::env;

fn main() {
    println!("cargo:rerun-if-changed=src");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    match cbindgen::generate(&crate_dir) {
        Ok(header) => {
            header.write_to_file(format!("{crate_dir}/include/ipreg.h"));
        }
        Err(err) => {
            // Header generation is best-effort during development builds;
            // the committed header stays in place if cbindgen cannot run.
            println!("cargo:warning=cbindgen failed: {err}");
        }
    }
}
