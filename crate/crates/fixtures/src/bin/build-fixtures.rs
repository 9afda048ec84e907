//! Rebuilds the corpus: `build-fixtures [OUT_DIR]` (default: the prebuilt directory).

use std::path::PathBuf;

fn main() {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(bcov_fixtures::prebuilt_dir);
    match bcov_fixtures::build_corpus(&out) {
        Ok(built) => {
            for f in built {
                println!("{}", f.path.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
