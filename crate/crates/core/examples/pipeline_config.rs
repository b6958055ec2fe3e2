//! Resolves a run configuration from defaults, an optional file, the
//! environment and `key=value` arguments, then prints it with its
//! fingerprint.
//!
//! Usage: pipeline_config [file] [key=value ...]

use std::path::PathBuf;

use voxdiff::pipeline::RunConfig;

fn main() {
    let mut args = std::env::args().skip(1).peekable();
    let file = args.next_if(|a| !a.contains('=')).map(PathBuf::from);
    let flags: Vec<(String, String)> = args
        .map(|a| {
            let (k, v) = a.split_once('=').expect("key=value");
            (k.to_string(), v.to_string())
        })
        .collect();
    match RunConfig::resolve(file.as_deref(), std::env::vars(), &flags) {
        Ok(cfg) => {
            print!("{}", cfg.to_text());
            println!("# fingerprint {}", cfg.fingerprint());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
