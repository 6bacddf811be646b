//! Drive the command-line interface in-process: generate a noisy torus,
//! denoise it with the exact score, then evaluate the result.
//!
//! cargo run --release --example cli_pipeline -- [workdir]

use std::path::PathBuf;

use pointdiff::cli;

fn run(args: &[&str]) {
    println!("$ pointdiff {}", args.join(" "));
    let code = cli::run(std::iter::once("pointdiff").chain(args.iter().copied()));
    assert_eq!(code, 0, "command failed");
}

fn main() -> std::io::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("pointdiff_demo"), PathBuf::from);
    std::fs::create_dir_all(&dir)?;
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();

    run(&["generate", "--shape", "torus", "--n", "10000", "--noise", "gaussian:0.02", "--seed", "1", "--out", &p("torus")]);
    run(&["schedule", "--estimate", &p("torus_noisy.xyz"), "--oracle", &p("torus_clean.xyz")]);
    run(&["denoise", "--input", &p("torus_noisy.xyz"), "--oracle", &p("torus_clean.xyz"), "--out", &p("torus_out.xyz")]);
    run(&[
        "eval",
        "--denoised",
        &p("torus_out.xyz"),
        "--reference",
        &p("torus_clean.xyz"),
        "--shape",
        "torus",
        "--denoise-report",
        &p("torus_out.xyz.report"),
        "--out",
        &p("torus_eval.csv"),
    ]);
    println!("outputs in {}", dir.display());
    Ok(())
}
