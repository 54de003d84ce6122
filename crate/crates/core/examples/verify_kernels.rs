//! Runs the self-check suites: kernel references, exact reductions,
//! finite-difference gradients, roundtrips and matching.
//!
//! cargo run --release --example verify_kernels [-- --full]

fn main() -> fsol::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let report = fsol::verify::run_all(0, !full)?;
    print!("{}", report.to_text());
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
