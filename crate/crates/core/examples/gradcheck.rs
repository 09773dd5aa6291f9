//! Checks every hand-written backward pass against central differences in
//! 64-bit precision.
//!
//! ```text
//! cargo run --example gradcheck -- [seed]
//! ```

use fcgan::gradcheck::{run_suite, GRADCHECK_TOLERANCE};

fn main() -> fcgan::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map_or(0, |s| s.parse().expect("seed"));
    let cases = run_suite(seed, 0.2)?;
    for case in &cases {
        let (param, idx) = case.report.worst.clone().unwrap_or_default();
        println!(
            "{:<18} {:>5} coords  max rel err {:.2e} (at {param}[{idx}])  {:?}",
            case.name, case.report.coords_checked, case.report.max_relative_error, case.elapsed
        );
    }
    let failed = cases.iter().filter(|c| !c.passed()).count();
    println!("{failed} case(s) above {GRADCHECK_TOLERANCE:e}");
    std::process::exit(i32::from(failed > 0));
}
