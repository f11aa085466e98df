//! Run the full self-verification battery and print the report: partition
//! and order invariance, the brute-force cross-path oracle, enumerated
//! gradient equivalence with fault injection, finite-difference checks of
//! every kernel, memory bounds and generator contracts.
//!
//!     cargo run --release --example property_checks

use nv3d::check::all_checks;

fn main() {
    let report = all_checks();
    print!("{}", report.render());
    if report.all_passed() {
        println!("all properties hold");
    } else {
        std::process::exit(1);
    }
}
