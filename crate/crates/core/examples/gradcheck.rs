//! Run the finite-difference gradient suite and print one row per case.

use hrgnet::gradcheck::{default_suite, GradCheckConfig};

fn main() -> hrgnet::Result<()> {
    let reports = default_suite(&GradCheckConfig::default())?;
    for r in &reports {
        let verdict = if r.max_rel_err < 1e-3 { "ok" } else { "FAIL" };
        println!("{:<24} {:>4} probes  max rel err {:.3e}  {verdict}", r.name, r.checked, r.max_rel_err);
    }
    Ok(())
}
