use anyhow::Result;
use gradcost::analysis::{run_suite, CheckResult, Suite};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub tolerance_scale: f64,
    pub passed: usize,
    pub failed: usize,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

pub fn verify(suite: Suite, tolerance_scale: f64) -> Result<VerifyReport> {
    anyhow::ensure!(
        tolerance_scale >= 0.0 && tolerance_scale.is_finite(),
        "tolerance scale must be a non-negative number"
    );
    let checks = run_suite(suite, tolerance_scale)?;
    let passed = checks.iter().filter(|c| c.pass).count();
    Ok(VerifyReport {
        suite,
        tolerance_scale,
        passed,
        failed: checks.len() - passed,
        checks,
    })
}
