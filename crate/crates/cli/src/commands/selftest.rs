use stcflow::selftest::{run_suite, SuiteOptions};

use crate::error::{CliError, CliResult};
use crate::SelftestArgs;

pub fn run(args: &SelftestArgs) -> CliResult<()> {
    let opts = SuiteOptions {
        normalization_trials: args.trials.max(1),
        seed: args.seed,
    };
    let checks = run_suite(&opts)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<width$}  {}", c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} invariants hold", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} invariant(s) failed")));
    }
    Ok(())
}
