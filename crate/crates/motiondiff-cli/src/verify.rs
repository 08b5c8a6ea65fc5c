//! `verify`: run the closed-form Gaussian verification suites and report
//! pass/fail per check, with a machine-readable JSON summary on the last
//! line of stdout.

use anyhow::{anyhow, Result};
use motiondiff::oracle::{
    verify_gauss_recovery, verify_guidance_monotone, verify_poe_suite, verify_schedule,
    verify_temperature, SuiteReport,
};
use motiondiff::schedule::{ScheduleConfig, SigmaMode};

use crate::{Usage, VerifyFailed};

fn sampling_schedule() -> Result<motiondiff::schedule::NoiseSchedule> {
    let cfg = ScheduleConfig {
        sigma_mode: SigmaMode::Beta,
        ..ScheduleConfig::default()
    };
    Ok(cfg.build()?)
}

pub fn run(suite: &str, seed: u64) -> Result<()> {
    let selectors: Vec<&str> = match suite {
        "all" => vec!["schedule", "gauss", "poe", "guidance"],
        "schedule" | "gauss" | "poe" | "guidance" => vec![suite],
        other => {
            return Err(anyhow!(Usage(format!(
                "unknown suite `{other}`; expected schedule, gauss, poe, guidance, or all"
            ))))
        }
    };

    let mut reports: Vec<SuiteReport> = Vec::new();
    for sel in selectors {
        match sel {
            "schedule" => {
                reports.push(verify_schedule(&ScheduleConfig::default().build()?)?);
            }
            "gauss" => {
                reports.push(verify_gauss_recovery(&sampling_schedule()?, 10_000, 1, seed)?);
            }
            "poe" => {
                reports.push(verify_poe_suite(&sampling_schedule()?, 10_000, 1, seed)?);
            }
            "guidance" => {
                let sched = sampling_schedule()?;
                reports.push(verify_guidance_monotone(&sched, 4_000, 2, seed)?);
                reports.push(verify_temperature(&sched, 4_000, 2, seed)?);
            }
            _ => unreachable!(),
        }
    }

    for report in &reports {
        print!("{report}");
    }
    println!("{}", serde_json::to_string(&reports)?);

    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(anyhow!(VerifyFailed(failed)));
    }
    Ok(())
}
