//! Trains the smoke configuration once and runs every acceptance check,
//! printing one line per criterion.

use std::process::ExitCode;
use std::time::Instant;

use garmentflow::harness::acceptance::{model_checks, no_switch_readout, unit_checks};
use garmentflow::harness::{train_all, HarnessConfig};

fn main() -> ExitCode {
    let cfg = HarnessConfig::default();
    let start = Instant::now();
    let mut outcomes = unit_checks();
    let train_start = Instant::now();
    let trained = match train_all(&cfg) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("training failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let training = train_start.elapsed().as_secs_f64();
    outcomes.extend(model_checks(&trained, training));

    let mut ok = true;
    for o in &outcomes {
        println!("{o}");
        ok &= o.passed;
    }

    let ratio = trained.teacher_loss_ratio();
    let drop = ratio <= 1.0 - cfg.teacher_loss_drop;
    println!(
        "[{}] teacher loss tail/head ratio {ratio:.3} (needs ≤ {:.2})",
        if drop { "PASS" } else { "FAIL" },
        1.0 - cfg.teacher_loss_drop
    );
    ok &= drop;
    match no_switch_readout(&trained) {
        Ok((closest, total)) => {
            let pass = closest == total;
            println!(
                "[{}] no-switch rollouts closest to their target garment: {closest}/{total}",
                if pass { "PASS" } else { "FAIL" }
            );
            ok &= pass;
        }
        Err(e) => {
            println!("[FAIL] no-switch readout: {e}");
            ok = false;
        }
    }
    println!(
        "training {training:.1}s, total {:.1}s",
        start.elapsed().as_secs_f64()
    );

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
