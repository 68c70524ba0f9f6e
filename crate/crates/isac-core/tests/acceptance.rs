//! End-to-end acceptance gate: one test per shipped claim, each printing a
//! single pass/fail line with the measured figure next to its threshold.

use isac_core::config::ScenarioConfig;
use isac_core::runner::{run_many, run_scenario};

fn report(name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

// 50 Monte-Carlo draws of the default scenario at 30 dBm must each recover
// all four targets in a single subframe: every DoA within 0.5 degrees and
// every range within one bin, in at least 90% of the runs.
#[test]
fn multi_target_detection_recovers_all_four_targets() {
    let start = std::time::Instant::now();
    let n_runs = 50u64;
    let configs: Vec<ScenarioConfig> = (0..n_runs)
        .map(|seed| {
            let mut c = ScenarioConfig::default();
            c.n_subframes = 1;
            c.seed = seed;
            c
        })
        .collect();
    let results = run_many(&configs).unwrap();
    let bin = configs[0].range_bin_m();
    let mut ok = 0usize;
    for result in &results {
        let r = &result.records[0];
        let doas_ok = r.doa_errors_deg.iter().all(|e| e.abs() <= 0.5);
        let ranges_ok = r.range_errors_m.iter().all(|e| e.abs() <= bin);
        if doas_ok && ranges_ok {
            ok += 1;
        }
    }
    let rate = ok as f64 / n_runs as f64;
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "multi-target detection",
        rate >= 0.90 && elapsed <= 300.0,
        &format!("{ok}/{n_runs} runs recovered all targets (need >= 45), {elapsed:.1} s (budget 300 s)"),
    );
}
