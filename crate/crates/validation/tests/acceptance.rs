//! Acceptance criteria P1 to P9, one status line each.

use modnorm_harness::data::synthetic_task;
use modnorm_harness::sweep::{best_lrs, sweep, thread_limit, Grid, ScaleKey};
use modnorm_harness::verify::{self, CheckResult, COMPOSE_RULE};
use modnorm_harness::RunConfig;
use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

const SEED: u64 = 0;

struct Line {
    id: &'static str,
    passed: bool,
    text: String,
}

fn from_checks(id: &'static str, checks: &[CheckResult]) -> Line {
    Line {
        id,
        passed: checks.iter().all(|c| c.passed),
        text: checks
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn p1() -> Line {
    let r = verify::unit_norm(100, SEED);
    let mut line = from_checks("P1", std::slice::from_ref(&r));
    if r.seconds >= 60.0 {
        line.passed = false;
        line.text.push_str(" runtime over 60s");
    }
    line
}

fn p2() -> Line {
    from_checks(
        "P2",
        &[
            verify::power_iteration_oracle(50, 64, SEED),
            verify::warm_start_tracking(10, 50, SEED),
        ],
    )
}

fn p3() -> Line {
    from_checks(
        "P3",
        &[
            verify::algebra_associativity(20, 20, SEED),
            verify::sharpness_associativity(1000, COMPOSE_RULE, SEED),
        ],
    )
}

fn p4() -> Line {
    from_checks("P4", &[verify::well_normed(1000, SEED)])
}

fn p5() -> Line {
    from_checks("P5", &[verify::residual_sharpness_check(64, 20, SEED)])
}

fn p6() -> Line {
    from_checks("P6", &[verify::attention_bounds(5000, SEED)])
}

fn p7() -> Line {
    from_checks("P7", &[verify::loss_smoothness_check(1000, SEED)])
}

fn p9() -> Line {
    from_checks("P9", &[verify::gradients(100, SEED)])
}

const WIDTHS: [usize; 4] = [16, 32, 64, 128];
const DEPTHS: [usize; 3] = [2, 4, 8];
const BASE_DEPTH: usize = 4;
const BASE_WIDTH: usize = 32;
const MAX_SHIFT: usize = 1;
const MAX_MINUTES: f64 = 30.0;

fn half_decades(lo_exp: i32) -> Vec<f64> {
    (0..7)
        .map(|i| 10f64.powf(lo_exp as f64 + 0.5 * i as f64))
        .collect()
}

/// Spread of the best learning rate's grid index along one axis, or `None`
/// if some scale has no finite run.
fn spread(
    best: &BTreeMap<ScaleKey, f64>,
    lrs: &[f64],
    keys: &[(usize, usize)],
) -> Option<(usize, Vec<usize>)> {
    let mut idx = Vec::new();
    for (w, d) in keys {
        let lr = best
            .iter()
            .find(|((bw, bd, _), _)| bw == w && bd == d)
            .map(|(_, lr)| *lr)?;
        idx.push(lrs.iter().position(|l| *l == lr)?);
    }
    Some((idx.iter().max()? - idx.iter().min()?, idx))
}

fn p8() -> Line {
    let start = Instant::now();
    let base = RunConfig {
        run_id: "p8".into(),
        arch: "resmlp".into(),
        d_in: 32,
        n_classes: 10,
        loss: "cross_entropy".into(),
        batch_size: 64,
        steps: 500,
        seed: SEED,
        ..RunConfig::default()
    };
    let data = match synthetic_task(
        base.n_classes,
        base.d_in,
        base.n_train,
        base.n_test,
        base.seed,
    ) {
        Ok(d) => d,
        Err(e) => {
            return Line {
                id: "P8",
                passed: false,
                text: format!("error: {e}"),
            }
        }
    };
    let threads = thread_limit().unwrap_or(None);
    let width_keys: Vec<(usize, usize)> = WIDTHS.iter().map(|w| (*w, BASE_DEPTH)).collect();
    let depth_keys: Vec<(usize, usize)> = DEPTHS.iter().map(|d| (BASE_WIDTH, *d)).collect();
    let mut passed = true;
    let mut parts = Vec::new();
    for (optimizer, normed, lo) in [
        ("adam", true, -3),
        ("sgd", true, -3),
        ("adam", false, -4),
        ("sgd", false, -2),
    ] {
        let lrs = half_decades(lo);
        let cfg = RunConfig {
            optimizer: optimizer.into(),
            normed,
            ..base.clone()
        };
        let widths = Grid {
            widths: WIDTHS.to_vec(),
            depths: vec![BASE_DEPTH],
            lrs: lrs.clone(),
            ..Grid::default()
        };
        let depths = Grid {
            widths: vec![BASE_WIDTH],
            depths: DEPTHS
                .iter()
                .copied()
                .filter(|d| *d != BASE_DEPTH)
                .collect(),
            lrs: lrs.clone(),
            ..Grid::default()
        };
        let tag = format!("p8-{optimizer}-{}", if normed { "normed" } else { "plain" });
        let by_width = RunConfig {
            run_id: format!("{tag}-width"),
            ..cfg.clone()
        };
        let by_depth = RunConfig {
            run_id: format!("{tag}-depth"),
            ..cfg
        };
        let records = match (
            sweep(&widths, &by_width, &data, threads),
            sweep(&depths, &by_depth, &data, threads),
        ) {
            (Ok(mut a), Ok(b)) => {
                a.extend(b);
                a
            }
            (Err(e), _) | (_, Err(e)) => {
                return Line {
                    id: "P8",
                    passed: false,
                    text: format!("error: {e}"),
                }
            }
        };
        let best = best_lrs(&records);
        let name = format!("{}{optimizer}", if normed { "normed " } else { "" });
        for (axis, keys) in [("width", &width_keys), ("depth", &depth_keys)] {
            match spread(&best, &lrs, keys) {
                Some((s, idx)) => {
                    parts.push(format!("{name} {axis} best lr index {idx:?} shift {s}"));
                    if normed && s > MAX_SHIFT {
                        passed = false;
                    }
                }
                None => {
                    parts.push(format!("{name} {axis}: a scale diverged at every lr"));
                    passed &= !normed;
                }
            }
        }
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    if minutes > MAX_MINUTES {
        passed = false;
    }
    Line {
        id: "P8",
        passed,
        text: format!(
            "{} lr transfer (normed shift <= {MAX_SHIFT}, unnormed reported only, {minutes:.1} min): {}",
            if passed { "PASS" } else { "FAIL" },
            parts.join("; ")
        ),
    }
}

type Criterion = fn() -> Line;

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with('P'))
        .collect();
    let criteria: [(&str, Criterion); 9] = [
        ("P1", p1),
        ("P2", p2),
        ("P3", p3),
        ("P4", p4),
        ("P5", p5),
        ("P6", p6),
        ("P7", p7),
        ("P8", p8),
        ("P9", p9),
    ];
    let mut failed = 0;
    for (id, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let line = run();
        if !line.passed {
            failed += 1;
        }
        println!(
            "{} {}: {}",
            line.id,
            if line.passed { "pass" } else { "fail" },
            line.text
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
