//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria on pretrained checkpoints read converted model directories from
//! `UNPACK_GPT2_DIR` and `UNPACK_PYTHIA_DIR`; without them those lines report
//! FAIL with the missing variable.

#[path = "attribution.rs"]
mod attribution_suite;
#[path = "decomposition.rs"]
mod identity_suite;
#[path = "knockout.rs"]
mod knockout_suite;

use std::io::Write;
use std::panic::{catch_unwind, UnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unpack::attribution::safe_denom::{floor_active, shares};
use unpack::attribution::{safe_denom, Target, TraceConfig, CONFIG_NAMES};
use unpack::eval::{beta_sweep, composition_verification, default_claims, evaluate, gen_prompts, Fixtures};
use unpack::knockout::{self, AblationSpec, Channel};
use unpack::model::{load_model, Model};

const GPT2_ENV: &str = "UNPACK_GPT2_DIR";
const PYTHIA_ENV: &str = "UNPACK_PYTHIA_DIR";
const PYTHIA_SCORE_ENV: &str = "UNPACK_PYTHIA_SCORE_CORPUS";
const PYTHIA_EVAL_ENV: &str = "UNPACK_PYTHIA_EVAL_CORPUS";

enum Outcome {
    Pass(String),
    Fail(String),
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Option<Duration>,
    pretrained: bool,
}

fn run_checks(checks: &[(&str, fn())]) -> Outcome {
    let mut failed = Vec::new();
    for (name, f) in checks {
        if catch_unwind(*f).is_err() {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Outcome::Pass(format!("{} check{}", checks.len(), if checks.len() == 1 { "" } else { "s" }))
    } else {
        Outcome::Fail(format!("failed: {}", failed.join(", ")))
    }
}

fn guarded(f: impl FnOnce() -> Outcome + UnwindSafe) -> Outcome {
    catch_unwind(f).unwrap_or_else(|_| Outcome::Fail("panicked".into()))
}

fn identities() -> Outcome {
    run_checks(&[
        ("component sum", identity_suite::components_sum_to_every_site_residual),
        ("marginal LN sum", identity_suite::marginal_normalization_sums_to_layernorm),
        ("K/Q completeness", identity_suite::key_and_query_contributions_complete_the_logit),
        ("V completeness", identity_suite::value_contributions_complete_the_centered_value_output),
        ("MLP completeness", identity_suite::mlp_contributions_complete_the_preactivation),
        ("attention rows", identity_suite::attention_rows_sum_to_one),
    ])
}

fn safe_denom_properties() -> Outcome {
    let betas = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0, 1.5, 2.0];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut floored, mut plain) = (0usize, 0usize);
    for trial in 0..100_000 {
        let len = rng.random_range(1..=24);
        let scale = 10f64.powi(rng.random_range(-6..=6));
        let mut r: Vec<f64> = (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        if trial % 7 == 0 {
            // exact cancellation
            let s: f64 = r.iter().sum();
            r.push(-s);
        }
        let beta = betas[trial % betas.len()];
        let sum: f64 = r.iter().sum();
        let abs: f64 = r.iter().map(|v| v.abs()).sum();
        let mass: f64 = shares(&r, beta).iter().map(|s| s.abs()).sum();
        if abs > 0.0 && mass > (1.0 / beta) * (1.0 + 1e-12) {
            return Outcome::Fail(format!("share mass {mass} above 1/beta at beta {beta}"));
        }
        if sum.abs() >= beta * abs {
            plain += 1;
            if safe_denom(&r, beta) != sum || floor_active(sum, abs, beta) {
                return Outcome::Fail(format!("floor changed an admissible sum {sum}"));
            }
        } else {
            floored += 1;
        }
    }
    Outcome::Pass(format!("1e5 lists, {plain} plain, {floored} floored"))
}

fn conservation() -> Outcome {
    run_checks(&[
        ("conservation", attribution_suite::zero_beta_conserves_credit),
        ("aggregate vs enumeration", attribution_suite::aggregate_matches_exhaustive_enumeration),
        ("unit K weight", attribution_suite::unit_k_weight_is_k_only),
    ])
}

fn gradient() -> Outcome {
    run_checks(&[(
        "frozen-LN finite differences",
        attribution_suite::target_direction_is_the_frozen_layernorm_gradient,
    )])
}

fn env_dir(var: &str) -> Result<PathBuf, String> {
    std::env::var_os(var)
        .map(PathBuf::from)
        .ok_or_else(|| format!("blocked: {var} not set"))
}

fn gpt2() -> Result<Model, String> {
    let dir = env_dir(GPT2_ENV)?;
    load_model(&dir).map_err(|e| format!("{}: {e}", dir.display()))
}

fn placeholder() -> Target {
    Target::Single { token: 0 }
}

fn verdict(problems: Vec<String>, summary: String) -> Outcome {
    if problems.is_empty() {
        Outcome::Pass(summary)
    } else {
        Outcome::Fail(problems.join("; "))
    }
}

fn ioi_reproduction() -> Result<Outcome, String> {
    let model = gpt2()?;
    let tok = model.tokenizer.as_ref().ok_or("model has no tokenizer")?;
    let pairs = gen_prompts(tok, model.config.bos_token_id, &Fixtures::from_env().map_err(|e| e.to_string())?, 42, 100)
        .map_err(|e| e.to_string())?;
    let configs: Vec<TraceConfig> = CONFIG_NAMES
        .iter()
        .map(|n| TraceConfig::named(n, placeholder()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let reports = evaluate(&model, &pairs, &configs).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    let aligned = reports.iter().find(|r| r.label == "kqv_aligned").ok_or("kqv_aligned missing")?;
    if aligned.metrics.io_gt_s1 < 0.95 || aligned.metrics.top1 < 0.90 {
        problems.push(format!(
            "kqv_aligned IO>S1 {:.2}, Top-1 {:.2}",
            aligned.metrics.io_gt_s1, aligned.metrics.top1
        ));
    }
    let kqv = reports.iter().filter(|r| r.label.starts_with("kqv"));
    let k_only = reports.iter().filter(|r| r.label.starts_with("k_only"));
    let worst_kqv = kqv.clone().map(|r| r.metrics.top1_star).fold(f64::INFINITY, f64::min);
    let best_k = k_only.map(|r| r.metrics.top1_star).fold(f64::NEG_INFINITY, f64::max);
    if worst_kqv <= best_k {
        problems.push(format!("Top-1* kqv min {worst_kqv:.2} vs k_only max {best_k:.2}"));
    }
    for r in kqv {
        if r.suppression.s1_s2_gap < 8.0 {
            problems.push(format!("{} S1-S2 gap {:+.1}", r.label, r.suppression.s1_s2_gap));
        }
    }
    for r in &reports {
        if r.suppression.c_to_c <= r.suppression.c_to_b {
            problems.push(format!("{} C->C {:+.1} <= C->B {:+.1}", r.label, r.suppression.c_to_c, r.suppression.c_to_b));
        }
    }
    Ok(verdict(
        problems,
        format!(
            "IO>S1 {:.0}%, Top-1 {:.0}%",
            100.0 * aligned.metrics.io_gt_s1,
            100.0 * aligned.metrics.top1
        ),
    ))
}

fn composition_claims() -> Result<Outcome, String> {
    let model = gpt2()?;
    let tok = model.tokenizer.as_ref().ok_or("model has no tokenizer")?;
    let fixtures = Fixtures::from_env().map_err(|e| e.to_string())?;
    let pairs = gen_prompts(tok, model.config.bos_token_id, &fixtures, 42, 25).map_err(|e| e.to_string())?;
    let cfg = TraceConfig::named("kqv_aligned", placeholder()).map_err(|e| e.to_string())?;
    let cells = composition_verification(&model, &pairs, &cfg, &fixtures.roles, &default_claims())
        .map_err(|e| e.to_string())?;
    let wanted = [
        ("Q", "NM", "S-Inh", 0.90, 3),
        ("V", "S-Inh", "Ind", 0.85, 4),
        ("V", "S-Inh", "Dup", 0.85, 4),
        ("K", "Ind", "Prev", 0.90, 5),
    ];
    let mut problems = Vec::new();
    let mut shown = Vec::new();
    for (filter, root, up, frac, rank) in wanted {
        let cell = cells
            .iter()
            .find(|c| c.filter.to_string() == filter && c.root_role == root && c.upstream_role == up)
            .ok_or_else(|| format!("no {filter} {root}<-{up} cell"))?;
        shown.push(format!("{filter} {root}<-{up} {}", cell.display()));
        if cell.found_fraction() < frac || cell.median_rank.is_none_or(|r| r > rank) {
            problems.push(format!("{filter} {root}<-{up} {}", cell.display()));
        }
    }
    Ok(verdict(problems, shown.join(", ")))
}

fn beta_trend() -> Result<Outcome, String> {
    let model = gpt2()?;
    let tok = model.tokenizer.as_ref().ok_or("model has no tokenizer")?;
    let pairs = gen_prompts(tok, model.config.bos_token_id, &Fixtures::from_env().map_err(|e| e.to_string())?, 42, 10)
        .map_err(|e| e.to_string())?;
    let base = TraceConfig::named("kqv_aligned", placeholder()).map_err(|e| e.to_string())?;
    let grid = unpack::eval::metrics::parse_grid("0.1:2.0:0.1").map_err(|e| e.to_string())?;
    let rows = beta_sweep(&model, &pairs, &base, &grid).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for r in rows.iter().filter(|r| r.beta >= 0.2 - 1e-9) {
        if r.metrics.io_gt_s1 < 1.0 {
            problems.push(format!("IO>S1 {:.0}% at beta {:.1}", 100.0 * r.metrics.io_gt_s1, r.beta));
        }
    }
    for w in rows.windows(2) {
        if w[1].metrics.mean_io_share < w[0].metrics.mean_io_share - 1e-9 {
            problems.push(format!(
                "mean IO share falls from {:.2} to {:.2} at beta {:.1}",
                w[0].metrics.mean_io_share, w[1].metrics.mean_io_share, w[1].beta
            ));
        }
    }
    Ok(verdict(problems, format!("{} grid points", rows.len())))
}

fn pythia_spearman() -> Result<f64, String> {
    let model = load_model(&env_dir(PYTHIA_ENV)?).map_err(|e| e.to_string())?;
    let mut score = knockout::load_corpus(&model, &env_dir(PYTHIA_SCORE_ENV)?).map_err(|e| e.to_string())?;
    let mut eval = knockout::load_corpus(&model, &env_dir(PYTHIA_EVAL_ENV)?).map_err(|e| e.to_string())?;
    score.truncate(50);
    eval.truncate(200);
    let panel = unpack::decompose::stream_score_panel(&model, &score).map_err(|e| e.to_string())?;
    let specs: Vec<AblationSpec> = knockout::select_knockout_components(&panel, &model.config, Channel::CutMlp, 5)
        .into_iter()
        .map(|component| AblationSpec {
            component,
            channel: Channel::CutMlp,
        })
        .collect();
    let rep = knockout::delta_ppl(&model, &specs, &eval, Some(&panel)).map_err(|e| e.to_string())?;
    let corr = knockout::spearman_report(&rep.results).map_err(|e| e.to_string())?;
    corr.iter()
        .find(|c| c.channel == Channel::CutMlp)
        .and_then(|c| c.cross_layer)
        .ok_or_else(|| "no cross-layer correlation".into())
}

fn knockout_sanity() -> Outcome {
    let core = run_checks(&[
        ("null ablation", knockout_suite::zero_output_head_is_a_null_ablation),
        ("spliced forward", knockout_suite::ablation_matches_single_precision_splice),
    ]);
    let extended = match pythia_spearman() {
        Ok(rho) if rho >= 0.7 => format!("extended: MLP cross-layer rho {rho:.2}"),
        Ok(rho) => format!("extended FAIL: MLP cross-layer rho {rho:.2} < 0.70"),
        Err(e) => format!("extended not run, {e}"),
    };
    match core {
        Outcome::Pass(s) => Outcome::Pass(format!("{s}; {extended}")),
        Outcome::Fail(s) => Outcome::Fail(format!("{s}; {extended}")),
    }
}

fn pretrained(f: fn() -> Result<Outcome, String>) -> Outcome {
    guarded(|| f().unwrap_or_else(Outcome::Fail))
}

fn criteria() -> Vec<(Criterion, Box<dyn Fn() -> Outcome>)> {
    let c = |id, title, secs: Option<u64>, pretrained| Criterion {
        id,
        title,
        budget: secs.map(Duration::from_secs),
        pretrained,
    };
    vec![
        (c("c1", "algebraic identities", Some(10), false), Box::new(|| guarded(identities))),
        (c("c2", "safe denominator properties", Some(5), false), Box::new(|| guarded(safe_denom_properties))),
        (c("c3", "conservation and oracle equivalence", Some(30), false), Box::new(|| guarded(conservation))),
        (c("c4", "target-direction gradient", Some(5), false), Box::new(|| guarded(gradient))),
        (c("c5", "GPT-2 small IOI reproduction", Some(7200), true), Box::new(|| pretrained(ioi_reproduction))),
        (c("c6", "composition claims", None, true), Box::new(|| pretrained(composition_claims))),
        (c("c7", "beta sweep trend", None, true), Box::new(|| pretrained(beta_trend))),
        (c("c8", "knockout sanity", Some(14400), false), Box::new(|| guarded(knockout_sanity))),
    ]
}

/// Runs every criterion and returns `(id, pretrained, passed)`.
fn report() -> Vec<(&'static str, bool, bool)> {
    let mut out = std::io::stdout();
    let mut results = Vec::new();
    for (crit, check) in criteria() {
        let started = Instant::now();
        let outcome = check();
        let elapsed = started.elapsed();
        let over = crit.budget.is_some_and(|b| elapsed > b);
        let (pass, detail) = match outcome {
            Outcome::Pass(d) if over => (false, format!("{d}; over budget")),
            Outcome::Pass(d) => (true, d),
            Outcome::Fail(d) => (false, d),
        };
        let _ = writeln!(
            out,
            "{} {} {} ({:.2}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            crit.id,
            crit.title,
            elapsed.as_secs_f64()
        );
        results.push((crit.id, crit.pretrained, pass));
    }
    results
}

#[test]
fn acceptance() {
    let results = report();
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, pretrained, pass)| !pass && !pretrained)
        .map(|r| r.0)
        .collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
#[ignore = "needs converted pretrained checkpoints"]
fn pretrained_criteria() {
    for (id, f) in [
        ("c5", ioi_reproduction as fn() -> Result<Outcome, String>),
        ("c6", composition_claims),
        ("c7", beta_trend),
    ] {
        match f() {
            Ok(Outcome::Pass(_)) => {}
            Ok(Outcome::Fail(e)) | Err(e) => panic!("{id}: {e}"),
        }
    }
    let rho = pythia_spearman().unwrap();
    assert!(rho >= 0.7, "MLP cross-layer rho {rho}");
}
