//! One pass/fail line per acceptance criterion.
//!
//! Criteria 6 and 7 train real models and run only with `--full`:
//! `cargo test --release -p dense-grounding --test acceptance -- --full`.
//! `--only 6` (or `7`) restricts a full run to one of them.

#[allow(dead_code, unused_imports)]
#[path = "training.rs"]
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dense_grounding::config::RunConfig;
use dense_grounding::eval::{evaluate, EvalReport};
use dense_grounding::manifest::{DatasetEntry, Manifest};
use dense_grounding::train::{train_all, TrainData};
use dense_grounding::world::{generate_dataset, write_dataset, Dataset};

type Check = (&'static str, fn());

/// Runs every check and names the ones that panicked.
fn run_all(checks: &[Check]) -> Result<(), String> {
    let mut failed = Vec::new();
    for (name, f) in checks {
        if catch_unwind(AssertUnwindSafe(f)).is_err() {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("failed: {}", failed.join(", ")))
    }
}

fn within(budget: Duration, checks: &[Check]) -> Result<String, String> {
    let t = Instant::now();
    run_all(checks)?;
    let took = t.elapsed();
    if took > budget {
        return Err(format!("{} checks took {:.1}s, budget {:.0}s", checks.len(), took.as_secs_f64(), budget.as_secs_f64()));
    }
    Ok(format!("{} passed in {:.1}s", checks.len(), took.as_secs_f64()))
}

fn manifest(cfg: &RunConfig) -> String {
    let entry = |stream: &str, world| {
        let ds = generate_dataset(cfg.seed, stream, &world).unwrap();
        DatasetEntry::new(stream, &write_dataset(&ds), &ds)
    };
    Manifest::new(cfg, entry("train", cfg.train_world.clone()), entry("eval", cfg.eval_world())).to_json()
}

fn reproducibility() {
    let mut cfg = RunConfig::with_seed(8);
    cfg.train_world.scenes = 4;
    cfg.eval_scenes = 2;
    assert_eq!(manifest(&cfg), manifest(&cfg));
    training::fixed_seed_gives_identical_loss_curve_and_weights();
    training::resuming_from_a_checkpoint_continues_the_curve();
    training::reloaded_checkpoint_evaluates_like_the_model_in_memory();
}

/// Desk defaults with the 3000-step cap split evenly over the stages.
const TOY_STEPS: [usize; 3] = [1000, 1000, 1000];

fn toy_set_accuracy() -> Result<String, String> {
    let t = Instant::now();
    let mut cfg = RunConfig::with_seed(7);
    cfg.train_world.scenes = 8;
    cfg.train_world.k_min = 4;
    cfg.train_world.k_max = 4;
    cfg.train.steps = TOY_STEPS;
    let ds = generate_dataset(cfg.seed, "train", &cfg.train_world).map_err(|e| e.to_string())?;
    let data = TrainData::new(&ds, cfg.model.tokens).map_err(|e| e.to_string())?;
    let state = train_all(&cfg, &data, |_| ()).map_err(|e| e.to_string())?;
    let rep = evaluate(&state.model, &cfg, &ds, &[], true).map_err(|e| e.to_string())?;
    let s = &rep.sections[0].overall;
    let took = t.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "train Acc@0.5 {:.3} (Acc@0.25 {:.3}, {} sentences) after {} steps in {took:.1} min",
        s.acc_50,
        s.acc_25,
        s.count,
        TOY_STEPS.iter().sum::<usize>()
    );
    if s.acc_50 >= 0.9 && took < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Per-model schedule for the ablation grid; 15 models share the budget.
const ABLATION_STEPS: [usize; 3] = [1000, 1000, 1000];
const TOLERANCE: f64 = 0.02;

fn ablation_run(seed: u64, variant: &str, train: &Dataset, eval: &Dataset) -> Result<EvalReport, String> {
    let mut cfg = RunConfig::with_seed(seed);
    cfg.train.steps = ABLATION_STEPS;
    cfg.k_sweep = vec![2, 8];
    let sw = &mut cfg.model.global.switches;
    match variant {
        "full" => {}
        "-CQG" => cfg.use_cqg = false,
        "-AE" => sw.explicit = false,
        "-AI" => sw.implicit = false,
        "-AF" => sw.focus = false,
        _ => unreachable!(),
    }
    let data = TrainData::new(train, cfg.model.tokens).map_err(|e| e.to_string())?;
    let state = train_all(&cfg, &data, |_| ()).map_err(|e| e.to_string())?;
    let mut sweep = evaluate(&state.model, &cfg, eval, &cfg.k_sweep, true).map_err(|e| e.to_string())?;
    let stored = evaluate(&state.model, &cfg, eval, &[], true).map_err(|e| e.to_string())?;
    sweep.sections.extend(stored.sections);
    Ok(sweep)
}

fn ablation_directions() -> Result<String, String> {
    let t = Instant::now();
    let variants = ["full", "-CQG", "-AE", "-AI", "-AF"];
    let mut acc = vec![[0.0f64; 3]; variants.len()];
    let (mut k2, mut k8) = ([0.0f64; 3], [0.0f64; 3]);
    for seed in 0..3u64 {
        let cfg = RunConfig::with_seed(seed);
        let train = generate_dataset(seed, "train", &cfg.train_world).map_err(|e| e.to_string())?;
        let eval = generate_dataset(seed, "eval", &cfg.eval_world()).map_err(|e| e.to_string())?;
        for (v, name) in variants.iter().enumerate() {
            let rep = ablation_run(seed, name, &train, &eval)?;
            acc[v][seed as usize] = rep.section(None).ok_or("missing stored section")?.overall.acc_25;
            if v == 0 {
                k2[seed as usize] = rep.section(Some(2)).ok_or("missing k2")?.overall.acc_25;
                k8[seed as usize] = rep.section(Some(8)).ok_or("missing k8")?.overall.acc_25;
            }
            eprintln!("  seed {seed} {name:>5}: Acc@0.25 {:.3} ({:.0} min)", acc[v][seed as usize], t.elapsed().as_secs_f64() / 60.0);
        }
    }
    let mean = |a: &[f64; 3]| a.iter().sum::<f64>() / 3.0;
    let full = mean(&acc[0]);
    let mut detail = format!("full {full:.3}");
    let mut ok = true;
    for (v, name) in variants.iter().enumerate().skip(1) {
        let m = mean(&acc[v]);
        ok &= full >= m - TOLERANCE;
        detail += &format!(", {name} {m:.3}");
    }
    ok &= mean(&k8) >= mean(&k2) - TOLERANCE;
    let hours = t.elapsed().as_secs_f64() / 3600.0;
    ok &= hours < 4.0;
    detail += &format!("; K=8 {:.3} vs K=2 {:.3}; {hours:.2} h", mean(&k8), mean(&k2));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let full = args.iter().any(|a| a == "--full");
    let only = args.iter().position(|a| a == "--only").and_then(|i| args.get(i + 1)).and_then(|s| s.parse::<u8>().ok());

    let mut results: Vec<(u8, &str, Option<Result<String, String>>)> = Vec::new();
    let wanted = |n: u8| only.is_none_or(|o| o == n);
    let mut crit = |n: u8, name: &'static str, f: &dyn Fn() -> Result<String, String>| {
        let r = (wanted(n) && (full || n != 6 && n != 7)).then(f);
        results.push((n, name, r));
    };
    crit(1, "geometry matches Monte-Carlo volumes", &|| {
        within(Duration::from_secs(10), &[("monte carlo", geometry::overlap_matches_volume_sampling)])
    });
    crit(2, "closed-form spot checks", &|| {
        within(Duration::MAX, &[
            ("overlaps", geometry::closed_form_overlaps),
            ("explicit feature", geometry::explicit_feature_closed_form),
        ])
    });
    crit(3, "gradient suite", &|| {
        within(Duration::from_secs(120), &[
            ("giou", gradients::giou_gradient),
            ("grounding head", gradients::grounding_head_gradient),
            ("offset head", gradients::offset_head_gradient),
            ("co-attention", gradients::co_attention_gradient),
            ("explicit gate", gradients::explicit_gate_gradient),
            ("implicit gate and pair mlp", gradients::implicit_gate_and_pair_mlp_gradient),
            ("embedding table", gradients::embedding_table_gradient),
            ("end to end", gradients::end_to_end_tiny_config_gradient),
            ("reachability", gradients::gradients_reach_every_trained_component),
        ])
    });
    crit(4, "mask and normalisation invariants", &|| {
        within(Duration::MAX, &[
            ("row stochastic", invariants::every_attention_map_is_row_stochastic),
            ("mask brute force", invariants::focus_mask_matches_brute_force_filter),
            ("mask as key filter", invariants::focused_cross_attention_equals_attention_over_kept_keys),
            ("region boundary", geometry::region_mask_boundary_is_strict),
            ("infinite tau", invariants::infinite_tau_equals_unmasked_run),
            ("padding", invariants::padded_slots_never_influence_predictions),
            ("1000 forwards", invariants::a_thousand_random_forwards_stay_finite),
        ])
    });
    crit(5, "oracle equivalences", &|| {
        within(Duration::MAX, &[
            ("zero-bias attention", oracles::spatial_attention_with_zero_gates_is_plain_attention),
            ("implicit bias", oracles::implicit_bias_matches_per_pair_recomputation),
            ("explicit bias", oracles::explicit_bias_matches_per_pair_recomputation),
            ("nearest objects", geometry::nearest_objects_match_brute_force),
            ("paragraph targets", oracles::paragraph_targets_are_the_focus_and_its_nearest_objects),
            ("beam search", oracles::full_width_beam_search_equals_exhaustive_enumeration),
            ("two-sentence beam", oracles::two_sentence_beam_picks_the_closest_pair),
        ])
    });
    crit(6, "toy-set learnability", &toy_set_accuracy);
    crit(7, "ablation directions", &ablation_directions);
    crit(8, "reproducibility", &|| within(Duration::MAX, &[("artifacts", reproducibility)]));

    results.sort_by_key(|r| r.0);
    let mut failures = 0;
    for (n, name, r) in &results {
        match r {
            Some(Ok(d)) => println!("criterion {n} PASS  {name}: {d}"),
            Some(Err(d)) => {
                failures += 1;
                println!("criterion {n} FAIL  {name}: {d}");
            }
            None if wanted(*n) => println!("criterion {n} SKIP  {name}: needs --full"),
            None => {}
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
