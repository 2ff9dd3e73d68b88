//! One PASS/FAIL line per acceptance criterion. Runs the full five-seed
//! comparison on the default benchmark, so expect it to take minutes.

mod common;

use std::time::Instant;

use lowshot::experiment::config::ConfigMap;
use lowshot::experiment::{cmd_compare, ExperimentConfig, RunSummary, Variant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, title: &str, started: Instant, o: Outcome) -> bool {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("{verdict} C{id} {title} ({:.1}s): {}", started.elapsed().as_secs_f64(), o.detail);
    o.pass
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let suite = common::gradients::gradient_suite();
    let (worst_name, worst) = suite.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let sal = common::gradients::saliency_fd_error();
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        pass: worst < 1e-6 && sal < 1e-5 && secs < 60.0,
        detail: format!("{} checks, worst {worst:.2e} ({worst_name}), saliency {sal:.2e}", suite.len()),
    }
}

fn conv_oracle() -> Outcome {
    let t = Instant::now();
    let cases = common::conv::random_cases(200, 2024);
    let bad: Vec<String> = cases.iter().enumerate().filter_map(|(i, c)| common::conv::mismatch(c, i as u64)).collect();
    let secs = t.elapsed().as_secs_f64();
    Outcome { pass: bad.is_empty() && secs < 30.0, detail: format!("{} cases, {} mismatches {:?}", cases.len(), bad.len(), bad.first()) }
}

fn compare_run(dir: &std::path::Path) -> (RunSummary, f64) {
    let mut map = ConfigMap::default();
    map.set("seeds", "0,1,2,3,4");
    map.set("out_dir", dir.display().to_string());
    let config = ExperimentConfig::from_map(&map).unwrap();
    let t = Instant::now();
    let summary = cmd_compare(&config).unwrap();
    (summary, t.elapsed().as_secs_f64())
}

fn ordering(summary: &RunSummary, secs: f64) -> Outcome {
    let m = |v| summary.mean_average(v).unwrap_or(f64::NAN);
    let (g, p, d, f) = (m(Variant::Gabor), m(Variant::Plain), m(Variant::DataLevel), m(Variant::DataFeatureLevel));
    let pass = d - p >= 0.02 && f >= d && g >= 2.0 / 14.0;
    Outcome {
        pass,
        detail: format!(
            "means gabor {g:.4} plain {p:.4} data_level {d:.4} data_feature_level {f:.4}, {secs:.0}s on {} thread(s)",
            rayon::current_num_threads()
        ),
    }
}

fn structure() -> Outcome {
    let mut problems = Vec::new();
    for seed in [3, 4] {
        let rep = common::pipeline::algorithm_checks(seed, 0.2);
        if !rep.head_swap_equal {
            problems.push(format!("seed {seed}: head swap changed the extractor"));
        }
        if !rep.lambda_zero_equal {
            problems.push(format!("seed {seed}: lambda 0 diverged from cross-entropy fine-tuning"));
        }
        problems.extend(rep.reference_problems.iter().map(|p| format!("seed {seed}: {p}")));
    }
    let strict = common::pipeline::algorithm_checks(5, 0.99);
    problems.extend(strict.reference_problems.iter().map(|p| format!("tau 0.99: {p}")));
    Outcome {
        pass: problems.is_empty(),
        detail: format!("{} fallback classes at tau 0.99, problems {problems:?}", strict.fallback_classes.len()),
    }
}

fn losses() -> Outcome {
    let r = common::losses::loss_invariants(10_000, 5);
    Outcome {
        pass: r.out_of_range == 0 && r.max_algebraic_gap < 1e-9 && r.max_sum_gap < 1e-6 && r.max_shift_gap < 1e-6 && r.perfect_ce == 0.0,
        detail: format!(
            "{} profiles, {} out of range, algebraic {:.1e}, sum {:.1e}, shift {:.1e}, perfect CE {}",
            r.profiles, r.out_of_range, r.max_algebraic_gap, r.max_sum_gap, r.max_shift_gap, r.perfect_ce
        ),
    }
}

fn similarity(summary: &RunSummary) -> Outcome {
    let good = summary.similarity.iter().filter(|s| s.step4.intra > s.step2.intra && s.step4.intra > s.step4.inter).count();
    let rows: Vec<String> = summary
        .similarity
        .iter()
        .map(|s| format!("seed {} intra {:.4}->{:.4} inter {:.4}", s.seed, s.step2.intra, s.step4.intra, s.step4.inter))
        .collect();
    Outcome { pass: good >= 4, detail: format!("{good}/{} seeds; {}", summary.similarity.len(), rows.join("; ")) }
}

fn interp() -> Outcome {
    let r = common::interp::interp_oracles();
    Outcome {
        pass: r.linear_saliency_gap <= 1e-12 && r.masked_q0_identical && r.gems_in_unit_range && r.gabor_filters == 24 && r.gabor_dc_free,
        detail: format!("{r:?}"),
    }
}

fn determinism() -> Outcome {
    let inputs = tempfile::tempdir().unwrap();
    let (_, d_s) = common::small_synth(6, 56, 8);
    let images: Vec<_> = d_s.samples()[..2]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = inputs.path().join(format!("img{i}.pgm"));
            lowshot::data::write_pgm(&s.image, &p).unwrap();
            p
        })
        .collect();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = common::experiment::run_everything(a.path(), &images);
    let sb = common::experiment::run_everything(b.path(), &images);
    let diff = common::experiment::differences(&sa, &sb);
    Outcome { pass: diff.is_empty() && !sa.is_empty(), detail: format!("{} files compared, differing {diff:?}", sa.len()) }
}

fn main() {
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "gradient suite", t, gradients());
    let t = Instant::now();
    all &= report(2, "convolution oracle", t, conv_oracle());

    let out = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let (summary, secs) = compare_run(out.path());
    all &= report(3, "variant ordering", t, ordering(&summary, secs));
    let t = Instant::now();
    all &= report(4, "two-step structure", t, structure());
    let t = Instant::now();
    all &= report(5, "loss invariants", t, losses());
    let t = Instant::now();
    all &= report(6, "similarity effect", t, similarity(&summary));
    let t = Instant::now();
    all &= report(7, "interpretability oracles", t, interp());
    let t = Instant::now();
    all &= report(8, "determinism", t, determinism());
    if !all {
        std::process::exit(1);
    }
}
