use std::path::Path;
use std::process::{Command, Output};

use uncertain_events::cli::BUNDLE_ENV;
use uncertain_events::crossval::read_ranking;
use uncertain_events::distributions::{BaseFamily, DistributionSpec, FamilyId};
use uncertain_events::fitting::{bin_mass, read_fits};
use uncertain_events::predictor::{read_curve, read_draws, write_events, EventRecord};
use uncertain_events::regression::{shipped_sb, ViolenceScope};
use uncertain_events::simulate::{read_summary, read_totals};
use uncertain_events::survey::{default_bins, write_survey, CoderDistribution, Context, ViolenceType};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uncertain-events"))
        .args(args)
        .env_remove(BUNDLE_ENV)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Gumbel-mixture coders at a few reported values, both violence types.
fn write_gumbel_survey(path: &Path, n_coders: usize) {
    let mut coders = Vec::new();
    for c in 0..n_coders {
        for (tov, scale) in [(ViolenceType::Sb, 1.0), (ViolenceType::Ns, 1.2)] {
            for y in [1u64, 5, 13, 40, 100, 300] {
                let yf = y as f64;
                let jitter = 1.0 + 0.05 * c as f64;
                let spec = DistributionSpec::gumbel_mixture(scale * jitter * (1.3 * yf + 1.0), 0.25 * yf + 0.5, 0.5, y).unwrap();
                let bins = default_bins(y);
                let mass = bin_mass(&spec, &bins).unwrap();
                coders.push(CoderDistribution {
                    coder_id: format!("coder{c}"),
                    violence_type: tov,
                    context: Context::Good,
                    reported_value: y,
                    bins: bins.into_iter().zip(mass).collect(),
                });
            }
        }
    }
    write_survey(std::fs::File::create(path).unwrap(), &coders).unwrap();
}

fn write_event_file(path: &Path, events: &[EventRecord]) {
    write_events(std::fs::File::create(path).unwrap(), events).unwrap();
}

#[test]
fn fit_then_crossval_ranks_gumbel_mixture_first() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_gumbel_survey(&d.join("s.csv"), 3);
    let out = ok(&[
        "fit", "--survey", &p(d, "s.csv"), "--families", "gumbel-mix,normal-mix,gumbel,poisson", "--seed", "7", "--out",
        &p(d, "fits.csv"),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("fitted 144 of 144 cells"), "{stdout}");
    assert!(stdout.contains("gumbel-mix\t36\t"));
    let fits = read_fits(std::fs::File::open(d.join("fits.csv")).unwrap()).unwrap();
    assert_eq!(fits.len(), 4 * 36);

    ok(&[
        "crossval", "--fits", &p(d, "fits.csv"), "--survey", &p(d, "s.csv"), "--tov", "sb", "--covariates", "y",
        "--out", &p(d, "rank.csv"), "--bundle-out", &p(d, "bundles"),
    ]);
    let rows = read_ranking(std::fs::File::open(d.join("rank.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].family, FamilyId::mixture(BaseFamily::Gumbel));
    assert!(rows.iter().all(|r| r.violence_type == ViolenceScope::Sb));
    assert_eq!(rows[0].rel_increase_median, 1.0);
    let bundle = std::fs::read_to_string(d.join("bundles/bundle_sb.json")).unwrap();
    assert!(bundle.contains("\"family\": \"gumbel\""));

    // The fitted bundle drives predict.
    ok(&["predict", "--bundle", &p(d, "bundles/bundle_sb.json"), "--grid", "1,10", "--out", &p(d, "c.csv")]);
    assert_eq!(read_curve(std::fs::File::open(d.join("c.csv")).unwrap()).unwrap().len(), 2);
}

#[test]
fn crossval_without_tov_covers_each_type() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_gumbel_survey(&d.join("s.csv"), 2);
    ok(&["fit", "--survey", &p(d, "s.csv"), "--families", "gumbel-mix", "--seed", "1", "--generations", "20", "--out", &p(d, "f.csv")]);
    ok(&["crossval", "--fits", &p(d, "f.csv"), "--survey", &p(d, "s.csv"), "--covariates", "y", "--out", &p(d, "r.csv")]);
    let rows = read_ranking(std::fs::File::open(d.join("r.csv")).unwrap()).unwrap();
    let scopes: Vec<_> = rows.iter().map(|r| r.violence_type).collect();
    assert!(scopes.contains(&ViolenceScope::Sb) && scopes.contains(&ViolenceScope::Ns));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = cli(&["fit", "--survey", &p(d, "missing.csv"), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("survey file not found"));

    // Seed is mandatory.
    assert!(!cli(&["fit", "--survey", &p(d, "missing.csv")]).status.success());
    assert!(!cli(&["draws", "--events", &p(d, "e.csv")]).status.success());

    write_gumbel_survey(&d.join("one.csv"), 1);
    ok(&["fit", "--survey", &p(d, "one.csv"), "--families", "gumbel-mix", "--seed", "1", "--generations", "5", "--out", &p(d, "f1.csv")]);
    let out = cli(&["crossval", "--fits", &p(d, "f1.csv"), "--survey", &p(d, "one.csv"), "--out", &p(d, "r.csv")]);
    assert_eq!(out.status.code(), Some(3));

    std::fs::write(d.join("empty_fits.csv"), "").unwrap();
    let out = cli(&["crossval", "--fits", &p(d, "empty_fits.csv"), "--survey", &p(d, "one.csv")]);
    assert_eq!(out.status.code(), Some(3));

    std::fs::write(d.join("bad.json"), "{\"family\": 3").unwrap();
    let out = cli(&["predict", "--bundle", &p(d, "bad.json"), "--y", "3"]);
    assert_eq!(out.status.code(), Some(4));
    let out = cli(&["predict", "--bundle", &p(d, "nope.json"), "--y", "3"]);
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(d.join("e.csv"), "event_id,reported_value,violence_type\n").unwrap();
    let out = cli(&["simulate", "--events", &p(d, "e.csv"), "--seed", "1", "--out-dir", &p(d, "sim")]);
    assert_eq!(out.status.code(), Some(5));
    let out = cli(&["simulate", "--events", &p(d, "absent.csv"), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_outputs() {
    let out = ok(&["predict", "--grid", "0..1000"]);
    let rows = read_curve(out.stdout.as_slice()).unwrap();
    assert_eq!(rows.len(), 1001);
    assert!(rows[100].inflation() > 0.0);

    let out = ok(&["predict", "--y", "13"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let table: Vec<(u64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    let mode = table.iter().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
    assert_eq!(mode.0, 13);
    assert!(mode.1 > 0.4);

    let out = ok(&["predict", "--grid", "1", "--crossover"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("crossover 230"));
}

#[test]
fn bundle_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Drop the weight intercept far down: the env bundle must take effect.
    let json = shipped_sb().to_json().unwrap().replace("\"intercept\": -0.095", "\"intercept\": -30.0");
    std::fs::write(d.join("b.json"), json).unwrap();
    let run = |with_env: bool| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_uncertain-events"));
        c.args(["predict", "--y", "13"]).env_remove(BUNDLE_ENV);
        if with_env {
            c.env(BUNDLE_ENV, d.join("b.json"));
        }
        String::from_utf8(c.output().unwrap().stdout).unwrap()
    };
    let pmf13 = |s: &str| -> f64 {
        s.lines().find(|l| l.starts_with("13,13,")).unwrap().rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!(pmf13(&run(false)) > 0.4);
    assert!(pmf13(&run(true)) < 0.2);
}

#[test]
fn simulate_and_draws_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let events: Vec<EventRecord> = (0..100).map(|i| EventRecord::new(format!("e{i}"), 1 + i % 9, ViolenceType::Sb)).collect();
    write_event_file(&d.join("ev.csv"), &events);
    ok(&["simulate", "--events", &p(d, "ev.csv"), "--seed", "4", "--out-dir", &p(d, "sim")]);
    let totals = read_totals(std::fs::File::open(d.join("sim/totals.csv")).unwrap()).unwrap();
    assert_eq!(totals.len(), 1000);
    let summary = read_summary(std::fs::File::open(d.join("sim/summary.csv")).unwrap()).unwrap();
    assert!(summary.mean >= summary.reported_sum as f64);
    ok(&["simulate", "--events", &p(d, "ev.csv"), "--seed", "4", "--out-dir", &p(d, "sim2")]);
    assert_eq!(std::fs::read(d.join("sim/totals.csv")).unwrap(), std::fs::read(d.join("sim2/totals.csv")).unwrap());

    write_event_file(&d.join("three.csv"), &events[..3]);
    ok(&["draws", "--events", &p(d, "three.csv"), "--n", "1000", "--seed", "2", "--out", &p(d, "draws.csv")]);
    let draws = read_draws(std::fs::File::open(d.join("draws.csv")).unwrap()).unwrap();
    assert_eq!(draws.iter().map(|x| x.values.len()).sum::<usize>(), 3000);

    // ns events fall back to the state-based bundle with a warning.
    let ns = vec![EventRecord::new("n1", 4, ViolenceType::Ns)];
    write_event_file(&d.join("ns.csv"), &ns);
    let out = ok(&["draws", "--events", &p(d, "ns.csv"), "--n", "5", "--seed", "2", "--out", &p(d, "nsd.csv")]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("falling back"));
}
