use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{exit, BundleArgs, CliError, CliResult, Command, CrossvalArgs, DrawsArgs, FitArgs, PredictArgs, SimulateArgs, BUNDLE_ENV};
use crate::crossval::{best_per_family, configurations, in_sample, loco, rank_configurations, write_ranking, LocoResult};
use crate::distributions::FamilyId;
use crate::error::Error;
use crate::fitting::{fit_all, read_fits, write_fits, GaConfig};
use crate::numeric::median;
use crate::predictor::{crossover, density_table, event_draws, read_events, underreporting_curve, write_curve, write_density, write_draws, DrawMode, EventRecord, Predictor};
use crate::regression::{fit_bundle, predict_theta_in_context, shipped_sb, CoefficientBundle, ViolenceScope};
use crate::simulate::{aggregate, write_summary, write_totals};
use crate::survey::{ingest_survey, CoderDistribution, ViolenceType};

pub(super) fn dispatch(cmd: &Command) -> CliResult {
    match cmd {
        Command::Fit(a) => cmd_fit(a),
        Command::Crossval(a) => cmd_crossval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Draws(a) => cmd_draws(a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::new(exit::FAILURE, format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::new(exit::FAILURE, format!("{}: {e}", path.display())))
}

fn finish<W: Write>(mut w: W, path: &Path) -> CliResult {
    w.flush().map_err(|e| CliError::new(exit::FAILURE, format!("{}: {e}", path.display())))
}

fn load_survey(path: &Path) -> CliResult<Vec<CoderDistribution<f64>>> {
    if !path.exists() {
        return Err(CliError::new(exit::INPUT_NOT_FOUND, format!("survey file not found: {}", path.display())));
    }
    Ok(ingest_survey(path)?)
}

fn load_events(path: &Path) -> CliResult<Vec<EventRecord>> {
    let file = File::open(path)
        .map_err(|_| CliError::new(exit::INPUT_NOT_FOUND, format!("events file not found: {}", path.display())))?;
    let events = read_events(file)?;
    if events.is_empty() {
        return Err(CliError::new(exit::EMPTY_EVENTS, format!("no events in {}", path.display())));
    }
    Ok(events)
}

fn load_bundle(path: &Path) -> CliResult<CoefficientBundle<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(exit::BAD_BUNDLE, format!("bundle {}: {e}", path.display())))?;
    CoefficientBundle::from_json(&text).map_err(|e| CliError::new(exit::BAD_BUNDLE, format!("bundle {}: {e}", path.display())))
}

fn load_predictor(args: &BundleArgs) -> CliResult<Predictor<f64>> {
    let mut paths: Vec<PathBuf> = args.bundle.clone();
    if paths.is_empty() {
        if let Some(p) = std::env::var_os(BUNDLE_ENV).filter(|p| !p.is_empty()) {
            paths.push(PathBuf::from(p));
        }
    }
    if paths.is_empty() {
        log::info!("using the shipped state-based bundle");
        return Ok(Predictor::from_bundle(shipped_sb()));
    }
    let bundles = paths.iter().map(|p| load_bundle(p)).collect::<CliResult<Vec<_>>>()?;
    Ok(Predictor::new(bundles)?)
}

fn cmd_fit(a: &FitArgs) -> CliResult {
    let mut coders = load_survey(&a.survey)?;
    if let Some(tov) = &a.tov {
        coders.retain(|c| tov.contains(&c.violence_type));
    }
    if coders.is_empty() {
        return Err(CliError::new(exit::INSUFFICIENT_DATA, "no coder distributions to fit"));
    }
    let families = a.families.clone().unwrap_or_else(FamilyId::all);
    let cfg = GaConfig {
        population_size: a.population,
        generations: a.generations,
        ..GaConfig::with_seed(a.seed)
    };
    log::info!("fitting {} families to {} coder distributions", families.len(), coders.len());
    let report = fit_all(&families, &coders, &cfg);
    for f in &report.failures {
        log::warn!("{} for {} at {}: {}", f.family, f.coder_id, f.reported_value, f.message);
    }
    let out = create(&a.out)?;
    write_fits(&mut BufWriter::new(out), &report.fits)?;

    let stdout = io::stdout();
    let mut so = stdout.lock();
    let _ = writeln!(so, "fitted {} of {} cells ({} failed)", report.fits.len(), families.len() * coders.len(), report.failures.len());
    let _ = writeln!(so, "family\tn\tmedian_bad");
    for fam in &families {
        let bads: Vec<f64> = report.fits.iter().filter(|f| f.family == *fam).map(|f| f.bad.value()).collect();
        if !bads.is_empty() {
            let _ = writeln!(so, "{}\t{}\t{:.4}", fam.label(), bads.len(), median(&bads));
        }
    }
    Ok(())
}

fn cmd_crossval(a: &CrossvalArgs) -> CliResult {
    let coders = load_survey(&a.survey)?;
    let fits_file = File::open(&a.fits)
        .map_err(|_| CliError::new(exit::INPUT_NOT_FOUND, format!("fits file not found: {}", a.fits.display())))?;
    let fits = read_fits(fits_file)?;
    if fits.is_empty() {
        return Err(CliError::new(exit::INSUFFICIENT_DATA, "no fitted parameters"));
    }
    let scopes: Vec<ViolenceScope> = match &a.tov {
        Some(t) => t.clone(),
        None => coders
            .iter()
            .map(|c| c.violence_type)
            .collect::<BTreeSet<ViolenceType>>()
            .into_iter()
            .map(ViolenceScope::from)
            .collect(),
    };
    let present: BTreeSet<String> = fits.iter().map(|f| f.family.label()).collect();
    let families: Vec<FamilyId> = match &a.families {
        Some(f) => f.clone(),
        None => FamilyId::all().into_iter().filter(|f| present.contains(&f.label())).collect(),
    };

    let mut results: Vec<LocoResult<f64>> = Vec::new();
    for &scope in &scopes {
        for &family in &families {
            for model in configurations(family, scope, &a.covariates) {
                match loco(&fits, &coders, &model) {
                    Ok(r) => results.push(r),
                    Err(e @ Error::InsufficientCoders(_)) => return Err(e.into()),
                    Err(e) => log::warn!("skipping {family} {scope} {:?}: {e}", model.covariate_labels()),
                }
            }
        }
    }
    if results.is_empty() {
        return Err(CliError::new(exit::INSUFFICIENT_DATA, "no configuration could be evaluated"));
    }
    let table = if a.best_only { best_per_family(&results) } else { results.clone() };
    let rows = rank_configurations(&table);
    let out = create(&a.out)?;
    write_ranking(out, &rows)?;

    if let Some(dir) = &a.bundle_out {
        for &scope in &scopes {
            let scoped: Vec<LocoResult<f64>> = results.iter().filter(|r| r.violence_type == scope).cloned().collect();
            if let Some(best) = best_per_family(&scoped).first() {
                let model = configurations(best.family, scope, &a.covariates)
                    .into_iter()
                    .find(|m| m.params.iter().map(|p| p.covariates).eq(best.covariates.iter().copied()))
                    .expect("winning configuration comes from the grid");
                let bundle = fit_bundle(&fits, &model)?;
                let ins = in_sample(&fits, &coders, &model)?;
                log::info!(
                    "{scope}: best {} held-out median {:.4}, in-sample {:.4}",
                    best.family,
                    best.median_bad,
                    ins.median_bad
                );
                let path = dir.join(format!("bundle_{scope}.json"));
                let mut w = create(&path)?;
                bundle.write(&mut w)?;
                finish(w, &path)?;
            }
        }
    }
    Ok(())
}

fn parse_grid(s: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::new(exit::FAILURE, format!("invalid grid `{s}`"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<u64>().map_err(|_| bad()))
        .collect::<CliResult<Vec<_>>>()?;
    if v.is_empty() {
        Err(bad())
    } else {
        Ok(v)
    }
}

fn cmd_predict(a: &PredictArgs) -> CliResult {
    let predictor = load_predictor(&a.bundles)?;
    let mut sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    match (a.y, &a.grid) {
        (Some(y), _) => {
            let bundle = predictor.bundle_for(a.tov);
            let spec = predict_theta_in_context(bundle, y, a.context)?;
            write_density(&mut sink, y, &density_table(&spec)?)?;
        }
        (None, grid) => {
            let grid = parse_grid(grid.as_deref().unwrap_or("0..1000"))?;
            let rows = underreporting_curve(&predictor, a.tov, &grid)?;
            write_curve(&mut sink, &rows)?;
        }
    }
    sink.flush().map_err(|e| CliError::new(exit::FAILURE, e.to_string()))?;
    if a.crossover {
        match crossover(&predictor, a.tov, 10_000_000)? {
            Some(c) => println!("crossover {c}"),
            None => println!("crossover none"),
        }
    }
    Ok(())
}

fn mode(continuous: bool) -> DrawMode {
    if continuous {
        DrawMode::Continuous
    } else {
        DrawMode::Integer
    }
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult {
    let events = load_events(&a.events)?;
    let predictor = load_predictor(&a.bundles)?;
    let result = aggregate(&predictor, &events, a.replicates, a.seed, mode(a.continuous))?;
    let totals_path = a.out_dir.join("totals.csv");
    let mut w = create(&totals_path)?;
    write_totals(&mut w, &result.totals)?;
    finish(w, &totals_path)?;
    let summary_path = a.out_dir.join("summary.csv");
    let mut w = create(&summary_path)?;
    write_summary(&mut w, &result.summary)?;
    finish(w, &summary_path)?;
    log::info!(
        "{} events, reported {} -> mean total {:.1}",
        events.len(),
        result.summary.reported_sum,
        result.summary.mean
    );
    Ok(())
}

fn cmd_draws(a: &DrawsArgs) -> CliResult {
    let events = load_events(&a.events)?;
    let predictor = load_predictor(&a.bundles)?;
    let draws = event_draws(&predictor, &events, a.n, a.seed, mode(a.continuous))?;
    let mut w = create(&a.out)?;
    write_draws(&mut w, &draws)?;
    finish(w, &a.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_syntax() {
        assert_eq!(parse_grid("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_grid("0..=2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_grid("1, 10,100").unwrap(), vec![1, 10, 100]);
        assert_eq!(parse_grid("0..1000").unwrap().len(), 1001);
        assert!(parse_grid("5..1").is_err());
        assert!(parse_grid("x").is_err());
    }
}
