use std::collections::BTreeMap;
use std::path::Path;

use exval::cumulative::{run_cumulative_with_estimates, CumulativeOptions};
use exval::data::{
    load_macro, load_micro, parse_site_summaries, restrict_evidence_base, write_macro, write_micro,
    write_site_summaries, LoadOptions, MicroSchema, APPENDIX_TABLE_1,
};
use exval::decide::{decide_with_estimates, DecideOptions};
use exval::evf::{
    build_dyads_with_estimates, covariate_set_comparison, dyadic_regression, local_linear_evf,
    unconfounded_location_test, Bandwidth, DyadOptions, EvfOptions,
};
use exval::extrapolate::{extrapolate_effect, extrapolate_y0, fit_surface, SurfaceOptions};
use exval::heterogeneity::{format_table, heterogeneity_report};
use exval::site_effects::{estimate_all_with, funnel_summary, SiteEffectOptions};
use exval::siteselect::{greedy_second_site, rank_sites, SecondSiteOptions};
use exval::synth::generate;
use exval::{CovariateSet, EffectEstimate, EvidenceBase, Outcome};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, BUNDLED};
use crate::output::{file_sha256, num, opt_num, Csv, FileHash, Outputs};
use crate::{CliError, Command};

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    seed: u64,
    inputs: Vec<FileHash>,
    outputs: &'a [FileHash],
    notes: &'a [String],
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: Outputs,
    inputs: Vec<FileHash>,
    notes: Vec<String>,
}

pub fn dispatch(cmd: Command, cfg: &RunConfig) -> Result<(), CliError> {
    let mut run = Run {
        cfg,
        out: Outputs::new(&cfg.output_dir)?,
        inputs: Vec::new(),
        notes: Vec::new(),
    };
    match cmd {
        Command::Estimate => estimate(&mut run)?,
        Command::Heterogeneity => heterogeneity(&mut run)?,
        Command::Evf => evf(&mut run)?,
        Command::Extrapolate => extrapolate(&mut run)?,
        Command::Cumulative => cumulative(&mut run)?,
        Command::SiteSelect => site_select(&mut run)?,
        Command::Decide => decide(&mut run)?,
        Command::Simulate => simulate(&mut run)?,
    }
    let manifest = Manifest {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seed: cfg.seed,
        inputs: run.inputs,
        outputs: &run.out.files,
        notes: &run.notes,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = run.out.path("manifest.json");
    std::fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
    println!(
        "{}: wrote {} file(s) and manifest.json to {}",
        cmd.name(),
        run.out.files.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

impl Run<'_> {
    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileHash {
            file: path.display().to_string(),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    fn surface(&self) -> SurfaceOptions {
        SurfaceOptions {
            selection: self.cfg.selection,
            lasso: self.cfg.lasso,
            subsample_cap: self.cfg.subsample_cap,
            subsample_seed: self.cfg.seed,
            use_weights: self.cfg.use_weights,
        }
    }

    fn dyad_options(&self) -> Result<DyadOptions, CliError> {
        Ok(DyadOptions {
            micro_adjustment: self.cfg.micro_adjustment,
            include_self: self.cfg.self_dyads,
            surface: self.surface(),
            schema: self.cfg.schema()?,
            ..DyadOptions::default()
        })
    }

    fn evidence_base(&mut self) -> Result<EvidenceBase, CliError> {
        let micro = self.cfg.micro.clone().expect("validated");
        let macro_ = self.cfg.macro_.clone().expect("validated");
        self.input(&micro)?;
        self.input(&macro_)?;
        let load = load_micro(
            &micro,
            &MicroSchema::default(),
            LoadOptions {
                skip_invalid: self.cfg.skip_invalid,
            },
        )?;
        for d in &load.diagnostics {
            self.notes.push(format!("micro row {}: {}", d.row, d.message));
        }
        let macros = load_macro(&macro_)?;
        let (mut eb, diag) = EvidenceBase::assemble(load.groups, &macros)?;
        self.notes.extend(diag);
        if self.cfg.restrict {
            let (r, reports) = restrict_evidence_base(&eb);
            for (k, rep) in reports {
                if let Some(w) = rep.warning {
                    self.notes.push(format!("site {k}: {w}"));
                }
            }
            eb = r;
        }
        Ok(eb)
    }

    fn estimates(&mut self, eb: &EvidenceBase, outcome: Outcome) -> Vec<EffectEstimate> {
        let opts = SiteEffectOptions {
            use_weights: self.cfg.use_weights,
            ..SiteEffectOptions::default()
        };
        let all = estimate_all_with(eb, outcome, &opts);
        for s in &all.skipped {
            self.notes
                .push(format!("{} {}: skipped: {}", outcome.label(), s.site, s.reason));
        }
        all.estimates
    }
}

fn estimate(run: &mut Run) -> Result<(), CliError> {
    let eb = run.evidence_base()?;
    let mut all = Vec::new();
    for o in Outcome::ALL {
        all.extend(run.estimates(&eb, o));
    }
    write_site_summaries(&run.out.path("effects.csv"), &all)?;
    run.out.written("effects.csv")
}

fn heterogeneity(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let estimates = match cfg.summaries.as_deref() {
        Some(BUNDLED) => parse_site_summaries(APPENDIX_TABLE_1)?,
        Some(path) => {
            run.input(Path::new(path))?;
            parse_site_summaries(&std::fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.into(),
                source,
            })?)?
        }
        None => {
            let eb = run.evidence_base()?;
            let mut all = Vec::new();
            for o in Outcome::ALL {
                all.extend(run.estimates(&eb, o));
            }
            all
        }
    };
    let mut reports = Vec::new();
    let mut significance = Vec::new();
    for o in Outcome::ALL {
        let est: Vec<EffectEstimate> = estimates.iter().filter(|e| e.outcome == o).cloned().collect();
        if est.is_empty() {
            continue;
        }
        let r = heterogeneity_report(o.label(), &est, cfg.mc_reps, cfg.seed)?;
        let f = funnel_summary(&est)?;
        let mut csv = Csv::new(&["se", "lower", "upper"]);
        for b in &f.bounds {
            csv.row([num(b.se), num(b.lower), num(b.upper)]);
        }
        run.out.csv(&format!("funnel_{}.csv", o.label()), csv)?;
        significance.push(json!({
            "outcome": o.label(),
            "n": f.n,
            "weighted_mean": f.weighted_mean,
            "frac_significant_5": f.frac_significant_5,
            "frac_significant_10": f.frac_significant_10,
            "frac_outside_funnel": f.frac_outside_funnel,
        }));
        reports.push(r);
    }
    if reports.is_empty() {
        return Err(exval::Error::InsufficientData("no effect estimates".into()).into());
    }
    print!("{}", format_table(&reports));
    for s in &significance {
        println!(
            "{}: significant at 5%: {:.3}, at 10%: {:.3}, outside funnel: {:.3}",
            s["outcome"].as_str().unwrap_or_default(),
            s["frac_significant_5"].as_f64().unwrap_or(f64::NAN),
            s["frac_significant_10"].as_f64().unwrap_or(f64::NAN),
            s["frac_outside_funnel"].as_f64().unwrap_or(f64::NAN),
        );
    }
    run.out.json(
        "heterogeneity.json",
        &json!({ "reports": reports, "significance": significance }),
    )
}

fn evf(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let eb = run.evidence_base()?;
    let est = run.estimates(&eb, cfg.outcome);
    let dopts = run.dyad_options()?;
    let set = build_dyads_with_estimates(&eb, cfg.outcome, &est, &dopts)?;
    run.notes.extend(set.diagnostics.iter().cloned());

    let mut header: Vec<String> = [
        "reference",
        "target",
        "tau_hat",
        "tau_target",
        "se_target",
        "zeta",
        "y0_hat",
        "y0_target",
        "zeta_y0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(set.vars.iter().map(|v| format!("raw_{}", v.name())));
    header.extend(set.vars.iter().map(|v| format!("diff_{}", v.name())));
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&hdr);
    for d in &set.dyads {
        let mut row = vec![
            d.reference.to_string(),
            d.target.to_string(),
            num(d.tau_hat),
            num(d.tau_target),
            num(d.se_target),
            num(d.zeta),
            num(d.y0_hat),
            num(d.y0_target),
            num(d.zeta_y0),
        ];
        row.extend(d.raw.iter().map(|&v| num(v)));
        row.extend(d.diffs.iter().map(|&v| num(v)));
        csv.row(row);
    }
    run.out.csv("dyads.csv", csv)?;

    let eopts = EvfOptions {
        bandwidth: cfg.bandwidth.map_or(Bandwidth::Auto, Bandwidth::Fixed),
        grid_points: cfg.grid_points,
        weighted: cfg.evf_weighted,
        se: cfg.pointwise_se,
        ..EvfOptions::default()
    };
    let mut bandwidths = BTreeMap::new();
    for &v in &cfg.evf_covariates {
        let c = local_linear_evf(&set, v, &eopts)?;
        let mut csv = Csv::new(&["difference", "fitted", "se", "lower", "upper"]);
        for i in 0..c.grid.len() {
            csv.row([num(c.grid[i]), num(c.fitted[i]), num(c.se[i]), num(c.lower[i]), num(c.upper[i])]);
        }
        run.out.csv(&format!("evf_curve_{}.csv", v.name()), csv)?;
        bandwidths.insert(v.name(), c.bandwidth);
    }

    let mut t3 = Csv::new(&["model", "term", "coefficient", "se", "se_hc", "n", "r_squared"]);
    let mut models = vec![("multivariate".to_string(), set.vars.clone())];
    models.extend(set.vars.iter().map(|&v| (v.name().to_string(), vec![v])));
    let mut multivariate = None;
    for (name, vars) in models {
        match dyadic_regression(&set, &vars, cfg.evf_weighted) {
            Ok(r) => {
                for j in 0..r.names.len() {
                    t3.row([
                        name.clone(),
                        r.names[j].clone(),
                        num(r.coefficients[j]),
                        num(r.se[j]),
                        num(r.se_hc[j]),
                        r.n.to_string(),
                        num(r.r_squared),
                    ]);
                }
                if multivariate.is_none() {
                    multivariate = Some(r);
                }
            }
            Err(e) => run.notes.push(format!("table3 {name}: {e}")),
        }
    }
    run.out.csv("table3.csv", t3)?;

    let cmp = covariate_set_comparison(
        &eb,
        cfg.outcome,
        &est,
        &CovariateSet::ALL,
        &dopts.schema,
        &dopts.surface,
    )?;
    run.notes.extend(cmp.diagnostics.iter().cloned());
    let mut cs = Csv::new(&["site", "covariate_set", "predicted", "actual", "error"]);
    for r in &cmp.rows {
        cs.row([
            r.site.to_string(),
            r.covariate_set.name().to_string(),
            num(r.predicted),
            num(r.actual),
            num(r.error),
        ]);
    }
    run.out.csv("covariate_sets.csv", cs)?;

    let location = match unconfounded_location_test(&set, cfg.evf_covariates[0], &eopts, cfg.alpha) {
        Ok(t) => Some(json!({
            "covariate": cfg.evf_covariates[0].name(),
            "intercept": t.intercept,
            "se": t.se,
            "z": t.z,
            "p_value": t.p_value,
            "reject": t.reject,
            "alpha": t.alpha,
        })),
        Err(e) => {
            run.notes.push(format!("location test: {e}"));
            None
        }
    };
    run.out.json(
        "evf.json",
        &json!({
            "n_dyads": set.len(),
            "n_sites": set.n_sites,
            "scales": set.vars.iter().zip(&set.scales).map(|(v, s)| (v.name(), *s)).collect::<BTreeMap<_, _>>(),
            "bandwidths": bandwidths,
            "multivariate": multivariate,
            "location_test": location,
            "error_distributions": cmp.distributions,
        }),
    )
}

fn extrapolate(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let eb = run.evidence_base()?;
    let est = run.estimates(&eb, cfg.outcome);
    let schema = cfg.schema()?;
    let surf = run.surface();
    let value = match cfg.target_key() {
        Some(t) => {
            let tsite = eb
                .site(&t)
                .ok_or_else(|| exval::Error::InvalidInput(format!("target {t} not in the evidence base")))?;
            let refs = eb.filter(|s| s.key != t);
            let (surfaces, cache) = fit_surface(&refs, cfg.outcome, &schema, cfg.covariate_set, &surf)?;
            run.notes.extend(cache.diagnostics.iter().map(|(k, m)| format!("site {k}: {m}")));
            let tau = extrapolate_effect(&cache.spec, &surfaces, tsite)?;
            let y0 = extrapolate_y0(&cache.spec, &surfaces, tsite)?;
            let actual = est.iter().find(|e| e.site == t);
            json!({
                "target": t.to_string(),
                "outcome": cfg.outcome.label(),
                "covariate_set": cfg.covariate_set.name(),
                "tau_hat": tau.value,
                "y0_hat": y0.value,
                "tau_target": actual.map(|e| e.tau),
                "se_target": actual.map(|e| e.se),
                "n_reference": refs.len(),
                "selected_treated": surfaces.treated.selected_names(),
                "selected_control": surfaces.control.selected_names(),
                "support_warnings": tau.support_warnings,
            })
        }
        None => {
            let cmp = covariate_set_comparison(&eb, cfg.outcome, &est, &[cfg.covariate_set], &schema, &surf)?;
            run.notes.extend(cmp.diagnostics.iter().cloned());
            json!({
                "outcome": cfg.outcome.label(),
                "covariate_set": cfg.covariate_set.name(),
                "leave_one_out": cmp.rows,
                "mean_abs_error": cmp.mean_abs_error(cfg.covariate_set),
            })
        }
    };
    run.out.json("extrapolation.json", &value)
}

fn cumulative(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let eb = run.evidence_base()?;
    let est = run.estimates(&eb, cfg.outcome);
    let defaults = CumulativeOptions::default();
    let opts = CumulativeOptions {
        methods: cfg.methods.clone(),
        micro_pool: cfg.micro_pool,
        dyads: DyadOptions {
            surface: run.surface(),
            schema: cfg.schema()?,
            ..defaults.dyads.clone()
        },
        ..defaults
    };
    let res = run_cumulative_with_estimates(&eb, cfg.outcome, &est, &opts)?;
    run.notes.extend(res.diagnostics.iter().cloned());
    let mut csv = Csv::new(&[
        "year",
        "target",
        "method",
        "predicted",
        "actual",
        "error",
        "pool_size",
        "reference",
    ]);
    for r in &res.runs {
        csv.row([
            r.year.to_string(),
            r.target.to_string(),
            r.method.name().to_string(),
            num(r.predicted),
            num(r.actual),
            num(r.error),
            r.pool_size.to_string(),
            r.reference.as_ref().map_or_else(|| "NA".to_string(), |k| k.to_string()),
        ]);
    }
    run.out.csv("cumulative.csv", csv)?;
    let mut by = Csv::new(&["year", "method", "n", "mean_abs_error"]);
    for s in res.by_year() {
        by.row([s.year.to_string(), s.method.name().to_string(), s.n.to_string(), num(s.mean_abs_error)]);
    }
    run.out.csv("cumulative_by_year.csv", by)
}

fn site_select(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let eb = run.evidence_base()?;
    let est = run.estimates(&eb, cfg.outcome);
    let dopts = run.dyad_options()?;
    let ranks = rank_sites(&eb, cfg.outcome, &est, &dopts, &cfg.ranking_covariates, cfg.regularize)?;
    run.notes.extend(ranks.diagnostics.iter().cloned());
    let mut csv = Csv::new(&[
        "site",
        "loo_mean_error",
        "loo_mean_abs_error",
        "composite_index",
        "composite_percentile",
        "mean_mahalanobis",
    ]);
    for r in &ranks.rows {
        csv.row([
            r.site.to_string(),
            opt_num(r.loo_mean_error),
            opt_num(r.loo_mean_abs_error),
            opt_num(r.composite_index),
            opt_num(r.composite_percentile),
            opt_num(r.mean_mahalanobis),
        ]);
    }
    run.out.csv("rankings.csv", csv)?;
    if let Some(first) = cfg.first_site_key() {
        let opts = SecondSiteOptions {
            schema: dopts.schema.clone(),
            surface: dopts.surface.clone(),
            vars: cfg.ranking_covariates.clone(),
            regularize: cfg.regularize,
            ..SecondSiteOptions::default()
        };
        let rows = greedy_second_site(&eb, cfg.outcome, &est, &first, cfg.objective, &opts)?;
        let mut csv = Csv::new(&[
            "site",
            "mean_abs_error",
            "single_site_mean_abs_error",
            "n_targets",
            "distance_from_base",
        ]);
        for r in &rows {
            csv.row([
                r.site.to_string(),
                num(r.mean_abs_error),
                num(r.single_site_mean_abs_error),
                r.n_targets.to_string(),
                num(r.distance_from_base),
            ]);
        }
        run.out.csv("second_site.csv", csv)?;
    }
    Ok(())
}

fn decide(run: &mut Run) -> Result<(), CliError> {
    let cfg = run.cfg;
    let eb = run.evidence_base()?;
    let est = run.estimates(&eb, cfg.outcome);
    let target = cfg.target_key().expect("validated");
    let c_star = cfg.c_star.expect("validated");
    let opts = DecideOptions {
        covariate_set: cfg.covariate_set,
        variance_set: cfg.variance_set,
        variance_order: cfg.variance_order,
        schema: cfg.schema()?,
        surface: run.surface(),
        alpha: cfg.alpha,
        bootstrap_reps: cfg.bootstrap_reps,
        seed: cfg.seed,
        ..DecideOptions::default()
    };
    let rep = decide_with_estimates(&eb, cfg.outcome, &est, &target, c_star, &opts)?;
    let iv = &rep.decision.interval;
    println!(
        "{target}: {} (c* = {c_star}, interval [{:.4}, {:.4}], point {:.4})",
        rep.decision.verdict, iv.lower, iv.upper, iv.point
    );
    run.out.json("decision.json", &rep)
}

fn simulate(run: &mut Run) -> Result<(), CliError> {
    let dgp = run.cfg.dgp();
    let (eb, oracle) = generate(&dgp)?;
    write_micro(&run.out.path("micro.csv"), &eb)?;
    run.out.written("micro.csv")?;
    write_macro(&run.out.path("macro.csv"), &eb)?;
    run.out.written("macro.csv")?;
    run.out.json("oracle.json", &oracle)
}
