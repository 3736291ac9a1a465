//! `nhmm`: fit, score, simulate, and diagnose non-homogeneous hidden Markov
//! models for multi-station daily series.
//!
//! Every failure exits nonzero with a one-line JSON error object on stderr.

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};
use nhmm_core::data::{harmonic_columns, load_w_dir, load_w_long_csv, load_x_csv};
use nhmm_core::engine::{run_chain, summarize, McmcConfig, Priors};
use nhmm_core::score::{
    count_parameters, forward_log_likelihood, predictive_log_score, spatial_diagnostics,
    ModelScore,
};
use nhmm_core::simulate::{forecast, simulate_chain};
use nhmm_core::states::most_probable_states;
use nhmm_core::transition::ZetaPrior;
use nhmm_core::{
    CovariateSet, EmissionParams, NhmmError, ObservationPanel, PosteriorStore,
    TransitionCoefficients,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "nhmm", version, about = "Bayesian non-homogeneous HMMs for daily multi-station series")]
struct Cli {
    /// Worker threads (falls back to NHMM_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the MCMC sampler and write a posterior store plus summaries.
    Fit(FitArgs),
    /// Simulate chains from the posterior-mean parameters of a store.
    Simulate(SimulateArgs),
    /// One predictive chain per retained draw, starting from the final
    /// training state.
    Forecast(ForecastArgs),
    /// BIC on the training window and PLS on the rows past it.
    Score(ScoreArgs),
    /// Generate a synthetic dataset with known truth.
    Synth(SynthArgs),
    /// Pairwise occurrence/amount diagnostics between two panels.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Observations CSV: header of station names, one row per day, NA = missing.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Day-level exogenous covariates CSV (column header suffix ":monthly"
    /// marks monthly series to interpolate).
    #[arg(long)]
    x: Option<PathBuf>,
    /// Station-level covariates, long format (day,station,name,value).
    #[arg(long)]
    w_long: Option<PathBuf>,
    /// Station-level covariates, one <station>.csv per station.
    #[arg(long)]
    w_dir: Option<PathBuf>,
    /// Append annual and semi-annual sin/cos terms to x.
    #[arg(long, default_value_t = false)]
    add_harmonics: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON config file; explicit flags win over its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Burn-in fraction of the retained iteration count.
    #[arg(long)]
    burn_in: Option<f64>,
    #[arg(long)]
    thinning: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Days held out from the end of the series (excluded from fitting).
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    zeta_prior_mean: Option<f64>,
    /// Normal prior variance on zeta (omit for the flat prior).
    #[arg(long)]
    zeta_prior_variance: Option<f64>,
    #[arg(long)]
    beta_precision: Option<f64>,
    #[arg(long)]
    lambda_shape: Option<f64>,
    #[arg(long)]
    lambda_rate: Option<f64>,
}

/// JSON counterpart of the fit flags.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: Option<PathBuf>,
    x: Option<PathBuf>,
    w_long: Option<PathBuf>,
    w_dir: Option<PathBuf>,
    add_harmonics: Option<bool>,
    states: Option<usize>,
    iterations: Option<usize>,
    burn_in: Option<f64>,
    thinning: Option<usize>,
    seed: Option<u64>,
    holdout: Option<usize>,
    out: Option<PathBuf>,
    zeta_prior_mean: Option<f64>,
    zeta_prior_variance: Option<f64>,
    beta_precision: Option<f64>,
    lambda_shape: Option<f64>,
    lambda_rate: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    w_long: Option<PathBuf>,
    #[arg(long)]
    w_dir: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    add_harmonics: bool,
    /// Simulation horizon in days.
    #[arg(long)]
    days: usize,
    #[arg(long, default_value_t = 100)]
    chains: usize,
    #[arg(long, default_value_t = 0)]
    init_state: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    x: Option<PathBuf>,
    #[arg(long)]
    w_long: Option<PathBuf>,
    #[arg(long)]
    w_dir: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    add_harmonics: bool,
    #[arg(long)]
    days: usize,
    /// Override the initial hidden state (default: each draw's final
    /// training state).
    #[arg(long)]
    init_state: Option<usize>,
    /// Cap on the number of per-draw simulation files written.
    #[arg(long, default_value_t = 100)]
    max_draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "scores.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    states: usize,
    #[arg(long, default_value_t = 5)]
    stations: usize,
    #[arg(long, default_value_t = 1000)]
    days: usize,
    #[arg(long, default_value_t = 1)]
    x_dim: usize,
    #[arg(long, default_value_t = 1)]
    w_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// First panel (typically observations).
    #[arg(long)]
    data: PathBuf,
    /// Second panel of the same shape (typically a simulation).
    #[arg(long)]
    other: PathBuf,
    #[arg(long, default_value = "diagnostics.json")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("NHMM_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    if let Err(e) = run(cli.cmd) {
        let kind = match &e {
            NhmmError::InvalidInput(_) => "invalid_input",
            NhmmError::Config(_) => "config",
            NhmmError::Numerical(_) => "numerical",
            NhmmError::Dimension(_) => "dimension",
            NhmmError::Parse { .. } => "parse",
            NhmmError::Io(_) => "io",
            NhmmError::Csv(_) => "csv",
            NhmmError::Json(_) => "json",
        };
        eprintln!(
            "{}",
            serde_json::json!({"error": {"kind": kind, "message": e.to_string()}})
        );
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<(), NhmmError> {
    match cmd {
        Cmd::Fit(a) => fit(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Forecast(a) => forecast_cmd(a),
        Cmd::Score(a) => score(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Diagnose(a) => diagnose(a),
    }
}

/// Raw (unstandardized) covariates for `t_days` rows.
fn load_raw_covariates(
    args: &DataArgs,
    t_days: usize,
    stations: &[String],
) -> Result<(Array2<f64>, Vec<String>, Array3<f64>, Vec<String>), NhmmError> {
    let (mut x, mut x_names) = match &args.x {
        Some(p) => load_x_csv(p, t_days)?,
        None => (Array2::zeros((t_days, 0)), Vec::new()),
    };
    if args.add_harmonics {
        let (h, h_names) = harmonic_columns(t_days);
        let mut joined = Array2::zeros((t_days, x.ncols() + h.ncols()));
        joined.slice_mut(ndarray::s![.., ..x.ncols()]).assign(&x);
        joined.slice_mut(ndarray::s![.., x.ncols()..]).assign(&h);
        x = joined;
        x_names.extend(h_names);
    }
    let (w, w_names) = match (&args.w_long, &args.w_dir) {
        (Some(_), Some(_)) => {
            return Err(NhmmError::Config(
                "pass either --w-long or --w-dir, not both".into(),
            ))
        }
        (Some(p), None) => load_w_long_csv(p, t_days, stations)?,
        (None, Some(d)) => load_w_dir(d, t_days, stations)?,
        (None, None) => (Array3::zeros((t_days, stations.len(), 0)), Vec::new()),
    };
    Ok((x, x_names, w, w_names))
}

fn slice_rows(
    panel: &ObservationPanel,
    x: &Array2<f64>,
    w: &Array3<f64>,
    range: std::ops::Range<usize>,
) -> (ObservationPanel, Array2<f64>, Array3<f64>) {
    let p = ObservationPanel::new(
        panel.values.slice(ndarray::s![range.clone(), ..]).to_owned(),
        panel.mask.slice(ndarray::s![range.clone(), ..]).to_owned(),
        panel.stations.clone(),
    )
    .expect("slice of a valid panel is valid");
    (
        p,
        x.slice(ndarray::s![range.clone(), ..]).to_owned(),
        w.slice(ndarray::s![range, .., ..]).to_owned(),
    )
}

fn fit(args: FitArgs) -> Result<(), NhmmError> {
    let cfg: RunConfig = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    let data_args = DataArgs {
        data: args.data.data.or(cfg.data),
        x: args.data.x.or(cfg.x),
        w_long: args.data.w_long.or(cfg.w_long),
        w_dir: args.data.w_dir.or(cfg.w_dir),
        add_harmonics: args.data.add_harmonics || cfg.add_harmonics.unwrap_or(false),
    };
    let data_path = data_args
        .data
        .clone()
        .ok_or_else(|| NhmmError::Config("missing observations path (--data)".into()))?;
    let out = args
        .out
        .or(cfg.out)
        .ok_or_else(|| NhmmError::Config("missing output directory (--out)".into()))?;
    let config = McmcConfig {
        iterations: args.iterations.or(cfg.iterations).unwrap_or(2000),
        burn_in_fraction: args.burn_in.or(cfg.burn_in).unwrap_or(0.1),
        seed: args.seed.or(cfg.seed).unwrap_or(0),
        k: args
            .states
            .or(cfg.states)
            .ok_or_else(|| NhmmError::Config("missing state count (--states)".into()))?,
        thinning: args.thinning.or(cfg.thinning).unwrap_or(1),
    };
    let holdout = args.holdout.or(cfg.holdout).unwrap_or(0);
    let priors = Priors {
        zeta: ZetaPrior {
            mean: args.zeta_prior_mean.or(cfg.zeta_prior_mean).unwrap_or(0.0),
            variance: args.zeta_prior_variance.or(cfg.zeta_prior_variance),
        },
        zeta_per_coefficient: None,
        beta_precision: args.beta_precision.or(cfg.beta_precision).unwrap_or(0.0),
        lambda_shape: args.lambda_shape.or(cfg.lambda_shape).unwrap_or(1.0),
        lambda_rate: args.lambda_rate.or(cfg.lambda_rate).unwrap_or(1.0),
    };

    let panel = ObservationPanel::load_csv(&data_path)?;
    let t_full = panel.n_days();
    if holdout + 2 > t_full {
        return Err(NhmmError::Config(format!(
            "holdout of {holdout} days leaves fewer than 2 of {t_full} for training"
        )));
    }
    let (x_raw, x_names, w_raw, w_names) =
        load_raw_covariates(&data_args, t_full, &panel.stations)?;
    let (train_panel, train_x, train_w) = slice_rows(&panel, &x_raw, &w_raw, 0..t_full - holdout);
    let covs = CovariateSet::standardize(train_x, train_w, x_names, w_names)?;

    let store = run_chain(train_panel, covs, config, priors)?;
    std::fs::create_dir_all(&out)?;
    store.save(out.join("store"))?;
    let summaries = summarize(&store, 0.95)?;
    let decoded = most_probable_states(&store.states, store.k())?;
    let summary = serde_json::json!({
        "parameters": summaries,
        "most_probable_states": decoded.z,
        "diagnostics": store.diagnostics,
        "n_draws": store.n_draws(),
        "holdout": holdout,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

/// Forecast-horizon covariates standardized with the training transforms.
fn holdout_covariates(
    store: &PosteriorStore,
    x_path: &Option<PathBuf>,
    w_long: &Option<PathBuf>,
    w_dir: &Option<PathBuf>,
    add_harmonics: bool,
    t_days: usize,
) -> Result<CovariateSet, NhmmError> {
    let args = DataArgs {
        data: None,
        x: x_path.clone(),
        w_long: w_long.clone(),
        w_dir: w_dir.clone(),
        add_harmonics,
    };
    let (x, x_names, w, w_names) = load_raw_covariates(&args, t_days, &store.stations)?;
    if x_names != store.x_names || w_names != store.w_names {
        return Err(NhmmError::InvalidInput(format!(
            "covariate columns {x_names:?}/{w_names:?} do not match the fitted {:?}/{:?}",
            store.x_names, store.w_names
        )));
    }
    CovariateSet::with_transforms(
        x,
        w,
        x_names,
        w_names,
        store.x_transforms.clone(),
        store.w_transforms.clone(),
    )
}

fn write_simulation<P: AsRef<Path>>(
    dir: P,
    idx: usize,
    stations: &[String],
    y: &Array2<f64>,
    states_rows: &mut Vec<String>,
    z: &[usize],
) -> Result<(), NhmmError> {
    let panel = ObservationPanel::new(
        y.clone(),
        Array2::from_elem(y.dim(), true),
        stations.to_vec(),
    )?;
    panel.write_csv(dir.as_ref().join(format!("sim_{idx:04}.csv")))?;
    for (day, &s) in z.iter().enumerate() {
        states_rows.push(format!("{idx},{day},{s}"));
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), NhmmError> {
    let store = PosteriorStore::load(&args.store)?;
    let covs = holdout_covariates(
        &store,
        &args.x,
        &args.w_long,
        &args.w_dir,
        args.add_harmonics,
        args.days,
    )?;
    let (trans, emis) = store.posterior_mean_params();
    let dir = args.out.join("simulations");
    std::fs::create_dir_all(&dir)?;
    let mut states_rows = Vec::new();
    for c in 0..args.chains {
        let mut rng = nhmm_core::rng::substream(args.seed, c as u64);
        let d = simulate_chain(&trans, &emis, &covs.x, &covs.w, args.init_state, &mut rng)?;
        write_simulation(&dir, c, &store.stations, &d.y_star, &mut states_rows, &d.z_star)?;
    }
    std::fs::write(
        dir.join("states.csv"),
        format!("chain,day,state\n{}\n", states_rows.join("\n")),
    )?;
    Ok(())
}

fn forecast_cmd(args: ForecastArgs) -> Result<(), NhmmError> {
    let store = PosteriorStore::load(&args.store)?;
    let covs = holdout_covariates(
        &store,
        &args.x,
        &args.w_long,
        &args.w_dir,
        args.add_harmonics,
        args.days,
    )?;
    let draws = forecast(&store, &covs.x, &covs.w, args.init_state, args.seed)?;
    let dir = args.out.join("simulations");
    std::fs::create_dir_all(&dir)?;
    let mut states_rows = Vec::new();
    for (i, d) in draws.iter().take(args.max_draws).enumerate() {
        write_simulation(&dir, i, &store.stations, &d.y_star, &mut states_rows, &d.z_star)?;
    }
    std::fs::write(
        dir.join("states.csv"),
        format!("draw,day,state\n{}\n", states_rows.join("\n")),
    )?;
    Ok(())
}

fn score(args: ScoreArgs) -> Result<(), NhmmError> {
    let store = PosteriorStore::load(&args.store)?;
    let data_path = args
        .data
        .data
        .clone()
        .ok_or_else(|| NhmmError::Config("missing observations path (--data)".into()))?;
    let panel = ObservationPanel::load_csv(&data_path)?;
    let t_full = panel.n_days();
    let t_train = store.n_days;
    if t_full <= t_train {
        return Err(NhmmError::Config(format!(
            "panel has {t_full} days but the store was fit on {t_train}; scoring needs held-out rows past the training window"
        )));
    }
    let (x_raw, x_names, w_raw, w_names) =
        load_raw_covariates(&args.data, t_full, &panel.stations)?;
    if x_names != store.x_names || w_names != store.w_names {
        return Err(NhmmError::InvalidInput(
            "covariate columns do not match the fitted store".into(),
        ));
    }
    let (train_panel, train_x, train_w) = slice_rows(&panel, &x_raw, &w_raw, 0..t_train);
    let (held_panel, held_x, held_w) = slice_rows(&panel, &x_raw, &w_raw, t_train..t_full);
    let train_covs = CovariateSet::with_transforms(
        train_x,
        train_w,
        x_names.clone(),
        w_names.clone(),
        store.x_transforms.clone(),
        store.w_transforms.clone(),
    )?;
    let held_covs = CovariateSet::with_transforms(
        held_x,
        held_w,
        x_names,
        w_names,
        store.x_transforms.clone(),
        store.w_transforms.clone(),
    )?;
    let (trans, emis) = store.posterior_mean_params();
    let loglik = forward_log_likelihood(&train_panel, &train_covs, &trans, &emis)?;
    let p = count_parameters(store.k(), store.n_stations(), store.a_dim(), store.b_dim());
    let n_obs = train_panel.n_observed();
    let bic = nhmm_core::score::bic(loglik, p, n_obs);
    let pls_res = predictive_log_score(&held_panel, &store, &held_covs.x, &held_covs.w, args.seed)?;
    if let Some(day) = pls_res.degenerate_day {
        eprintln!(
            "{}",
            serde_json::json!({"warning": format!("zero predictive density on held-out day {}", day + 1)})
        );
    }
    let report = ModelScore {
        k: store.k(),
        p,
        loglik,
        bic,
        pls: pls_res.pls,
        n_obs,
        seed: args.seed,
    };
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

#[derive(Serialize)]
struct SynthTruth {
    zeta: Vec<Vec<f64>>,
    beta0: Vec<Vec<f64>>,
    beta1: Vec<Vec<f64>>,
    gamma: Vec<f64>,
    lambda1: Vec<Vec<f64>>,
    lambda2: Vec<Vec<f64>>,
    states: Vec<usize>,
}

fn synth(args: SynthArgs) -> Result<(), NhmmError> {
    use rand::Rng;
    use rand_distr::Distribution;
    if args.states < 1 || args.stations < 1 || args.days < 2 {
        return Err(NhmmError::Config(
            "synth needs at least 1 state, 1 station, and 2 days".into(),
        ));
    }
    let (k, s, a, b) = (args.states, args.stations, args.w_dim, args.x_dim);
    let mut rng = nhmm_core::rng::substream(args.seed, 0x517);
    let mut zeta = Array2::zeros((k, k + b));
    for i in 0..k.saturating_sub(1) {
        for h in 0..k + b {
            let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
            zeta[(i, h)] = 0.8 * e;
        }
    }
    let trans = TransitionCoefficients::new(zeta, k - 1)?;
    let mut emis = EmissionParams::init(k, s, a);
    for kk in 0..k {
        // Spread the states from dry to wet regimes.
        let base = if k == 1 {
            0.0
        } else {
            -0.8 + 1.7 * kk as f64 / (k - 1) as f64
        };
        for ss in 0..s {
            let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
            emis.beta0[(kk, ss)] = base + 0.2 * e;
            emis.lambda[(0, kk, ss)] = 3.0 / (1.0 + kk as f64) * rng.gen_range(0.8..1.2);
            emis.lambda[(1, kk, ss)] = 0.8 / (1.0 + kk as f64) * rng.gen_range(0.8..1.2);
        }
    }
    for v in emis.beta1.iter_mut() {
        let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
        *v = 0.4 * e;
    }
    emis.gamma.fill(1.5);
    let (panel, covs, chain) =
        nhmm_core::simulate::generate_synthetic(&trans, &emis, args.days, args.missing, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    panel.write_csv(args.out.join("obs.csv"))?;
    // x CSV (already on the standardized scale).
    let mut x_csv = covs.x_names.join(",");
    x_csv.push('\n');
    for t in 0..args.days {
        let row: Vec<String> = covs.x.row(t).iter().map(|v| v.to_string()).collect();
        x_csv.push_str(&row.join(","));
        x_csv.push('\n');
    }
    std::fs::write(args.out.join("x.csv"), x_csv)?;
    // w long-format CSV.
    let mut w_csv = String::from("day,station,name,value\n");
    for t in 0..args.days {
        for (ss, st) in panel.stations.iter().enumerate() {
            for (ai, an) in covs.w_names.iter().enumerate() {
                w_csv.push_str(&format!("{},{st},{an},{}\n", t + 1, covs.w[(t, ss, ai)]));
            }
        }
    }
    std::fs::write(args.out.join("w.csv"), w_csv)?;
    let truth = SynthTruth {
        zeta: trans.zeta.rows().into_iter().map(|r| r.to_vec()).collect(),
        beta0: emis.beta0.rows().into_iter().map(|r| r.to_vec()).collect(),
        beta1: emis.beta1.rows().into_iter().map(|r| r.to_vec()).collect(),
        gamma: emis.gamma.to_vec(),
        lambda1: (0..k)
            .map(|kk| (0..s).map(|ss| emis.lambda[(0, kk, ss)]).collect())
            .collect(),
        lambda2: (0..k)
            .map(|kk| (0..s).map(|ss| emis.lambda[(1, kk, ss)]).collect())
            .collect(),
        states: chain.z,
    };
    std::fs::write(
        args.out.join("truth.json"),
        serde_json::to_string_pretty(&truth)?,
    )?;
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<(), NhmmError> {
    let a = ObservationPanel::load_csv(&args.data)?;
    let b = ObservationPanel::load_csv(&args.other)?;
    let pairs = spatial_diagnostics(&a, &b)?;
    let report = serde_json::json!({
        "stations": a.stations,
        "pairs": pairs,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}
