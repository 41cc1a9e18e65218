use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use survae_client::Client;
use survae_core::api::{ContrastRequest, ContrastResponse, PredictRequest, PredictResponse, Service};
use survae_core::data::{generate, inject_missing, Dataset};
use survae_core::impute::{apply_impute, fit_impute, ImputeOptions};
use survae_core::pipeline::{evaluate, fit, EvalOptions, ModelArtifact};
use survae_core::rng::stream;
use survae_server::AppState;

use crate::args::{EvalArgs, ImputeArgs, PredictArgs, ServeArgs, SynthArgs, TrainArgs};
use crate::error::CliError;

const STREAM_MISSING: u64 = 31;
const STREAM_IMPUTE: u64 = 32;
/// Rows of the survival grid echoed to stdout; the report has all of them.
const PRINTED_GRID_ROWS: usize = 10;

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write(path, &text)
}

/// Fails with the path in the message, which the loaders' own errors lack.
fn require_file(path: &Path) -> Result<(), CliError> {
    std::fs::metadata(path).map(|_| ()).map_err(|e| CliError::io(path, e))
}

fn load_dataset(data: &Path, schema: &Path) -> Result<Dataset, CliError> {
    require_file(data)?;
    require_file(schema)?;
    Ok(Dataset::load_csv(data, schema)?)
}

fn load_artifact(path: &Path) -> Result<ModelArtifact, CliError> {
    require_file(path)?;
    Ok(ModelArtifact::load(path)?)
}

fn fmt_c(c: Option<f64>) -> String {
    c.map_or_else(|| "undefined".to_owned(), |v| format!("{v:.4}"))
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = args.config();
    let (mut ds, truth) = generate(&cfg)?;
    if args.missing_rate > 0.0 {
        ds = inject_missing(&ds, args.missing_rate, &mut stream(args.seed, STREAM_MISSING))?;
    }
    ds.save_csv(&args.out)?;
    ds.schema
        .save(&args.schema_out)
        .map_err(|e| CliError::Data(e.into()))?;
    if let Some(path) = &args.truth_out {
        truth.save_json(path)?;
    }
    tracing::info!(rows = ds.n_rows(), path = %args.out.display(), "wrote synthetic data");
    println!(
        "rows {}  events {}  censored {:.3}  missing {:.3}",
        ds.n_rows(),
        ds.n_events(),
        1.0 - ds.n_events() as f64 / ds.n_rows() as f64,
        ds.missing_fraction()
    );
    println!("data   {}", args.out.display());
    println!("schema {}", args.schema_out.display());
    Ok(())
}

pub fn impute(args: &ImputeArgs) -> Result<(), CliError> {
    let ds = load_dataset(&args.paths.data, &args.paths.schema)?;
    let opts = ImputeOptions {
        rounds: args.rounds,
        jitter: args.jitter,
    };
    let model = fit_impute(&ds, &opts, &mut stream(args.seed, STREAM_IMPUTE))?;
    let completed = apply_impute(&ds, &model)?;
    completed.save_csv(&args.out)?;
    if let Some(path) = &args.model_out {
        write_json(path, &model)?;
    }
    let filled = ds.observed.iter().flatten().filter(|o| !**o).count();
    let cells = ds.n_rows() * ds.schema.n_covariates();
    println!("filled {filled} of {cells} covariate cells");
    println!("data {}", args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let ds = load_dataset(&args.paths.data, &args.paths.schema)?;
    let opts = args.options();
    tracing::info!(rows = ds.n_rows(), max_epochs = opts.train.max_epochs, "training");
    let out = fit(&ds, &opts)?;
    out.artifact.save(&args.model)?;
    write(&args.trace, &out.report.to_tsv())?;
    let t = &out.artifact.training;
    println!("epochs run   {}", t.epochs_run);
    println!("best epoch   {}", t.best_epoch);
    println!("stopped      {}", serde_json::to_value(t.stopped).expect("serializes").as_str().unwrap_or("?"));
    println!("train ELBO   {:.4}", t.best_train_elbo);
    println!("val ELBO     {:.4}", t.best_val_elbo);
    println!("model        {}", args.model.display());
    println!("trace        {}", args.trace.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let ds = load_dataset(&args.paths.data, &args.paths.schema)?;
    let artifact = load_artifact(&args.model)?;
    let opts = EvalOptions {
        samples: args.samples,
        risk: args.risk(),
        seed: args.seed,
    };
    let report = evaluate(&artifact, &ds, &opts)?;
    write_json(&args.report, &report)?;
    println!("{:<8}{:>10}{:>12}", "model", "train c", "val c");
    println!("{:<8}{:>10}{:>12}", "cox", fmt_c(report.cox_train_c), fmt_c(report.cox_val_c));
    println!("{:<8}{:>10}{:>12}", "vae", fmt_c(report.vae_train_c), fmt_c(report.vae_val_c));
    println!("report {}", args.report.display());
    Ok(())
}

/// Parses `NAME=VALUE` pairs; an empty value or `na` marks the covariate
/// for imputation.
fn parse_covariates(pairs: &[String]) -> Result<BTreeMap<String, Option<f64>>, CliError> {
    let mut out = BTreeMap::new();
    for pair in pairs {
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--covariate expects NAME=VALUE, got {pair:?}")))?;
        let value = value.trim();
        let parsed = if value.is_empty() || value.eq_ignore_ascii_case("na") {
            None
        } else {
            Some(
                value
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("covariate {name:?}: {value:?} is not a number")))?,
            )
        };
        out.insert(name.trim().to_owned(), parsed);
    }
    Ok(out)
}

/// A treatment given as names, a 0/1 vector or `none`.
fn parse_treatment(spec: &str, names: &[String]) -> Result<Vec<f64>, CliError> {
    let spec = spec.trim();
    let mut t = vec![0.0; names.len()];
    if spec.is_empty() || spec.eq_ignore_ascii_case("none") {
        return Ok(t);
    }
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.iter().all(|p| *p == "0" || *p == "1") {
        if parts.len() != names.len() {
            return Err(CliError::Usage(format!(
                "treatment vector {spec:?} needs {} entries",
                names.len()
            )));
        }
        return Ok(parts.iter().map(|p| if *p == "1" { 1.0 } else { 0.0 }).collect());
    }
    for p in parts {
        let j = names
            .iter()
            .position(|n| n == p)
            .ok_or_else(|| CliError::Usage(format!("unknown treatment {p:?}; expected one of {names:?}")))?;
        t[j] = 1.0;
    }
    Ok(t)
}

#[derive(Serialize)]
struct PredictReport {
    predict: PredictResponse,
    contrast: ContrastResponse,
}

fn requests(args: &PredictArgs, treatments: &[String]) -> Result<(PredictRequest, ContrastRequest), CliError> {
    let covariates = parse_covariates(&args.covariates)?;
    let t0 = parse_treatment(&args.t0, treatments)?;
    let t1 = parse_treatment(&args.t1, treatments)?;
    let predict = PredictRequest {
        covariates: covariates.clone(),
        treatment: t1.clone(),
        horizon: args.horizon,
        samples: Some(args.samples),
        seed: Some(args.seed),
    };
    let contrast = ContrastRequest {
        covariates,
        t0,
        t1,
        horizon: args.horizon,
        threshold: Some(args.threshold),
        samples: Some(args.samples),
        seed: Some(args.seed),
    };
    Ok((predict, contrast))
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let report = match &args.server {
        Some(url) => {
            let client = Client::new(url.clone());
            runtime()?.block_on(async {
                let meta = client.meta().await?;
                let (p, c) = requests(args, &meta.schema.treatments)?;
                Ok::<_, CliError>(PredictReport {
                    predict: client.predict(&p).await?,
                    contrast: client.contrast(&c).await?,
                })
            })?
        }
        None => {
            let service = Service::new(load_artifact(&args.model)?)?;
            let (p, c) = requests(args, &service.artifact.schema.treatments)?;
            PredictReport {
                predict: service.predict(&p, args.seed)?,
                contrast: service.contrast(&c, args.seed)?,
            }
        }
    };
    write_json(&args.report, &report)?;

    let p = &report.predict;
    let c = &report.contrast;
    println!("expected survival  {:.4}", p.expected_survival);
    println!("median survival    {:.4}", p.median_survival);
    println!("{:<19}{:.4}", format!("S({})", p.horizon), p.survival_at_horizon);
    println!("ess                {:.1} of {}", p.ess, p.samples);
    if !p.imputed.is_empty() {
        println!("imputed            {}", p.imputed.join(", "));
    }
    println!("survival grid:");
    let stride = (p.curve.len() / PRINTED_GRID_ROWS).max(1);
    for point in p.curve.iter().step_by(stride) {
        println!("  y {:>10.4}  S {:.4}", point.y, point.s);
    }
    println!("contrast at {}: s1 {:.4}  s0 {:.4}  delta {:.4}", c.horizon, c.s1, c.s0, c.delta);
    let decision = serde_json::to_value(c.decision).expect("serializes");
    println!("decision at threshold {}: {}", c.threshold, decision.as_str().unwrap_or("?"));
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io(Path::new("tokio runtime"), e))
}

pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let state = match &args.model {
        Some(path) => {
            let service = Service::new(load_artifact(path)?)?;
            tracing::info!(model_version = %service.model_version, "model loaded");
            AppState::new(service, args.server_seed)
        }
        None => {
            tracing::warn!("no model given; all endpoints will answer 503");
            AppState::unloaded()
        }
    };
    let addr = format!("{}:{}", args.host, args.port);
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::io(Path::new(&addr), e))?;
        let local = listener.local_addr().map_err(|e| CliError::io(Path::new(&addr), e))?;
        tracing::info!(%local, "listening");
        // Announce the bound address on stdout so callers using port 0 can find it.
        println!("listening on http://{local}");
        survae_server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::io(Path::new(&addr), e))
    })
}
