//! Subcommand bodies. Data goes to files or standard output; progress lines
//! go to standard error.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use latent_reco::baselines::{fit_itemknn, fit_popularity};
use latent_reco::bouchard::em_infer;
use latent_reco::data::{load_sessions, save_sessions, split_by_session, to_counts, SessionSet};
use latent_reco::encoder::Encoder;
use latent_reco::metrics::{evaluate, evaluate_latent_grid, EvalConfig, MetricsReport};
use latent_reco::model::{ModelParams, Posterior};
use latent_reco::predict::{predict_mc, predict_mean, top_k};
use latent_reco::simulator::{case_study_fixture, case_study_scenarios, simulate as draw_sessions, GroundTruth};
use latent_reco::trainer::{train as fit, TrainConfig};
use serde::Serialize;

use crate::{
    Algorithm, CaseStudyArgs, CliError, CliResult, EvalArgs, InferArgs, LatentArg, MethodArg, PredictArgs,
    SimulateArgs, SplitArgs, TrainArgs,
};

fn log(msg: impl std::fmt::Display) {
    eprintln!("[latent-reco] {msg}");
}

/// Names the file in the log when reading it fails.
fn reading<T>(path: &Path, r: latent_reco::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        log(format_args!("while reading {}", path.display()));
        CliError::Lib(e)
    })
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Lib(e.into()))
}

/// `model.txt` -> `model.config.json`.
fn config_path(output: &Path) -> PathBuf {
    output.with_extension("config.json")
}

/// Records the fully resolved settings of a run next to its main output.
fn write_resolved<T: Serialize>(output: &Path, command: &str, settings: &T) -> CliResult<()> {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        command: &'a str,
        settings: &'a T,
    }
    let text = serde_json::to_string_pretty(&Resolved { command, settings })
        .map_err(|e| CliError::Lib(e.into()))?;
    write_file(&config_path(output), &(text + "\n"))
}

/// Writes to `out` when given, else to standard output.
fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => write_file(path, text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Lib(e.into())),
    }
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let gt = match &a.ground_truth {
        Some(path) => GroundTruth {
            params: reading(path, ModelParams::load(path))?,
            seed: a.seed,
        },
        None => GroundTruth::random(a.num_items, a.k, a.psi_scale, a.rho_scale, a.seed)?,
    };
    let data = draw_sessions(&gt, a.sessions, a.length)?;
    save_sessions(&data, &a.out)?;
    gt.params.save(&a.params_out)?;
    write_resolved(&a.out, "simulate", a)?;
    log(format_args!(
        "wrote {} sessions ({} views, {} items) to {}",
        data.len(),
        data.num_events(),
        data.num_items(),
        a.out.display()
    ));
    Ok(())
}

pub fn split(a: &SplitArgs) -> CliResult<()> {
    let mut data = reading(&a.data, load_sessions(&a.data, a.num_items))?;
    if let Some(keep) = a.top_items {
        data = data.filter_top_items(keep)?;
        log(format_args!("kept {} sessions over the top {keep} items", data.len()));
    }
    let (train, test) = split_by_session(&data, a.test_fraction, a.seed)?;
    save_sessions(&train, &a.train_out)?;
    save_sessions(&test, &a.test_out)?;
    write_resolved(&a.train_out, "split", a)?;
    log(format_args!("{} train / {} test sessions", train.len(), test.len()));
    Ok(())
}

/// Flags over the JSON config over defaults.
fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Lib(e.into()))?;
            serde_json::from_str(&text).map_err(|e| CliError::Lib(e.into()))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! flag {
        ($($field:ident <- $arg:ident),*) => {
            $(if let Some(v) = a.$arg.clone() { cfg.$field = v; })*
        };
    }
    flag!(bound <- bound, encoder <- encoder, k <- k, epochs <- epochs, learning_rate <- lr,
          l2 <- l2, batch_size <- batch_size, mc_samples <- mc_samples, seed <- seed);
    // the reparameterized bound cannot use the Bouchard head
    if a.encoder.is_none() && cfg.bound == latent_reco::trainer::BoundKind::Reparam && cfg.encoder.has_bouchard_head() {
        cfg.encoder = latent_reco::encoder::EncoderKind::LinearGaussian;
    }
    cfg.deterministic |= a.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_train_config(a)?;
    let data = reading(&a.data, load_sessions(&a.data, a.num_items))?;
    log(format_args!(
        "training {:?}/{} with K={} for {} epochs on {} sessions",
        cfg.bound,
        cfg.encoder.name(),
        cfg.k,
        cfg.epochs,
        data.len()
    ));
    let out = fit(&data, &cfg)?;
    out.params.save(&a.out)?;
    out.encoder.save(&a.encoder_out)?;
    let mut loss = String::from("epoch,objective\n");
    for (i, v) in out.loss_curve.iter().enumerate() {
        let _ = writeln!(loss, "{},{v}", i + 1);
    }
    write_file(&a.loss_out, &loss)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        data: &'a Path,
        num_items: usize,
        out: &'a Path,
        encoder_out: &'a Path,
        loss_out: &'a Path,
        train: &'a TrainConfig,
    }
    write_resolved(
        &a.out,
        "train",
        &Resolved {
            data: &a.data,
            num_items: data.num_items(),
            out: &a.out,
            encoder_out: &a.encoder_out,
            loss_out: &a.loss_out,
            train: &cfg,
        },
    )?;
    if let Some(last) = out.loss_curve.last() {
        log(format_args!("final mean objective {last:.6}"));
    }
    Ok(())
}

fn load_for_model(path: &Path, params: &ModelParams) -> CliResult<SessionSet> {
    reading(path, load_sessions(path, Some(params.num_items())))
}

fn push_reals(line: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        let _ = write!(line, ",{v}");
    }
}

pub fn infer(a: &InferArgs) -> CliResult<()> {
    let params = reading(&a.model, ModelParams::load(&a.model))?;
    let data = load_for_model(&a.data, &params)?;
    let mut text = String::new();
    for s in data.sessions() {
        let em = em_infer(&params, &s.views, a.em_iters, None)?;
        let mut line = s.id.clone();
        push_reals(&mut line, em.posterior.mu.iter().copied());
        push_reals(&mut line, em.posterior.cov_diagonal().iter().copied());
        push_reals(&mut line, [em.final_bound()]);
        text.push_str(&line);
        text.push('\n');
    }
    emit(a.out.as_deref(), &text)?;
    if let Some(out) = &a.out {
        write_resolved(out, "infer", a)?;
    }
    log(format_args!("inferred {} posteriors", data.len()));
    Ok(())
}

pub fn predict(a: &PredictArgs) -> CliResult<()> {
    let params = reading(&a.model, ModelParams::load(&a.model))?;
    let data = load_for_model(&a.data, &params)?;
    let encoder = match (a.latent, &a.encoder) {
        (LatentArg::Ae, Some(path)) => Some(reading(path, Encoder::load(path))?),
        (LatentArg::Ae, None) => return Err(CliError::Usage("--latent ae needs --encoder".into())),
        (LatentArg::Em, _) => None,
    };
    let mut text = String::from("session_id,rank,item_id,probability\n");
    for (i, s) in data.sessions().iter().enumerate() {
        let q: Posterior = match &encoder {
            Some(enc) => enc.encode(&to_counts(&s.views, params.num_items())?)?.0,
            None => em_infer(&params, &s.views, a.em_iters, None)?.posterior,
        };
        let probs = match a.method {
            // one generator per session keeps rows independent of file order
            MethodArg::Mc => predict_mc(&params, &q, a.samples, a.seed.wrapping_add(i as u64))?,
            MethodArg::Mean => predict_mean(&params, &q)?,
        };
        for (rank, item) in top_k(probs.as_slice(), a.top)?.into_iter().enumerate() {
            let _ = writeln!(text, "{},{},{},{}", s.id, rank + 1, item, probs[item]);
        }
    }
    emit(a.out.as_deref(), &text)?;
    if let Some(out) = &a.out {
        write_resolved(out, "predict", a)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let cfg = EvalConfig {
        k: a.k_metric,
        dcg: a.dcg,
        seed: a.seed,
        deterministic: a.deterministic,
    };
    let mut report = MetricsReport::new(cfg.k);
    let needs_model = a.algorithm.contains(&Algorithm::Lvm);
    let params = if needs_model { Some(reading(&a.model, ModelParams::load(&a.model))?) } else { None };
    let num_items = a.num_items.or(params.as_ref().map(|p| p.num_items()));
    let test = reading(&a.test, load_sessions(&a.test, num_items))?;
    let num_items = test.num_items();

    for alg in &a.algorithm {
        match alg {
            Algorithm::Pop | Algorithm::Itemknn => {
                let train = reading(&a.train, load_sessions(&a.train, Some(num_items)))?;
                let summary = if *alg == Algorithm::Pop {
                    evaluate(&fit_popularity(&train)?, &test, &cfg)?
                } else {
                    evaluate(&fit_itemknn(&train)?, &test, &cfg)?
                };
                let label = if *alg == Algorithm::Pop { "Pop" } else { "ItemKNN" };
                report.push(label, "-", "-", &summary);
            }
            Algorithm::Lvm => {
                let params = params.as_ref().expect("loaded above");
                let encoder = a.encoder.as_ref().map(|p| reading(p, Encoder::load(p))).transpose()?;
                let label = a
                    .train_label
                    .clone()
                    .or_else(|| encoder.as_ref().map(|e| e.kind().train_label().to_string()))
                    .unwrap_or_else(|| "LVM".into());
                let grid =
                    evaluate_latent_grid(params, encoder.as_ref(), &label, &test, a.em_iters, a.samples, &cfg)?;
                report.rows.extend(grid.rows);
            }
        }
        log(format_args!("scored {alg:?}"));
    }
    write_file(&a.out, &report.to_csv())?;
    write_resolved(&a.out, "eval", a)?;
    print!("{}", report.render_text());
    Ok(())
}

pub fn case_study(a: &CaseStudyArgs) -> CliResult<()> {
    let (gt, catalog) = case_study_fixture();
    let params = &gt.params;
    let reals = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    for (i, sc) in case_study_scenarios().iter().enumerate() {
        let q = em_infer(params, &sc.history, a.em_iters, None)?.posterior;
        let probs = predict_mc(params, &q, a.samples, a.seed.wrapping_add(i as u64))?;
        let history: Vec<String> = sc.history.iter().map(|&v| catalog.label(v)).collect();
        let _ = writeln!(out, "== scenario {}: {} ==", i + 1, sc.name);
        let _ = writeln!(out, "history: {}", history.join(", "));
        let _ = writeln!(out, "mu_q: {}", reals(q.mu.as_slice()));
        let _ = writeln!(out, "diag Sigma_q: {}", reals(q.cov_diagonal().as_slice()));
        let _ = writeln!(out, "next item:");
        for (item, p) in probs.iter().enumerate() {
            let _ = writeln!(out, "  {:<14} {p:.4}", catalog.label(item));
        }
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}
