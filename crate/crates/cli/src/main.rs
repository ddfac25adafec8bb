mod settings;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use propcare::baselines;
use propcare::data::{compute_interactions, SplitDraw, Splits};
use propcare::datagen::simulate_traced;
use propcare::diagnostics::gradient_suite;
use propcare::estimate::PropensityEstimate;
use propcare::eval::{default_assumption_bins, fit_logistic_mf, ratio_trend, validate_assumption, MetricsReport, ReportMetadata};
use propcare::io::{self, IdMapping};
use propcare::pipeline::{estimate_metrics, noise_study, ranking_metrics, Experiment, Perturbation};
use propcare::propcare::{popularity_from_counts, train, PropCareModel};
use propcare::ranker::{rank_all, train_ranker, RankerDraw};
use propcare::{Error, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "propcare", version, about = "Propensity estimation and causal ranking pipeline")]
struct Cli {
    /// Master seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a ground-truth panel and its train/valid/test splits.
    Gen,
    /// Train the propensity estimator on interaction data.
    FitPropensity(FitPropensityArgs),
    /// Write estimates from a saved propensity model.
    ExportEstimates {
        #[arg(long)]
        model: PathBuf,
    },
    /// Reference estimates that ignore the interaction structure.
    Baseline {
        kind: BaselineKind,
        /// Split or interaction file defining users, items and popularity.
        #[arg(long)]
        train: PathBuf,
    },
    /// Train the causal ranker and write per-user rankings.
    FitRanker(FitRankerArgs),
    /// Score rankings and estimates against a ground-truth panel.
    Eval(EvalArgs),
    /// Check whether propensity follows popularity among similar pairs.
    AssumeCheck(AssumeArgs),
    /// Ranker quality under corrupted exposure or propensity.
    BiasStudy(StudyArgs),
    /// Finite-difference checks of every training objective.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineKind {
    Random,
    Pop,
}

#[derive(Debug, Args)]
struct FitPropensityArgs {
    /// Split file or `user_id,item_id,y` interaction table.
    #[arg(long)]
    train: PathBuf,
    /// Validation data; the training data is reused when omitted.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    no_p: bool,
    #[arg(long)]
    no_r: bool,
    #[arg(long)]
    neg: bool,
    #[arg(long)]
    kappa_one: bool,
}

#[derive(Debug, Args)]
struct FitRankerArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Estimated exposure and scaled propensity to train with.
    #[arg(long, conflicts_with = "panel", required_unless_present = "panel")]
    estimates: Option<PathBuf>,
    /// Train with the true propensity and the splits' own exposure instead.
    #[arg(long)]
    panel: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    rankings: PathBuf,
    /// Estimates to score; the panel's own propensity and exposure when omitted.
    #[arg(long)]
    estimates: Option<PathBuf>,
    /// Report path; defaults to `report.json` in the output directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum YHat {
    /// Logistic matrix factorization fit to the panel's observed interactions.
    Mf,
    /// Expected interaction probability from re-running the simulator.
    Oracle,
}

#[derive(Debug, Args)]
struct AssumeArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, value_enum, default_value_t = YHat::Mf)]
    y_hat: YHat,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1,0.15,0.2,0.3,0.4,0.5")]
    flips: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    sigmas: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    config: BTreeMap<String, Value>,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    duration_seconds: f64,
}

/// Collects what a command read and wrote.
struct Run {
    command: &'static str,
    out: PathBuf,
    settings: Settings,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: Instant,
}

impl Run {
    fn new(command: &'static str, out: &Path, settings: Settings) -> Result<Self> {
        std::fs::create_dir_all(out)
            .map_err(|e| Error::Input(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            settings,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<BufReader<File>> {
        self.inputs.insert(role.to_string(), path.display().to_string());
        open(path)
    }

    fn read_bytes(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        self.input(role, path)?.read_to_end(&mut bytes)?;
        Ok(bytes)
    }

    fn write<F>(&mut self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.out.join(name);
        self.write_at(&path, body)?;
        Ok(path)
    }

    fn write_at<F>(&mut self, path: &Path, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let file = File::create(path)
            .map_err(|e| Error::Input(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush()?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn finish(self) -> Result<()> {
        let config = self.settings.snapshot();
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: version(),
            seed: self.settings.seed,
            config_hash: config_hash(&config)?,
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out.join("manifest.json");
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn version() -> String {
    format!(
        "{} ({})",
        env!("CARGO_PKG_VERSION"),
        option_env!("PROPCARE_GIT_DESCRIBE").unwrap_or("unknown revision")
    )
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_hash(config: &BTreeMap<String, Value>) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(config)?)))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))
}

fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        Error::Misaligned(msg) => Error::Misaligned(format!("{}: {msg}", path.display())),
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn read_draws(run: &mut Run, role: &str, path: &Path) -> Result<(Vec<SplitDraw>, Option<IdMapping>)> {
    let reader = run.input(role, path)?;
    io::read_training_data(reader).map_err(|e| with_path(e, path))
}

fn check_same_grid(a: &[SplitDraw], b: &[SplitDraw], what: &str) -> Result<()> {
    let (x, y) = (&a[0].data, &b[0].data);
    if x.num_users() != y.num_users() || x.num_items() != y.num_items() {
        return Err(Error::Misaligned(format!(
            "{what}: {}x{} versus {}x{}",
            x.num_users(),
            x.num_items(),
            y.num_users(),
            y.num_items()
        )));
    }
    Ok(())
}

fn dims(draws: &[SplitDraw]) -> (usize, usize) {
    (draws[0].data.num_users(), draws[0].data.num_items())
}

fn cmd_gen(run: &mut Run) -> Result<()> {
    let s = run.settings.clone();
    let exp = Experiment::simulate(&s.sim, s.split)?;
    let (nu, ni) = (exp.num_users(), exp.num_items());
    let mean_p = exp.panel.p().iter().sum::<f64>() / exp.panel.num_pairs() as f64;
    let mean_y = compute_interactions(&exp.panel).num_positives() as f64 / exp.panel.num_pairs() as f64;
    info!("simulated {nu}x{ni} panel: mean p {mean_p:.4}, mean y {mean_y:.4}");
    run.write("panel.csv", |w| io::write_panel(w, &exp.panel))?;
    run.write("train.csv", |w| io::write_split(w, &exp.splits.train))?;
    run.write("valid.csv", |w| io::write_split(w, &exp.splits.valid))?;
    run.write("test.csv", |w| io::write_split(w, &exp.splits.test))?;
    run.write("mapping.csv", |w| io::write_mapping(w, &IdMapping::identity(nu, ni)))?;
    Ok(())
}

fn cmd_fit_propensity(run: &mut Run, args: &FitPropensityArgs) -> Result<()> {
    let ablation = &mut run.settings.train.ablation;
    ablation.no_p |= args.no_p;
    ablation.no_r |= args.no_r;
    ablation.neg |= args.neg;
    ablation.kappa_one |= args.kappa_one;
    let s = run.settings.clone();
    let (train_draws, mapping) = read_draws(run, "train", &args.train)?;
    let valid_draws = match &args.valid {
        Some(path) => read_draws(run, "valid", path)?.0,
        None => {
            warn!("no validation data given; early stopping uses the training data");
            train_draws.clone()
        }
    };
    check_same_grid(&train_draws, &valid_draws, "training and validation grids differ")?;
    let train_data: Vec<_> = train_draws.into_iter().map(|d| d.data).collect();
    let valid_data: Vec<_> = valid_draws.into_iter().map(|d| d.data).collect();
    let outcome = match train(&train_data, &valid_data, &s.train) {
        Ok(o) => o,
        Err(Error::Numerical(msg)) => {
            let diag = serde_json::json!({ "error": msg, "config": s.snapshot() });
            let path = run.write_json("diagnostics.json", &diag)?;
            return Err(Error::Numerical(format!("{msg}; diagnostics in {}", path.display())));
        }
        Err(e) => return Err(e),
    };
    info!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    let estimate = outcome.model.propensity_estimate(s.c, s.epsilon)?;
    run.write_json("model.json", &outcome.model.to_document())?;
    run.write("estimates.csv", |w| io::write_estimates(w, &estimate))?;
    run.write("history.csv", |w| io::write_history(w, &outcome.history))?;
    if let Some(mapping) = mapping {
        run.write("mapping.csv", |w| io::write_mapping(w, &mapping))?;
    }
    Ok(())
}

fn cmd_export_estimates(run: &mut Run, model: &Path) -> Result<()> {
    let bytes = run.read_bytes("model", model)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Input(format!("{} is not UTF-8", model.display())))?;
    let model = PropCareModel::from_json(&text)?;
    let estimate = model.propensity_estimate(run.settings.c, run.settings.epsilon)?;
    run.write("estimates.csv", |w| io::write_estimates(w, &estimate))?;
    Ok(())
}

fn cmd_baseline(run: &mut Run, kind: BaselineKind, train_path: &Path) -> Result<()> {
    let s = run.settings.clone();
    let (draws, _) = read_draws(run, "train", train_path)?;
    let (nu, ni) = dims(&draws);
    let estimate = match kind {
        BaselineKind::Random => baselines::random_propensity(nu, ni, s.seed, s.c, s.epsilon)?,
        BaselineKind::Pop => {
            let mut counts = vec![0u64; ni];
            for d in &draws {
                for (c, k) in counts.iter_mut().zip(d.data.item_counts()) {
                    *c += k;
                }
            }
            baselines::pop_propensity(nu, &popularity_from_counts(&counts)?, s.c, s.epsilon)?
        }
    };
    run.write("estimates.csv", |w| io::write_estimates(w, &estimate))?;
    Ok(())
}

fn ranker_draws<'a>(draws: &'a [SplitDraw], estimate: Option<&'a PropensityEstimate>) -> Vec<RankerDraw<'a>> {
    draws
        .iter()
        .map(|d| RankerDraw {
            data: &d.data,
            exposure: estimate.map_or(d.z.as_slice(), |e| e.z_hat.as_slice()),
        })
        .collect()
}

fn cmd_fit_ranker(run: &mut Run, args: &FitRankerArgs) -> Result<()> {
    let s = run.settings.clone();
    let (train_draws, _) = read_draws(run, "train", &args.train)?;
    let (valid_draws, _) = read_draws(run, "valid", &args.valid)?;
    check_same_grid(&train_draws, &valid_draws, "training and validation grids differ")?;
    let (nu, ni) = dims(&train_draws);
    let (estimate, propensity) = if let Some(path) = &args.estimates {
        let reader = run.input("estimates", path)?;
        let e = io::read_estimates(reader, nu, ni).map_err(|e| with_path(e, path))?;
        let p = e.p_scaled.clone();
        (Some(e), p)
    } else {
        let path = args.panel.as_deref().expect("clap requires estimates or panel");
        let reader = run.input("panel", path)?;
        let panel = io::read_panel(reader).map_err(|e| with_path(e, path))?;
        if (panel.num_users(), panel.num_items()) != (nu, ni) {
            return Err(Error::Misaligned(format!(
                "panel is {}x{}, splits are {nu}x{ni}",
                panel.num_users(),
                panel.num_items()
            )));
        }
        (None, panel.p().to_vec())
    };
    let outcome = train_ranker(
        &ranker_draws(&train_draws, estimate.as_ref()),
        &ranker_draws(&valid_draws, estimate.as_ref()),
        &propensity,
        &s.ranker,
    )?;
    let rankings = rank_all(&outcome.model)?;
    let scores: Vec<Vec<f64>> = (0..nu).map(|u| outcome.model.scores(u)).collect();
    run.write_json("ranker.json", &outcome.model.to_document(s.ranker.seed))?;
    run.write("rankings.csv", |w| io::write_rankings(w, &rankings, &scores))?;
    run.write("ranker_history.csv", |w| io::write_ranker_history(w, &outcome.history))?;
    Ok(())
}

fn cmd_eval(run: &mut Run, args: &EvalArgs) -> Result<()> {
    let panel_bytes = run.read_bytes("panel", &args.panel)?;
    let panel = io::read_panel(panel_bytes.as_slice()).map_err(|e| with_path(e, &args.panel))?;
    let (nu, ni) = (panel.num_users(), panel.num_items());
    let reader = run.input("rankings", &args.rankings)?;
    let rankings = io::read_rankings(reader, nu, ni).map_err(|e| with_path(e, &args.rankings))?;
    let estimate = match &args.estimates {
        Some(path) => {
            let reader = run.input("estimates", path)?;
            io::read_estimates(reader, nu, ni).map_err(|e| with_path(e, path))?
        }
        None => PropensityEstimate::new(nu, ni, panel.p().to_vec(), panel.p().to_vec(), panel.z().to_vec())?,
    };
    let ranking = ranking_metrics(&rankings, &panel.tau())?;
    let quality = estimate_metrics(&estimate, &panel)?;
    let report = MetricsReport {
        cp_at_10: ranking.cp_at_10,
        cp_at_100: ranking.cp_at_100,
        cdcg: ranking.cdcg,
        kld: quality.kld,
        tau: quality.tau,
        f1: quality.f1,
        metadata: ReportMetadata {
            seed: run.settings.seed,
            config_hash: config_hash(&run.settings.snapshot())?,
            dataset_id: format!("panel-{}", &hex(&Sha256::digest(&panel_bytes))[..16]),
        },
    };
    println!(
        "cp@10 {:.6} cp@100 {:.6} cdcg {:.6} kld {:.6} tau {:.6} f1 {:.6}",
        report.cp_at_10, report.cp_at_100, report.cdcg, report.kld, report.tau, report.f1
    );
    match &args.report {
        Some(path) => run.write_at(path, |w| {
            serde_json::to_writer_pretty(&mut *w, &report)?;
            writeln!(w)?;
            Ok(())
        })?,
        None => {
            run.write_json("report.json", &report)?;
        }
    }
    Ok(())
}

fn cmd_assume_check(run: &mut Run, args: &AssumeArgs) -> Result<()> {
    let s = run.settings.clone();
    let reader = run.input("panel", &args.panel)?;
    let panel = io::read_panel(reader).map_err(|e| with_path(e, &args.panel))?;
    let y_hat = match args.y_hat {
        YHat::Mf => fit_logistic_mf(&compute_interactions(&panel), &s.mf)?.predict_all(),
        YHat::Oracle => {
            let (sim_panel, _, trace) = simulate_traced(&s.sim)?;
            if (sim_panel.num_users(), sim_panel.num_items()) != (panel.num_users(), panel.num_items()) {
                return Err(Error::Misaligned(
                    "panel dimensions differ from the configured simulator".into(),
                ));
            }
            if let Some(k) = sim_panel.p().iter().zip(panel.p()).position(|(a, b)| a != b) {
                return Err(Error::Misaligned(format!(
                    "panel differs from the configured simulator at (user {}, item {})",
                    k / panel.num_items(),
                    k % panel.num_items()
                )));
            }
            trace.interaction_probability(&panel)
        }
    };
    let bins = validate_assumption(&panel, &y_hat, &default_assumption_bins(), s.seed)?;
    if let Some(first) = bins.first().and_then(|b| b.ratio) {
        println!("ratio in [0, 0.01): {first:.4}");
    }
    match ratio_trend(&bins) {
        Ok(rho) => println!("Spearman(bin, ratio): {rho:.4}"),
        Err(e) => warn!("trend undefined: {e}"),
    }
    run.write("bins.csv", |w| io::write_bins(w, &bins))?;
    Ok(())
}

fn cmd_bias_study(run: &mut Run, args: &StudyArgs) -> Result<()> {
    let s = run.settings.clone();
    if let Some(f) = args.flips.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Config(format!("flip ratio {f} outside [0, 1]")));
    }
    if let Some(v) = args.sigmas.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("noise level {v} must be non-negative")));
    }
    let reader = run.input("panel", &args.panel)?;
    let panel = io::read_panel(reader).map_err(|e| with_path(e, &args.panel))?;
    let (train_draws, _) = read_draws(run, "train", &args.train)?;
    let (valid_draws, _) = read_draws(run, "valid", &args.valid)?;
    check_same_grid(&train_draws, &valid_draws, "training and validation grids differ")?;
    if dims(&train_draws) != (panel.num_users(), panel.num_items()) {
        return Err(Error::Misaligned("splits and panel cover different grids".into()));
    }
    let exp = Experiment {
        panel,
        splits: Splits {
            train: train_draws,
            valid: valid_draws,
            test: Vec::new(),
        },
    };
    let perturbations: Vec<Perturbation> = args
        .flips
        .iter()
        .map(|&f| Perturbation::Flip(f))
        .chain(args.sigmas.iter().map(|&v| Perturbation::Noise(v)))
        .collect();
    let rows = noise_study(&exp, &perturbations, s.repeats, s.seed, &s.ranker)?;
    for r in &rows {
        println!("{} {} {:.6} ± {:.6}", r.metric, r.noise_level, r.value, r.stderr);
    }
    run.write("study.csv", |w| io::write_study(w, &rows))?;
    Ok(())
}

fn cmd_grad_check(run: &mut Run, points: usize) -> Result<()> {
    let checks = gradient_suite(points, run.settings.seed)?;
    for c in &checks {
        println!(
            "{:<14} {} points, max relative error {:.3e}, {} failures",
            c.objective, c.points, c.max_relative_error, c.failures
        );
    }
    run.write_json("grad_check.json", &checks)?;
    if let Some(bad) = checks.iter().find(|c| !c.passed()) {
        return Err(Error::Numerical(format!(
            "gradient of {} disagrees with finite differences",
            bad.objective
        )));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let name = match &cli.command {
        Command::Gen => "gen",
        Command::FitPropensity(_) => "fit-propensity",
        Command::ExportEstimates { .. } => "export-estimates",
        Command::Baseline { .. } => "baseline",
        Command::FitRanker(_) => "fit-ranker",
        Command::Eval(_) => "eval",
        Command::AssumeCheck(_) => "assume-check",
        Command::BiasStudy(_) => "bias-study",
        Command::GradCheck { .. } => "grad-check",
    };
    let mut run = Run::new(name, &cli.out, settings)?;
    if let Some(path) = &cli.config {
        run.inputs.insert("config".into(), path.display().to_string());
    }
    match &cli.command {
        Command::Gen => cmd_gen(&mut run)?,
        Command::FitPropensity(args) => cmd_fit_propensity(&mut run, args)?,
        Command::ExportEstimates { model } => cmd_export_estimates(&mut run, model)?,
        Command::Baseline { kind, train } => cmd_baseline(&mut run, *kind, train)?,
        Command::FitRanker(args) => cmd_fit_ranker(&mut run, args)?,
        Command::Eval(args) => cmd_eval(&mut run, args)?,
        Command::AssumeCheck(args) => cmd_assume_check(&mut run, args)?,
        Command::BiasStudy(args) => cmd_bias_study(&mut run, args)?,
        Command::GradCheck { points } => cmd_grad_check(&mut run, *points)?,
    }
    run.finish()
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical(_) => 3,
        Error::Misaligned(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAUSALREC_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
