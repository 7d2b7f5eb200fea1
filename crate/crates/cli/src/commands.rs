use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use serde::Serialize;

use ewi_core::alerting::{
    daily_run, label_alerts, threshold_whatif, AlertError, AlertStore, TierThresholds, WriteOutcome,
};
use ewi_core::cohort::{apply_cohort_filters, generate_cohort, PatientDayKey, PatientStay, Rejection};
use ewi_core::evaluate::{
    ablation_table, auroc, calibration_curve, calibration_series, format_ablation_table, format_calibration_table,
    format_sweep_table, roc_curve, roc_series, sweep_series, threshold_sweep, EvalError,
};
use ewi_core::explain::top_drivers;
use ewi_core::features::{build_feature_table, FeatureError, FeatureTable, ModalitySet, OperationalStats};
use ewi_core::ingest::{parse_cohort_file, write_cohort_file, IngestError};
use ewi_core::model::{chronological_split, grid_search, ModelError, ModelKind, TrainSet, TreeEnsemble};
use ewi_service::{ModelInfo, ServiceState};

use crate::config::PipelineConfig;
use crate::{Cli, CliError, Command};

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Corpus(e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Table { .. } => CliError::Corpus(e.to_string()),
            FeatureError::Embed(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<AlertError> for CliError {
    fn from(e: AlertError) -> Self {
        match e {
            AlertError::Io(_) | AlertError::Features(FeatureError::Embed(_)) => CliError::Runtime(e.to_string()),
            AlertError::Corrupt { .. } => CliError::Corpus(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn raw_cohort(&self) -> PathBuf {
        self.root.join("cohort.jsonl")
    }
    fn clean_cohort(&self) -> PathBuf {
        self.root.join("cohort.clean.jsonl")
    }
    fn features(&self) -> PathBuf {
        self.root.join("features.tsv")
    }
    fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Corpus(format!("{} not found; run `ewi {hint}` first", path.display())))
    }
}

fn load_stays(paths: &Paths) -> Result<Vec<PatientStay>, CliError> {
    let path = paths.clean_cohort();
    require(&path, "ingest")?;
    Ok(parse_cohort_file(&path)?.0)
}

fn load_table(paths: &Paths) -> Result<FeatureTable, CliError> {
    let path = paths.features();
    require(&path, "featurize")?;
    Ok(FeatureTable::read_tsv(&path)?)
}

fn load_model(paths: &Paths) -> Result<TreeEnsemble, CliError> {
    let path = paths.model();
    require(&path, "train").map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(TreeEnsemble::load(&path)?)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.cohort.seed = seed;
        config.model.seed = seed;
    }
    fs::create_dir_all(&cli.data_dir)?;
    let paths = Paths { root: cli.data_dir };
    match cli.command {
        Command::Generate { patients, signal } => generate(&mut config, &paths, patients, signal),
        Command::Ingest { input } => ingest(&paths, input),
        Command::Featurize => featurize(&config, &paths),
        Command::Train { kind } => train(&config, &paths, kind),
        Command::Evaluate => evaluate(&config, &paths),
        Command::Ablate { kinds } => ablate(&config, &paths, &kinds),
        Command::Score { date, from, to } => score(&config, &paths, date, from, to),
        Command::Explain { patient_day, k } => explain(&paths, &patient_day, k),
        Command::Whatif {
            red_level,
            red_delta,
            yellow_level,
            yellow_delta,
        } => {
            let mut th = config.thresholds;
            th.red_level = red_level.unwrap_or(th.red_level);
            th.red_delta = red_delta.unwrap_or(th.red_delta);
            th.yellow_level = yellow_level.unwrap_or(th.yellow_level);
            th.yellow_delta = yellow_delta.unwrap_or(th.yellow_delta);
            whatif(&config, &paths, &th)
        }
        Command::Serve { addr, as_of } => serve(&config, &paths, addr, as_of),
    }
}

fn generate(
    config: &mut PipelineConfig,
    paths: &Paths,
    patients: Option<usize>,
    signal: Option<f64>,
) -> Result<(), CliError> {
    if let Some(n) = patients {
        config.cohort.n_patients = n;
    }
    if let Some(s) = signal {
        config.cohort.signal_strength = s;
    }
    let stays = generate_cohort(&config.cohort).map_err(|e| CliError::Validation(e.to_string()))?;
    write_cohort_file(&paths.raw_cohort(), &stays)?;
    println!("wrote {} stays to {}", stays.len(), paths.raw_cohort().display());
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    integrity: ewi_core::ingest::IntegrityReport,
    kept: usize,
    rejected: BTreeMap<String, usize>,
}

fn ingest(paths: &Paths, input: Option<PathBuf>) -> Result<(), CliError> {
    let input = input.unwrap_or_else(|| paths.raw_cohort());
    let (stays, integrity) = parse_cohort_file(&input)?;
    let (kept, rejected) = apply_cohort_filters(stays);
    let mut reasons = BTreeMap::new();
    for (_, reason) in &rejected {
        *reasons.entry(format!("{reason:?}")).or_insert(0) += 1;
    }
    write_cohort_file(&paths.clean_cohort(), &kept)?;
    let mut report = String::new();
    for (stay, reason) in &rejected {
        let line = Rejection {
            patient_id: stay.patient_id.clone(),
            reason: *reason,
        };
        report += &serde_json::to_string(&line).map_err(|e| CliError::Runtime(e.to_string()))?;
        report.push('\n');
    }
    fs::write(paths.file("rejections.jsonl"), report)?;
    let summary = IngestSummary {
        integrity,
        kept: kept.len(),
        rejected: reasons,
    };
    write_json(&paths.file("integrity.json"), &summary)?;
    println!(
        "{} lines, {} malformed, {} stays kept, {} rejected; {} records dropped",
        summary.integrity.lines_read,
        summary.integrity.malformed_lines,
        summary.kept,
        rejected.len(),
        summary.integrity.total_dropped()
    );
    Ok(())
}

fn featurize(config: &PipelineConfig, paths: &Paths) -> Result<(), CliError> {
    let stays = load_stays(paths)?;
    let featurizer = config.featurizer()?;
    let ops = OperationalStats::from_stays(&stays);
    let table = build_feature_table(&featurizer, &stays, &ops)?;
    table.write_tsv(&paths.features())?;
    let positives = table.labels.iter().filter(|&&y| y == 1).count();
    println!(
        "{} patient-days x {} features ({} positive) -> {}",
        table.len(),
        table.manifest.len(),
        positives,
        paths.features().display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainingSummary {
    kind: ModelKind,
    best_n_estimators: usize,
    best_max_depth: usize,
    cells: Vec<ewi_core::model::GridCell>,
    train_rows: usize,
    val_rows: usize,
    test_rows: usize,
    trained_on: NaiveDate,
}

fn train(config: &PipelineConfig, paths: &Paths, kind: Option<String>) -> Result<(), CliError> {
    let kind: ModelKind = match kind {
        Some(k) => k.parse::<ModelKind>()?,
        None => config.model.kind()?,
    };
    let table = load_table(paths)?;
    let splits = chronological_split(&table, &config.split)?;
    let (tr, va) = (TrainSet::from_table(&splits.train), TrainSet::from_table(&splits.val));
    let result = grid_search(&tr, &va, &config.grid, kind, config.model.seed)?;
    let mut model = result.model;
    model.bind_manifest(&table.manifest)?;
    let last = splits.val.dates().into_iter().chain(splits.train.dates()).max().expect("non-empty split");
    let trained_on = last + Duration::days(1);
    model.trained_on = Some(trained_on);
    model.save(&paths.model())?;
    let summary = TrainingSummary {
        kind,
        best_n_estimators: result.best.n_estimators,
        best_max_depth: result.best.max_depth,
        cells: result.cells,
        train_rows: splits.train.len(),
        val_rows: splits.val.len(),
        test_rows: splits.test.len(),
        trained_on,
    };
    write_json(&paths.file("training.json"), &summary)?;
    for c in &summary.cells {
        println!("n_estimators={:<4} max_depth={}  val AUROC {:.4}", c.n_estimators, c.max_depth, c.val_auroc);
    }
    println!(
        "selected n_estimators={} max_depth={}; refit on {} rows -> {}",
        summary.best_n_estimators,
        summary.best_max_depth,
        summary.train_rows + summary.val_rows,
        paths.model().display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    test_rows: usize,
    test_positives: usize,
    test_auroc: f64,
    sweep: Vec<ewi_core::evaluate::ThresholdMetrics>,
    calibration: Vec<ewi_core::evaluate::CalibrationBin>,
    plots: Vec<ewi_core::evaluate::PlotSeries>,
}

fn evaluate(config: &PipelineConfig, paths: &Paths) -> Result<(), CliError> {
    let model = load_model(paths)?;
    let table = load_table(paths)?;
    model.check_manifest(&table.manifest)?;
    let test = chronological_split(&table, &config.split)?.test;
    let scores = model.predict_batch(&test.rows)?;
    let test_auroc = auroc(&scores, &test.labels)?;
    let sweep = threshold_sweep(&scores, &test.labels, &config.evaluation.thresholds)?;
    let calibration = calibration_curve(&scores, &test.labels, config.evaluation.calibration_bins)?;
    let mut plots = vec![roc_series(&roc_curve(&scores, &test.labels)?)];
    plots.extend(sweep_series(&sweep));
    plots.push(calibration_series(&calibration));
    println!("test AUROC {test_auroc:.4} over {} patient-days\n", test.len());
    println!("{}", format_sweep_table(&sweep));
    println!("{}", format_calibration_table(&calibration));
    let report = EvaluationReport {
        test_rows: test.len(),
        test_positives: test.labels.iter().filter(|&&y| y == 1).count(),
        test_auroc,
        sweep,
        calibration,
        plots,
    };
    write_json(&paths.file("evaluation.json"), &report)
}

fn ablate(config: &PipelineConfig, paths: &Paths, kinds: &str) -> Result<(), CliError> {
    let kinds: Vec<ModelKind> = kinds
        .split(',')
        .map(|k| k.trim().parse::<ModelKind>())
        .collect::<Result<_, _>>()?;
    let table = load_table(paths)?;
    let cells = ablation_table(
        &table,
        &config.split,
        &ModalitySet::combinations(),
        &kinds,
        &config.grid,
        config.model.seed,
    )?;
    let text = format_ablation_table(&cells);
    println!("{text}");
    fs::write(paths.file("ablation.md"), &text)?;
    write_json(&paths.file("ablation.json"), &cells)
}

fn score(
    config: &PipelineConfig,
    paths: &Paths,
    date: Option<NaiveDate>,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
) -> Result<(), CliError> {
    let dates: Vec<NaiveDate> = match (date, from) {
        (Some(d), _) => vec![d],
        (None, Some(f)) => {
            let t = to.unwrap_or(f);
            if t < f {
                return Err(CliError::Validation(format!("--to {t} precedes --from {f}")));
            }
            f.iter_days().take_while(|d| *d <= t).collect()
        }
        (None, None) => return Err(CliError::Validation("give --date or --from".into())),
    };
    let stays = load_stays(paths)?;
    let model = load_model(paths)?;
    let featurizer = config.featurizer()?;
    let store = AlertStore::open(&paths.root)?;
    for date in dates {
        let run = daily_run(&stays, &featurizer, &model, &config.thresholds, date, Some(&store))?;
        let outcome = store.write_run(date, &run.alerts, &model.manifest_hash)?;
        let explanations = run.explanations(&model).map_err(|e| CliError::Runtime(e.to_string()))?;
        store.write_explanations(date, &explanations)?;
        let count = |t| run.alerts.iter().filter(|a| a.tier == t).count();
        use ewi_core::alerting::Tier;
        println!(
            "{date}: {} scored, {} red, {} yellow, {} white{}{}",
            run.alerts.len(),
            count(Tier::Red),
            count(Tier::Yellow),
            count(Tier::White),
            if outcome == WriteOutcome::Unchanged { " (unchanged)" } else { "" },
            if run.alerts.iter().any(|a| a.model_stale) { " [model stale]" } else { "" },
        );
    }
    Ok(())
}

fn explain(paths: &Paths, patient_day: &str, k: usize) -> Result<(), CliError> {
    let key: PatientDayKey = patient_day.parse().map_err(|e| CliError::Validation(format!("{e}")))?;
    let store = AlertStore::open(&paths.root)?;
    let record = store
        .load_explanation(&key)?
        .ok_or_else(|| CliError::Validation(format!("no stored explanation for {key}")))?;
    let drivers =
        top_drivers(&record.to_explanation(), &record.names(), k).map_err(|e| CliError::Validation(e.to_string()))?;
    println!("{key}: base {:+.4}, margin {:+.4}", record.base, record.margin);
    println!("{:<28} {:>12} {:>10}", "feature", "value", "phi");
    for d in drivers {
        println!("{:<28} {:>12.4} {:>+10.4}", d.name, d.value, d.phi);
    }
    Ok(())
}

fn whatif(config: &PipelineConfig, paths: &Paths, th: &TierThresholds) -> Result<(), CliError> {
    let stays = load_stays(paths)?;
    let store = AlertStore::open(&paths.root)?;
    let history = label_alerts(&store.all_alerts()?, &stays);
    let summary = threshold_whatif(&history, th)?;
    println!(
        "red {}  yellow {}  white {}  over {} run days; {:.1} red+yellow per day",
        summary.counts.red, summary.counts.yellow, summary.counts.white, summary.n_days, summary.daily_alert_volume
    );
    println!(
        "red or yellow: sensitivity {:.3}  specificity {:.3}  precision {:.3}",
        summary.alert.sensitivity, summary.alert.specificity, summary.alert.precision
    );
    println!(
        "red only:      sensitivity {:.3}  specificity {:.3}  precision {:.3}",
        summary.red_only.sensitivity, summary.red_only.specificity, summary.red_only.precision
    );
    let risks: Vec<f64> = history.iter().map(|(a, _)| a.risk).collect();
    let labels: Vec<u8> = history.iter().map(|(_, y)| *y).collect();
    match threshold_sweep(&risks, &labels, &config.evaluation.thresholds) {
        Ok(sweep) => println!("\n{}", format_sweep_table(&sweep)),
        Err(e) => log::warn!("threshold sweep skipped: {e}"),
    }
    write_json(&paths.file("whatif.json"), &summary)
}

fn serve(
    config: &PipelineConfig,
    paths: &Paths,
    addr: Option<String>,
    as_of: Option<NaiveDate>,
) -> Result<(), CliError> {
    let addr = addr.unwrap_or_else(|| config.service.addr.clone());
    let addr = addr
        .parse()
        .map_err(|e| CliError::Validation(format!("bad address {addr:?}: {e}")))?;
    let store = AlertStore::open(&paths.root)?;
    let model = if paths.model().exists() {
        Some(ModelInfo::from(&TreeEnsemble::load(&paths.model())?))
    } else {
        None
    };
    let labels = if paths.clean_cohort().exists() {
        label_alerts(&store.all_alerts()?, &load_stays(paths)?)
            .into_iter()
            .map(|(a, y)| (a.patient_day, y))
            .collect()
    } else {
        Default::default()
    };
    let state = Arc::new(ServiceState {
        store,
        model,
        labels,
        as_of,
    });
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(ewi_service::serve(addr, state))?;
    Ok(())
}
