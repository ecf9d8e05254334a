use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use voxelforge::gabor::build_bank;
use voxelforge::io::stimuli::load_images;
use voxelforge::io::{load_bundle, save_bundle, write_matrix, Dataset, SyntheticSpec};
use voxelforge::report::{
    compare_bundles, evaluate_bundle, ComparisonOptions, ComparisonReport, EvaluationOptions, EvaluationReport,
};
use voxelforge::trainer::{train_full_model, ModelConfig};
use voxelforge::{Error, GaborConfig, ModelKind};

use crate::plots;
use crate::{
    CompareArgs, EvaluateArgs, GaborArgs, ReportArgs, StatsArgs, SynthArgs, TrainArgs, DEFAULT_SEED,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Invalid(_) => 2,
            _ => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn create_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let started = Instant::now();
    let dataset = Dataset::load(path)?;
    log::info!(
        "event=dataset_loaded name={} estimation={} test={} layers={} rois={} elapsed_ms={}",
        dataset.manifest.name,
        dataset.manifest.estimation_samples,
        dataset.manifest.test_samples,
        dataset.layers.len(),
        dataset.rois.len(),
        started.elapsed().as_millis()
    );
    Ok(dataset)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = read_config(args.spec.as_deref())?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let started = Instant::now();
    let data = voxelforge::io::generate_synthetic(&spec)?;
    create_dir(&args.out)?;
    let manifest = data.write(&args.out)?;
    log::info!(
        "event=synth_done manifest={} seed={} elapsed_ms={}",
        manifest.display(),
        spec.seed,
        started.elapsed().as_millis()
    );
    Ok(())
}

pub fn gabor_extract(args: GaborArgs) -> Result<()> {
    let mut config: GaborConfig = read_config(args.config.as_deref())?;
    if args.dc_channel {
        config.dc_channel = true;
    }
    let started = Instant::now();
    if let Some(manifest) = &args.dataset {
        let dataset = load_dataset(manifest)?;
        let stimuli = dataset
            .stimuli
            .as_ref()
            .ok_or_else(|| Error::SchemaMismatch("dataset has no stimulus images".into()))?;
        config.image_size = dataset.manifest.stimuli.as_ref().map_or(config.image_size, |s| s.image_size);
        let bank = build_bank(&config)?;
        create_dir(&args.out)?;
        for (name, images) in [("estimation", &stimuli.estimation), ("test", &stimuli.test)] {
            let features = bank.extract_batch(images)?;
            write_matrix(&features, args.out.join(format!("gabor_{name}.nenc")))?;
        }
        log::info!(
            "event=gabor_done features={} out={} elapsed_ms={}",
            bank.feature_dim(),
            args.out.display(),
            started.elapsed().as_millis()
        );
        return Ok(());
    }
    let path = args.images.as_ref().expect("clap requires --images or --dataset");
    let images = load_images(path)?;
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput(format!("no images found at {}", path.display())))?;
    config.image_size = first.size();
    let bank = build_bank(&config)?;
    let features = bank.extract_batch(&images)?;
    create_parent(&args.out)?;
    write_matrix(&features, &args.out)?;
    log::info!(
        "event=gabor_done images={} features={} out={} elapsed_ms={}",
        images.len(),
        bank.feature_dim(),
        args.out.display(),
        started.elapsed().as_millis()
    );
    Ok(())
}

fn apply_overrides(config: &mut ModelConfig, args: &TrainArgs) {
    if let Some(v) = args.hidden_size {
        config.train.hidden_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = args.lambda {
        config.train.lambda = v;
    }
    if let Some(v) = args.max_epochs {
        config.train.max_epochs = v;
    }
    if let Some(v) = args.max_sparsity {
        config.romp.max_sparsity = v;
    }
    if let Some(v) = args.validation_samples {
        config.validation_samples = v;
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config: ModelConfig = read_config(args.config.as_deref())?;
    apply_overrides(&mut config, &args);
    let kind = ModelKind::from(args.model);
    let seed = args.seed.unwrap_or(DEFAULT_SEED);
    let dataset = load_dataset(&args.dataset)?;
    let started = Instant::now();
    log::info!("event=train_start model={kind} seed={seed}");
    let bundle = train_full_model(&dataset, kind, &config, seed)?;
    for roi in &bundle.rois {
        let mean = roi.validation_accuracy.iter().sum::<f64>() / roi.validation_accuracy.len().max(1) as f64;
        log::info!(
            "event=roi_trained model={kind} roi={} voxels={} mean_validation_c={mean:.4}",
            roi.name,
            roi.voxels()
        );
    }
    create_dir(&args.out)?;
    save_bundle(&bundle, &args.out)?;
    log::info!(
        "event=train_done model={kind} out={} elapsed_ms={}",
        args.out.display(),
        started.elapsed().as_millis()
    );
    Ok(())
}

fn evaluation_options(stats: &StatsArgs) -> Result<EvaluationOptions> {
    let mut options = EvaluationOptions {
        seed: stats.seed.unwrap_or(DEFAULT_SEED),
        ..EvaluationOptions::default()
    };
    if let Some(s) = stats.shuffles {
        if s == 0 {
            return Err(CliError::Invalid("--shuffles must be >= 1".into()));
        }
        options.shuffles = s;
    }
    Ok(options)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let options = evaluation_options(&args.stats)?;
    let bundle = load_bundle(&args.bundle)?;
    let dataset = load_dataset(&args.dataset)?;
    let report = evaluate_bundle(&bundle, &dataset, &options)?;
    for roi in &report.rois {
        log::info!(
            "event=roi_evaluated roi={} mean_c={} threshold={:.4} significant_fraction={:.4}",
            roi.name,
            roi.mean_accuracy.map_or("nan".to_string(), |m| format!("{m:.4}")),
            roi.significance.threshold,
            roi.curve.significant_fraction
        );
    }
    create_parent(&args.out)?;
    report.save(&args.out)?;
    log::info!("event=evaluate_done out={}", args.out.display());
    Ok(())
}

pub fn compare(args: CompareArgs) -> Result<()> {
    let evaluation = evaluation_options(&args.stats)?;
    let mut comparison = ComparisonOptions {
        threshold: args.threshold,
        seed: evaluation.seed,
        ..ComparisonOptions::default()
    };
    if let Some(p) = args.permutations {
        if p == 0 {
            return Err(CliError::Invalid("--permutations must be >= 1".into()));
        }
        comparison.permutations = p;
    }
    if let Some(t) = args.threshold {
        if !(t.is_finite() && (-1.0..=1.0).contains(&t)) {
            return Err(CliError::Invalid(format!("--threshold {t} is outside [-1, 1]")));
        }
    }
    let a = load_bundle(&args.bundle_a)?;
    let b = load_bundle(&args.bundle_b)?;
    let dataset = load_dataset(&args.dataset)?;
    let report = compare_bundles(&a, &b, &dataset, &evaluation, &comparison)?;
    for roi in &report.rois {
        log::info!(
            "event=roi_compared roi={} threshold={:.4} eligible={} a_better={} b_better={} significant={}",
            roi.name,
            roi.threshold,
            roi.eligible,
            roi.a_better,
            roi.b_better,
            roi.advantage.as_ref().is_some_and(|a| a.significant)
        );
    }
    create_parent(&args.out)?;
    report.save(&args.out)?;
    if let Some(dir) = &args.plots {
        create_dir(dir)?;
        write_comparison_plots(&report, dir)?;
    }
    log::info!("event=compare_done out={}", args.out.display());
    Ok(())
}

fn write_comparison_plots(report: &ComparisonReport, dir: &Path) -> Result<()> {
    for roi in &report.rois {
        let safe = plots::safe_name(&roi.name);
        write_text(
            &dir.join(format!("{safe}_scatter.svg")),
            &plots::scatter(roi, &report.model_a, &report.model_b),
        )?;
        write_text(&dir.join(format!("{safe}_differences.svg")), &plots::histogram(roi, &report.model_a, &report.model_b))?;
        write_text(&dir.join(format!("{safe}_curves.svg")), &plots::curves(&roi.name, &roi.curves))?;
    }
    Ok(())
}

fn evaluation_summary(report: &EvaluationReport) -> String {
    let mut out = format!("model {}\ndataset {}\n\n", report.model, report.dataset);
    out.push_str("roi\tvoxels\tmean_c\tthreshold\tsignificant\n");
    for roi in &report.rois {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\n",
            roi.name,
            roi.accuracy.len(),
            roi.mean_accuracy.map_or("nan".to_string(), |m| format!("{m:.4}")),
            roi.significance.threshold,
            roi.curve.significant_fraction
        ));
    }
    out
}

fn comparison_summary(report: &ComparisonReport) -> String {
    let mut out = format!(
        "A = {}\nB = {}\ndataset {}\n\n",
        report.model_a, report.model_b, report.dataset
    );
    out.push_str("roi\tthreshold\tmean_a\tmean_b\teligible\ta_better\tb_better\tadvantage\tband\tsignificant\n");
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |m| format!("{m:.4}"));
    for roi in &report.rois {
        let (adv, band, sig) = match &roi.advantage {
            Some(a) => (
                format!("{:.4}", a.advantage_fraction),
                format!("{:.4}", a.significance_band),
                a.significant.to_string(),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        out.push_str(&format!(
            "{}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{adv}\t{band}\t{sig}\n",
            roi.name,
            roi.threshold,
            fmt(roi.mean_a),
            fmt(roi.mean_b),
            roi.eligible,
            roi.a_better,
            roi.b_better
        ));
    }
    out
}

pub fn report(args: ReportArgs) -> Result<()> {
    create_dir(&args.out)?;
    // a comparison report has strictly more required fields, so try it first
    match ComparisonReport::load(&args.input) {
        Ok(report) => {
            write_comparison_plots(&report, &args.out)?;
            write_text(&args.out.join("summary.txt"), &comparison_summary(&report))?;
        }
        Err(Error::Json(_)) => {
            let report = EvaluationReport::load(&args.input)?;
            for roi in &report.rois {
                let safe = plots::safe_name(&roi.name);
                let curves = [(report.model.clone(), roi.curve.clone())].into_iter().collect();
                write_text(&args.out.join(format!("{safe}_curves.svg")), &plots::curves(&roi.name, &curves))?;
            }
            write_text(&args.out.join("summary.txt"), &evaluation_summary(&report))?;
        }
        Err(e) => return Err(e.into()),
    }
    log::info!("event=report_done out={}", args.out.display());
    Ok(())
}
