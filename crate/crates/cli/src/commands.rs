use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use dermlens_core::eval::EvalStore;
use dermlens_core::gateway::{BackendConfig, Gateway};
use dermlens_core::metrics::{classes_present, MetricsReport};
use dermlens_core::pipeline::{read_predictions, Pipeline, PipelineConfig, PredictionRecord, RunSummary};
use dermlens_core::prompt::TemplateSet;
use dermlens_core::raster::{self, RgbRaster};
use dermlens_core::report::{
    render_ablation, render_rationales, render_report, render_table, AblationRow, Comparisons,
    ReferenceTables, ReportStyle, TableRow,
};
use dermlens_core::{load_manifest, DatasetManifest, DiagnosisLabel, Variant};

use crate::config::RunConfig;
use crate::{AblateArgs, MetricsArgs, Outcome, PerturbArgs, RunArgs, ServeArgs};

fn extension(style: ReportStyle) -> &'static str {
    match style {
        ReportStyle::Markdown => "md",
        ReportStyle::Csv => "csv",
        ReportStyle::Latex => "tex",
    }
}

fn build_pipeline(
    config: &RunConfig,
    backend: &BackendConfig,
    variant: Variant,
    workers: usize,
    manifest: &DatasetManifest,
) -> Result<Pipeline> {
    let gateway = Gateway::from_config(backend, &config.base_dir)
        .with_context(|| format!("setting up backend `{}`", backend.model_name))?;
    let mut pc = PipelineConfig::new(variant, manifest.vocabulary.clone(), manifest.classes.clone());
    if let Some(dir) = &config.template_dir {
        pc.templates = TemplateSet::load_dir(&config.resolve(dir))?;
    }
    pc.max_repair_rounds = config.max_repair_rounds;
    pc.cache_dir = config.cache_dir.as_ref().map(|d| config.resolve(d));
    pc.workers = workers;
    Ok(Pipeline::new(pc, gateway))
}

fn report_run(summary: &RunSummary, out: &Path) {
    println!(
        "{} [{}]: {} cases, {} failed ({} parse, {} error), {} concept failures, {} exchanges, {} cached, {:.2}s -> {}",
        summary.variant,
        summary.backend_id,
        summary.n_cases,
        summary.n_failures,
        summary.n_parse_failures,
        summary.n_errors,
        summary.n_concept_failures,
        summary.n_exchanges,
        summary.cache_hits,
        summary.wall_time_seconds,
        out.display()
    );
}

pub fn run(config: &RunConfig, args: &RunArgs) -> Result<Outcome> {
    let manifest = load_manifest(config.manifest_path())?;
    let variant = args.variant.unwrap_or(config.variant);
    let split = args.split.unwrap_or(config.split);
    let tags: BTreeSet<String> = match &args.tags {
        Some(t) => t.iter().filter(|s| !s.is_empty()).cloned().collect(),
        None => config.tags.clone(),
    };
    let workers = args.workers.unwrap_or(config.workers).max(1);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir().join(format!("predictions.{variant}.jsonl")));
    let pipeline = build_pipeline(config, &config.backend, variant, workers, &manifest)?;
    let summary = pipeline.run_dataset(&manifest, split, &tags, &out)?;
    report_run(&summary, &out);
    Ok(if summary.n_failures > 0 {
        Outcome::Partial
    } else {
        Outcome::Success
    })
}

pub fn ablate(config: &RunConfig, args: &AblateArgs) -> Result<Outcome> {
    let manifest = load_manifest(config.manifest_path())?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| config.output_dir());
    let workers = args.workers.unwrap_or(config.workers).max(1);
    let mut runs: Vec<(AblationRow, &BackendConfig, Variant, String)> = vec![
        (AblationRow::NoConcept, &config.backend, Variant::NoConcept, "no_concept".into()),
        (AblationRow::NoCot, &config.backend, Variant::NoCot, "no_cot".into()),
        (AblationRow::Full, &config.backend, Variant::Full, "full".into()),
    ];
    if let Some(lite) = &config.lite_backend {
        runs.push((AblationRow::Lite, lite, Variant::Full, "lite".into()));
    }

    let mut rows = Vec::new();
    let mut partial = false;
    for (row, backend, variant, name) in runs {
        let pipeline = build_pipeline(config, backend, variant, workers, &manifest)?;
        let out = out_dir.join(format!("predictions.{name}.jsonl"));
        let summary = pipeline.run_dataset(&manifest, config.split, &config.tags, &out)?;
        report_run(&summary, &out);
        partial |= summary.n_failures > 0;
        let (records, _) = read_predictions(&out)?;
        let classes = classes_present(&records, &manifest, &manifest.classes);
        let m = MetricsReport::build(&records, &manifest, &classes)?;
        rows.push((row, m.bacc_percent, m.macro_f1_percent));
    }

    let table = render_ablation(&rows, args.report_style);
    let path = out_dir.join(format!("ablation.{}", extension(args.report_style)));
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(if partial { Outcome::Partial } else { Outcome::Success })
}

fn manifest_from(config: Option<&RunConfig>, explicit: Option<&PathBuf>) -> Result<DatasetManifest> {
    let path = match (explicit, config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.manifest_path(),
        (None, None) => bail!("no manifest: pass --manifest or --config"),
    };
    Ok(load_manifest(path)?)
}

fn robustness_rows(
    records: &[PredictionRecord],
    manifest: &DatasetManifest,
    classes: &[DiagnosisLabel],
) -> Result<Vec<TableRow>> {
    let tag_of = |r: &PredictionRecord| manifest.case(&r.case_id).map(|c| c.tags.clone()).unwrap_or_default();
    let tags: BTreeSet<String> = records.iter().flat_map(tag_of).collect();
    let mut subsets: Vec<(String, Vec<PredictionRecord>)> = vec![
        ("All cases".into(), records.to_vec()),
        (
            "Untagged".into(),
            records.iter().filter(|r| tag_of(r).is_empty()).cloned().collect(),
        ),
    ];
    for tag in tags {
        let subset = records.iter().filter(|r| tag_of(r).contains(&tag)).cloned().collect();
        subsets.push((tag, subset));
    }
    let mut rows = Vec::new();
    for (name, subset) in subsets {
        if subset.is_empty() {
            continue;
        }
        // Subsets rarely contain every class; score the ones present.
        let present = classes_present(&subset, manifest, classes);
        let m = MetricsReport::build(&subset, manifest, &present)?;
        rows.push(TableRow::new(
            &format!("{name} (n={})", subset.len()),
            vec![Some(m.bacc_percent), Some(m.macro_f1_percent)],
        ));
    }
    Ok(rows)
}

pub fn metrics(config: Option<&RunConfig>, args: &MetricsArgs) -> Result<Outcome> {
    let manifest = manifest_from(config, args.manifest.as_ref())?;
    let (records, _) = read_predictions(&args.predictions)?;
    if records.is_empty() {
        bail!("{} holds no prediction records", args.predictions.display());
    }
    let classes = if args.present_classes_only {
        classes_present(&records, &manifest, &manifest.classes)
    } else {
        manifest.classes.clone()
    };
    let report = MetricsReport::build(&records, &manifest, &classes)?;
    let comparisons = if args.with_reference {
        Comparisons::from_reference(&ReferenceTables::builtin())
    } else {
        Comparisons::none()
    };
    let style = args.report_style;
    let mut text = render_report(&report, &comparisons, style);
    if args.pooled {
        if let Some(pooled) = &report.pooled_concept {
            let row = TableRow::new("Pooled", vec![Some(pooled.bacc_percent), Some(pooled.f1_percent)]);
            text.push('\n');
            text.push_str(&render_table("Concept detection (pooled)", "Method", &["BACC (%)", "F1 (%)"], &[row], style));
        }
    }
    if args.by_tag {
        let rows = robustness_rows(&records, &manifest, &classes)?;
        text.push('\n');
        text.push_str(&render_table("Robustness by tag", "Subset", &["BACC (%)", "F1 (%)"], &rows, style));
    }
    if report.n_failures > 0 {
        log::warn!("{} of {} cases have no diagnosis and count as misses", report.n_failures, report.n_cases);
    }
    if let Some(path) = &args.rationales {
        fs::write(path, render_rationales(&records, &manifest, style))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    match &args.out {
        Some(path) => fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(Outcome::Success)
}

pub fn perturb(config: Option<&RunConfig>, args: &PerturbArgs) -> Result<Outcome> {
    let manifest = manifest_from(config, args.manifest.as_ref())?;
    let seed = args.seed.or(config.and_then(|c| c.seed)).unwrap_or(0);
    let image_dir = args.out_dir.join("images");
    fs::create_dir_all(&image_dir).with_context(|| format!("creating {}", image_dir.display()))?;

    let mut derived = manifest.clone();
    derived.cases.clear();
    derived.base_dir = args.out_dir.clone();
    derived.source_note = format!(
        "{} [{} strength={} seed={}]",
        manifest.source_note.trim(),
        args.kind.tag(),
        args.strength,
        seed
    )
    .trim()
    .to_string();

    let mut failures = 0;
    for case in &manifest.cases {
        let source = manifest.resolve_image(case);
        let result = RgbRaster::open(&source)
            .map_err(anyhow::Error::from)
            .and_then(|img| Ok(raster::perturb(&img, args.kind, args.strength, seed)?))
            .and_then(|img| Ok(img.to_png()?));
        let png = match result {
            Ok(png) => png,
            Err(e) => {
                if matches!(e.downcast_ref(), Some(dermlens_core::raster::RasterError::InvalidStrength(_))) {
                    return Err(e);
                }
                eprintln!("{}: {}: {e:#}", case.case_id, source.display());
                failures += 1;
                continue;
            }
        };
        let name: String = case
            .case_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let relative = format!("images/{name}.png");
        fs::write(args.out_dir.join(&relative), png)?;
        let mut case = case.clone();
        case.image_ref = relative;
        case.tags.insert(args.kind.tag().to_string());
        derived.cases.push(case);
    }
    let path = args.out_dir.join("manifest.json");
    fs::write(&path, derived.to_json_pretty() + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{} of {} images perturbed ({} strength {} seed {}) -> {}",
        derived.cases.len(),
        manifest.cases.len(),
        args.kind.tag(),
        args.strength,
        seed,
        path.display()
    );
    Ok(if failures > 0 { Outcome::Partial } else { Outcome::Success })
}

pub fn serve(config: Option<&RunConfig>, args: &ServeArgs) -> Result<Outcome> {
    let manifest = manifest_from(config, args.manifest.as_ref())?;
    let (records, _) = read_predictions(&args.predictions)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        args.predictions
            .parent()
            .unwrap_or(Path::new("."))
            .join("ratings.jsonl")
    });
    let store = EvalStore::open(&records, &manifest, &log_path)?;
    if store.eligible_cases() == 0 {
        bail!(
            "{} has no successful diagnoses for cases in the manifest; there is nothing to rate",
            args.predictions.display()
        );
    }
    let eligible = store.eligible_cases();
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!(
            "serving {eligible} cases on http://{} (rating log {}); Ctrl-C to stop",
            listener.local_addr()?,
            log_path.display()
        );
        dermlens_server::serve(listener, Arc::new(Mutex::new(store)), dermlens_server::ctrl_c()).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    println!("stopped; rating log {} is complete", log_path.display());
    Ok(Outcome::Success)
}
