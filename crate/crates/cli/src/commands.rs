use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use plcompose::aggregation::{
    aggregate_with_stats, apply_strategy, group_by_image, group_by_object, AggregationConfig, AggregationStats,
    AggregationStrategy, PseudoLabelSet, Verdict,
};
use plcompose::classification::{aggregate_votes, filter_labels_by_entropy, ClassLabel, TieBreak};
use plcompose::client::stub::StubServer;
use plcompose::client::{collect_predictions, CollectionJob};
use plcompose::evaluation::{mean_ap, top1_accuracy, EvalReport, Top1Report};
use plcompose::filtering::{filter_by_confidence, FilterConfig};
use plcompose::io::{
    load_class_labels, load_coco, load_corpus, load_registry, write_atomic, write_class_labels, write_coco,
    ClassLabelSet, LoadedRegistry, GROUND_TRUTH_MODEL,
};
use plcompose::simharness::{simulate as run_simulation, write_simulation, SimulationSpec};
use plcompose::{CategoryTable, Error, ImageRef, ModelId};
use serde::Serialize;

use crate::{
    AggregateCmd, CollectArgs, EndpointArgs, EvaluateCmd, FilterCmd, PipelineCmd, ServeStubCmd, SimulateCmd, Stage,
    StageError, Task,
};

type CmdResult<T = ()> = Result<T, StageError>;

/// Model id attached to voted classification labels.
const VOTE_MODEL: &str = "majority-vote";

#[derive(Debug, Serialize)]
struct ModelCounts {
    id: String,
    generated: usize,
    filtered_out: usize,
    retained: usize,
}

#[derive(Debug, Serialize)]
struct ClassCounts {
    labeled: usize,
    abstained: usize,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    task: &'static str,
    strategy: String,
    images: usize,
    models: Vec<ModelCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregation: Option<AggregationStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kept_groups_by_strategy: Option<BTreeMap<String, usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classification: Option<ClassCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    evaluation: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top1: Option<Top1Report>,
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("summary serializes");
    let mut out = serde_json::to_vec_pretty(&v).expect("Value serializes");
    out.push(b'\n');
    out
}

fn print_json<T: Serialize>(value: &T) {
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(&json_bytes(value));
}

fn not_found(path: &Path) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
    }
}

fn require_file(path: &Path) -> plcompose::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(not_found(path))
    }
}

fn require_parent(path: &Path) -> plcompose::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(not_found(p)),
        _ => Ok(()),
    }
}

fn token(args: &EndpointArgs) -> plcompose::Result<Option<String>> {
    args.token_env
        .as_ref()
        .map(|var| std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set"))))
        .transpose()
}

fn collection_job(
    loaded: &LoadedRegistry,
    corpus: &[ImageRef],
    model: &ModelId,
    out: PathBuf,
    args: &EndpointArgs,
) -> plcompose::Result<CollectionJob> {
    let spec = loaded
        .registry
        .model(model)
        .ok_or_else(|| Error::Config(format!("model `{model}` is not in the registry")))?;
    let mut job = CollectionJob::new(spec.clone(), loaded.registry.categories().clone(), corpus.to_vec(), out)?
        .with_parallelism(args.parallelism)?
        .with_retries(args.retries);
    job.timeout = Duration::from_secs(args.timeout_secs);
    job.backoff = Duration::from_millis(args.backoff_ms);
    job.image_root = args.image_root.clone();
    job.token = token(args)?;
    Ok(job)
}

fn run_collection(job: &CollectionJob) -> plcompose::Result<()> {
    let report = collect_predictions(job)?;
    log::info!(
        "model `{}`: {} images ({} resumed), {} detections, {} retries",
        job.model.id,
        report.images,
        report.resumed,
        report.detections,
        report.retries
    );
    if report.is_complete() {
        return Ok(());
    }
    Err(Error::Endpoint {
        endpoint: job.model.endpoint.clone().unwrap_or_default(),
        message: format!(
            "{} of {} images failed after retries (listed in {}); rerun to resume",
            report.failures.len(),
            report.images,
            job.manifest_path().display()
        ),
    })
}

pub fn collect(a: CollectArgs) -> CmdResult {
    require_parent(&a.out).stage("validate")?;
    let loaded = load_registry(&a.registry).stage("load")?;
    let corpus = load_corpus(&a.corpus).stage("load")?;
    let job = collection_job(&loaded, &corpus, &ModelId::new(&a.model_id), a.out, &a.endpoint).stage("validate")?;
    run_collection(&job).stage("collect")
}

pub fn filter(a: FilterCmd) -> CmdResult {
    let cfg = a.filter.config().stage("validate")?;
    let table = match &a.registry {
        Some(p) => Some(load_registry(p).stage("load")?.registry.categories().clone()),
        None => None,
    };
    let model = ModelId::new(&a.model_id);
    let (input, kept) = match a.task {
        Task::Detection => {
            let set = load_coco(&a.input, table.as_ref(), &model).stage("load")?;
            let n = set.detections.len();
            let detections = filter_by_confidence(set.detections, cfg.confidence_threshold);
            let kept = detections.len();
            write_coco(&PseudoLabelSet { detections, ..set }, &a.out).stage("write")?;
            (n, kept)
        }
        Task::Classification => {
            let set = load_class_labels(&a.input, table.as_ref(), &model).stage("load")?;
            let n = set.labels.len();
            let labels = filter_labels_by_entropy(set.labels, cfg.entropy_threshold);
            let kept = labels.len();
            write_class_labels(&ClassLabelSet { labels, ..set }, &a.out).stage("write")?;
            (n, kept)
        }
    };
    #[derive(Serialize)]
    struct FilterSummary {
        input: usize,
        kept: usize,
        filtered_out: usize,
    }
    print_json(&FilterSummary {
        input,
        kept,
        filtered_out: input - kept,
    });
    Ok(())
}

struct Settings {
    filter: FilterConfig,
    agg: AggregationConfig,
    tie: TieBreak,
}

/// Filters and aggregates per-model prediction files; returns the summary
/// (without evaluation). Writes the pseudo-labels to `out`.
fn compose(
    task: Task,
    loaded: &LoadedRegistry,
    corpus: &[ImageRef],
    prediction_files: &[PathBuf],
    settings: &Settings,
    out: &Path,
) -> CmdResult<RunSummary> {
    let Settings { filter, agg, tie } = settings;
    let tie = *tie;
    let registry = &loaded.registry;
    let table = registry.categories();
    let mut models = Vec::new();
    let mut summary = RunSummary {
        task: match task {
            Task::Detection => "detection",
            Task::Classification => "classification",
        },
        strategy: match task {
            Task::Detection => agg.strategy.to_string(),
            Task::Classification => format!("majority ({tie})"),
        },
        images: corpus.len(),
        models: Vec::new(),
        aggregation: None,
        kept_groups_by_strategy: None,
        classification: None,
        evaluation: None,
        top1: None,
    };

    match task {
        Task::Detection => {
            let mut predictions = Vec::new();
            for (spec, path) in registry.models().iter().zip(prediction_files) {
                let mut dets = load_coco(path, Some(table), &spec.id).stage("load")?.detections;
                // a model's file speaks for that model only
                for d in &mut dets {
                    d.model = spec.id.clone();
                }
                let generated = dets.len();
                let dets = filter_by_confidence(dets, filter.confidence_threshold);
                models.push(ModelCounts {
                    id: spec.id.to_string(),
                    generated,
                    filtered_out: generated - dets.len(),
                    retained: dets.len(),
                });
                predictions.push(dets);
            }
            let (set, stats) = aggregate_with_stats(&predictions, registry, corpus, agg).stage("aggregate")?;

            let mut by_strategy = BTreeMap::new();
            for bucket in group_by_image(&predictions, corpus).stage("aggregate")? {
                for group in group_by_object(&bucket, agg.group_iou, registry).stage("aggregate")? {
                    for s in AggregationStrategy::ALL {
                        let kept = (apply_strategy(&group, s) == Verdict::Keep) as usize;
                        *by_strategy.entry(s.to_string()).or_insert(0) += kept;
                    }
                }
            }
            for s in AggregationStrategy::ALL {
                by_strategy.entry(s.to_string()).or_insert(0);
            }
            write_coco(&set, out).stage("write")?;
            summary.aggregation = Some(stats);
            summary.kept_groups_by_strategy = Some(by_strategy);
        }
        Task::Classification => {
            let mut predictions = Vec::new();
            for (spec, path) in registry.models().iter().zip(prediction_files) {
                let mut labels = load_class_labels(path, Some(table), &spec.id).stage("load")?.labels;
                for l in &mut labels {
                    l.model = spec.id.clone();
                    if !spec.supports(l.category) {
                        return Err(Error::CategoryOutsideModel {
                            model: spec.id.to_string(),
                            category: table.label(l.category),
                        })
                        .stage("load");
                    }
                }
                let generated = labels.len();
                let labels = filter_labels_by_entropy(labels, filter.entropy_threshold);
                models.push(ModelCounts {
                    id: spec.id.to_string(),
                    generated,
                    filtered_out: generated - labels.len(),
                    retained: labels.len(),
                });
                predictions.push(labels);
            }
            let result = aggregate_votes(&predictions, corpus, tie).stage("aggregate")?;
            let labels: Vec<ClassLabel> = result
                .labels()
                .map(|(image, category)| ClassLabel {
                    image,
                    category,
                    model: ModelId::new(VOTE_MODEL),
                    probs: None,
                })
                .collect();
            summary.classification = Some(ClassCounts {
                labeled: labels.len(),
                abstained: result.abstained(),
            });
            let set = ClassLabelSet {
                images: corpus.to_vec(),
                labels,
                categories: table.clone(),
            };
            write_class_labels(&set, out).stage("write")?;
        }
    }
    summary.models = models;
    Ok(summary)
}

fn registered_predictions(loaded: &LoadedRegistry) -> plcompose::Result<Vec<PathBuf>> {
    loaded
        .registry
        .models()
        .iter()
        .map(|m| {
            let path = loaded
                .predictions_path(&m.id)
                .ok_or_else(|| Error::Config(format!("model `{}` has no predictions file", m.id)))?;
            require_file(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn aggregate(a: AggregateCmd) -> CmdResult {
    let settings = Settings {
        filter: a.filter.config().stage("validate")?,
        agg: a.strategy.config().stage("validate")?,
        tie: a.strategy.tie,
    };
    require_file(&a.registry).stage("validate")?;
    require_file(&a.corpus).stage("validate")?;
    require_parent(&a.out).stage("validate")?;
    let loaded = load_registry(&a.registry).stage("load")?;
    let files = registered_predictions(&loaded).stage("validate")?;
    let corpus = load_corpus(&a.corpus).stage("load")?;
    let summary = compose(a.task, &loaded, &corpus, &files, &settings, &a.out)?;
    if let Some(p) = &a.summary {
        write_atomic(p, &json_bytes(&summary)).stage("write")?;
    }
    print_json(&summary);
    Ok(())
}

fn evaluate_detection(truth: &Path, pred: &Path) -> plcompose::Result<EvalReport> {
    let truth = load_coco(truth, None, &ModelId::new(GROUND_TRUTH_MODEL))?;
    let pred = load_coco(pred, Some(&truth.categories), &ModelId::new("prediction"))?;
    mean_ap(&pred.detections, &truth.detections)
}

fn evaluate_classification(truth: &Path, pred: &Path) -> plcompose::Result<Top1Report> {
    let truth = load_class_labels(truth, None, &ModelId::new(GROUND_TRUTH_MODEL))?;
    let pred = load_class_labels(pred, Some(&truth.categories), &ModelId::new("prediction"))?;
    let labels: HashMap<_, _> = truth.labels.iter().map(|l| (l.image, l.category)).collect();
    let mut predicted = HashMap::new();
    for l in &pred.labels {
        predicted.entry(l.image).or_insert(l.category);
    }
    let decisions: Vec<_> = truth
        .images
        .iter()
        .filter(|im| labels.contains_key(&im.id))
        .map(|im| (im.id, predicted.get(&im.id).copied()))
        .collect();
    top1_accuracy(&decisions, &labels)
}

pub fn evaluate(a: EvaluateCmd) -> CmdResult {
    match a.task {
        Task::Detection => {
            let report = evaluate_detection(&a.truth, &a.pred).stage("evaluate")?;
            println!("mAP@[.50:.95] {:.4}", report.map_5095);
            for t in [0.5, 0.75] {
                println!("AP@{t:.2}       {:.4}", report.ap_at(t).unwrap_or(0.0));
            }
            println!(
                "matched@0.50 {}  unmatched predictions {}  unmatched truths {}",
                report.matched, report.unmatched_predictions, report.unmatched_truths
            );
            if let Some(p) = &a.json {
                write_atomic(p, &json_bytes(&report)).stage("write")?;
            }
        }
        Task::Classification => {
            let report = evaluate_classification(&a.truth, &a.pred).stage("evaluate")?;
            println!("top-1 accuracy {:.4}", report.accuracy);
            println!("coverage       {:.4} ({} of {} images labeled)", report.coverage, report.labeled, report.total);
            if let Some(p) = &a.json {
                write_atomic(p, &json_bytes(&report)).stage("write")?;
            }
        }
    }
    Ok(())
}

pub fn simulate(a: SimulateCmd) -> CmdResult {
    let mut spec = if a.detectors == "desk" {
        SimulationSpec::desk()
    } else {
        let path = Path::new(&a.detectors);
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })
            .stage("load")?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data {
                path: path.to_path_buf(),
                message: format!("malformed scenario: {e}"),
            })
            .stage("load")?
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(n) = a.images {
        spec.images = n;
    }
    if let Some(n) = a.objects_per_image {
        spec.objects_per_image = n;
    }
    if let Some(n) = a.categories {
        if n == 0 || n > spec.categories.len() {
            return Err(Error::Config(format!(
                "--categories must be in 1..={}",
                spec.categories.len()
            )))
            .stage("validate");
        }
        spec.categories.truncate(n);
        for d in &mut spec.detectors {
            d.categories.retain(|c| spec.categories.contains(c));
            if d.categories.is_empty() {
                return Err(Error::Config(format!("detector `{}` has no categories left", d.id))).stage("validate");
            }
        }
    }
    let sim = run_simulation(&spec).stage("simulate")?;
    let files = write_simulation(&sim, &a.out_dir).stage("write")?;
    write_atomic(&a.out_dir.join("scenario.json"), &json_bytes(&spec)).stage("write")?;
    println!("ground truth  {}", files.ground_truth.display());
    println!("corpus        {}", files.corpus.display());
    println!("registry      {}", files.registry.display());
    for p in &files.predictions {
        println!("predictions   {}", p.display());
    }
    Ok(())
}

pub fn pipeline(a: PipelineCmd) -> CmdResult {
    let settings = Settings {
        filter: a.filter.config().stage("validate")?,
        agg: a.strategy.config().stage("validate")?,
        tie: a.strategy.tie,
    };
    require_file(&a.registry).stage("validate")?;
    require_file(&a.corpus).stage("validate")?;
    if let Some(t) = &a.truth {
        require_file(t).stage("validate")?;
    }
    require_parent(&a.out).stage("validate")?;
    let summary_path = a.summary.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".summary.json");
        s.into()
    });
    require_parent(&summary_path).stage("validate")?;

    let loaded = load_registry(&a.registry).stage("load")?;
    let corpus = load_corpus(&a.corpus).stage("load")?;
    let work_dir = a.work_dir.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".collected");
        s.into()
    });

    // every model needs either a predictions file or an endpoint
    let mut files = Vec::new();
    let mut jobs = Vec::new();
    for m in loaded.registry.models() {
        match (loaded.predictions_path(&m.id), &m.endpoint) {
            (Some(p), _) => {
                require_file(&p).stage("validate")?;
                files.push(p);
            }
            (None, Some(_)) => {
                if a.task == Task::Classification {
                    return Err(Error::Config(format!(
                        "model `{}`: endpoint collection is only available for detection",
                        m.id
                    )))
                    .stage("validate");
                }
                let out = work_dir.join(format!("{}.json", m.id));
                jobs.push(collection_job(&loaded, &corpus, &m.id, out.clone(), &a.endpoint).stage("validate")?);
                files.push(out);
            }
            (None, None) => {
                return Err(Error::Config(format!("model `{}` has neither predictions nor an endpoint", m.id)))
                    .stage("validate")
            }
        }
    }

    if !jobs.is_empty() {
        std::fs::create_dir_all(&work_dir)
            .map_err(|source| Error::Io {
                path: work_dir.clone(),
                source,
            })
            .stage("collect")?;
    }
    for job in &jobs {
        run_collection(job).stage("collect")?;
    }

    let mut summary = compose(a.task, &loaded, &corpus, &files, &settings, &a.out)?;
    if let Some(truth) = &a.truth {
        match a.task {
            Task::Detection => summary.evaluation = Some(evaluate_detection(truth, &a.out).stage("evaluate")?),
            Task::Classification => summary.top1 = Some(evaluate_classification(truth, &a.out).stage("evaluate")?),
        }
    }
    write_atomic(&summary_path, &json_bytes(&summary)).stage("write")?;
    print_json(&summary);
    Ok(())
}

pub fn serve_stub(a: ServeStubCmd) -> CmdResult {
    let table: Option<CategoryTable> = match &a.registry {
        Some(p) => Some(load_registry(p).stage("load")?.registry.categories().clone()),
        None => None,
    };
    let set = load_coco(&a.predictions, table.as_ref(), &ModelId::new("stub")).stage("load")?;
    let server = StubServer::serving(&a.addr, &set.detections, &set.categories)
        .map_err(|source| Error::Endpoint {
            endpoint: a.addr.clone(),
            message: source.to_string(),
        })
        .stage("serve")?;
    println!("{}", server.url());
    let _ = std::io::stdout().flush();
    server.wait();
    Ok(())
}
