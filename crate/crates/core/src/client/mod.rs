//! Prediction collection from black-box model endpoints.
//!
//! Each image of the corpus is POSTed to the model's endpoint as JSON and the
//! response is parsed as a list of `{category, bbox, score}`; see
//! `docs/endpoint-protocol.md` for the exact schema. Requests run on a
//! bounded pool of worker threads; a single writer appends every completed
//! image to a JSON-lines checkpoint so an interrupted job resumes where it
//! stopped. The final COCO file is always assembled in corpus order.

pub mod stub;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::aggregation::PseudoLabelSet;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_coco};
use crate::types::{CategoryTable, Detection, ImageId, ImageRef, ModelSpec};

/// Request body sent for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    /// Base64 (standard alphabet, padded) image bytes, when the file is
    /// readable locally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub category: String,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictResponse {
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionFailure {
    pub image_id: u64,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct FailureManifest {
    model: String,
    failures: Vec<CollectionFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointRecord {
    image_id: u64,
    detections: Vec<WireDetection>,
}

/// One model's collection run over a corpus.
#[derive(Debug, Clone)]
pub struct CollectionJob {
    pub model: ModelSpec,
    pub categories: CategoryTable,
    pub corpus: Vec<ImageRef>,
    pub parallelism: usize,
    pub retries: u32,
    pub out: PathBuf,
    /// Directory that relative image `file_name`s are resolved against.
    pub image_root: Option<PathBuf>,
    pub token: Option<String>,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl CollectionJob {
    pub fn new(model: ModelSpec, categories: CategoryTable, corpus: Vec<ImageRef>, out: PathBuf) -> Result<Self> {
        if model.endpoint.is_none() {
            return Err(Error::Config(format!("model `{}` has no endpoint", model.id)));
        }
        Ok(CollectionJob {
            model,
            categories,
            corpus,
            parallelism: 4,
            retries: 2,
            out,
            image_root: None,
            token: None,
            timeout: Duration::from_secs(60),
            backoff: Duration::from_millis(200),
        })
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Result<Self> {
        if parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        self.parallelism = parallelism;
        Ok(self)
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        sibling(&self.out, ".partial.jsonl")
    }

    pub fn manifest_path(&self) -> PathBuf {
        sibling(&self.out, ".failures.json")
    }

    fn endpoint(&self) -> &str {
        self.model.endpoint.as_deref().expect("checked in new")
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CollectionReport {
    pub images: usize,
    /// Images taken from an earlier run's checkpoint.
    pub resumed: usize,
    /// Images requested in this run.
    pub requested: usize,
    pub retries: usize,
    pub detections: usize,
    pub failures: Vec<CollectionFailure>,
}

impl CollectionReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

enum Attempt {
    Retryable(String),
    Fatal(Error),
}

enum Outcome {
    Done {
        slot: usize,
        detections: Vec<WireDetection>,
        attempts: u32,
    },
    Failed {
        slot: usize,
        attempts: u32,
        error: String,
    },
    Fatal(Error),
}

fn convert(job: &CollectionJob, image: ImageId, wire: &[WireDetection]) -> Result<Vec<Detection>> {
    let endpoint = job.endpoint();
    wire.iter()
        .map(|w| {
            let category = job
                .categories
                .id_of(&w.category)
                .filter(|c| job.model.supports(*c))
                .ok_or_else(|| Error::CategoryOutsideModel {
                    model: job.model.id.to_string(),
                    category: w.category.clone(),
                })?;
            let schema = |m: String| Error::Endpoint {
                endpoint: endpoint.to_owned(),
                message: format!("image {image}: {m}"),
            };
            let bbox = BBox::from_array(w.bbox).map_err(|e| schema(e.to_string()))?;
            Detection::new(image, bbox, category, w.score, job.model.id.clone()).map_err(|e| schema(e.to_string()))
        })
        .collect()
}

fn build_request(job: &CollectionJob, image: &ImageRef) -> PredictRequest {
    let bytes = match (&job.image_root, &image.uri) {
        (Some(root), Some(uri)) => fs::read(root.join(uri)).ok(),
        _ => None,
    };
    PredictRequest {
        image_id: image.id.0,
        width: image.width,
        height: image.height,
        file_name: image.uri.clone(),
        image: bytes.map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
    }
}

fn request_once(agent: &ureq::Agent, job: &CollectionJob, body: &PredictRequest) -> std::result::Result<PredictResponse, Attempt> {
    let mut req = agent.post(job.endpoint());
    if let Some(token) = &job.token {
        req = req.header("Authorization", &format!("Bearer {token}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| Attempt::Retryable(e.to_string()))?;
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| Attempt::Retryable(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| {
        Attempt::Fatal(Error::Endpoint {
            endpoint: job.endpoint().to_owned(),
            message: format!("response does not match the prediction schema: {e}"),
        })
    })
}

fn load_checkpoint(path: &Path) -> Result<HashMap<u64, Vec<WireDetection>>> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CheckpointRecord>(&line) {
            Ok(rec) => {
                done.insert(rec.image_id, rec.detections);
            }
            // a torn final line from a killed run is simply redone
            Err(e) => log::warn!("{}:{}: ignoring unreadable checkpoint line: {e}", path.display(), n + 1),
        }
    }
    Ok(done)
}

/// Runs a collection job. See the module docs for the protocol.
///
/// Per-image failures that exhaust the retry budget are listed in the report
/// and in the failure manifest next to the output; the checkpoint is kept so a
/// rerun only requests the missing images. Schema violations abort the job.
pub fn collect_predictions(job: &CollectionJob) -> Result<CollectionReport> {
    if job.parallelism == 0 {
        return Err(Error::Config("parallelism must be at least 1".into()));
    }
    let checkpoint = job.checkpoint_path();
    let mut done = load_checkpoint(&checkpoint)?;
    done.retain(|id, _| job.corpus.iter().any(|im| im.id.0 == *id));
    for (id, wire) in &done {
        convert(job, ImageId(*id), wire)?;
    }
    let resumed = done.len();
    let pending: Vec<usize> = (0..job.corpus.len())
        .filter(|&i| !done.contains_key(&job.corpus[i].id.0))
        .collect();

    let mut writer = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&checkpoint)
        .map_err(|e| Error::io(&checkpoint, e))?;

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(job.timeout))
        .build()
        .into();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Outcome>();

    let mut retries = 0usize;
    let mut failures = Vec::new();
    let mut fatal: Option<Error> = None;

    std::thread::scope(|scope| {
        for _ in 0..job.parallelism.min(pending.len().max(1)) {
            let tx = tx.clone();
            let (agent, next, abort, pending) = (&agent, &next, &abort, &pending);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let Some(&slot) = pending.get(next.fetch_add(1, Ordering::SeqCst)) else {
                    break;
                };
                let image = &job.corpus[slot];
                let body = build_request(job, image);
                let mut attempts = 0u32;
                let outcome = loop {
                    attempts += 1;
                    match request_once(agent, job, &body) {
                        Ok(resp) => match convert(job, image.id, &resp.detections) {
                            Ok(_) => {
                                break Outcome::Done {
                                    slot,
                                    detections: resp.detections,
                                    attempts,
                                }
                            }
                            Err(e) => break Outcome::Fatal(e),
                        },
                        Err(Attempt::Fatal(e)) => break Outcome::Fatal(e),
                        Err(Attempt::Retryable(msg)) if attempts > job.retries => {
                            break Outcome::Failed {
                                slot,
                                attempts,
                                error: msg,
                            }
                        }
                        Err(Attempt::Retryable(msg)) => {
                            log::warn!(
                                "model `{}` image {}: attempt {attempts} failed ({msg}); retrying",
                                job.model.id,
                                image.id
                            );
                            std::thread::sleep(job.backoff * attempts);
                        }
                    }
                };
                if matches!(outcome, Outcome::Fatal(_)) {
                    abort.store(true, Ordering::SeqCst);
                }
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for outcome in rx {
            match outcome {
                Outcome::Done {
                    slot,
                    detections,
                    attempts,
                } => {
                    retries += attempts as usize - 1;
                    let rec = CheckpointRecord {
                        image_id: job.corpus[slot].id.0,
                        detections,
                    };
                    let mut line = serde_json::to_string(&rec).expect("record serializes");
                    line.push('\n');
                    if let Err(e) = writer.write_all(line.as_bytes()).and_then(|_| writer.flush()) {
                        fatal.get_or_insert(Error::io(&checkpoint, e));
                        abort.store(true, Ordering::SeqCst);
                    }
                    done.insert(rec.image_id, rec.detections);
                }
                Outcome::Failed { slot, attempts, error } => {
                    retries += attempts as usize - 1;
                    failures.push(CollectionFailure {
                        image_id: job.corpus[slot].id.0,
                        attempts,
                        error,
                    });
                }
                Outcome::Fatal(e) => {
                    fatal.get_or_insert(e);
                }
            }
        }
    });
    drop(writer);
    if let Some(e) = fatal {
        return Err(e);
    }

    failures.sort_by_key(|f| f.image_id);
    let manifest = job.manifest_path();
    if failures.is_empty() {
        match fs::remove_file(&manifest) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(&manifest, e)),
            _ => {}
        }
    } else {
        let m = FailureManifest {
            model: job.model.id.to_string(),
            failures: failures.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&manifest, &bytes)?;
    }

    let mut detections = Vec::new();
    for image in &job.corpus {
        if let Some(wire) = done.get(&image.id.0) {
            detections.extend(convert(job, image.id, wire)?);
        }
    }
    let report = CollectionReport {
        images: job.corpus.len(),
        resumed,
        requested: pending.len(),
        retries,
        detections: detections.len(),
        failures,
    };
    write_coco(
        &PseudoLabelSet {
            images: job.corpus.clone(),
            detections,
            categories: job.categories.clone(),
        },
        &job.out,
    )?;
    if report.is_complete() {
        fs::remove_file(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    }
    Ok(report)
}
