//! COCO-format datasets and the model registry file.
//!
//! Two COCO layouts are read: the annotation layout (an object with
//! `images`, `annotations` and `categories`) and the bare detection-results
//! layout (a JSON array of `{image_id, category_id, bbox, score}`). Category
//! identity is by name; every file is remapped onto a unified
//! [`CategoryTable`]. Only the annotation layout is written, with sorted keys
//! so identical data always serializes to identical bytes.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::PseudoLabelSet;
use crate::bbox::BBox;
use crate::classification::{ClassLabel, ClassProbs};
use crate::error::{Error, Result};
use crate::filtering::ProbVector;
use crate::types::{check_score, CategoryId, CategoryTable, Detection, ImageId, ImageRef, ModelId, ModelSpec, Registry};

/// Provenance recorded for annotations that carry no `model` key.
pub const GROUND_TRUTH_MODEL: &str = "ground-truth";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    category_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iscrowd: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    /// Class distribution for classification labels, aligned with the file's
    /// `categories` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CocoLayout {
    Results(Vec<CocoAnnotation>),
    Annotations(CocoFile),
}

fn read_layout(path: &Path) -> Result<CocoLayout> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // try the object layout first for its better error messages
    match serde_json::from_str::<CocoFile>(&text) {
        Ok(f) => Ok(CocoLayout::Annotations(f)),
        Err(obj_err) => match serde_json::from_str::<Vec<CocoAnnotation>>(&text) {
            Ok(v) => Ok(CocoLayout::Results(v)),
            Err(_) => Err(Error::data(path, format!("malformed COCO JSON: {obj_err}"))),
        },
    }
}

/// Writes bytes through a sibling temp file and a rename, so readers never
/// observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::data(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn to_sorted_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json's Value map is ordered by key
    let v = serde_json::to_value(value).expect("COCO structures always serialize");
    let mut out = serde_json::to_vec_pretty(&v).expect("Value always serializes");
    out.push(b'\n');
    out
}

fn convert_images(path: &Path, images: &[CocoImage]) -> Result<Vec<ImageRef>> {
    let mut seen = HashSet::new();
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            if !seen.insert(im.id) {
                return Err(Error::data(path, format!("images[{i}]: duplicate image id {}", im.id)));
            }
            ImageRef::new(ImageId(im.id), im.width, im.height, im.file_name.clone())
                .map_err(|e| Error::data(path, format!("images[{i}]: {e}")))
        })
        .collect()
}

/// Maps the file's category ids onto `table`, by name.
fn category_remap(
    path: &Path,
    cats: &[CocoCategory],
    table: &CategoryTable,
) -> Result<std::collections::HashMap<u32, CategoryId>> {
    let mut map = std::collections::HashMap::new();
    for (i, c) in cats.iter().enumerate() {
        let id = table
            .id_of(&c.name)
            .ok_or_else(|| Error::data(path, format!("categories[{i}]: unknown category `{}`", c.name)))?;
        if map.insert(c.id, id).is_some() {
            return Err(Error::data(path, format!("categories[{i}]: duplicate category id {}", c.id)));
        }
    }
    Ok(map)
}

fn table_from_file(path: &Path, cats: &[CocoCategory]) -> Result<CategoryTable> {
    CategoryTable::from_names(cats.iter().map(|c| c.name.clone()))
        .map_err(|e| Error::data(path, format!("categories: {e}")))
}

/// Reads a COCO file as detections.
///
/// With `table = None` the unified table is the file's own category list.
/// In the results layout `category_id` is taken to be an id of `table`
/// directly, since that layout carries no names. Annotations without a
/// `model` key are attributed to `default_model`; a missing score reads as 1.
pub fn load_coco(path: &Path, table: Option<&CategoryTable>, default_model: &ModelId) -> Result<PseudoLabelSet> {
    let (images, annotations, categories, remap) = match read_layout(path)? {
        CocoLayout::Annotations(f) => {
            let categories = match table {
                Some(t) => t.clone(),
                None => table_from_file(path, &f.categories)?,
            };
            let remap = category_remap(path, &f.categories, &categories)?;
            (convert_images(path, &f.images)?, f.annotations, categories, Some(remap))
        }
        CocoLayout::Results(anns) => {
            let categories = table
                .cloned()
                .ok_or_else(|| Error::data(path, "results layout needs a category table"))?;
            (Vec::new(), anns, categories, None)
        }
    };

    let known_images: HashSet<u64> = images.iter().map(|im| im.id.0).collect();
    let detections = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let at = |msg: String| Error::data(path, format!("annotations[{i}]: {msg}"));
            let category = match &remap {
                Some(m) => *m
                    .get(&a.category_id)
                    .ok_or_else(|| at(format!("category id {} not declared", a.category_id)))?,
                None if categories.contains(CategoryId(a.category_id)) => CategoryId(a.category_id),
                None => return Err(at(format!("unknown category id {}", a.category_id))),
            };
            if remap.is_some() && !known_images.contains(&a.image_id) {
                return Err(at(format!("image id {} not declared", a.image_id)));
            }
            let bbox = a.bbox.ok_or_else(|| at("missing bbox".into()))?;
            let bbox = BBox::from_array(bbox).map_err(|e| at(e.to_string()))?;
            let score = a.score.unwrap_or(1.0);
            check_score(score).map_err(|e| at(e.to_string()))?;
            let model = a.model.as_ref().map_or_else(|| default_model.clone(), ModelId::new);
            Ok(Detection {
                image: ImageId(a.image_id),
                bbox,
                category,
                score,
                model,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PseudoLabelSet {
        images,
        detections,
        categories,
    })
}

/// The `images` of any COCO annotation-layout file.
pub fn load_corpus(path: &Path) -> Result<Vec<ImageRef>> {
    match read_layout(path)? {
        CocoLayout::Annotations(f) => convert_images(path, &f.images),
        CocoLayout::Results(_) => Err(Error::data(path, "corpus file must use the annotation layout")),
    }
}

fn coco_images(images: &[ImageRef]) -> Vec<CocoImage> {
    images
        .iter()
        .map(|im| CocoImage {
            id: im.id.0,
            width: im.width,
            height: im.height,
            file_name: im.uri.clone(),
        })
        .collect()
}

fn coco_categories(table: &CategoryTable) -> Vec<CocoCategory> {
    table
        .iter()
        .map(|(id, name)| CocoCategory {
            id: id.0,
            name: name.to_owned(),
        })
        .collect()
}

/// Writes a dataset in the annotation layout. Annotation ids are assigned
/// 1.. in detection order.
pub fn write_coco(set: &PseudoLabelSet, path: &Path) -> Result<()> {
    write_atomic(path, &coco_bytes(set))
}

/// The exact bytes [`write_coco`] produces.
pub fn coco_bytes(set: &PseudoLabelSet) -> Vec<u8> {
    let annotations = set
        .detections
        .iter()
        .enumerate()
        .map(|(i, d)| CocoAnnotation {
            id: Some(i as u64 + 1),
            image_id: d.image.0,
            category_id: d.category.0,
            bbox: Some(d.bbox.to_array()),
            area: Some(d.bbox.area()),
            iscrowd: Some(0),
            score: Some(d.score),
            model: Some(d.model.0.clone()),
            probs: None,
        })
        .collect();
    to_sorted_json(&CocoFile {
        images: coco_images(&set.images),
        annotations,
        categories: coco_categories(&set.categories),
    })
}

/// Classification labels read from a COCO file.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLabelSet {
    pub images: Vec<ImageRef>,
    pub labels: Vec<ClassLabel>,
    pub categories: CategoryTable,
}

/// Reads image-level labels: annotations without `bbox`, optionally carrying
/// `probs` aligned with the file's `categories` order.
pub fn load_class_labels(path: &Path, table: Option<&CategoryTable>, default_model: &ModelId) -> Result<ClassLabelSet> {
    let f = match read_layout(path)? {
        CocoLayout::Annotations(f) => f,
        CocoLayout::Results(_) => return Err(Error::data(path, "classification labels must use the annotation layout")),
    };
    let categories = match table {
        Some(t) => t.clone(),
        None => table_from_file(path, &f.categories)?,
    };
    let remap = category_remap(path, &f.categories, &categories)?;
    let prob_labels: Vec<CategoryId> = f.categories.iter().map(|c| remap[&c.id]).collect();
    let images = convert_images(path, &f.images)?;
    let known: HashSet<u64> = f.images.iter().map(|im| im.id).collect();

    let labels = f
        .annotations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let at = |msg: String| Error::data(path, format!("annotations[{i}]: {msg}"));
            let category = *remap
                .get(&a.category_id)
                .ok_or_else(|| at(format!("category id {} not declared", a.category_id)))?;
            if !known.contains(&a.image_id) {
                return Err(at(format!("image id {} not declared", a.image_id)));
            }
            let probs = a
                .probs
                .clone()
                .map(|p| {
                    let pv = ProbVector::new(p).map_err(|e| at(e.to_string()))?;
                    ClassProbs::new(prob_labels.clone(), pv).map_err(|e| at(e.to_string()))
                })
                .transpose()?;
            Ok(ClassLabel {
                image: ImageId(a.image_id),
                category,
                model: a.model.as_ref().map_or_else(|| default_model.clone(), ModelId::new),
                probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassLabelSet {
        images,
        labels,
        categories,
    })
}

/// Writes image-level labels; distributions are expanded onto the full table.
pub fn write_class_labels(set: &ClassLabelSet, path: &Path) -> Result<()> {
    let annotations = set
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| CocoAnnotation {
            id: Some(i as u64 + 1),
            image_id: l.image.0,
            category_id: l.category.0,
            bbox: None,
            area: None,
            iscrowd: None,
            score: None,
            model: Some(l.model.0.clone()),
            probs: l
                .probs
                .as_ref()
                .map(|p| set.categories.ids().map(|c| p.prob_of(c)).collect()),
        })
        .collect();
    write_atomic(
        path,
        &to_sorted_json(&CocoFile {
            images: coco_images(&set.images),
            annotations,
            categories: coco_categories(&set.categories),
        }),
    )
}

/// One model entry of the registry file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub id: String,
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Predictions file, relative to the registry file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRegistryFile {
    pub models: Vec<RegistryEntry>,
}

impl ModelRegistryFile {
    /// Validates the entries and builds the unified category table as the
    /// union of all models' categories, in first-appearance order.
    pub fn to_registry(&self) -> Result<Registry> {
        let mut table = CategoryTable::new();
        let mut specs = Vec::with_capacity(self.models.len());
        for (i, m) in self.models.iter().enumerate() {
            let at = |msg: String| Error::Config(format!("models[{i}] (`{}`): {msg}", m.id));
            if m.id.is_empty() {
                return Err(at("empty model id".into()));
            }
            if m.categories.is_empty() {
                return Err(at("empty category list".into()));
            }
            let mut seen = BTreeSet::new();
            for c in &m.categories {
                if !seen.insert(table.insert(c.as_str())) {
                    return Err(at(format!("category `{c}` listed twice")));
                }
            }
            specs.push(ModelSpec::new(ModelId::new(&m.id), seen, m.endpoint.clone())?);
        }
        Registry::new(specs, table)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedRegistry {
    pub file: ModelRegistryFile,
    pub registry: Registry,
    base_dir: PathBuf,
}

impl LoadedRegistry {
    /// Predictions path of a model, resolved against the registry's directory.
    pub fn predictions_path(&self, model: &ModelId) -> Option<PathBuf> {
        self.file
            .models
            .iter()
            .find(|m| m.id == model.0)
            .and_then(|m| m.predictions.as_ref())
            .map(|p| self.base_dir.join(p))
    }
}

pub fn load_registry(path: &Path) -> Result<LoadedRegistry> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelRegistryFile =
        serde_json::from_str(&text).map_err(|e| Error::data(path, format!("malformed registry: {e}")))?;
    let registry = file.to_registry().map_err(|e| Error::data(path, e.to_string()))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedRegistry {
        file,
        registry,
        base_dir,
    })
}

pub fn write_registry(file: &ModelRegistryFile, path: &Path) -> Result<()> {
    write_atomic(path, &to_sorted_json(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn gt() -> ModelId {
        ModelId::new(GROUND_TRUTH_MODEL)
    }

    const MINIMAL: &str = r#"{
        "images": [{"id": 7, "width": 64, "height": 48, "file_name": "a.jpg"}],
        "annotations": [{"id": 1, "image_id": 7, "category_id": 3, "bbox": [0, 0, 10, 10]}],
        "categories": [{"id": 3, "name": "car"}]
    }"#;

    #[test]
    fn loads_minimal_file() {
        let dir = TempDir::new().unwrap();
        let set = load_coco(&write(&dir, "m.json", MINIMAL), None, &gt()).unwrap();
        assert_eq!(set.images.len(), 1);
        assert_eq!(set.images[0].uri.as_deref(), Some("a.jpg"));
        assert_eq!(set.detections.len(), 1);
        let d = &set.detections[0];
        assert_eq!(d.bbox, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        assert_eq!(set.categories.name_of(d.category), Some("car"));
        assert_eq!(d.score, 1.0);
        assert_eq!(d.model, gt());
    }

    #[test]
    fn remaps_categories_by_name() {
        let dir = TempDir::new().unwrap();
        let table = CategoryTable::from_names(["bus", "car"]).unwrap();
        let set = load_coco(&write(&dir, "m.json", MINIMAL), Some(&table), &gt()).unwrap();
        assert_eq!(set.detections[0].category, CategoryId(2));
    }

    #[test]
    fn rejects_unknown_category_name() {
        let dir = TempDir::new().unwrap();
        let table = CategoryTable::from_names(["bus"]).unwrap();
        let err = load_coco(&write(&dir, "m.json", MINIMAL), Some(&table), &gt()).unwrap_err();
        assert!(err.to_string().contains("`car`"), "{err}");
    }

    #[test]
    fn rejects_bad_records_with_position() {
        let dir = TempDir::new().unwrap();
        let degenerate = MINIMAL.replace("[0, 0, 10, 10]", "[0, 0, 0, 10]");
        let err = load_coco(&write(&dir, "d.json", &degenerate), None, &gt()).unwrap_err();
        assert!(err.to_string().contains("annotations[0]"), "{err}");
        let err = load_coco(&write(&dir, "x.json", "{\"images\": ["), None, &gt()).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
        let stray = MINIMAL.replace("\"image_id\": 7", "\"image_id\": 8");
        assert!(load_coco(&write(&dir, "s.json", &stray), None, &gt()).is_err());
        let score = MINIMAL.replace("\"bbox\"", "\"score\": 1.5, \"bbox\"");
        assert!(load_coco(&write(&dir, "sc.json", &score), None, &gt()).is_err());
        assert!(matches!(
            load_coco(&dir.path().join("missing.json"), None, &gt()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn reads_results_layout() {
        let dir = TempDir::new().unwrap();
        let table = CategoryTable::from_names(["car", "bus"]).unwrap();
        let p = write(
            &dir,
            "r.json",
            r#"[{"image_id": 1, "category_id": 2, "bbox": [1, 2, 3, 4], "score": 0.25}]"#,
        );
        let set = load_coco(&p, Some(&table), &ModelId::new("m")).unwrap();
        assert_eq!(set.detections[0].category, CategoryId(2));
        assert_eq!(set.detections[0].score, 0.25);
        assert!(load_coco(&p, None, &gt()).is_err());
        let bad = write(&dir, "b.json", r#"[{"image_id": 1, "category_id": 9, "bbox": [1, 2, 3, 4]}]"#);
        assert!(load_coco(&bad, Some(&table), &gt()).is_err());
    }

    #[test]
    fn empty_set_writes_valid_file() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("empty.json");
        let set = PseudoLabelSet {
            images: vec![],
            detections: vec![],
            categories: CategoryTable::new(),
        };
        write_coco(&set, &p).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        assert_eq!(v["annotations"], serde_json::json!([]));
        assert_eq!(load_coco(&p, None, &gt()).unwrap(), set);
    }

    #[test]
    fn registry_builds_union_table() {
        let dir = TempDir::new().unwrap();
        let p = write(
            &dir,
            "reg.json",
            r#"{"models": [
                {"id": "transport", "categories": ["car", "bus", "person"], "predictions": "t.json"},
                {"id": "sports", "categories": ["person", "ball"]},
                {"id": "home", "categories": ["chair", "person"], "endpoint": "http://localhost:1/predict"}
            ]}"#,
        );
        let loaded = load_registry(&p).unwrap();
        let names: Vec<_> = loaded.registry.categories().iter().map(|(_, n)| n.to_owned()).collect();
        assert_eq!(names, ["car", "bus", "person", "ball", "chair"]);
        let sports = loaded.registry.model(&ModelId::new("sports")).unwrap();
        assert_eq!(sports.categories.len(), 2);
        assert_eq!(
            loaded.predictions_path(&ModelId::new("transport")),
            Some(dir.path().join("t.json"))
        );
        assert_eq!(loaded.predictions_path(&ModelId::new("home")), None);

        let out = dir.path().join("reg2.json");
        write_registry(&loaded.file, &out).unwrap();
        assert_eq!(load_registry(&out).unwrap().file, loaded.file);
    }

    #[test]
    fn registry_validation_errors() {
        let dir = TempDir::new().unwrap();
        let dup = write(&dir, "d.json", r#"{"models": [{"id": "a", "categories": ["x"]}, {"id": "a", "categories": ["y"]}]}"#);
        assert!(load_registry(&dup).is_err());
        let empty = write(&dir, "e.json", r#"{"models": [{"id": "a", "categories": []}]}"#);
        assert!(load_registry(&empty).is_err());
        let twice = write(&dir, "t.json", r#"{"models": [{"id": "a", "categories": ["x", "x"]}]}"#);
        assert!(load_registry(&twice).is_err());
        assert!(matches!(load_registry(&dir.path().join("nope.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn class_labels_round_trip() {
        let dir = TempDir::new().unwrap();
        let p = write(
            &dir,
            "c.json",
            r#"{
                "images": [{"id": 1, "width": 8, "height": 8}, {"id": 2, "width": 8, "height": 8}],
                "annotations": [
                    {"image_id": 1, "category_id": 5, "probs": [0.9, 0.1]},
                    {"image_id": 2, "category_id": 6, "model": "other"}
                ],
                "categories": [{"id": 5, "name": "cat"}, {"id": 6, "name": "dog"}]
            }"#,
        );
        let set = load_class_labels(&p, None, &ModelId::new("m")).unwrap();
        assert_eq!(set.labels.len(), 2);
        assert_eq!(set.labels[0].probs.as_ref().unwrap().prob_of(CategoryId(1)), 0.9);
        assert_eq!(set.labels[1].model.as_str(), "other");
        let out = dir.path().join("c2.json");
        write_class_labels(&set, &out).unwrap();
        assert_eq!(load_class_labels(&out, None, &ModelId::new("z")).unwrap(), set);
    }

    fn arb_set() -> impl Strategy<Value = PseudoLabelSet> {
        let det = (1u64..5, 1u32..4, -1e3..1e3f64, -1e3..1e3f64, 1e-3..1e3f64, 1e-3..1e3f64, 0.0..=1.0f64, 0usize..3);
        prop::collection::vec(det, 0..25).prop_map(|raw| {
            let categories = CategoryTable::from_names(["a", "b", "c"]).unwrap();
            let images = (1..5).map(|i| ImageRef::new(ImageId(i), 640, 480, None).unwrap()).collect();
            let detections = raw
                .into_iter()
                .map(|(img, c, x, y, w, h, s, m)| Detection {
                    image: ImageId(img),
                    bbox: BBox::new(x, y, w, h).unwrap(),
                    category: CategoryId(c),
                    score: s,
                    model: ModelId::new(["m0", "m1", "m2"][m]),
                })
                .collect();
            PseudoLabelSet { images, detections, categories }
        })
    }

    proptest! {
        #[test]
        fn coco_round_trip_is_exact_and_deterministic(set in arb_set()) {
            let dir = TempDir::new().unwrap();
            let p = dir.path().join("s.json");
            write_coco(&set, &p).unwrap();
            let first = fs::read(&p).unwrap();
            let back = load_coco(&p, Some(&set.categories), &gt()).unwrap();
            prop_assert_eq!(&back, &set);
            write_coco(&back, &p).unwrap();
            prop_assert_eq!(fs::read(&p).unwrap(), first);
        }
    }
}
