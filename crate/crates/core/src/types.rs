//! Domain types shared by every stage of the pipeline.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Identifier of an image in the corpus (COCO `image_id`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Stable identifier of an input model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub String);

impl ModelId {
    pub fn new(id: impl Into<String>) -> Self {
        ModelId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Numeric category id in the unified category table. Ids start at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bijective name <-> id table. Ids are assigned densely from 1 in insertion
/// order, so the table built from the same names in the same order is always
/// identical.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryTable {
    names: Vec<String>,
    by_name: HashMap<String, CategoryId>,
}

impl CategoryTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a table from distinct names. Duplicates are an error.
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut table = CategoryTable::new();
        for name in names {
            let name = name.into();
            if table.id_of(&name).is_some() {
                return Err(Error::Config(format!("duplicate category name `{name}`")));
            }
            table.insert(name);
        }
        Ok(table)
    }

    /// Returns the id for `name`, adding it if absent.
    pub fn insert(&mut self, name: impl Into<String>) -> CategoryId {
        let name = name.into();
        if let Some(id) = self.by_name.get(&name) {
            return *id;
        }
        let id = CategoryId(self.names.len() as u32 + 1);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn id_of(&self, name: &str) -> Option<CategoryId> {
        self.by_name.get(name).copied()
    }

    pub fn name_of(&self, id: CategoryId) -> Option<&str> {
        let idx = (id.0 as usize).checked_sub(1)?;
        self.names.get(idx).map(String::as_str)
    }

    pub fn contains(&self, id: CategoryId) -> bool {
        self.name_of(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CategoryId, &str)> + '_ {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (CategoryId(i as u32 + 1), n.as_str()))
    }

    pub fn ids(&self) -> impl Iterator<Item = CategoryId> + '_ {
        (1..=self.names.len() as u32).map(CategoryId)
    }

    /// Display helper that falls back to the numeric id.
    pub fn label(&self, id: CategoryId) -> String {
        self.name_of(id)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("#{id}"))
    }
}

/// One model's claim about one object.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image: ImageId,
    pub bbox: BBox,
    pub category: CategoryId,
    pub score: f64,
    pub model: ModelId,
}

impl Detection {
    pub fn new(
        image: ImageId,
        bbox: BBox,
        category: CategoryId,
        score: f64,
        model: ModelId,
    ) -> Result<Self> {
        check_score(score)?;
        Ok(Detection {
            image,
            bbox,
            category,
            score,
            model,
        })
    }
}

pub(crate) fn check_score(score: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Config(format!("score {score} outside [0, 1]")));
    }
    Ok(())
}

/// A registered input model and the categories it can emit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub id: ModelId,
    pub categories: BTreeSet<CategoryId>,
    pub endpoint: Option<String>,
}

impl ModelSpec {
    pub fn new(
        id: ModelId,
        categories: BTreeSet<CategoryId>,
        endpoint: Option<String>,
    ) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Config(format!("model `{id}` declares no categories")));
        }
        Ok(ModelSpec {
            id,
            categories,
            endpoint,
        })
    }

    pub fn supports(&self, category: CategoryId) -> bool {
        self.categories.contains(&category)
    }
}

/// An image of the unlabeled corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub uri: Option<String>,
}

impl ImageRef {
    pub fn new(id: ImageId, width: u32, height: u32, uri: Option<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("image {id} has zero extent")));
        }
        Ok(ImageRef {
            id,
            width,
            height,
            uri,
        })
    }
}

/// The set of input models together with the unified category table.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    models: Vec<ModelSpec>,
    categories: CategoryTable,
}

impl Registry {
    pub fn new(models: Vec<ModelSpec>, categories: CategoryTable) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for m in &models {
            if !seen.insert(&m.id) {
                return Err(Error::Config(format!("duplicate model id `{}`", m.id)));
            }
            if m.categories.is_empty() {
                return Err(Error::Config(format!("model `{}` declares no categories", m.id)));
            }
            if let Some(c) = m.categories.iter().find(|c| !categories.contains(**c)) {
                return Err(Error::Config(format!(
                    "model `{}` references category id {c} missing from the category table",
                    m.id
                )));
            }
        }
        Ok(Registry { models, categories })
    }

    /// Builds a registry from `(model id, category names)` pairs, assigning
    /// unified ids in first-appearance order.
    pub fn from_names<'a, I, C>(models: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, C)>,
        C: IntoIterator<Item = &'a str>,
    {
        let mut table = CategoryTable::new();
        let mut specs = Vec::new();
        for (id, cats) in models {
            let set = cats.into_iter().map(|n| table.insert(n)).collect();
            specs.push(ModelSpec::new(ModelId::new(id), set, None)?);
        }
        Registry::new(specs, table)
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn categories(&self) -> &CategoryTable {
        &self.categories
    }

    pub fn model(&self, id: &ModelId) -> Option<&ModelSpec> {
        self.models.iter().find(|m| &m.id == id)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Checks that the detection's model is registered and supports its category.
    pub fn validate(&self, det: &Detection) -> Result<()> {
        let model = self
            .model(&det.model)
            .ok_or_else(|| Error::UnknownModel(det.model.to_string()))?;
        if !model.supports(det.category) {
            return Err(Error::CategoryOutsideModel {
                model: det.model.to_string(),
                category: self.categories.label(det.category),
            });
        }
        Ok(())
    }
}
