//! Column schema shared by the dataset, the model and the service.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: ColumnKind,
}

/// Covariates (continuous or binary), binary treatment flags, and the time
/// and event columns. Column order in CSV files is covariates, treatments,
/// time, event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<Covariate>,
    pub treatments: Vec<String>,
    pub time: String,
    pub event: String,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema needs at least one {0}")]
    Empty(&'static str),
    #[error("duplicate column name {0:?}")]
    Duplicate(String),
    #[error("cannot read schema file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed schema file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize schema: {0}")]
    Serialize(#[from] toml::ser::Error),
}

/// Default treatment columns: intensive chemotherapy and radiation therapy.
pub const DEFAULT_TREATMENTS: [&str; 2] = ["intensive_chemo", "radiation"];

impl Schema {
    pub fn new(
        covariates: Vec<Covariate>,
        treatments: Vec<String>,
        time: impl Into<String>,
        event: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        let schema = Self {
            covariates,
            treatments,
            time: time.into(),
            event: event.into(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.covariates.is_empty() {
            return Err(SchemaError::Empty("covariate"));
        }
        if self.treatments.is_empty() {
            return Err(SchemaError::Empty("treatment"));
        }
        let mut seen = HashSet::new();
        for name in self.column_names() {
            if !seen.insert(name) {
                return Err(SchemaError::Duplicate(name.to_string()));
            }
        }
        Ok(())
    }

    /// All column names in CSV order.
    pub fn column_names(&self) -> Vec<&str> {
        self.covariates
            .iter()
            .map(|c| c.name.as_str())
            .chain(self.treatments.iter().map(String::as_str))
            .chain([self.time.as_str(), self.event.as_str()])
            .collect()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.treatments.len()
    }

    pub fn kinds(&self) -> Vec<ColumnKind> {
        self.covariates.iter().map(|c| c.kind).collect()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn from_toml(text: &str) -> Result<Self, SchemaError> {
        let schema: Schema = toml::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_toml(&self) -> Result<String, SchemaError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SchemaError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
