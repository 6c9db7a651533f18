//! Datasets, secrets and protection targets.
//!
//! A [`SecretMap`] ties examples to the secrets they contain. Which examples
//! hold which secret is treated as public; only the contents are protected,
//! so everything downstream of this module works on incidence structure alone
//! and never looks at payloads (except the trainer).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training example and the secrets it contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    #[serde(rename = "secrets", default)]
    pub secret_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Vec<f64>>,
}

impl ExampleRecord {
    pub fn new<S: Into<String>>(id: S, secrets: &[&str]) -> Self {
        Self {
            id: id.into(),
            secret_ids: secrets.iter().map(|s| s.to_string()).collect(),
            payload: None,
        }
    }

    pub fn with_payload(mut self, payload: Vec<f64>) -> Self {
        self.payload = Some(payload);
        self
    }
}

/// A secret together with its prior `p` and the posterior bound `r` it must
/// not exceed. Requires `0 < p < r <= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecretSpec {
    pub id: String,
    #[serde(rename = "p")]
    pub prior_p: f64,
    #[serde(rename = "r")]
    pub posterior_r: f64,
}

impl SecretSpec {
    pub fn new<S: Into<String>>(id: S, prior_p: f64, posterior_r: f64) -> Result<Self> {
        let spec = Self {
            id: id.into(),
            prior_p,
            posterior_r,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::EmptyId("secret id must be nonempty"));
        }
        let (p, r) = (self.prior_p, self.posterior_r);
        if !(p > 0.0 && p < 1.0) || !(r > 0.0 && r <= 1.0) {
            return Err(Error::ProbabilityOutOfRange {
                id: self.id.clone(),
                p,
                r,
            });
        }
        if r <= p {
            return Err(Error::PosteriorNotAbovePrior {
                id: self.id.clone(),
                p,
                r,
            });
        }
        Ok(())
    }
}

/// Validated bipartite incidence between examples and secrets.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretMap {
    examples: Vec<ExampleRecord>,
    secrets: Vec<SecretSpec>,
    /// For each secret, the sorted indices of the examples containing it.
    incidence: Vec<Vec<usize>>,
    /// For each example, the sorted indices of the secrets it contains.
    example_secrets: Vec<Vec<usize>>,
}

impl SecretMap {
    pub fn new(examples: Vec<ExampleRecord>, secrets: Vec<SecretSpec>) -> Result<Self> {
        let mut secret_index = HashMap::with_capacity(secrets.len());
        for (j, s) in secrets.iter().enumerate() {
            s.validate()?;
            if secret_index.insert(s.id.as_str(), j).is_some() {
                return Err(Error::DuplicateId {
                    kind: "secret",
                    id: s.id.clone(),
                });
            }
        }

        let mut seen = HashSet::with_capacity(examples.len());
        let mut incidence = vec![Vec::new(); secrets.len()];
        let mut example_secrets = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if ex.id.is_empty() {
                return Err(Error::EmptyId("example id must be nonempty"));
            }
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "example",
                    id: ex.id.clone(),
                });
            }
            let mut idx = Vec::with_capacity(ex.secret_ids.len());
            for sid in &ex.secret_ids {
                let j = *secret_index
                    .get(sid.as_str())
                    .ok_or_else(|| Error::UnknownSecret {
                        example: ex.id.clone(),
                        secret: sid.clone(),
                    })?;
                idx.push(j);
                // examples are visited in order, so each list stays sorted
                incidence[j].push(i);
            }
            idx.sort_unstable();
            example_secrets.push(idx);
        }

        for (j, inc) in incidence.iter().enumerate() {
            if inc.is_empty() {
                log::warn!(
                    "secret {:?} appears in no example; its constraint is vacuous",
                    secrets[j].id
                );
            }
        }

        Ok(Self {
            examples,
            secrets,
            incidence,
            example_secrets,
        })
    }

    pub fn examples(&self) -> &[ExampleRecord] {
        &self.examples
    }

    pub fn secrets(&self) -> &[SecretSpec] {
        &self.secrets
    }

    /// Sorted example indices containing secret `j`.
    pub fn incidence(&self, j: usize) -> &[usize] {
        &self.incidence[j]
    }

    pub fn incidence_lists(&self) -> &[Vec<usize>] {
        &self.incidence
    }

    /// Sorted secret indices contained in example `i`.
    pub fn secrets_of(&self, i: usize) -> &[usize] {
        &self.example_secrets[i]
    }

    pub fn num_examples(&self) -> usize {
        self.examples.len()
    }

    pub fn num_secrets(&self) -> usize {
        self.secrets.len()
    }

    pub fn secret_position(&self, id: &str) -> Option<usize> {
        self.secrets.iter().position(|s| s.id == id)
    }

    /// Drops every example that contains no secret, re-indexing incidence.
    pub fn filter_secretless(&self) -> SecretMap {
        let examples: Vec<_> = self
            .examples
            .iter()
            .filter(|e| !e.secret_ids.is_empty())
            .cloned()
            .collect();
        if examples.len() == self.examples.len() {
            return self.clone();
        }
        // already validated, so construction cannot fail
        SecretMap::new(examples, self.secrets.clone()).expect("subset of a valid map")
    }
}

/// Run parameters for calibration and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub batch_target: f64,
    pub rounds: u32,
    pub clip_norm: f64,
    pub lp_constant: f64,
    pub seed: u64,
    #[serde(default)]
    pub drop_secretless: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_target: 64.0,
            rounds: 2000,
            clip_norm: 1.0,
            lp_constant: 1.0,
            seed: 0,
            drop_secretless: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} must be a positive finite number, got {v}"
                )))
            }
        };
        positive("batch_target", self.batch_target)?;
        positive("clip_norm", self.clip_norm)?;
        positive("lp_constant", self.lp_constant)?;
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a JSON-lines manifest, one example per nonblank line.
pub fn parse_manifest(text: &str, context: &str) -> Result<Vec<ExampleRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                context: format!("{context}:{}", n + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_secrets(text: &str, context: &str) -> Result<Vec<SecretSpec>> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })
}

/// Reads a manifest and secrets file and builds a validated [`SecretMap`].
pub fn load_dataset(
    manifest_path: impl AsRef<Path>,
    secrets_path: impl AsRef<Path>,
) -> Result<SecretMap> {
    let (mp, sp) = (manifest_path.as_ref(), secrets_path.as_ref());
    let examples = parse_manifest(&read(mp)?, &mp.display().to_string())?;
    let secrets = parse_secrets(&read(sp)?, &sp.display().to_string())?;
    SecretMap::new(examples, secrets)
}

/// Writes a manifest in the same JSON-lines format [`load_dataset`] reads.
pub fn write_manifest(map: &SecretMap) -> String {
    let mut out = String::new();
    for ex in map.examples() {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn write_secrets(map: &SecretMap) -> String {
    serde_json::to_string_pretty(map.secrets()).expect("secrets serialize")
}
