//! The toy autoregressive policy and per-domain low-rank adapters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Low-rank delta attached to a frozen base: effective logits add `A·B`.
/// Zero-initialized `B` leaves the composed policy identical to the base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterDelta {
    pub domain_id: String,
    pub rank: usize,
    /// V×r factor.
    pub a: Array2<f64>,
    /// r×V factor.
    pub b: Array2<f64>,
}

impl AdapterDelta {
    /// Standard init: seeded Gaussian `A` scaled by 1/sqrt(r), zero `B`.
    pub fn init(domain_id: &str, vocab: usize, rank: usize, seed: u64) -> Self {
        assert!(rank >= 1, "rank must be at least 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (rank as f64).sqrt();
        let a = Array2::from_shape_fn((vocab, rank), |_| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        let b = Array2::zeros((rank, vocab));
        AdapterDelta { domain_id: domain_id.to_string(), rank, a, b }
    }
}

/// Bigram logit table: row = previous token, column = next token. The
/// next-token distribution is the softmax of the (optionally adapter-shifted)
/// row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub base_logits: Array2<f64>,
    pub adapter: Option<AdapterDelta>,
}

impl ToyPolicy {
    /// Uniform policy: all-zero logits.
    pub fn uniform(vocab: usize) -> Self {
        ToyPolicy { base_logits: Array2::zeros((vocab, vocab)), adapter: None }
    }

    /// Seeded random base logits (for tests and verification harnesses).
    pub fn random(vocab: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_logits =
            Array2::from_shape_fn((vocab, vocab), |_| rng.sample::<f64, _>(StandardNormal) * scale);
        ToyPolicy { base_logits, adapter: None }
    }

    pub fn vocab_size(&self) -> usize {
        self.base_logits.nrows()
    }

    pub fn with_adapter(&self, adapter: AdapterDelta) -> Self {
        assert_eq!(adapter.a.nrows(), self.vocab_size(), "adapter vocab must match");
        ToyPolicy { base_logits: self.base_logits.clone(), adapter: Some(adapter) }
    }

    /// Effective logit row for `prev`: base row plus the adapter product.
    pub fn effective_row(&self, prev: u32) -> Array1<f64> {
        let row = self.base_logits.row(prev as usize).to_owned();
        match &self.adapter {
            Some(delta) => row + delta.a.row(prev as usize).dot(&delta.b),
            None => row,
        }
    }

    /// Log-softmax of the effective row, computed with max subtraction.
    pub fn log_probs(&self, prev: u32) -> Array1<f64> {
        let row = self.effective_row(prev);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv(|v| v - log_z)
    }

    pub fn log_prob(&self, prev: u32, next: u32) -> f64 {
        self.log_probs(prev)[next as usize]
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("adapter io error: {0}")]
    Io(String),
    #[error("adapter for {domain_id} has vocab {adapter_vocab}, base has {base_vocab}")]
    VocabMismatch { domain_id: String, adapter_vocab: usize, base_vocab: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryManifest {
    schema_version: String,
    domains: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    domain_id: String,
    rank: usize,
    file: String,
}

const REGISTRY_SCHEMA: &str = "adapters/v1";

/// Per-domain adapter store. The base stays shared and frozen; activating a
/// domain composes exactly that domain's delta.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct AdapterRegistry {
    adapters: BTreeMap<String, AdapterDelta>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, adapter: AdapterDelta) {
        self.adapters.insert(adapter.domain_id.clone(), adapter);
    }

    pub fn domains(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn get(&self, domain_id: &str) -> Option<&AdapterDelta> {
        self.adapters.get(domain_id)
    }

    /// Compose the base with one domain's adapter. Never mutates the base;
    /// switching domains is stateless.
    pub fn activate(&self, base: &ToyPolicy, domain_id: &str) -> Result<ToyPolicy, RegistryError> {
        let adapter = self
            .adapters
            .get(domain_id)
            .ok_or_else(|| RegistryError::UnknownDomain(domain_id.to_string()))?;
        if adapter.a.nrows() != base.vocab_size() {
            return Err(RegistryError::VocabMismatch {
                domain_id: domain_id.to_string(),
                adapter_vocab: adapter.a.nrows(),
                base_vocab: base.vocab_size(),
            });
        }
        Ok(base.with_adapter(adapter.clone()))
    }

    /// Persist one JSON file per domain plus a manifest.
    pub fn save_dir(&self, dir: &Path) -> Result<(), RegistryError> {
        fs::create_dir_all(dir).map_err(|e| RegistryError::Io(e.to_string()))?;
        let mut entries = Vec::new();
        for (domain_id, adapter) in &self.adapters {
            let file = format!("{domain_id}.json");
            let path = dir.join(&file);
            let json = serde_json::to_string(adapter).map_err(|e| RegistryError::Io(e.to_string()))?;
            fs::write(&path, json).map_err(|e| RegistryError::Io(e.to_string()))?;
            entries.push(ManifestEntry { domain_id: domain_id.clone(), rank: adapter.rank, file });
        }
        let manifest =
            RegistryManifest { schema_version: REGISTRY_SCHEMA.to_string(), domains: entries };
        let json =
            serde_json::to_string_pretty(&manifest).map_err(|e| RegistryError::Io(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json).map_err(|e| RegistryError::Io(e.to_string()))
    }

    pub fn load_dir(dir: &Path) -> Result<Self, RegistryError> {
        let manifest_text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| RegistryError::Io(e.to_string()))?;
        let manifest: RegistryManifest =
            serde_json::from_str(&manifest_text).map_err(|e| RegistryError::Io(e.to_string()))?;
        if manifest.schema_version != REGISTRY_SCHEMA {
            return Err(RegistryError::Io(format!(
                "manifest schema {} does not match {REGISTRY_SCHEMA}",
                manifest.schema_version
            )));
        }
        let mut registry = AdapterRegistry::new();
        for entry in manifest.domains {
            let text = fs::read_to_string(dir.join(&entry.file))
                .map_err(|e| RegistryError::Io(e.to_string()))?;
            let adapter: AdapterDelta =
                serde_json::from_str(&text).map_err(|e| RegistryError::Io(e.to_string()))?;
            registry.register(adapter);
        }
        Ok(registry)
    }
}
