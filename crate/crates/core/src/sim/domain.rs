//! Domain definitions: named environment configurations with their widgets,
//! loadable from TOML. The built-in grid-desktop domain ships with the crate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Rect, SimError, SimState, Widget, WidgetKind, WidgetValue};

/// Declarative widget description as written in domain config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidgetSpec {
    pub id: String,
    pub kind: WidgetKind,
    /// `[x, y, w, h]` in screen pixels.
    pub rect: [u32; 4],
    pub label: String,
    /// Initial text for fields.
    #[serde(default)]
    pub text: String,
    /// Initial state for toggles.
    #[serde(default)]
    pub on: bool,
}

impl WidgetSpec {
    fn build(&self) -> Widget {
        let value = match self.kind {
            WidgetKind::Button => WidgetValue::Pressed { pressed: false },
            WidgetKind::TextField => WidgetValue::Text { text: self.text.clone() },
            WidgetKind::Toggle => WidgetValue::On { on: self.on },
            WidgetKind::MenuItem => WidgetValue::Selected { selected: false },
        };
        Widget {
            id: self.id.clone(),
            kind: self.kind,
            rect: Rect { x: self.rect[0], y: self.rect[1], w: self.rect[2], h: self.rect[3] },
            label: self.label.clone(),
            value,
        }
    }
}

/// One environment configuration: the window layout a task starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub config_id: String,
    pub widgets: Vec<WidgetSpec>,
}

/// A domain: a set of configurations sharing one screen geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDomain {
    pub domain_id: String,
    pub screen_extent: (u32, u32),
    /// Screenshots are rasterized at 1/raster_scale resolution.
    pub raster_scale: u32,
    pub workspace_contract: String,
    #[serde(default)]
    pub asset_notes: Vec<String>,
    pub configs: Vec<SimConfig>,
}

impl SimDomain {
    /// The grid-desktop domain embedded in the crate: 6 configurations of
    /// labeled controls.
    pub fn builtin() -> SimDomain {
        let text = include_str!("../../assets/griddesk.toml");
        let domain: SimDomain = toml::from_str(text).expect("embedded domain parses");
        domain.validate().expect("embedded domain is valid");
        domain
    }

    pub fn from_toml_path(path: &Path) -> Result<SimDomain, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::InvalidDomain(format!("{}: {e}", path.display())))?;
        let domain: SimDomain =
            toml::from_str(&text).map_err(|e| SimError::InvalidDomain(e.to_string()))?;
        domain.validate()?;
        Ok(domain)
    }

    /// Structural checks: non-empty configs, unique config ids, rects within
    /// the extent, and labels unique across the whole domain (instructions
    /// name widgets by label, so labels must resolve unambiguously).
    pub fn validate(&self) -> Result<(), SimError> {
        if self.configs.is_empty() {
            return Err(SimError::InvalidDomain("domain has no configs".into()));
        }
        let mut config_ids = std::collections::BTreeSet::new();
        let mut labels = std::collections::BTreeSet::new();
        for config in &self.configs {
            if !config_ids.insert(&config.config_id) {
                return Err(SimError::InvalidDomain(format!(
                    "duplicate config id {}",
                    config.config_id
                )));
            }
            let mut ids = std::collections::BTreeSet::new();
            for w in &config.widgets {
                if !ids.insert(&w.id) {
                    return Err(SimError::InvalidDomain(format!(
                        "duplicate widget id {} in {}",
                        w.id, config.config_id
                    )));
                }
                if !labels.insert(w.label.clone()) {
                    return Err(SimError::InvalidDomain(format!(
                        "label {} reused across the domain",
                        w.label
                    )));
                }
                let [x, y, rw, rh] = w.rect;
                if rw == 0 || rh == 0 || x + rw > self.screen_extent.0 || y + rh > self.screen_extent.1
                {
                    return Err(SimError::InvalidDomain(format!(
                        "widget {} rect outside the screen extent",
                        w.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn config(&self, config_id: &str) -> Result<&SimConfig, SimError> {
        self.configs
            .iter()
            .find(|c| c.config_id == config_id)
            .ok_or_else(|| SimError::UnknownConfig(config_id.to_string()))
    }

    pub fn config_ids(&self) -> Vec<String> {
        self.configs.iter().map(|c| c.config_id.clone()).collect()
    }

    /// Deterministic initial state for a configuration.
    pub fn reset(&self, config_id: &str) -> Result<SimState, SimError> {
        let config = self.config(config_id)?;
        Ok(SimState {
            widgets: config.widgets.iter().map(WidgetSpec::build).collect(),
            focus: None,
            rng_seed: 0,
        })
    }
}
