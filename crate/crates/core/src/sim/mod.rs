//! Deterministic grid-desktop simulator.
//!
//! A state is a fixed set of labeled widgets (toggles, buttons, text fields,
//! menu items) plus an optional focus. The transition function is pure:
//! clicking toggles/presses/focuses the widget whose rectangle contains the
//! point, typing appends to the focused field, and everything else is an
//! explicit no-op, mirroring how real GUIs swallow stray input. Screenshots
//! are deterministic grayscale rasterizations; their identifier is the state
//! hash, so identical states deduplicate in the store.

mod domain;
mod policy;
mod tasks;

pub use domain::{SimConfig, SimDomain, WidgetSpec};
pub use policy::{plan_for_instruction, PlanStep, ScriptedPolicy, ScriptedPolicyConfig};
pub use tasks::{
    enumerate_instructions, parse_instruction, verify_sim, Criterion, SimTask, TaskTemplate,
};

use std::io::Cursor;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ArgValue, ToolCall};
use crate::hashutil;
use crate::trajectory::{Environment, EnvironmentError, Observation, ScreenshotStore};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown config {0}")]
    UnknownConfig(String),
    #[error("invalid domain definition: {0}")]
    InvalidDomain(String),
    #[error("screenshot store error: {0}")]
    Store(#[from] crate::trajectory::StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Button,
    TextField,
    Toggle,
    MenuItem,
}

impl WidgetKind {
    pub fn noun(&self) -> &'static str {
        match self {
            WidgetKind::Button => "button",
            WidgetKind::TextField => "field",
            WidgetKind::Toggle => "toggle",
            WidgetKind::MenuItem => "menu item",
        }
    }
}

/// Pixel-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn center(&self) -> (u32, u32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }
}

/// Current value of a widget, dependent on its kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WidgetValue {
    Pressed { pressed: bool },
    Text { text: String },
    On { on: bool },
    Selected { selected: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widget {
    pub id: String,
    pub kind: WidgetKind,
    pub rect: Rect,
    pub label: String,
    pub value: WidgetValue,
}

/// Full simulator state. The transition function is a pure function of
/// (state, call); the seed only stamps which rollout family produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimState {
    pub widgets: Vec<Widget>,
    pub focus: Option<String>,
    pub rng_seed: u64,
}

impl SimState {
    pub fn widget(&self, id: &str) -> Option<&Widget> {
        self.widgets.iter().find(|w| w.id == id)
    }

    fn widget_mut(&mut self, id: &str) -> Option<&mut Widget> {
        self.widgets.iter_mut().find(|w| w.id == id)
    }

    fn widget_at(&self, x: u32, y: u32) -> Option<&Widget> {
        self.widgets.iter().find(|w| w.rect.contains(x, y))
    }

    /// Content hash of the state; doubles as the screenshot reference.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("state serializes");
        hashutil::sha256_hex(canonical.as_bytes())
    }
}

/// Pure transition: apply one tool call to a state.
pub fn step(state: &SimState, call: &ToolCall) -> SimState {
    let mut next = state.clone();
    match call {
        ToolCall::Known { name, args } => match name.as_str() {
            "Click" | "DoubleClick" => {
                if let [ArgValue::Coord(x), ArgValue::Coord(y)] = args.as_slice() {
                    if let Some(id) = next.widget_at(*x, *y).map(|w| w.id.clone()) {
                        apply_click(&mut next, &id);
                    }
                }
            }
            "Type" => {
                if let (Some(focus), [ArgValue::Text(text)]) =
                    (next.focus.clone(), args.as_slice())
                {
                    if let Some(widget) = next.widget_mut(&focus) {
                        if let WidgetValue::Text { text: existing } = &mut widget.value {
                            existing.push_str(text);
                        }
                    }
                }
            }
            "Key" => {
                if let [ArgValue::Key(k)] = args.as_slice() {
                    if k == "esc" {
                        next.focus = None;
                    }
                }
            }
            // Hovers, drags, chords, waits, and terminals leave state alone.
            _ => {}
        },
        ToolCall::Quarantined { .. } => {}
    }
    next
}

fn apply_click(state: &mut SimState, id: &str) {
    let mut new_focus = None;
    if let Some(widget) = state.widget_mut(id) {
        match widget.kind {
            WidgetKind::Button => widget.value = WidgetValue::Pressed { pressed: true },
            WidgetKind::Toggle => {
                if let WidgetValue::On { on } = widget.value {
                    widget.value = WidgetValue::On { on: !on };
                }
            }
            WidgetKind::TextField => new_focus = Some(widget.id.clone()),
            WidgetKind::MenuItem => widget.value = WidgetValue::Selected { selected: true },
        }
    }
    if let Some(focus) = new_focus {
        state.focus = Some(focus);
    }
}

/// Deterministic grayscale rasterization of a state at `1/raster_scale`
/// resolution. Widget shade encodes kind and value; the focused widget gets a
/// bright outline; field text perturbs the interior so typing is visible to
/// the embedder.
pub fn render(state: &SimState, extent: (u32, u32), raster_scale: u32) -> (Vec<u8>, u32, u32) {
    let scale = raster_scale.max(1);
    let w = (extent.0 / scale).max(1);
    let h = (extent.1 / scale).max(1);
    let mut pixels = vec![32u8; (w * h) as usize];
    for widget in &state.widgets {
        let shade = widget_shade(widget);
        let x0 = widget.rect.x / scale;
        let y0 = widget.rect.y / scale;
        let x1 = ((widget.rect.x + widget.rect.w) / scale).min(w.saturating_sub(1));
        let y1 = ((widget.rect.y + widget.rect.h) / scale).min(h.saturating_sub(1));
        let focused = state.focus.as_deref() == Some(widget.id.as_str());
        for y in y0..=y1.max(y0) {
            for x in x0..=x1.max(x0) {
                let border = y == y0 || y == y1 || x == x0 || x == x1;
                let value = if border {
                    if focused {
                        255
                    } else {
                        label_shade(&widget.label)
                    }
                } else {
                    shade
                };
                pixels[(y * w + x) as usize] = value;
            }
        }
    }
    (pixels, w, h)
}

fn widget_shade(widget: &Widget) -> u8 {
    match (&widget.kind, &widget.value) {
        (WidgetKind::Button, WidgetValue::Pressed { pressed }) => {
            if *pressed {
                210
            } else {
                96
            }
        }
        (WidgetKind::Toggle, WidgetValue::On { on }) => {
            if *on {
                224
            } else {
                64
            }
        }
        (WidgetKind::MenuItem, WidgetValue::Selected { selected }) => {
            if *selected {
                240
            } else {
                128
            }
        }
        (WidgetKind::TextField, WidgetValue::Text { text }) => {
            if text.is_empty() {
                160
            } else {
                // Fold the text into the interior shade so typed content
                // changes the rendering.
                168u8.wrapping_add((hashutil::derive_seed(&[text]) % 80) as u8)
            }
        }
        // Mismatched kind/value pairs cannot be built through the domain
        // loader; render them dark if they ever appear.
        _ => 16,
    }
}

fn label_shade(label: &str) -> u8 {
    48u8.wrapping_add((hashutil::derive_seed(&[label]) % 160) as u8)
}

/// PNG-encode a grayscale buffer (used for stored screenshots and the
/// `--render png` debug flag).
pub fn encode_png(pixels: &[u8], w: u32, h: u32) -> Vec<u8> {
    let img = image::GrayImage::from_raw(w, h, pixels.to_vec()).expect("buffer matches size");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encoding");
    out.into_inner()
}

/// One exclusive environment session over a config's state, persisting
/// screenshots to the store.
pub struct SimEnvironment {
    domain_id: String,
    state: SimState,
    extent: (u32, u32),
    raster_scale: u32,
    store: Arc<ScreenshotStore>,
}

impl SimEnvironment {
    pub fn new(
        domain: &SimDomain,
        config_id: &str,
        store: Arc<ScreenshotStore>,
    ) -> Result<Self, SimError> {
        let state = domain.reset(config_id)?;
        Ok(SimEnvironment {
            domain_id: domain.domain_id.clone(),
            state,
            extent: domain.screen_extent,
            raster_scale: domain.raster_scale,
            store,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }
}

impl Environment for SimEnvironment {
    fn observe(&mut self, step_index: u32) -> Result<Observation, EnvironmentError> {
        let hash = self.state.hash();
        if !self.store.contains(&self.domain_id, &hash) {
            let (pixels, w, h) = render(&self.state, self.extent, self.raster_scale);
            let png = encode_png(&pixels, w, h);
            self.store
                .put(&self.domain_id, &hash, &png)
                .map_err(|e| EnvironmentError::Fault(e.to_string()))?;
        }
        Ok(Observation { step_index, screenshot_ref: hash, feature_vec: None })
    }

    fn apply(&mut self, call: &ToolCall) -> Result<(), EnvironmentError> {
        self.state = step(&self.state, call);
        Ok(())
    }
}
