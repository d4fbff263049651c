//! Interactive editing service: HTTP endpoints for sessions, shapes and
//! renders, plus a WebSocket stream of primitive updates per session.

mod server;

use std::fs;
use std::path::{Path, PathBuf};

use dualsdf_core::geometry::{to_geometric_attributes, PrimitiveKind, PrimitiveSet};
use dualsdf_core::manipulate::{RegConfig, StopReason};
use dualsdf_core::nn::{Decoders, NetConfig};
use dualsdf_core::render::{Camera, Image};
use dualsdf_core::vad::{load_checkpoint, TrainState};
use serde::{Deserialize, Serialize};

pub use server::{router, serve, AppState};

/// WebSocket subprotocol spoken on `/sessions/{id}/ws`.
pub const SUBPROTOCOL: &str = "dualsdf.v1";
/// Environment variable that overrides the configured checkpoint.
pub const CHECKPOINT_ENV: &str = "DUALSDF_CHECKPOINT";
/// Camera distance used for every render.
pub const VIEW_DISTANCE: f64 = 3.2;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] dualsdf_core::Error),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub checkpoint: PathBuf,
    pub preview_width: usize,
    pub preview_height: usize,
    pub preview_steps: usize,
    pub final_width: usize,
    pub final_height: usize,
    pub final_steps: usize,
    pub max_sessions: usize,
    pub idle_timeout_secs: u64,
    /// Concurrent fine-level renders.
    pub render_workers: usize,
    /// Directory served under `/ui`.
    pub ui_dir: Option<PathBuf>,
    /// Seed for codes drawn from the prior.
    pub seed: u64,
    /// Manipulation settings; the flat region defaults to the latent width.
    pub manipulation: Option<RegConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            checkpoint: PathBuf::from("final.dsdc"),
            preview_width: 80,
            preview_height: 80,
            preview_steps: 16,
            final_width: 480,
            final_height: 480,
            final_steps: 64,
            max_sessions: 32,
            idle_timeout_secs: 900,
            render_workers: 1,
            ui_dir: None,
            seed: 0,
            manipulation: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, ServiceError> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| ServiceError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Applies `DUALSDF_CHECKPOINT` if set.
    pub fn with_env(mut self) -> Self {
        if let Some(p) = std::env::var_os(CHECKPOINT_ENV) {
            self.checkpoint = PathBuf::from(p);
        }
        self
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let counts = [
            ("preview_width", self.preview_width),
            ("preview_height", self.preview_height),
            ("preview_steps", self.preview_steps),
            ("final_width", self.final_width),
            ("final_height", self.final_height),
            ("final_steps", self.final_steps),
            ("max_sessions", self.max_sessions),
            ("render_workers", self.render_workers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ServiceError::Config {
                    path: PathBuf::new(),
                    message: format!("{name} must be positive"),
                });
            }
        }
        if self.idle_timeout_secs == 0 {
            return Err(ServiceError::Config {
                path: PathBuf::new(),
                message: "idle_timeout_secs must be positive".into(),
            });
        }
        if let Some(r) = &self.manipulation {
            r.validate()?;
        }
        Ok(())
    }
}

/// Trained decoders plus the training shapes' posterior means.
pub struct Model {
    pub config: NetConfig,
    pub decoders: Decoders,
    pub shapes: Vec<(String, Vec<f64>)>,
}

impl Model {
    pub fn from_state(state: &TrainState) -> Result<Self, ServiceError> {
        Ok(Model {
            config: state.config.net.clone(),
            decoders: Decoders::new(&state.config.net, &state.params)?,
            shapes: state
                .shape_ids
                .iter()
                .cloned()
                .zip(state.latents.iter().map(|l| l.mu.clone()))
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        Self::from_state(&load_checkpoint(path)?)
    }

    pub fn latent(&self, id: &str) -> Option<&[f64]> {
        self.shapes.iter().find(|(s, _)| s == id).map(|(_, z)| z.as_slice())
    }
}

/// One primitive in user units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePrimitive {
    pub index: usize,
    pub center: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// All attributes, sizes as lengths.
    pub attributes: Vec<f64>,
}

pub fn wire_primitives(set: &PrimitiveSet) -> Vec<WirePrimitive> {
    let kind = set.kind();
    (0..set.len())
        .map(|i| {
            let prim = set.primitive(i);
            let attributes = to_geometric_attributes(kind, &prim.attributes);
            let radius = match kind {
                PrimitiveKind::Sphere => Some(attributes[3]),
                PrimitiveKind::Capsule => Some(attributes[6]),
                PrimitiveKind::Box => None,
            };
            WirePrimitive {
                index: i,
                center: prim.center().to_array(),
                radius,
                attributes,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderLevel {
    Coarse,
    Fine,
}

/// Frames on a session's WebSocket, as JSON text with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SessionMessage {
    PrimitivesUpdate {
        session_id: String,
        step: usize,
        l_man: Option<f64>,
        l_reg: Option<f64>,
        primitive_kind: PrimitiveKind,
        primitives: Vec<WirePrimitive>,
    },
    StepReport {
        session_id: String,
        step: usize,
        steps: usize,
        initial_l_man: f64,
        l_man: f64,
        l_reg: f64,
        stop: StopReason,
    },
    RenderReady {
        session_id: String,
        step: usize,
        level: RenderLevel,
        width: usize,
        height: usize,
    },
    Error {
        session_id: String,
        message: String,
    },
}

impl SessionMessage {
    pub fn step(&self) -> Option<usize> {
        match self {
            SessionMessage::PrimitivesUpdate { step, .. }
            | SessionMessage::StepReport { step, .. }
            | SessionMessage::RenderReady { step, .. } => Some(*step),
            SessionMessage::Error { .. } => None,
        }
    }
}

pub fn view_camera(width: usize, height: usize) -> Camera {
    Camera::orbit(VIEW_DISTANCE, width, height)
}

/// 8-bit RGB PNG.
pub fn encode_png(image: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("writing to a Vec cannot fail");
        writer
            .write_image_data(&image.raw_rgb())
            .expect("image buffer matches its header");
    }
    out
}
