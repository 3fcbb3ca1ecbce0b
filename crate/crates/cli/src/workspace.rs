//! On-disk workspace: configs, images, masks, annotations, weights, reports
//! and a manifest tying images to their configuration.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use yolic_core::benchkit::{QuantizedModel, Q8_MAGIC};
use yolic_core::cellgeom::{load_config, validate_config, CellConfig, ConfigError};
use yolic_core::imageio::{decode_pgm, decode_ppm, RgbImage};
use yolic_core::labelkit::{read_annotation, CellLabelVector, ClassIdMask};
use yolic_core::presets::{preset, preset_document};
use yolic_core::yolicnet::{load_weights, YolicModel, WEIGHTS_MAGIC};

use crate::diag::{ToolError, ToolResult};

pub const MANIFEST_VERSION: &str = "yolic-workspace/1";
pub const SUBDIRS: [&str; 6] = ["configs", "images", "masks", "annotations", "weights", "reports"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub images: Vec<ImageEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION.into(),
            images: Vec::new(),
        }
    }
}

/// Parses and validates a configuration document. Every path that accepts
/// a configuration goes through here.
pub fn parse_config(bytes: &[u8]) -> ToolResult<CellConfig> {
    let cfg = load_config(bytes)?;
    let violations = validate_config(&cfg);
    if !violations.is_empty() {
        return Err(ConfigError::Invalid(violations).into());
    }
    Ok(cfg)
}

/// Parses an annotation file against its configuration.
pub fn parse_annotation(bytes: &[u8], cfg: &CellConfig) -> ToolResult<CellLabelVector> {
    Ok(read_annotation(bytes, cfg.layout())?)
}

/// Identifiers become file names, so they are restricted to a safe alphabet.
pub fn check_id(id: &str) -> ToolResult<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(ToolError::validation(format!("invalid identifier {id:?}")))
    }
}

/// Content version used for optimistic concurrency.
pub fn etag(bytes: &[u8]) -> String {
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    format!("\"{:016x}\"", h.finish())
}

/// A loaded model, float or quantized.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Float { model: YolicModel<f32>, config: String },
    Quantized(QuantizedModel),
}

impl LoadedModel {
    pub fn from_bytes(bytes: &[u8]) -> ToolResult<Self> {
        if bytes.starts_with(Q8_MAGIC.as_bytes()) {
            return Ok(Self::Quantized(QuantizedModel::load(bytes)?));
        }
        if bytes.starts_with(WEIGHTS_MAGIC.as_bytes()) {
            let (model, header) = load_weights(bytes, None)?;
            return Ok(Self::Float {
                model,
                config: header.config,
            });
        }
        Err(ToolError::validation("not a weights file"))
    }

    pub fn runtime(&self) -> &YolicModel<f32> {
        match self {
            Self::Float { model, .. } => model,
            Self::Quantized(q) => q.runtime(),
        }
    }

    pub fn config_name(&self) -> &str {
        match self {
            Self::Float { config, .. } => config,
            Self::Quantized(q) => q.config_name(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    /// Opens a workspace, creating missing directories.
    pub fn open(root: impl Into<PathBuf>) -> ToolResult<Self> {
        let ws = Self { root: root.into() };
        for d in SUBDIRS {
            std::fs::create_dir_all(ws.root.join(d))?;
        }
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self, name: &str) -> PathBuf {
        self.root.join("configs").join(format!("{name}.json"))
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.ppm"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.pgm"))
    }

    pub fn annotation_path(&self, id: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{id}.ann"))
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.root.join("weights")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("reports").join("predictions")
    }

    pub fn manifest(&self) -> ToolResult<Manifest> {
        let path = self.root.join("manifest.json");
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let m: Manifest = serde_json::from_slice(&std::fs::read(&path)?)
            .map_err(|e| ToolError::validation(format!("manifest.json: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(ToolError::validation(format!(
                "manifest.json: unsupported version {:?}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save_manifest(&self, m: &Manifest) -> ToolResult<()> {
        let text = serde_json::to_string_pretty(m).expect("manifest serializes");
        write_atomic(&self.root.join("manifest.json"), text.as_bytes())
    }

    pub fn entry(&self, id: &str) -> ToolResult<ImageEntry> {
        check_id(id)?;
        self.manifest()?
            .images
            .into_iter()
            .find(|e| e.id == id)
            .ok_or_else(|| ToolError::not_found(format!("unknown image {id:?}")))
    }

    /// Adds or replaces manifest entries.
    pub fn register(&self, entries: &[ImageEntry]) -> ToolResult<()> {
        let mut m = self.manifest()?;
        for e in entries {
            check_id(&e.id)?;
            match m.images.iter_mut().find(|x| x.id == e.id) {
                Some(x) => *x = e.clone(),
                None => m.images.push(e.clone()),
            }
        }
        self.save_manifest(&m)
    }

    pub fn config_names(&self) -> ToolResult<Vec<String>> {
        let mut names: Vec<String> = std::fs::read_dir(self.root.join("configs"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(String::from))?
            })
            .collect();
        names.sort();
        Ok(names)
    }

    /// Raw bytes of a workspace configuration.
    pub fn config_bytes(&self, name: &str) -> ToolResult<Vec<u8>> {
        check_id(name)?;
        std::fs::read(self.config_path(name)).map_err(|_| ToolError::not_found(format!("unknown config {name:?}")))
    }

    /// Resolves a configuration by file path, workspace name, or shipped
    /// preset name, in that order.
    pub fn resolve_config(&self, spec: &str) -> ToolResult<CellConfig> {
        let as_path = Path::new(spec);
        if spec.ends_with(".json") && as_path.is_file() {
            return parse_config(&std::fs::read(as_path)?).map_err(|e| e.context(spec));
        }
        if check_id(spec).is_ok() && self.config_path(spec).is_file() {
            return parse_config(&std::fs::read(self.config_path(spec))?).map_err(|e| e.context(spec));
        }
        match preset(spec) {
            Some(r) => Ok(r?),
            None => Err(ToolError::not_found(format!(
                "no configuration file, workspace config or preset named {spec:?}"
            ))),
        }
    }

    /// Bytes to store for a preset name, if it is one.
    pub fn preset_bytes(name: &str) -> Option<&'static str> {
        preset_document(name)
    }

    pub fn read_image(&self, id: &str) -> ToolResult<RgbImage> {
        let bytes = std::fs::read(self.image_path(id))
            .map_err(|_| ToolError::not_found(format!("image {id:?} has no image file")))?;
        decode_ppm(&bytes).map_err(|e| ToolError::from(e).context(format!("image {id}")))
    }

    pub fn read_mask(&self, id: &str, n_classes: usize) -> ToolResult<ClassIdMask> {
        let bytes = std::fs::read(self.mask_path(id))
            .map_err(|_| ToolError::not_found(format!("image {id:?} has no mask")))?;
        let (w, h, ids) = decode_pgm(&bytes).map_err(|e| ToolError::from(e).context(format!("mask {id}")))?;
        let mask = ClassIdMask::from_raw(w, h, ids).ok_or_else(|| ToolError::validation(format!("mask {id}: bad size")))?;
        mask.check_classes(n_classes)
            .map_err(|e| ToolError::from(e).context(format!("mask {id}")))?;
        Ok(mask)
    }

    pub fn read_annotation(&self, id: &str, cfg: &CellConfig) -> ToolResult<CellLabelVector> {
        let bytes = std::fs::read(self.annotation_path(id))
            .map_err(|_| ToolError::not_found(format!("image {id:?} has no annotation")))?;
        parse_annotation(&bytes, cfg).map_err(|e| e.context(format!("annotation {id}")))
    }

    /// Manifest entries for one configuration, optionally restricted to ids.
    pub fn images_for(&self, config: &str, ids: &[String]) -> ToolResult<Vec<ImageEntry>> {
        let m = self.manifest()?;
        if ids.is_empty() {
            return Ok(m.images.into_iter().filter(|e| e.config == config).collect());
        }
        ids.iter()
            .map(|id| {
                let e = m
                    .images
                    .iter()
                    .find(|e| &e.id == id)
                    .cloned()
                    .ok_or_else(|| ToolError::not_found(format!("unknown image {id:?}")))?;
                if e.config != config {
                    return Err(ToolError::conflict(format!(
                        "image {id} uses config {}, not {config}",
                        e.config
                    )));
                }
                Ok(e)
            })
            .collect()
    }

    /// The configuration name to use when none was given: the only one
    /// referenced by the manifest.
    pub fn default_config(&self) -> ToolResult<String> {
        let mut names: Vec<String> = self.manifest()?.images.into_iter().map(|e| e.config).collect();
        names.sort();
        names.dedup();
        match names.len() {
            1 => Ok(names.remove(0)),
            0 => Err(ToolError::usage("workspace has no images; pass --config")),
            _ => Err(ToolError::usage(format!(
                "workspace has images for {} configs ({}); pass --config",
                names.len(),
                names.join(", ")
            ))),
        }
    }

    pub fn load_model(&self, path: &Path) -> ToolResult<LoadedModel> {
        let bytes = std::fs::read(path).map_err(|e| ToolError::from(e).context(path.display()))?;
        LoadedModel::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }
}

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> ToolResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
