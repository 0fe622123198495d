use std::fs;
use std::path::{Path, PathBuf};

use evtrack::events::{parse_event_csv, parse_label_csv, EventSegment, LabelTrack, SensorGeometry};
use evtrack::network::{load_model, save_model, Model, ModelConfig};
use serde::Serialize;

use crate::error::{CliError, Result};

pub const MODEL_CONFIG: &str = "config.json";
pub const MODEL_MANIFEST: &str = "manifest.json";
pub const MODEL_BLOB: &str = "weights.bin";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn input<T>(path: &Path, r: evtrack::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Input {
        path: path.into(),
        source,
    })
}

pub fn read_events(path: &Path, geometry: SensorGeometry) -> Result<EventSegment> {
    input(path, parse_event_csv(&read_bytes(path)?, geometry))
}

pub fn read_labels(path: &Path) -> Result<LabelTrack> {
    input(path, parse_label_csv(&read_bytes(path)?))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

/// Writes JSON to `out`, or to standard output.
pub fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = to_json(value);
    match out {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn save_model_dir(dir: &Path, model: &Model) -> Result<()> {
    create_dir(dir)?;
    let (manifest, blob) = save_model(model);
    write_bytes(&dir.join(MODEL_CONFIG), to_json(model.config()).as_bytes())?;
    write_bytes(&dir.join(MODEL_MANIFEST), manifest.as_bytes())?;
    write_bytes(&dir.join(MODEL_BLOB), &blob)
}

pub fn load_model_dir(dir: &Path) -> Result<Model> {
    let path: PathBuf = dir.join(MODEL_CONFIG);
    let config: ModelConfig = serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::Input {
        path: path.clone(),
        source: e.into(),
    })?;
    let manifest = read_text(&dir.join(MODEL_MANIFEST))?;
    let blob = read_bytes(&dir.join(MODEL_BLOB))?;
    input(dir, load_model(config, &manifest, &blob))
}
