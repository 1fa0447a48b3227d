//! Scene records, their on-disk layout and edit replay.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use singrav::apps::{
    compose, edit_duplicate, edit_move, edit_remove, harmonize, EditMask, EmptySample, HarmonizeOptions,
};
use singrav::io::{read_json, write_atomic, write_json};
use singrav::pyramid::{GeneratorStack, NoiseStack};
use singrav::volume::{read_sgrv, sgrv_bytes, RadianceVolume};
use uuid::Uuid;

use crate::error::{Result, ServiceError};

/// One applied mutation, with everything needed to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    Remove {
        boxes: Vec<EditMask>,
        empty: EmptySample,
    },
    Duplicate {
        src: EditMask,
        dst: EditMask,
    },
    Move {
        src: EditMask,
        dst: EditMask,
        empty: EmptySample,
    },
    /// Sources are volume snapshots stored under the scene's `sources/` dir.
    Compose {
        sources: Vec<(String, EditMask)>,
        dst: Vec<EditMask>,
    },
    Harmonize {
        options: HarmonizeOptions,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub edit_id: Uuid,
    pub edit: Edit,
}

/// Persisted scene metadata (`scene.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub scene_id: Uuid,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub history: Vec<HistoryEntry>,
    /// Set once a harmonization has folded earlier edits into the volume.
    pub compacted: bool,
}

pub struct SceneData {
    pub meta: SceneMeta,
    pub noise: NoiseStack,
    pub volume: Arc<RadianceVolume>,
    pub hash: String,
}

impl SceneData {
    pub fn new(meta: SceneMeta, noise: NoiseStack, volume: RadianceVolume) -> Self {
        let hash = volume.content_hash();
        Self {
            meta,
            noise,
            volume: Arc::new(volume),
            hash,
        }
    }
}

pub fn scene_dir(root: &Path, id: Uuid) -> PathBuf {
    root.join(id.to_string())
}

pub fn apply_edit(stack: &GeneratorStack, dir: &Path, volume: &RadianceVolume, edit: &Edit) -> Result<RadianceVolume> {
    Ok(match edit {
        Edit::Remove { boxes, empty } => {
            let mut v = volume.clone();
            for b in boxes {
                v = edit_remove(&v, b, *empty)?;
            }
            v
        }
        Edit::Duplicate { src, dst } => edit_duplicate(volume, src, dst)?,
        Edit::Move { src, dst, empty } => edit_move(volume, src, dst, *empty)?,
        Edit::Compose { sources, dst } => {
            let loaded = sources
                .iter()
                .map(|(file, _)| load_volume(&dir.join(file)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<(&RadianceVolume, EditMask)> =
                loaded.iter().zip(sources).map(|(v, (_, m))| (v, *m)).collect();
            compose(&refs, volume, dst)?
        }
        Edit::Harmonize { options } => harmonize(stack, volume, options)?,
    })
}

pub fn load_volume(path: &Path) -> Result<RadianceVolume> {
    let f = std::fs::File::open(path).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
    Ok(read_sgrv(std::io::BufReader::new(f))?)
}

pub fn save_scene(root: &Path, data: &SceneData) -> Result<()> {
    let dir = scene_dir(root, data.meta.scene_id);
    std::fs::create_dir_all(&dir).map_err(|e| ServiceError::Internal(format!("{}: {e}", dir.display())))?;
    data.noise.save(&dir.join("noise.safetensors"))?;
    write_atomic(&dir.join("volume.sgrv"), &sgrv_bytes(&data.volume))?;
    write_json(&dir.join("scene.json"), &data.meta)?;
    Ok(())
}

/// Replays the history over a freshly generated base volume.
pub fn replay(stack: &GeneratorStack, dir: &Path, noise: &NoiseStack, history: &[HistoryEntry]) -> Result<RadianceVolume> {
    let mut v = stack.sample_volume(noise)?;
    for h in history {
        v = apply_edit(stack, dir, &v, &h.edit)?;
    }
    Ok(v)
}

/// Loads a scene directory and checks that replay reproduces the stored volume.
pub fn load_scene(stack: &GeneratorStack, dir: &Path) -> Result<SceneData> {
    let meta: SceneMeta = read_json(&dir.join("scene.json"))?;
    let noise = NoiseStack::load(&dir.join("noise.safetensors"))?;
    let stored = load_volume(&dir.join("volume.sgrv"))?;
    let replayed = replay(stack, dir, &noise, &meta.history)?;
    if replayed != stored {
        return Err(ServiceError::Internal(format!(
            "scene {}: replaying {} edits does not reproduce the stored volume",
            meta.scene_id,
            meta.history.len()
        )));
    }
    Ok(SceneData::new(meta, noise, stored))
}
