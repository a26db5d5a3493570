//! Offline backend that answers pipeline prompts from a scene file.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Stage};
use crate::inventory::{embedded_inventories, inventory_to_json};
use crate::model::ObjectEntry;

/// Prompt-token surcharge per attached image.
pub const IMAGE_TOKENS: u64 = 85;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub images: BTreeMap<String, SceneImage>,
    /// Canned single-stage replies keyed by pair id.
    #[serde(default)]
    pub single_stage_replies: BTreeMap<String, Vec<String>>,
}

impl SceneFile {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Mock(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Mock(format!("{}: {e}", path.display())))
    }
}

pub struct MockBackend {
    scene: SceneFile,
    max_objects: usize,
}

fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

fn same_label(a: &str, b: &str) -> bool {
    a.to_lowercase() == b.to_lowercase()
}

fn same_descriptors(a: &ObjectEntry, b: &ObjectEntry) -> bool {
    let x: HashSet<&String> = a.descriptors.iter().collect();
    let y: HashSet<&String> = b.descriptors.iter().collect();
    x == y
}

// Pairs each `after` object with the first unused `before` object of the same label.
fn match_objects(before: &[ObjectEntry], after: &[ObjectEntry]) -> Vec<Option<usize>> {
    let mut used = vec![false; before.len()];
    after
        .iter()
        .map(|t| {
            let hit =
                (0..before.len()).find(|&i| !used[i] && same_label(&before[i].label, &t.label));
            if let Some(i) = hit {
                used[i] = true;
            }
            hit
        })
        .collect()
}

/// Deterministic difference captions between two inventories.
pub fn diff_captions(before: &[ObjectEntry], after: &[ObjectEntry]) -> Vec<String> {
    let matches = match_objects(before, after);
    let matched: HashSet<usize> = matches.iter().flatten().copied().collect();
    let mut out = Vec::new();
    for (i, s) in before.iter().enumerate() {
        if !matched.contains(&i) {
            out.push(format!("Remove the {}.", s.label.to_lowercase()));
        }
    }
    for (t, m) in after.iter().zip(&matches) {
        let label = t.label.to_lowercase();
        match m {
            None => match t.descriptors.first() {
                Some(d) => out.push(format!("Add a {label} that is {d}.")),
                None => out.push(format!("Add a {label}.")),
            },
            Some(i) if !same_descriptors(&before[*i], t) => {
                let fresh = t
                    .descriptors
                    .iter()
                    .find(|d| !before[*i].descriptors.contains(d));
                match fresh {
                    Some(d) => out.push(format!("Change the {label} so that it is {d}.")),
                    None => out.push(format!("Change the {label}.")),
                }
            }
            Some(_) => {}
        }
    }
    out
}

impl MockBackend {
    pub fn new(scene: SceneFile, max_objects: usize) -> Self {
        Self { scene, max_objects }
    }

    pub fn from_path(path: &Path, max_objects: usize) -> Result<Self, BackendError> {
        Ok(Self::new(SceneFile::load(path)?, max_objects))
    }

    fn objects(&self, image_id: &str) -> Result<&[ObjectEntry], BackendError> {
        let img =
            self.scene.images.get(image_id).ok_or_else(|| {
                BackendError::Mock(format!("image {image_id:?} not in scene file"))
            })?;
        Ok(&img.objects[..img.objects.len().min(self.max_objects)])
    }

    // Splits `q__t` at the separator where both halves are scene images.
    fn split_pair_id(&self, pair_id: &str) -> Option<(String, String)> {
        pair_id.match_indices("__").find_map(|(i, _)| {
            let (q, t) = (&pair_id[..i], &pair_id[i + 2..]);
            (self.scene.images.contains_key(q) && self.scene.images.contains_key(t))
                .then(|| (q.to_string(), t.to_string()))
        })
    }

    fn resolve(&self, req: &ChatRequest) -> Result<(Stage, String, Vec<String>), BackendError> {
        let unknown = || {
            BackendError::Mock(format!(
                "cannot tell stage and images of request {:?}",
                req.request_id
            ))
        };
        if let (Some(stage), Some(pair)) = (req.meta.stage, &req.meta.pair_id) {
            return Ok((stage, pair.clone(), req.meta.image_ids.clone()));
        }
        let mut parts = req.request_id.rsplitn(3, ':');
        let (_attempt, stage, pair) = (parts.next(), parts.next(), parts.next());
        let stage: Stage = stage.and_then(|s| s.parse().ok()).ok_or_else(unknown)?;
        let pair = pair.ok_or_else(unknown)?.to_string();
        let (q, t) = self.split_pair_id(&pair).ok_or_else(unknown)?;
        let images = match stage {
            Stage::Stage1 => vec![q],
            Stage::Stage2 => vec![t],
            Stage::Stage3 => vec![],
            Stage::SingleStage => vec![q, t],
        };
        Ok((stage, pair, images))
    }

    fn image(images: &[String], i: usize) -> Result<&str, BackendError> {
        images
            .get(i)
            .map(String::as_str)
            .ok_or_else(|| BackendError::Mock("request names too few images".into()))
    }

    fn reply(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let (stage, pair_id, images) = self.resolve(req)?;
        let prompt = req.all_text();
        match stage {
            Stage::Stage1 => Ok(inventory_to_json(self.objects(Self::image(&images, 0)?)?)),
            Stage::Stage2 => {
                let target = self.objects(Self::image(&images, 0)?)?;
                let found = embedded_inventories(&prompt);
                let before = found.first().ok_or_else(|| {
                    BackendError::Mock("stage-2 prompt carries no inventory".into())
                })?;
                let matches = match_objects(before, target);
                let out: Vec<ObjectEntry> = target
                    .iter()
                    .zip(matches)
                    .map(|(t, m)| match m {
                        Some(i) if same_descriptors(&before[i], t) => ObjectEntry {
                            label: t.label.clone(),
                            descriptors: before[i].descriptors.clone(),
                        },
                        _ => t.clone(),
                    })
                    .collect();
                Ok(inventory_to_json(&out))
            }
            Stage::Stage3 => {
                let found = embedded_inventories(&prompt);
                if found.len() < 2 {
                    return Err(BackendError::Mock(
                        "stage-3 prompt needs two inventories".into(),
                    ));
                }
                Ok(serde_json::to_string(&diff_captions(&found[0], &found[1]))
                    .expect("strings serialize"))
            }
            Stage::SingleStage => {
                let captions = match self.scene.single_stage_replies.get(&pair_id) {
                    Some(c) => c.clone(),
                    None => diff_captions(
                        self.objects(Self::image(&images, 0)?)?,
                        self.objects(Self::image(&images, 1)?)?,
                    ),
                };
                Ok(serde_json::to_string(&captions).expect("strings serialize"))
            }
        }
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let text = self.reply(req)?;
        Ok(ChatResponse {
            request_id: req.request_id.clone(),
            prompt_tokens: estimate_tokens(&req.all_text())
                + IMAGE_TOKENS * req.image_count() as u64,
            output_tokens: estimate_tokens(&text),
            text,
        })
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}
