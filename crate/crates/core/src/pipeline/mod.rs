//! Staged captioning of image pairs: query inventory, target inventory
//! conditioned on the query's, then text-only difference captions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, ChatBackend, ChatRequest, Message, Part, RequestMeta, ResponseFormat, Role, Stage,
};
use crate::model::{ImagePair, ImageRef, ObjectInventory};

pub mod extract;
pub mod templates;

pub use extract::{extract_captions, extract_inventory, CaptionError, ExtractedInventory};
pub use templates::{PromptTemplate, TemplateError, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    #[default]
    ThreeStage,
    SingleStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub template_set: String,
    pub templates_dir: Option<PathBuf>,
    /// Falls back to the template set's own default when unset.
    pub max_objects: Option<usize>,
    /// Extra attempts per stage after an unparseable reply.
    pub parse_retries: u32,
    pub mode: PipelineMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            template_set: "general".into(),
            templates_dir: None,
            max_objects: None,
            parse_retries: 2,
            mode: PipelineMode::ThreeStage,
        }
    }
}

impl PipelineConfig {
    pub fn load_templates(&self) -> Result<TemplateSet, TemplateError> {
        match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir, &self.template_set),
            None => TemplateSet::bundled(&self.template_set),
        }
    }

    pub fn effective_max_objects(&self, set: &TemplateSet) -> usize {
        self.max_objects.unwrap_or(set.default_max_objects)
    }
}

/// Request parameters shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestSettings {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
}

impl Default for RequestSettings {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_output_tokens: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageUsage {
    pub requests: u32,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Ok,
    Failed { stage: Stage, reason: String },
}

impl PairStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, PairStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGenerationResult {
    pub pair_id: String,
    pub query_id: String,
    pub target_id: String,
    pub query_inventory: ObjectInventory,
    pub target_inventory: ObjectInventory,
    pub atomic_captions: Vec<String>,
    pub usage: BTreeMap<Stage, StageUsage>,
    pub status: PairStatus,
}

impl PairGenerationResult {
    fn new(pair: &ImagePair) -> Self {
        Self {
            pair_id: pair.pair_id.clone(),
            query_id: pair.query.id.clone(),
            target_id: pair.target.id.clone(),
            query_inventory: ObjectInventory {
                image_id: pair.query.id.clone(),
                objects: vec![],
            },
            target_inventory: ObjectInventory {
                image_id: pair.target.id.clone(),
                objects: vec![],
            },
            atomic_captions: vec![],
            usage: BTreeMap::new(),
            status: PairStatus::Ok,
        }
    }

    fn fail(mut self, stage: Stage, reason: impl Into<String>) -> Self {
        self.status = PairStatus::Failed {
            stage,
            reason: reason.into(),
        };
        self
    }
}

/// Everything `run_pair` needs besides the pair and the backend.
#[derive(Debug, Clone)]
pub struct PipelineContext {
    pub templates: TemplateSet,
    pub config: PipelineConfig,
    pub request: RequestSettings,
    /// Relative image paths are resolved against this directory.
    pub image_root: PathBuf,
}

impl PipelineContext {
    fn max_objects(&self) -> usize {
        self.config.effective_max_objects(&self.templates)
    }
}

/// Image bytes as a base64 JPEG payload. JPEG files pass through untouched;
/// anything else is decoded and re-encoded.
pub fn load_image_part(path: &Path) -> Result<Part, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let jpeg = if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        bytes
    } else {
        let img =
            image::load_from_memory(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut out = Vec::new();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, 90)
            .encode_image(&img.to_rgb8())
            .map_err(|e| format!("{}: {e}", path.display()))?;
        out
    };
    Ok(Part::ImageData {
        media_type: "image/jpeg".into(),
        base64: base64::engine::general_purpose::STANDARD.encode(jpeg),
    })
}

/// `path` itself when absolute, otherwise `root.join(path)`.
pub fn resolve_image_path(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

struct StageRun<'a, B: ?Sized> {
    backend: &'a B,
    ctx: &'a PipelineContext,
    pair: &'a ImagePair,
}

enum StageFailure {
    Backend(BackendError),
    Parse(String),
}

impl<B: ChatBackend + ?Sized> StageRun<'_, B> {
    /// Sends the stage prompt, retrying on unparseable replies.
    fn run<T>(
        &self,
        result: &mut PairGenerationResult,
        stage: Stage,
        params: &BTreeMap<String, String>,
        images: Vec<(String, Part)>,
        format: ResponseFormat,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, StageFailure> {
        let text = self
            .ctx
            .templates
            .template(stage)
            .render(params)
            .map_err(|e| StageFailure::Parse(format!("template: {e}")))?;
        let (image_ids, image_parts): (Vec<String>, Vec<Part>) = images.into_iter().unzip();
        let mut parts = vec![Part::Text(text)];
        parts.extend(image_parts);
        let messages = vec![Message {
            role: Role::User,
            parts,
        }];
        let mut last = String::new();
        for attempt in 0..=self.ctx.config.parse_retries {
            let req = ChatRequest {
                request_id: format!("{}:{}:{attempt}", self.pair.pair_id, stage),
                model: self.ctx.request.model.clone(),
                messages: messages.clone(),
                response_format: format,
                max_output_tokens: self.ctx.request.max_output_tokens,
                temperature: self.ctx.request.temperature,
                meta: RequestMeta {
                    pair_id: Some(self.pair.pair_id.clone()),
                    stage: Some(stage),
                    image_ids: image_ids.clone(),
                },
            };
            let resp = self.backend.send(&req).map_err(StageFailure::Backend)?;
            let u = result.usage.entry(stage).or_default();
            u.requests += 1;
            u.prompt_tokens += resp.prompt_tokens;
            u.output_tokens += resp.output_tokens;
            match parse(&resp.text) {
                Ok(v) => return Ok(v),
                Err(reason) => last = reason,
            }
        }
        Err(StageFailure::Parse(last))
    }

    fn image(&self, which: &ImageRef) -> Result<(String, Part), String> {
        load_image_part(&resolve_image_path(&self.ctx.image_root, &which.path))
            .map(|p| (which.id.clone(), p))
    }
}

fn failure_reason(f: StageFailure) -> String {
    match f {
        StageFailure::Backend(e) => format!("{}: {e}", e.reason()),
        StageFailure::Parse(r) => r,
    }
}

fn parse_inventory(text: &str) -> Result<ExtractedInventory, String> {
    extract_inventory(text).map_err(|e| e.code().to_string())
}

fn parse_captions(text: &str) -> Result<Vec<String>, String> {
    match extract_captions(text) {
        Ok(c) => Ok(c),
        Err(CaptionError::EmptyList) => Ok(vec![]),
        Err(e) => Err(e.code().to_string()),
    }
}

/// Runs the three stages for one pair. Failures are reported in the result.
pub fn run_pair<B: ChatBackend + ?Sized>(
    pair: &ImagePair,
    backend: &B,
    ctx: &PipelineContext,
) -> PairGenerationResult {
    let mut result = PairGenerationResult::new(pair);
    let run = StageRun { backend, ctx, pair };
    let base = ctx.templates.base_params(ctx.max_objects());

    let query_img = match run.image(&pair.query) {
        Ok(i) => i,
        Err(_) => return result.fail(Stage::Stage1, "image_io"),
    };
    let s1 = match run.run(
        &mut result,
        Stage::Stage1,
        &base,
        vec![query_img],
        ResponseFormat::JsonObject,
        parse_inventory,
    ) {
        Ok(v) => v,
        Err(f) => return result.fail(Stage::Stage1, failure_reason(f)),
    };
    result.query_inventory.objects = s1.objects.clone();

    let target_img = match run.image(&pair.target) {
        Ok(i) => i,
        Err(_) => return result.fail(Stage::Stage2, "image_io"),
    };
    let mut p2 = base.clone();
    p2.insert("stage1_json".into(), s1.raw_json.clone());
    let s2 = match run.run(
        &mut result,
        Stage::Stage2,
        &p2,
        vec![target_img],
        ResponseFormat::JsonObject,
        parse_inventory,
    ) {
        Ok(v) => v,
        Err(f) => return result.fail(Stage::Stage2, failure_reason(f)),
    };
    result.target_inventory.objects = s2.objects.clone();

    let mut p3 = p2;
    p3.insert("stage2_json".into(), s2.raw_json);
    match run.run(
        &mut result,
        Stage::Stage3,
        &p3,
        vec![],
        ResponseFormat::Text,
        parse_captions,
    ) {
        Ok(c) => result.atomic_captions = c,
        Err(f) => return result.fail(Stage::Stage3, failure_reason(f)),
    }
    result
}

/// One request carrying both images; inventories stay empty.
pub fn run_single_stage<B: ChatBackend + ?Sized>(
    pair: &ImagePair,
    backend: &B,
    ctx: &PipelineContext,
) -> PairGenerationResult {
    let mut result = PairGenerationResult::new(pair);
    let run = StageRun { backend, ctx, pair };
    let stage = Stage::SingleStage;
    let images = match (run.image(&pair.query), run.image(&pair.target)) {
        (Ok(q), Ok(t)) => vec![q, t],
        _ => return result.fail(stage, "image_io"),
    };
    let params = ctx.templates.base_params(ctx.max_objects());
    match run.run(
        &mut result,
        stage,
        &params,
        images,
        ResponseFormat::Text,
        parse_captions,
    ) {
        Ok(c) => result.atomic_captions = c,
        Err(f) => return result.fail(stage, failure_reason(f)),
    }
    result
}

pub fn run_configured<B: ChatBackend + ?Sized>(
    pair: &ImagePair,
    backend: &B,
    ctx: &PipelineContext,
) -> PairGenerationResult {
    match ctx.config.mode {
        PipelineMode::ThreeStage => run_pair(pair, backend, ctx),
        PipelineMode::SingleStage => run_single_stage(pair, backend, ctx),
    }
}

/// Processes `pairs` on up to `backend.max_in_flight()` worker threads and
/// hands results to `sink` in input order. Once `stop` is set no new pair
/// is started; pairs already running finish. Returns how many were processed.
pub fn run_pairs<B, F>(
    pairs: &[ImagePair],
    backend: &B,
    ctx: &PipelineContext,
    stop: &AtomicBool,
    mut sink: F,
) -> usize
where
    B: ChatBackend + ?Sized,
    F: FnMut(PairGenerationResult),
{
    let workers = backend.max_in_flight().clamp(1, pairs.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, PairGenerationResult)>();
    let mut emitted = 0;
    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pairs.len() {
                    break;
                }
                if tx
                    .send((i, run_configured(&pairs[i], backend, ctx)))
                    .is_err()
                {
                    break;
                }
            });
        }
        drop(tx);
        let mut buffer = BTreeMap::new();
        for (i, r) in rx {
            buffer.insert(i, r);
            while let Some(r) = buffer.remove(&emitted) {
                sink(r);
                emitted += 1;
            }
        }
    });
    emitted
}
