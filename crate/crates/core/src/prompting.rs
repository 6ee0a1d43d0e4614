//! Prompt assembly for the descriptor and predictor models, and extraction
//! of the force value from predictor answers.
//!
//! Both prompts open with the shared task context (task objective, optional
//! gripper embodiment, optional scale reference image). The descriptor prompt
//! then carries the description instruction and the query image. The
//! predictor prompt carries the retrieved experience blocks in rank order,
//! the force instruction, and the query image last.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatModel, GatewayError, ImageData, MultimodalMessage, Segment};
use crate::pool::ExperienceRecord;

pub const CONTEXT_TEMPLATE: &str = "context.txt";
pub const DESC_INSTRUCTION_TEMPLATE: &str = "desc_instruction.txt";
pub const PRED_INSTRUCTION_TEMPLATE: &str = "pred_instruction.txt";

/// Prefix of the ground-truth line inside each experience block.
pub const EXPERIENCE_FORCE_PREFIX: &str = "Ground-truth force:";
pub const FORCE_SENTINEL: &str = "FORCE_N:";

/// Bounds applied to parsed forces: the gripper floor and the force cap.
pub const MIN_FORCE_N: f64 = 0.25;
pub const MAX_FORCE_N: f64 = 20.0;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("query image is missing or empty")]
    MissingImage,
    #[error("descriptor returned an empty description")]
    EmptyDescription,
    #[error("no force value found in response")]
    Unparseable,
    #[error("template {name}: {reason}")]
    Template { name: String, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Editable prompt texts. `context` accepts `{task_objective}` and
/// `{embodiment}`; the two instructions are used verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub context: String,
    pub desc_instruction: String,
    pub pred_instruction: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    /// The templates shipped in the repository's `templates/` directory.
    pub fn builtin() -> Self {
        Self {
            context: include_str!("../../../templates/context.txt").to_string(),
            desc_instruction: include_str!("../../../templates/desc_instruction.txt").to_string(),
            pred_instruction: include_str!("../../../templates/pred_instruction.txt").to_string(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source })
        };
        let t = Self {
            context: read(CONTEXT_TEMPLATE)?,
            desc_instruction: read(DESC_INSTRUCTION_TEMPLATE)?,
            pred_instruction: read(PRED_INSTRUCTION_TEMPLATE)?,
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<(), PromptError> {
        if !self.context.contains("{task_objective}") {
            return Err(PromptError::Template {
                name: CONTEXT_TEMPLATE.into(),
                reason: "missing {task_objective} placeholder".into(),
            });
        }
        for (name, text) in self.named() {
            if let Some(hit) = lint_template(text).first() {
                return Err(PromptError::Template {
                    name: name.into(),
                    reason: format!("contains banned analytic-force token `{hit}`"),
                });
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &str); 3] {
        [
            (CONTEXT_TEMPLATE, self.context.as_str()),
            (DESC_INSTRUCTION_TEMPLATE, self.desc_instruction.as_str()),
            (PRED_INSTRUCTION_TEMPLATE, self.pred_instruction.as_str()),
        ]
    }
}

fn lint_patterns() -> &'static [Regex] {
    static RE: OnceLock<Vec<Regex>> = OnceLock::new();
    RE.get_or_init(|| {
        [
            r"[μµ]",
            r"(?i)\bmu\b",
            r"(?i)coefficient",
            r"(?i)friction",
            r"(?i)\bweight\s*/",
            r"\b[WF]\s*=",
            r"\b[WF]\s*/",
            r"(?i)\bm\s*\*?\s*g\s*/",
            r"(?i)\bmg\b",
            r"9\.8",
        ]
        .iter()
        .map(|p| Regex::new(p).unwrap())
        .collect()
    })
}

/// Analytic-force tokens found in a template: friction symbols or words,
/// and weight-over-friction style formulas. Empty means clean.
pub fn lint_template(text: &str) -> Vec<String> {
    lint_patterns()
        .iter()
        .filter_map(|re| re.find(text).map(|m| m.as_str().to_string()))
        .collect()
}

/// Shared task information given to both models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedContext {
    pub task_objective: String,
    pub embodiment_text: String,
    pub embodiment_image: Option<ImageData>,
    pub scale_reference_image: Option<ImageData>,
    pub include_embodiment: bool,
}

pub const DEFAULT_TASK_OBJECTIVE: &str = "find the minimum grasping force, in newtons and summed over both fingers, \
that lets the gripper lift the object about 5 cm without the object slipping. The gripper cannot command less than 0.25 N.";

pub const DEFAULT_EMBODIMENT: &str = "a linkage-driven parallel gripper with two compliant fin-ray fingers. \
The fingers bend around the object on contact and have soft silicone pads; they close symmetrically \
and the object is lifted straight up.";

impl Default for SharedContext {
    fn default() -> Self {
        Self {
            task_objective: DEFAULT_TASK_OBJECTIVE.into(),
            embodiment_text: DEFAULT_EMBODIMENT.into(),
            embodiment_image: None,
            scale_reference_image: None,
            include_embodiment: true,
        }
    }
}

impl SharedContext {
    /// Embodiment paragraph substituted for `{embodiment}`; empty when excluded.
    pub fn embodiment_paragraph(&self) -> String {
        if self.include_embodiment && !self.embodiment_text.trim().is_empty() {
            format!("Gripper: {}\n", self.embodiment_text.trim())
        } else {
            String::new()
        }
    }

    pub fn render(&self, templates: &Templates) -> String {
        templates
            .context
            .replace("{task_objective}", self.task_objective.trim())
            .replace("{embodiment}", &self.embodiment_paragraph())
    }

    /// Context text followed by the auxiliary images that apply.
    fn segments(&self, templates: &Templates) -> Vec<Segment> {
        let mut segs = vec![Segment::Text(self.render(templates))];
        if self.include_embodiment {
            if let Some(img) = &self.embodiment_image {
                segs.push(Segment::Image(img.clone()));
            }
        }
        if let Some(img) = &self.scale_reference_image {
            segs.push(Segment::Image(img.clone()));
        }
        segs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Descriptor,
    Predictor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub messages: Vec<MultimodalMessage>,
    pub kind: PromptKind,
    pub k_used: usize,
}

impl PromptBundle {
    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.messages.iter().flat_map(|m| m.segments())
    }
}

fn image_segment(image: &ImageData) -> Result<Segment, PromptError> {
    if image.is_empty() {
        return Err(PromptError::MissingImage);
    }
    Ok(Segment::Image(image.clone()))
}

fn bundle(segments: Vec<Segment>, kind: PromptKind, k_used: usize) -> PromptBundle {
    let message = MultimodalMessage::new(segments).expect("assembled prompt has segments");
    PromptBundle {
        messages: vec![message],
        kind,
        k_used,
    }
}

pub fn build_descriptor_prompt(
    ctx: &SharedContext,
    templates: &Templates,
    query_image: &ImageData,
) -> Result<PromptBundle, PromptError> {
    let query = image_segment(query_image)?;
    let mut segs = ctx.segments(templates);
    segs.push(Segment::text(templates.desc_instruction.trim_end()));
    segs.push(query);
    Ok(bundle(segs, PromptKind::Descriptor, 0))
}

/// A retrieved record plus its image bytes, ready to go into a prompt.
#[derive(Debug, Clone)]
pub struct ExperienceExample<'a> {
    pub record: &'a ExperienceRecord,
    pub image: ImageData,
}

/// Text part of one experience block.
pub fn experience_block_text(rank: usize, total: usize, record: &ExperienceRecord) -> String {
    format!(
        "Prior grasping experience {rank} of {total}:\n\
         Object name: {name}\n\
         Mass: {mass:.3} kg\n\
         Description: {desc}\n\
         {EXPERIENCE_FORCE_PREFIX} {force:.2} N",
        name = record.name,
        mass = record.mass_kg,
        desc = record.description.trim(),
        force = record.f_star_n,
    )
}

pub fn build_predictor_prompt(
    ctx: &SharedContext,
    templates: &Templates,
    experiences: &[ExperienceExample<'_>],
    query_image: &ImageData,
) -> Result<PromptBundle, PromptError> {
    let query = image_segment(query_image)?;
    let mut segs = ctx.segments(templates);
    for (i, exp) in experiences.iter().enumerate() {
        segs.push(Segment::Text(experience_block_text(i + 1, experiences.len(), exp.record)));
        segs.push(image_segment(&exp.image)?);
    }
    segs.push(Segment::text(templates.pred_instruction.trim_end()));
    segs.push(query);
    Ok(bundle(segs, PromptKind::Predictor, experiences.len()))
}

/// Ground-truth forces listed in the experience blocks of a prompt, in order.
pub fn experience_forces(messages: &[MultimodalMessage]) -> Vec<f64> {
    messages
        .iter()
        .flat_map(|m| m.texts())
        .flat_map(|t| t.lines())
        .filter_map(|line| line.trim().strip_prefix(EXPERIENCE_FORCE_PREFIX))
        .filter_map(|rest| rest.trim().trim_end_matches('N').trim().parse::<f64>().ok())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParsedForce {
    pub force_n: f64,
    /// Value as written before clamping.
    pub raw_n: f64,
    pub clamped: bool,
}

fn sentinel_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"FORCE_N:\s*\**\s*([+-]?(?:\d+\.?\d*|\.\d+))").unwrap())
}

fn unit_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?:^|[^\w.\-])(\d+(?:\.\d+)?|\.\d+)\s*(?:N|[Nn]ewtons?)\b").unwrap()
    })
}

/// Reads the force from the last `FORCE_N:` line, falling back to the last
/// number followed by a newton unit. The result is clamped to
/// `[MIN_FORCE_N, MAX_FORCE_N]`.
pub fn parse_force(response: &str) -> Result<ParsedForce, PromptError> {
    let from_sentinel = response
        .lines()
        .rev()
        .find_map(|line| sentinel_re().captures(line).map(|c| c[1].to_string()));
    let token = match from_sentinel {
        Some(t) => t,
        None => unit_re()
            .captures_iter(response)
            .last()
            .map(|c| c[1].to_string())
            .ok_or(PromptError::Unparseable)?,
    };
    let raw_n: f64 = token.parse().map_err(|_| PromptError::Unparseable)?;
    if !raw_n.is_finite() {
        return Err(PromptError::Unparseable);
    }
    let force_n = raw_n.clamp(MIN_FORCE_N, MAX_FORCE_N);
    Ok(ParsedForce {
        force_n,
        raw_n,
        clamped: force_n != raw_n,
    })
}

/// Asks the descriptor model for a description of the query object.
pub fn describe_object(
    ctx: &SharedContext,
    templates: &Templates,
    query_image: &ImageData,
    descriptor: &dyn ChatModel,
) -> Result<String, PromptError> {
    let prompt = build_descriptor_prompt(ctx, templates, query_image)?;
    match descriptor.complete(&prompt.messages) {
        Ok(text) if text.trim().is_empty() => Err(PromptError::EmptyDescription),
        Ok(text) => Ok(text.trim().to_string()),
        Err(GatewayError::EmptyResponse) => Err(PromptError::EmptyDescription),
        Err(e) => Err(e.into()),
    }
}
