use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::docmodel::BoundingBox;
use crate::extraction::MetadataSchema;
use crate::money::Rate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Extraction,
    PiiDetection,
    VisualDetection,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Extraction, TaskKind::PiiDetection, TaskKind::VisualDetection];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Extraction => "extraction",
            TaskKind::PiiDetection => "pii_detection",
            TaskKind::VisualDetection => "visual_detection",
        }
    }

    /// The response schema a task of this kind must declare.
    pub fn schema_id(self) -> &'static str {
        match self {
            TaskKind::Extraction => "metadata/v1",
            TaskKind::PiiDetection => "pii/v1",
            TaskKind::VisualDetection => "detections/v1",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TaskKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown task kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTier {
    Mini,
    Standard,
}

impl fmt::Display for ModelTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelTier::Mini => "mini",
            ModelTier::Standard => "standard",
        })
    }
}

/// A classical region locator for cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locator {
    TopBand,
    TitleBlock,
    FullPage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreAction {
    /// Attaches full page rasters. `pages` unset means every page.
    RenderPage {
        #[serde(default)]
        pages: Option<Vec<u32>>,
    },
    /// Attaches one cropped region, given either as a box or a locator.
    CropRegionOfInterest {
        page: u32,
        #[serde(default)]
        bbox: Option<BoundingBox>,
        #[serde(default)]
        locator: Option<Locator>,
    },
    BuildPrompt {
        #[serde(default)]
        template_id: Option<String>,
    },
}

impl PreAction {
    pub fn name(&self) -> &'static str {
        match self {
            PreAction::RenderPage { .. } => "render_page",
            PreAction::CropRegionOfInterest { .. } => "crop_region_of_interest",
            PreAction::BuildPrompt { .. } => "build_prompt",
        }
    }

    /// Template variables this action defines.
    pub fn produces(&self) -> &'static [&'static str] {
        match self {
            PreAction::RenderPage { .. } => &["pages", "page_count"],
            PreAction::CropRegionOfInterest { .. } => &["region"],
            PreAction::BuildPrompt { .. } => &["doc_id", "page_text", "schema", "task", "fields"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    DropEmpty,
    MinConfidence,
    ClipToPage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostAction {
    SchemaValidate {
        #[serde(default)]
        schema: Option<String>,
    },
    HeuristicFilter {
        rule: FilterRule,
        #[serde(default)]
        min_confidence: Option<f64>,
    },
    Normalize {
        #[serde(default)]
        normalizer: Option<String>,
    },
}

impl PostAction {
    pub fn name(&self) -> &'static str {
        match self {
            PostAction::SchemaValidate { .. } => "schema_validate",
            PostAction::HeuristicFilter { .. } => "heuristic_filter",
            PostAction::Normalize { .. } => "normalize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderPath {
    pub provider_id: String,
    pub model_tier: ModelTier,
    pub input_rate: Rate,
    pub output_rate: Rate,
    pub per_call_fee: Rate,
}

impl ProviderPath {
    pub fn id(&self) -> String {
        format!("{}:{}", self.provider_id, self.model_tier)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_kind: TaskKind,
    pub pre_actions: Vec<PreAction>,
    pub prompt_template: String,
    #[serde(default)]
    pub fallback_prompt_template: Option<String>,
    #[serde(default = "default_true")]
    pub retry: bool,
    pub post_actions: Vec<PostAction>,
    pub provider_path: ProviderPath,
    /// Path used for the fallback attempt; defaults to `provider_path`.
    #[serde(default)]
    pub fallback_provider_path: Option<ProviderPath>,
    pub response_schema: String,
    #[serde(default)]
    pub metadata_schema: Option<MetadataSchema>,
}

/// `{name}` is a placeholder; `{{` and `}}` are literal braces.
static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

/// Placeholder names used in a template, in order of first use.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    PLACEHOLDER.captures_iter(template).filter_map(|c| c.get(1).map(|m| m.as_str().to_string())).filter(|n| seen.insert(n.clone())).collect()
}

pub fn render_template(template: &str, vars: &std::collections::BTreeMap<String, String>) -> String {
    PLACEHOLDER
        .replace_all(template, |c: &regex::Captures| match c.get(1) {
            Some(name) => vars.get(name.as_str()).cloned().unwrap_or_default(),
            None => c[0][..1].to_string(),
        })
        .into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid task config: {0}")]
pub struct ConfigError(pub String);

impl TaskConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: TaskConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The configuration shipped for each task kind.
    pub fn bundled(kind: TaskKind) -> Self {
        let text = match kind {
            TaskKind::Extraction => include_str!("../../config/tasks/extraction.toml"),
            TaskKind::PiiDetection => include_str!("../../config/tasks/pii_detection.toml"),
            TaskKind::VisualDetection => include_str!("../../config/tasks/visual_detection.toml"),
        };
        Self::from_toml(text).expect("bundled task config is valid")
    }

    /// The extraction configuration that starts on the mini tier and falls
    /// back to the standard tier.
    pub fn bundled_two_pass() -> Self {
        Self::from_toml(include_str!("../../config/tasks/extraction_two_pass.toml")).expect("bundled task config is valid")
    }

    pub fn produced_variables(&self) -> BTreeSet<&'static str> {
        self.pre_actions.iter().flat_map(|a| a.produces().iter().copied()).collect()
    }

    pub fn fallback_path(&self) -> &ProviderPath {
        self.fallback_provider_path.as_ref().unwrap_or(&self.provider_path)
    }

    pub fn max_attempts(&self) -> u8 {
        if self.retry {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.response_schema != self.task_kind.schema_id() {
            return err(format!("{} tasks must use schema {:?}, not {:?}", self.task_kind, self.task_kind.schema_id(), self.response_schema));
        }
        if self.task_kind == TaskKind::Extraction {
            match &self.metadata_schema {
                Some(s) => s.validate().map_err(|e| ConfigError(e.to_string()))?,
                None => return err("extraction tasks need a metadata_schema".into()),
            }
        }
        if self.prompt_template.trim().is_empty() {
            return err("prompt_template is empty".into());
        }
        let produced = self.produced_variables();
        let mut templates = vec![("prompt_template", &self.prompt_template)];
        match &self.fallback_prompt_template {
            Some(t) => templates.push(("fallback_prompt_template", t)),
            None if self.retry => return err("retry is enabled but fallback_prompt_template is missing".into()),
            None => {}
        }
        for (name, t) in templates {
            for p in placeholders(t) {
                if !produced.contains(p.as_str()) {
                    return err(format!("{name} uses {{{p}}}, which no pre-action produces"));
                }
            }
        }
        for a in &self.pre_actions {
            if let PreAction::CropRegionOfInterest { bbox, locator, .. } = a {
                if bbox.is_some() == locator.is_some() {
                    return err("crop_region_of_interest needs exactly one of bbox or locator".into());
                }
            }
        }
        for (i, a) in self.post_actions.iter().enumerate() {
            match a {
                PostAction::SchemaValidate { schema } => {
                    if i != 0 {
                        return err("schema_validate must be the first post-action".into());
                    }
                    if schema.as_deref().is_some_and(|s| s != self.response_schema) {
                        return err("schema_validate names a different schema than response_schema".into());
                    }
                }
                _ if i == 0 => return err("schema_validate must precede other post-actions".into()),
                PostAction::HeuristicFilter { rule: FilterRule::MinConfidence, min_confidence } => {
                    if !min_confidence.is_some_and(|m| (0.0..=1.0).contains(&m)) {
                        return err("min_confidence filter needs min_confidence in [0,1]".into());
                    }
                }
                PostAction::Normalize { normalizer: Some(n) } if n != self.task_kind.as_str() => {
                    return err(format!("normalizer {n:?} does not match task kind {}", self.task_kind));
                }
                _ => {}
            }
        }
        for p in std::iter::once(&self.provider_path).chain(self.fallback_provider_path.iter()) {
            if p.input_rate.is_negative() || p.output_rate.is_negative() || p.per_call_fee.is_negative() {
                return err(format!("provider path {} has a negative rate", p.id()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_validate() {
        for k in TaskKind::ALL {
            assert_eq!(TaskConfig::bundled(k).task_kind, k);
        }
        let two = TaskConfig::bundled_two_pass();
        assert_eq!(two.provider_path.model_tier, ModelTier::Mini);
        assert_eq!(two.fallback_path().model_tier, ModelTier::Standard);
    }

    #[test]
    fn templates_render_with_escapes() {
        let vars = [("a".to_string(), "1".to_string())].into_iter().collect();
        assert_eq!(render_template("{{\"k\": {a}}}", &vars), "{\"k\": 1}");
        assert_eq!(placeholders("{{x}} {a} {b} {a}"), vec!["a", "b"]);
    }

    #[test]
    fn unbound_placeholder_is_rejected() {
        let mut cfg = TaskConfig::bundled(TaskKind::Extraction);
        cfg.prompt_template.push_str(" {region}");
        assert!(cfg.validate().unwrap_err().0.contains("{region}"));
    }

    #[test]
    fn retry_needs_fallback_template() {
        let mut cfg = TaskConfig::bundled(TaskKind::Extraction);
        cfg.fallback_prompt_template = None;
        assert!(cfg.validate().is_err());
        cfg.retry = false;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn schema_validate_must_come_first() {
        let mut cfg = TaskConfig::bundled(TaskKind::PiiDetection);
        cfg.post_actions.reverse();
        assert!(cfg.validate().is_err());
    }
}
