//! Request and response bodies of the backend wire protocol (JSON over HTTP).
//!
//! | endpoint        | request                               | response                    |
//! |-----------------|---------------------------------------|-----------------------------|
//! | `/embed_text`   | `{texts}`                             | `{vectors, d}`              |
//! | `/embed_image`  | `{patch_ids, uris}`                   | `{vectors, d}`              |
//! | `/describe`     | `{patch_id, uri, source, template}`   | `{text}`                    |
//! | `/revise`       | `{text}`                              | `{text, ops}`               |
//! | `/summarize`    | `{text, max_tokens}`                  | `{text}`                    |
//! | `/complete`     | `{task, text, count, attempt}`        | `{text}` (one item per line)|
//!
//! 200 is success, 4xx permanent, 5xx and timeouts retryable.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::script::ReviseOp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    EmbedText,
    EmbedImage,
    Describe,
    Revise,
    Summarize,
    Complete,
}

impl Endpoint {
    pub const ALL: [Endpoint; 6] = [
        Endpoint::EmbedText,
        Endpoint::EmbedImage,
        Endpoint::Describe,
        Endpoint::Revise,
        Endpoint::Summarize,
        Endpoint::Complete,
    ];

    pub fn path(self) -> &'static str {
        match self {
            Endpoint::EmbedText => "/embed_text",
            Endpoint::EmbedImage => "/embed_image",
            Endpoint::Describe => "/describe",
            Endpoint::Revise => "/revise",
            Endpoint::Summarize => "/summarize",
            Endpoint::Complete => "/complete",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path()[1..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub patch_ids: Vec<String>,
    pub uris: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescribeRequest {
    pub patch_id: String,
    pub uri: String,
    pub source: String,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviseRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviseResponse {
    pub text: String,
    #[serde(default)]
    pub ops: Vec<ReviseOp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummarizeRequest {
    pub text: String,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompleteTask {
    /// Keep morphological / diagnostic findings of a raw report, one per line.
    RefineReport,
    /// Split one overlong finding at clause boundaries, one piece per line.
    SplitFinding,
    /// `count` microscopic attributes for the organ named in `text`, one per line.
    Attributes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub task: CompleteTask,
    pub text: String,
    #[serde(default)]
    pub count: usize,
    #[serde(default)]
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
