use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: {what} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("layer {layer}: {source}")]
    Layer { layer: u32, source: Box<Error> },

    #[error("class index {index} out of range: valid classes are 0..{count}")]
    ClassOutOfRange { index: usize, count: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("no backward rule for layer {layer} ({kind}) under rule set {rule_set}")]
    MissingRule {
        layer: u32,
        kind: &'static str,
        rule_set: &'static str,
    },

    #[error("attribution stopped at layer {0} before reaching the input")]
    MissingInputGradient(u32),

    #[error("saliency map has no positive values; cannot derive a bounding box")]
    EmptyMap,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn at_layer(self, layer: u32) -> Error {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                layer,
                source: Box::new(e),
            },
        }
    }
}
