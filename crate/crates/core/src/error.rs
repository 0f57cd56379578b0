use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at layer `{layer}`: {reason}")]
    Shape { layer: String, reason: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("cycle detected through layer `{0}`")]
    Cycle(String),

    #[error("layer `{layer}` references unknown input `{input}`")]
    DanglingInput { layer: String, input: String },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid scale {0}: must be positive")]
    InvalidScale(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("missing input for source `{0}`")]
    MissingInput(String),

    #[error("group `{group}` needs {needed} bytes but device memory is {available}")]
    Unsatisfiable {
        group: String,
        needed: u64,
        available: u64,
    },

    #[error("task cannot be split: {0}")]
    Unsplittable(String),

    #[error("plan infeasible: {0}")]
    Infeasible(String),

    #[error("window error: {0}")]
    Window(#[from] crate::runtime::window::WindowError),

    #[error("wire format error: {0}")]
    Wire(String),

    #[error("runtime fault: {0}")]
    Runtime(String),

    #[error("role update rejected: {0}")]
    RoleUpdate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
