use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Help or version text requested; not a failure.
    #[error("{0}")]
    Display(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] tensorformer_core::DtiError),
    #[error(transparent)]
    Nn(#[from] tensorformer_nn::NnError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Display(_) => "display",
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Core(_) => "dti",
            CliError::Nn(_) => "model",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Display(_) => 0,
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `error kind=<kind> message=<json string>` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!(
            "error kind={} message={}",
            self.kind(),
            serde_json::to_string(&msg).expect("string serializes")
        )
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
