use serde::Serialize;

use dwf_core::DwfError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] DwfError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<dwf_core::optimizer::TrainError> for CliError {
    fn from(e: dwf_core::optimizer::TrainError) -> Self {
        CliError::Core(e.error)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                DwfError::Shape(_) => "shape",
                DwfError::Domain(_) => "domain",
                DwfError::Evaluation(_) => "evaluation",
                DwfError::Init(_) => "init",
                DwfError::Numeric { .. } => "numeric",
                DwfError::Diverged { .. } => "diverged",
                DwfError::Config(_) => "config",
                DwfError::Format(_) => "format",
                DwfError::Length(_) => "length",
                DwfError::Consistency(_) => "consistency",
                DwfError::NonConvergence { .. } => "non_convergence",
                DwfError::LayerCollapse { .. } => "layer_collapse",
                DwfError::Io(_) => "io",
            },
            CliError::Csv(_) | CliError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "numeric" | "diverged" | "non_convergence" | "evaluation" => EXIT_NUMERIC,
            "format" | "length" | "consistency" | "io" => EXIT_DATA,
            _ => EXIT_CONFIG,
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            exit_code: i32,
            message: String,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Doc {
            error: Body {
                kind: self.kind(),
                exit_code: self.exit_code(),
                message: self.to_string(),
            },
        })
        .expect("error document serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(CliError::from(DwfError::Config("x".into())).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::from(DwfError::Diverged { step: 3 }).exit_code(), EXIT_NUMERIC);
        assert_eq!(CliError::from(DwfError::Format("x".into())).exit_code(), EXIT_DATA);
        assert_eq!(CliError::from(DwfError::Io("x".into())).exit_code(), EXIT_DATA);
        let doc: serde_json::Value =
            serde_json::from_str(&CliError::from(DwfError::Numeric { layer: 1 }).to_json()).unwrap();
        assert_eq!(doc["error"]["kind"], "numeric");
        assert_eq!(doc["error"]["exit_code"], 3);
    }
}
