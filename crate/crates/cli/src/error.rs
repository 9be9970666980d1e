use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Input(String),

    #[error(
        "MNIST files not found in {dir}: missing {missing}\n\
         Download the four IDX files (train-images-idx3-ubyte, train-labels-idx1-ubyte,\n\
         t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte) from a MNIST mirror such as\n\
         https://storage.googleapis.com/cvdf-datasets/mnist/ , gunzip them into that\n\
         directory, or point --mnist-dir at an existing copy."
    )]
    MissingMnist { dir: String, missing: String },

    /// A check ran to completion and did not hold.
    #[error("{0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] retina_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Verification(_) | CliError::Core(retina_core::Error::NonFinite { .. }) => ExitCode::from(1),
            _ => ExitCode::from(2),
        }
    }
}
