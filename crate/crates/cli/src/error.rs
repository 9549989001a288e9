use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("train/test contamination: {0}")]
    Contamination(String),
    #[error(transparent)]
    Core(idt_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use idt_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Contamination(_) => 4,
            CliError::Core(e) => match e {
                E::Io(_) | E::BadMagic { .. } | E::UnsupportedVersion(_) | E::TruncatedRecord | E::LengthMismatch(_) => 3,
                E::InvalidConfig(_)
                | E::Json(_)
                | E::InvalidTask(_)
                | E::InvalidDataset(_)
                | E::InsufficientTasks { .. }
                | E::ActionSpaceMismatch { .. }
                | E::DemoLengthMismatch { .. }
                | E::ContextOverflow { .. }
                | E::ShapeMismatch(_) => 2,
                _ => 1,
            },
        }
    }
}

impl From<idt_core::Error> for CliError {
    fn from(e: idt_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
