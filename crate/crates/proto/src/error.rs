use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtoError {
    #[error("framing: {0}")]
    Framing(String),
    #[error("checksum mismatch: frame says {stated:#06x}, computed {computed:#06x}")]
    Checksum { stated: u16, computed: u16 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid field: {0}")]
    InvalidField(String),
}

pub type Result<T, E = ProtoError> = std::result::Result<T, E>;
