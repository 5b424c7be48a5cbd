use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor dimensions disagree on a named axis.
    #[error("{op}: shape mismatch on {axis} axis (expected {expected}, found {found})")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    /// An argument or call sequence violates an operation's precondition.
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, axis: &'static str, expected: usize, found: usize) -> Self {
        Error::Shape {
            op,
            axis,
            expected,
            found,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
