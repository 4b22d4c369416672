use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

use crate::pose::Pose;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// A configuration or geometry rule is violated before any compute.
    Config(String),
    EmptyInput(&'static str),
    IndexOutOfRange { index: usize, bound: usize },
    /// Too few points, or all points coincide.
    Degenerate(String),
    /// No RANSAC hypothesis reached the minimum inlier ratio.
    RobustFailure {
        best: Option<Box<Pose>>,
        best_inliers: usize,
        required: usize,
    },
    NonFinite(String),
    NegativeEntry { row: usize, col: usize, value: f64 },
    NotARotation(String),
    UnknownCategory(String),
    /// The render produced fewer visible points than requested; resample the pose.
    NotEnoughVisible { visible: usize, needed: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl fmt::Debug, got: impl fmt::Debug) -> Self {
        Error::Shape {
            op,
            expected: alloc::format!("{expected:?}"),
            got: alloc::format!("{got:?}"),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::RobustFailure {
                best_inliers,
                required,
                ..
            } => write!(
                f,
                "robust estimation failed: best hypothesis had {best_inliers} inliers, {required} required"
            ),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::NegativeEntry { row, col, value } => {
                write!(f, "negative entry {value} at ({row}, {col})")
            }
            Error::NotARotation(msg) => write!(f, "not a rotation: {msg}"),
            Error::UnknownCategory(name) => write!(f, "unknown category `{name}`"),
            Error::NotEnoughVisible { visible, needed } => {
                write!(f, "only {visible} visible points, {needed} needed; resample the pose")
            }
        }
    }
}

impl core::error::Error for Error {}
