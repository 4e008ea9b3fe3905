//! Miniature open-vocabulary detector with one-to-many auxiliary queries,
//! a difficulty-weighted classification loss and text-to-image fusion,
//! trained on procedural shape scenes.

pub mod autodiff;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod losscurve;
pub mod losses;
pub mod matching;
pub mod scenes;
pub mod tensor;
pub mod textspace;
pub mod trainer;

pub use error::{Error, Result};
