//! Non-neural building blocks for prompt-free fetal-head ultrasound
//! segmentation: polygon geometry, patient-level dataset splitting,
//! domain-guided copy-paste augmentation, the BCE-Dice-Lovász loss,
//! MuSGD/AdamW optimizers and a COCO-style instance-segmentation evaluator.
//!
//! The `book/` directory at the repository root walks through each module;
//! its code listings are compiled and run as doctests of this crate.

pub mod augment;
pub mod dataset;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod synthetic;

pub use dataset::{ClassId, ImageRecord, InstanceAnnotation};
pub use geometry::{BinaryMask, CoordinateSpace, Polygon, SoftMask};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/splitting.md")]
    mod splitting {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/optimizers.md")]
    mod optimizers {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
