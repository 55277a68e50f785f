//! Few-shot semantic grasping pipeline.
//!
//! The crate turns a class-agnostic mask-proposal backend and a small support
//! set (a handful of example images with masks) into a 4-DoF planar grasp for
//! the object the support set describes:
//!
//! 1. a zero-shot segmentator proposes candidate masks for the query scene
//!    ([`backends`]),
//! 2. candidates are deduplicated and filtered against the estimated support
//!    plane ([`candidates`]),
//! 3. an inverted few-shot classifier scores each masked candidate crop
//!    against the support prototype and emits the semantic heatmap
//!    ([`selector`]),
//! 4. three trainable heads map heatmap + depth to quality/angle/width class
//!    maps ([`heads`]) which decode into a grasp ([`codec`]).
//!
//! Everything is verifiable at desk scale: [`synthdata`] generates tabletop
//! scenes with exact ground truth, [`evalsuite`] runs the episodic benchmark
//! (mIoU, COCO AP/AP50/AR1, A_sem, A_semGR), and [`cli`] wires the stages into
//! reproducible commands.

pub mod backends;
pub mod candidates;
pub mod cli;
pub mod codec;
pub mod evalsuite;
pub mod geometry;
pub mod heads;
pub mod image;
pub mod io;
pub mod jsonfmt;
pub mod maskops;
pub mod rle;
pub mod selector;
pub mod synthdata;

pub use crate::geometry::{angle_distance, is_correct_grasp, oriented_iou, Grasp, GraspBox, WidthUnit};
pub use crate::image::{BinaryMask, RgbImage, RgbdImage, SupportSet, SupportShot};
