//! Desk-scale laboratory for joint spike-to-image reconstruction, camera
//! trajectory refinement and 3D Gaussian splatting.
//!
//! The crate is organised bottom-up:
//!
//! * [`spike`]: spike streams, integrate-and-fire simulation, TFP/TFI, voxels, `.spk` I/O
//! * [`se3`]: rigid poses, exp/log maps, trajectory interpolation and its Jacobians
//! * [`diff`]: a small define-by-run reverse-mode engine and Adam
//! * [`splat`]: differentiable Gaussian rasterizer with an analytic backward pass
//! * [`recon`]: the long/short spike reconstruction network
//! * [`losses`]: reblur, multi-reblur, splatting and flip-and-minimum joint losses
//! * [`scene`]: procedural ground truth and on-disk datasets
//! * [`trainer`]: the joint optimisation loop and checkpoints
//! * [`eval`]: PSNR/SSIM, pose errors, ablation and degradation reports
//! * [`formats`] / [`config`]: tensor files, PGM previews and run configuration

pub mod config;
pub mod diff;
pub mod error;
pub mod eval;
pub mod formats;
pub mod image;
pub mod losses;
pub mod recon;
pub mod scene;
pub mod se3;
pub mod spike;
pub mod splat;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
