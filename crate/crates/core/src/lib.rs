//! Android bytecode imaging and a small 1-D convolutional malware classifier.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`apk`] opens an APK (a ZIP container), finds the root-level DEX files
//!    in multidex order and concatenates their raw bytes.
//! 2. [`image`] maps every byte to one 8-bit grey pixel of a 1-pixel-high
//!    "vector" image and resizes it bilinearly to a fixed width.
//! 3. [`nn`] holds the network: two convolution/max-pool extraction units,
//!    a 64-unit dense layer and a single sigmoid output, trained with Adam.
//! 4. [`eval`] implements the evaluation protocols: repeated hold-out,
//!    temporally consistent splits, obfuscation augmentation, ROC/AUC and
//!    the image-size ablation.
//!
//! [`store`] ties these together for the `dexvec` command-line tool.

pub mod apk;
pub mod eval;
pub mod image;
pub mod nn;
pub mod par;
pub mod store;
pub mod synth;

pub use apk::{ApkArchive, ApkError, ByteStream};
pub use image::{ResizedImage, SquareImage, VectorImage};
pub use nn::{Architecture, Network, Tensor};
