//! A desk-scale laboratory for studying dual-key multimodal backdoors in
//! visual question answering.
//!
//! The attack under study plants *two* coordinated triggers — a small visual
//! patch and a question token — such that a poisoned VQA model emits a fixed
//! target answer only when **both** triggers are present, and behaves normally
//! otherwise. Everything runs on a fully synthetic task (colored shapes on
//! noisy gray canvases with templated questions) so that end-to-end
//! experiments finish in minutes on one CPU and are bit-reproducible.
//!
//! Pipeline stages, in dependency order:
//!
//! 1. [`synthdata`] — generate scenes, render images, sample questions.
//! 2. [`detector`] — pretrain and freeze a toy object detector; it is the
//!    feature extractor every later stage shares.
//! 3. [`patchopt`] — build solid / crop / optimized patches; the optimized
//!    style drives the frozen detector toward a chosen semantic target.
//! 4. [`poison`] — choose triggers, apply them, compose poisoned datasets
//!    with full and partial poisoning partitions.
//! 5. [`vqa`] — train attention-based VQA models over cached detector
//!    features.
//! 6. [`eval`] — clean accuracy, trojan accuracy, and the attack-success
//!    metric family, plus multi-seed aggregation.
//! 7. [`defense`] — weight-histogram features and a cross-validated
//!    logistic-regression detector of trojaned models.
//!
//! All of it is built on [`numerics`], a small reverse-mode autodiff tape
//! over dense f64 tensors. Determinism is a hard requirement throughout:
//! every stochastic choice flows from an explicit seed through a counter-mode
//! RNG, and repeated runs must produce byte-identical artifacts.

pub mod defense;
pub mod detector;
pub mod eval;
pub mod io;
pub mod numerics;
pub mod patchopt;
pub mod poison;
pub mod synthdata;
pub mod vqa;
