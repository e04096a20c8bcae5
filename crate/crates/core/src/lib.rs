//! Hierarchy-aware adversarial robustness toolkit.
//!
//! The crate measures not just *whether* small input perturbations flip a
//! classifier's prediction but *how bad* the resulting mistake is, judged by
//! a label hierarchy: predicting a sibling leaf is a mild error, predicting
//! something in a distant subtree is a severe one. It provides:
//!
//! - [`hierarchy`]: balanced label trees, ultrametric distances between
//!   leaves, and the label masks the attacks are built from.
//! - [`net`]: a small fully-connected classifier with hand-written forward
//!   and backward passes in `f64`, plus Adam and checkpointing.
//! - [`attacks`]: projected gradient descent under masked and node-level
//!   cross-entropy objectives, sweeping the severity of the mistakes an
//!   adversary is allowed to aim for.
//! - [`curriculum`]: coarse-to-fine training schedules with warm-started
//!   heads, free adversarial training, and KL-regularized robust training.
//! - [`bench`]: evaluation harness producing robust accuracy and average
//!   mistake severities per attack, with deterministic per-instance seeding.
//! - [`synth`]: synthetic datasets whose class structure mirrors a label
//!   tree, including long-tailed variants.
//! - [`seed`]: the seed-derivation scheme everything above draws from.
//!
//! All randomness flows from explicit master seeds through a splitmix-based
//! derivation, so every artifact (datasets, training runs, attacks) is
//! bit-reproducible regardless of thread count.

pub mod attacks;
pub mod bench;
pub mod curriculum;
pub mod hierarchy;
pub mod net;
pub mod seed;
pub mod synth;

pub use attacks::{
    cross_entropy, masked_ce, pgd, AdversarialOutcome, AttackError, AttackKind, AttackSpec,
    NhaVariant,
};
pub use bench::{
    default_suite, evaluate_attack, evaluate_clean, render_csv, run_suite, BenchError, CleanEval,
    EvalRecord, SuiteReport, SuiteSummary,
};
pub use curriculum::{
    chat_train, clean_train, curriculum_start, fat_train, make_schedule, relabel,
    trades_logit_grads, trades_objective, trades_train, warm_up, FatConfig, HeadTransfer,
    ScheduleMode, StageReport, StageSchedule, TradesConfig, TrainError, TrainerKind,
};
pub use hierarchy::{Hierarchy, NodeRef, TreeError, TreeFile};
pub use net::{
    load_checkpoint, relative_error, save_checkpoint, AdamConfig, AdamState, Checkpoint,
    Classifier, HeadInit, LinearHead, Mlp, NetError,
};
pub use seed::{derive_seed, splitmix64, stream};
pub use synth::{
    gen_data, gen_synth, gen_tree, load_manifest, load_split, write_dataset_dir, DataParams,
    Dataset, Manifest, SampleSpec, SplitDataset, SynthConfig, SynthError,
};
