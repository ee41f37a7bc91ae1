//! Scene files, synthetic data, splits, augmentation and uncertainty
//! statistics.

pub mod analysis;
pub mod augment;
pub mod io;
pub mod split;
pub mod synthetic;

pub use analysis::{
    confusion_and_topk, dataset_statistics, detect_class_switches, majority_vote_smooth, ClassSwitch,
    ConfusionReport, DatasetStats, SwitchReport,
};
pub use augment::{rotate_scene, AugmentationConfig};
pub use io::{load_scenes, load_scenes_lenient, write_scenes, LoadReport};
pub use split::{split_scenes, DatasetSplit};
pub use synthetic::{generate_synthetic, ClassKinematics, GeneratorConfig, GeneratorSpec, PerceptionNoiseModel};
