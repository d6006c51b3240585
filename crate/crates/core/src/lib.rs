//! Counterfactual explanations of binary classifiers by exaggeration: a
//! conditional GAN learns to perturb an image until a frozen classifier's
//! posterior lands in a requested bin.

pub mod blackbox;
pub mod conditioning;
pub mod error;
pub mod evalsuite;
pub mod explain;
pub mod graph;
pub mod io;
pub mod layers;
pub mod losses;
pub mod nets;
pub mod param;
pub mod stats;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use conditioning::{BinIndex, ConditionSpec, POSTERIOR_EPS};
pub use blackbox::{BlackBox, ConvClassifier, OracleClassifier};
pub use error::{Error, Result};
pub use evalsuite::EvalReport;
pub use explain::{ExplanationSeries, Explainer, SaliencyMap};
pub use nets::{Discriminator, Encoder, Generator, NetConfig};
pub use synthdata::LabeledImageDataset;
pub use tensor::{Element, Tensor};
pub use trainer::{ExplainerBundle, TrainConfig};
