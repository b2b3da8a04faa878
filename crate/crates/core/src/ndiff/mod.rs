//! Deterministic tensor math with hand-derived backprop.
//!
//! Everything is generic over [`tensor::Scalar`]: training runs in `f32`,
//! the gradient checker runs the identical code paths in `f64`.
//! Parameters live in a [`store::ParameterStore`] keyed by dotted names;
//! layers are stateless descriptors that read and write the store.
//!
//! Initialization conventions: weights draw from
//! U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases start at zero (LSTM
//! forget-gate bias at one), embeddings draw from U(-0.1, 0.1).

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod rnn;
pub mod stack;
pub mod store;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use layers::{softmax, softmax_backward, Act, BatchNorm, Conv1d, Dropout, Embedding, Linear};
pub use optim::{Sgd, SgdConfig};
pub use rnn::{BiLstm, Lstm, LstmState, LstmStepCache};
pub use stack::{LayerConfig, LayerKind, LayerStack, Mode, StackInput};
pub use store::{load_feature, save_feature, FeatureRole, ParameterStore};
pub use tensor::{Dtype, Scalar, Tensor};
