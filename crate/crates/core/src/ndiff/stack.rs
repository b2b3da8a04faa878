use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::layers::{Act, BatchNorm, BnCache, Conv1d, Dropout, Embedding, Linear};
use crate::ndiff::rnn::{BiLstm, BiLstmCache, Lstm, LstmStepCache};
use crate::ndiff::store::ParameterStore;
use crate::ndiff::tensor::{Scalar, Tensor};

/// One layer of a [`LayerStack`].
#[derive(Debug, Clone)]
pub enum LayerKind {
    Embedding { vocab: usize, dim: usize },
    Conv1d { in_ch: usize, out_ch: usize, kernel: usize },
    BatchNorm { channels: usize },
    Activation(Act),
    Recurrent { input: usize, hidden: usize },
    BiRecurrent { input: usize, hidden: usize },
    FullyConnected { input: usize, output: usize },
    Dropout { p: f64 },
}

#[derive(Debug, Clone)]
pub struct LayerConfig {
    /// Parameter-name prefix; must be unique within a stack.
    pub name: String,
    pub kind: LayerKind,
    /// Per-layer seed component mixed with the stack seed at init.
    pub seed: u64,
}

impl LayerConfig {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerConfig {
            name: name.into(),
            kind,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Input to a stack: a feature sequence, or token ids when the first
/// layer is an embedding.
pub enum StackInput<'a, S> {
    Seq(&'a Tensor<S>),
    Tokens(&'a [usize]),
}

/// Ordered list of layers applied left to right to a `[rows, cols]`
/// sequence. Provides the generic forward/backward used by the gradient
/// harness; the full models wire layers by hand instead.
#[derive(Debug, Clone, Default)]
pub struct LayerStack {
    pub layers: Vec<LayerConfig>,
}

pub enum LayerCache<S: Scalar> {
    Embedding { tokens: Vec<usize> },
    Conv { x: Tensor<S> },
    BatchNorm { bn: BnCache<S> },
    Activation { x: Tensor<S> },
    Recurrent { steps: Vec<LstmStepCache<S>> },
    BiRecurrent { both: BiLstmCache<S> },
    FullyConnected { x: Tensor<S> },
    Dropout { mask: Vec<S> },
}

pub struct StackCache<S: Scalar> {
    layers: Vec<LayerCache<S>>,
}

fn mix_seed(stack_seed: u64, layer_seed: u64, index: usize) -> u64 {
    let mut z = stack_seed
        .wrapping_add(layer_seed.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add((index as u64).wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl LayerStack {
    pub fn new(layers: Vec<LayerConfig>) -> Self {
        LayerStack { layers }
    }

    /// Deterministically initializes every parameter of the stack.
    pub fn seeded_init<S: Scalar>(&self, seed: u64) -> ParameterStore<S> {
        let mut ps = ParameterStore::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, layer.seed, idx));
            match &layer.kind {
                LayerKind::Embedding { vocab, dim } => {
                    Embedding::new(&layer.name, *vocab, *dim).init(&mut ps, &mut rng)
                }
                LayerKind::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                } => Conv1d::new(&layer.name, *in_ch, *out_ch, *kernel).init(&mut ps, &mut rng),
                LayerKind::BatchNorm { channels } => {
                    BatchNorm::new(&layer.name, *channels).init(&mut ps, &mut rng)
                }
                LayerKind::Activation(_) | LayerKind::Dropout { .. } => {}
                LayerKind::Recurrent { input, hidden } => {
                    Lstm::new(&layer.name, *input, *hidden).init(&mut ps, &mut rng)
                }
                LayerKind::BiRecurrent { input, hidden } => {
                    BiLstm::new(&layer.name, *input, *hidden).init(&mut ps, &mut rng)
                }
                LayerKind::FullyConnected { input, output } => {
                    Linear::new(&layer.name, *input, *output).init(&mut ps, &mut rng)
                }
            }
        }
        ps
    }

    /// Names of parameters that receive gradients (excludes batch-norm
    /// running statistics).
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Embedding { vocab, dim } => {
                    names.extend(Embedding::new(&layer.name, *vocab, *dim).param_names())
                }
                LayerKind::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                } => names.extend(Conv1d::new(&layer.name, *in_ch, *out_ch, *kernel).param_names()),
                LayerKind::BatchNorm { channels } => {
                    names.extend(BatchNorm::new(&layer.name, *channels).param_names())
                }
                LayerKind::Activation(_) | LayerKind::Dropout { .. } => {}
                LayerKind::Recurrent { input, hidden } => {
                    names.extend(Lstm::new(&layer.name, *input, *hidden).param_names())
                }
                LayerKind::BiRecurrent { input, hidden } => {
                    names.extend(BiLstm::new(&layer.name, *input, *hidden).param_names())
                }
                LayerKind::FullyConnected { input, output } => {
                    names.extend(Linear::new(&layer.name, *input, *output).param_names())
                }
            }
        }
        names
    }

    /// Applies the shape law without touching any data. Errors name the
    /// offending layer and dimension.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let loc = format!("layer {idx} ({})", layer.name);
            shape = match &layer.kind {
                LayerKind::Embedding { dim, .. } => {
                    if shape.len() != 1 {
                        return Err(Error::shape(&loc, "rank-1 token ids", &shape));
                    }
                    vec![shape[0], *dim]
                }
                LayerKind::Conv1d { in_ch, out_ch, .. } => {
                    expect_cols(&loc, &shape, *in_ch)?;
                    vec![shape[0], *out_ch]
                }
                LayerKind::BatchNorm { channels } => {
                    expect_cols(&loc, &shape, *channels)?;
                    shape
                }
                LayerKind::Activation(_) | LayerKind::Dropout { .. } => shape,
                LayerKind::Recurrent { input, hidden } => {
                    expect_cols(&loc, &shape, *input)?;
                    vec![shape[0], *hidden]
                }
                LayerKind::BiRecurrent { input, hidden } => {
                    expect_cols(&loc, &shape, *input)?;
                    vec![shape[0], 2 * hidden]
                }
                LayerKind::FullyConnected { input, output } => {
                    expect_cols(&loc, &shape, *input)?;
                    vec![shape[0], *output]
                }
            };
        }
        Ok(shape)
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        input: StackInput<S>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<S>> {
        Ok(self.forward_cached(ps, input, mode, rng)?.0)
    }

    pub fn forward_cached<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        input: StackInput<S>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<S>, StackCache<S>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current: Tensor<S>;
        let mut layers = self.layers.iter().enumerate();
        match input {
            StackInput::Tokens(tokens) => {
                let Some((idx, first)) = layers.next() else {
                    return Err(Error::InvalidArg("empty stack on token input".into()));
                };
                let LayerKind::Embedding { vocab, dim } = &first.kind else {
                    return Err(Error::shape(
                        format!("layer {idx} ({})", first.name),
                        "sequence input",
                        "token ids",
                    ));
                };
                let emb = Embedding::new(&first.name, *vocab, *dim);
                current = emb.forward(ps, tokens)?;
                caches.push(LayerCache::Embedding {
                    tokens: tokens.to_vec(),
                });
            }
            StackInput::Seq(t) => {
                current = t.clone();
            }
        }
        for (idx, layer) in layers {
            let loc = format!("layer {idx} ({})", layer.name);
            match &layer.kind {
                LayerKind::Embedding { .. } => {
                    return Err(Error::shape(&loc, "token ids at stack head", "mid-stack"));
                }
                LayerKind::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                } => {
                    let conv = Conv1d::new(&layer.name, *in_ch, *out_ch, *kernel);
                    let y = conv.forward(ps, &current)?;
                    caches.push(LayerCache::Conv { x: current });
                    current = y;
                }
                LayerKind::BatchNorm { channels } => {
                    let bn = BatchNorm::new(&layer.name, *channels);
                    match mode {
                        Mode::Train => {
                            let (y, cache) = bn.forward_train(ps, &current)?;
                            caches.push(LayerCache::BatchNorm { bn: cache });
                            current = y;
                        }
                        Mode::Eval => {
                            current = bn.forward_eval(ps, &current)?;
                            caches.push(LayerCache::Activation { x: Tensor::zeros(&[0]) });
                        }
                    }
                }
                LayerKind::Activation(act) => {
                    let y = act.forward_seq(&current);
                    caches.push(LayerCache::Activation { x: current });
                    current = y;
                }
                LayerKind::Recurrent { input, hidden } => {
                    let lstm = Lstm::new(&layer.name, *input, *hidden);
                    let (y, steps) = lstm.forward_seq(ps, &current)?;
                    caches.push(LayerCache::Recurrent { steps });
                    current = y;
                }
                LayerKind::BiRecurrent { input, hidden } => {
                    let rnn = BiLstm::new(&layer.name, *input, *hidden);
                    let (y, both) = rnn.forward_seq(ps, &current)?;
                    caches.push(LayerCache::BiRecurrent { both });
                    current = y;
                }
                LayerKind::FullyConnected { input, output } => {
                    let lin = Linear::new(&layer.name, *input, *output);
                    let y = lin.forward_seq(ps, &current)?;
                    caches.push(LayerCache::FullyConnected { x: current });
                    current = y;
                }
                LayerKind::Dropout { p } => {
                    let mask = match mode {
                        Mode::Train => Dropout::new(*p).make_mask(rng, current.len()),
                        Mode::Eval => vec![S::one(); current.len()],
                    };
                    let mut y = current.clone();
                    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
                        *v = *v * m;
                    }
                    caches.push(LayerCache::Dropout { mask });
                    current = y;
                }
            }
        }
        Ok((current, StackCache { layers: caches }))
    }

    /// Backward pass for a train-mode forward. Returns the gradient with
    /// respect to the sequence input, or `None` when the stack starts at
    /// an embedding.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &StackCache<S>,
        dy: &Tensor<S>,
    ) -> Result<Option<Tensor<S>>> {
        let mut d = dy.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            match (&layer.kind, lc) {
                (LayerKind::Embedding { vocab, dim }, LayerCache::Embedding { tokens }) => {
                    let emb = Embedding::new(&layer.name, *vocab, *dim);
                    emb.backward(grads, tokens, &d)?;
                    return Ok(None);
                }
                (
                    LayerKind::Conv1d {
                        in_ch,
                        out_ch,
                        kernel,
                    },
                    LayerCache::Conv { x },
                ) => {
                    let conv = Conv1d::new(&layer.name, *in_ch, *out_ch, *kernel);
                    d = conv.backward(ps, grads, x, &d)?;
                }
                (LayerKind::BatchNorm { channels }, LayerCache::BatchNorm { bn }) => {
                    let layer_bn = BatchNorm::new(&layer.name, *channels);
                    d = layer_bn.backward(ps, grads, bn, &d)?;
                }
                (LayerKind::Activation(act), LayerCache::Activation { x }) => {
                    d = act.backward_seq(x, &d);
                }
                (LayerKind::Recurrent { input, hidden }, LayerCache::Recurrent { steps }) => {
                    let lstm = Lstm::new(&layer.name, *input, *hidden);
                    d = lstm.backward_seq(ps, grads, steps, &d)?;
                }
                (LayerKind::BiRecurrent { input, hidden }, LayerCache::BiRecurrent { both }) => {
                    let rnn = BiLstm::new(&layer.name, *input, *hidden);
                    d = rnn.backward_seq(ps, grads, both, &d)?;
                }
                (LayerKind::FullyConnected { input, output }, LayerCache::FullyConnected { x }) => {
                    let lin = Linear::new(&layer.name, *input, *output);
                    d = lin.backward_seq(ps, grads, x, &d)?;
                }
                (LayerKind::Dropout { .. }, LayerCache::Dropout { mask }) => {
                    for (v, &m) in d.data_mut().iter_mut().zip(mask) {
                        *v = *v * m;
                    }
                }
                _ => {
                    return Err(Error::InvalidArg(
                        "stack cache does not match layer list".into(),
                    ))
                }
            }
        }
        Ok(Some(d))
    }
}

fn expect_cols(loc: &str, shape: &[usize], want: usize) -> Result<()> {
    if shape.len() != 2 {
        return Err(Error::shape(loc, "rank-2 sequence", shape));
    }
    if shape[1] != want {
        return Err(Error::shape(loc, format!("cols = {want}"), shape));
    }
    Ok(())
}
