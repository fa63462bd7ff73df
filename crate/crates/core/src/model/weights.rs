//! Parameter containers, generic over what each slot holds: [`Tensor`] for
//! stored weights, [`Var`](crate::tensor::Var) once bound to a tape.
//!
//! Every container walks its slots in one fixed order; checkpoint manifests
//! and optimizer state both rely on it.

use rand::{Rng, RngCore};

use super::ModelConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[in × out]`
    pub weight: T,
    /// `[out]`
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

/// `Linear → LayerNorm → ReLU → Dropout` repeated, then a final `Linear`.
/// A depth-1 MLP is a single linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    /// One per hidden layer, `layers.len() - 1` in total.
    pub norms: Vec<Norm<T>>,
}

/// Per-head projections. `query`, `key`, `value` are `[d × d/H]`; `output`
/// is this head's `[d/H × d]` slice of the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub heads: Vec<Head<T>>,
    pub out_bias: T,
    pub norm: Norm<T>,
    pub post: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub attention: Attention<T>,
    /// image → attribute space
    pub image_attr: Mlp<T>,
    /// image → object space
    pub image_obj: Mlp<T>,
    /// attended attribute token → attribute space
    pub text_attr: Mlp<T>,
    /// attended object token → object space
    pub text_obj: Mlp<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl<T> Mlp<T> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Mlp<U> {
        // same interleaving as visit
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.map(f));
            if let Some(n) = self.norms.get(i) {
                norms.push(n.map(f));
            }
        }
        Mlp { layers, norms }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{i}"), out);
            if let Some(n) = self.norms.get(i) {
                n.visit(&format!("{prefix}.norm{i}"), out);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        let mut norms = self.norms.iter_mut();
        for layer in self.layers.iter_mut() {
            layer.visit_mut(out);
            if let Some(n) = norms.next() {
                n.visit_mut(out);
            }
        }
    }
}

impl<T> Attention<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attention<U> {
        let heads = self
            .heads
            .iter()
            .map(|h| Head {
                query: f(&h.query),
                key: f(&h.key),
                value: f(&h.value),
                output: f(&h.output),
            })
            .collect();
        Attention {
            heads,
            out_bias: f(&self.out_bias),
            norm: self.norm.map(f),
            post: self.post.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{i}.query"), &h.query));
            out.push((format!("{prefix}.head{i}.key"), &h.key));
            out.push((format!("{prefix}.head{i}.value"), &h.value));
            out.push((format!("{prefix}.head{i}.output"), &h.output));
        }
        out.push((format!("{prefix}.out_bias"), &self.out_bias));
        self.norm.visit(&format!("{prefix}.norm"), out);
        self.post.visit(&format!("{prefix}.post"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        for h in self.heads.iter_mut() {
            out.push(&mut h.query);
            out.push(&mut h.key);
            out.push(&mut h.value);
            out.push(&mut h.output);
        }
        out.push(&mut self.out_bias);
        self.norm.visit_mut(out);
        self.post.visit_mut(out);
    }
}

impl<T> Weights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            attention: self.attention.map(&mut f),
            image_attr: self.image_attr.map(&mut f),
            image_obj: self.image_obj.map(&mut f),
            text_attr: self.text_attr.map(&mut f),
            text_obj: self.text_obj.map(&mut f),
        }
    }

    /// Named slots in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.attention.visit("attention", &mut out);
        self.image_attr.visit("image_attr", &mut out);
        self.image_obj.visit("image_obj", &mut out);
        self.text_attr.visit("text_attr", &mut out);
        self.text_obj.visit("text_obj", &mut out);
        out
    }

    /// Mutable slots in the same order as [`Weights::named`].
    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.attention.visit_mut(&mut out);
        self.image_attr.visit_mut(&mut out);
        self.image_obj.visit_mut(&mut out);
        self.text_attr.visit_mut(&mut out);
        self.text_obj.visit_mut(&mut out);
        out
    }
}

/// Layer widths of an MLP of `depth` linear layers; hidden layers use the
/// mean of the input and output widths.
pub fn mlp_widths(input: usize, output: usize, depth: usize) -> Vec<usize> {
    let hidden = ((input + output) / 2).max(1);
    let mut widths = vec![input];
    widths.extend(std::iter::repeat_n(hidden, depth.saturating_sub(1)));
    widths.push(output);
    widths
}

/// Creates a tensor for a slot of the given shape; `fan_in` drives the
/// initialization scale. Norm slots are handled separately.
type Init<'a> = dyn FnMut(&[usize], usize) -> Tensor + 'a;

fn linear(init: &mut Init<'_>, input: usize, output: usize) -> Linear<Tensor> {
    Linear {
        weight: init(&[input, output], input),
        bias: init(&[output], input),
    }
}

fn norm(d: usize) -> Norm<Tensor> {
    Norm {
        gain: Tensor::ones(&[d]),
        bias: Tensor::zeros(&[d]),
    }
}

fn mlp(init: &mut Init<'_>, input: usize, output: usize, depth: usize) -> Mlp<Tensor> {
    let widths = mlp_widths(input, output, depth);
    Mlp {
        layers: widths.windows(2).map(|w| linear(init, w[0], w[1])).collect(),
        norms: widths[1..widths.len() - 1].iter().map(|&d| norm(d)).collect(),
    }
}

fn build(config: &ModelConfig, init: &mut Init<'_>) -> Weights<Tensor> {
    let d = config.d_word;
    let dh = d / config.heads;
    let heads = (0..config.heads)
        .map(|_| Head {
            query: init(&[d, dh], d),
            key: init(&[d, dh], d),
            value: init(&[d, dh], d),
            output: init(&[dh, d], d),
        })
        .collect();
    let attention = Attention {
        heads,
        out_bias: init(&[d], d),
        norm: norm(d),
        post: linear(init, d, d),
    };
    let depth = config.mlp_depth;
    Weights {
        attention,
        image_attr: mlp(init, config.d_img, config.d_shared, depth),
        image_obj: mlp(init, config.d_img, config.d_shared, depth),
        text_attr: mlp(init, d, config.d_shared, depth),
        text_obj: mlp(init, d, config.d_shared, depth),
    }
}

impl Weights<Tensor> {
    /// Uniform `±1/sqrt(fan_in)` weights and biases, unit norm gains.
    pub fn random<R: RngCore + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        build(config, &mut |shape, fan_in| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
                .expect("positive dims")
        })
    }

    /// All-zero weights with the right shapes, used as a loading skeleton.
    pub fn zeros(config: &ModelConfig) -> Self {
        build(config, &mut |shape, _| Tensor::zeros(shape))
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}
