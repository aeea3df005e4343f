use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter tensors. The name set is a pure function of the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let hidden = cfg.mlp_ratio * d;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| out.push((name.to_string(), shape, init));
    push("embed.word", vec![cfg.vocab_size, d], Init::Normal);
    push("embed.patch.weight", vec![cfg.patch_dim(), d], Init::Normal);
    push("embed.patch.bias", vec![d], Init::Zeros);
    push("embed.text_cls", vec![1, d], Init::Normal);
    push("embed.video_cls", vec![1, d], Init::Normal);
    push("embed.text_pos", vec![cfg.text_len(), d], Init::Normal);
    push("embed.video_pos", vec![cfg.frames * cfg.frame_len(), d], Init::Normal);
    push("embed.text_type", vec![d], Init::Normal);
    push("embed.video_type", vec![d], Init::Normal);
    for l in 0..cfg.layers {
        let p = format!("blocks.{l}");
        push(&format!("{p}.ln1.gamma"), vec![d], Init::Ones);
        push(&format!("{p}.ln1.beta"), vec![d], Init::Zeros);
        push(&format!("{p}.attn.qkv.weight"), vec![d, 3 * d], Init::Normal);
        push(&format!("{p}.attn.qkv.bias"), vec![3 * d], Init::Zeros);
        push(&format!("{p}.attn.out.weight"), vec![d, d], Init::Normal);
        push(&format!("{p}.attn.out.bias"), vec![d], Init::Zeros);
        push(&format!("{p}.ln2.gamma"), vec![d], Init::Ones);
        push(&format!("{p}.ln2.beta"), vec![d], Init::Zeros);
        push(&format!("{p}.mlp.fc1.weight"), vec![d, hidden], Init::Normal);
        push(&format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
        push(&format!("{p}.mlp.fc2.weight"), vec![hidden, d], Init::Normal);
        push(&format!("{p}.mlp.fc2.bias"), vec![d], Init::Zeros);
    }
    push("final_norm.gamma", vec![d], Init::Ones);
    push("final_norm.beta", vec![d], Init::Zeros);
    push("head.vtm.weight", vec![d, 2], Init::Normal);
    push("head.vtm.bias", vec![2], Init::Zeros);
    push("head.mlm.weight", vec![d, cfg.vocab_size], Init::Normal);
    push("head.mlm.bias", vec![cfg.vocab_size], Init::Zeros);
    push("head.qa.fc1.weight", vec![d, d], Init::Normal);
    push("head.qa.fc1.bias", vec![d], Init::Zeros);
    push("head.qa.fc2.weight", vec![d, cfg.qa_answers], Init::Normal);
    push("head.qa.fc2.bias", vec![cfg.qa_answers], Init::Zeros);
    push("head.vtc_video.weight", vec![d, cfg.vtc_dim], Init::Normal);
    push("head.vtc_video.bias", vec![cfg.vtc_dim], Init::Zeros);
    push("head.vtc_text.weight", vec![d, cfg.vtc_dim], Init::Normal);
    push("head.vtc_text.bias", vec![cfg.vtc_dim], Init::Zeros);
    out
}

impl ParameterStore {
    /// Truncation-free normal(0, init_std) weights, zero biases, unit
    /// layer-norm gains. Values are rounded through f32 so a fresh model
    /// survives a checkpoint round trip unchanged.
    pub fn init(cfg: &ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        cfg.validate()?;
        let normal =
            Normal::new(0.0, cfg.init_std).map_err(|e| Error::Contract(format!("init_std {}: {e}", cfg.init_std)))?;
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Normal => Tensor::from_fn(&shape, |_| normal.sample(rng) as f32 as f64),
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Builds a store from loaded tensors, requiring exactly the names and
    /// shapes `cfg` implies.
    pub fn from_tensors(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = layout(cfg);
        let mut missing = Vec::new();
        let mut out = BTreeMap::new();
        for (name, shape, _) in expected {
            match tensors.remove(&name) {
                None => missing.push(name),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) => {
                    out.insert(name, t);
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing parameter(s): {}", missing.join(", "))));
        }
        if !tensors.is_empty() {
            let extra: Vec<&str> = tensors.keys().map(String::as_str).collect();
            return Err(Error::Checkpoint(format!("unknown parameter(s): {}", extra.join(", "))));
        }
        Ok(Self { tensors: out })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let cfg = ModelConfig::desk();
        let a = ParameterStore::init(&cfg, &mut SplitMix64::new(5)).unwrap();
        let b = ParameterStore::init(&cfg, &mut SplitMix64::new(5)).unwrap();
        assert_eq!(a, b);
        for (_, t) in a.iter() {
            assert!(t.data().iter().all(|&v| v as f32 as f64 == v));
        }
        assert_eq!(a.get("blocks.0.ln1.gamma").unwrap().data(), &[1.0; 64][..]);
        assert!(a.get("head.vtm.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn name_set_is_closed() {
        let cfg = ModelConfig { layers: 1, ..ModelConfig::desk() };
        let store = ParameterStore::init(&cfg, &mut SplitMix64::new(1)).unwrap();
        let mut tensors: BTreeMap<String, Tensor> = store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        assert!(ParameterStore::from_tensors(&cfg, tensors.clone()).is_ok());

        tensors.insert("blocks.9.ln1.gamma".into(), Tensor::ones(&[64]));
        let err = ParameterStore::from_tensors(&cfg, tensors.clone()).unwrap_err().to_string();
        assert!(err.contains("blocks.9.ln1.gamma"), "{err}");

        tensors.remove("blocks.9.ln1.gamma");
        tensors.remove("embed.word");
        let err = ParameterStore::from_tensors(&cfg, tensors).unwrap_err().to_string();
        assert!(err.contains("embed.word"), "{err}");
    }
}
