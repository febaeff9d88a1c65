//! `key=value` configuration files: one pair per line, `#` starts a comment.
//!
//! Training files accept `shape` (`<rows>x<cols>x<frames>`), `steps`, `lr`,
//! `momentum`, `beta`, `t_latent`, `gamma`, `seed`, `text_dropout`,
//! `dataset_size`, `trainable` (`all` or `attention-norm-control`) and the
//! model size keys `n_blocks`, `d_model`, `n_heads`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use outdreamer_core::model::{ModelConfig, Trainable};
use outdreamer_core::training::TrainConfig;

/// Parsed pairs; fields are removed as they are consumed so leftovers can be
/// reported as unknown keys.
#[derive(Debug, Default)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        for token in tokens {
            let (k, v) = token.split_once('=').ok_or_else(|| format!("expected key=value, found {token:?}"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(format!("empty key in {token:?}"));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(format!("duplicate key {k}"));
            }
        }
        Ok(Self(map))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or_default().trim())
            .filter(|l| !l.is_empty());
        Self::from_tokens(lines)
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    /// Error if any key was not consumed.
    pub fn finish(self) -> Result<(), String> {
        match self.0.keys().next() {
            Some(k) => Err(format!("unknown key {k}")),
            None => Ok(()),
        }
    }
}

fn convert<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| format!("{key}: cannot parse {raw:?}: {e}"))
}

/// Required field.
pub fn parse_field<T: FromStr>(kv: &mut KeyValues, key: &str) -> Result<T, String>
where
    T::Err: Display,
{
    let raw = kv.take(key).ok_or_else(|| format!("missing key {key}"))?;
    convert(key, &raw)
}

fn optional<T: FromStr>(kv: &mut KeyValues, key: &str, slot: &mut T) -> Result<(), String>
where
    T::Err: Display,
{
    if let Some(raw) = kv.take(key) {
        *slot = convert(key, &raw)?;
    }
    Ok(())
}

pub fn parse_shape(raw: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = raw.split('x').collect();
    let [r, c, f] = parts[..] else {
        return Err(format!("shape must be <rows>x<cols>x<frames>, found {raw:?}"));
    };
    Ok((convert("shape", r)?, convert("shape", c)?, convert("shape", f)?))
}

/// A training run: optimisation settings plus the model to build.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut kv = KeyValues::parse(text)?;
        let mut out = Self::default();
        let t = &mut out.train;
        if let Some(raw) = kv.take("shape") {
            (t.rows, t.cols, t.frames) = parse_shape(&raw)?;
        }
        optional(&mut kv, "steps", &mut t.steps)?;
        optional(&mut kv, "lr", &mut t.lr)?;
        optional(&mut kv, "momentum", &mut t.momentum)?;
        optional(&mut kv, "beta", &mut t.loss.beta)?;
        optional(&mut kv, "t_latent", &mut t.loss.t_latent)?;
        optional(&mut kv, "seed", &mut t.seed)?;
        optional(&mut kv, "text_dropout", &mut t.text_dropout)?;
        optional(&mut kv, "dataset_size", &mut t.dataset_size)?;
        if let Some(raw) = kv.take("trainable") {
            t.trainable = match raw.as_str() {
                "all" => Trainable::All,
                "attention-norm-control" => Trainable::AttentionNormControl,
                other => return Err(format!("trainable: unknown set {other:?}")),
            };
        }
        let b = &mut out.model.backbone;
        optional(&mut kv, "gamma", &mut b.gamma)?;
        optional(&mut kv, "n_blocks", &mut b.n_blocks)?;
        optional(&mut kv, "d_model", &mut b.d_model)?;
        optional(&mut kv, "n_heads", &mut b.n_heads)?;
        kv.finish()?;
        Ok(out)
    }
}
