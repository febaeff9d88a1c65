//! Weight checkpoints.
//!
//! Layout: a little-endian `u64` byte length, then that many bytes of UTF-8
//! manifest, then the raw tensor data as little-endian `f64`. The manifest
//! is line based:
//!
//! ```text
//! outdreamer-checkpoint 1
//! config n_blocks=4 d_model=64 …
//! tensor <name> <dim>x<dim>… <byte offset into the data section>
//! ```

use std::fs;
use std::path::Path;

use outdreamer_core::control::ControlConfig;
use outdreamer_core::diffusion::LatentNorm;
use outdreamer_core::dit::BackboneConfig;
use outdreamer_core::model::{ModelConfig, OutDreamer};

use crate::config::{parse_field, KeyValues};
use crate::{CliError, CliResult};

const MAGIC: &str = "outdreamer-checkpoint 1";

pub fn config_line(c: &ModelConfig) -> String {
    let b = &c.backbone;
    format!(
        "n_blocks={} d_model={} n_heads={} gamma={:?} mlp_ratio={} latent_channels={} time_embed_dim={} \
         scaler_hidden={} position_encoding={} control_hidden={} control_layers={} stats_gradient={} \
         latent_shift={:?} latent_scale={:?}",
        b.n_blocks,
        b.d_model,
        b.n_heads,
        b.gamma,
        b.mlp_ratio,
        b.latent_channels,
        b.time_embed_dim,
        b.scaler_hidden,
        b.position_encoding,
        c.control.hidden,
        c.control.layers,
        c.control.stats_gradient,
        c.latent_norm.shift,
        c.latent_norm.scale
    )
}

pub fn parse_config_line(line: &str) -> Result<ModelConfig, String> {
    let mut kv = KeyValues::from_tokens(line.split_whitespace())?;
    let backbone = BackboneConfig {
        n_blocks: parse_field(&mut kv, "n_blocks")?,
        d_model: parse_field(&mut kv, "d_model")?,
        n_heads: parse_field(&mut kv, "n_heads")?,
        gamma: parse_field(&mut kv, "gamma")?,
        mlp_ratio: parse_field(&mut kv, "mlp_ratio")?,
        latent_channels: parse_field(&mut kv, "latent_channels")?,
        time_embed_dim: parse_field(&mut kv, "time_embed_dim")?,
        scaler_hidden: parse_field(&mut kv, "scaler_hidden")?,
        position_encoding: parse_field(&mut kv, "position_encoding")?,
    };
    let control = ControlConfig {
        hidden: parse_field(&mut kv, "control_hidden")?,
        layers: parse_field(&mut kv, "control_layers")?,
        stats_gradient: parse_field(&mut kv, "stats_gradient")?,
    };
    let latent_norm = LatentNorm {
        shift: parse_field(&mut kv, "latent_shift")?,
        scale: parse_field(&mut kv, "latent_scale")?,
    };
    kv.finish()?;
    Ok(ModelConfig {
        backbone,
        control,
        latent_norm,
    })
}

pub fn to_bytes(model: &OutDreamer) -> Vec<u8> {
    let mut manifest = format!("{MAGIC}\nconfig {}\n", config_line(&model.config));
    let mut data = Vec::new();
    for (_, p) in model.params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
        manifest.push_str(&format!("tensor {} {dims} {}\n", p.name, data.len()));
        for v in p.value.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = (manifest.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&data);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<OutDreamer, String> {
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or("file shorter than the length prefix")?.try_into().unwrap();
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| "manifest length overflows")?;
    let manifest = bytes.get(8..8 + len).ok_or("truncated manifest")?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| "manifest is not UTF-8")?;
    let data = &bytes[8 + len..];

    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(format!("missing header line {MAGIC:?}"));
    }
    let config = lines
        .next()
        .and_then(|l| l.strip_prefix("config "))
        .ok_or("missing config line")?;
    let config = parse_config_line(config)?;
    let mut model = OutDreamer::new(config, 0).map_err(|e| e.to_string())?;
    let mut seen = vec![false; model.params.len()];
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [tag, name, dims, offset] = fields[..] else {
            return Err(format!("malformed line {line:?}"));
        };
        if tag != "tensor" {
            return Err(format!("unknown record {tag:?}"));
        }
        let id = model.params.find(name).ok_or_else(|| format!("unknown tensor {name}"))?;
        let param = model.params.get_mut(id);
        let shape: Vec<usize> = if dims == "scalar" {
            Vec::new()
        } else {
            dims.split('x').map(|d| d.parse().map_err(|_| format!("bad shape {dims:?}"))).collect::<Result<_, _>>()?
        };
        if shape != param.value.shape() {
            return Err(format!("{name}: stored shape {shape:?}, model expects {:?}", param.value.shape()));
        }
        let offset: usize = offset.parse().map_err(|_| format!("bad offset {offset:?}"))?;
        let n = param.value.numel();
        let raw = data.get(offset..offset + 8 * n).ok_or_else(|| format!("{name}: data out of range"))?;
        for (dst, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if std::mem::replace(&mut seen[model.params.iter().position(|(p, _)| p == id).unwrap()], true) {
            return Err(format!("{name} stored twice"));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = &model.params.iter().nth(missing).unwrap().1.name;
        return Err(format!("tensor {name} missing"));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &OutDreamer) -> CliResult<()> {
    fs::write(path, to_bytes(model)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<OutDreamer> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes).map_err(|m| CliError::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.backbone.n_blocks = 2;
        c.backbone.d_model = 16;
        c.backbone.n_heads = 2;
        c.backbone.gamma = 0.1 + 0.2;
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = OutDreamer::new(small(), 7).unwrap();
        let back = from_bytes(&to_bytes(&model)).unwrap();
        assert_eq!(back.config, model.config);
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&OutDreamer::new(small(), 1).unwrap());
        assert!(from_bytes(&bytes[..4]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[8] = b'X';
        assert!(from_bytes(&wrong_magic).is_err());
    }

    #[test]
    fn config_line_round_trips() {
        let c = small();
        assert_eq!(parse_config_line(&config_line(&c)).unwrap(), c);
        assert!(parse_config_line("n_blocks=2").is_err());
    }
}
