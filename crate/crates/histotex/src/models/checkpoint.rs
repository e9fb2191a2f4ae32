//! Model checkpoint serialization.
//!
//! Layout: a versioned text header carrying the config and training
//! metadata as `key = value` lines, a `---` separator, then one binary
//! record per tensor (trainable parameters first, then buffers):
//! `u32 name length, name bytes, u32 rank, u64 dims..., f64 little-endian
//! data`. Writing is fully deterministic, so identical models produce
//! byte-identical files, and a load/save round trip preserves forward
//! outputs bit for bit.

use super::{Model, ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

const MAGIC: &str = "histotex-checkpoint v1";

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    /// Best epoch the stored weights come from (1-based; 0 = untrained).
    pub epoch: u64,
    pub val_loss: Elem,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self { epoch: 0, val_loss: Elem::INFINITY }
    }
}

fn pair_str(p: (usize, usize)) -> String {
    format!("{}x{}", p.0, p.1)
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| Error::Format(format!("expected AxB pair, got '{}'", s)))?;
    Ok((
        a.parse().map_err(|_| Error::Format(format!("bad pair '{}'", s)))?,
        b.parse().map_err(|_| Error::Format(format!("bad pair '{}'", s)))?,
    ))
}

/// The config as ordered `(key, value)` pairs; also used by the experiment
/// config format.
pub fn config_to_kv(config: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("kind".into(), config.kind.name().into()),
        ("num_classes".into(), config.num_classes.to_string()),
        ("input_size".into(), pair_str(config.input_size)),
        ("in_channels".into(), config.in_channels.to_string()),
        ("bins".into(), config.bins.to_string()),
        ("filters".into(), config.filters.to_string()),
        ("kernel".into(), pair_str(config.kernel)),
        ("stride".into(), pair_str(config.stride)),
        (
            "backbone_channels".into(),
            config
                .backbone_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("blocks_per_stage".into(), config.blocks_per_stage.to_string()),
        ("stem_pool".into(), config.stem_pool.to_string()),
        ("hist_kernel".into(), pair_str(config.hist_kernel)),
        ("hist_stride".into(), pair_str(config.hist_stride)),
        ("seed".into(), config.seed.to_string()),
    ]
}

/// Rebuild a config from `(key, value)` pairs. Every key must be present
/// exactly once; unknown keys are rejected by name.
pub fn config_from_kv(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::shallow(ModelKind::ShallowCnn, 2, (8, 8));
    let mut seen = Vec::new();
    for (key, value) in pairs {
        if seen.contains(key) {
            return Err(Error::Format(format!("duplicate model key '{}'", key)));
        }
        seen.push(key.clone());
        match key.as_str() {
            "kind" => cfg.kind = ModelKind::from_str(value)?,
            "num_classes" => cfg.num_classes = parse_num(key, value)?,
            "input_size" => cfg.input_size = parse_pair(value)?,
            "in_channels" => cfg.in_channels = parse_num(key, value)?,
            "bins" => cfg.bins = parse_num(key, value)?,
            "filters" => cfg.filters = parse_num(key, value)?,
            "kernel" => cfg.kernel = parse_pair(value)?,
            "stride" => cfg.stride = parse_pair(value)?,
            "backbone_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Format(format!("bad backbone_channels '{}'", value)))?;
                if parts.len() != 4 {
                    return Err(Error::Format("backbone_channels needs 4 widths".into()));
                }
                cfg.backbone_channels = [parts[0], parts[1], parts[2], parts[3]];
            }
            "blocks_per_stage" => cfg.blocks_per_stage = parse_num(key, value)?,
            "stem_pool" => {
                cfg.stem_pool = value
                    .parse()
                    .map_err(|_| Error::Format(format!("bad stem_pool '{}'", value)))?
            }
            "hist_kernel" => cfg.hist_kernel = parse_pair(value)?,
            "hist_stride" => cfg.hist_stride = parse_pair(value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            other => return Err(Error::Format(format!("unknown model key '{}'", other))),
        }
    }
    for required in [
        "kind",
        "num_classes",
        "input_size",
        "in_channels",
        "bins",
        "filters",
        "kernel",
        "stride",
        "backbone_channels",
        "blocks_per_stage",
        "stem_pool",
        "hist_kernel",
        "hist_stride",
        "seed",
    ] {
        if !seen.iter().any(|k| k == required) {
            return Err(Error::Format(format!("missing model key '{}'", required)));
        }
    }
    Ok(cfg)
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("bad value '{}' for key '{}'", value, key)))
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let mut header = String::new();
    writeln!(header, "{}", MAGIC).unwrap();
    for (k, v) in config_to_kv(&model.config) {
        writeln!(header, "model.{} = {}", k, v).unwrap();
    }
    writeln!(header, "meta.epoch = {}", meta.epoch).unwrap();
    writeln!(header, "meta.val_loss = {:.16e}", meta.val_loss).unwrap();
    writeln!(header, "---").unwrap();

    let mut out = header.into_bytes();
    let write_tensors = |out: &mut Vec<u8>, tensors: &[(String, Tensor)]| {
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
    };
    write_tensors(&mut out, model.params());
    write_tensors(&mut out, model.buffers());
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    // Split the text header at the '---' line.
    let sep = b"\n---\n";
    let sep_pos = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| Error::Format("checkpoint missing '---' separator".into()))?;
    let header = std::str::from_utf8(&bytes[..sep_pos])
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Format(format!("not a checkpoint (expected '{}')", MAGIC)));
    }
    let mut model_kv = Vec::new();
    let mut meta = CheckpointMeta::default();
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Format(format!("bad header line '{}'", line)))?;
        if let Some(mk) = key.strip_prefix("model.") {
            model_kv.push((mk.to_string(), value.to_string()));
        } else if key == "meta.epoch" {
            meta.epoch = parse_num(key, value)?;
        } else if key == "meta.val_loss" {
            meta.val_loss = value
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad val_loss '{}'", value)))?
                as Elem;
        } else {
            return Err(Error::Format(format!("unknown checkpoint key '{}'", key)));
        }
    }
    let config = config_from_kv(&model_kv)?;
    let mut model = Model::build(config)?;

    let mut pos = sep_pos + sep.len();
    let read_tensors = |pos: &mut usize, expect: &[(String, Tensor)]| -> Result<Vec<Tensor>> {
        let count = read_u64(bytes, pos)? as usize;
        if count != expect.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors where the model has {}",
                count,
                expect.len()
            )));
        }
        let mut out = Vec::with_capacity(count);
        for (name, proto) in expect {
            let nlen = read_u32(bytes, pos)? as usize;
            let nm = read_bytes(bytes, pos, nlen)?;
            if nm != name.as_bytes() {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{}' where '{}' was expected",
                    String::from_utf8_lossy(nm),
                    name
                )));
            }
            let rank = read_u32(bytes, pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(bytes, pos)? as usize);
            }
            if shape != proto.shape() {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    name,
                    shape,
                    proto.shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = read_bytes(bytes, pos, numel * 8)?;
            let data: Vec<Elem> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Elem)
                .collect();
            out.push(Tensor::new(&shape, data)?);
        }
        Ok(out)
    };

    let params = read_tensors(&mut pos, model.params())?;
    let buffers = read_tensors(&mut pos, model.buffers())?;
    for ((_, dst), src) in model.params.iter_mut().zip(params) {
        *dst = src;
    }
    for ((_, dst), src) in model.buffers.iter_mut().zip(buffers) {
        *dst = src;
    }
    Ok((model, meta))
}

fn read_bytes<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if bytes.len() < *pos + n {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(bytes, pos, 4)?.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(bytes, pos, 8)?.try_into().unwrap()))
}

pub fn save(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode(model, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn forward_logits(model: &Model, x: &Tensor) -> Vec<Elem> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = model.forward_eval(&mut tape, &bound, xv).unwrap();
        tape.value(out.logits).data().to_vec()
    }

    #[test]
    fn round_trip_preserves_forward_bit_exactly() {
        let mut cfg = ModelConfig::deep(ModelKind::DeepParallel, 4, (16, 16), 4);
        cfg.backbone_channels = [4, 4, 8, 8];
        cfg.seed = 3;
        let model = Model::build(cfg).unwrap();
        let meta = CheckpointMeta { epoch: 7, val_loss: 0.125 };

        let bytes = encode(&model, &meta);
        let (loaded, meta2) = decode(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(loaded.config, model.config);

        let mut rng = rng_from_seed(10);
        let x = Tensor::new(
            &[2, 1, 16, 16],
            (0..2 * 16 * 16).map(|_| rng.gen::<f64>() as Elem).collect(),
        )
        .unwrap();
        assert_eq!(forward_logits(&model, &x), forward_logits(&loaded, &x));
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = ModelConfig::shallow(ModelKind::ShallowHist, 6, (16, 16));
        let model = Model::build(cfg).unwrap();
        let meta = CheckpointMeta::default();
        assert_eq!(encode(&model, &meta), encode(&model, &meta));
    }

    #[test]
    fn wrong_magic_rejected() {
        assert!(matches!(decode(b"nope\n---\n"), Err(Error::Format(_))));
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = ModelConfig::deep(ModelKind::DeepSeries, 5, (48, 40), 8);
        cfg.blocks_per_stage = 2;
        cfg.seed = 99;
        let kv = config_to_kv(&cfg);
        let back = config_from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_key_named_in_error() {
        let mut kv = config_to_kv(&ModelConfig::shallow(ModelKind::ShallowCnn, 2, (16, 16)));
        kv.push(("frobnicate".into(), "1".into()));
        match config_from_kv(&kv) {
            Err(Error::Format(msg)) => assert!(msg.contains("frobnicate"), "{}", msg),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }
}
