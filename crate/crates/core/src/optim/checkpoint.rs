//! Checkpoint container: a versioned text header followed by little-endian
//! f32 arrays in header order.
//!
//! ```text
//! featsplat-checkpoint 1
//! config <one-line JSON training config>
//! tensor <name> <group> <per_point 0|1> <dim> [<dim> ...]
//! ...
//! end
//! <raw f32 data>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use super::train::TrainConfig;
use crate::diffcore::{Group, Real, Tensor};
use crate::error::{Error, PathContext, Result};

const MAGIC: &str = "featsplat-checkpoint";
const VERSION: u32 = 1;
const SCALE_MULT: &str = "aux.scale_mult";

struct Entry {
    name: String,
    group: Group,
    per_point: bool,
    shape: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, config: &TrainConfig) -> Result<()> {
    let mut header = format!("{MAGIC} {VERSION}\nconfig {}\n", serde_json::to_string(config)?);
    let mut body: Vec<u8> = Vec::new();
    let mut push = |name: &str, group: Group, per_point: bool, t: &Tensor<T>| {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {} {} {}\n", group.as_str(), per_point as u8, dims.join(" ")));
        for v in t.data() {
            body.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    };
    for (_, p) in model.store.iter() {
        push(&p.name, p.group, p.per_point, &p.value);
    }
    let mult: Vec<T> = model.scale_mult.iter().map(|&v| T::lit(v)).collect();
    push(SCALE_MULT, Group::Frozen, true, &Tensor::new(&[mult.len(), 1], mult)?);
    header.push_str("end\n");

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(header.as_bytes())?;
        f.write_all(&body)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).at(path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Model<T>, TrainConfig)> {
    let bytes = fs::read(path).at(path)?;
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8"))?.to_string();
        pos += end + 1;
        Ok(line)
    };
    let first = next_line()?;
    match first.split_once(' ') {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(bad(format!("unsupported checkpoint version {v}"))),
        _ => return Err(bad("not a featsplat checkpoint")),
    }
    let config: TrainConfig = match next_line()?.strip_prefix("config ") {
        Some(json) => serde_json::from_str(json)?,
        None => return Err(bad("missing config line")),
    };
    let mut entries = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 4 || f[0] != "tensor" {
            return Err(bad(format!("bad header line '{line}'")));
        }
        let group = Group::parse(f[2]).ok_or_else(|| bad(format!("unknown group '{}'", f[2])))?;
        let shape = f[4..].iter().map(|d| d.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape in '{line}'")))?;
        entries.push(Entry { name: f[1].to_string(), group, per_point: f[3] == "1", shape });
    }
    let data_start = pos;

    let mult_entry = entries.iter().find(|e| e.name == SCALE_MULT).ok_or_else(|| bad("missing scale multipliers"))?;
    let m = mult_entry.shape.first().copied().unwrap_or(0);
    // the layout depends only on the config and point count
    let mut model: Model<T> = Model::new(config.model.clone(), &vec![[0.0; 3]; m], 1.0, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = model.store.len() + 1;
    if entries.len() != expected {
        return Err(bad(format!("checkpoint has {} tensors, model needs {expected}", entries.len())));
    }
    let mut offset = data_start;
    for e in &entries {
        let n: usize = e.shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(bad(format!("data for {} is truncated", e.name)));
        }
        let vals: Vec<T> =
            bytes[offset..end].chunks_exact(4).map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        offset = end;
        if e.name == SCALE_MULT {
            model.scale_mult = vals.iter().map(|v| v.f64()).collect();
            continue;
        }
        let id = model.store.find(&e.name).ok_or_else(|| bad(format!("unexpected tensor {}", e.name)))?;
        let p = model.store.param_mut(id);
        if p.value.shape() != e.shape.as_slice() || p.group != e.group || p.per_point != e.per_point {
            return Err(bad(format!(
                "tensor {} is {:?} ({}) in the file but {:?} ({}) in the model",
                e.name,
                e.shape,
                e.group.as_str(),
                p.value.shape(),
                p.group.as_str()
            )));
        }
        p.value = Tensor::new(&e.shape, vals)?;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((model, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{ColorMode, ModelConfig};

    fn model(color: ColorMode) -> (Model<f32>, TrainConfig) {
        let cfg = TrainConfig { model: ModelConfig { color, ..Default::default() }, seed: 3, ..Default::default() };
        let pts: Vec<[f64; 3]> = (0..7).map(|i| [i as f64 * 0.1, 0.2, -0.3]).collect();
        let mut m = Model::new(cfg.model.clone(), &pts, 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.scale_mult[2] = 0.625;
        (m, cfg)
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for color in [ColorMode::Features, ColorMode::Sh] {
            let (m, cfg) = model(color);
            let path = dir.path().join("model.ckpt");
            save_checkpoint(&path, &m, &cfg).unwrap();
            let (back, cfg2) = load_checkpoint::<f32>(&path).unwrap();
            assert_eq!(cfg, cfg2);
            assert_eq!(back.scale_mult, m.scale_mult);
            for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.value, b.value);
                assert_eq!(a.group, b.group);
            }
            assert!(!dir.path().join("model.tmp").exists());
        }
    }

    #[test]
    fn rejects_damage() {
        let dir = tempfile::tempdir().unwrap();
        let (m, cfg) = model(ColorMode::Features);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &m, &cfg).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"hello\n").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
        let text = String::from_utf8_lossy(&bytes).replacen("featsplat-checkpoint 1", "featsplat-checkpoint 9", 1);
        fs::write(&path, text.as_bytes()).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
