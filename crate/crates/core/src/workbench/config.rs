//! Flat `key = value` training configuration. Lines starting with `#` are
//! comments. Every key can also be given on the command line, which wins.

use std::fs;
use std::path::Path;

use crate::error::{Error, PathContext, Result};
use crate::optim::TrainConfig;

/// Recognized keys, in documentation order.
pub const KEYS: &[&str] = &[
    "iters",
    "seed",
    "threads",
    "color",
    "neighbors",
    "fusion",
    "bands",
    "sh_degree",
    "train_encoder",
    "feature_residual",
    "densify",
    "densify_start",
    "densify_every",
    "densify_until",
    "grad_threshold",
    "percent_dense",
    "split_factor",
    "prune_opacity",
    "big_scale",
    "min_points",
    "max_points",
    "lr_position",
    "lr_feature",
    "lr_network",
    "lr_sh",
    "lr_opacity",
    "lr_geometry",
    "lambda_l1",
    "lambda_ssim",
    "lambda_depth",
    "lambda_smooth",
    "alpha1",
    "alpha2",
    "tile_size",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{value}' for {key} (expected true or false)"))),
    }
}

/// Apply one setting.
pub fn set_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key.trim() {
        "iters" => cfg.iters = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        "threads" => cfg.threads = parse(key, v)?,
        "color" => cfg.model.color = v.parse()?,
        "neighbors" => cfg.model.k_neighbors = parse(key, v)?,
        "fusion" => cfg.model.fusion = v.parse()?,
        "bands" => cfg.model.bands = parse(key, v)?,
        "sh_degree" => cfg.model.sh_degree = parse(key, v)?,
        "train_encoder" => cfg.model.train_encoder = parse_bool(key, v)?,
        "feature_residual" => cfg.model.feature_residual = parse_bool(key, v)?,
        "densify" => cfg.densify.enabled = parse_bool(key, v)?,
        "densify_start" => cfg.densify.start = parse(key, v)?,
        "densify_every" => cfg.densify.every = parse(key, v)?,
        "densify_until" => cfg.densify.until = Some(parse(key, v)?),
        "grad_threshold" => cfg.densify.grad_threshold = parse(key, v)?,
        "percent_dense" => cfg.densify.percent_dense = parse(key, v)?,
        "split_factor" => cfg.densify.split_factor = parse(key, v)?,
        "prune_opacity" => cfg.densify.prune_opacity = parse(key, v)?,
        "big_scale" => cfg.densify.big_scale = parse(key, v)?,
        "min_points" => cfg.densify.min_points = parse(key, v)?,
        "max_points" => cfg.densify.max_points = parse(key, v)?,
        "lr_position" => cfg.lr.position = parse(key, v)?,
        "lr_feature" => cfg.lr.feature = parse(key, v)?,
        "lr_network" => cfg.lr.network = parse(key, v)?,
        "lr_sh" => cfg.lr.sh = parse(key, v)?,
        "lr_opacity" => cfg.lr.opacity = parse(key, v)?,
        "lr_geometry" => cfg.lr.geometry = parse(key, v)?,
        "lambda_l1" => cfg.loss.l1 = parse(key, v)?,
        "lambda_ssim" => cfg.loss.ssim = parse(key, v)?,
        "lambda_depth" => cfg.loss.depth = parse(key, v)?,
        "lambda_smooth" => cfg.loss.smooth = parse(key, v)?,
        "alpha1" => cfg.loss.alpha1 = parse(key, v)?,
        "alpha2" => cfg.loss.alpha2 = parse(key, v)?,
        "tile_size" => cfg.raster.tile_size = parse(key, v)?,
        other => {
            return Err(Error::Config(format!("unknown config key '{other}' (known: {})", KEYS.join(", "))));
        }
    }
    Ok(())
}

/// Apply the settings in `text`, reporting errors with line numbers.
pub fn apply_config_text(cfg: &mut TrainConfig, text: &str, path: &Path) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
        set_key(cfg, k, v).map_err(|e| err(e.to_string()))?;
    }
    Ok(())
}

pub fn load_config(path: &Path, cfg: &mut TrainConfig) -> Result<()> {
    apply_config_text(cfg, &fs::read_to_string(path).at(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featpipe::Fusion;
    use crate::optim::ColorMode;

    #[test]
    fn parses_and_overrides() {
        let mut cfg = TrainConfig::default();
        let text = "# desk run\niters = 2000\nneighbors=0\nfusion = mean # ablation\n\ncolor=sh\nlambda_depth = 0\ndensify = false\ndensify_until = 900\n";
        apply_config_text(&mut cfg, text, Path::new("c.cfg")).unwrap();
        assert_eq!(cfg.iters, 2000);
        assert_eq!(cfg.model.k_neighbors, 0);
        assert_eq!(cfg.model.fusion, Fusion::Mean);
        assert_eq!(cfg.model.color, ColorMode::Sh);
        assert_eq!(cfg.loss.depth, 0.0);
        assert!(!cfg.densify.enabled);
        assert_eq!(cfg.densify.until, Some(900));
        set_key(&mut cfg, "iters", "10").unwrap();
        assert_eq!(cfg.iters, 10);
    }

    #[test]
    fn every_key_is_accepted() {
        let mut cfg = TrainConfig::default();
        for k in KEYS {
            let v = match *k {
                "color" => "features",
                "fusion" => "variance",
                "densify" | "train_encoder" | "feature_residual" => "true",
                _ => "3",
            };
            set_key(&mut cfg, k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = TrainConfig::default();
        match apply_config_text(&mut cfg, "iters = 5\nbogus = 1\n", Path::new("c.cfg")) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        assert!(apply_config_text(&mut cfg, "iters 5\n", Path::new("c.cfg")).is_err());
        assert!(apply_config_text(&mut cfg, "iters = many\n", Path::new("c.cfg")).is_err());
    }
}
