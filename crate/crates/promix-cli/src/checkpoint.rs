//! On-disk model snapshots.
//!
//! A checkpoint directory holds `manifest.txt` and `params.bin`. The
//! manifest is line-oriented key-value text: format version, a hash of the
//! resolved configuration that produced the run, the step count, then one
//! `param = <name> <d0>x<d1>...` line per parameter in canonical visit
//! order. `params.bin` is the concatenation of each parameter's values as
//! little-endian f64, in manifest order. Loading restores every value bit
//! for bit.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use promix_core::params::ModelState;
use promix_core::rng::fnv1a64;
use promix_core::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

/// Hash of the resolved-config echo, tying a checkpoint to its run.
pub fn config_hash(resolved_config: &str) -> String {
    format!("{:016x}", fnv1a64(resolved_config.as_bytes()))
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| {
            d.parse::<usize>()
                .with_context(|| format!("bad shape component {d:?}"))
        })
        .collect()
}

pub fn save(dir: &Path, state: &ModelState, step: usize, cfg_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating checkpoint dir {}", dir.display()))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("format = {FORMAT_VERSION}\n"));
    manifest.push_str(&format!("config_hash = {cfg_hash}\n"));
    manifest.push_str(&format!("step = {step}\n"));

    let mut blob: Vec<u8> = Vec::new();
    state.visit_params(|name, t| {
        manifest.push_str(&format!("param = {name} {}\n", shape_string(&t.shape)));
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });

    fs::write(dir.join(MANIFEST_FILE), manifest).context("writing manifest")?;
    fs::write(dir.join(PARAMS_FILE), blob).context("writing parameter buffer")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: usize,
    /// Parameters in manifest order.
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Writes every stored parameter into the state; names and shapes must
    /// match the state exactly.
    pub fn apply_to(&self, state: &mut ModelState) -> Result<()> {
        for (name, tensor) in &self.params {
            if !state.set_param(name, tensor) {
                bail!("checkpoint parameter {name:?} does not exist in the model");
            }
        }
        Ok(())
    }
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let blob = fs::read(dir.join(PARAMS_FILE)).context("reading parameter buffer")?;

    let mut config_hash = None;
    let mut step = None;
    let mut format = None;
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("manifest line {}: expected key = value", lineno + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "format" => format = Some(value.parse::<u32>().context("format version")?),
            "config_hash" => config_hash = Some(value.to_string()),
            "step" => step = Some(value.parse::<usize>().context("step")?),
            "param" => {
                let Some((name, shape)) = value.rsplit_once(' ') else {
                    bail!("manifest line {}: expected param = name shape", lineno + 1);
                };
                shapes.push((name.trim().to_string(), parse_shape(shape.trim())?));
            }
            _ => bail!("manifest line {}: unknown key {key:?}", lineno + 1),
        }
    }
    match format {
        Some(FORMAT_VERSION) => {}
        Some(v) => bail!("unsupported checkpoint format {v}"),
        None => bail!("manifest missing format line"),
    }
    let config_hash = config_hash.context("manifest missing config_hash")?;
    let step = step.context("manifest missing step")?;

    let total: usize = shapes
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if blob.len() != total * 8 {
        bail!(
            "parameter buffer holds {} bytes but manifest declares {} values",
            blob.len(),
            total
        );
    }

    let mut params = Vec::with_capacity(shapes.len());
    let mut offset = 0usize;
    for (name, shape) in shapes {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = blob[offset..offset + numel * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        offset += numel * 8;
        params.push((name, Tensor::new(data, shape)));
    }
    Ok(Checkpoint {
        config_hash,
        step,
        params,
    })
}

/// Human-readable summary used by the inspect subcommand. Deterministic.
pub fn describe(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(&format!("config_hash: {}\n", ckpt.config_hash));
    out.push_str(&format!("step: {}\n", ckpt.step));
    out.push_str(&format!("parameters: {}\n", ckpt.params.len()));
    let total: usize = ckpt.params.iter().map(|(_, t)| t.numel()).sum();
    out.push_str(&format!("scalars: {total}\n"));
    for (name, t) in &ckpt.params {
        let norm = promix_core::tensor::l2_norm(&t.data);
        out.push_str(&format!(
            "param: {name} shape={} l2={norm}\n",
            shape_string(&t.shape)
        ));
    }
    out
}
