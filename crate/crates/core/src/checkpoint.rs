//! Parameter checkpoints: a text manifest of the architecture followed by
//! named tensors as little-endian 64-bit floats. Loading rebuilds the
//! parameter set and validates every declared shape.

use crate::cost_model::{tensor_shapes, ArchConfig, CostEncoderParams};
use crate::learner::ThetaParams;
use crate::semantic_map::{EncoderMode, MapEncoderParams, MlpParams};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &str = "SEMNAV-CHECKPOINT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("shape mismatch for tensor {name}: declared {declared:?}, expected {expected:?}")]
    Shape {
        name: String,
        declared: Vec<usize>,
        expected: Vec<usize>,
    },
}

fn named_tensors(theta: &ThetaParams) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    out.push(("map.psi".to_string(), vec![theta.map.psi.len()], theta.map.psi.clone()));
    let net = &theta.map.net;
    out.push((
        "map.net.w1".to_string(),
        vec![net.hidden, net.num_classes + 2],
        net.w1.clone(),
    ));
    out.push(("map.net.b1".to_string(), vec![net.hidden], net.b1.clone()));
    out.push((
        "map.net.w2".to_string(),
        vec![net.num_classes, net.hidden],
        net.w2.clone(),
    ));
    out.push(("map.net.b2".to_string(), vec![net.num_classes], net.b2.clone()));
    for (name, shape, data) in theta.cost.tensors() {
        out.push((name.to_string(), shape, data.to_vec()));
    }
    out
}

/// Writes theta plus the manifest needed to rebuild it.
pub fn save_checkpoint(path: &Path, theta: &ThetaParams) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let tensors = named_tensors(theta);
    let mode = match theta.map.mode {
        EncoderMode::Linear => "linear",
        EncoderMode::Network => "network",
    };
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "num_classes = {}", theta.map.num_classes())?;
        writeln!(w, "encoder_mode = {mode}")?;
        writeln!(w, "epsilon = {:?}", theta.map.epsilon)?;
        writeln!(w, "endpoint_only = {}", theta.map.endpoint_only)?;
        writeln!(w, "lambda_free = {:?}", theta.map.lambda_free)?;
        writeln!(w, "clamp = {:?}", theta.map.clamp)?;
        writeln!(w, "hidden = {}", theta.map.net.hidden)?;
        writeln!(w, "kernel = {}", theta.cost.arch.kernel)?;
        writeln!(
            w,
            "widths = {},{}",
            theta.cost.arch.widths[0], theta.cost.arch.widths[1]
        )?;
        writeln!(w, "min_cost = {:?}", theta.cost.arch.min_cost)?;
        writeln!(w, "in_channels = {}", theta.cost.in_channels)?;
        for (name, shape, _) in &tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "TENSOR {name} {}", dims.join(" "))?;
        }
        writeln!(w, "DATA")?;
        for (_, _, data) in &tensors {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write(&mut w).map_err(io_err)
}

struct Manifest {
    keys: Vec<(String, String)>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    fn get(&self, key: &str, path: &Path) -> Result<&str, CheckpointError> {
        self.keys
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::Format {
                path: path.to_path_buf(),
                message: format!("missing manifest key {key}"),
            })
    }
}

fn parse<T: std::str::FromStr>(value: &str, key: &str, path: &Path) -> Result<T, CheckpointError> {
    value.parse().map_err(|_| CheckpointError::Format {
        path: path.to_path_buf(),
        message: format!("bad value {value:?} for {key}"),
    })
}

/// Reads a checkpoint back into a parameter set, validating shapes against
/// the manifest's architecture.
pub fn load_checkpoint(path: &Path) -> Result<ThetaParams, CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bad = |message: String| CheckpointError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut raw = Vec::new();
    fs::File::open(path).map_err(io_err)?.read_to_end(&mut raw).map_err(io_err)?;
    let data_tag = b"\nDATA\n";
    let split = raw
        .windows(data_tag.len())
        .position(|w| w == data_tag)
        .ok_or_else(|| bad("missing DATA section".into()))?;
    let header = std::str::from_utf8(&raw[..split]).map_err(|e| bad(e.to_string()))?;
    let blob = &raw[split + data_tag.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("bad magic line".into()));
    }
    let mut manifest = Manifest {
        keys: Vec::new(),
        tensors: Vec::new(),
    };
    for line in lines {
        if let Some(rest) = line.strip_prefix("TENSOR ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| bad("TENSOR line missing name".into()))?
                .to_string();
            let mut shape = Vec::new();
            for p in parts {
                shape.push(parse::<usize>(p, "tensor dim", path)?);
            }
            manifest.tensors.push((name, shape));
        } else if let Some((k, v)) = line.split_once('=') {
            manifest
                .keys
                .push((k.trim().to_string(), v.trim().to_string()));
        } else if !line.trim().is_empty() {
            return Err(bad(format!("unrecognized manifest line {line:?}")));
        }
    }

    let num_classes: usize = parse(manifest.get("num_classes", path)?, "num_classes", path)?;
    let mode = match manifest.get("encoder_mode", path)? {
        "linear" => EncoderMode::Linear,
        "network" => EncoderMode::Network,
        other => return Err(bad(format!("unknown encoder mode {other:?}"))),
    };
    let hidden: usize = parse(manifest.get("hidden", path)?, "hidden", path)?;
    let kernel: usize = parse(manifest.get("kernel", path)?, "kernel", path)?;
    let widths_raw = manifest.get("widths", path)?;
    let widths: Vec<usize> = widths_raw
        .split(',')
        .map(|s| parse::<usize>(s.trim(), "widths", path))
        .collect::<Result<_, _>>()?;
    if widths.len() != 2 {
        return Err(bad(format!("widths must have 2 entries, got {widths_raw:?}")));
    }
    let in_channels: usize = parse(manifest.get("in_channels", path)?, "in_channels", path)?;
    let arch = ArchConfig {
        kernel,
        widths: [widths[0], widths[1]],
        min_cost: parse(manifest.get("min_cost", path)?, "min_cost", path)?,
    };

    // Expected tensor table for this architecture.
    let mut expected: Vec<(String, Vec<usize>)> = vec![
        ("map.psi".into(), vec![num_classes]),
        ("map.net.w1".into(), vec![hidden, num_classes + 2]),
        ("map.net.b1".into(), vec![hidden]),
        ("map.net.w2".into(), vec![num_classes, hidden]),
        ("map.net.b2".into(), vec![num_classes]),
    ];
    for (name, shape) in tensor_shapes(&arch, in_channels) {
        expected.push((name.to_string(), shape));
    }
    if manifest.tensors.len() != expected.len() {
        return Err(bad(format!(
            "expected {} tensors, manifest has {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    for ((name, declared), (want_name, want_shape)) in manifest.tensors.iter().zip(&expected) {
        if name != want_name || declared != want_shape {
            return Err(CheckpointError::Shape {
                name: name.clone(),
                declared: declared.clone(),
                expected: want_shape.clone(),
            });
        }
    }
    let total: usize = expected
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if blob.len() != total * 8 {
        return Err(bad(format!(
            "data blob has {} bytes, expected {}",
            blob.len(),
            total * 8
        )));
    }

    let mut values = Vec::with_capacity(total);
    for chunk in blob.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let mut pos = 0usize;
    let mut take = |len: usize| -> Vec<f64> {
        let out = values[pos..pos + len].to_vec();
        pos += len;
        out
    };

    let psi = take(num_classes);
    let mut net = MlpParams::zeros(num_classes, hidden);
    net.w1 = take(hidden * (num_classes + 2));
    net.b1 = take(hidden);
    net.w2 = take(num_classes * hidden);
    net.b2 = take(num_classes);

    let map = MapEncoderParams {
        mode,
        psi,
        net,
        epsilon: parse(manifest.get("epsilon", path)?, "epsilon", path)?,
        endpoint_only: parse(manifest.get("endpoint_only", path)?, "endpoint_only", path)?,
        lambda_free: parse(manifest.get("lambda_free", path)?, "lambda_free", path)?,
        clamp: parse(manifest.get("clamp", path)?, "clamp", path)?,
    };

    let mut cost = CostEncoderParams::zeros(arch, in_channels);
    for tensor in cost.tensors_mut() {
        let len = tensor.len();
        tensor.copy_from_slice(&take(len));
    }
    Ok(ThetaParams { map, cost })
}
