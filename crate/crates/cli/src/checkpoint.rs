//! Checkpoint format: a plain-text header with one manifest line per named
//! parameter (name, shape, byte offset into the data section, SHA-256 of
//! the blob), a `DATA` sentinel line, then the little-endian 64-bit float
//! blobs back to back. Save -> load -> save is byte-identical; checksums
//! are verified on load.

use anyhow::{bail, Context, Result};
use mvae_core::model::{MvaeModel, Variant};
use mvae_core::numerics::Tensor;
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &str = "MVAE-CHECKPOINT v1";

fn blob_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Mvae => "mvae",
        Variant::MvaeQ => "mvae_q",
    }
}

pub fn encode(model: &MvaeModel) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("latent_dim {}\n", model.latent_dim));
    header.push_str(&format!("variant {}\n", variant_name(model.variant)));
    header.push_str(&format!("modalities {}\n", model.n_modalities()));
    let mut data = Vec::new();
    for (name, tensor) in model.named_parameters() {
        let blob = blob_bytes(tensor);
        let shape = tensor
            .shape()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("x");
        header.push_str(&format!(
            "param {name} {shape} {} {}\n",
            data.len(),
            sha_hex(&blob)
        ));
        data.extend(blob);
    }
    header.push_str("DATA\n");
    let mut out = header.into_bytes();
    out.extend(data);
    out
}

pub fn save(path: &Path, model: &MvaeModel) -> Result<()> {
    std::fs::write(path, encode(model))
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

/// Fill the parameters of a config-built model skeleton from the
/// checkpoint, verifying header compatibility and every blob checksum.
pub fn load_into(path: &Path, model: &mut MvaeModel) -> Result<()> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let data_sentinel = b"\nDATA\n";
    let split = bytes
        .windows(data_sentinel.len())
        .position(|w| w == data_sentinel)
        .context("checkpoint has no DATA section")?;
    let header = std::str::from_utf8(&bytes[..split]).context("header is not UTF-8")?;
    let data = &bytes[split + data_sentinel.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        bail!("bad checkpoint magic (expected '{MAGIC}')");
    }
    let mut manifest = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        match fields.as_slice() {
            ["latent_dim", v] => {
                if v.parse::<usize>()? != model.latent_dim {
                    bail!("checkpoint latent_dim {v} does not match config {}", model.latent_dim);
                }
            }
            ["variant", v] => {
                if *v != variant_name(model.variant) {
                    bail!("checkpoint variant {v} does not match config {}", variant_name(model.variant));
                }
            }
            ["modalities", v] => {
                if v.parse::<usize>()? != model.n_modalities() {
                    bail!("checkpoint modality count {v} does not match config {}", model.n_modalities());
                }
            }
            ["param", name, shape, offset, checksum] => {
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(|d| d.parse().context("bad shape"))
                    .collect::<Result<_>>()?;
                manifest.push((
                    name.to_string(),
                    shape,
                    offset.parse::<usize>().context("bad offset")?,
                    checksum.to_string(),
                ));
            }
            other => bail!("unrecognized checkpoint header line: {other:?}"),
        }
    }

    let expected: Vec<String> = model.named_parameters().iter().map(|(n, _)| n.clone()).collect();
    let got: Vec<String> = manifest.iter().map(|(n, _, _, _)| n.clone()).collect();
    if expected != got {
        bail!("checkpoint parameters {got:?} do not match the config's model {expected:?}");
    }

    let mut params = model.parameters_mut();
    for ((name, shape, offset, checksum), param) in manifest.into_iter().zip(params.iter_mut()) {
        if shape != param.shape() {
            bail!("parameter {name}: checkpoint shape {shape:?} vs model {:?}", param.shape());
        }
        let len = param.numel() * 8;
        if offset + len > data.len() {
            bail!("parameter {name}: blob at offset {offset} overruns the data section");
        }
        let blob = &data[offset..offset + len];
        let actual = sha_hex(blob);
        if actual != checksum {
            bail!("parameter {name}: checksum mismatch (manifest {checksum}, data {actual})");
        }
        for (i, v) in param.data_mut().iter_mut().enumerate() {
            *v = f64::from_le_bytes(blob[i * 8..i * 8 + 8].try_into().unwrap());
        }
    }
    Ok(())
}
