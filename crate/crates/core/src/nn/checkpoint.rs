//! `OFNN1` parameter files: a magic line, one metadata line, then the raw
//! parameter vector as little-endian f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};

pub const MAGIC: &str = "OFNN1";

pub fn encode(net: &Mlp) -> Vec<u8> {
    let sizes: Vec<String> = net.layer_sizes().iter().map(|s| s.to_string()).collect();
    let acts: Vec<&str> = net.activations().iter().map(|a| a.name()).collect();
    let mut out = format!(
        "{MAGIC}\nlayers={} activations={}\n",
        sizes.join(","),
        acts.join(",")
    )
    .into_bytes();
    out.reserve(net.parameter_count() * 8);
    for p in net.parameters() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn read_line(bytes: &[u8], start: usize) -> Result<(&str, usize)> {
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| Error::format(start as u64, "unterminated header line"))?;
    let line = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::format(start as u64, "header is not utf-8"))?;
    Ok((line, end + 1))
}

pub fn decode(bytes: &[u8]) -> Result<Mlp> {
    if !bytes.starts_with(MAGIC.as_bytes()) || bytes.get(MAGIC.len()) != Some(&b'\n') {
        return Err(Error::format(0, "missing OFNN1 magic"));
    }
    let meta_start = MAGIC.len() + 1;
    let (meta, payload_start) = read_line(bytes, meta_start)?;
    let mut sizes = None;
    let mut acts = None;
    for kv in meta.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::format(meta_start as u64, format!("malformed field {kv:?}")))?;
        match k {
            "layers" => {
                let parsed: std::result::Result<Vec<usize>, _> = v.split(',').map(str::parse).collect();
                sizes = Some(parsed.map_err(|_| Error::format(meta_start as u64, "bad layer sizes"))?);
            }
            "activations" => {
                let parsed: Option<Vec<Activation>> = v.split(',').map(Activation::parse).collect();
                acts = Some(parsed.ok_or_else(|| Error::format(meta_start as u64, "unknown activation"))?);
            }
            _ => {}
        }
    }
    let (sizes, acts) = match (sizes, acts) {
        (Some(s), Some(a)) => (s, a),
        _ => return Err(Error::format(meta_start as u64, "metadata needs layers and activations")),
    };
    let template = Mlp::zeros(&sizes, &acts).map_err(|e| Error::format(meta_start as u64, e.to_string()))?;
    let payload = &bytes[payload_start..];
    let expected = template.parameter_count() * 8;
    if payload.len() != expected {
        let offset = payload_start + payload.len().min(expected);
        return Err(Error::format(
            offset as u64,
            format!("expected {expected} parameter bytes, found {}", payload.len()),
        ));
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Mlp::from_parameters(&sizes, &acts, params)
}

pub fn save(net: &Mlp, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Mlp> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::with_hidden(4, &[6, 3], 2, Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let back = decode(&encode(&net)).unwrap();
        assert_eq!(net.layer_sizes(), back.layer_sizes());
        assert!(net
            .parameters()
            .iter()
            .zip(back.parameters())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let net = Mlp::zeros(&[1, 1], &[Activation::Identity]).unwrap();
        let mut bytes = encode(&net);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let net = Mlp::zeros(&[2, 2], &[Activation::Identity]).unwrap();
        let mut bytes = encode(&net);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
    }
}
