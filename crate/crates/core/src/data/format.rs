//! On-disk layout: the magic line `OFHRL1`, one line of `key=value` pairs,
//! then `count` fixed-size records of little-endian f32 values in the order
//! state, action, goal, reward, next_state, done.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{Dataset, DatasetMeta, Transition};
use crate::error::{Error, Result};

pub const MAGIC: &str = "OFHRL1";
pub const FORMAT_VERSION: u32 = 1;

fn header_line(d: &Dataset) -> String {
    let m = d.meta();
    format!(
        "version={FORMAT_VERSION} state_dim={} action_dim={} goal_dim={} count={} env={} grade={} seed={}\n",
        m.state_dim,
        m.action_dim,
        m.goal_dim,
        d.len(),
        m.env,
        m.grade,
        m.seed
    )
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut out = format!("{MAGIC}\n").into_bytes();
    out.extend_from_slice(header_line(d).as_bytes());
    out.reserve(d.len() * d.record_floats() * 4);
    let mut put = |x: f64| out.extend_from_slice(&(x as f32).to_le_bytes());
    for t in d.transitions() {
        t.state.iter().for_each(|&x| put(x));
        t.action.iter().for_each(|&x| put(x));
        t.goal.iter().for_each(|&x| put(x));
        put(t.reward);
        t.next_state.iter().for_each(|&x| put(x));
        put(if t.done { 1.0 } else { 0.0 });
    }
    out
}

fn field<'a>(fields: &BTreeMap<&str, &'a str>, key: &str, offset: u64) -> Result<&'a str> {
    fields
        .get(key)
        .copied()
        .ok_or_else(|| Error::format(offset, format!("header is missing {key}")))
}

fn number<T: std::str::FromStr>(fields: &BTreeMap<&str, &str>, key: &str, offset: u64) -> Result<T> {
    field(fields, key, offset)?
        .parse()
        .map_err(|_| Error::format(offset, format!("header field {key} is not a number")))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let magic = format!("{MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::format(0, "missing OFHRL1 magic"));
    }
    let header_start = magic.len();
    let header_end = bytes[header_start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| header_start + p)
        .ok_or_else(|| Error::format(header_start as u64, "unterminated header line"))?;
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| Error::format(header_start as u64, "header is not utf-8"))?;
    let off = header_start as u64;
    let mut fields = BTreeMap::new();
    for kv in header.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::format(off, format!("malformed header field {kv:?}")))?;
        fields.insert(k, v);
    }
    let version: u32 = number(&fields, "version", off)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(off, format!("unsupported version {version}")));
    }
    let meta = DatasetMeta {
        state_dim: number(&fields, "state_dim", off)?,
        action_dim: number(&fields, "action_dim", off)?,
        goal_dim: number(&fields, "goal_dim", off)?,
        env: field(&fields, "env", off)?.to_string(),
        grade: field(&fields, "grade", off)?.to_string(),
        seed: number(&fields, "seed", off)?,
    };
    let count: usize = number(&fields, "count", off)?;
    let mut d = Dataset::new(meta);
    let record = d.record_floats() * 4;
    let payload_start = header_end + 1;
    let payload = &bytes[payload_start..];
    let expected = count * record;
    if payload.len() < expected {
        let complete = payload.len() / record * record;
        return Err(Error::format(
            (payload_start + complete) as u64,
            format!("truncated payload: {count} records need {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            (payload_start + expected) as u64,
            "trailing bytes after the last record",
        ));
    }
    let m = d.meta().clone();
    let mut pos = 0usize;
    let mut take = |n: usize| -> Vec<f64> {
        let v = payload[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        pos += 4 * n;
        v
    };
    for i in 0..count {
        let state = take(m.state_dim);
        let action = take(m.action_dim);
        let goal = take(m.goal_dim);
        let reward = take(1)[0];
        let next_state = take(m.state_dim);
        let done = take(1)[0];
        if done != 0.0 && done != 1.0 {
            let at = payload_start + (i + 1) * record - 4;
            return Err(Error::format(at as u64, format!("done flag {done} is not 0 or 1")));
        }
        d.push(Transition {
            state,
            action,
            goal,
            reward,
            next_state,
            done: done == 1.0,
        })?;
    }
    Ok(d)
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(d)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let mut d = Dataset::new(DatasetMeta {
            state_dim: 2,
            action_dim: 1,
            goal_dim: 1,
            env: "gripper-chain".into(),
            grade: "medium_expert".into(),
            seed: 42,
        });
        for i in 0..7 {
            let x = i as f64 * 0.1;
            d.push(Transition {
                state: vec![x, -x],
                action: vec![0.3],
                goal: vec![1.0 / 3.0],
                reward: -1.0,
                next_state: vec![x + 0.1, -x],
                done: i == 6,
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn round_trip() {
        let d = sample();
        assert_eq!(decode_dataset(&encode_dataset(&d)).unwrap(), d);
    }

    #[test]
    fn size_is_header_plus_records() {
        let d = sample();
        let bytes = encode_dataset(&d);
        let header = MAGIC.len() + 1 + header_line(&d).len();
        assert_eq!(bytes.len(), header + d.len() * (2 * 2 + 1 + 1 + 2) * 4);
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut bytes = encode_dataset(&sample());
        bytes[2] = b'x';
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_record_boundary() {
        let d = sample();
        let mut bytes = encode_dataset(&d);
        let full = bytes.len();
        bytes.truncate(full - 5);
        let record = d.record_floats() * 4;
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, full - record),
            other => panic!("unexpected {other:?}"),
        }
    }
}
