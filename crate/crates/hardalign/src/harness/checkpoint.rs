//! Versioned text checkpoints with bit-exact tensors.
//!
//! Every 64-bit real is written as its little-endian byte sequence in
//! base-16 (16 hex digits), so a round trip reproduces the exact bit
//! pattern on any platform — no decimal printing/parsing in the loop.

use std::path::Path;

use crate::diffcore::rng::RngState;
use crate::error::{Error, Result};
use crate::estimators::SignalNormalizer;
use crate::harness::config::RunConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "hardalign-checkpoint";

pub fn f64_to_hex(x: f64) -> String {
    let mut s = String::with_capacity(16);
    for b in x.to_le_bytes() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn f64_from_hex(s: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(Error::validation(format!("bad real encoding `{s}`")));
    }
    let mut bytes = [0u8; 8];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|e| Error::validation(format!("bad real encoding `{s}`: {e}")))?;
    }
    Ok(f64::from_le_bytes(bytes))
}

fn hex_line(values: &[f64]) -> String {
    values
        .iter()
        .map(|&v| f64_to_hex(v))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_hex_line(line: &str, expected: usize) -> Result<Vec<f64>> {
    let values: Result<Vec<f64>> = line.split_whitespace().map(f64_from_hex).collect();
    let values = values?;
    if values.len() != expected {
        return Err(Error::validation(format!(
            "checkpoint tensor has {} values, expected {expected}",
            values.len()
        )));
    }
    Ok(values)
}

/// Full training snapshot: configuration, parameters, optimizer moments,
/// both RNG cursors, and the NVIL signal normalizer when present. Restoring
/// one reproduces the next training step bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub step: usize,
    /// `(name, shape, data)` in parameter-store slot order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub adam_t: u64,
    /// Moment vectors aligned with `tensors`.
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub data_rng: RngState,
    pub noise_rng: RngState,
    pub normalizer: Option<SignalNormalizer>,
}

fn encode_rng(state: &RngState) -> String {
    format!(
        "{} {} {} {}",
        state.seed, state.stream, state.word_pos_hi, state.word_pos_lo
    )
}

fn decode_rng(line: &str) -> Result<RngState> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::validation("checkpoint rng line needs 4 integers"));
    }
    let mut nums = [0u64; 4];
    for (n, p) in nums.iter_mut().zip(&parts) {
        *n = p
            .parse()
            .map_err(|e| Error::validation(format!("checkpoint rng field: {e}")))?;
    }
    Ok(RngState {
        seed: nums[0],
        stream: nums[1],
        word_pos_hi: nums[2],
        word_pos_lo: nums[3],
    })
}

impl Checkpoint {
    pub fn encode(&self) -> Result<String> {
        let mut out = format!("{MAGIC} v{}\n", self.version);
        out.push_str("[config]\n");
        out.push_str(&self.config.to_toml()?);
        if !out.ends_with('\n') {
            out.push('\n');
        }
        out.push_str("[/config]\n[state]\n");
        out.push_str(&format!("step = {}\n", self.step));
        out.push_str(&format!("adam_t = {}\n", self.adam_t));
        out.push_str(&format!("data_rng = {}\n", encode_rng(&self.data_rng)));
        out.push_str(&format!("noise_rng = {}\n", encode_rng(&self.noise_rng)));
        match &self.normalizer {
            None => out.push_str("normalizer = none\n"),
            Some(nz) => out.push_str(&format!(
                "normalizer = {} {} {} {} {}\n",
                f64_to_hex(nz.mean),
                f64_to_hex(nz.var),
                u8::from(nz.initialized),
                f64_to_hex(nz.decay),
                f64_to_hex(nz.eps),
            )),
        }
        for (i, (name, shape, data)) in self.tensors.iter().enumerate() {
            let dims = shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!("[tensor {name} {dims}]\n{}\n", hex_line(data)));
            out.push_str(&format!("[adam_m {name}]\n{}\n", hex_line(&self.adam_m[i])));
            out.push_str(&format!("[adam_v {name}]\n{}\n", hex_line(&self.adam_v[i])));
        }
        out.push_str("[end]\n");
        Ok(out)
    }

    pub fn decode(text: &str) -> Result<Checkpoint> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::validation("empty checkpoint"))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::validation(format!("not a checkpoint: `{header}`")))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "checkpoint version {version} does not match supported version {CHECKPOINT_VERSION}"
            )));
        }
        if lines.next() != Some("[config]") {
            return Err(Error::validation("checkpoint missing [config] section"));
        }
        let mut config_text = String::new();
        for line in lines.by_ref() {
            if line == "[/config]" {
                break;
            }
            config_text.push_str(line);
            config_text.push('\n');
        }
        let config = RunConfig::from_toml(&config_text)?;
        if lines.next() != Some("[state]") {
            return Err(Error::validation("checkpoint missing [state] section"));
        }

        let mut step = None;
        let mut adam_t = None;
        let mut data_rng = None;
        let mut noise_rng = None;
        let mut normalizer = None;
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut saw_end = false;

        while let Some(line) = lines.next() {
            if line == "[end]" {
                saw_end = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("[tensor ") {
                let body = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::validation("unterminated tensor header"))?;
                let mut parts = body.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| Error::validation("tensor header missing name"))?
                    .to_string();
                let shape: Vec<usize> = parts
                    .map(|d| {
                        d.parse()
                            .map_err(|e| Error::validation(format!("tensor dim: {e}")))
                    })
                    .collect::<Result<_>>()?;
                let len: usize = shape.iter().product();
                let data_line = lines
                    .next()
                    .ok_or_else(|| Error::validation("tensor missing data line"))?;
                let data = parse_hex_line(data_line, len)?;
                let m_header = lines.next().unwrap_or_default();
                if m_header != format!("[adam_m {name}]") {
                    return Err(Error::validation(format!(
                        "expected adam_m for `{name}`, found `{m_header}`"
                    )));
                }
                let m_line = lines
                    .next()
                    .ok_or_else(|| Error::validation("adam_m missing data line"))?;
                adam_m.push(parse_hex_line(m_line, len)?);
                let v_header = lines.next().unwrap_or_default();
                if v_header != format!("[adam_v {name}]") {
                    return Err(Error::validation(format!(
                        "expected adam_v for `{name}`, found `{v_header}`"
                    )));
                }
                let v_line = lines
                    .next()
                    .ok_or_else(|| Error::validation("adam_v missing data line"))?;
                adam_v.push(parse_hex_line(v_line, len)?);
                tensors.push((name, shape, data));
                continue;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| Error::validation(format!("bad checkpoint line `{line}`")))?;
            match key {
                "step" => {
                    step = Some(value.parse().map_err(|e| {
                        Error::validation(format!("checkpoint step: {e}"))
                    })?)
                }
                "adam_t" => {
                    adam_t = Some(value.parse().map_err(|e| {
                        Error::validation(format!("checkpoint adam_t: {e}"))
                    })?)
                }
                "data_rng" => data_rng = Some(decode_rng(value)?),
                "noise_rng" => noise_rng = Some(decode_rng(value)?),
                "normalizer" => {
                    normalizer = if value == "none" {
                        Some(None)
                    } else {
                        let parts: Vec<&str> = value.split_whitespace().collect();
                        if parts.len() != 5 {
                            return Err(Error::validation("normalizer line needs 5 fields"));
                        }
                        Some(Some(SignalNormalizer {
                            mean: f64_from_hex(parts[0])?,
                            var: f64_from_hex(parts[1])?,
                            initialized: parts[2] == "1",
                            decay: f64_from_hex(parts[3])?,
                            eps: f64_from_hex(parts[4])?,
                        }))
                    }
                }
                other => {
                    return Err(Error::validation(format!(
                        "unknown checkpoint key `{other}`"
                    )))
                }
            }
        }
        if !saw_end {
            return Err(Error::validation("checkpoint truncated before [end]"));
        }
        Ok(Checkpoint {
            version,
            config,
            step: step.ok_or_else(|| Error::validation("checkpoint missing step"))?,
            tensors,
            adam_t: adam_t.ok_or_else(|| Error::validation("checkpoint missing adam_t"))?,
            adam_m,
            adam_v,
            data_rng: data_rng.ok_or_else(|| Error::validation("checkpoint missing data_rng"))?,
            noise_rng: noise_rng
                .ok_or_else(|| Error::validation("checkpoint missing noise_rng"))?,
            normalizer: normalizer
                .ok_or_else(|| Error::validation("checkpoint missing normalizer"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&std::fs::read_to_string(path)?)
    }
}
