use super::{Architecture, PolicyError, PolicyParams};

pub const CHECKPOINT_HEADER: &str = "GRABS-CKPT v1";

/// Parameters plus the number of PPO updates that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub step: u64,
}

/// Header, JSON architecture line, step line, then the parameters as raw
/// little-endian f64 bytes.
pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let arch = serde_json::to_string(ckpt.params.arch()).expect("architecture serializes");
    let data = ckpt.params.as_slice();
    let mut out = format!(
        "{CHECKPOINT_HEADER}\narch {arch}\nstep {}\nparams {}\n",
        ckpt.step,
        data.len()
    )
    .into_bytes();
    out.reserve(data.len() * 8 + 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(b"\nend\n");
    out
}

fn bad(msg: impl Into<String>) -> PolicyError {
    PolicyError::Checkpoint(msg.into())
}

fn line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, PolicyError> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, PolicyError> {
    let mut pos = 0;
    let header = line(bytes, &mut pos)?;
    if header != CHECKPOINT_HEADER {
        return Err(bad(format!("unsupported header {header:?}")));
    }
    let arch: Architecture = line(bytes, &mut pos)?
        .strip_prefix("arch ")
        .ok_or_else(|| bad("missing arch line"))
        .and_then(|s| serde_json::from_str(s).map_err(|e| bad(format!("arch: {e}"))))?;
    let step: u64 = line(bytes, &mut pos)?
        .strip_prefix("step ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing step line"))?;
    let count: usize = line(bytes, &mut pos)?
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing params line"))?;
    let blob = count.checked_mul(8).and_then(|n| bytes.get(pos..pos + n)).ok_or_else(|| bad("truncated parameter blob"))?;
    let data: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if &bytes[pos + count * 8..] != b"\nend\n" {
        return Err(bad("missing end marker or trailing data"));
    }
    Ok(Checkpoint {
        params: PolicyParams::from_vec(arch, data)?,
        step,
    })
}
