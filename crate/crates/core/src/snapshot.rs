//! Parameter snapshots: a text header followed by a little-endian `f32` blob.
//!
//! ```text
//! lidar-uda-snapshot 1
//! kind net2d
//! config_hash 0123abcd0123abcd
//! tensor input_shift 27
//! ...
//! end
//! <blob>
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{Affine, SegNet};

const MAGIC: &str = "lidar-uda-snapshot 1";
const MAX_HEADER: usize = 4096;
const MAX_ELEMENTS: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Free-form role tag such as `net2d`, `net3d` or `teacher3d`.
    pub kind: String,
    pub config_hash: String,
    pub net: SegNet<f32>,
}

fn tensor_names() -> [&'static str; 10] {
    [
        "input_shift",
        "input_scale",
        "hidden1.weight",
        "hidden1.bias",
        "hidden2.weight",
        "hidden2.bias",
        "head_cls.weight",
        "head_cls.bias",
        "head_mim.weight",
        "head_mim.bias",
    ]
}

fn flat(net: &SegNet<f32>) -> [(Vec<usize>, Vec<f32>); 10] {
    let v1 = |a: &Array1<f32>| (vec![a.len()], a.to_vec());
    let v2 = |a: &Array2<f32>| (a.shape().to_vec(), a.iter().copied().collect());
    [
        v1(&net.input_shift),
        v1(&net.input_scale),
        v2(&net.hidden1.weight),
        v1(&net.hidden1.bias),
        v2(&net.hidden2.weight),
        v1(&net.hidden2.bias),
        v2(&net.head_cls.weight),
        v1(&net.head_cls.bias),
        v2(&net.head_mim.weight),
        v1(&net.head_mim.bias),
    ]
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_graphic())
}

pub fn encode_snapshot(snapshot: &Snapshot) -> Result<Vec<u8>> {
    if !valid_token(&snapshot.kind) || !valid_token(&snapshot.config_hash) {
        return Err(Error::Format("snapshot kind and hash must be non-empty printable tokens".into()));
    }
    let tensors = flat(&snapshot.net);
    let mut header = format!("{MAGIC}\nkind {}\nconfig_hash {}\n", snapshot.kind, snapshot.config_hash);
    for (name, (shape, _)) in tensor_names().iter().zip(&tensors) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for (_, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("snapshot: {}", msg.into()))
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot> {
    let search = &bytes[..bytes.len().min(MAX_HEADER)];
    let end = search
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| fmt_err("header terminator not found"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt_err("header is not UTF-8"))?;
    let mut blob = &bytes[end + 5..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(fmt_err("bad magic line"));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| fmt_err(format!("missing {key}")))?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| fmt_err(format!("expected {key}, found {line:?}")))?;
        if !valid_token(rest) {
            return Err(fmt_err(format!("bad {key} value")));
        }
        Ok(rest.to_string())
    };
    let kind = field("kind")?;
    let config_hash = field("config_hash")?;
    let mut shapes = Vec::new();
    let mut total = 0usize;
    for name in tensor_names() {
        let line = lines.next().ok_or_else(|| fmt_err(format!("missing tensor {name}")))?;
        let mut parts = line.split(' ');
        if parts.next() != Some("tensor") || parts.next() != Some(name) {
            return Err(fmt_err(format!("expected tensor {name}, found {line:?}")));
        }
        let dims: Vec<usize> = parts
            .map(|d| d.parse::<usize>().map_err(|_| fmt_err(format!("bad dimension in {line:?}"))))
            .collect::<Result<_>>()?;
        let want_rank = if name.ends_with("weight") { 2 } else { 1 };
        if dims.len() != want_rank {
            return Err(fmt_err(format!("tensor {name} has rank {}, expected {want_rank}", dims.len())));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| fmt_err(format!("tensor {name} is too large")))?;
        total = total.checked_add(count).filter(|&t| t <= MAX_ELEMENTS).ok_or_else(|| fmt_err("snapshot too large"))?;
        shapes.push(dims);
    }
    if lines.next().is_some() {
        return Err(fmt_err("unexpected header lines"));
    }
    if blob.len() != total * 4 {
        return Err(fmt_err(format!("blob has {} bytes, header declares {}", blob.len(), total * 4)));
    }
    let mut take = |n: usize| -> Vec<f32> {
        let (head, tail) = blob.split_at(n * 4);
        blob = tail;
        head.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    };
    let mut vecs = Vec::new();
    let mut arrays2 = Vec::new();
    for dims in &shapes {
        let data = take(dims.iter().product());
        if dims.len() == 1 {
            vecs.push(Array1::from(data));
        } else {
            arrays2.push(Array2::from_shape_vec((dims[0], dims[1]), data).map_err(|e| fmt_err(e.to_string()))?);
        }
    }
    let mut v = vecs.into_iter();
    let mut w = arrays2.into_iter();
    let mut next1 = || v.next().expect("rank-1 tensor");
    let input_shift = next1();
    let input_scale = next1();
    let mut affine = || Affine {
        weight: w.next().expect("rank-2 tensor"),
        bias: next1(),
    };
    let net = SegNet {
        input_shift,
        input_scale,
        hidden1: affine(),
        hidden2: affine(),
        head_cls: affine(),
        head_mim: affine(),
    };
    net.validate().map_err(|e| fmt_err(e.to_string()))?;
    Ok(Snapshot { kind, config_hash, net })
}

/// Digest of every parameter value, for checking that a network stayed untouched.
pub fn param_digest(net: &SegNet<f32>) -> String {
    let mut hasher = Sha256::new();
    for (shape, data) in flat(net) {
        for d in shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(&hasher.finalize()[..16])
}

pub fn save_snapshot(snapshot: &Snapshot, path: &Path) -> Result<()> {
    let bytes = encode_snapshot(snapshot)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Snapshot {
        let mut rng = crate::seed::stream(4, &[]);
        let mut net = SegNet::<f32>::new(7, 5, 3, &mut rng);
        net.input_shift.fill(0.25);
        Snapshot {
            kind: "net3d".into(),
            config_hash: "00ff00ff00ff00ff".into(),
            net,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let snap = sample();
        let bytes = encode_snapshot(&snap).unwrap();
        let back = decode_snapshot(&bytes).unwrap();
        assert_eq!(back, snap);
        assert_eq!(encode_snapshot(&back).unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.snap");
        save_snapshot(&snap, &path).unwrap();
        assert_eq!(load_snapshot(&path).unwrap(), snap);
    }

    #[test]
    fn rejects_damaged_snapshots() {
        let bytes = encode_snapshot(&sample()).unwrap();
        assert!(decode_snapshot(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_snapshot(b"").is_err());
        let text = String::from_utf8_lossy(&bytes[..bytes.len().min(400)]).to_string();
        let swapped = text.replace("tensor hidden1.bias 5", "tensor hidden1.bias 6");
        let mut altered = swapped.into_bytes();
        altered.extend_from_slice(&bytes[400.min(bytes.len())..]);
        assert!(decode_snapshot(&altered).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_snapshot(&nan).is_err());
        let mut bad = sample();
        bad.kind = "two words".into();
        assert!(encode_snapshot(&bad).is_err());
    }
}
