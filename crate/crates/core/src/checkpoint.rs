//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"FFNW"                        4 bytes
//! version u16 (currently 1)              2 bytes
//! digest  SHA-256 of the spec encoding  32 bytes
//! len     u32 byte length of spec JSON   4 bytes
//! spec    canonical spec JSON          len bytes
//! params  f32 values in buffer order     4 bytes each
//! ```
//!
//! Parameters follow [`FfnParams`] buffer order: per layer, per volume
//! (row-major), weights then bias, with the head last. The file ends exactly
//! after the last parameter; trailing bytes, truncation, or a digest that
//! does not match the embedded spec all yield `CorruptCheckpoint`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{FfnParams, FfnSpec};

pub const MAGIC: [u8; 4] = *b"FFNW";
pub const VERSION: u16 = 1;

/// Writes a checkpoint for `params`, which must conform to `spec`.
pub fn save_checkpoint(spec: &FfnSpec, params: &FfnParams<f32>, path: &Path) -> Result<()> {
    spec.validate()?;
    params.conforms(spec)?;
    let spec_json = spec.canonical_encoding();
    let digest: [u8; 32] = Sha256::digest(spec_json.as_bytes()).into();
    if spec_json.len() > u32::MAX as usize {
        return Err(Error::InvalidSpec("spec encoding exceeds u32 length".into()));
    }

    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&MAGIC)?;
    writer.write_all(&VERSION.to_le_bytes())?;
    writer.write_all(&digest)?;
    writer.write_all(&(spec_json.len() as u32).to_le_bytes())?;
    writer.write_all(spec_json.as_bytes())?;
    let mut bytes = Vec::new();
    for buffer in params.buffers() {
        bytes.clear();
        bytes.reserve(buffer.len() * 4);
        for &value in buffer {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        writer.write_all(&bytes)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a checkpoint, returning the embedded spec and its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(FfnSpec, FfnParams<f32>)> {
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::CorruptCheckpoint(format!("bad magic {magic:?}")));
    }
    let mut version_bytes = [0u8; 2];
    read_exact(&mut reader, &mut version_bytes, "version")?;
    let version = u16::from_le_bytes(version_bytes);
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut stored_digest = [0u8; 32];
    read_exact(&mut reader, &mut stored_digest, "digest")?;
    let mut len_bytes = [0u8; 4];
    read_exact(&mut reader, &mut len_bytes, "spec length")?;
    let spec_len = u32::from_le_bytes(len_bytes) as usize;
    let mut spec_json = vec![0u8; spec_len];
    read_exact(&mut reader, &mut spec_json, "spec JSON")?;

    let computed: [u8; 32] = Sha256::digest(&spec_json).into();
    if computed != stored_digest {
        return Err(Error::CorruptCheckpoint(
            "stored digest does not match the embedded spec".into(),
        ));
    }
    let spec_text = std::str::from_utf8(&spec_json)
        .map_err(|_| Error::CorruptCheckpoint("spec JSON is not UTF-8".into()))?;
    let spec = match FfnSpec::from_json(spec_text) {
        Ok(spec) => spec,
        Err(err) => return Err(Error::CorruptCheckpoint(format!("embedded spec: {err}"))),
    };

    let mut params = FfnParams::<f32>::zeros(&spec);
    let mut bytes = Vec::new();
    for buffer in params.buffers_mut() {
        bytes.resize(buffer.len() * 4, 0);
        read_exact(&mut reader, &mut bytes, "parameters")?;
        for (value, chunk) in buffer.iter_mut().zip(bytes.chunks_exact(4)) {
            *value = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !value.is_finite() {
                return Err(Error::CorruptCheckpoint(format!(
                    "non-finite parameter {value}"
                )));
            }
        }
    }
    let mut overrun = [0u8; 1];
    match reader.read(&mut overrun)? {
        0 => Ok((spec, params)),
        _ => Err(Error::CorruptCheckpoint("trailing bytes after parameters".into())),
    }
}

/// Loads a checkpoint that must have been written for `expected`; a digest
/// mismatch yields `SpecMismatch`.
pub fn load_checkpoint_expecting(path: &Path, expected: &FfnSpec) -> Result<FfnParams<f32>> {
    let (spec, params) = load_checkpoint(path)?;
    if spec.digest() != expected.digest() {
        return Err(Error::SpecMismatch(format!(
            "checkpoint was written for {:?}, expected {:?}",
            spec.name, expected.name
        )));
    }
    Ok(params)
}

fn read_exact(reader: &mut impl Read, buffer: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buffer).map_err(|err| {
        if err.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CorruptCheckpoint(format!("truncated while reading {what}"))
        } else {
            Error::Io(err)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, VdpLayerSpec};
    use crate::tensor::Shape;

    fn tiny_spec() -> FfnSpec {
        FfnSpec::new(
            "tiny",
            vec![
                VdpLayerSpec::for_input(&Shape::d3(4, 4, 2), (2, 2, 2), 3, Activation::Relu)
                    .unwrap(),
                VdpLayerSpec::for_input(&Shape::d3(2, 2, 3), (1, 1, 3), 5, Activation::Relu)
                    .unwrap(),
            ],
        )
        .unwrap()
        .with_head(4)
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = tiny_spec();
        let params = FfnParams::<f32>::init(&spec, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ffnw");
        save_checkpoint(&spec, &params, &path).unwrap();
        let (loaded_spec, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_spec, spec);
        assert_eq!(loaded, params);
    }

    #[test]
    fn truncation_and_trailing_bytes_are_detected() {
        let spec = tiny_spec();
        let params = FfnParams::<f32>::init(&spec, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ffnw");
        save_checkpoint(&spec, &params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("truncated.ffnw");
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&truncated), Err(Error::CorruptCheckpoint(_))));

        let padded = dir.path().join("padded.ffnw");
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 3]);
        std::fs::write(&padded, &extended).unwrap();
        assert!(matches!(load_checkpoint(&padded), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn bad_magic_and_digest_are_detected() {
        let spec = tiny_spec();
        let params = FfnParams::<f32>::init(&spec, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ffnw");
        save_checkpoint(&spec, &params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        let bad = dir.path().join("bad.ffnw");
        std::fs::write(&bad, &wrong_magic).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::CorruptCheckpoint(_))));

        // Flip one byte inside the embedded spec JSON.
        bytes[4 + 2 + 32 + 4 + 3] ^= 0x01;
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn expecting_a_different_spec_is_a_mismatch() {
        let spec = tiny_spec();
        let params = FfnParams::<f32>::init(&spec, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ffnw");
        save_checkpoint(&spec, &params, &path).unwrap();

        let other = crate::network::preset(crate::network::Preset::Ffn16);
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(Error::SpecMismatch(_))
        ));
        let same = load_checkpoint_expecting(&path, &spec).unwrap();
        assert_eq!(same, params);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.ffnw")),
            Err(Error::Io(_))
        ));
    }
}
