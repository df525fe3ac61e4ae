//! Versioned checkpoint container.
//!
//! Layout: magic, format version, a JSON metadata blob (model kind plus
//! encoder config), then named f32 arrays with explicit shapes, all
//! little-endian. Readers reject unknown magic or versions instead of
//! guessing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingEncoder, EncoderConfig, FeatureMapEncoder};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// What the arrays parameterize: "classifier" or "rpn".
    pub kind: String,
    pub encoder: EncoderConfig,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, array) in &self.arrays {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(array.ndim() as u32).to_le_bytes())?;
            for &d in array.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in array.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let version = read_u32(&mut r, path)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version}, this build reads {VERSION}",
                path.display()
            )));
        }
        let meta_len = read_u32(&mut r, path)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_bytes, path)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
        let n_arrays = read_u32(&mut r, path)? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name_len = read_u32(&mut r, path)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, path)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint(format!("{}: bad array name", path.display())))?;
            let ndim = read_u32(&mut r, path)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b, path)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f32; len];
            for v in data.iter_mut() {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b, path)?;
                *v = f32::from_le_bytes(b);
            }
            let array = ArrayD::from_shape_vec(shape, data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            arrays.push((name, array));
        }
        Ok(Checkpoint { meta, arrays })
    }

    fn take(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated", path.display())))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_embedding_encoder(enc: &EmbeddingEncoder<f32>, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    enc.for_each_param(|_, name, view| {
        arrays.push((name.to_string(), view.to_owned()));
    });
    Checkpoint {
        meta: CheckpointMeta { kind: "classifier".into(), encoder: enc.config().clone() },
        arrays,
    }
    .write(path)
}

pub fn load_embedding_encoder(path: &Path) -> Result<EmbeddingEncoder<f32>> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.meta.kind != "classifier" {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {} model, expected classifier",
            path.display(),
            ckpt.meta.kind
        )));
    }
    let mut rng = crate::util::rng_stream(0, crate::util::StreamDomain::Init, 0);
    let mut enc = EmbeddingEncoder::init(ckpt.meta.encoder.clone(), &mut rng)?;
    assign_params(&ckpt, |f| enc.for_each_param_mut(f))?;
    Ok(enc)
}

pub fn save_feature_map_encoder(enc: &FeatureMapEncoder<f32>, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    enc.for_each_param(|_, name, view| {
        arrays.push((name.to_string(), view.to_owned()));
    });
    Checkpoint {
        meta: CheckpointMeta { kind: "rpn".into(), encoder: enc.config().clone() },
        arrays,
    }
    .write(path)
}

pub fn load_feature_map_encoder(path: &Path) -> Result<FeatureMapEncoder<f32>> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.meta.kind != "rpn" {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {} model, expected rpn",
            path.display(),
            ckpt.meta.kind
        )));
    }
    let mut rng = crate::util::rng_stream(0, crate::util::StreamDomain::Init, 0);
    let mut enc = FeatureMapEncoder::init(ckpt.meta.encoder.clone(), &mut rng)?;
    assign_params(&ckpt, |f| enc.for_each_param_mut(f))?;
    Ok(enc)
}

fn assign_params(
    ckpt: &Checkpoint,
    mut for_each: impl FnMut(&mut dyn FnMut(usize, &str, ndarray::ArrayViewMutD<f32>)),
) -> Result<()> {
    let mut failure: Option<Error> = None;
    for_each(&mut |_, name, mut view| {
        if failure.is_some() {
            return;
        }
        match ckpt.take(name) {
            Ok(stored) if stored.shape() == view.shape() => {
                view.assign(stored);
            }
            Ok(stored) => {
                failure = Some(Error::Checkpoint(format!(
                    "array {name}: stored shape {:?}, model wants {:?}",
                    stored.shape(),
                    view.shape()
                )));
            }
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ChannelStats;
    use crate::util::{rng_stream, StreamDomain};
    use ndarray::{Array2, Array3};

    #[test]
    fn embedding_encoder_roundtrips_bit_for_bit() {
        let mut rng = rng_stream(5, StreamDomain::Init, 0);
        let cfg = EncoderConfig {
            input_channels: 4,
            widths: vec![4, 5, 6, 7],
            stats: ChannelStats::identity(),
        };
        let enc = EmbeddingEncoder::<f32>::init(cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.ckpt");
        save_embedding_encoder(&enc, &path).unwrap();
        let back = load_embedding_encoder(&path).unwrap();

        let img = Array3::from_shape_fn((3, 19, 23), |(c, y, x)| {
            ((c + 2 * y + 3 * x) as f32 * 0.37).sin() * 0.5 + 0.5
        });
        let mask = Array2::from_shape_fn((19, 23), |(y, x)| ((x + y) % 3 == 0) as u8 as f32);
        let a = enc.embed(img.view(), Some(mask.view())).unwrap();
        let b = back.embed(img.view(), Some(mask.view())).unwrap();
        assert_eq!(a, b, "reloaded encoder must reproduce outputs exactly");
    }

    #[test]
    fn feature_map_encoder_roundtrips() {
        let mut rng = rng_stream(6, StreamDomain::Init, 0);
        let cfg = EncoderConfig {
            input_channels: 3,
            widths: vec![4, 6, 8],
            stats: ChannelStats::identity(),
        };
        let enc = FeatureMapEncoder::<f32>::init(cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rpn.ckpt");
        save_feature_map_encoder(&enc, &path).unwrap();
        let back = load_feature_map_encoder(&path).unwrap();
        let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            ((c * 5 + y + x) as f32 * 0.21).cos()
        });
        assert_eq!(
            enc.feature_map(img.view()).unwrap(),
            back.feature_map(img.view()).unwrap()
        );
    }

    #[test]
    fn wrong_kind_and_truncation_are_rejected() {
        let mut rng = rng_stream(7, StreamDomain::Init, 0);
        let cfg = EncoderConfig {
            input_channels: 3,
            widths: vec![4, 6, 8],
            stats: ChannelStats::identity(),
        };
        let enc = FeatureMapEncoder::<f32>::init(cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rpn.ckpt");
        save_feature_map_encoder(&enc, &path).unwrap();
        assert!(load_embedding_encoder(&path).is_err());

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_feature_map_encoder(&cut).is_err());

        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let err = load_feature_map_encoder(&junk).unwrap_err();
        assert!(format!("{err}").contains("not a checkpoint"));
    }
}
