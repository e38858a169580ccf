//! Binary model container.
//!
//! Layout: magic, u32 version, length-prefixed `key=value` config text, then
//! parameter records until four bytes remain, then a CRC32 of everything
//! before it. All integers are little-endian.

use std::path::Path;

use super::{Model, NetworkConfig, PsRnnNetwork, PsRnnPlus};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSRNNMDL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub config: Vec<(String, String)>,
    pub params: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("truncated model file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Integrity("non-UTF-8 text".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl ModelFile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Config(format!("config entry {k:?} cannot be serialized")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        put_str(&mut out, &text);
        for (name, t) in &self.params {
            if t.rank() > u8::MAX as usize {
                return Err(Error::InvalidShape(t.shape().to_vec()));
            }
            put_str(&mut out, name);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 {
            return Err(Error::Integrity("model file too short".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let mut config = Vec::new();
        for line in r.text()?.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Integrity(format!("config line {line:?} lacks '='")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let mut params = Vec::new();
        while r.pos < body.len() {
            let name = r.text()?.to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Integrity("oversized record".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push((name, Tensor::new(&shape, data).map_err(|_| Error::Integrity("bad record shape".into()))?));
        }
        Ok(Self { config, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies stored tensors into `targets`, requiring an exact name and shape match.
    fn fill(&self, targets: Vec<(String, &mut Tensor<f32>)>) -> Result<()> {
        if targets.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "file has {} tensors, model expects {}",
                self.params.len(),
                targets.len()
            )));
        }
        for ((name, dst), (sname, src)) in targets.into_iter().zip(&self.params) {
            if &name != sname || dst.shape() != src.shape() {
                return Err(Error::Integrity(format!(
                    "tensor {sname} {:?} does not match {name} {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Either kind of trained predictor.
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Network(PsRnnNetwork<f32>),
    Plus(PsRnnPlus<f32>),
}

impl SavedModel {
    pub fn pu_size(&self) -> usize {
        match self {
            Self::Network(n) => n.pu_size(),
            Self::Plus(p) => p.pu_size(),
        }
    }

    pub fn predict(&self, context: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Self::Network(n) => n.predict(context),
            Self::Plus(p) => p.predict(context),
        }
    }

    pub fn to_file(&self) -> ModelFile {
        let (kind, mut config, params): (&str, _, Vec<(String, &Tensor<f32>)>) = match self {
            Self::Network(n) => ("psrnn", n.config.to_pairs(), n.trainable()),
            Self::Plus(p) => {
                let mut c = p.config().to_pairs();
                c.push(("target".into(), p.target.to_string()));
                c.push(("plus_width".into(), p.width.to_string()));
                ("psrnn-plus", c, p.all_tensors())
            }
        };
        config.insert(0, ("kind".into(), kind.into()));
        ModelFile {
            config,
            params: params.into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let mut kind = None;
        let (mut target, mut width) = (None, None);
        let mut net = Vec::new();
        let int = |k: &str, v: &str| v.parse::<usize>().map_err(|_| Error::Integrity(format!("{k}: bad integer {v:?}")));
        for (k, v) in &file.config {
            match k.as_str() {
                "kind" => kind = Some(v.as_str()),
                "target" => target = Some(int(k, v)?),
                "plus_width" => width = Some(int(k, v)?),
                _ => net.push((k.as_str(), v.as_str())),
            }
        }
        let config = NetworkConfig::from_pairs(net).map_err(|e| Error::Integrity(format!("stored config: {e}")))?;
        let base = PsRnnNetwork::zeros(config)?;
        match (kind, target, width) {
            (Some("psrnn"), None, None) => {
                let mut n = base;
                file.fill(n.trainable_mut())?;
                Ok(Self::Network(n))
            }
            (Some("psrnn-plus"), Some(t), Some(w)) => {
                let mut p = PsRnnPlus::zeros(base, t, w)?;
                file.fill(p.all_tensors_mut())?;
                Ok(Self::Plus(p))
            }
            _ => Err(Error::Integrity("unrecognized model kind".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&ModelFile::read(path)?)
    }
}

pub fn save_model(net: &PsRnnNetwork<f32>, path: &Path) -> Result<()> {
    SavedModel::Network(net.clone()).save(path)
}

/// Loads a per-size network; a PS-RNN+ file is rejected.
pub fn load_model(path: &Path) -> Result<PsRnnNetwork<f32>> {
    match SavedModel::load(path)? {
        SavedModel::Network(n) => Ok(n),
        SavedModel::Plus(_) => Err(Error::Integrity("file holds a PS-RNN+ model".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SavedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        SavedModel::Network(PsRnnNetwork::init(NetworkConfig::with_pu_size(4), &mut rng).unwrap())
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample();
        let bytes = m.to_file().to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = SavedModel::from_file(&ModelFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_file().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn plus_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = PsRnnNetwork::init(NetworkConfig::default(), &mut rng).unwrap();
        let m = SavedModel::Plus(PsRnnPlus::build(base, 32, &mut rng).unwrap());
        let bytes = m.to_file().to_bytes().unwrap();
        assert_eq!(SavedModel::from_file(&ModelFile::from_bytes(&bytes).unwrap()).unwrap(), m);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_file().to_bytes().unwrap();
        for i in [0, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(matches!(ModelFile::from_bytes(&b), Err(Error::Integrity(_))), "byte {i}");
        }
        assert!(matches!(ModelFile::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch() {
        let mut b = sample().to_file().to_bytes().unwrap();
        b[8] = 7;
        let n = b.len() - 4;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(ModelFile::from_bytes(&b), Err(Error::Version { found: 7, expected: 1 })));
    }
}
