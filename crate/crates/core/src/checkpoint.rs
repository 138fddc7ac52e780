//! Binary checkpoint container.
//!
//! Layout: the magic bytes `KHL1`, one version byte, then blocks of
//! `[name_len u32 LE][name bytes][rank u32 LE][dims u32 LE ...][f64 LE payload]`
//! until end of file.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KHL1";
pub const VERSION: u8 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.blocks.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| bad(format!("missing block {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for (name, t) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut head = [0u8; 5];
        cur.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        if head[4] != VERSION {
            return Err(bad(format!("unsupported version {}", head[4])));
        }
        let mut blocks = Vec::new();
        while !cur.is_empty() {
            let name_len = read_u32(&mut cur, "name length")? as usize;
            let name = take(&mut cur, name_len, "name")?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("block name is not utf-8"))?;
            let rank = read_u32(&mut cur, "rank")? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut cur, "dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let payload = take(&mut cur, count * 8, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("block {name:?}: {e}")))?;
            blocks.push((name, t));
        }
        Ok(Self { blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn take<'a>(cur: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(bad(format!("truncated {what}")));
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Ok(head)
}

fn read_u32(cur: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cur, 4, what)?.try_into().expect("4 bytes")))
}

/// ChaCha state as 14 exactly-representable doubles: 8 seed words, the
/// stream as 2 words and the word position as 4 words.
pub fn rng_to_tensor(rng: &ChaCha8Rng) -> Tensor {
    let mut words: Vec<f64> = rng
        .get_seed()
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let stream = rng.get_stream();
    words.extend([(stream & 0xffff_ffff) as u32 as f64, (stream >> 32) as u32 as f64]);
    let pos = rng.get_word_pos();
    words.extend((0..4).map(|k| ((pos >> (32 * k)) & 0xffff_ffff) as u32 as f64));
    Tensor::new(vec![words.len()], words).expect("fixed length")
}

pub fn rng_from_tensor(t: &Tensor) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let d = t.data();
    if d.len() != 14 || d.iter().any(|&x| x < 0.0 || x > u32::MAX as f64 || x.fract() != 0.0) {
        return Err(bad("malformed rng block"));
    }
    let mut seed = [0u8; 32];
    for (k, &w) in d[..8].iter().enumerate() {
        seed[4 * k..4 * k + 4].copy_from_slice(&(w as u32).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(d[8] as u64 | ((d[9] as u64) << 32));
    let pos = (0..4).fold(0u128, |acc, k| acc | ((d[10 + k] as u128) << (32 * k)));
    rng.set_word_pos(pos);
    Ok(rng)
}
