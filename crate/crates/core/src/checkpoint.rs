//! Checkpoint files.
//!
//! A text header of `key=value` lines ending in `end`, then for every weight
//! set (`raw`, `ema`, optionally `frozen`) its arrays in declaration order:
//! frequencies first, then each layer's weight and bias. Every array is
//! written as `u64 ndim`, `ndim × u64 dims`, then the values, all little-endian.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::net::{Arch, CmParams, CoeffSpec, Layer, TruncPair};

const MAGIC: &str = "tcm-ckpt v1";
/// Refuse absurd headers before allocating.
const MAX_ARRAY_LEN: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub seed: u64,
    pub iteration: u64,
    /// Set for second-stage checkpoints.
    pub t_prime: Option<f64>,
    pub config_hash: String,
    pub raw: CmParams,
    pub ema: CmParams,
    pub frozen: Option<CmParams>,
}

impl Checkpoint {
    pub fn arch(&self) -> &Arch {
        &self.ema.arch
    }

    pub fn sigma_data(&self) -> f64 {
        self.ema.coeff.sigma_data
    }

    /// The network used for evaluation: the EMA weights, wrapped with the
    /// frozen first-stage weights below `t'` for second-stage checkpoints.
    pub fn model(&self) -> Result<EvalModel> {
        match (self.t_prime, &self.frozen) {
            (Some(tp), Some(f)) => Ok(EvalModel::Truncated(TruncPair::new(
                self.ema.clone(),
                f.clone(),
                tp,
            )?)),
            (None, None) => Ok(EvalModel::Plain(self.ema.clone())),
            _ => Err(Error::Format(
                "checkpoint has t_prime without frozen weights or vice versa".into(),
            )),
        }
    }

    /// The EMA student alone, without the frozen network below `t'`.
    pub fn student(&self) -> EvalModel {
        EvalModel::Plain(self.ema.clone())
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        let a = self.arch();
        let hidden: Vec<String> = a.hidden.iter().map(|h| h.to_string()).collect();
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "stage={}", self.stage)?;
        writeln!(out, "dim={}", a.dim)?;
        writeln!(out, "hidden={}", hidden.join(","))?;
        writeln!(out, "fourier={}", a.fourier)?;
        writeln!(out, "fourier_scale={:?}", a.fourier_scale)?;
        writeln!(out, "sigma_data={:?}", self.sigma_data())?;
        match self.t_prime {
            Some(t) => writeln!(out, "t_prime={t:?}")?,
            None => writeln!(out, "t_prime=none")?,
        }
        writeln!(out, "seed={}", self.seed)?;
        writeln!(out, "iteration={}", self.iteration)?;
        writeln!(out, "config_hash={}", self.config_hash)?;
        writeln!(
            out,
            "sets={}",
            if self.frozen.is_some() {
                "raw,ema,frozen"
            } else {
                "raw,ema"
            }
        )?;
        writeln!(out, "end")?;
        for p in [Some(&self.raw), Some(&self.ema), self.frozen.as_ref()]
            .into_iter()
            .flatten()
        {
            write_array(out, &p.freqs)?;
            for l in &p.layers {
                write_array(out, &l.weight)?;
                write_array(out, &l.bias)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(mut input: impl BufRead) -> Result<Self> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Format(format!(
                "expected '{MAGIC}', got '{}'",
                line.trim_end()
            )));
        }
        let mut kv = std::collections::BTreeMap::new();
        loop {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(Error::Format(
                    "checkpoint header not terminated by 'end'".into(),
                ));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed header line '{l}'")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks '{k}'")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value '{v}' for '{k}'")))
        }
        let hidden = get("hidden")?;
        let hidden = if hidden.is_empty() {
            vec![]
        } else {
            hidden
                .split(',')
                .map(|h| num("hidden", h))
                .collect::<Result<Vec<usize>>>()?
        };
        let arch = Arch {
            dim: num("dim", get("dim")?)?,
            hidden,
            fourier: num("fourier", get("fourier")?)?,
            fourier_scale: num("fourier_scale", get("fourier_scale")?)?,
        };
        arch.validate()
            .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
        let coeff = CoeffSpec {
            sigma_data: num("sigma_data", get("sigma_data")?)?,
        };
        let t_prime = match get("t_prime")?.as_str() {
            "none" => None,
            v => Some(num("t_prime", v)?),
        };
        let with_frozen = match get("sets")?.as_str() {
            "raw,ema" => false,
            "raw,ema,frozen" => true,
            s => return Err(Error::Format(format!("unknown weight sets '{s}'"))),
        };
        let mut read_set = || -> Result<CmParams> {
            let freqs = read_array(&mut input, &[1, arch.fourier / 2])?;
            let layers = arch
                .layer_dims()
                .into_iter()
                .map(|(i, o)| {
                    Ok(Layer {
                        weight: read_array(&mut input, &[i, o])?,
                        bias: read_array(&mut input, &[1, o])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CmParams {
                arch: arch.clone(),
                coeff,
                freqs,
                layers,
            })
        };
        let raw = read_set()?;
        let ema = read_set()?;
        let frozen = if with_frozen { Some(read_set()?) } else { None };
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                rest.len()
            )));
        }
        Ok(Checkpoint {
            stage: num("stage", get("stage")?)?,
            seed: num("seed", get("seed")?)?,
            iteration: num("iteration", get("iteration")?)?,
            t_prime,
            config_hash: get("config_hash")?.clone(),
            raw,
            ema,
            frozen,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_array(out: &mut impl Write, a: &Array) -> Result<()> {
    out.write_all(&(a.shape().len() as u64).to_le_bytes())?;
    for &d in a.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in a.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_array(input: &mut impl Read, expect: &[usize]) -> Result<Array> {
    let ndim = read_u64(input)?;
    if ndim != expect.len() as u64 {
        return Err(Error::Format(format!(
            "array rank {ndim}, expected {}",
            expect.len()
        )));
    }
    let mut shape = Vec::with_capacity(expect.len());
    for _ in 0..ndim {
        shape.push(read_u64(input)?);
    }
    if shape.iter().zip(expect).any(|(&a, &b)| a != b as u64) {
        return Err(Error::Format(format!(
            "array shape {shape:?} does not match architecture {expect:?}"
        )));
    }
    let len: u64 = shape.iter().product();
    if len > MAX_ARRAY_LEN {
        return Err(Error::Format(format!("array of {len} values is too large")));
    }
    let data = (0..len)
        .map(|_| read_u64(input).map(f64::from_bits))
        .collect::<Result<Vec<_>>>()?;
    Array::new(expect.to_vec(), data)
}

/// A checkpoint's evaluation network.
#[derive(Clone, Debug)]
pub enum EvalModel {
    Plain(CmParams),
    Truncated(TruncPair),
}

impl crate::net::ConsistencyFn for EvalModel {
    fn dim(&self) -> usize {
        match self {
            EvalModel::Plain(p) => p.dim(),
            EvalModel::Truncated(p) => p.dim(),
        }
    }

    fn eval(&self, x: &Array, t: &[f64]) -> Result<Array> {
        match self {
            EvalModel::Plain(p) => p.eval(x, t),
            EvalModel::Truncated(p) => p.eval(x, t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::random_head;

    fn arch() -> Arch {
        Arch {
            dim: 2,
            hidden: vec![6, 5],
            fourier: 4,
            fourier_scale: 1.0,
        }
    }

    fn ckpt(stage2: bool) -> Checkpoint {
        Checkpoint {
            stage: if stage2 { 2 } else { 1 },
            seed: 42,
            iteration: 1234,
            t_prime: stage2.then_some(1.0),
            config_hash: "abc".into(),
            raw: random_head(1, &arch()),
            ema: random_head(2, &arch()),
            frozen: stage2.then(|| random_head(3, &arch())),
        }
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut b = Vec::new();
        c.write(&mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for s2 in [false, true] {
            let c = ckpt(s2);
            let b = bytes(&c);
            let back = Checkpoint::read(&b[..]).unwrap();
            assert_eq!(back, c);
            assert_eq!(bytes(&back), b);
        }
    }

    #[test]
    fn header_is_readable_text() {
        let b = bytes(&ckpt(true));
        let text = String::from_utf8_lossy(&b);
        assert!(text.starts_with("tcm-ckpt v1\nstage=2\n"));
        assert!(text.contains("t_prime=1.0\n"));
        assert!(text.contains("sets=raw,ema,frozen\nend\n"));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let b = bytes(&ckpt(false));
        assert!(matches!(
            Checkpoint::read(&b[..b.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(
            Checkpoint::read(&extra[..]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Checkpoint::read(&b"tcm-ckpt v2\n"[..]),
            Err(Error::Format(_))
        ));
        let text = String::from_utf8_lossy(&b)
            .replace("hidden=6,5", "hidden=6,4")
            .into_bytes();
        assert!(Checkpoint::read(&text[..]).is_err());
    }

    #[test]
    fn stage2_model_is_truncated() {
        let c = ckpt(true);
        let m = c.model().unwrap();
        assert!(matches!(m, EvalModel::Truncated(_)));
        let x = Array::from_rows(&[[0.1, 0.2], [0.3, -0.1]]).unwrap();
        use crate::net::ConsistencyFn;
        assert_eq!(
            m.eval(&x, &[0.5, 0.5]).unwrap(),
            c.frozen.as_ref().unwrap().eval(&x, &[0.5, 0.5]).unwrap()
        );
        assert_eq!(
            m.eval(&x, &[80.0, 80.0]).unwrap(),
            c.ema.eval(&x, &[80.0, 80.0]).unwrap()
        );
    }
}
