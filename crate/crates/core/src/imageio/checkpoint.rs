//! Binary model checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "UWCN"
//! 4       4     u32 format version (1)
//! 8       4     u32 num_blocks
//! 12      4     u32 convs_per_block
//! 16      4     u32 feature_maps
//! 20      1     u8 flags: bit 0 residual learning, bit 1 dense concatenation
//! 21      8     u64 init seed
//! 29      2     u16 water-type tag length n
//! 31      n     UTF-8 water-type tag
//! ..      4     u32 layer count L
//! ..      16·L  per layer: u32 kernel height, kernel width, in channels, out channels
//! ..      ..    f32 weights, layer by layer: kernel in [ky][kx][in][out] order, then bias
//! ```
//!
//! The file must end exactly after the last weight. Weights are trained in
//! double precision and stored as single precision.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ConvParams, KERNEL_SIZE};

pub const MAGIC: &[u8; 4] = b"UWCN";
pub const VERSION: u32 = 1;

const FLAG_RESIDUAL: u8 = 1;
const FLAG_DENSE: u8 = 2;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub water_type_tag: String,
}

pub fn encode_checkpoint(model: &Model, water_type_tag: &str) -> Result<Vec<u8>> {
    let cfg = model.config();
    let tag = water_type_tag.as_bytes();
    let tag_len = u16::try_from(tag.len())
        .map_err(|_| Error::Config("water-type tag longer than 65535 bytes".into()))?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))
    };

    let mut out = Vec::with_capacity(64 + model.parameter_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(cfg.num_blocks, "num_blocks")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cfg.convs_per_block, "convs_per_block")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cfg.feature_maps, "feature_maps")?.to_le_bytes());
    let mut flags = 0u8;
    if cfg.residual_learning {
        flags |= FLAG_RESIDUAL;
    }
    if cfg.dense_concat {
        flags |= FLAG_DENSE;
    }
    out.push(flags);
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&tag_len.to_le_bytes());
    out.extend_from_slice(tag);
    out.extend_from_slice(&to_u32(model.layers().len(), "layer count")?.to_le_bytes());
    for l in model.layers() {
        for v in [KERNEL_SIZE, KERNEL_SIZE, l.in_channels(), l.out_channels()] {
            out.extend_from_slice(&to_u32(v, "layer dimension")?.to_le_bytes());
        }
    }
    for l in model.layers() {
        for &w in l.kernel().iter().chain(l.bias()) {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated checkpoint: {what} needs {n} bytes at offset {}",
                    self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    let bad = |msg: String| Error::format(path, msg);

    if r.take(4, "magic")? != MAGIC {
        return Err(bad("bad magic: not a UWCN checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    let num_blocks = r.u32("num_blocks")? as usize;
    let convs_per_block = r.u32("convs_per_block")? as usize;
    let feature_maps = r.u32("feature_maps")? as usize;
    let flags = r.u8("flags")?;
    if flags & !(FLAG_RESIDUAL | FLAG_DENSE) != 0 {
        return Err(bad(format!("unknown flag bits {flags:#04x}")));
    }
    let seed = r.u64("seed")?;
    let tag_len = r.u16("tag length")? as usize;
    let tag = std::str::from_utf8(r.take(tag_len, "water-type tag")?)
        .map_err(|e| bad(format!("water-type tag is not UTF-8: {e}")))?
        .to_string();
    let config = ModelConfig {
        num_blocks,
        convs_per_block,
        feature_maps,
        residual_learning: flags & FLAG_RESIDUAL != 0,
        dense_concat: flags & FLAG_DENSE != 0,
        seed,
    };
    config
        .validate()
        .map_err(|e| bad(format!("invalid architecture in header: {e}")))?;

    let layer_count = r.u32("layer count")? as usize;
    let expected = config.layer_dims();
    if layer_count != expected.len() {
        return Err(bad(format!(
            "header declares {layer_count} layers, architecture implies {}",
            expected.len()
        )));
    }
    let mut dims = Vec::with_capacity(layer_count);
    for (i, &(cin, cout)) in expected.iter().enumerate() {
        let d = [
            r.u32("layer dims")?,
            r.u32("layer dims")?,
            r.u32("layer dims")?,
            r.u32("layer dims")?,
        ];
        let d = d.map(|v| v as usize);
        if d != [KERNEL_SIZE, KERNEL_SIZE, cin, cout] {
            return Err(bad(format!(
                "layer {i} declared {}x{}x{}x{}, architecture implies 3x3x{cin}x{cout}",
                d[0], d[1], d[2], d[3]
            )));
        }
        dims.push((cin, cout));
    }

    let weight_count: usize = dims
        .iter()
        .map(|&(cin, cout)| KERNEL_SIZE * KERNEL_SIZE * cin * cout + cout)
        .sum();
    let remaining = bytes.len() - r.pos;
    if remaining != weight_count * 4 {
        return Err(bad(format!(
            "declared dimensions need {weight_count} weights ({} bytes) at offset {}, file has {remaining} bytes",
            weight_count * 4,
            r.pos
        )));
    }
    let mut layers = Vec::with_capacity(dims.len());
    for (cin, cout) in dims {
        let mut read_f32s = |n: usize| -> Result<Vec<f64>> {
            Ok(r.take(n * 4, "weights")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect())
        };
        let kernel = read_f32s(KERNEL_SIZE * KERNEL_SIZE * cin * cout)?;
        let bias = read_f32s(cout)?;
        layers.push(ConvParams::new(cin, cout, kernel, bias)?);
    }
    let model = Model::from_layers(config, layers)?;
    if !model.is_finite() {
        return Err(bad("checkpoint contains non-finite weights".into()));
    }
    Ok(Checkpoint {
        model,
        water_type_tag: tag,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &Model, water_type_tag: &str) -> Result<()> {
    let path = path.as_ref();
    super::atomic_write(path, &encode_checkpoint(model, water_type_tag)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample_input() -> Tensor {
        Tensor::from_fn(9, 10, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0)
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                residual_learning: false,
                seed: 5,
                ..Default::default()
            },
            ModelConfig {
                dense_concat: false,
                seed: 6,
                ..Default::default()
            },
        ] {
            let model = Model::build(cfg.clone()).unwrap();
            let p = dir.path().join("m.uwcn");
            model.save(&p, "III").unwrap();
            let ck = read_checkpoint(&p).unwrap();
            assert_eq!(ck.water_type_tag, "III");
            assert_eq!(ck.model.config(), &cfg);
            for (a, b) in model
                .flat_parameters()
                .iter()
                .zip(ck.model.flat_parameters())
            {
                assert_eq!(*a as f32 as f64, b);
            }
            let x = sample_input();
            let ya = model.predict(&x).unwrap();
            let yb = ck.model.predict(&x).unwrap();
            for (a, b) in ya.data().iter().zip(yb.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn corrupt_headers() {
        let model = Model::build(ModelConfig::default()).unwrap();
        let good = encode_checkpoint(&model, "1").unwrap();
        let p = Path::new("mem");
        assert!(decode_checkpoint(&good, p).is_ok());

        let mut bad = good.clone();
        bad[0] ^= 0xff;
        let e = decode_checkpoint(&bad, p).unwrap_err();
        assert!(e.to_string().contains("magic"), "{e}");

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let e = decode_checkpoint(&bad, p).unwrap_err();
        assert!(
            e.to_string().contains("unsupported checkpoint version 2"),
            "{e}"
        );

        let e = decode_checkpoint(&good[..good.len() - 3], p).unwrap_err();
        assert!(matches!(e, Error::Format { .. }));
        let e = decode_checkpoint(&good[..20], p).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");

        // Header says 17 feature maps but weights are for 16.
        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&17u32.to_le_bytes());
        assert!(decode_checkpoint(&bad, p).is_err());

        let mut extra = good.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(decode_checkpoint(&extra, p).is_err());
    }
}
