use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use super::adam::OptimizerState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::glimpse::Window;
use crate::model::{ModelParams, Variant};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RLAT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const OPT_STEP: &str = "opt/step";
const CFG_KEYS: [&str; 12] = [
    "cfg/glimpses",
    "cfg/batch_size",
    "cfg/epochs",
    "cfg/seed",
    "cfg/learning_rate",
    "cfg/beta1",
    "cfg/beta2",
    "cfg/eps",
    "cfg/grad_clip",
    "cfg/lattice_lr_scale",
    "cfg/window",
    "cfg/snapshot_every",
];

/// Parameters, optimizer moments and the configuration that produced them.
///
/// Integer and 64-bit scalars are stored as four 16-bit limbs so that they
/// survive the all-`f32` tensor encoding exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub opt: OptimizerState<f32>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn variant(&self) -> Variant {
        self.params.variant
    }

    /// Checks the stored variant against `expected`. With `force` a mismatch
    /// is accepted and the checkpoint is relabelled.
    pub fn expect_variant(mut self, expected: Variant, force: bool) -> Result<Self> {
        if self.params.variant == expected {
            return Ok(self);
        }
        if !force {
            return Err(Error::VariantMismatch {
                found: self.params.variant.to_string(),
                expected: expected.to_string(),
            });
        }
        self.params.variant = expected;
        self.opt.m.variant = expected;
        self.opt.v.variant = expected;
        self.config.variant = expected;
        Ok(self)
    }

}

fn limbs(v: u64) -> ArrayD<f32> {
    ArrayD::from_shape_vec(
        IxDyn(&[4]),
        (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect(),
    )
    .expect("four limbs")
}

fn unlimb(name: &str, a: &ArrayD<f32>) -> std::result::Result<u64, String> {
    let mut v = 0u64;
    for (i, &x) in a.iter().enumerate() {
        if !(0.0..=65535.0).contains(&x) || x.fract() != 0.0 {
            return Err(format!("tensor `{name}` holds a non-integer limb {x}"));
        }
        v |= (x as u64) << (16 * i);
    }
    Ok(v)
}

fn config_entries(c: &TrainConfig, window: Window) -> [(&'static str, u64); 12] {
    let vals = [
        c.glimpses as u64,
        c.batch_size as u64,
        c.epochs as u64,
        c.seed,
        c.learning_rate.to_bits(),
        c.beta1.to_bits(),
        c.beta2.to_bits(),
        c.eps.to_bits(),
        c.grad_clip.unwrap_or(0.0).to_bits(),
        c.lattice_lr_scale.to_bits(),
        window.as_scalar().to_bits(),
        c.snapshot_every.unwrap_or(0),
    ];
    let mut out = [("", 0u64); 12];
    for (slot, (k, v)) in out.iter_mut().zip(CFG_KEYS.iter().zip(vals)) {
        *slot = (k, v);
    }
    out
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let params = &ckpt.params;
    let mut body = Vec::new();
    let mut count = 0u32;
    for (prefix, p) in [("", params), ("opt/m/", &ckpt.opt.m), ("opt/v/", &ckpt.opt.v)] {
        for (name, t) in p.tensors() {
            put_tensor(&mut body, &format!("{prefix}{name}"), t.shape(), t.iter().copied());
            count += 1;
        }
    }
    let step = limbs(ckpt.opt.step);
    put_tensor(&mut body, OPT_STEP, &[4], step.iter().copied());
    count += 1;
    for (name, v) in config_entries(&ckpt.config, params.window) {
        put_tensor(&mut body, name, &[4], limbs(v).iter().copied());
        count += 1;
    }

    let mut out = Vec::with_capacity(body.len() + 17);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.variant.code().to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("{what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::format(self.path, offset as u64, msg)
    }
}

/// Tensor shapes expressed over the symbols K (kernels), H (hidden) and C
/// (classes); bound on first use.
fn template(name: &str) -> Option<&'static [Dim]> {
    use Dim::*;
    let base = name
        .strip_prefix("opt/m/")
        .or_else(|| name.strip_prefix("opt/v/"))
        .unwrap_or(name);
    Some(match base {
        "lattice/mu" => &[K, Lit(2)],
        "lattice/log_sigma" => &[K],
        "rnn/w_in" => &[H, K],
        "rnn/w_rec1" | "rnn/w_12" | "rnn/w_rec2" => &[H, H],
        "rnn/b1" | "rnn/b2" => &[H],
        "control/w" => &[Lit(3), H],
        "control/b" => &[Lit(3)],
        "predict/w" => &[C, H],
        "predict/b" => &[C],
        _ if name == OPT_STEP || CFG_KEYS.contains(&name) => &[Lit(4)],
        _ => return None,
    })
}

#[derive(Clone, Copy)]
enum Dim {
    K,
    H,
    C,
    Lit(usize),
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(5, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(cur.fail(0, "not a checkpoint (bad magic)"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(cur.fail(5, format!("unsupported checkpoint version {version}")));
    }
    let code = cur.u32("variant")?;
    let variant = Variant::from_code(code).ok_or_else(|| cur.fail(9, format!("unknown variant code {code}")))?;
    let count = cur.u32("tensor count")?;

    let mut symbols: [Option<usize>; 3] = [None; 3];
    let mut tensors: HashMap<String, ArrayD<f32>> = HashMap::new();
    let mut previous = String::from("<header>");
    for _ in 0..count {
        let start = cur.pos;
        let ctx = format!("entry after tensor `{previous}`");
        let len = u16::from_le_bytes(cur.take(2, &ctx)?.try_into().unwrap()) as usize;
        let raw = cur.take(len, &ctx)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| cur.fail(start, format!("{ctx}: name is not UTF-8")))?
            .to_string();
        let shape_tpl = template(&name)
            .ok_or_else(|| cur.fail(start, format!("{ctx}: unknown tensor name {name:?}")))?;
        let dims_at = cur.pos;
        let ndim = cur.take(1, &format!("tensor `{name}` rank"))?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32(&format!("tensor `{name}` dims"))? as usize);
        }
        if ndim != shape_tpl.len() {
            return Err(cur.fail(dims_at, format!("tensor `{name}` has rank {ndim}, expected {}", shape_tpl.len())));
        }
        for (&got, &want) in shape.iter().zip(shape_tpl) {
            let ok = match want {
                Dim::Lit(n) => got == n,
                Dim::K | Dim::H | Dim::C => {
                    let idx = match want {
                        Dim::K => 0,
                        Dim::H => 1,
                        _ => 2,
                    };
                    let slot = &mut symbols[idx];
                    *slot.get_or_insert(got) == got
                }
            };
            if !ok {
                return Err(cur.fail(dims_at, format!("tensor `{name}` has inconsistent dims {shape:?}")));
            }
        }
        let n: usize = shape.iter().product();
        let data = cur.take(n * 4, &format!("tensor `{name}` data"))?;
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length checked");
        if tensors.insert(name.clone(), arr).is_some() {
            return Err(cur.fail(start, format!("tensor `{name}` appears twice")));
        }
        previous = name;
    }
    if cur.pos != bytes.len() {
        return Err(cur.fail(cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let invalid = |e: Error| match e {
        Error::InvalidArgument(m) => cur.fail(bytes.len(), m),
        other => other,
    };
    let mut scalar = |name: &str| -> Result<u64> {
        let a = tensors
            .remove(name)
            .ok_or_else(|| cur.fail(bytes.len(), format!("missing tensor `{name}`")))?;
        unlimb(name, &a).map_err(|m| cur.fail(bytes.len(), m))
    };
    let step = scalar(OPT_STEP)?;
    let mut cfg = [0u64; 12];
    for (slot, key) in cfg.iter_mut().zip(CFG_KEYS) {
        *slot = scalar(key)?;
    }
    let window = Window::from_scalar(f64::from_bits(cfg[10]));
    let config = TrainConfig {
        glimpses: cfg[0] as usize,
        batch_size: cfg[1] as usize,
        epochs: cfg[2] as usize,
        seed: cfg[3],
        variant,
        learning_rate: f64::from_bits(cfg[4]),
        beta1: f64::from_bits(cfg[5]),
        beta2: f64::from_bits(cfg[6]),
        eps: f64::from_bits(cfg[7]),
        grad_clip: Some(f64::from_bits(cfg[8])).filter(|&c| c != 0.0),
        lattice_lr_scale: f64::from_bits(cfg[9]),
        snapshot_every: Some(cfg[11]).filter(|&s| s != 0),
    };

    let params = ModelParams::from_tensors(variant, window, |n| tensors.remove(n)).map_err(invalid)?;
    let m = ModelParams::from_tensors(variant, window, |n| tensors.remove(&format!("opt/m/{n}"))).map_err(invalid)?;
    let v = ModelParams::from_tensors(variant, window, |n| tensors.remove(&format!("opt/v/{n}"))).map_err(invalid)?;
    Ok(Checkpoint {
        params,
        opt: OptimizerState { step, m, v },
        config,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_checkpoint(&bytes, &path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glimpse::init_lattice;
    use crate::model::ModelDims;
    use rand::SeedableRng;

    fn sample(variant: Variant) -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let dims = ModelDims {
            kernels: 9,
            hidden: 6,
            classes: 10,
        };
        let params = ModelParams::init(dims, variant, Window::Sigmas(4.0), init_lattice(3, 12.0, 2.0).unwrap(), &mut rng)
            .unwrap();
        let mut opt = OptimizerState::new(&params);
        opt.step = 123_456_789_012;
        opt.m.w_in.fill(0.25);
        opt.v.b2.fill(1e-7);
        let config = TrainConfig {
            variant,
            seed: u64::MAX - 3,
            learning_rate: 3e-4,
            grad_clip: None,
            snapshot_every: Some(500),
            ..TrainConfig::default()
        };
        Checkpoint { params, opt, config }
    }

    #[test]
    fn round_trip_is_exact() {
        for v in Variant::ALL {
            let c = sample(v);
            let bytes = encode_checkpoint(&c);
            let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&sample(Variant::TranslationZoom));
        assert_eq!(&bytes[..5], b"RLAT1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 12 * 3 + 1 + 12);
        assert_eq!(u16::from_le_bytes(bytes[17..19].try_into().unwrap()), 10);
        assert_eq!(&bytes[19..29], b"lattice/mu");
    }

    /// Byte offset of the dims of tensor `name`.
    fn dims_offset(bytes: &[u8], name: &str) -> usize {
        let needle = name.as_bytes();
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        at + needle.len() + 1
    }

    #[test]
    fn tampered_length_names_tensor() {
        let bytes = encode_checkpoint(&sample(Variant::TranslationOnly));
        for name in ["rnn/w_rec1", "control/b", "lattice/log_sigma"] {
            let mut bad = bytes.clone();
            let off = dims_offset(&bad, name);
            bad[off] = bad[off].wrapping_add(1);
            let err = decode_checkpoint(&bad, Path::new("t.ckpt")).unwrap_err().to_string();
            assert!(err.contains(&format!("`{name}`")), "{err}");
        }
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = encode_checkpoint(&sample(Variant::FixedLattice));
        let err = decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, Path::new("t")).is_err());
        let mut bad = bytes;
        bad[5] = 9;
        assert!(decode_checkpoint(&bad, Path::new("t")).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn variant_guard() {
        let c = sample(Variant::FixedLattice);
        let err = c.clone().expect_variant(Variant::TranslationZoom, false).unwrap_err();
        assert!(matches!(err, Error::VariantMismatch { .. }));
        let forced = c.clone().expect_variant(Variant::TranslationZoom, true).unwrap();
        assert_eq!(forced.variant(), Variant::TranslationZoom);
        assert_eq!(forced.params.lattice, c.params.lattice);
        assert!(c.expect_variant(Variant::FixedLattice, false).is_ok());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let c = sample(Variant::TranslationZoom);
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
