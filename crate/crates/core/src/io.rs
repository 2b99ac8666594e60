//! Byte-exact persistence: tensor containers, checkpoints, datasets and
//! flat `key = value` configs. Everything is little-endian.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{GridShape, TensorField};
use crate::network::{Arch, ArchConfig};
use crate::scalar::Real;
use crate::tasks::{AffineLabel, CellClass, CellImage, Ellipse, LabeledImage, RegistrationSample};

pub const TENSOR_MAGIC: [u8; 4] = *b"MKTN";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MKCP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    fn elem_size(code: u8) -> Result<usize> {
        match code {
            0 => Ok(4),
            1 => Ok(8),
            c => Err(Error::UnknownDtype(c)),
        }
    }
}

/// Row-major array. `rank` is the tensor rank of the field it holds (the
/// last `rank` dims are component axes); 0 for plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rank: u8,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

fn numel(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))
}

impl Tensor {
    pub fn new(rank: u8, dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize || rank as usize > dims.len() {
            return Err(Error::Shape(format!("{} dims with rank {rank}", dims.len())));
        }
        let n = numel(&dims)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { rank, dims, data })
    }

    /// Stores `f32` as dtype 0 and anything wider as dtype 1.
    pub fn from_real<T: Real>(rank: u8, dims: Vec<usize>, values: &[T]) -> Result<Self> {
        let data = if std::mem::size_of::<T>() == 4 {
            TensorData::F32(values.iter().map(|v| v.as_f64() as f32).collect())
        } else {
            TensorData::F64(values.iter().map(|v| v.as_f64()).collect())
        };
        Self::new(rank, dims, data)
    }

    pub fn to_real<T: Real>(&self) -> Vec<T> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        }
    }

    /// Grid dims followed by `rank` component axes of extent `d`.
    pub fn from_field(field: &TensorField<f64>) -> Result<Self> {
        let shape = field.shape();
        let mut dims = shape.dims().to_vec();
        dims.extend(std::iter::repeat_n(shape.ndim(), field.rank()));
        // fields store components fastest-varying per pixel block; reorder to
        // pixel-major, component-minor
        let comps = field.data().len() / shape.numel().max(1);
        let npix = shape.numel();
        let mut data = vec![0.0; field.data().len()];
        for c in 0..comps {
            for p in 0..npix {
                data[p * comps + c] = field.data()[c * npix + p];
            }
        }
        Self::new(field.rank() as u8, dims, TensorData::F64(data))
    }

    pub fn to_field(&self) -> Result<TensorField<f64>> {
        let rank = self.rank as usize;
        let grid = &self.dims[..self.dims.len() - rank];
        let shape = GridShape::new(grid.to_vec())?;
        let npix = shape.numel();
        let comps = self.data.len() / npix.max(1);
        let flat = self.to_real::<f64>();
        let mut data = vec![0.0; flat.len()];
        for c in 0..comps {
            for p in 0..npix {
                data[c * npix + p] = flat[p * comps + c];
            }
        }
        TensorField::new(shape, rank, data)
    }
}

fn io_err_header(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::TruncatedHeader
    } else {
        Error::Io(e)
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err_header)?;
    Ok(b)
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_array::<1>(r)?[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(read_array(r)?))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::TruncatedHeader);
    }
    String::from_utf8(buf).map_err(|e| Error::Shape(format!("invalid utf-8 in header: {e}")))
}

fn check_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<()> {
    let found = read_array::<4>(r)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[t.data.dtype_code(), t.rank, t.dims.len() as u8])?;
    for &d in &t.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match &t.data {
        TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    check_magic(r, TENSOR_MAGIC)?;
    let dtype = read_u8(r)?;
    let elem = TensorData::elem_size(dtype)?;
    let rank = read_u8(r)?;
    let ndims = read_u8(r)? as usize;
    let dims = (0..ndims)
        .map(|_| {
            let d = read_u64(r)?;
            usize::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} does not fit in memory")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = numel(&dims)?;
    let expected = n
        .checked_mul(elem)
        .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))?;
    let mut buf = Vec::new();
    r.take(expected as u64).read_to_end(&mut buf)?;
    if buf.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            got: buf.len(),
        });
    }
    let data = if dtype == 0 {
        TensorData::F32(
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )
    } else {
        TensorData::F64(
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )
    };
    Tensor::new(rank, dims, data)
}

fn ensure_consumed(r: &mut impl Read) -> Result<()> {
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Shape("trailing bytes after the last record".into()));
    }
    Ok(())
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    ensure_consumed(&mut r)?;
    Ok(t)
}

/// Header text, step and seed followed by named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub seed: u64,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Result<&Tensor> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingBlob(name.to_string()))
    }
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::DuplicateBlob(n.to_string()));
        }
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<()> {
    check_unique(ck.blobs.iter().map(|(n, _)| n.as_str()))?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let cfg = ck.config.as_bytes();
    w.write_all(
        &u32::try_from(cfg.len())
            .map_err(|_| Error::Config("config text too long".into()))?
            .to_le_bytes(),
    )?;
    w.write_all(cfg)?;
    w.write_all(&ck.step.to_le_bytes())?;
    w.write_all(&ck.seed.to_le_bytes())?;
    w.write_all(&(ck.blobs.len() as u32).to_le_bytes())?;
    for (name, t) in &ck.blobs {
        let n = name.as_bytes();
        let len = u16::try_from(n.len()).map_err(|_| Error::Shape(format!("blob name `{name}` too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(n)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    check_magic(r, CHECKPOINT_MAGIC)?;
    let len = read_u32(r)? as usize;
    let config = read_string(r, len)?;
    let step = read_u64(r)?;
    let seed = read_u64(r)?;
    let count = read_u32(r)? as usize;
    let mut blobs: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let len = read_u16(r)? as usize;
        let name = read_string(r, len)?;
        if blobs.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateBlob(name));
        }
        blobs.push((name, read_tensor(r)?));
    }
    Ok(Checkpoint {
        config,
        step,
        seed,
        blobs,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let ck = read_checkpoint(&mut r)?;
    ensure_consumed(&mut r)?;
    Ok(ck)
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
/// Keys outside `allowed` and repeated keys are rejected.
pub fn parse_key_values(text: &str, allowed: &[&str]) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !allowed.contains(&k) {
            return Err(Error::UnknownConfigKey(k.to_string()));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("key `{k}` given twice")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

/// Applies one architecture key; returns false if `key` is not one.
pub fn apply_arch_key(cfg: &mut ArchConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "dim" => cfg.dim = parse_value(key, value)?,
        "layers" => cfg.layers = parse_value(key, value)?,
        "base_scalars" => cfg.base_scalars = parse_value(key, value)?,
        "base_vectors" => cfg.base_vectors = parse_value(key, value)?,
        "base_matrices" => cfg.base_matrices = parse_value(key, value)?,
        "support" => cfg.support = parse_value(key, value)?,
        "radial_samples" => cfg.radial_samples = parse_value(key, value)?,
        "head" => cfg.head = value.parse()?,
        "eps" => cfg.eps = parse_value(key, value)?,
        "seed" => cfg.seed = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub const ARCH_EXTRA_KEYS: [&str; 2] = ["arch", "baseline_width"];

/// Architecture header stored in checkpoints.
pub fn arch_to_text(cfg: &ArchConfig, arch: &Arch) -> String {
    let mut s = cfg.to_text();
    match arch {
        Arch::Equivariant => s.push_str("arch = equivariant\n"),
        Arch::Baseline { width } => s.push_str(&format!("arch = baseline\nbaseline_width = {width}\n")),
    }
    s
}

pub fn arch_from_text(text: &str) -> Result<(ArchConfig, Arch)> {
    let keys: Vec<&str> = ArchConfig::KEYS.iter().chain(&ARCH_EXTRA_KEYS).copied().collect();
    let mut cfg = ArchConfig::default();
    let (mut kind, mut width) = (None, None);
    for (k, v) in parse_key_values(text, &keys)? {
        match k.as_str() {
            "arch" => kind = Some(v),
            "baseline_width" => width = Some(parse_value::<usize>(&k, &v)?),
            _ => {
                apply_arch_key(&mut cfg, &k, &v)?;
            }
        }
    }
    let arch = match (kind.as_deref(), width) {
        (None | Some("equivariant"), None) => Arch::Equivariant,
        (Some("baseline"), Some(width)) => Arch::Baseline { width },
        (Some("baseline"), None) => return Err(Error::Config("baseline checkpoint lacks `baseline_width`".into())),
        (other, _) => return Err(Error::Config(format!("bad architecture header {other:?}"))),
    };
    Ok((cfg, arch))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

/// On-disk dataset: `images.mktn` (batch axis first) plus a label CSV.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Classify(Vec<LabeledImage>),
    Register(Vec<RegistrationSample>),
    Detect(Vec<CellImage>),
}

pub const IMAGES_FILE: &str = "images.mktn";
pub const LABELS_FILE: &str = "labels.csv";

impl Dataset {
    pub fn task(&self) -> &'static str {
        match self {
            Dataset::Classify(_) => "classify",
            Dataset::Register(_) => "register",
            Dataset::Detect(_) => "detect",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Classify(v) => v.len(),
            Dataset::Register(v) => v.len(),
            Dataset::Detect(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn images(&self) -> Vec<&TensorField<f64>> {
        match self {
            Dataset::Classify(v) => v.iter().map(|s| &s.image).collect(),
            Dataset::Register(v) => v.iter().map(|s| &s.volume).collect(),
            Dataset::Detect(v) => v.iter().map(|s| &s.image).collect(),
        }
    }

    fn label_csv(&self, dim: usize) -> String {
        let mut s = String::new();
        match self {
            Dataset::Classify(v) => {
                s.push_str("image_id,label\n");
                for (i, x) in v.iter().enumerate() {
                    s.push_str(&format!("{i},{}\n", x.label));
                }
            }
            Dataset::Register(v) => {
                let mut head = vec!["image_id".to_string()];
                for j in 0..dim {
                    for i in 0..dim {
                        head.push(format!("a{}{}", i + 1, j + 1));
                    }
                }
                head.extend((0..dim).map(|i| format!("t{}", i + 1)));
                s.push_str(&head.join(","));
                s.push('\n');
                for (i, x) in v.iter().enumerate() {
                    let nums: Vec<String> = x.label.to_vec().iter().map(|v| v.to_string()).collect();
                    s.push_str(&format!("{i},{}\n", nums.join(",")));
                }
            }
            Dataset::Detect(v) => {
                s.push_str("image_id,cx,cy,q11,q12,q22,class\n");
                for (i, x) in v.iter().enumerate() {
                    for e in &x.cells {
                        s.push_str(&format!(
                            "{i},{},{},{},{},{},{}\n",
                            e.center[0],
                            e.center[1],
                            e.q[0],
                            e.q[1],
                            e.q[3],
                            e.class.index()
                        ));
                    }
                }
            }
        }
        s
    }
}

/// Writes `images.mktn` and `labels.csv` under `dir`. An empty dataset needs
/// `grid` to record the image shape.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset, grid: &[usize]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let images = data.images();
    let mut dims = vec![images.len()];
    dims.extend_from_slice(grid);
    let mut flat = Vec::with_capacity(numel(&dims)?);
    for im in &images {
        if im.shape().dims() != grid || im.rank() != 0 {
            return Err(Error::Shape(format!(
                "image of shape {:?}, expected {grid:?}",
                im.shape().dims()
            )));
        }
        flat.extend_from_slice(im.data());
    }
    save_tensor(dir.join(IMAGES_FILE), &Tensor::new(0, dims, TensorData::F64(flat))?)?;
    std::fs::write(dir.join(LABELS_FILE), data.label_csv(grid.len()))?;
    Ok(())
}

fn csv_rows(text: &str, header: &str) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    if first.trim() != header {
        return Err(Error::Shape(format!(
            "label file header `{first}`, expected `{header}`"
        )));
    }
    Ok(lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().to_string()).collect())
        .collect())
}

fn image_index(cell: &str, n: usize) -> Result<usize> {
    let i: usize = parse_value("image_id", cell)?;
    if i >= n {
        return Err(Error::Shape(format!("image_id {i} out of range for {n} images")));
    }
    Ok(i)
}

/// Reads a dataset written by [`write_dataset`] for the named task.
pub fn read_dataset(dir: impl AsRef<Path>, task: &str) -> Result<(Dataset, Vec<usize>)> {
    let dir = dir.as_ref();
    let t = load_tensor(dir.join(IMAGES_FILE))?;
    if t.rank != 0 || t.dims.is_empty() {
        return Err(Error::Shape(
            "image container must hold a batch of scalar images".into(),
        ));
    }
    let n = t.dims[0];
    let grid = t.dims[1..].to_vec();
    let shape = GridShape::new(grid.clone())?;
    let flat = t.to_real::<f64>();
    let npix = shape.numel();
    let images: Vec<TensorField<f64>> = (0..n)
        .map(|i| TensorField::new(shape.clone(), 0, flat[i * npix..(i + 1) * npix].to_vec()))
        .collect::<Result<_>>()?;
    let text = read_text(dir.join(LABELS_FILE))?;
    let d = grid.len();
    let ds = match task {
        "classify" => {
            let mut labels = vec![None; n];
            for row in csv_rows(&text, "image_id,label")? {
                if row.len() != 2 {
                    return Err(Error::Shape(format!("label row has {} fields", row.len())));
                }
                labels[image_index(&row[0], n)?] = Some(parse_value::<usize>("label", &row[1])?);
            }
            Dataset::Classify(
                images
                    .into_iter()
                    .zip(labels)
                    .enumerate()
                    .map(|(i, (image, l))| {
                        let label = l.ok_or_else(|| Error::Shape(format!("image {i} has no label")))?;
                        Ok(LabeledImage { image, label })
                    })
                    .collect::<Result<_>>()?,
            )
        }
        "register" => {
            let mut header = vec!["image_id".to_string()];
            for j in 0..d {
                for i in 0..d {
                    header.push(format!("a{}{}", i + 1, j + 1));
                }
            }
            header.extend((0..d).map(|i| format!("t{}", i + 1)));
            let mut labels = vec![None; n];
            for row in csv_rows(&text, &header.join(","))? {
                if row.len() != header.len() {
                    return Err(Error::Shape(format!("label row has {} fields", row.len())));
                }
                let nums = row[1..]
                    .iter()
                    .map(|c| parse_value::<f64>("label", c))
                    .collect::<Result<Vec<_>>>()?;
                labels[image_index(&row[0], n)?] = Some(AffineLabel::from_vec(d, &nums)?);
            }
            Dataset::Register(
                images
                    .into_iter()
                    .zip(labels)
                    .enumerate()
                    .map(|(i, (volume, l))| {
                        let label = l.ok_or_else(|| Error::Shape(format!("volume {i} has no label")))?;
                        Ok(RegistrationSample { volume, label })
                    })
                    .collect::<Result<_>>()?,
            )
        }
        "detect" => {
            let mut cells: Vec<Vec<Ellipse>> = vec![Vec::new(); n];
            for row in csv_rows(&text, "image_id,cx,cy,q11,q12,q22,class")? {
                if row.len() != 7 {
                    return Err(Error::Shape(format!("ellipse row has {} fields", row.len())));
                }
                let v = row[1..6]
                    .iter()
                    .map(|c| parse_value::<f64>("ellipse", c))
                    .collect::<Result<Vec<_>>>()?;
                let class = CellClass::from_index(parse_value("class", &row[6])?)?;
                cells[image_index(&row[0], n)?].push(Ellipse::new(
                    vec![v[0], v[1]],
                    vec![v[2], v[3], v[3], v[4]],
                    class,
                )?);
            }
            Dataset::Detect(
                images
                    .into_iter()
                    .zip(cells)
                    .map(|(image, cells)| CellImage { image, cells })
                    .collect(),
            )
        }
        other => return Err(Error::Config(format!("unknown task `{other}`"))),
    };
    Ok((ds, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect();
        Tensor::new(1, vec![3, 5, 4], TensorData::F64(v)).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        match &t.data {
            TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
            TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
        }
    }

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = random_tensor();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 3 + 3 * 8 + 60 * 8);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(back.dims, t.dims);
        assert_eq!(back.rank, 1);
        let f = Tensor::from_real(0, vec![2], &[1.5f32, -0.25]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &f).unwrap();
        assert_eq!(buf[6], 0);
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn header_errors() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &random_tensor()).unwrap();
        let short = &buf[..buf.len() - 1];
        assert!(matches!(
            read_tensor(&mut &short[..]),
            Err(Error::TruncatedPayload {
                expected: 480,
                got: 479
            })
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut bad = buf.clone();
        bad[6] = 7;
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(Error::UnknownDtype(7))));
        assert!(matches!(read_tensor(&mut &buf[..5]), Err(Error::TruncatedHeader)));
    }

    #[test]
    fn checkpoint_round_trip_and_duplicates() {
        let ck = Checkpoint {
            config: "dim = 2\n".into(),
            step: 42,
            seed: 7,
            blobs: vec![("a".into(), random_tensor()), ("b".into(), random_tensor())],
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), ck);
        let dup = Checkpoint {
            blobs: vec![("a".into(), random_tensor()), ("a".into(), random_tensor())],
            ..ck
        };
        assert!(matches!(write_checkpoint(&mut Vec::new(), &dup), Err(Error::DuplicateBlob(n)) if n == "a"));
        assert!(matches!(dup.blob("zz"), Err(Error::MissingBlob(_))));
    }

    #[test]
    fn config_parsing() {
        let text = "# demo\ndim = 3\nlayers=4 # trailing\n\nhead = register\n";
        let (cfg, arch) = arch_from_text(text).unwrap();
        assert_eq!((cfg.dim, cfg.layers, cfg.head.name()), (3, 4, "register"));
        assert_eq!(arch, Arch::Equivariant);
        let err = arch_from_text("dim = 2\nlayres = 4\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey(k) if k == "layres"));
        assert!(err.to_string().contains("layres"));
        let full = arch_to_text(&cfg, &Arch::Baseline { width: 9 });
        assert_eq!(arch_from_text(&full).unwrap(), (cfg, Arch::Baseline { width: 9 }));
    }

    #[test]
    fn field_round_trip() {
        let f = TensorField::from_fn(GridShape::new(vec![3, 4]).unwrap(), 2, |c, p| {
            (c * 100 + p[0] * 10 + p[1]) as f64
        });
        let t = Tensor::from_field(&f).unwrap();
        assert_eq!(t.dims, vec![3, 4, 2, 2]);
        assert_eq!(t.to_field().unwrap(), f);
    }
}
