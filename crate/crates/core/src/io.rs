//! Point cloud files, parameter files and run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::model::ModelConfig;
use crate::params::Parameters;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
}

impl CloudFormat {
    /// `.ply` is PLY, anything else is XYZ.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => CloudFormat::PlyAscii,
            _ => CloudFormat::Xyz,
        }
    }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("`{tok}` is not a number"),
    })
}

/// One point per line, first three whitespace-separated fields are
/// `x y z`; further fields are ignored. Blank lines and lines starting with
/// `#` are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud<f64>> {
    let mut pts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 coordinates, found {}", toks.len()),
            });
        }
        pts.push([parse_coord(toks[0], i + 1)?, parse_coord(toks[1], i + 1)?, parse_coord(toks[2], i + 1)?]);
    }
    if pts.is_empty() {
        return Err(Error::EmptyInput("xyz file has no points"));
    }
    PointCloud::new(pts)
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
    has_list: bool,
}

/// ASCII PLY. Only the `vertex` element is read; its `x`, `y`, `z`
/// properties give the coordinates and any others are ignored.
pub fn parse_ply(text: &str) -> Result<PointCloud<f64>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let perr = |line: usize, message: &str| Error::Parse {
        line,
        message: message.to_string(),
    };
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(perr(n, "missing `ply` magic")),
        None => return Err(Error::EmptyInput("ply file is empty")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    let mut last_line = 1;
    for (n, line) in lines.by_ref() {
        last_line = n;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(perr(n, &format!("unsupported format `{other}`, only ascii is read"))),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| perr(n, "bad element count"))?,
                props: Vec::new(),
                has_list: false,
            }),
            ["property", "list", _, _, name] => {
                let e = elements.last_mut().ok_or_else(|| perr(n, "property before any element"))?;
                e.props.push(name.to_string());
                e.has_list = true;
            }
            ["property", _, name] => {
                let e = elements.last_mut().ok_or_else(|| perr(n, "property before any element"))?;
                e.props.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(perr(n, &format!("unrecognized header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(perr(last_line, "header has no end_header"));
    }
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| perr(last_line, "no vertex element"))?;
    let v = &elements[vi];
    if v.has_list {
        return Err(perr(last_line, "list property on vertex element"));
    }
    let axis = |name: &str| {
        v.props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| perr(last_line, &format!("vertex element lacks `{name}`")))
    };
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);
    let skip: usize = elements[..vi].iter().map(|e| e.count).sum();

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for _ in 0..skip {
        body.next().ok_or_else(|| perr(last_line, "file ends before vertex data"))?;
    }
    let mut pts: Vec<Point<f64>> = Vec::with_capacity(v.count);
    for k in 0..v.count {
        let (n, line) = body
            .next()
            .ok_or_else(|| perr(last_line, &format!("expected {} vertices, found {k}", v.count)))?;
        last_line = n;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != v.props.len() {
            return Err(perr(n, &format!("expected {} values, found {}", v.props.len(), toks.len())));
        }
        pts.push([parse_coord(toks[ix], n)?, parse_coord(toks[iy], n)?, parse_coord(toks[iz], n)?]);
    }
    if pts.is_empty() {
        return Err(Error::EmptyInput("ply file has no vertices"));
    }
    PointCloud::new(pts)
}

pub fn load_pointcloud(path: &Path, format: CloudFormat) -> Result<PointCloud<f64>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    match format {
        CloudFormat::Xyz => parse_xyz(&text),
        CloudFormat::PlyAscii => parse_ply(&text),
    }
}

pub const PARAM_MAGIC: &[u8; 8] = b"DSCNPRM\0";
pub const PARAM_VERSION: u32 = 1;

/// Parameter file layout, all integers little-endian:
///
/// ```text
/// magic[8] version:u32 count:u32
/// count × { name_len:u32 name[name_len] ndim:u32 dims:u64[ndim] data:f64[prod(dims)] }
/// ```
pub fn encode_params<P: Parameters<f64> + ?Sized>(params: &P) -> Vec<u8> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    params.visit("", &mut |name, shape, v| arrays.push((name.to_string(), shape.to_vec(), v.to_vec())));
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, data) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Load(format!("truncated file while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != PARAM_MAGIC {
        return Err(Error::Load("not a parameter file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != PARAM_VERSION {
        return Err(Error::Load(format!("unsupported version {version}, expected {PARAM_VERSION}")));
    }
    let count = r.u32("array count")? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Load("array name is not utf-8".into()))?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::new();
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64("dimension")?).map_err(|_| Error::Load(format!("dimension of `{name}` too large")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Load(format!("size of `{name}` overflows")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Load(format!("size of `{name}` overflows")))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(NamedArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Load(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Fills `params` from an encoded file. Names and shapes must match the
/// arrays `params` visits, in order.
pub fn decode_params<P: Parameters<f64> + ?Sized>(bytes: &[u8], params: &mut P) -> Result<()> {
    let arrays = decode_arrays(bytes)?;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    params.visit("", &mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    if arrays.len() != expected.len() {
        return Err(Error::Load(format!("file holds {} arrays, expected {}", arrays.len(), expected.len())));
    }
    for (a, (name, shape)) in arrays.iter().zip(&expected) {
        if &a.name != name {
            return Err(Error::Load(format!("expected array `{name}`, found `{}`", a.name)));
        }
        if &a.shape != shape {
            return Err(Error::ArrayShape {
                name: name.clone(),
                expected: shape.clone(),
                found: a.shape.clone(),
            });
        }
    }
    let mut it = arrays.into_iter();
    params.visit_mut("", &mut |_, _, v| {
        let a = it.next().expect("counted above");
        v.copy_from_slice(&a.data);
    });
    Ok(())
}

pub fn save_params<P: Parameters<f64> + ?Sized>(path: &Path, params: &P) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| io_err(path, e))
}

pub fn load_params<P: Parameters<f64> + ?Sized>(path: &Path, params: &mut P) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_params(&bytes, params)
}

/// Every tunable of a run. Text form is `key = value` per line, `#`
/// comments allowed; unknown keys are an error.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n_groups: usize,
    pub group_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub k_q: usize,
    pub k_r: usize,
    pub radius: f64,
    pub sigma_s: f64,
    pub sigma_t: f64,
    pub kernel_width: usize,
    pub d_state: usize,
    pub hilbert_order: u32,
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig::from_model(&m, 0)
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad value `{value}` for `{key}`"),
    })
}

impl RunConfig {
    pub fn from_model(m: &ModelConfig, seed: u64) -> Self {
        let d = &m.block.deform;
        RunConfig {
            n_groups: m.embed.n_groups,
            group_size: m.embed.group_size,
            dim: m.embed.dim,
            hidden: m.embed.hidden,
            depth: m.depth,
            k_q: d.k_q,
            k_r: d.k_r,
            radius: d.radius,
            sigma_s: d.sigma_s,
            sigma_t: d.sigma_t,
            kernel_width: d.kernel_width,
            d_state: m.block.d_state,
            hilbert_order: m.hilbert_order,
            seed,
            input: None,
            params: None,
            output: None,
        }
    }

    /// Small defaults suited to the command line and tests.
    pub fn toy() -> Self {
        RunConfig::from_model(&ModelConfig::toy(), 0)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::toy();
        m.embed.n_groups = self.n_groups;
        m.embed.group_size = self.group_size;
        m.embed.dim = self.dim;
        m.embed.hidden = self.hidden;
        m.block = crate::block::BlockConfig::new(self.dim);
        m.block.d_state = self.d_state;
        m.block.deform.k_q = self.k_q;
        m.block.deform.k_r = self.k_r;
        m.block.deform.radius = self.radius;
        m.block.deform.sigma_s = self.sigma_s;
        m.block.deform.sigma_t = self.sigma_t;
        m.block.deform.kernel_width = self.kernel_width;
        m.depth = self.depth;
        m.hilbert_order = self.hilbert_order;
        m.validate()?;
        Ok(m)
    }

    /// Parses over `base`, so a file only needs the keys it changes.
    pub fn parse_over(text: &str, base: RunConfig) -> Result<Self> {
        let mut c = base;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "n_groups" => c.n_groups = parse_value(key, value, n)?,
                "group_size" => c.group_size = parse_value(key, value, n)?,
                "dim" => c.dim = parse_value(key, value, n)?,
                "hidden" => c.hidden = parse_value(key, value, n)?,
                "depth" => c.depth = parse_value(key, value, n)?,
                "k_q" => c.k_q = parse_value(key, value, n)?,
                "k_r" => c.k_r = parse_value(key, value, n)?,
                "radius" => c.radius = parse_value(key, value, n)?,
                "sigma_s" => c.sigma_s = parse_value(key, value, n)?,
                "sigma_t" => c.sigma_t = parse_value(key, value, n)?,
                "kernel_width" => c.kernel_width = parse_value(key, value, n)?,
                "d_state" => c.d_state = parse_value(key, value, n)?,
                "hilbert_order" => c.hilbert_order = parse_value(key, value, n)?,
                "seed" => c.seed = parse_value(key, value, n)?,
                "input" => c.input = Some(PathBuf::from(value)),
                "params" => c.params = Some(PathBuf::from(value)),
                "output" => c.output = Some(PathBuf::from(value)),
                _ => {
                    return Err(Error::Parse {
                        line: n,
                        message: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        c.model_config()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "n_groups = {}\ngroup_size = {}\ndim = {}\nhidden = {}\ndepth = {}\nk_q = {}\nk_r = {}\nradius = {}\nsigma_s = {}\nsigma_t = {}\nkernel_width = {}\nd_state = {}\nhilbert_order = {}\nseed = {}\n",
            self.n_groups,
            self.group_size,
            self.dim,
            self.hidden,
            self.depth,
            self.k_q,
            self.k_r,
            self.radius,
            self.sigma_s,
            self.sigma_t,
            self.kernel_width,
            self.d_state,
            self.hilbert_order,
            self.seed
        );
        for (k, v) in [("input", &self.input), ("params", &self.params), ("output", &self.output)] {
            if let Some(p) = v {
                s.push_str(&format!("{k} = {}\n", p.display()));
            }
        }
        s
    }

    pub fn load(path: &Path, base: RunConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse_over(&text, base)
    }
}
