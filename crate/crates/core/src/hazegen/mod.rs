//! Paired hazy/clear data from the atmospheric scattering model
//! `I = J * t + A * (1 - t)` with transmission `t = exp(-beta * d)`.

pub mod ppm;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::{fixture, Shape, Tensor};

pub const DEFAULT_T_MIN: f64 = 0.05;

/// Atmospheric light, shared by all channels or per channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Airlight {
    Gray(f64),
    Rgb([f64; 3]),
}

impl Airlight {
    pub fn channel(&self, c: usize) -> f64 {
        match self {
            Airlight::Gray(a) => *a,
            Airlight::Rgb(rgb) => rgb[c],
        }
    }

    fn validate(&self) -> Result<()> {
        if (0..3).all(|c| (0.0..=1.0).contains(&self.channel(c))) {
            Ok(())
        } else {
            Err(Error::invalid(format!("airlight {self} outside [0, 1]")))
        }
    }
}

impl fmt::Display for Airlight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Airlight::Gray(a) => write!(f, "{a}"),
            Airlight::Rgb([r, g, b]) => write!(f, "{r},{g},{b}"),
        }
    }
}

impl FromStr for Airlight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.contains(',') {
            Ok(Airlight::Rgb(kv::array("airlight", s)?))
        } else {
            Ok(Airlight::Gray(kv::value("airlight", s)?))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    pub airlight: Airlight,
    pub beta: f64,
    /// `(1, 1, h, w)`, non-negative.
    pub depth: Tensor,
}

impl HazeParams {
    pub fn transmission(&self) -> Tensor {
        let beta = self.beta;
        self.depth.map(|d| (-beta * d).exp())
    }

    fn check(&self, img: &Tensor) -> Result<()> {
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::invalid(format!(
                "scattering coefficient must be >= 0, got {}",
                self.beta
            )));
        }
        self.airlight.validate()?;
        let (s, d) = (img.shape(), self.depth.shape());
        if s.c != 3 || d.n != 1 || d.c != 1 || (d.h, d.w) != (s.h, s.w) {
            return Err(Error::ShapeMismatch {
                op: "haze",
                left: s,
                right: d,
            });
        }
        Ok(())
    }
}

/// `I = J t + A (1 - t)` for an `(n, 3, h, w)` clear image `J`.
pub fn apply_haze(clear: &Tensor, params: &HazeParams) -> Result<Tensor> {
    params.check(clear)?;
    let t = params.transmission();
    Tensor::from_fn(clear.shape(), |n, c, y, x| {
        let tv = t.at(0, 0, y, x);
        let a = params.airlight.channel(c);
        clear.at(n, c, y, x) * tv + a * (1.0 - tv)
    })
}

/// How [`invert_haze`] treats transmission below `t_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inversion {
    pub t_min: f64,
    /// Raise low transmission to `t_min` instead of failing.
    pub floor: bool,
}

impl Default for Inversion {
    fn default() -> Self {
        Inversion {
            t_min: DEFAULT_T_MIN,
            floor: false,
        }
    }
}

/// `J = (I - A (1 - t)) / t`, clamped to `[0, 1]`.
pub fn invert_haze(hazy: &Tensor, params: &HazeParams, opts: Inversion) -> Result<Tensor> {
    params.check(hazy)?;
    let t = params.transmission();
    if !opts.floor && t.min() < opts.t_min {
        return Err(Error::invalid(format!(
            "transmission {:.4} below floor {}; enable flooring to clamp it",
            t.min(),
            opts.t_min
        )));
    }
    Tensor::from_fn(hazy.shape(), |n, c, y, x| {
        let tv = t.at(0, 0, y, x).max(opts.t_min);
        let a = params.airlight.channel(c);
        ((hazy.at(n, c, y, x) - a * (1.0 - tv)) / tv).clamp(0.0, 1.0)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthStyle {
    /// Linear in the column index.
    Ramp,
    /// Sum of Gaussian bumps.
    Blobs,
    /// Multi-octave value noise.
    PerlinLike,
}

impl DepthStyle {
    pub const ALL: [DepthStyle; 3] = [DepthStyle::Ramp, DepthStyle::Blobs, DepthStyle::PerlinLike];
}

impl fmt::Display for DepthStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthStyle::Ramp => "ramp",
            DepthStyle::Blobs => "blobs",
            DepthStyle::PerlinLike => "perlin_like",
        })
    }
}

impl FromStr for DepthStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(DepthStyle::Ramp),
            "blobs" => Ok(DepthStyle::Blobs),
            "perlin_like" => Ok(DepthStyle::PerlinLike),
            _ => Err(Error::invalid(format!(
                "unknown depth style {s:?}, expected ramp, blobs or perlin_like"
            ))),
        }
    }
}

/// Rescales `f` to span `[0, d_max]` exactly.
fn normalise(f: Vec<f64>, shape: Shape, d_max: f64) -> Tensor {
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = f
        .into_iter()
        .map(|v| if span > 0.0 { d_max * (v - lo) / span } else { 0.0 })
        .collect();
    Tensor::from_parts(shape, data)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic depth field `(1, 1, h, w)` with values in `[0, d_max]`.
pub fn synth_depth(seed: u64, h: usize, w: usize, style: DepthStyle, d_max: f64) -> Result<Tensor> {
    let shape = Shape::new(1, 1, h, w);
    Tensor::zeros(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = || (0..h).flat_map(move |y| (0..w).map(move |x| (y as f64, x as f64)));
    let field: Vec<f64> = match style {
        DepthStyle::Ramp => {
            let denom = (w.max(2) - 1) as f64;
            coords().map(|(_, x)| d_max * x / denom).collect()
        }
        DepthStyle::Blobs => {
            let scale = h.min(w) as f64;
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..=6))
                .map(|_| {
                    (
                        rng.gen_range(0.0..h as f64),
                        rng.gen_range(0.0..w as f64),
                        rng.gen_range(0.1..0.35) * scale,
                        rng.gen_range(0.3..1.0),
                    )
                })
                .collect();
            let f = coords()
                .map(|(y, x)| {
                    blobs
                        .iter()
                        .map(|&(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                        .sum()
                })
                .collect();
            return Ok(normalise(f, shape, d_max));
        }
        DepthStyle::PerlinLike => {
            let mut f = vec![0.0; h * w];
            for (octave, cells) in [2usize, 4, 8].into_iter().enumerate() {
                let amp = 0.5f64.powi(octave as i32);
                let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
                let node = |i: usize, j: usize| lattice[i * (cells + 1) + j];
                for (idx, (y, x)) in coords().enumerate() {
                    let gy = y / h as f64 * cells as f64;
                    let gx = x / w as f64 * cells as f64;
                    let (i, j) = (gy as usize, gx as usize);
                    let (ty, tx) = (smoothstep(gy - i as f64), smoothstep(gx - j as f64));
                    let top = node(i, j) * (1.0 - tx) + node(i, j + 1) * tx;
                    let bottom = node(i + 1, j) * (1.0 - tx) + node(i + 1, j + 1) * tx;
                    f[idx] += amp * (top * (1.0 - ty) + bottom * ty);
                }
            }
            return Ok(normalise(f, shape, d_max));
        }
    };
    Ok(Tensor::from_parts(shape, field))
}

fn random_colour(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

/// A synthetic clear scene: a colour gradient under a faint checkerboard
/// with a few flat-coloured discs and rectangles on top.
pub fn procedural_clear(seed: u64, h: usize, w: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c0, c1) = (random_colour(&mut rng), random_colour(&mut rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let cell = rng.gen_range(4..=16usize);
    let contrast = rng.gen_range(0.0..0.15);
    enum Shape2 {
        Disc { cy: f64, cx: f64, r: f64 },
        Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    }
    let shapes: Vec<(Shape2, [f64; 3])> = (0..rng.gen_range(2..=4))
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape2::Disc {
                    cy: rng.gen_range(0.0..h as f64),
                    cx: rng.gen_range(0.0..w as f64),
                    r: rng.gen_range(0.08..0.3) * h.min(w) as f64,
                }
            } else {
                let (y0, x0) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
                Shape2::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(0.1..0.5) * h as f64,
                    x1: x0 + rng.gen_range(0.1..0.5) * w as f64,
                }
            };
            (shape, random_colour(&mut rng))
        })
        .collect();
    let diag = ((h * h + w * w) as f64).sqrt().max(1.0);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        for (s, col) in shapes.iter().rev() {
            let inside = match *s {
                Shape2::Disc { cy, cx, r } => (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r,
                Shape2::Rect { y0, x0, y1, x1 } => yf >= y0 && yf < y1 && xf >= x0 && xf < x1,
            };
            if inside {
                return col[c];
            }
        }
        let t = (0.5 + (yf * dy + xf * dx) / diag).clamp(0.0, 1.0);
        let check = if (y / cell + x / cell) % 2 == 0 {
            contrast
        } else {
            -contrast
        };
        (c0[c] * (1.0 - t) + c1[c] * t + check).clamp(0.0, 1.0)
    })
}

/// Where clear images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ClearSource {
    Procedural,
    /// PPM files in a directory, used in name order and randomly cropped.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub beta: (f64, f64),
    pub airlight: (f64, f64),
    /// Draw an independent airlight per channel.
    pub rgb_airlight: bool,
    /// Cycled over the samples.
    pub styles: Vec<DepthStyle>,
    pub d_max: f64,
    pub source: ClearSource,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 8,
            size: 64,
            seed: 0,
            beta: (0.5, 2.0),
            airlight: (0.7, 1.0),
            rgb_airlight: false,
            styles: DepthStyle::ALL.to_vec(),
            d_max: 1.0,
            source: ClearSource::Procedural,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    /// `(1, 3, h, w)`
    pub hazy: Tensor,
    pub clear: Tensor,
    pub params: HazeParams,
    pub style: DepthStyle,
    /// Seed of this sample's depth field and procedural scene.
    pub seed: u64,
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no .ppm images found"));
    }
    Ok(files)
}

/// Generates `count` samples. Sample `i` draws from its own random stream,
/// so it does not depend on how many samples precede it.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Vec<PairedSample>> {
    if cfg.beta.0 < 0.0 || cfg.beta.1 < cfg.beta.0 {
        return Err(Error::invalid(format!("bad beta range {:?}", cfg.beta)));
    }
    if !(0.0..=1.0).contains(&cfg.airlight.0)
        || !(0.0..=1.0).contains(&cfg.airlight.1)
        || cfg.airlight.1 < cfg.airlight.0
    {
        return Err(Error::invalid(format!("bad airlight range {:?}", cfg.airlight)));
    }
    if cfg.styles.is_empty() {
        return Err(Error::invalid("at least one depth style is needed"));
    }
    let files = match &cfg.source {
        ClearSource::Procedural => Vec::new(),
        ClearSource::Directory(dir) => list_ppm(dir)?,
    };
    (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let seed: u64 = rng.gen();
            let style = cfg.styles[i % cfg.styles.len()];
            let beta = sample_range(&mut rng, cfg.beta);
            let airlight = if cfg.rgb_airlight {
                Airlight::Rgb([(); 3].map(|_| sample_range(&mut rng, cfg.airlight)))
            } else {
                Airlight::Gray(sample_range(&mut rng, cfg.airlight))
            };
            let clear = match &cfg.source {
                ClearSource::Procedural => procedural_clear(seed, cfg.size, cfg.size)?,
                ClearSource::Directory(_) => {
                    let path = &files[i % files.len()];
                    let img = ppm::read(path)?;
                    let s = img.shape();
                    if s.h < cfg.size || s.w < cfg.size {
                        return Err(Error::format(
                            path,
                            format!("image {}x{} smaller than {}", s.h, s.w, cfg.size),
                        ));
                    }
                    let y0 = rng.gen_range(0..=s.h - cfg.size);
                    let x0 = rng.gen_range(0..=s.w - cfg.size);
                    img.crop(y0, x0, cfg.size, cfg.size)?
                }
            };
            let params = HazeParams {
                airlight,
                beta,
                depth: synth_depth(seed, cfg.size, cfg.size, style, cfg.d_max)?,
            };
            Ok(PairedSample {
                id: format!("{i:05}"),
                hazy: apply_haze(&clear, &params)?,
                clear,
                params,
                style,
                seed,
            })
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# id beta A depth_style seed";

/// Writes `{id}_hazy.ppm`, `{id}_clear.ppm`, lossless `.mdt` copies of both
/// plus `{id}_depth.mdt`, and the manifest.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[PairedSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for s in samples {
        ppm::write(dir.join(format!("{}_hazy.ppm", s.id)), &s.hazy)?;
        ppm::write(dir.join(format!("{}_clear.ppm", s.id)), &s.clear)?;
        fixture::write(dir.join(format!("{}_hazy.mdt", s.id)), &s.hazy)?;
        fixture::write(dir.join(format!("{}_clear.mdt", s.id)), &s.clear)?;
        fixture::write(dir.join(format!("{}_depth.mdt", s.id)), &s.params.depth)?;
        manifest.push_str(&format!(
            "{} {} {} {} {}\n",
            s.id, s.params.beta, s.params.airlight, s.style, s.seed
        ));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn load_image(dir: &Path, id: &str, kind: &str) -> Result<Tensor> {
    let mdt = dir.join(format!("{id}_{kind}.mdt"));
    if mdt.exists() {
        fixture::read(mdt)
    } else {
        ppm::read(dir.join(format!("{id}_{kind}.ppm")))
    }
}

/// Loads a directory written by [`write_dataset`], preferring the lossless
/// `.mdt` copies.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::format(&path, format!("line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, beta, a, style, seed] = fields[..] else {
            return Err(bad("expected 5 fields: id beta A depth_style seed"));
        };
        let beta: f64 = beta.parse().map_err(|_| bad("bad beta"))?;
        let airlight: Airlight = a.parse().map_err(|_| bad("bad airlight"))?;
        let style: DepthStyle = style.parse().map_err(|_| bad("bad depth style"))?;
        let seed: u64 = seed.parse().map_err(|_| bad("bad seed"))?;
        let hazy = load_image(dir, id, "hazy")?;
        let clear = load_image(dir, id, "clear")?;
        if hazy.shape() != clear.shape() {
            return Err(bad("hazy and clear shapes differ"));
        }
        let depth_path = dir.join(format!("{id}_depth.mdt"));
        let depth = if depth_path.exists() {
            fixture::read(depth_path)?
        } else {
            Tensor::zeros(Shape::new(1, 1, hazy.shape().h, hazy.shape().w))?
        };
        out.push(PairedSample {
            id: id.to_owned(),
            hazy,
            clear,
            params: HazeParams { airlight, beta, depth },
            style,
            seed,
        });
    }
    if out.is_empty() {
        return Err(Error::format(&path, "manifest lists no samples"));
    }
    Ok(out)
}
